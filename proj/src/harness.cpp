#include "corgcn/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

#include "corgcn/kernels.hpp"

namespace corgcn {

namespace {

// Independent deterministic streams per seed: 0 = parameter init, 1 = dropout,
// 2 = prototype clustering.
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) {
  return (seed + 0x9E3779B97F4A7C15ULL) ^ (stream * 0xBF58476D1CE4E5B9ULL + stream);
}

constexpr double kProbClamp = 1e-7;

}  // namespace

// ---------------------------------------------------------------------------
// Config

Config Config::from_json(const nlohmann::json& j) {
  static const std::set<std::string> known = {
      "lr",        "lambda",   "gamma",         "d",
      "dropout",   "layers",   "epochs",        "batch_size",
      "macro_k",   "seeds",    "ablation",      "rebuild_every",
      "per_view_weights",      "pretrain_epochs", "data", "out"};
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (!known.count(key)) throw std::invalid_argument("config: unknown key '" + key + "'");
  }
  Config cfg;
  if (j.contains("lr")) cfg.lr = j["lr"].get<double>();
  if (j.contains("lambda")) cfg.top_lambda = j["lambda"].get<std::size_t>();
  if (j.contains("gamma")) cfg.gamma = j["gamma"].get<double>();
  if (j.contains("d")) cfg.dim = j["d"].get<std::size_t>();
  if (j.contains("dropout")) cfg.dropout = j["dropout"].get<double>();
  if (j.contains("layers")) cfg.layers = j["layers"].get<std::size_t>();
  if (j.contains("epochs")) cfg.epochs = j["epochs"].get<std::size_t>();
  if (j.contains("batch_size")) cfg.batch_size = j["batch_size"].get<std::size_t>();
  if (j.contains("macro_k") && !j["macro_k"].is_null()) {
    cfg.macro_k = j["macro_k"].get<std::size_t>();
  }
  if (j.contains("seeds")) cfg.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
  if (j.contains("ablation")) cfg.ablation = j["ablation"].get<std::string>();
  if (j.contains("rebuild_every")) cfg.rebuild_every = j["rebuild_every"].get<std::size_t>();
  if (j.contains("per_view_weights")) cfg.per_view_weights = j["per_view_weights"].get<bool>();
  if (j.contains("pretrain_epochs")) cfg.pretrain_epochs = j["pretrain_epochs"].get<std::size_t>();
  if (j.contains("data")) cfg.data = j["data"].get<std::string>();
  if (j.contains("out")) cfg.out = j["out"].get<std::string>();
  cfg.validate();
  return cfg;
}

Config Config::from_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path.string() + ": cannot open config file");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": invalid JSON: " + e.what());
  }
  return from_json(j);
}

nlohmann::json Config::to_json() const {
  nlohmann::json j;
  j["lr"] = lr;
  j["lambda"] = top_lambda;
  j["gamma"] = gamma;
  j["d"] = dim;
  j["dropout"] = dropout;
  j["layers"] = layers;
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  if (macro_k) j["macro_k"] = *macro_k; else j["macro_k"] = nullptr;
  j["seeds"] = seeds;
  j["ablation"] = ablation;
  j["rebuild_every"] = rebuild_every;
  j["per_view_weights"] = per_view_weights;
  j["pretrain_epochs"] = pretrain_epochs;
  j["data"] = data;
  j["out"] = out;
  return j;
}

void Config::validate() const {
  if (lr <= 0.0) throw std::invalid_argument("config: lr must be positive");
  if (top_lambda < 1) throw std::invalid_argument("config: lambda must be >= 1");
  if (gamma < 0.0) throw std::invalid_argument("config: gamma must be >= 0");
  if (dim < 1) throw std::invalid_argument("config: d must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("config: dropout in [0, 1)");
  if (layers < 1) throw std::invalid_argument("config: layers must be >= 1");
  if (epochs < 1) throw std::invalid_argument("config: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
  if (rebuild_every < 1) throw std::invalid_argument("config: rebuild_every must be >= 1");
  if (seeds.empty()) throw std::invalid_argument("config: need at least one seed");
  if (macro_k && *macro_k < 1) throw std::invalid_argument("config: macro_k must be >= 1");
  parse_ablation(ablation);
}

// ---------------------------------------------------------------------------
// Ablations

Ablation parse_ablation(const std::string& mode) {
  if (mode == "none") return Ablation::none;
  if (mode == "no-cgd") return Ablation::no_cgd;
  if (mode == "no-cfd") return Ablation::no_cfd;
  if (mode == "no-csd") return Ablation::no_csd;
  if (mode == "no-intra") return Ablation::no_intra;
  if (mode == "no-inter") return Ablation::no_inter;
  throw std::invalid_argument("unknown ablation mode '" + mode + "'");
}

PipelineOptions apply_ablation(Ablation mode) {
  PipelineOptions o;
  switch (mode) {
    case Ablation::none:
      break;
    case Ablation::no_cgd:
      o.decompose = false;
      break;
    case Ablation::no_cfd:
      o.correlated_structure = false;
      break;
    case Ablation::no_csd:
      o.learn_structure = false;
      break;
    case Ablation::no_intra:
      o.merge_message_passing = true;
      break;
    case Ablation::no_inter:
      o.inter_label = false;
      break;
  }
  return o;
}

// ---------------------------------------------------------------------------
// Model

Model Model::init(const Config& cfg, const PipelineOptions& options, std::size_t feature_dim,
                  std::size_t label_count, Rng& rng) {
  Model m;
  m.options = options;
  m.feature_dim = feature_dim;
  m.embed_dim = cfg.dim;
  m.label_count = label_count;
  m.layers = cfg.layers;
  m.per_view_weights = options.decompose && cfg.per_view_weights;

  const auto weight = [&rng](std::size_t in, std::size_t out) {
    return Tensor::randn(in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng, true);
  };

  if (options.decompose) {
    m.view_count = label_count;
    m.feature_transform = weight(feature_dim, m.embed_dim);
    m.prototypes = PrototypeSet::init(label_count, m.embed_dim, rng);
    m.decoder = Decoder::init(m.embed_dim, label_count, rng);
    const std::size_t per_layer = m.per_view_weights ? m.view_count + 1 : 1;
    for (std::size_t l = 0; l < m.layers; ++l)
      for (std::size_t v = 0; v < per_layer; ++v)
        m.conv_weights.push_back(weight(m.embed_dim, m.embed_dim));
    m.attn_query = weight(m.embed_dim, m.embed_dim);
    m.attn_key = weight(m.embed_dim, m.embed_dim);
    m.attn_value = weight(m.embed_dim, m.embed_dim);
    m.classifier_weight = weight(2 * m.embed_dim, label_count);
    m.classifier_bias = Tensor::zeros(1, label_count, true);
  } else {
    m.view_count = 0;
    for (std::size_t l = 0; l < m.layers; ++l)
      m.conv_weights.push_back(l == 0 ? weight(feature_dim, m.embed_dim)
                                      : weight(m.embed_dim, m.embed_dim));
    m.classifier_weight = weight(m.embed_dim, label_count);
    m.classifier_bias = Tensor::zeros(1, label_count, true);
  }
  return m;
}

void Model::adopt_macro_prototypes(PrototypeSet macro, Rng& rng) {
  if (!options.decompose) throw std::logic_error("macro prototypes need the decomposed pipeline");
  view_count = macro.count();
  prototypes = std::move(macro);
  decoder = Decoder::init(embed_dim, view_count, rng);
  if (per_view_weights) {
    conv_weights.clear();
    for (std::size_t l = 0; l < layers; ++l)
      for (std::size_t v = 0; v < view_count + 1; ++v)
        conv_weights.push_back(Tensor::randn(
            embed_dim, embed_dim, 1.0 / std::sqrt(static_cast<double>(embed_dim)), rng, true));
  }
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> out;
  for (const auto& [name, tensor] : named_parameters()) {
    (void)name;
    out.push_back(tensor);
  }
  return out;
}

std::vector<std::pair<std::string, Tensor>> Model::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  if (options.decompose) {
    out.emplace_back("feature_transform", feature_transform);
    out.emplace_back("label_prototypes", prototypes.vectors);
    out.emplace_back("decoder_weight", decoder.weight);
    out.emplace_back("decoder_bias", decoder.bias);
  }
  const std::size_t per_layer = per_view_weights ? view_count + 1 : 1;
  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t v = 0; v < per_layer; ++v) {
      std::ostringstream name;
      name << "conv_weight_" << l;
      if (per_view_weights) name << "_view_" << v;
      out.emplace_back(name.str(), conv_weights[l * per_layer + v]);
    }
  }
  if (options.decompose) {
    out.emplace_back("attn_query_weight", attn_query);
    out.emplace_back("attn_key_weight", attn_key);
    out.emplace_back("attn_value_weight", attn_value);
  }
  out.emplace_back("classifier_weight", classifier_weight);
  out.emplace_back("classifier_bias", classifier_bias);
  return out;
}

std::span<const Tensor> Model::layer_weights(std::size_t layer) const {
  const std::size_t per_layer = per_view_weights ? view_count + 1 : 1;
  return {conv_weights.data() + layer * per_layer, per_layer};
}

// ---------------------------------------------------------------------------
// Forward

Forward forward_pass(Tape& tape, const Model& model, const Tensor& features,
                     const DecomposedGraphSet& cdg, double dropout_rate, Rng& dropout_rng) {
  Forward result;
  std::vector<Tensor> stack;
  if (model.options.decompose) {
    result.transformed = tape.matmul(features, model.feature_transform);
    ProjectedFeatures projected = project_features(tape, result.transformed, model.prototypes);
    stack.reserve(model.view_count + 1);
    stack.push_back(result.transformed);
    for (auto& view : projected.views) stack.push_back(std::move(view));
  } else {
    stack.push_back(features);
  }
  if (stack.size() != cdg.views.size()) {
    throw std::invalid_argument("forward_pass: structure was built for a different view count");
  }
  for (std::size_t l = 0; l < model.layers; ++l) {
    if (l > 0 && dropout_rate > 0.0) {
      for (auto& t : stack) t = tape.dropout(t, dropout_rate, dropout_rng);
    }
    auto next = intra_label_layer(tape, stack, cdg, model.layer_weights(l));
    if (model.options.decompose && model.options.inter_label) {
      next = inter_label_propagation(tape, next, model.prototypes.vectors, model.attn_query,
                                     model.attn_key, model.attn_value);
    }
    stack = std::move(next);
  }
  if (model.options.decompose) {
    result.probabilities = aggregate_and_predict(tape, stack, model.prototypes.vectors,
                                                 model.classifier_weight, model.classifier_bias);
  } else {
    result.probabilities = tape.sigmoid(
        tape.add_rowvec(tape.matmul(stack[0], model.classifier_weight), model.classifier_bias));
  }
  return result;
}

DecomposedGraphSet build_structure(const Model& model, const Dataset& data, const Config& cfg) {
  if (!model.options.decompose) return replicate_original(data.graph, 0);
  if (!model.options.learn_structure) {
    DecomposedGraphSet cdg = replicate_original(data.graph, model.view_count);
    if (model.options.merge_message_passing) cdg = merge_views(cdg);
    return cdg;
  }
  const BatchPlan plan = BatchPlan::default_plan(data.graph.n, cfg.batch_size);
  DecomposedGraphSet cdg;
  if (model.options.correlated_structure) {
    ValueMatrix transformed;
    transformed.rows = data.features.n;
    transformed.cols = model.embed_dim;
    transformed.values.resize(transformed.rows * transformed.cols);
    kernels::matmul(data.features.values.data(), model.feature_transform.data().data(),
                    transformed.values.data(), data.features.n, data.features.f,
                    model.embed_dim);
    cdg = build_cdg(data.graph, transformed, ValueMatrix::from_tensor(model.prototypes.vectors),
                    cfg.top_lambda, plan);
  } else {
    cdg = build_cdg_shared_structure(data.graph, ValueMatrix::from_features(data.features),
                                     model.view_count, cfg.top_lambda, plan);
  }
  if (model.options.merge_message_passing) cdg = merge_views(cdg);
  return cdg;
}

// ---------------------------------------------------------------------------
// Losses

Tensor classification_loss(Tape& tape, const Tensor& probabilities, const LabelMatrix& labels,
                           std::span<const std::size_t> batch) {
  if (batch.empty()) throw std::invalid_argument("classification_loss: empty batch");
  const std::size_t k = labels.k;
  if (probabilities.cols() != k) {
    throw std::invalid_argument("classification_loss: label count mismatch");
  }
  std::vector<double> pos(batch.size() * k), neg(batch.size() * k);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const bool y = labels.is_positive(batch[i], j);
      pos[i * k + j] = y ? 1.0 : 0.0;
      neg[i * k + j] = y ? 0.0 : 1.0;
    }
  }
  const Tensor y_pos = Tensor::from_values(batch.size(), k, std::move(pos));
  const Tensor y_neg = Tensor::from_values(batch.size(), k, std::move(neg));
  const Tensor p = tape.clamp(tape.gather_rows(probabilities, batch), kProbClamp,
                              1.0 - kProbClamp);
  const Tensor ll = tape.add(tape.mul(y_pos, tape.log(p)),
                             tape.mul(y_neg, tape.log(tape.affine(p, -1.0, 1.0))));
  return tape.affine(tape.sum(ll),
                     -1.0 / (static_cast<double>(batch.size()) * static_cast<double>(k)), 0.0);
}

Tensor total_loss(Tape& tape, const Tensor& cls, const Tensor& cmi, const Tensor& lm,
                  double* alpha_out, double* beta_out) {
  const double cls_value = cls.value();
  const double cmi_value = cmi.value();
  const double lm_value = lm.value();
  const double alpha =
      std::abs(cmi_value) < 1e-12 ? 0.0 : std::abs(cls_value / (3.0 * cmi_value));
  const double beta = std::abs(lm_value) < 1e-12 ? 0.0 : std::abs(cls_value / (3.0 * lm_value));
  if (alpha_out) *alpha_out = alpha;
  if (beta_out) *beta_out = beta;
  return tape.add(cls, tape.add(tape.affine(cmi, alpha, 0.0), tape.affine(lm, beta, 0.0)));
}

// ---------------------------------------------------------------------------
// Training

namespace {

using Snapshot = std::vector<std::vector<double>>;

Snapshot take_snapshot(const Model& model) {
  Snapshot snap;
  for (const auto& p : model.parameters()) snap.emplace_back(p.data().begin(), p.data().end());
  return snap;
}

void restore_snapshot(Model& model, const Snapshot& snap) {
  auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto values = params[i].raw();
    std::copy(snap[i].begin(), snap[i].end(), values.begin());
  }
}

void extract_rows(std::span<const double> probs, const LabelMatrix& labels,
                  std::span<const std::size_t> indices, std::vector<double>& scores,
                  std::vector<std::uint8_t>& targets) {
  const std::size_t k = labels.k;
  scores.resize(indices.size() * k);
  targets.resize(indices.size() * k);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      scores[i * k + j] = probs[indices[i] * k + j];
      targets[i * k + j] = labels.values[indices[i] * k + j];
    }
  }
}

MetricsReport metrics_on(const Tensor& probabilities, const LabelMatrix& labels,
                         std::span<const std::size_t> indices,
                         std::vector<double>* class_auc = nullptr) {
  std::vector<double> scores;
  std::vector<std::uint8_t> targets;
  extract_rows(probabilities.data(), labels, indices, scores, targets);
  if (class_auc) *class_auc = per_class_auc(scores, targets, indices.size(), labels.k);
  return compute_metrics(scores, targets, indices.size(), labels.k);
}

struct SeedOutcome {
  SeedResult result;
  Model model;
};

SeedOutcome run_seed(const Config& cfg, const Dataset& data, const PipelineOptions& options,
                     std::uint64_t seed) {
  SeedOutcome outcome;
  SeedResult& result = outcome.result;
  result.seed = seed;
  result.split = data.split ? *data.split : make_split(data.labels, seed);

  Rng init_rng(stream_seed(seed, 0));
  Rng dropout_rng(stream_seed(seed, 1));
  Model& model = outcome.model;
  model = Model::init(cfg, options, data.features.f, data.labels.k, init_rng);
  const Tensor features =
      Tensor::from_values(data.features.n, data.features.f, data.features.values);

  Tape tape;
  LabelMatrix aux_labels = data.labels;

  if (cfg.macro_k && options.decompose) {
    if (*cfg.macro_k >= data.labels.k) {
      throw std::invalid_argument("macro_k must be smaller than the label count");
    }
    // Pre-train the transformation, prototypes, and decoder before clustering.
    const ClassWeights rho_pre = class_weights(data.labels, result.split.train);
    Adam pre_optimizer({model.feature_transform, model.prototypes.vectors, model.decoder.weight,
                        model.decoder.bias},
                       AdamConfig{cfg.lr});
    for (std::size_t epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
      tape.set_training(true);
      const Tensor transformed = tape.matmul(features, model.feature_transform);
      const Tensor cmi =
          contrastive_loss(tape, transformed, model.prototypes, data.labels, result.split.train);
      const Tensor lm = focal_likelihood_loss(tape, transformed, model.prototypes, data.labels,
                                              model.decoder, rho_pre, cfg.gamma,
                                              result.split.train);
      tape.backward(tape.add(cmi, lm));
      pre_optimizer.step();
    }
    auto macro = macro_prototypes(model.prototypes, *cfg.macro_k, stream_seed(seed, 2));
    model.adopt_macro_prototypes(std::move(macro.prototypes), init_rng);
    aux_labels = macro_labels(data.labels, model.prototypes.label_to_macro, *cfg.macro_k);
  }

  const ClassWeights rho =
      options.decompose ? class_weights(aux_labels, result.split.train) : ClassWeights{};
  Adam optimizer(model.parameters(), AdamConfig{cfg.lr});

  DecomposedGraphSet cdg;
  double best_val = -std::numeric_limits<double>::infinity();
  Snapshot best_params;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const bool structure_moves =
        options.decompose && options.learn_structure && options.correlated_structure;
    if (epoch == 0 || (structure_moves && epoch % cfg.rebuild_every == 0)) {
      cdg = build_structure(model, data, cfg);
    }

    tape.set_training(true);
    const Forward fwd = forward_pass(tape, model, features, cdg, cfg.dropout, dropout_rng);
    const Tensor cls = classification_loss(tape, fwd.probabilities, data.labels,
                                           result.split.train);
    EpochRecord record;
    record.loss_cls = cls.value();
    Tensor loss;
    if (options.decompose) {
      const Tensor cmi = contrastive_loss(tape, fwd.transformed, model.prototypes, aux_labels,
                                          result.split.train);
      const Tensor lm = focal_likelihood_loss(tape, fwd.transformed, model.prototypes,
                                              aux_labels, model.decoder, rho, cfg.gamma,
                                              result.split.train);
      record.loss_cmi = cmi.value();
      record.loss_lm = lm.value();
      loss = total_loss(tape, cls, cmi, lm);
    } else {
      loss = cls;
    }
    if (!std::isfinite(loss.value())) {
      throw std::runtime_error("seed " + std::to_string(seed) + " diverged at epoch " +
                               std::to_string(epoch) + " (non-finite loss)");
    }
    tape.backward(loss);
    optimizer.step();

    tape.set_training(false);
    {
      NoGradGuard guard(tape);
      const Forward eval_fwd = forward_pass(tape, model, features, cdg, cfg.dropout, dropout_rng);
      record.val = metrics_on(eval_fwd.probabilities, data.labels, result.split.val);
    }
    result.history.push_back(record);
    if (record.val.micro_auc > best_val) {
      best_val = record.val.micro_auc;
      best_params = take_snapshot(model);
      result.best_epoch = epoch;
    }
  }

  restore_snapshot(model, best_params);
  // Inference-time structure derives from the selected parameters.
  cdg = build_structure(model, data, cfg);
  tape.set_training(false);
  {
    NoGradGuard guard(tape);
    const Forward fwd = forward_pass(tape, model, features, cdg, cfg.dropout, dropout_rng);
    result.test = metrics_on(fwd.probabilities, data.labels, result.split.test,
                             &result.test_class_auc);
  }
  return outcome;
}

void aggregate_metrics(RunRecord& record) {
  const auto fields = [](const MetricsReport& m) {
    return std::array<double, 7>{m.ranking_loss, m.hamming_loss, m.macro_auc, m.micro_auc,
                                 m.macro_ap,     m.micro_ap,     m.lrap};
  };
  const auto assign = [](MetricsReport& m, const std::array<double, 7>& v) {
    m.ranking_loss = v[0];
    m.hamming_loss = v[1];
    m.macro_auc = v[2];
    m.micro_auc = v[3];
    m.macro_ap = v[4];
    m.micro_ap = v[5];
    m.lrap = v[6];
  };
  std::array<double, 7> mean{}, var{};
  const double n = static_cast<double>(record.per_seed.size());
  for (const auto& s : record.per_seed) {
    const auto v = fields(s.test);
    for (std::size_t i = 0; i < 7; ++i) mean[i] += v[i] / n;
  }
  for (const auto& s : record.per_seed) {
    const auto v = fields(s.test);
    for (std::size_t i = 0; i < 7; ++i) var[i] += (v[i] - mean[i]) * (v[i] - mean[i]) / n;
  }
  std::array<double, 7> stddev{};
  for (std::size_t i = 0; i < 7; ++i) stddev[i] = std::sqrt(var[i]);
  assign(record.mean, mean);
  assign(record.stddev, stddev);
  record.stddev_degenerate = record.per_seed.size() < 2;
}

}  // namespace

RunRecord train(const Config& cfg) { return train(cfg, load_dataset(cfg.data)); }

RunRecord train(const Config& cfg, const Dataset& data) {
  cfg.validate();
  const PipelineOptions options = apply_ablation(parse_ablation(cfg.ablation));
  RunRecord record;
  std::vector<SeedOutcome> outcomes;
  for (const std::uint64_t seed : cfg.seeds) {
    try {
      outcomes.push_back(run_seed(cfg, data, options, seed));
      record.per_seed.push_back(outcomes.back().result);
    } catch (const std::runtime_error& e) {
      std::cerr << "warning: seed " << seed << " aborted: " << e.what() << "\n";
    }
  }
  if (record.per_seed.empty()) {
    throw std::runtime_error("train: every seed diverged");
  }
  aggregate_metrics(record);
  if (!cfg.out.empty()) {
    write_run_artifacts(cfg.out, record, cfg);
    for (const auto& outcome : outcomes) {
      const auto manifest = std::filesystem::path(cfg.out) /
                            ("model_" + std::to_string(outcome.result.seed) + ".json");
      save_checkpoint(manifest, outcome.model, cfg, outcome.result.seed, outcome.result.split,
                      outcome.result.best_epoch);
    }
  }
  return record;
}

RunRecord train_reference_gcn(const Config& cfg, const Dataset& data) {
  cfg.validate();
  RunRecord record;
  const SparseMatrix normalized = normalize_adjacency(data.graph);
  const Tensor features =
      Tensor::from_values(data.features.n, data.features.f, data.features.values);

  for (const std::uint64_t seed : cfg.seeds) {
    SeedResult result;
    result.seed = seed;
    result.split = data.split ? *data.split : make_split(data.labels, seed);

    Rng init_rng(stream_seed(seed, 0));
    Rng dropout_rng(stream_seed(seed, 1));
    std::vector<Tensor> conv;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::size_t in = l == 0 ? data.features.f : cfg.dim;
      conv.push_back(Tensor::randn(in, cfg.dim, 1.0 / std::sqrt(static_cast<double>(in)),
                                   init_rng, true));
    }
    Tensor classifier_weight = Tensor::randn(
        cfg.dim, data.labels.k, 1.0 / std::sqrt(static_cast<double>(cfg.dim)), init_rng, true);
    Tensor classifier_bias = Tensor::zeros(1, data.labels.k, true);

    std::vector<Tensor> params = conv;
    params.push_back(classifier_weight);
    params.push_back(classifier_bias);
    Adam optimizer(params, AdamConfig{cfg.lr});

    Tape tape;
    const auto forward = [&]() {
      Tensor h = features;
      for (std::size_t l = 0; l < cfg.layers; ++l) {
        if (l > 0 && cfg.dropout > 0.0) h = tape.dropout(h, cfg.dropout, dropout_rng);
        h = tape.relu(tape.matmul(spmm(tape, normalized, h), conv[l]));
      }
      return tape.sigmoid(
          tape.add_rowvec(tape.matmul(h, classifier_weight), classifier_bias));
    };

    double best_val = -std::numeric_limits<double>::infinity();
    std::vector<std::vector<double>> best_params;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      tape.set_training(true);
      const Tensor probabilities = forward();
      const Tensor loss =
          classification_loss(tape, probabilities, data.labels, result.split.train);
      EpochRecord rec;
      rec.loss_cls = loss.value();
      tape.backward(loss);
      optimizer.step();

      tape.set_training(false);
      {
        NoGradGuard guard(tape);
        rec.val = metrics_on(forward(), data.labels, result.split.val);
      }
      result.history.push_back(rec);
      if (rec.val.micro_auc > best_val) {
        best_val = rec.val.micro_auc;
        best_params.clear();
        for (const auto& p : params) best_params.emplace_back(p.data().begin(), p.data().end());
        result.best_epoch = epoch;
      }
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto values = params[i].raw();
      std::copy(best_params[i].begin(), best_params[i].end(), values.begin());
    }
    tape.set_training(false);
    {
      NoGradGuard guard(tape);
      result.test =
          metrics_on(forward(), data.labels, result.split.test, &result.test_class_auc);
    }
    record.per_seed.push_back(std::move(result));
  }
  aggregate_metrics(record);
  return record;
}

MetricsReport evaluate_on(const Model& model, const Dataset& data, const Config& cfg,
                          std::span<const std::size_t> indices,
                          std::vector<double>* class_auc) {
  const DecomposedGraphSet cdg = build_structure(model, data, cfg);
  const Tensor features =
      Tensor::from_values(data.features.n, data.features.f, data.features.values);
  Tape tape;
  tape.set_training(false);
  NoGradGuard guard(tape);
  Rng unused(0);
  const Forward fwd = forward_pass(tape, model, features, cdg, cfg.dropout, unused);
  return metrics_on(fwd.probabilities, data.labels, indices, class_auc);
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const std::filesystem::path& manifest_path, const Model& model,
                     const Config& cfg, std::uint64_t seed, const Split& split,
                     std::size_t best_epoch) {
  std::filesystem::path bin_path = manifest_path;
  bin_path.replace_extension(".bin");

  nlohmann::json manifest;
  manifest["binary"] = bin_path.filename().string();
  manifest["config"] = cfg.to_json();
  manifest["seed"] = seed;
  manifest["best_epoch"] = best_epoch;
  manifest["split"] = {{"train", split.train}, {"val", split.val}, {"test", split.test}};
  manifest["feature_dim"] = model.feature_dim;
  manifest["embed_dim"] = model.embed_dim;
  manifest["label_count"] = model.label_count;
  manifest["view_count"] = model.view_count;
  manifest["layers"] = model.layers;
  manifest["per_view_weights"] = model.per_view_weights;
  if (model.prototypes.kind == PrototypeSet::Kind::macro) {
    nlohmann::json map = nlohmann::json::object();
    for (std::size_t label = 0; label < model.prototypes.label_to_macro.size(); ++label) {
      map[std::to_string(label)] = model.prototypes.label_to_macro[label];
    }
    manifest["macro_map"] = map;
  }

  std::ofstream bin(bin_path, std::ios::binary);
  if (!bin) throw std::runtime_error(bin_path.string() + ": cannot open for writing");
  nlohmann::json arrays = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, tensor] : model.named_parameters()) {
    arrays.push_back({{"name", name},
                      {"rows", tensor.rows()},
                      {"cols", tensor.cols()},
                      {"offset", offset}});
    bin.write(reinterpret_cast<const char*>(tensor.data().data()),
              static_cast<std::streamsize>(tensor.size() * sizeof(double)));
    offset += tensor.size() * sizeof(double);
  }
  manifest["arrays"] = arrays;

  std::ofstream out(manifest_path);
  if (!out) throw std::runtime_error(manifest_path.string() + ": cannot open for writing");
  out << manifest.dump(2) << "\n";
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error(manifest_path.string() + ": cannot open checkpoint");
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const std::exception& e) {
    throw std::runtime_error(manifest_path.string() + ": invalid JSON: " + e.what());
  }

  LoadedCheckpoint loaded;
  loaded.config = Config::from_json(manifest["config"]);
  loaded.seed = manifest["seed"].get<std::uint64_t>();
  loaded.best_epoch = manifest["best_epoch"].get<std::size_t>();
  loaded.split.train = manifest["split"]["train"].get<std::vector<std::size_t>>();
  loaded.split.val = manifest["split"]["val"].get<std::vector<std::size_t>>();
  loaded.split.test = manifest["split"]["test"].get<std::vector<std::size_t>>();

  Model& model = loaded.model;
  model.options = apply_ablation(parse_ablation(loaded.config.ablation));
  model.feature_dim = manifest["feature_dim"].get<std::size_t>();
  model.embed_dim = manifest["embed_dim"].get<std::size_t>();
  model.label_count = manifest["label_count"].get<std::size_t>();
  model.view_count = manifest["view_count"].get<std::size_t>();
  model.layers = manifest["layers"].get<std::size_t>();
  model.per_view_weights = manifest["per_view_weights"].get<bool>();

  const auto bin_path = manifest_path.parent_path() / manifest["binary"].get<std::string>();
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw std::runtime_error(bin_path.string() + ": cannot open checkpoint data");

  for (const auto& entry : manifest["arrays"]) {
    const std::string name = entry["name"].get<std::string>();
    const std::size_t rows = entry["rows"].get<std::size_t>();
    const std::size_t cols = entry["cols"].get<std::size_t>();
    std::vector<double> values(rows * cols);
    bin.seekg(static_cast<std::streamoff>(entry["offset"].get<std::size_t>()));
    bin.read(reinterpret_cast<char*>(values.data()),
             static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!bin) throw std::runtime_error(bin_path.string() + ": truncated checkpoint data");
    Tensor tensor = Tensor::from_values(rows, cols, std::move(values), true);

    if (name == "feature_transform") model.feature_transform = tensor;
    else if (name == "label_prototypes") model.prototypes.vectors = tensor;
    else if (name == "decoder_weight") model.decoder.weight = tensor;
    else if (name == "decoder_bias") model.decoder.bias = tensor;
    else if (name.rfind("conv_weight_", 0) == 0) model.conv_weights.push_back(tensor);
    else if (name == "attn_query_weight") model.attn_query = tensor;
    else if (name == "attn_key_weight") model.attn_key = tensor;
    else if (name == "attn_value_weight") model.attn_value = tensor;
    else if (name == "classifier_weight") model.classifier_weight = tensor;
    else if (name == "classifier_bias") model.classifier_bias = tensor;
    else throw std::runtime_error("checkpoint: unknown array '" + name + "'");
  }

  if (manifest.contains("macro_map")) {
    model.prototypes.kind = PrototypeSet::Kind::macro;
    model.prototypes.label_to_macro.assign(model.label_count, 0);
    for (const auto& [label, macro] : manifest["macro_map"].items()) {
      model.prototypes.label_to_macro.at(std::stoul(label)) = macro.get<std::size_t>();
    }
  }
  return loaded;
}

// ---------------------------------------------------------------------------
// Artifacts

nlohmann::json metrics_to_json(const MetricsReport& m, bool percent) {
  const double s = percent ? 100.0 : 1.0;
  return {{"ranking_loss", s * m.ranking_loss}, {"hamming_loss", s * m.hamming_loss},
          {"macro_auc", s * m.macro_auc},       {"micro_auc", s * m.micro_auc},
          {"macro_ap", s * m.macro_ap},         {"micro_ap", s * m.micro_ap},
          {"lrap", s * m.lrap}};
}

void write_run_artifacts(const std::filesystem::path& out_dir, const RunRecord& record,
                         const Config& cfg) {
  std::filesystem::create_directories(out_dir);

  for (const auto& seed_result : record.per_seed) {
    std::ofstream out(out_dir / ("history_" + std::to_string(seed_result.seed) + ".csv"));
    out << "epoch,loss_cls,loss_cmi,loss_lm,val_ranking_loss,val_hamming_loss,"
           "val_macro_auc,val_micro_auc,val_macro_ap,val_micro_ap,val_lrap\n";
    out.precision(10);
    for (std::size_t e = 0; e < seed_result.history.size(); ++e) {
      const auto& rec = seed_result.history[e];
      out << e << ',' << rec.loss_cls << ',' << rec.loss_cmi << ',' << rec.loss_lm << ','
          << rec.val.ranking_loss << ',' << rec.val.hamming_loss << ',' << rec.val.macro_auc
          << ',' << rec.val.micro_auc << ',' << rec.val.macro_ap << ',' << rec.val.micro_ap
          << ',' << rec.val.lrap << '\n';
    }
  }

  nlohmann::json report;
  report["config"] = cfg.to_json();
  report["per_seed"] = nlohmann::json::array();
  for (const auto& seed_result : record.per_seed) {
    report["per_seed"].push_back({{"seed", seed_result.seed},
                                  {"best_epoch", seed_result.best_epoch},
                                  {"test", metrics_to_json(seed_result.test, true)}});
  }
  report["mean"] = metrics_to_json(record.mean, true);
  report["std"] = metrics_to_json(record.stddev, true);
  report["std_degenerate"] = record.stddev_degenerate;
  {
    std::ofstream out(out_dir / "report.json");
    out << report.dump(2) << "\n";
  }

  {
    std::ofstream out(out_dir / "per_class_auc.csv");
    out << "seed,label,auc\n";
    out.precision(10);
    for (const auto& seed_result : record.per_seed) {
      for (std::size_t label = 0; label < seed_result.test_class_auc.size(); ++label) {
        out << seed_result.seed << ',' << label << ',' << seed_result.test_class_auc[label]
            << '\n';
      }
    }
  }
}

}  // namespace corgcn
