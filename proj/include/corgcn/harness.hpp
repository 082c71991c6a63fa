#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "corgcn/convolve.hpp"
#include "corgcn/correlate.hpp"
#include "corgcn/decompose.hpp"
#include "corgcn/graph.hpp"
#include "corgcn/metrics.hpp"
#include "corgcn/optim.hpp"
#include "corgcn/tensor.hpp"

namespace corgcn {

struct Config {
  double lr = 0.001;
  std::size_t top_lambda = 7;  // neighbors kept per node in each learned view ("lambda")
  double gamma = 2.0;
  std::size_t dim = 64;  // embedding width ("d")
  double dropout = 0.3;
  std::size_t layers = 2;
  std::size_t epochs = 500;
  std::size_t batch_size = 1024;
  std::optional<std::size_t> macro_k;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  std::string ablation = "none";
  std::size_t rebuild_every = 1;       // epochs between structure rebuilds
  bool per_view_weights = false;       // per-view conv weights instead of shared
  std::size_t pretrain_epochs = 200;   // prototype pre-training before clustering
  std::string data;
  std::string out;

  static Config from_json(const nlohmann::json& j);
  static Config from_json_file(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  void validate() const;
};

enum class Ablation { none, no_cgd, no_cfd, no_csd, no_intra, no_inter };

Ablation parse_ablation(const std::string& mode);

struct PipelineOptions {
  bool decompose = true;            // false: plain GCN on the original graph and features
  bool correlated_structure = true; // false: raw features drive graph learning
  bool learn_structure = true;      // false: original adjacency in every view
  bool merge_message_passing = false;  // true: one union graph for all views
  bool inter_label = true;          // false: skip correlation propagation
};

PipelineOptions apply_ablation(Ablation mode);

// All trainable state for one run. Which members are populated depends on the
// pipeline options (the plain-GCN configuration has no prototypes, decoder,
// or attention weights).
struct Model {
  PipelineOptions options;
  std::size_t feature_dim = 0;
  std::size_t embed_dim = 0;
  std::size_t label_count = 0;  // classifier output width (original labels)
  std::size_t view_count = 0;   // label views (prototype count); 0 for plain GCN
  std::size_t layers = 0;
  bool per_view_weights = false;

  Tensor feature_transform;  // feature_dim-by-embed_dim
  PrototypeSet prototypes;
  Decoder decoder;
  std::vector<Tensor> conv_weights;  // layers entries, or layers*(views+1) when per-view
  Tensor attn_query, attn_key, attn_value;
  Tensor classifier_weight, classifier_bias;

  static Model init(const Config& cfg, const PipelineOptions& options, std::size_t feature_dim,
                    std::size_t label_count, Rng& rng);
  // Swaps in macro prototypes and a fresh decoder sized for them.
  void adopt_macro_prototypes(PrototypeSet macro, Rng& rng);

  std::vector<Tensor> parameters() const;
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::span<const Tensor> layer_weights(std::size_t layer) const;
};

struct Forward {
  Tensor probabilities;  // n-by-label_count, in (0, 1)
  Tensor transformed;    // n-by-embed_dim; undefined for plain GCN
};

// One full forward pass over every node. The decomposed graph set must match
// the model's view count.
Forward forward_pass(Tape& tape, const Model& model, const Tensor& features,
                     const DecomposedGraphSet& cdg, double dropout_rate, Rng& dropout_rng);

// Builds the graph views from the model's current parameter values.
DecomposedGraphSet build_structure(const Model& model, const Dataset& data, const Config& cfg);

// Mean binary cross-entropy over the batch rows, probabilities clamped to
// [1e-7, 1 - 1e-7].
Tensor classification_loss(Tape& tape, const Tensor& probabilities, const LabelMatrix& labels,
                           std::span<const std::size_t> batch);

// cls + alpha*cmi + beta*lm with alpha = |cls/(3 cmi)| and beta = |cls/(3 lm)|
// computed from detached magnitudes (no gradient flows through the weights).
// A weight is 0 when its denominator magnitude is below 1e-12.
Tensor total_loss(Tape& tape, const Tensor& cls, const Tensor& cmi, const Tensor& lm,
                  double* alpha_out = nullptr, double* beta_out = nullptr);

struct EpochRecord {
  double loss_cls = 0.0;
  double loss_cmi = 0.0;
  double loss_lm = 0.0;
  MetricsReport val;
};

struct SeedResult {
  std::uint64_t seed = 0;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  MetricsReport test;
  std::vector<double> test_class_auc;  // NaN for classes without both outcomes
  Split split;
};

struct RunRecord {
  std::vector<SeedResult> per_seed;
  MetricsReport mean;
  MetricsReport stddev;
  bool stddev_degenerate = false;  // fewer than 2 seeds finished
};

// Trains one model per seed, tracks the best-validation-micro-AUC checkpoint,
// evaluates it on test, and aggregates across seeds. When cfg.out is set the
// run artifacts (history CSVs, report.json, per_class_auc.csv, checkpoints)
// are written there. A seed whose loss turns non-finite is aborted with a
// diagnostic on stderr and excluded from the aggregate.
RunRecord train(const Config& cfg);
RunRecord train(const Config& cfg, const Dataset& data);

// Standalone two-branch-free GCN trainer used as the reference for the
// plain-graph configuration; same splits, initialization streams, and
// evaluation protocol.
RunRecord train_reference_gcn(const Config& cfg, const Dataset& data);

// Rebuilds structure from the model's current parameters and evaluates the
// given node set.
MetricsReport evaluate_on(const Model& model, const Dataset& data, const Config& cfg,
                          std::span<const std::size_t> indices,
                          std::vector<double>* class_auc = nullptr);

// Checkpoints: a flat little-endian float64 blob plus a JSON manifest of
// array names/shapes, the config, seed, and split.
void save_checkpoint(const std::filesystem::path& manifest_path, const Model& model,
                     const Config& cfg, std::uint64_t seed, const Split& split,
                     std::size_t best_epoch);

struct LoadedCheckpoint {
  Model model;
  Config config;
  std::uint64_t seed = 0;
  Split split;
  std::size_t best_epoch = 0;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& manifest_path);

nlohmann::json metrics_to_json(const MetricsReport& m, bool percent);
void write_run_artifacts(const std::filesystem::path& out_dir, const RunRecord& record,
                         const Config& cfg);

}  // namespace corgcn
