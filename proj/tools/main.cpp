#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "corgcn/harness.hpp"
#include "corgcn/metrics.hpp"

namespace {

using corgcn::Config;

void print_metrics(const std::string& title, const corgcn::MetricsReport& m) {
  std::cout << title << " (percent):\n" << std::fixed << std::setprecision(2);
  std::cout << "  ranking loss  " << 100.0 * m.ranking_loss << "\n";
  std::cout << "  hamming loss  " << 100.0 * m.hamming_loss << "\n";
  std::cout << "  macro AUC     " << 100.0 * m.macro_auc << "\n";
  std::cout << "  micro AUC     " << 100.0 * m.micro_auc << "\n";
  std::cout << "  macro AP      " << 100.0 * m.macro_ap << "\n";
  std::cout << "  micro AP      " << 100.0 * m.micro_ap << "\n";
  std::cout << "  LRAP          " << 100.0 * m.lrap << "\n";
}

Config load_config(const std::string& config_path, const std::string& data,
                   const std::string& out, std::optional<std::uint64_t> seed,
                   const std::string& ablation) {
  Config cfg = Config::from_json_file(config_path);
  if (!data.empty()) cfg.data = data;
  if (!out.empty()) cfg.out = out;
  if (seed) cfg.seeds = {*seed};
  if (!ablation.empty()) cfg.ablation = ablation;
  cfg.validate();
  return cfg;
}

int run_train(const std::string& config_path, const std::string& data, const std::string& out,
              std::optional<std::uint64_t> seed, const std::string& ablation) {
  const Config cfg = load_config(config_path, data, out, seed, ablation);
  if (cfg.data.empty()) throw std::runtime_error("no dataset directory (config 'data' or --data)");
  const corgcn::RunRecord record = corgcn::train(cfg);
  std::cout << "finished " << record.per_seed.size() << " seed(s)";
  if (!cfg.out.empty()) std::cout << "; artifacts in " << cfg.out;
  std::cout << "\n";
  print_metrics("mean test metrics", record.mean);
  return 0;
}

int run_eval(const std::string& data, const std::string& model_path, const std::string& out) {
  corgcn::LoadedCheckpoint loaded = corgcn::load_checkpoint(model_path);
  const corgcn::Dataset dataset = corgcn::load_dataset(data);
  std::vector<double> class_auc;
  const corgcn::MetricsReport test = corgcn::evaluate_on(loaded.model, dataset, loaded.config,
                                                         loaded.split.test, &class_auc);
  std::filesystem::create_directories(out);
  nlohmann::json report;
  report["seed"] = loaded.seed;
  report["best_epoch"] = loaded.best_epoch;
  report["test"] = corgcn::metrics_to_json(test, true);
  {
    std::ofstream file(std::filesystem::path(out) / "report.json");
    file << report.dump(2) << "\n";
  }
  {
    std::ofstream file(std::filesystem::path(out) / "per_class_auc.csv");
    file << "seed,label,auc\n";
    file.precision(10);
    for (std::size_t label = 0; label < class_auc.size(); ++label) {
      file << loaded.seed << ',' << label << ',' << class_auc[label] << '\n';
    }
  }
  print_metrics("test metrics", test);
  return 0;
}

int run_decompose(const std::string& config_path, const std::string& data,
                  const std::string& out) {
  const Config cfg = load_config(config_path, data, out, std::nullopt, "");
  if (cfg.data.empty()) throw std::runtime_error("no dataset directory (config 'data' or --data)");
  const corgcn::Dataset dataset = corgcn::load_dataset(cfg.data);
  const auto options = corgcn::apply_ablation(corgcn::parse_ablation(cfg.ablation));
  corgcn::Rng rng((cfg.seeds.front() + 0x9E3779B97F4A7C15ULL));
  const corgcn::Model model =
      corgcn::Model::init(cfg, options, dataset.features.f, dataset.labels.k, rng);
  const corgcn::DecomposedGraphSet cdg = corgcn::build_structure(model, dataset, cfg);
  std::filesystem::create_directories(out);
  for (std::size_t v = 0; v < cdg.views.size(); ++v) {
    corgcn::write_edges_csv(
        std::filesystem::path(out) / ("cdg_view_" + std::to_string(v) + ".csv"),
        cdg.views[v].adjacency);
  }
  std::cout << "wrote " << cdg.views.size() << " view edge lists to " << out
            << " (view 0 is the input graph; graphs reflect freshly initialized parameters)\n";
  return 0;
}

int run_analyze(const std::string& data, const std::string& out) {
  const corgcn::Dataset dataset = corgcn::load_dataset(data);
  const corgcn::AmbiguityTables tables =
      corgcn::ambiguity_stats(dataset.graph, dataset.features, dataset.labels);
  std::filesystem::create_directories(out);
  const auto write_table = [&](const std::string& name,
                               const std::vector<corgcn::AmbiguityRow>& rows) {
    std::ofstream file(std::filesystem::path(out) / name);
    file << "bucket,mean_shared_labels,count\n";
    file.precision(10);
    for (const auto& row : rows) {
      file << row.bucket << ',' << row.mean_shared << ',' << row.count << '\n';
    }
  };
  write_table("ambiguity_feature.csv", tables.feature);
  write_table("ambiguity_topology.csv", tables.topology);
  std::cout << "wrote ambiguity tables to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-label node classification with per-label graph decomposition"};
  app.require_subcommand(1);

  std::string data, config_path, out, model_path, ablation;
  std::optional<std::uint64_t> seed;

  auto* train_cmd = app.add_subcommand("train", "train and evaluate over the configured seeds");
  train_cmd->add_option("--data", data, "dataset directory");
  train_cmd->add_option("--config", config_path, "JSON config file")->required();
  train_cmd->add_option("--seed", seed, "single seed overriding the config seed list");
  train_cmd->add_option("--ablation", ablation,
                        "none|no-cgd|no-cfd|no-csd|no-intra|no-inter");
  train_cmd->add_option("--out", out, "output directory for run artifacts");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a saved checkpoint on its test split");
  eval_cmd->add_option("--data", data, "dataset directory")->required();
  eval_cmd->add_option("--model", model_path, "checkpoint manifest (.json)")->required();
  eval_cmd->add_option("--out", out, "output directory")->required();

  auto* decompose_cmd =
      app.add_subcommand("decompose", "dump the per-label graph views as edge lists");
  decompose_cmd->add_option("--data", data, "dataset directory");
  decompose_cmd->add_option("--config", config_path, "JSON config file")->required();
  decompose_cmd->add_option("--out", out, "output directory")->required();

  auto* analyze_cmd =
      app.add_subcommand("analyze", "write feature/topology ambiguity tables");
  analyze_cmd->add_option("--data", data, "dataset directory")->required();
  analyze_cmd->add_option("--out", out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) return run_train(config_path, data, out, seed, ablation);
    if (eval_cmd->parsed()) return run_eval(data, model_path, out);
    if (decompose_cmd->parsed()) return run_decompose(config_path, data, out);
    if (analyze_cmd->parsed()) return run_analyze(data, out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
