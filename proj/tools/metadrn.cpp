#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "metadrn/harness.hpp"

namespace fs = std::filesystem;
using namespace metadrn;

namespace {

constexpr int kExitConfigError = 2;
constexpr int kExitNumericError = 3;

// Resolves the config next to a checkpoint unless one is given explicitly.
RunConfig config_for_checkpoint(const std::string& ckpt, const std::string& config_path) {
  std::string path = config_path;
  if (path.empty()) {
    path = (fs::path(ckpt).parent_path() / "config.txt").string();
    if (!fs::exists(path))
      throw std::invalid_argument("no config given and '" + path + "' does not exist");
  }
  return load_config(path);
}

int cmd_train(const std::string& config_path, std::optional<uint64_t> seed,
              const std::string& resume) {
  RunConfig cfg = load_config(config_path);
  if (seed) cfg.seed = *seed;
  RunReport report = run_train(cfg, resume);
  std::cout << "trained " << report.rows.size() << " epochs ("
            << detail::csv_number(report.mean_epoch_seconds) << " s/epoch), params "
            << report.param_count << "\n";
  if (report.test)
    std::cout << format_eval_table(cfg, *report.test, report.mean_epoch_seconds,
                                   report.param_count);
  std::cout << "artifacts in " << cfg.output_dir << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& config_path, const std::string& split,
             int episodes, double lo_thresh, double hi_thresh) {
  (void)lo_thresh;
  (void)hi_thresh;
  RunConfig cfg = config_for_checkpoint(ckpt, config_path);
  TrainState state = load_checkpoint(ckpt, cfg);
  Dataset ds = build_dataset(cfg);
  Split sp = split == "train" ? Split::train : split == "val" ? Split::val : Split::test;
  if (split != "train" && split != "val" && split != "test")
    throw std::invalid_argument("--split must be train, val, or test");
  EvalTable table = evaluate_split(cfg, state, ds, sp, episodes,
                                   detail::stream_for(state.seed, "cli-eval", 0));
  // time/epoch comes from the run's own summary when present
  double tpe = 0;
  const fs::path summary = fs::path(ckpt).parent_path() / "summary.txt";
  if (fs::exists(summary)) {
    std::ifstream in(summary);
    std::string line;
    while (std::getline(in, line)) {
      const size_t eq = line.find('=');
      if (eq != std::string::npos &&
          detail::trim(line.substr(0, eq)) == "time_per_epoch_s")
        tpe = detail::parse_double(detail::trim(line.substr(eq + 1)), "time_per_epoch_s");
    }
  }
  std::cout << format_eval_table(cfg, table, tpe, count_params(cfg.model_spec()));
  return 0;
}

int cmd_compare(const std::vector<std::string>& run_dirs) {
  std::cout << format_compare_table(compare_runs(run_dirs));
  return 0;
}

int cmd_export(const std::string& ckpt, const std::string& config_path,
               const std::string& class_name, int sample_k, std::string out_dir) {
  RunConfig cfg = config_for_checkpoint(ckpt, config_path);
  TrainState state = load_checkpoint(ckpt, cfg);
  Dataset ds = build_dataset(cfg);
  const int cls = ds.find_class(class_name);
  if (cls < 0) throw std::invalid_argument("no class named '" + class_name + "'");
  const int n = static_cast<int>(ds.classes[static_cast<size_t>(cls)].samples.size());
  if (sample_k < 1 || sample_k > n)
    throw std::invalid_argument("--sample must be in [1," + std::to_string(n) + "] for class '" +
                                class_name + "'");
  if (out_dir.empty()) out_dir = (fs::path(ckpt).parent_path() / "features").string();
  auto written = export_features(cfg, state, ds, cls, sample_k - 1, out_dir);
  for (const auto& p : written) std::cout << p << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-DRN 1-shot segmentation: episodic meta-training and evaluation"};
  app.require_subcommand(1);

  std::string config_path, resume, ckpt, split = "test", class_name, out_dir;
  std::optional<uint64_t> seed;
  int episodes = 40, sample_k = 1;
  double lo_thresh = 0.35, hi_thresh = 0.5;
  std::vector<std::string> run_dirs;

  auto* train = app.add_subcommand("train", "train a model from a config file");
  train->add_option("--config", config_path, "path to key = value config")->required();
  train->add_option("--seed", seed, "override the config seed");
  train->add_option("--resume", resume, "checkpoint to resume from");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  eval->add_option("--ckpt", ckpt, "checkpoint path")->required();
  eval->add_option("--config", config_path, "config path (default: config.txt next to ckpt)");
  eval->add_option("--split", split, "train|val|test (default test)");
  eval->add_option("--episodes", episodes, "number of evaluation episodes");
  eval->add_option("--lo-thresh", lo_thresh, "lower binarization threshold");
  eval->add_option("--hi-thresh", hi_thresh, "upper binarization threshold");

  auto* compare = app.add_subcommand("compare", "merge summaries of completed runs");
  compare->add_option("run_dirs", run_dirs, "run directories")->expected(-1)->required();

  auto* exportf = app.add_subcommand("export-features", "dump per-group feature maps and masks");
  exportf->add_option("--ckpt", ckpt, "checkpoint path")->required();
  exportf->add_option("--config", config_path, "config path (default: config.txt next to ckpt)");
  exportf->add_option("--class", class_name, "class name")->required();
  exportf->add_option("--sample", sample_k, "1-based sample index")->required();
  exportf->add_option("--out", out_dir, "output directory (default: <run>/features)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfigError;
  }

  try {
    if (app.got_subcommand(train)) return cmd_train(config_path, seed, resume);
    if (app.got_subcommand(eval)) return cmd_eval(ckpt, config_path, split, episodes, lo_thresh, hi_thresh);
    if (app.got_subcommand(compare)) return cmd_compare(run_dirs);
    if (app.got_subcommand(exportf)) return cmd_export(ckpt, config_path, class_name, sample_k, out_dir);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumericError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
