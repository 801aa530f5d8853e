#include <CLI11.hpp>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "creq/pipeline.hpp"
#include "creq/version.hpp"

namespace {

using creq::pipeline::PipelineConfig;

struct CommonOpts {
  std::string config_path;
  std::optional<uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<int> bits_w;
  std::optional<int> bits_a;
  std::optional<double> gamma;
  std::optional<int64_t> grid_points;
  std::optional<std::string> mode;
  std::optional<int64_t> rank;
  std::optional<int64_t> epochs;
  std::optional<int64_t> group_size;
  std::optional<std::string> report;
};

void attach_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path, "flat key = value config file");
  cmd->add_option("--seed", o.seed, "base RNG seed");
  cmd->add_option("--out-dir", o.out_dir, "artifact directory");
  cmd->add_option("--bits-w", o.bits_w, "weight bit width (2..16)");
  cmd->add_option("--bits-a", o.bits_a, "activation bit width (2..16)");
  cmd->add_option("--gamma", o.gamma, "channel expansion ratio (fixed_ratio mode)");
  cmd->add_option("--grid-points", o.grid_points, "threshold grid resolution (adaptive mode)");
  cmd->add_option("--mode", o.mode, "reassembly mode: off | fixed_ratio | adaptive")
      ->check(CLI::IsMember({"off", "fixed_ratio", "adaptive"}));
  cmd->add_option("--rank", o.rank, "low-rank correction rank");
  cmd->add_option("--epochs", o.epochs, "correction epochs");
  cmd->add_option("--group-size", o.group_size, "blocks reconstructed together");
  cmd->add_option("--report", o.report, "report output path");
}

PipelineConfig build_config(const CommonOpts& o) {
  PipelineConfig cfg;
  if (!o.config_path.empty()) cfg = creq::pipeline::parse_config_file(o.config_path);
  using creq::pipeline::apply_config_kv;
  if (o.seed) apply_config_kv(cfg, "seed", std::to_string(*o.seed));
  if (o.out_dir) apply_config_kv(cfg, "out_dir", *o.out_dir);
  if (o.bits_w) apply_config_kv(cfg, "quant.w_bits", std::to_string(*o.bits_w));
  if (o.bits_a) apply_config_kv(cfg, "quant.a_bits", std::to_string(*o.bits_a));
  if (o.gamma) apply_config_kv(cfg, "reassembly.gamma", std::to_string(*o.gamma));
  if (o.grid_points)
    apply_config_kv(cfg, "reassembly.grid_points", std::to_string(*o.grid_points));
  if (o.mode) apply_config_kv(cfg, "reassembly.mode", *o.mode);
  if (o.rank) apply_config_kv(cfg, "correction.rank", std::to_string(*o.rank));
  if (o.epochs) apply_config_kv(cfg, "correction.epochs", std::to_string(*o.epochs));
  if (o.group_size)
    apply_config_kv(cfg, "correction.group_size", std::to_string(*o.group_size));
  if (o.report) apply_config_kv(cfg, "report", *o.report);
  cfg.validate();
  return cfg;
}

void print_report_summary(const creq::pipeline::RunReport& rep) {
  std::cout << "mse_naive       " << rep.mse_naive << "\n";
  std::cout << "mse_reassembled " << rep.mse_reassembled << "\n";
  if (rep.mse_corrected >= 0.0) std::cout << "mse_corrected   " << rep.mse_corrected << "\n";
  for (const auto& [name, ok] : rep.checks)
    std::cout << "check " << name << ": " << (ok ? "pass" : "FAIL") << "\n";
  std::cout << "report: " << rep.report_path.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"post-training quantization toolkit with channel reassembly and "
               "low-rank error correction"};
  app.set_version_flag("--version", std::string(creq::kToolName) + " " + creq::kToolVersion);
  app.require_subcommand(1);

  struct Cmd {
    const char* name;
    const char* help;
  };
  const Cmd commands[] = {
      {"gen-model", "generate a synthetic transformer checkpoint"},
      {"gen-calib", "generate calibration and evaluation sets"},
      {"stats", "write per-channel min/max CSVs for every projection input"},
      {"reassemble", "build channel reassembly plans"},
      {"quantize", "quantize the reassembled weights per channel"},
      {"correct", "train and merge low-rank error-correction adapters"},
      {"eval", "evaluate artifacts and write the report"},
      {"run", "run the whole pipeline"},
  };
  std::map<std::string, CommonOpts> opts;
  for (const Cmd& c : commands) attach_common(app.add_subcommand(c.name, c.help), opts[c.name]);

  CLI11_PARSE(app, argc, argv);

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    PipelineConfig cfg = build_config(opts[cmd]);
    using namespace creq::pipeline;
    if (cmd == "gen-model") {
      stage_gen_model(cfg);
      std::cout << "wrote " << (cfg.out_dir / "model.json").string() << "\n";
    } else if (cmd == "gen-calib") {
      stage_gen_calib(cfg);
      std::cout << "wrote " << (cfg.out_dir / "calib.json").string() << " and eval.json\n";
    } else if (cmd == "stats") {
      stage_stats(cfg);
      std::cout << "wrote " << (cfg.out_dir / "stats").string() << "/*.csv\n";
    } else if (cmd == "reassemble") {
      stage_reassemble(cfg);
      std::cout << "wrote " << (cfg.out_dir / "plans.json").string() << "\n";
    } else if (cmd == "quantize") {
      stage_quantize(cfg);
      std::cout << "wrote " << (cfg.out_dir / "quantized.json").string() << "\n";
    } else if (cmd == "correct") {
      stage_correct(cfg);
      std::cout << "wrote " << (cfg.out_dir / "corrected.json").string() << "\n";
    } else if (cmd == "eval") {
      RunReport rep = stage_eval(cfg);
      print_report_summary(rep);
      return rep.all_checks_passed() ? 0 : 1;
    } else if (cmd == "run") {
      RunReport rep = run_pipeline(cfg);
      print_report_summary(rep);
      return rep.all_checks_passed() ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
