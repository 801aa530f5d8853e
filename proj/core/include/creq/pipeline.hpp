#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "creq/correction.hpp"
#include "creq/model.hpp"
#include "creq/reassembly.hpp"

namespace creq::pipeline {

struct PipelineConfig {
  model::ModelConfig model;
  int w_bits = 4;
  int a_bits = 4;
  reassembly::ReassemblyConfig reassembly;
  bool correction_enabled = true;
  correction::CorrectionConfig correction;
  uint64_t seed = 42;
  std::optional<uint64_t> calib_seed;
  std::optional<uint64_t> eval_seed;
  int64_t calib_samples = 16;
  int64_t eval_samples = 24;
  int64_t outlier_count = 2;
  std::vector<int64_t> outlier_channels;  // explicit list; empty = derive from seed
  double outlier_magnification = 50.0;
  std::filesystem::path out_dir = "out";
  std::filesystem::path report_path;  // empty = out_dir/report.json

  uint64_t model_seed() const { return seed; }
  uint64_t effective_calib_seed() const;
  uint64_t effective_eval_seed() const;
  uint64_t adapter_seed() const;
  model::OutlierSpec effective_outliers() const;
  std::filesystem::path effective_report_path() const;

  void validate() const;
};

/// Flat key = value config document; '#' starts a comment. CLI flags apply
/// the same keys on top of the file.
PipelineConfig parse_config_file(const std::filesystem::path& path);
void apply_config_kv(PipelineConfig& cfg, const std::string& key, const std::string& value);
std::map<std::string, std::string> config_echo(const PipelineConfig& cfg);

struct StageError : std::runtime_error {
  StageError(const std::string& stage_name, const std::string& cause)
      : std::runtime_error("stage '" + stage_name + "' failed: " + cause), stage(stage_name) {}
  std::string stage;
};

struct RunReport {
  double mse_naive = -1.0;
  double mse_reassembled = -1.0;
  double mse_corrected = -1.0;
  double mse_final = -1.0;
  std::vector<correction::ReconstructionTrace> traces;
  std::map<std::string, bool> checks;
  std::filesystem::path report_path;

  bool all_checks_passed() const;
};

// Individual stages; each reads its inputs from cfg.out_dir and writes its
// artifacts there atomically.
void stage_gen_model(const PipelineConfig& cfg);
void stage_gen_calib(const PipelineConfig& cfg);
void stage_stats(const PipelineConfig& cfg);
void stage_reassemble(const PipelineConfig& cfg);
void stage_quantize(const PipelineConfig& cfg);
void stage_correct(const PipelineConfig& cfg);
RunReport stage_eval(const PipelineConfig& cfg);

/// gen-model, gen-calib, stats, reassemble, quantize, correct (if enabled),
/// eval; writes the report and returns the headline numbers.
RunReport run_pipeline(const PipelineConfig& cfg);

}  // namespace creq::pipeline
