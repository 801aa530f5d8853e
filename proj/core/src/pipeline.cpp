#include "creq/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "creq/checkpoint.hpp"
#include "creq/metrics.hpp"
#include "creq/version.hpp"
#include "json_util.hpp"

namespace creq::pipeline {

namespace {

using detail::Json;

constexpr const char* kSiteNames[] = {"qkv", "ffn_in", "ffn_down"};

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail("cannot write " + tmp.string());
    out << text;
    if (!out) fail("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Json read_json(const std::filesystem::path& path, const std::string& what) {
  std::ifstream in(path);
  if (!in) fail(what + " not found at " + path.string() + " (run the producing stage first)");
  try {
    return Json::parse(in);
  } catch (const std::exception& e) {
    fail(what + " is not valid JSON: " + std::string(e.what()));
  }
}

void remove_partial_artifacts(const std::filesystem::path& dir) {
  std::error_code ec;
  if (!std::filesystem::is_directory(dir, ec)) return;
  for (auto it = std::filesystem::recursive_directory_iterator(dir, ec);
       it != std::filesystem::recursive_directory_iterator(); it.increment(ec)) {
    if (ec) break;
    if (it->is_regular_file() && it->path().extension() == ".tmp")
      std::filesystem::remove(it->path(), ec);
  }
}

template <typename Fn>
auto guarded(const PipelineConfig& cfg, const char* stage, Fn&& fn) {
  try {
    return fn();
  } catch (const StageError&) {
    remove_partial_artifacts(cfg.out_dir);
    throw;
  } catch (const std::exception& e) {
    remove_partial_artifacts(cfg.out_dir);
    throw StageError(stage, e.what());
  }
}

std::filesystem::path artifact(const PipelineConfig& cfg, const char* name) {
  return cfg.out_dir / name;
}

struct SiteContext {
  reassembly::ChannelStats stats;
  std::span<const Tensor> acts;
  std::vector<const Tensor*> weights;
  reassembly::Objective objective;
};

std::vector<std::array<SiteContext, 3>> site_contexts(
    const model::Model& m, const std::vector<model::SiteActivations>& site_acts) {
  std::vector<std::array<SiteContext, 3>> out;
  for (int64_t i = 0; i < m.config.n_layers; ++i) {
    const auto& acts = site_acts[static_cast<size_t>(i)];
    const auto& w = m.blocks[static_cast<size_t>(i)];
    std::array<SiteContext, 3> sites;
    sites[0] = {reassembly::channel_outlier_stats(acts.qkv), acts.qkv,
                {&w.w_q, &w.w_k, &w.w_v}, reassembly::Objective::kAttention};
    sites[1] = {reassembly::channel_outlier_stats(acts.ffn_in), acts.ffn_in,
                {&w.w_gate, &w.w_up}, reassembly::Objective::kLinear};
    sites[2] = {reassembly::channel_outlier_stats(acts.ffn_down), acts.ffn_down,
                {&w.w_down}, reassembly::Objective::kLinear};
    out.push_back(std::move(sites));
  }
  return out;
}

// reassembled full-precision weights for the given plans
model::Model reassemble_model(const model::Model& m, const model::ModelPlans& plans) {
  model::Model out;
  out.config = m.config;
  for (size_t i = 0; i < m.blocks.size(); ++i) {
    const auto& w = m.blocks[i];
    const auto& site = plans[i];
    model::BlockWeights r = w;
    if (site.qkv) {
      r.w_q = reassembly::reassemble_weights(w.w_q, *site.qkv);
      r.w_k = reassembly::reassemble_weights(w.w_k, *site.qkv);
      r.w_v = reassembly::reassemble_weights(w.w_v, *site.qkv);
    }
    if (site.ffn_in) {
      r.w_gate = reassembly::reassemble_weights(w.w_gate, *site.ffn_in);
      r.w_up = reassembly::reassemble_weights(w.w_up, *site.ffn_in);
    }
    if (site.ffn_down) r.w_down = reassembly::reassemble_weights(w.w_down, *site.ffn_down);
    out.blocks.push_back(std::move(r));
  }
  return out;
}

model::ModelPlans plans_from_json(const Json& j, int64_t n_layers) {
  model::ModelPlans plans;
  for (const auto& entry : j.at("plans")) {
    model::SitePlans site;
    if (entry.contains("qkv")) site.qkv = detail::plan_from_json(entry.at("qkv"));
    if (entry.contains("ffn_in")) site.ffn_in = detail::plan_from_json(entry.at("ffn_in"));
    if (entry.contains("ffn_down")) site.ffn_down = detail::plan_from_json(entry.at("ffn_down"));
    plans.push_back(std::move(site));
  }
  if (static_cast<int64_t>(plans.size()) != n_layers)
    fail("plans.json does not match the model layer count");
  return plans;
}

int64_t total_extra_channels(const model::ModelPlans& plans) {
  int64_t extra = 0;
  for (const auto& site : plans) {
    if (site.qkv) extra += site.qkv->extra_channels();
    if (site.ffn_in) extra += site.ffn_in->extra_channels();
    if (site.ffn_down) extra += site.ffn_down->extra_channels();
  }
  return extra;
}

Json trace_to_json(const correction::ReconstructionTrace& t) {
  return Json{{"first_block", t.first_block},
              {"n_blocks", t.n_blocks},
              {"initial_loss", t.initial_loss},
              {"final_loss", t.final_loss},
              {"improved", t.improved},
              {"trainable_params", t.trainable_params},
              {"steps", t.step_losses.size()}};
}

}  // namespace

uint64_t PipelineConfig::effective_calib_seed() const {
  return calib_seed ? *calib_seed : Rng::derive(seed, 1);
}

uint64_t PipelineConfig::effective_eval_seed() const {
  return eval_seed ? *eval_seed : Rng::derive(seed, 2);
}

uint64_t PipelineConfig::adapter_seed() const { return Rng::derive(seed, 4); }

model::OutlierSpec PipelineConfig::effective_outliers() const {
  model::OutlierSpec spec;
  spec.magnification = outlier_magnification;
  if (!outlier_channels.empty()) {
    spec.channels = outlier_channels;
    return spec;
  }
  Rng rng(Rng::derive(seed, 3));
  while (static_cast<int64_t>(spec.channels.size()) < outlier_count) {
    int64_t c = rng.uniform_int(0, model.d_model - 1);
    if (std::find(spec.channels.begin(), spec.channels.end(), c) == spec.channels.end())
      spec.channels.push_back(c);
  }
  std::sort(spec.channels.begin(), spec.channels.end());
  return spec;
}

std::filesystem::path PipelineConfig::effective_report_path() const {
  return report_path.empty() ? out_dir / "report.json" : report_path;
}

void PipelineConfig::validate() const {
  model.validate();
  if (w_bits < 2 || w_bits > 16 || a_bits < 2 || a_bits > 16)
    fail("bit widths must be in [2, 16]");
  if (reassembly.gamma < 0.0) fail("gamma must be non-negative");
  if (reassembly.grid_points < 1) fail("grid_points must be >= 1");
  correction.validate();
  if (calib_samples < 1 || eval_samples < 1) fail("sample counts must be >= 1");
  if (outlier_count < 0 || outlier_count >= model.d_model)
    fail("outlier count out of range");
  for (int64_t c : outlier_channels)
    if (c < 0 || c >= model.d_model) fail("outlier channel out of range");
  if (!(outlier_magnification > 0.0)) fail("outlier magnification must be positive");
}

void apply_config_kv(PipelineConfig& cfg, const std::string& key, const std::string& value) {
  auto as_i64 = [&] { return static_cast<int64_t>(std::stoll(value)); };
  auto as_u64 = [&] { return static_cast<uint64_t>(std::stoull(value)); };
  auto as_f64 = [&] { return std::stod(value); };
  auto as_bool = [&] {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    fail("boolean config value must be true/false: " + key);
  };
  if (key == "model.d_model") cfg.model.d_model = as_i64();
  else if (key == "model.n_heads") cfg.model.n_heads = as_i64();
  else if (key == "model.d_ff") cfg.model.d_ff = as_i64();
  else if (key == "model.n_layers") cfg.model.n_layers = as_i64();
  else if (key == "model.seq_len") cfg.model.seq_len = as_i64();
  else if (key == "quant.w_bits") cfg.w_bits = static_cast<int>(as_i64());
  else if (key == "quant.a_bits") cfg.a_bits = static_cast<int>(as_i64());
  else if (key == "reassembly.mode") {
    if (value == "off") cfg.reassembly.mode = reassembly::ReassemblyMode::kOff;
    else if (value == "fixed_ratio") cfg.reassembly.mode = reassembly::ReassemblyMode::kFixedRatio;
    else if (value == "adaptive") cfg.reassembly.mode = reassembly::ReassemblyMode::kAdaptive;
    else fail("unknown reassembly mode: " + value);
  } else if (key == "reassembly.gamma") cfg.reassembly.gamma = as_f64();
  else if (key == "reassembly.grid_points") cfg.reassembly.grid_points = as_i64();
  else if (key == "correction.enabled") cfg.correction_enabled = as_bool();
  else if (key == "correction.rank") cfg.correction.rank = as_i64();
  else if (key == "correction.epochs") cfg.correction.epochs = as_i64();
  else if (key == "correction.batch_size") cfg.correction.batch_size = as_i64();
  else if (key == "correction.lr") cfg.correction.lr = as_f64();
  else if (key == "correction.group_size") cfg.correction.group_size = as_i64();
  else if (key == "seed") cfg.seed = as_u64();
  else if (key == "calib.seed") cfg.calib_seed = as_u64();
  else if (key == "calib.n_samples") cfg.calib_samples = as_i64();
  else if (key == "eval.seed") cfg.eval_seed = as_u64();
  else if (key == "eval.n_samples") cfg.eval_samples = as_i64();
  else if (key == "outlier.count") cfg.outlier_count = as_i64();
  else if (key == "outlier.magnification") cfg.outlier_magnification = as_f64();
  else if (key == "outlier.channels") {
    cfg.outlier_channels.clear();
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) cfg.outlier_channels.push_back(std::stoll(item));
  } else if (key == "out_dir") cfg.out_dir = value;
  else if (key == "report") cfg.report_path = value;
  else fail("unknown config key: " + key);
}

PipelineConfig parse_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail("config file not found: " + path.string());
  PipelineConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    auto trim = [](std::string s) {
      const char* ws = " \t\r\n";
      auto b = s.find_first_not_of(ws);
      auto e = s.find_last_not_of(ws);
      return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
    };
    std::string stripped = trim(line);
    if (stripped.empty()) continue;
    auto eq = stripped.find('=');
    if (eq == std::string::npos)
      fail("config line " + std::to_string(lineno) + " is not key = value");
    try {
      apply_config_kv(cfg, trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)));
    } catch (const std::exception& e) {
      fail("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

std::map<std::string, std::string> config_echo(const PipelineConfig& cfg) {
  std::map<std::string, std::string> echo;
  auto num = [](double v) {
    std::ostringstream s;
    s.precision(17);
    s << v;
    return s.str();
  };
  echo["model.d_model"] = std::to_string(cfg.model.d_model);
  echo["model.n_heads"] = std::to_string(cfg.model.n_heads);
  echo["model.d_ff"] = std::to_string(cfg.model.d_ff);
  echo["model.n_layers"] = std::to_string(cfg.model.n_layers);
  echo["model.seq_len"] = std::to_string(cfg.model.seq_len);
  echo["quant.w_bits"] = std::to_string(cfg.w_bits);
  echo["quant.a_bits"] = std::to_string(cfg.a_bits);
  echo["reassembly.mode"] = reassembly::to_string(cfg.reassembly.mode);
  echo["reassembly.gamma"] = num(cfg.reassembly.gamma);
  echo["reassembly.grid_points"] = std::to_string(cfg.reassembly.grid_points);
  echo["correction.enabled"] = cfg.correction_enabled ? "true" : "false";
  echo["correction.rank"] = std::to_string(cfg.correction.rank);
  echo["correction.epochs"] = std::to_string(cfg.correction.epochs);
  echo["correction.batch_size"] = std::to_string(cfg.correction.batch_size);
  echo["correction.lr"] = num(cfg.correction.lr);
  echo["correction.group_size"] = std::to_string(cfg.correction.group_size);
  echo["seed"] = std::to_string(cfg.seed);
  echo["calib.seed"] = std::to_string(cfg.effective_calib_seed());
  echo["calib.n_samples"] = std::to_string(cfg.calib_samples);
  echo["eval.seed"] = std::to_string(cfg.effective_eval_seed());
  echo["eval.n_samples"] = std::to_string(cfg.eval_samples);
  auto outliers = cfg.effective_outliers();
  std::string chans;
  for (size_t i = 0; i < outliers.channels.size(); ++i)
    chans += (i ? "," : "") + std::to_string(outliers.channels[i]);
  echo["outlier.channels"] = chans;
  echo["outlier.magnification"] = num(outliers.magnification);
  echo["out_dir"] = cfg.out_dir.string();
  return echo;
}

bool RunReport::all_checks_passed() const {
  for (const auto& [name, ok] : checks)
    if (!ok) return false;
  return true;
}

void stage_gen_model(const PipelineConfig& cfg) {
  guarded(cfg, "gen-model", [&] {
    cfg.validate();
    std::filesystem::create_directories(cfg.out_dir);
    model::Model m = model::gen_synthetic_model(cfg.model, cfg.model_seed(),
                                                cfg.effective_outliers());
    checkpoint::save_model(m, artifact(cfg, "model.json"));
  });
}

void stage_gen_calib(const PipelineConfig& cfg) {
  guarded(cfg, "gen-calib", [&] {
    cfg.validate();
    std::filesystem::create_directories(cfg.out_dir);
    model::CalibrationSet calib =
        model::gen_calibration(cfg.model, cfg.effective_calib_seed(), cfg.calib_samples);
    calib.outlier_spec = cfg.effective_outliers();
    checkpoint::save_calibration(calib, cfg.model, artifact(cfg, "calib.json"));
    model::CalibrationSet eval =
        model::gen_calibration(cfg.model, cfg.effective_eval_seed(), cfg.eval_samples);
    eval.outlier_spec = cfg.effective_outliers();
    checkpoint::save_calibration(eval, cfg.model, artifact(cfg, "eval.json"));
  });
}

void stage_stats(const PipelineConfig& cfg) {
  guarded(cfg, "stats", [&] {
    model::Model m = checkpoint::load_model(artifact(cfg, "model.json"));
    model::CalibrationSet calib = checkpoint::load_calibration(artifact(cfg, "calib.json"));
    auto site_acts = model::collect_site_inputs(m, calib.samples);
    std::filesystem::create_directories(cfg.out_dir / "stats");
    for (int64_t i = 0; i < m.config.n_layers; ++i) {
      const auto& acts = site_acts[static_cast<size_t>(i)];
      const std::vector<Tensor>* by_site[3] = {&acts.qkv, &acts.ffn_in, &acts.ffn_down};
      for (int s = 0; s < 3; ++s) {
        auto stats = reassembly::channel_outlier_stats(*by_site[s]);
        write_text_atomic(cfg.out_dir / "stats" /
                              ("block" + std::to_string(i) + "_" + kSiteNames[s] + ".csv"),
                          metrics::channel_minmax_csv(stats));
      }
    }
  });
}

void stage_reassemble(const PipelineConfig& cfg) {
  guarded(cfg, "reassemble", [&] {
    model::Model m = checkpoint::load_model(artifact(cfg, "model.json"));
    model::CalibrationSet calib = checkpoint::load_calibration(artifact(cfg, "calib.json"));
    Json out;
    out["mode"] = reassembly::to_string(cfg.reassembly.mode);
    Json plans_json = Json::array();
    bool magnitude_ok = true;
    bool count_ok = true;

    if (cfg.reassembly.mode == reassembly::ReassemblyMode::kOff) {
      for (int64_t i = 0; i < m.config.n_layers; ++i) plans_json.push_back(Json::object());
    } else {
      auto site_acts = model::collect_site_inputs(m, calib.samples);
      auto contexts = site_contexts(m, site_acts);
      reassembly::QuantSpec qs{cfg.w_bits, cfg.a_bits, true};
      for (int64_t i = 0; i < m.config.n_layers; ++i) {
        Json entry = Json::object();
        for (int s = 0; s < 3; ++s) {
          SiteContext& ctx = contexts[static_cast<size_t>(i)][static_cast<size_t>(s)];
          reassembly::ReassemblyPlan plan;
          Json site_extra = Json::object();
          if (cfg.reassembly.mode == reassembly::ReassemblyMode::kAdaptive) {
            auto result = reassembly::adaptive_search(
                ctx.stats, ctx.acts, ctx.weights, cfg.reassembly.grid_points, qs, ctx.objective,
                m.config.n_heads);
            plan = std::move(result.plan);
            site_extra["objective"] = std::isfinite(result.objective) ? result.objective : -1.0;
          } else {
            std::vector<const Tensor*> parts = ctx.weights;
            Tensor w_concat = concat_cols(std::span<const Tensor* const>(parts));
            plan = reassembly::build_plan_fixed_ratio(ctx.stats, cfg.reassembly.gamma, ctx.acts,
                                                      w_concat);
          }
          reassembly::validate_plan(plan);
          // runtime output restores the channel count
          count_ok = count_ok &&
                     reassembly::apply_plan_runtime(ctx.acts[0], plan).cols() ==
                         static_cast<int64_t>(ctx.stats.channels());
          // every calibration activation obeys the threshold after disassembly
          if (!plan.is_identity()) {
            for (const Tensor& sample : ctx.acts) {
              Tensor dis = reassembly::disassemble(sample, plan.splits);
              magnitude_ok = magnitude_ok && max_abs(dis) <= plan.theta;
            }
          }
          Json pj = detail::plan_to_json(plan);
          pj.update(site_extra);
          entry[kSiteNames[s]] = std::move(pj);
        }
        plans_json.push_back(std::move(entry));
      }
    }
    out["plans"] = std::move(plans_json);
    out["checks"] = Json{{"plan_count_restoration", count_ok}, {"magnitude_bound", magnitude_ok}};
    write_text_atomic(artifact(cfg, "plans.json"), out.dump(2) + "\n");
  });
}

void stage_quantize(const PipelineConfig& cfg) {
  guarded(cfg, "quantize", [&] {
    model::Model m = checkpoint::load_model(artifact(cfg, "model.json"));
    Json plans_json = read_json(artifact(cfg, "plans.json"), "plans.json");
    model::ModelPlans plans = plans_from_json(plans_json, m.config.n_layers);
    model::Model reassembled = reassemble_model(m, plans);

    checkpoint::QuantizedModel qm;
    qm.config = m.config;
    qm.w_bits = cfg.w_bits;
    qm.a_bits = cfg.a_bits;
    qm.plans = plans;
    auto quantize_proj = [&](const Tensor& w) {
      checkpoint::QuantizedProjection p;
      p.params = quant::compute_quant_params(w, cfg.w_bits, quant::Granularity::kPerChannel);
      p.codes = quant::quantize(w, p.params);
      return p;
    };
    for (const auto& b : reassembled.blocks) {
      checkpoint::QuantizedBlock qb;
      qb.ln1_gain = b.ln1_gain;
      qb.ln1_bias = b.ln1_bias;
      qb.ln2_gain = b.ln2_gain;
      qb.ln2_bias = b.ln2_bias;
      qb.q = quantize_proj(b.w_q);
      qb.k = quantize_proj(b.w_k);
      qb.v = quantize_proj(b.w_v);
      qb.o = quantize_proj(b.w_o);
      qb.gate = quantize_proj(b.w_gate);
      qb.up = quantize_proj(b.w_up);
      qb.down = quantize_proj(b.w_down);
      qm.blocks.push_back(std::move(qb));
    }
    checkpoint::save_quantized(qm, artifact(cfg, "quantized.json"));
  });
}

void stage_correct(const PipelineConfig& cfg) {
  guarded(cfg, "correct", [&] {
    model::Model m = checkpoint::load_model(artifact(cfg, "model.json"));
    model::CalibrationSet calib = checkpoint::load_calibration(artifact(cfg, "calib.json"));
    Json plans_json = read_json(artifact(cfg, "plans.json"), "plans.json");
    model::ModelPlans plans = plans_from_json(plans_json, m.config.n_layers);
    model::Model reassembled = reassemble_model(m, plans);

    model::ForwardOptions qopt{model::ForwardMode::kQuantsim, cfg.w_bits, cfg.a_bits};

    // fresh adapters must leave the quantized forward bit-identical
    model::ModelAdapters fresh =
        correction::attach_adapters(reassembled, cfg.correction.rank, cfg.adapter_seed());
    Tensor without = model::model_forward(calib.samples[0], reassembled, qopt, &plans);
    Tensor with_fresh = model::model_forward(calib.samples[0], reassembled, qopt, &plans, &fresh);
    const bool warm_start_ok = without.bit_equal(with_fresh);

    auto result = correction::sequential_correct(m, reassembled, plans, calib.samples, qopt,
                                                 cfg.correction, cfg.adapter_seed());

    // merge statistics: weight distributions before vs after adding A * B
    double p99 = 0.0, p999 = 0.0, mse_max = 0.0, mse_min = 0.0;
    for (size_t i = 0; i < reassembled.blocks.size(); ++i) {
      const auto& w = reassembled.blocks[i];
      const auto& ad = result.adapters[i];
      const std::pair<const Tensor*, const model::LowRankAdapter*> projs[] = {
          {&w.w_q, &ad.q},       {&w.w_k, &ad.k},   {&w.w_v, &ad.v},    {&w.w_o, &ad.o},
          {&w.w_gate, &ad.gate}, {&w.w_up, &ad.up}, {&w.w_down, &ad.down}};
      for (const auto& [wp, adp] : projs) {
        Tensor merged = add(*wp, matmul(adp->a, adp->b));
        p99 = std::max(p99, metrics::percentile_mse(*wp, merged, 0.99));
        p999 = std::max(p999, metrics::percentile_mse(*wp, merged, 0.999));
        mse_max = std::max(mse_max, metrics::channel_extreme_mse(*wp, merged, true));
        mse_min = std::max(mse_min, metrics::channel_extreme_mse(*wp, merged, false));
      }
    }

    checkpoint::QuantizedModel merged = correction::merge_all(reassembled, plans, result.adapters,
                                                              cfg.w_bits, cfg.a_bits);
    checkpoint::save_quantized(merged, artifact(cfg, "corrected.json"));

    std::filesystem::create_directories(cfg.out_dir / "traces");
    Json traces = Json::array();
    bool improved_all = true;
    for (size_t g = 0; g < result.traces.size(); ++g) {
      const auto& t = result.traces[g];
      improved_all = improved_all && t.improved;
      Json tj = trace_to_json(t);
      std::string csv_name = "traces/group" + std::to_string(g) + ".csv";
      std::ostringstream csv;
      csv.precision(17);
      csv << "step,loss\n";
      for (size_t s = 0; s < t.step_losses.size(); ++s) csv << s << ',' << t.step_losses[s] << '\n';
      write_text_atomic(cfg.out_dir / csv_name, csv.str());
      tj["trace_csv"] = csv_name;
      traces.push_back(std::move(tj));
    }
    Json out;
    out["traces"] = std::move(traces);
    out["total_trainable_params"] = correction::trainable_param_count(result.adapters);
    out["adapter_memory_bytes"] =
        correction::trainable_param_count(result.adapters) * static_cast<int64_t>(sizeof(double));
    out["merge_stats"] = Json{{"p99_quantile_mse_max", p99},
                              {"p999_quantile_mse_max", p999},
                              {"channel_max_mse_max", mse_max},
                              {"channel_min_mse_max", mse_min}};
    out["checks"] =
        Json{{"zero_warm_start", warm_start_ok}, {"correction_improved", improved_all}};
    write_text_atomic(artifact(cfg, "traces.json"), out.dump(2) + "\n");
  });
}

RunReport stage_eval(const PipelineConfig& cfg) {
  return guarded(cfg, "eval", [&] {
    using clock = std::chrono::steady_clock;
    auto t0 = clock::now();

    model::Model m = checkpoint::load_model(artifact(cfg, "model.json"));
    model::CalibrationSet eval_set = checkpoint::load_calibration(artifact(cfg, "eval.json"));
    checkpoint::QuantizedModel quantized =
        checkpoint::load_quantized(artifact(cfg, "quantized.json"));
    model::Model q_dense = quantized.to_dense();

    model::ForwardOptions qopt{model::ForwardMode::kQuantsim, cfg.w_bits, cfg.a_bits};
    model::ForwardOptions fp_opt;
    std::vector<Tensor> fp_refs;
    fp_refs.reserve(eval_set.samples.size());
    for (const Tensor& x : eval_set.samples)
      fp_refs.push_back(model::model_forward(x, m, fp_opt));
    auto mse_against_refs = [&](const model::Model& qmod, const model::ModelPlans* plans) {
      double total = 0.0;
      for (size_t s = 0; s < eval_set.samples.size(); ++s)
        total += mean_squared(fp_refs[s],
                              model::model_forward(eval_set.samples[s], qmod, qopt, plans));
      return total / static_cast<double>(eval_set.samples.size());
    };

    RunReport report;
    report.mse_naive = mse_against_refs(m, nullptr);
    report.mse_reassembled = mse_against_refs(q_dense, &quantized.plans);
    report.mse_final = report.mse_reassembled;

    Json traces_json;
    const auto corrected_path = artifact(cfg, "corrected.json");
    if (std::filesystem::exists(corrected_path)) {
      checkpoint::QuantizedModel corrected = checkpoint::load_quantized(corrected_path);
      model::Model c_dense = corrected.to_dense();
      report.mse_corrected = mse_against_refs(c_dense, &corrected.plans);
      report.mse_final = report.mse_corrected;
      traces_json = read_json(artifact(cfg, "traces.json"), "traces.json");
      for (const auto& [name, ok] : traces_json.at("checks").items())
        report.checks[name] = ok.get<bool>();
      for (const auto& tj : traces_json.at("traces")) {
        correction::ReconstructionTrace t;
        t.first_block = tj.at("first_block").get<int64_t>();
        t.n_blocks = tj.at("n_blocks").get<int64_t>();
        t.initial_loss = tj.at("initial_loss").get<double>();
        t.final_loss = tj.at("final_loss").get<double>();
        t.improved = tj.at("improved").get<bool>();
        t.trainable_params = tj.at("trainable_params").get<int64_t>();
        report.traces.push_back(std::move(t));
      }
    }

    Json plans_json = read_json(artifact(cfg, "plans.json"), "plans.json");
    for (const auto& [name, ok] : plans_json.at("checks").items())
      report.checks[name] = ok.get<bool>();

    const int64_t extra = total_extra_channels(quantized.plans);
    metrics::ArchDims dims{cfg.model.n_layers, cfg.model.d_model, cfg.model.n_heads,
                           cfg.model.d_ff, 0, 0};
    auto bop_cfg = metrics::bop_count(dims, cfg.model.seq_len, cfg.w_bits, cfg.a_bits, extra);
    auto bop_fp16 = metrics::bop_count(dims, cfg.model.seq_len, 16, 16, 0);

    Json rep;
    rep["tool"] = Json{{"name", kToolName}, {"version", kToolVersion}};
    rep["note"] =
        "Quality metric is output MSE between the full-precision and quantized models "
        "on the held-out evaluation set; no perplexity is computed at this scale.";
    rep["config"] = config_echo(cfg);
    rep["plans"] = plans_json.at("plans");
    rep["expansion"] = Json{{"total_extra_channels", extra}};
    rep["quant"] = Json{{"w_bits", cfg.w_bits},
                        {"a_bits", cfg.a_bits},
                        {"weight_granularity", "per_channel"},
                        {"activation_granularity", "per_token"},
                        {"softmax_probabilities_quantized", false}};
    if (!traces_json.is_null()) {
      rep["correction"] = Json{{"enabled", true},
                               {"traces", traces_json.at("traces")},
                               {"total_trainable_params", traces_json.at("total_trainable_params")},
                               {"adapter_memory_bytes", traces_json.at("adapter_memory_bytes")},
                               {"merge_stats", traces_json.at("merge_stats")}};
    } else {
      rep["correction"] = Json{{"enabled", false}};
    }
    Json metrics_json = Json{{"mse_naive", report.mse_naive},
                             {"mse_reassembled", report.mse_reassembled},
                             {"mse_final", report.mse_final}};
    if (report.mse_corrected >= 0.0) metrics_json["mse_corrected"] = report.mse_corrected;
    rep["metrics"] = std::move(metrics_json);
    rep["bop"] = Json{
        {"config_bits",
         Json{{"weight_matmul_bops", bop_cfg.weight_matmul_bops},
              {"attention_bops", bop_cfg.attention_bops},
              {"total_bops", bop_cfg.total()},
              {"reassembly_extra_ops", bop_cfg.reassembly_extra_ops}}},
        {"fp16_reference",
         Json{{"weight_matmul_bops", bop_fp16.weight_matmul_bops},
              {"attention_bops", bop_fp16.attention_bops},
              {"total_bops", bop_fp16.total()}}}};
    rep["checks"] = report.checks;
    Json artifacts = Json::object();
    artifacts["model"] = "model.json";
    artifacts["calibration"] = "calib.json";
    artifacts["evaluation"] = "eval.json";
    artifacts["plans"] = "plans.json";
    artifacts["quantized"] = "quantized.json";
    if (std::filesystem::exists(corrected_path)) artifacts["corrected"] = "corrected.json";
    rep["artifacts"] = std::move(artifacts);
    const double secs = std::chrono::duration<double>(clock::now() - t0).count();
    rep["timing"] = Json{{"eval_s", secs}};

    report.report_path = cfg.effective_report_path();
    write_text_atomic(report.report_path, rep.dump(2) + "\n");
    return report;
  });
}

RunReport run_pipeline(const PipelineConfig& cfg) {
  cfg.validate();
  stage_gen_model(cfg);
  stage_gen_calib(cfg);
  stage_stats(cfg);
  stage_reassemble(cfg);
  stage_quantize(cfg);
  if (cfg.correction_enabled) stage_correct(cfg);
  return stage_eval(cfg);
}

}  // namespace creq::pipeline
