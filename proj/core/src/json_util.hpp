// Internal JSON helpers shared by checkpoint and pipeline code. Not installed.
#pragma once

#include <json.hpp>

#include "creq/model.hpp"
#include "creq/reassembly.hpp"

namespace creq::detail {

using Json = nlohmann::ordered_json;

inline Json config_to_json(const model::ModelConfig& c) {
  return Json{{"d_model", c.d_model},
              {"n_heads", c.n_heads},
              {"d_ff", c.d_ff},
              {"n_layers", c.n_layers},
              {"seq_len", c.seq_len}};
}

inline model::ModelConfig config_from_json(const Json& j) {
  model::ModelConfig c;
  c.d_model = j.at("d_model").get<int64_t>();
  c.n_heads = j.at("n_heads").get<int64_t>();
  c.d_ff = j.at("d_ff").get<int64_t>();
  c.n_layers = j.at("n_layers").get<int64_t>();
  c.seq_len = j.at("seq_len").get<int64_t>();
  c.validate();
  return c;
}

inline Json plan_to_json(const reassembly::ReassemblyPlan& p) {
  Json splits = Json::object();
  for (size_t i = 0; i < p.splits.size(); ++i)
    if (p.splits[i] > 1) splits[std::to_string(i)] = p.splits[i];
  Json pairs = Json::array();
  for (const auto& mp : p.merge_pairs) pairs.push_back(Json::array({mp.src, mp.dst}));
  return Json{{"theta", p.theta},
              {"channels", p.original_channels()},
              {"splits", std::move(splits)},
              {"merge_pairs", std::move(pairs)},
              {"protected", p.protected_channels},
              {"expansion_ratio", p.expansion_ratio()}};
}

inline reassembly::ReassemblyPlan plan_from_json(const Json& j) {
  reassembly::ReassemblyPlan p;
  p.theta = j.at("theta").get<double>();
  const int64_t channels = j.at("channels").get<int64_t>();
  p.splits.assign(static_cast<size_t>(channels), 1);
  for (const auto& [key, value] : j.at("splits").items()) {
    int64_t idx = std::stoll(key);
    if (idx < 0 || idx >= channels) fail("plan split index out of range");
    p.splits[static_cast<size_t>(idx)] = value.get<int64_t>();
  }
  for (const auto& pair : j.at("merge_pairs"))
    p.merge_pairs.push_back({pair.at(0).get<int64_t>(), pair.at(1).get<int64_t>()});
  p.protected_channels = j.at("protected").get<std::vector<int64_t>>();
  reassembly::validate_plan(p);
  return p;
}

}  // namespace creq::detail
