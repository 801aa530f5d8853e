#include "creq/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "json_util.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are written little-endian");

namespace creq::checkpoint {

namespace {

using detail::Json;

constexpr int kFormatVersion = 1;

struct BlobWriter {
  Json tensors = Json::array();
  std::string bytes;

  void add_f64_as_f32(const std::string& name, const Tensor& t) {
    Json entry{{"name", name}, {"shape", t.shape()}, {"dtype", "f32"}};
    entry["byte_offset"] = bytes.size();
    entry["byte_length"] = static_cast<size_t>(t.numel()) * 4;
    size_t at = bytes.size();
    bytes.resize(at + static_cast<size_t>(t.numel()) * 4);
    for (int64_t i = 0; i < t.numel(); ++i) {
      float f = static_cast<float>(t.at(i));
      std::memcpy(bytes.data() + at + static_cast<size_t>(i) * 4, &f, 4);
    }
    tensors.push_back(std::move(entry));
  }

  void add_i32(const std::string& name, const Shape& shape, std::span<const int32_t> values) {
    Json entry{{"name", name}, {"shape", shape}, {"dtype", "i32"}};
    entry["byte_offset"] = bytes.size();
    entry["byte_length"] = values.size() * 4;
    size_t at = bytes.size();
    bytes.resize(at + values.size() * 4);
    std::memcpy(bytes.data() + at, values.data(), values.size() * 4);
    tensors.push_back(std::move(entry));
  }
};

struct BlobReader {
  Json manifest;
  std::string bytes;
  std::map<std::string, Json> index;

  explicit BlobReader(const std::filesystem::path& path, const std::string& expected_kind) {
    std::ifstream in(path);
    if (!in) fail("checkpoint manifest not found: " + path.string());
    try {
      manifest = Json::parse(in);
    } catch (const std::exception& e) {
      fail("checkpoint manifest is not valid JSON: " + std::string(e.what()));
    }
    if (manifest.value("format_version", -1) != kFormatVersion)
      fail("unsupported checkpoint format version in " + path.string());
    if (manifest.value("kind", "") != expected_kind)
      fail("checkpoint kind mismatch: expected " + expected_kind);
    std::ifstream blob(blob_path(path), std::ios::binary);
    if (!blob) fail("checkpoint blob not found: " + blob_path(path).string());
    bytes.assign(std::istreambuf_iterator<char>(blob), std::istreambuf_iterator<char>());
    size_t expected = 0;
    for (const auto& t : manifest.at("tensors")) {
      const std::string name = t.at("name").get<std::string>();
      Shape shape = t.at("shape").get<Shape>();
      const size_t len = t.at("byte_length").get<size_t>();
      const size_t off = t.at("byte_offset").get<size_t>();
      if (len != static_cast<size_t>(numel(shape)) * 4)
        fail("tensor " + name + " has inconsistent byte length");
      expected = std::max(expected, off + len);
      index[name] = t;
    }
    if (bytes.size() < expected)
      fail("checkpoint blob truncated: " + blob_path(path).string());
  }

  const Json& entry(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) fail("checkpoint is missing tensor " + name);
    return it->second;
  }

  Tensor read_f32(const std::string& name) const {
    const Json& t = entry(name);
    if (t.at("dtype") != "f32") fail("tensor " + name + " has unexpected dtype");
    Shape shape = t.at("shape").get<Shape>();
    const size_t off = t.at("byte_offset").get<size_t>();
    std::vector<double> data(static_cast<size_t>(numel(shape)));
    for (size_t i = 0; i < data.size(); ++i) {
      float f;
      std::memcpy(&f, bytes.data() + off + i * 4, 4);
      data[i] = static_cast<double>(f);
    }
    try {
      return Tensor::from_data(std::move(shape), std::move(data));
    } catch (const std::exception&) {
      fail("tensor " + name + " holds non-finite values");
    }
  }

  std::pair<Shape, std::vector<int32_t>> read_i32(const std::string& name) const {
    const Json& t = entry(name);
    if (t.at("dtype") != "i32") fail("tensor " + name + " has unexpected dtype");
    Shape shape = t.at("shape").get<Shape>();
    const size_t off = t.at("byte_offset").get<size_t>();
    std::vector<int32_t> data(static_cast<size_t>(numel(shape)));
    std::memcpy(data.data(), bytes.data() + off, data.size() * 4);
    return {std::move(shape), std::move(data)};
  }
};

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail("cannot open " + tmp.string() + " for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) fail("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_checkpoint(const std::filesystem::path& path, Json manifest, BlobWriter&& blob) {
  manifest["tensors"] = std::move(blob.tensors);
  write_file_atomic(blob_path(path), blob.bytes);
  write_file_atomic(path, manifest.dump(2) + "\n");
}

const char* kBlockTensors[] = {"ln1_gain", "ln1_bias", "w_q",    "w_k",  "w_v",   "w_o",
                               "ln2_gain", "ln2_bias", "w_gate", "w_up", "w_down"};

std::vector<Tensor*> block_fields(model::BlockWeights& b) {
  return {&b.ln1_gain, &b.ln1_bias, &b.w_q,    &b.w_k,  &b.w_v,   &b.w_o,
          &b.ln2_gain, &b.ln2_bias, &b.w_gate, &b.w_up, &b.w_down};
}

std::vector<const Tensor*> block_fields(const model::BlockWeights& b) {
  return {&b.ln1_gain, &b.ln1_bias, &b.w_q,    &b.w_k,  &b.w_v,   &b.w_o,
          &b.ln2_gain, &b.ln2_bias, &b.w_gate, &b.w_up, &b.w_down};
}

quant::Granularity granularity_from_string(const std::string& s) {
  if (s == "per_tensor") return quant::Granularity::kPerTensor;
  if (s == "per_channel") return quant::Granularity::kPerChannel;
  if (s == "per_token") return quant::Granularity::kPerToken;
  fail("unknown quantization granularity: " + s);
}

const char* kProjNames[] = {"q", "k", "v", "o", "gate", "up", "down"};

std::vector<QuantizedProjection*> projection_fields(QuantizedBlock& b) {
  return {&b.q, &b.k, &b.v, &b.o, &b.gate, &b.up, &b.down};
}

std::vector<const QuantizedProjection*> projection_fields(const QuantizedBlock& b) {
  return {&b.q, &b.k, &b.v, &b.o, &b.gate, &b.up, &b.down};
}

}  // namespace

std::filesystem::path blob_path(const std::filesystem::path& manifest_path) {
  std::filesystem::path p = manifest_path;
  p += ".bin";
  return p;
}

void save_model(const model::Model& m, const std::filesystem::path& path) {
  Json manifest{{"format_version", kFormatVersion},
                {"kind", "model"},
                {"model_config", detail::config_to_json(m.config)}};
  BlobWriter blob;
  for (size_t i = 0; i < m.blocks.size(); ++i) {
    auto fields = block_fields(m.blocks[i]);
    for (size_t f = 0; f < fields.size(); ++f)
      blob.add_f64_as_f32("block" + std::to_string(i) + "." + kBlockTensors[f], *fields[f]);
  }
  write_checkpoint(path, std::move(manifest), std::move(blob));
}

model::Model load_model(const std::filesystem::path& path) {
  BlobReader reader(path, "model");
  model::Model m;
  m.config = detail::config_from_json(reader.manifest.at("model_config"));
  for (int64_t i = 0; i < m.config.n_layers; ++i) {
    model::BlockWeights b;
    auto fields = block_fields(b);
    for (size_t f = 0; f < fields.size(); ++f)
      *fields[f] = reader.read_f32("block" + std::to_string(i) + "." + kBlockTensors[f]);
    m.blocks.push_back(std::move(b));
  }
  return m;
}

void save_calibration(const model::CalibrationSet& set, const model::ModelConfig& config,
                      const std::filesystem::path& path) {
  Json manifest{{"format_version", kFormatVersion},
                {"kind", "calibration"},
                {"model_config", detail::config_to_json(config)},
                {"seed", set.seed},
                {"outlier_channels", set.outlier_spec.channels},
                {"outlier_magnification", set.outlier_spec.magnification},
                {"n_samples", set.samples.size()}};
  BlobWriter blob;
  for (size_t i = 0; i < set.samples.size(); ++i)
    blob.add_f64_as_f32("sample_" + std::to_string(i), set.samples[i]);
  write_checkpoint(path, std::move(manifest), std::move(blob));
}

model::CalibrationSet load_calibration(const std::filesystem::path& path) {
  BlobReader reader(path, "calibration");
  model::CalibrationSet set;
  set.seed = reader.manifest.value("seed", uint64_t{0});
  set.outlier_spec.channels = reader.manifest.value("outlier_channels", std::vector<int64_t>{});
  set.outlier_spec.magnification = reader.manifest.value("outlier_magnification", 50.0);
  const size_t n = reader.manifest.at("n_samples").get<size_t>();
  for (size_t i = 0; i < n; ++i)
    set.samples.push_back(reader.read_f32("sample_" + std::to_string(i)));
  return set;
}

void save_quantized(const QuantizedModel& qm, const std::filesystem::path& path) {
  Json manifest{{"format_version", kFormatVersion},
                {"kind", "quantized_model"},
                {"model_config", detail::config_to_json(qm.config)},
                {"w_bits", qm.w_bits},
                {"a_bits", qm.a_bits}};
  Json plans = Json::array();
  for (const auto& site : qm.plans) {
    Json entry = Json::object();
    if (site.qkv) entry["qkv"] = detail::plan_to_json(*site.qkv);
    if (site.ffn_in) entry["ffn_in"] = detail::plan_to_json(*site.ffn_in);
    if (site.ffn_down) entry["ffn_down"] = detail::plan_to_json(*site.ffn_down);
    plans.push_back(std::move(entry));
  }
  manifest["plans"] = std::move(plans);

  BlobWriter blob;
  Json params = Json::object();
  for (size_t i = 0; i < qm.blocks.size(); ++i) {
    const auto& b = qm.blocks[i];
    const std::string prefix = "block" + std::to_string(i) + ".";
    blob.add_f64_as_f32(prefix + "ln1_gain", b.ln1_gain);
    blob.add_f64_as_f32(prefix + "ln1_bias", b.ln1_bias);
    blob.add_f64_as_f32(prefix + "ln2_gain", b.ln2_gain);
    blob.add_f64_as_f32(prefix + "ln2_bias", b.ln2_bias);
    auto projs = projection_fields(b);
    for (size_t p = 0; p < projs.size(); ++p) {
      const std::string name = prefix + kProjNames[p];
      blob.add_i32(name + ".codes", projs[p]->codes.shape, projs[p]->codes.codes);
      Tensor alpha = Tensor::wrap({static_cast<int64_t>(projs[p]->params.alpha.size())},
                                  projs[p]->params.alpha);
      blob.add_f64_as_f32(name + ".alpha", alpha);
      std::vector<int32_t> beta32;
      for (int64_t bcode : projs[p]->params.beta) {
        if (bcode < INT32_MIN || bcode > INT32_MAX) fail("zero-point does not fit i32 storage");
        beta32.push_back(static_cast<int32_t>(bcode));
      }
      blob.add_i32(name + ".beta", {static_cast<int64_t>(beta32.size())}, beta32);
      params[name] = Json{{"bits", projs[p]->params.bits},
                          {"granularity", quant::to_string(projs[p]->params.granularity)}};
    }
  }
  manifest["weight_quant"] = std::move(params);
  write_checkpoint(path, std::move(manifest), std::move(blob));
}

QuantizedModel load_quantized(const std::filesystem::path& path) {
  BlobReader reader(path, "quantized_model");
  QuantizedModel qm;
  qm.config = detail::config_from_json(reader.manifest.at("model_config"));
  qm.w_bits = reader.manifest.at("w_bits").get<int>();
  qm.a_bits = reader.manifest.at("a_bits").get<int>();
  for (const auto& entry : reader.manifest.at("plans")) {
    model::SitePlans site;
    if (entry.contains("qkv")) site.qkv = detail::plan_from_json(entry.at("qkv"));
    if (entry.contains("ffn_in")) site.ffn_in = detail::plan_from_json(entry.at("ffn_in"));
    if (entry.contains("ffn_down")) site.ffn_down = detail::plan_from_json(entry.at("ffn_down"));
    qm.plans.push_back(std::move(site));
  }
  if (static_cast<int64_t>(qm.plans.size()) != qm.config.n_layers)
    fail("quantized checkpoint plan count does not match layer count");
  for (int64_t i = 0; i < qm.config.n_layers; ++i) {
    QuantizedBlock b;
    const std::string prefix = "block" + std::to_string(i) + ".";
    b.ln1_gain = reader.read_f32(prefix + "ln1_gain");
    b.ln1_bias = reader.read_f32(prefix + "ln1_bias");
    b.ln2_gain = reader.read_f32(prefix + "ln2_gain");
    b.ln2_bias = reader.read_f32(prefix + "ln2_bias");
    auto projs = projection_fields(b);
    const auto& params = reader.manifest.at("weight_quant");
    for (size_t p = 0; p < projs.size(); ++p) {
      const std::string name = prefix + kProjNames[p];
      auto [cshape, codes] = reader.read_i32(name + ".codes");
      projs[p]->codes = {std::move(cshape), std::move(codes)};
      Tensor alpha = reader.read_f32(name + ".alpha");
      auto [bshape, beta32] = reader.read_i32(name + ".beta");
      (void)bshape;
      quant::QuantParams qp;
      qp.bits = params.at(name).at("bits").get<int>();
      qp.granularity = granularity_from_string(params.at(name).at("granularity"));
      qp.alpha = alpha.data();
      for (int32_t v : beta32) qp.beta.push_back(v);
      projs[p]->params = std::move(qp);
    }
    qm.blocks.push_back(std::move(b));
  }
  return qm;
}

model::Model QuantizedModel::to_dense() const {
  model::Model m;
  m.config = config;
  for (const auto& b : blocks) {
    model::BlockWeights w;
    w.ln1_gain = b.ln1_gain;
    w.ln1_bias = b.ln1_bias;
    w.ln2_gain = b.ln2_gain;
    w.ln2_bias = b.ln2_bias;
    w.w_q = quant::dequantize(b.q.codes, b.q.params);
    w.w_k = quant::dequantize(b.k.codes, b.k.params);
    w.w_v = quant::dequantize(b.v.codes, b.v.params);
    w.w_o = quant::dequantize(b.o.codes, b.o.params);
    w.w_gate = quant::dequantize(b.gate.codes, b.gate.params);
    w.w_up = quant::dequantize(b.up.codes, b.up.params);
    w.w_down = quant::dequantize(b.down.codes, b.down.params);
    m.blocks.push_back(std::move(w));
  }
  return m;
}

}  // namespace creq::checkpoint
