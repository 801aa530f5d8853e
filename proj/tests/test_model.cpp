#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "creq/checkpoint.hpp"
#include "creq/model.hpp"
#include "test_support.hpp"

using namespace creq;
using namespace creq::model;
using testsupport::random_tensor;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 12;
  c.n_layers = 2;
  c.seq_len = 6;
  return c;
}

std::filesystem::path temp_dir() {
  auto dir = std::filesystem::temp_directory_path() / "creq_model_tests";
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = tiny_config();
  c.n_heads = 3;  // does not divide d_model
  CHECK_THROWS(c.validate());
  c = tiny_config();
  c.d_ff = 0;
  CHECK_THROWS(c.validate());
}

TEST_CASE("all-zero weights reduce the block to the residual path") {
  ModelConfig c = tiny_config();
  BlockWeights w;
  w.ln1_gain = Tensor::zeros({c.d_model});
  w.ln1_bias = Tensor::zeros({c.d_model});
  w.ln2_gain = Tensor::zeros({c.d_model});
  w.ln2_bias = Tensor::zeros({c.d_model});
  w.w_q = Tensor::zeros({c.d_model, c.d_model});
  w.w_k = Tensor::zeros({c.d_model, c.d_model});
  w.w_v = Tensor::zeros({c.d_model, c.d_model});
  w.w_o = Tensor::zeros({c.d_model, c.d_model});
  w.w_gate = Tensor::zeros({c.d_model, c.d_ff});
  w.w_up = Tensor::zeros({c.d_model, c.d_ff});
  w.w_down = Tensor::zeros({c.d_ff, c.d_model});
  Rng rng(1);
  Tensor x = random_tensor(rng, {c.seq_len, c.d_model});
  Tensor out = block_forward(x, w, c.n_heads, ForwardOptions{});
  CHECK(out.bit_equal(x));
}

TEST_CASE("fp forward with zero adapters equals no adapters bit-exactly") {
  ModelConfig c = tiny_config();
  Model m = gen_synthetic_model(c, 7, {});
  Rng rng(2);
  Tensor x = random_tensor(rng, {c.seq_len, c.d_model});

  BlockAdapters ad;
  auto zero_adapter = [&](int64_t in, int64_t out) {
    LowRankAdapter a;
    a.a = random_tensor(rng, {in, 2});
    a.b = Tensor::zeros({2, out});
    return a;
  };
  ad.q = zero_adapter(c.d_model, c.d_model);
  ad.k = zero_adapter(c.d_model, c.d_model);
  ad.v = zero_adapter(c.d_model, c.d_model);
  ad.o = zero_adapter(c.d_model, c.d_model);
  ad.gate = zero_adapter(c.d_model, c.d_ff);
  ad.up = zero_adapter(c.d_model, c.d_ff);
  ad.down = zero_adapter(c.d_ff, c.d_model);

  Tensor plain = block_forward(x, m.blocks[0], c.n_heads, ForwardOptions{});
  Tensor with_ad = block_forward(x, m.blocks[0], c.n_heads, ForwardOptions{}, nullptr, &ad);
  CHECK(plain.bit_equal(with_ad));
}

TEST_CASE("quantsim at 16 bits stays close to fp on unit-scale inputs") {
  ModelConfig c = tiny_config();
  Model m = gen_synthetic_model(c, 11, {});
  Rng rng(3);
  Tensor x = random_tensor(rng, {c.seq_len, c.d_model});
  Tensor fp = model_forward(x, m, ForwardOptions{});
  Tensor q16 = model_forward(x, m, ForwardOptions{ForwardMode::kQuantsim, 16, 16});
  CHECK(max_abs_diff(fp, q16) < 1e-2);
}

TEST_CASE("reassembly plans lower quantsim error on an outlier model") {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 24;
  c.n_layers = 1;
  c.seq_len = 24;
  OutlierSpec outliers;
  outliers.channels = {5};
  outliers.magnification = 50.0;
  Model m = gen_synthetic_model(c, 21, outliers);
  CalibrationSet calib = gen_calibration(c, 22, 6);

  Tensor fp = model_forward(calib.samples[0], m, ForwardOptions{});
  ForwardOptions q4{ForwardMode::kQuantsim, 4, 4};
  Tensor naive = model_forward(calib.samples[0], m, q4);

  auto site_acts = collect_site_inputs(m, calib.samples);
  ModelPlans plans(1);
  const auto& w = m.blocks[0];
  {
    auto stats = reassembly::channel_outlier_stats(site_acts[0].qkv);
    std::vector<const Tensor*> ws{&w.w_q, &w.w_k, &w.w_v};
    auto res = reassembly::adaptive_search(stats, site_acts[0].qkv, ws, 8, {4, 4, true},
                                           reassembly::Objective::kAttention, c.n_heads);
    plans[0].qkv = res.plan;
  }
  Model reass = m;
  reass.blocks[0].w_q = reassembly::reassemble_weights(w.w_q, *plans[0].qkv);
  reass.blocks[0].w_k = reassembly::reassemble_weights(w.w_k, *plans[0].qkv);
  reass.blocks[0].w_v = reassembly::reassemble_weights(w.w_v, *plans[0].qkv);
  Tensor planned = model_forward(calib.samples[0], reass, q4, &plans);
  CHECK(mean_squared(fp, planned) < mean_squared(fp, naive));
}

TEST_CASE("model_forward composition") {
  ModelConfig c = tiny_config();
  Rng rng(4);
  Tensor x = random_tensor(rng, {c.seq_len, c.d_model});

  Model empty;
  empty.config = c;
  empty.config.n_layers = 0;
  CHECK(model_forward(x, empty, ForwardOptions{}).bit_equal(x));

  Model one = gen_synthetic_model(c, 5, {});
  one.config.n_layers = 1;
  one.blocks.resize(1);
  Tensor via_model = model_forward(x, one, ForwardOptions{});
  Tensor via_block = block_forward(x, one.blocks[0], c.n_heads, ForwardOptions{});
  CHECK(via_model.bit_equal(via_block));

  Model full = gen_synthetic_model(c, 5, {});
  Tensor a = model_forward(x, full, ForwardOptions{});
  Tensor b = model_forward(x, full, ForwardOptions{});
  CHECK(a.bit_equal(b));
}

TEST_CASE("synthetic generator statistics") {
  ModelConfig c;
  c.d_model = 32;
  c.n_heads = 4;
  c.d_ff = 86;
  c.n_layers = 2;
  c.seq_len = 64;

  auto median_ratio = [&](double magnification, std::vector<int64_t> channels) {
    OutlierSpec spec;
    spec.channels = std::move(channels);
    spec.magnification = magnification;
    Model m = gen_synthetic_model(c, 313, spec);
    CalibrationSet calib = gen_calibration(c, 314, 8);
    auto site_acts = collect_site_inputs(m, calib.samples);
    auto stats = reassembly::channel_outlier_stats(site_acts[0].qkv);
    std::vector<double> sorted = stats.max_abs;
    std::sort(sorted.begin(), sorted.end());
    double median = sorted[sorted.size() / 2];
    double target = 0;
    for (int64_t ch : spec.channels) target = std::max(target, stats.max_abs[static_cast<size_t>(ch)]);
    if (spec.channels.empty())
      target = *std::max_element(stats.max_abs.begin(), stats.max_abs.end());
    return target / median;
  };

  CHECK(median_ratio(1.0, {4, 14}) < 5.0);
  CHECK(median_ratio(50.0, {4, 14}) >= 10.0);

  OutlierSpec spec;
  spec.channels = {3};
  Model m1 = gen_synthetic_model(c, 99, spec);
  Model m2 = gen_synthetic_model(c, 99, spec);
  CHECK(m1.blocks[0].w_q.bit_equal(m2.blocks[0].w_q));
  CHECK(m1.blocks[1].w_down.bit_equal(m2.blocks[1].w_down));

  CHECK_THROWS(gen_synthetic_model(c, 1, OutlierSpec{{99}, 50.0}));
}

TEST_CASE("calibration generator") {
  ModelConfig c = tiny_config();
  CalibrationSet a = gen_calibration(c, 17, 3);
  CalibrationSet b = gen_calibration(c, 17, 3);
  CalibrationSet d = gen_calibration(c, 18, 3);
  CHECK(a.samples.size() == 3);
  CHECK(a.samples[0].shape() == Shape{c.seq_len, c.d_model});
  CHECK(a.samples[1].bit_equal(b.samples[1]));
  CHECK(!a.samples[0].bit_equal(d.samples[0]));
  CHECK_THROWS(gen_calibration(c, 1, 0));
}

TEST_CASE("checkpoint round trip and corruption handling") {
  ModelConfig c = tiny_config();
  Model m = gen_synthetic_model(c, 23, OutlierSpec{{1}, 50.0});
  auto dir = temp_dir();
  auto path = dir / "model.json";
  checkpoint::save_model(m, path);
  Model back = checkpoint::load_model(path);
  REQUIRE(back.blocks.size() == m.blocks.size());
  for (size_t i = 0; i < m.blocks.size(); ++i) {
    CHECK(back.blocks[i].w_q.bit_equal(m.blocks[i].w_q));
    CHECK(back.blocks[i].w_down.bit_equal(m.blocks[i].w_down));
    CHECK(back.blocks[i].ln1_gain.bit_equal(m.blocks[i].ln1_gain));
  }

  SUBCASE("missing file") {
    CHECK_THROWS_WITH_AS(checkpoint::load_model(dir / "nope.json"),
                         doctest::Contains("not found"), std::runtime_error);
  }
  SUBCASE("truncated blob") {
    auto blob = checkpoint::blob_path(path);
    auto size = std::filesystem::file_size(blob);
    std::filesystem::resize_file(blob, size / 2);
    CHECK_THROWS_WITH_AS(checkpoint::load_model(path), doctest::Contains("truncated"),
                         std::runtime_error);
    checkpoint::save_model(m, path);  // restore
  }
  SUBCASE("missing tensor is named") {
    std::ifstream in(path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    auto at = text.find("block1.w_down");
    REQUIRE(at != std::string::npos);
    text.replace(at, 13, "block1.w_gone");
    std::ofstream out(path, std::ios::trunc);
    out << text;
    out.close();
    CHECK_THROWS_WITH_AS(checkpoint::load_model(path), doctest::Contains("block1.w_down"),
                         std::runtime_error);
    checkpoint::save_model(m, path);
  }
  SUBCASE("version mismatch") {
    std::ifstream in(path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    auto at = text.find("\"format_version\": 1");
    REQUIRE(at != std::string::npos);
    text.replace(at, 19, "\"format_version\": 9");
    std::ofstream out(path, std::ios::trunc);
    out << text;
    out.close();
    CHECK_THROWS_WITH_AS(checkpoint::load_model(path), doctest::Contains("version"),
                         std::runtime_error);
    checkpoint::save_model(m, path);
  }
}

TEST_CASE("calibration checkpoint round trip") {
  ModelConfig c = tiny_config();
  CalibrationSet set = gen_calibration(c, 5, 4);
  set.outlier_spec.channels = {2};
  set.outlier_spec.magnification = 50.0;
  auto path = temp_dir() / "calib.json";
  checkpoint::save_calibration(set, c, path);
  CalibrationSet back = checkpoint::load_calibration(path);
  CHECK(back.samples.size() == 4);
  CHECK(back.seed == 5);
  CHECK(back.outlier_spec.channels == std::vector<int64_t>{2});
  for (size_t i = 0; i < set.samples.size(); ++i)
    CHECK(back.samples[i].bit_equal(set.samples[i]));
}
