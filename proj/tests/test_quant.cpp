#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "creq/autodiff.hpp"
#include "creq/quant.hpp"
#include "test_support.hpp"

using namespace creq;
using namespace creq::quant;
using testsupport::random_tensor;

TEST_CASE("quant params from the reference formula") {
  SUBCASE("mixed-sign range, b=2") {
    Tensor x = Tensor::from_data({3}, {-1, 0, 3});
    QuantParams p = compute_quant_params(x, 2, Granularity::kPerTensor);
    CHECK(p.alpha[0] == doctest::Approx(4.0 / 3.0).epsilon(1e-9));
    CHECK(p.beta[0] == 1);
  }
  SUBCASE("integer-aligned range, b=4") {
    std::vector<double> ramp(16);
    for (int i = 0; i < 16; ++i) ramp[static_cast<size_t>(i)] = i;
    QuantParams p = compute_quant_params(Tensor::from_data({16}, ramp), 4,
                                         Granularity::kPerTensor);
    CHECK(p.alpha[0] == 1.0);
    CHECK(p.beta[0] == 0);
  }
  SUBCASE("degenerate constant group reconstructs exactly") {
    Tensor x = Tensor::from_data({2}, {5, 5});
    QuantParams p = compute_quant_params(x, 4, Granularity::kPerTensor);
    CHECK(p.alpha[0] == doctest::Approx(5.0 / 15.0).epsilon(1e-12));
    CHECK(p.beta[0] == 0);
    Tensor back = dequantize(quantize(x, p), p);
    CHECK(back.at(0) == 5.0);
    CHECK(back.at(1) == 5.0);

    Tensor xn = Tensor::from_data({2}, {-5, -5});
    QuantParams pn = compute_quant_params(xn, 4, Granularity::kPerTensor);
    CHECK(pn.beta[0] == 15);
    CHECK(dequantize(quantize(xn, pn), pn).at(0) == -5.0);
  }
  SUBCASE("empty tensor and bad bit widths are rejected") {
    CHECK_THROWS(compute_quant_params(Tensor::zeros({0}), 4, Granularity::kPerTensor));
    CHECK_THROWS(compute_quant_params(Tensor::full({2}, 1.0), 1, Granularity::kPerTensor));
    CHECK_THROWS(compute_quant_params(Tensor::full({2}, 1.0), 17, Granularity::kPerTensor));
  }
}

TEST_CASE("quantize maps the reference example and endpoints") {
  Tensor x = Tensor::from_data({3}, {-1, 0, 3});
  QuantParams p = compute_quant_params(x, 2, Granularity::kPerTensor);
  QuantizedTensor q = quantize(x, p);
  CHECK(q.codes == std::vector<int32_t>{0, 1, 3});

  // group min to code 0, group max to the top code
  Rng rng(21);
  for (int rep = 0; rep < 50; ++rep) {
    Tensor t = random_tensor(rng, {40}, rng.uniform(0.1, 30.0));
    QuantParams tp = compute_quant_params(t, 3, Granularity::kPerTensor);
    QuantizedTensor tq = quantize(t, tp);
    int64_t arg_min = 0, arg_max = 0;
    for (int64_t i = 1; i < t.numel(); ++i) {
      if (t.at(i) < t.at(arg_min)) arg_min = i;
      if (t.at(i) > t.at(arg_max)) arg_max = i;
    }
    CHECK(tq.codes[static_cast<size_t>(arg_min)] == 0);
    CHECK(tq.codes[static_cast<size_t>(arg_max)] == 7);
  }

  // out-of-range probe values clamp to the boundary codes
  Tensor probe = Tensor::from_data({2}, {-100.0, 100.0});
  QuantizedTensor pq = quantize(probe, p);
  CHECK(pq.codes == std::vector<int32_t>{0, 3});
}

TEST_CASE("dequantize round trip") {
  Tensor x = Tensor::from_data({3}, {-1, 0, 3});
  QuantParams p = compute_quant_params(x, 2, Granularity::kPerTensor);
  Tensor back = dequantize(quantize(x, p), p);
  CHECK(back.at(0) == doctest::Approx(-4.0 / 3.0).epsilon(1e-9));
  CHECK(back.at(1) == 0.0);  // the zero-point code reconstructs exactly zero
  CHECK(back.at(2) == doctest::Approx(8.0 / 3.0).epsilon(1e-9));
  for (int64_t i = 0; i < 3; ++i)
    CHECK(std::fabs(back.at(i) - x.at(i)) <= p.alpha[0] / 2 + 1e-12);

  QuantizedTensor bad;
  bad.shape = {3};
  bad.codes = {0, 1, 9};
  CHECK_THROWS(dequantize(bad, p));

  Rng rng(31);
  Tensor big = random_tensor(rng, {64, 16}, 3.0);
  QuantParams p16 = compute_quant_params(big, 16, Granularity::kPerToken);
  Tensor r16 = dequantize(quantize(big, p16), p16);
  for (int64_t i = 0; i < big.rows(); ++i)
    for (int64_t j = 0; j < big.cols(); ++j)
      CHECK(std::fabs(big.at(i, j) - r16.at(i, j)) <=
            p16.alpha[static_cast<size_t>(i)] / 2 + 1e-12);
}

TEST_CASE("round-trip error bound holds for every granularity") {
  Rng rng(57);
  for (int bits : {2, 3, 4, 8, 16}) {
    for (Granularity g :
         {Granularity::kPerTensor, Granularity::kPerToken, Granularity::kPerChannel}) {
      Tensor x = random_tensor(rng, {17, 9}, rng.uniform(0.01, 20.0));
      QuantParams p = compute_quant_params(x, bits, g);
      Tensor back = dequantize(quantize(x, p), p);
      for (int64_t i = 0; i < x.rows(); ++i) {
        for (int64_t j = 0; j < x.cols(); ++j) {
          int64_t group = g == Granularity::kPerTensor ? 0
                          : g == Granularity::kPerToken ? i
                                                        : j;
          double alpha = p.alpha[static_cast<size_t>(group)];
          CHECK(std::fabs(x.at(i, j) - back.at(i, j)) <= alpha / 2 + 1e-12);
        }
      }
    }
  }
}

TEST_CASE("per-token quantization equals per-tensor row by row") {
  Rng rng(77);
  Tensor x = random_tensor(rng, {12, 7}, 4.0);
  QuantParams pt = compute_quant_params(x, 4, Granularity::kPerToken);
  Tensor whole = dequantize(quantize(x, pt), pt);
  for (int64_t i = 0; i < x.rows(); ++i) {
    Tensor row = Tensor::zeros({1, x.cols()});
    for (int64_t j = 0; j < x.cols(); ++j) row.at(0, j) = x.at(i, j);
    QuantParams pr = compute_quant_params(row, 4, Granularity::kPerTensor);
    CHECK(pr.alpha[0] == pt.alpha[static_cast<size_t>(i)]);
    CHECK(pr.beta[0] == pt.beta[static_cast<size_t>(i)]);
    Tensor rowback = dequantize(quantize(row, pr), pr);
    for (int64_t j = 0; j < x.cols(); ++j) CHECK(rowback.at(0, j) == whole.at(i, j));
  }
}

TEST_CASE("fake_quant behaviour") {
  SUBCASE("16-bit stays within 1e-3 relative on unit-scale data") {
    Rng rng(13);
    Tensor x = random_tensor(rng, {32, 8});
    Tensor y = fake_quant(x, 16, Granularity::kPerTensor);
    for (int64_t i = 0; i < x.numel(); ++i)
      CHECK(std::fabs(y.at(i) - x.at(i)) <= 1e-3 * std::max(1.0, std::fabs(x.at(i))));
  }
  SUBCASE("grid values are an exact fixpoint") {
    std::vector<double> grid(8);
    for (int i = 0; i < 8; ++i) grid[static_cast<size_t>(i)] = i;  // alpha 1, beta 0 at b=3
    Tensor x = Tensor::from_data({8}, grid);
    CHECK(fake_quant(x, 3, Granularity::kPerTensor).bit_equal(x));
  }
  SUBCASE("idempotent bit-exactly on random data") {
    Rng rng(1234);
    for (int bits : {2, 3, 4, 8, 16}) {
      for (int rep = 0; rep < 40; ++rep) {
        Tensor x = random_tensor(rng, {11, 6}, rng.uniform(0.05, 50.0));
        for (Granularity g :
             {Granularity::kPerTensor, Granularity::kPerToken, Granularity::kPerChannel}) {
          Tensor once = fake_quant(x, bits, g);
          Tensor twice = fake_quant(once, bits, g);
          CHECK(twice.bit_equal(once));
        }
      }
    }
  }
  SUBCASE("elements clamped by the tie rounding get zero gradient") {
    // min/alpha sits exactly on a rounding tie, pushing max past the top code
    Tensor x = Tensor::from_data({1, 2}, {-1.0, 5.0});
    FakeQuantResult res = fake_quant_with_mask(x, 2, Granularity::kPerTensor);
    CHECK(res.pass_mask[0] == 1);
    CHECK(res.pass_mask[1] == 0);

    Tensor grad_in = Tensor::from_data({1, 2}, {1.0, 1.0});
    x.requires_grad = true;
    Tape tape;
    NodeId in = tape.leaf(x);
    NodeId out = tape.fake_quant(in, 2, Granularity::kPerTensor);
    tape.backward(tape.sum_all(out));
    CHECK(tape.grad(in).at(0) == 1.0);
    CHECK(tape.grad(in).at(1) == 0.0);
  }
}

TEST_CASE("codes always stay in the unsigned range") {
  Rng rng(888);
  for (int bits : {2, 5, 9}) {
    Tensor x = random_tensor(rng, {9, 9}, 12.0);
    QuantParams p = compute_quant_params(x, bits, Granularity::kPerChannel);
    QuantizedTensor q = quantize(x, p);
    for (int32_t c : q.codes) {
      CHECK(c >= 0);
      CHECK(c <= (1 << bits) - 1);
    }
  }
}
