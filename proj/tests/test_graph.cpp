#include <cmath>
#include <vector>

#include "concatlab/graph.hpp"
#include "concatlab/optim.hpp"
#include "concatlab/rng.hpp"
#include "doctest.h"

using namespace concatlab;
namespace ad = concatlab::ad;

namespace {

Tensor rand_tensor(Shape shape, Rng& rng, double scale = 1.0, double offset = 0.0) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t.at(i) = offset + scale * rng.normal();
  return t;
}

// Weighted sum against a fixed random tensor, so every output coordinate
// influences the scalar with a distinct sensitivity.
ad::Value pin(const ad::Value& v, const Tensor& weights) { return ad::sum_all(ad::mul(v, ad::constant(weights))); }

void expect_gradcheck(const std::function<ad::Value()>& builder, ParamSet& params) {
  const GradCheckResult r = gradcheck(builder, params);
  CHECK_MESSAGE(r.pass, "worst param ", r.worst_param, " rel err ", r.max_rel_err);
}

}  // namespace

TEST_SUITE("graph") {
  TEST_CASE("forward basics") {
    CHECK(ad::evaluate(ad::sigmoid(ad::constant(Tensor::scalar(0.0)))).item() == doctest::Approx(0.5).epsilon(1e-12));
    const Tensor sm = ad::evaluate(ad::softmax(ad::constant(Tensor({1, 2}, {0.0, 0.0})), 1));
    CHECK(sm.at2(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(sm.at2(0, 1) == doctest::Approx(0.5).epsilon(1e-12));

    const Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
    const Tensor row({1, 3}, {10, 20, 30});
    const Tensor sum = ad::evaluate(ad::add(ad::constant(a), ad::constant(row)));
    CHECK(sum.at2(0, 0) == 11.0);
    CHECK(sum.at2(1, 2) == 36.0);

    const Tensor col({2, 1}, {100, 200});
    const Tensor sum2 = ad::evaluate(ad::add(ad::constant(a), ad::constant(col)));
    CHECK(sum2.at2(0, 2) == 103.0);
    CHECK(sum2.at2(1, 0) == 204.0);

    const Tensor scaled = ad::evaluate(ad::mul(ad::constant(a), ad::constant(Tensor::scalar(2.0))));
    CHECK(scaled.at2(1, 1) == 10.0);

    const Tensor mm = ad::evaluate(ad::matmul(ad::constant(Tensor({2, 2}, {1, 2, 3, 4})),
                                              ad::constant(Tensor({2, 1}, {5, 6}))));
    CHECK(mm.at2(0, 0) == 17.0);
    CHECK(mm.at2(1, 0) == 39.0);

    const Tensor tr = ad::evaluate(ad::transpose(ad::constant(a)));
    CHECK(tr.rows() == 3);
    CHECK(tr.at2(2, 1) == 6.0);

    const Tensor cl = ad::evaluate(ad::clamp(ad::constant(Tensor({1, 3}, {-5, 0.25, 5})), 0.0, 1.0));
    CHECK(cl.at2(0, 0) == 0.0);
    CHECK(cl.at2(0, 1) == 0.25);
    CHECK(cl.at2(0, 2) == 1.0);
  }

  TEST_CASE("l2_normalize_rows handles zero rows") {
    const Tensor x({2, 2}, {3, 4, 0, 0});
    const Tensor n = ad::evaluate(ad::l2_normalize_rows(ad::constant(x)));
    CHECK(n.at2(0, 0) == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(n.at2(0, 1) == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(n.at2(1, 0) == 0.0);
    CHECK(n.at2(1, 1) == 0.0);
  }

  TEST_CASE("numeric guards") {
    CHECK_THROWS_AS(ad::evaluate(ad::log_(ad::constant(Tensor::scalar(0.0)))), Error);
    CHECK_THROWS_AS(ad::evaluate(ad::div(ad::constant(Tensor::scalar(1.0)), ad::constant(Tensor::scalar(0.0)))),
                    Error);
    CHECK_THROWS_AS(ad::evaluate(ad::pow_scalar(ad::constant(Tensor::scalar(-2.0)), 0.5)), Error);
    Tensor bad = Tensor::scalar(1.0);
    bad.at(0) = std::nan("");
    CHECK_THROWS_AS(ad::leaf(bad), Error);
  }

  TEST_CASE("backward requires a scalar root") {
    ad::Value x = ad::leaf(Tensor({1, 2}, {1, 2}), true);
    CHECK_THROWS_AS(ad::backward(x), Error);
  }

  TEST_CASE("shared subexpressions accumulate") {
    ad::Value x = ad::leaf(Tensor::scalar(3.0), true);
    ad::Value y = ad::sum_all(ad::add(x, x));
    ad::backward(y);
    CHECK(x->grad.item() == doctest::Approx(2.0).epsilon(1e-12));
  }

  TEST_CASE("gather_rows accumulates over repeated indices") {
    ad::Value x = ad::leaf(Tensor({2, 2}, {1, 2, 3, 4}), true);
    ad::Value g = ad::gather_rows(x, {1, 0, 1});
    CHECK(ad::evaluate(g).rows() == 3);
    CHECK(ad::evaluate(g).at2(0, 1) == 4.0);
    ad::backward(ad::sum_all(g));
    CHECK(x->grad.at2(0, 0) == 1.0);
    CHECK(x->grad.at2(1, 0) == 2.0);
  }

  TEST_CASE("elementwise and structural gradients match finite differences") {
    Rng rng(2024);
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      Rng r = rng.fork(seed);
      const Tensor w34 = rand_tensor({3, 4}, r);
      const Tensor w14 = rand_tensor({1, 4}, r);
      const Tensor w31 = rand_tensor({3, 1}, r);
      const Tensor w43 = rand_tensor({4, 3}, r);
      const Tensor w33 = rand_tensor({3, 3}, r);
      const Tensor w11 = rand_tensor({1, 1}, r);
      const Tensor w64 = rand_tensor({6, 4}, r);
      const Tensor w38 = rand_tensor({3, 8}, r);

      ParamSet ps;
      ad::Value a = ps.add("a", rand_tensor({3, 4}, r));
      ad::Value b = ps.add("b", rand_tensor({3, 4}, r));
      ad::Value brow = ps.add("brow", rand_tensor({1, 4}, r));
      ad::Value bcol = ps.add("bcol", rand_tensor({3, 1}, r));
      ad::Value bpos = ps.add("bpos", rand_tensor({3, 4}, r, 0.25, 2.0));  // bounded away from 0
      ad::Value m = ps.add("m", rand_tensor({4, 3}, r));
      ad::Value off = ps.add("off", rand_tensor({3, 4}, r, 0.5, 1.5));  // away from the leaky kink

      expect_gradcheck([&] { return pin(ad::add(a, b), w34); }, ps);
      expect_gradcheck([&] { return pin(ad::sub(a, b), w34); }, ps);
      expect_gradcheck([&] { return pin(ad::mul(a, b), w34); }, ps);
      expect_gradcheck([&] { return pin(ad::div(a, bpos), w34); }, ps);
      expect_gradcheck([&] { return pin(ad::add(a, brow), w34); }, ps);
      expect_gradcheck([&] { return pin(ad::mul(a, bcol), w34); }, ps);
      expect_gradcheck([&] { return pin(ad::add_scalar(a, 1.7), w34); }, ps);
      expect_gradcheck([&] { return pin(ad::mul_scalar(a, -2.3), w34); }, ps);
      expect_gradcheck([&] { return pin(ad::pow_scalar(bpos, 1.7), w34); }, ps);
      expect_gradcheck([&] { return pin(ad::pow_scalar(a, 2.0), w34); }, ps);
      expect_gradcheck([&] { return pin(ad::neg(a), w34); }, ps);
      expect_gradcheck([&] { return pin(ad::clamp(a, -50.0, 50.0), w34); }, ps);
      expect_gradcheck([&] { return pin(ad::sigmoid(a), w34); }, ps);
      expect_gradcheck([&] { return pin(ad::log_(bpos), w34); }, ps);
      expect_gradcheck([&] { return pin(ad::exp_(a), w34); }, ps);
      expect_gradcheck([&] { return pin(ad::leaky_relu(off, 0.01), w34); }, ps);
      expect_gradcheck([&] { return pin(ad::matmul(a, m), w33); }, ps);
      expect_gradcheck([&] { return pin(ad::transpose(a), w43); }, ps);
      expect_gradcheck([&] { return pin(ad::softmax(a, 0), w34); }, ps);
      expect_gradcheck([&] { return pin(ad::softmax(a, 1), w34); }, ps);
      expect_gradcheck([&] { return pin(ad::l2_normalize_rows(a), w34); }, ps);
      expect_gradcheck([&] { return pin(ad::sum_all(a), w11); }, ps);
      expect_gradcheck([&] { return pin(ad::mean_all(a), w11); }, ps);
      expect_gradcheck([&] { return pin(ad::sum_axis(a, 0), w14); }, ps);
      expect_gradcheck([&] { return pin(ad::sum_axis(a, 1), w31); }, ps);
      expect_gradcheck([&] { return pin(ad::mean_axis(a, 0), w14); }, ps);
      expect_gradcheck([&] { return pin(ad::mean_axis(a, 1), w31); }, ps);
      expect_gradcheck([&] { return pin(ad::concat({a, b}, 0), w64); }, ps);
      expect_gradcheck([&] { return pin(ad::concat({a, b}, 1), w38); }, ps);
      const Tensor w44 = rand_tensor({4, 4}, r);
      const Tensor bias13 = rand_tensor({1, 3}, r);
      expect_gradcheck([&] { return pin(ad::gather_rows(a, {2, 0, 2, 1}), w44); }, ps);
      expect_gradcheck([&] { return pin(ad::affine(a, m, ad::constant(bias13)), w33); }, ps);
    }
  }

  TEST_CASE("affine gradients for weight and bias") {
    Rng r(5);
    ParamSet ps;
    ad::Value x = ps.add("x", rand_tensor({5, 3}, r));
    ad::Value w = ps.add("w", rand_tensor({3, 2}, r));
    ad::Value b = ps.add("b", rand_tensor({1, 2}, r));
    const Tensor pinw = rand_tensor({5, 2}, r);
    expect_gradcheck([&] { return pin(ad::affine(x, w, b), pinw); }, ps);
  }

  TEST_CASE("batch_norm training semantics") {
    Rng r(77);
    const Tensor x = rand_tensor({4, 3}, r, 2.0, 1.0);
    ad::BatchNormState st = ad::BatchNormState::init(3);
    CHECK(st.batches_seen == 0);
    CHECK(st.running_mean.cols() == 3);

    ad::Value gamma = ad::leaf(Tensor::ones({1, 3}), true);
    ad::Value beta = ad::leaf(Tensor::zeros({1, 3}), true);
    const Tensor y = ad::evaluate(ad::batch_norm(ad::constant(x), gamma, beta, st, true));
    CHECK(st.batches_seen == 1);
    // Normalized output has per-column zero mean and (biased) unit variance.
    for (std::int64_t j = 0; j < 3; ++j) {
      double mean = 0.0, var = 0.0;
      for (std::int64_t i = 0; i < 4; ++i) mean += y.at2(i, j) / 4.0;
      for (std::int64_t i = 0; i < 4; ++i) var += (y.at2(i, j) - mean) * (y.at2(i, j) - mean) / 4.0;
      CHECK(std::abs(mean) < 1e-9);
      CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
    }
    // Running stats moved toward batch stats with momentum 0.1 (unbiased var).
    double col0_mean = 0.0;
    for (std::int64_t i = 0; i < 4; ++i) col0_mean += x.at2(i, 0) / 4.0;
    CHECK(st.running_mean.at2(0, 0) == doctest::Approx(0.1 * col0_mean).epsilon(1e-9));
  }

  TEST_CASE("batch_norm batch-of-1 and eval use running stats without updates") {
    ad::BatchNormState st = ad::BatchNormState::init(2);
    st.running_mean = Tensor({1, 2}, {1.0, -1.0});
    st.running_var = Tensor({1, 2}, {4.0, 0.25});
    st.batches_seen = 5;
    ad::Value gamma = ad::leaf(Tensor::ones({1, 2}), false);
    ad::Value beta = ad::leaf(Tensor::zeros({1, 2}), false);

    const Tensor x1({1, 2}, {3.0, 0.0});
    const Tensor y_train1 = ad::evaluate(ad::batch_norm(ad::constant(x1), gamma, beta, st, true));
    CHECK(st.batches_seen == 5);  // no update on batch < 2
    CHECK(y_train1.all_finite());
    CHECK(y_train1.at2(0, 0) == doctest::Approx((3.0 - 1.0) / std::sqrt(4.0 + st.eps)).epsilon(1e-9));

    const Tensor y_eval = ad::evaluate(ad::batch_norm(ad::constant(x1), gamma, beta, st, false));
    CHECK(st.batches_seen == 5);
    CHECK(y_eval.at2(0, 1) == doctest::Approx((0.0 + 1.0) / std::sqrt(0.25 + st.eps)).epsilon(1e-9));
  }

  TEST_CASE("batch_norm gradients (training and eval)") {
    Rng r(31);
    ParamSet ps;
    ad::Value x = ps.add("x", rand_tensor({5, 3}, r, 1.5, 0.3));
    ad::Value gamma = ps.add("gamma", rand_tensor({1, 3}, r, 0.2, 1.0));
    ad::Value beta = ps.add("beta", rand_tensor({1, 3}, r, 0.2, 0.0));
    const Tensor pinw = rand_tensor({5, 3}, r);

    ad::BatchNormState fresh = ad::BatchNormState::init(3);
    expect_gradcheck(
        [&] {
          ad::BatchNormState st = fresh;  // value copy: the builder stays side-effect free
          return pin(ad::batch_norm(x, gamma, beta, st, true), pinw);
        },
        ps);

    ad::BatchNormState seeded = ad::BatchNormState::init(3);
    seeded.running_mean = rand_tensor({1, 3}, r, 0.3, 0.0);
    seeded.running_var = rand_tensor({1, 3}, r, 0.1, 1.0);
    seeded.batches_seen = 3;
    expect_gradcheck(
        [&] {
          ad::BatchNormState st = seeded;
          return pin(ad::batch_norm(x, gamma, beta, st, false), pinw);
        },
        ps);
  }
}
