#include <cmath>
#include <map>
#include <vector>

#include "concatlab/losses.hpp"
#include "concatlab/optim.hpp"
#include "concatlab/rng.hpp"
#include "doctest.h"

using namespace concatlab;
namespace ad = concatlab::ad;

namespace {

const double kPairNce = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));  // ~0.3133

Tensor randn(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t.at(i) = scale * rng.normal();
  return t;
}

Tensor unit_rows(Shape shape, Rng& rng) {
  Tensor t = randn(std::move(shape), rng);
  for (std::int64_t i = 0; i < t.rows(); ++i) {
    double n = 0.0;
    for (std::int64_t j = 0; j < t.cols(); ++j) n += t.at2(i, j) * t.at2(i, j);
    n = std::sqrt(n);
    for (std::int64_t j = 0; j < t.cols(); ++j) t.at2(i, j) /= n;
  }
  return t;
}

}  // namespace

TEST_SUITE("losses") {
  TEST_CASE("classification logits") {
    // Orthogonal query: every probability is sigmoid(0) = 0.5.
    Tensor s({1, 3}, {1, 0, 0});
    Tensor a({2, 3}, {0, 1, 0, 0, 0, 1});
    Tensor probs = ad::evaluate(classification_logits(ad::constant(s), a));
    CHECK(probs.at2(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(probs.at2(0, 1) == doctest::Approx(0.5).epsilon(1e-12));

    // Scaled copy of a unit embedding: probability sigmoid(10).
    Tensor s10({1, 3}, {0, 10, 0});
    probs = ad::evaluate(classification_logits(ad::constant(s10), a));
    CHECK(probs.at2(0, 0) == doctest::Approx(1.0 / (1.0 + std::exp(-10.0))).epsilon(1e-12));

    // Monotone in the inner product.
    Rng rng(3);
    for (int t = 0; t < 50; ++t) {
      Tensor e = unit_rows({1, 4}, rng);
      Tensor q1 = randn({1, 4}, rng);
      Tensor q2 = q1;
      for (std::int64_t j = 0; j < 4; ++j) q2.at(j) += 0.5 * e.at(j);  // strictly larger dot with e
      const double p1 = ad::evaluate(classification_logits(ad::constant(q1), e)).item();
      const double p2 = ad::evaluate(classification_logits(ad::constant(q2), e)).item();
      CHECK(p2 > p1);
    }
    CHECK_THROWS_AS(ad::evaluate(classification_logits(ad::constant(Tensor({1, 3})), Tensor({2, 4}))), Error);
  }

  TEST_CASE("conditional weights") {
    // All cosines zero: uniform regardless of matched flags.
    Tensor s({2, 2}, {1, 0, 0, 1});
    Tensor c({1, 2}, {0, 0});  // zero token -> similarity 0 everywhere
    Tensor w = ad::evaluate(conditional_weights(ad::constant(s), c, {true, false}, 2.0));
    CHECK(w.rows() == 2);
    CHECK(w.cols() == 1);
    CHECK(w.at2(0, 0) == doctest::Approx(0.5).epsilon(1e-12));

    // Hand case: cosines [0.5, 0.5], matched [true, false], gamma = 2
    // -> softmax([1.5, 0.5]) = [0.7311, 0.2689].
    const double r3 = std::sqrt(3.0);
    Tensor s2({2, 2}, {0.5, r3 / 2.0, 0.5, r3 / 2.0});
    Tensor c2({1, 2}, {1, 0});
    w = ad::evaluate(conditional_weights(ad::constant(s2), c2, {true, false}, 2.0));
    CHECK(w.at2(0, 0) == doctest::Approx(0.7311).epsilon(1e-3));
    CHECK(w.at2(1, 0) == doctest::Approx(0.2689).epsilon(1e-3));
    CHECK(w.at2(0, 0) + w.at2(1, 0) == doctest::Approx(1.0).epsilon(1e-12));

    // gamma = 0 collapses to the unconditional softmax of cosines.
    Rng rng(12);
    Tensor s3 = randn({3, 4}, rng);
    Tensor c3 = unit_rows({1, 4}, rng);
    const Tensor w_gamma0 =
        ad::evaluate(conditional_weights(ad::constant(s3), c3, {true, false, true}, 0.0));
    const Tensor w_plain =
        ad::evaluate(conditional_weights(ad::constant(s3), c3, {false, false, false}, 5.0));
    for (std::int64_t i = 0; i < 3; ++i) {
      CHECK(w_gamma0.at2(i, 0) == doctest::Approx(w_plain.at2(i, 0)).epsilon(1e-12));
    }
  }

  TEST_CASE("reconstruct_cls") {
    Tensor s({2, 3}, {1, 2, 3, 4, 5, 6});
    // One-hot at row 1.
    Tensor w({2, 1}, {0, 1});
    Tensor r = ad::evaluate(reconstruct_cls(ad::constant(w), ad::constant(s)));
    CHECK(r.rows() == 1);
    CHECK(r.at2(0, 0) == 4.0);
    CHECK(r.at2(0, 2) == 6.0);
    // Uniform average.
    Tensor wu({2, 1}, {0.5, 0.5});
    r = ad::evaluate(reconstruct_cls(ad::constant(wu), ad::constant(s)));
    CHECK(r.at2(0, 1) == doctest::Approx(3.5).epsilon(1e-12));
    // K = 1 returns the single row.
    Tensor s1({1, 3}, {7, 8, 9});
    r = ad::evaluate(reconstruct_cls(ad::constant(Tensor({1, 1}, {1.0})), ad::constant(s1)));
    CHECK(r.at2(0, 2) == 9.0);
  }

  TEST_CASE("select_matched orders rows by segment index") {
    Tensor s({3, 2}, {10, 11, 20, 21, 30, 31});
    Assignment a;
    a.query_to_segment = {1, -1, 0};  // segment 0 <- query 2, segment 1 <- query 0
    a.segment_to_query = {2, 0};
    const Tensor m = ad::evaluate(select_matched(ad::constant(s), a));
    REQUIRE(m.rows() == 2);
    CHECK(m.at2(0, 0) == 30.0);  // query 2 first (segment 0)
    CHECK(m.at2(1, 0) == 10.0);  // then query 0 (segment 1)
  }

  TEST_CASE("token bank is FIFO and capacity-bounded") {
    TokenBank bank(2);
    CHECK(bank.size() == 0);
    CHECK(bank.stacked().size() == 0);
    bank.push(Tensor({1, 2}, {1, 1}));
    bank.push(Tensor({1, 2}, {2, 2}));
    bank.push(Tensor({1, 2}, {3, 3}));
    CHECK(bank.size() == 2);
    const Tensor st = bank.stacked();
    REQUIRE(st.rows() == 2);
    CHECK(st.at2(0, 0) == 2.0);  // oldest surviving entry first
    CHECK(st.at2(1, 0) == 3.0);
    TokenBank zero(0);
    zero.push(Tensor({1, 2}, {1, 1}));
    CHECK(zero.size() == 0);
    CHECK_THROWS_AS(TokenBank(-1), ContractError);
  }

  TEST_CASE("global alignment hand values and bank behavior") {
    // B = 1, empty bank: no negatives, loss 0.
    TokenBank empty(8);
    Tensor one({1, 2}, {1, 0});
    LossTerm t = cga_loss(ad::constant(one), one, empty, 1.0);
    CHECK(ad::evaluate(t.value).item() == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(empty.size() == 1);  // targets pushed after the loss

    // B = 2 orthonormal aligned pairs, tau = 1: -log(e/(e+1)) each.
    Tensor pairs({2, 2}, {1, 0, 0, 1});
    TokenBank bank(8);
    t = cga_loss(ad::constant(pairs), pairs, bank, 1.0);
    CHECK(ad::evaluate(t.value).item() == doctest::Approx(kPairNce).epsilon(1e-4));
    CHECK(bank.size() == 2);

    // Adding bank negatives never decreases the loss.
    TokenBank preloaded(8);
    preloaded.push(Tensor({1, 2}, {0.6, 0.8}));
    const double with_bank = ad::evaluate(cga_loss(ad::constant(pairs), pairs, preloaded, 1.0).value).item();
    CHECK(with_bank >= kPairNce - 1e-9);

    // Permuting bank contents leaves the loss unchanged.
    TokenBank b1(8), b2(8);
    Rng rng(5);
    Tensor n1 = unit_rows({1, 3}, rng), n2 = unit_rows({1, 3}, rng);
    b1.push(n1);
    b1.push(n2);
    b2.push(n2);
    b2.push(n1);
    Tensor batch = unit_rows({2, 3}, rng);
    const double l1 = ad::evaluate(cga_loss(ad::constant(batch), batch, b1, 0.5).value).item();
    const double l2 = ad::evaluate(cga_loss(ad::constant(batch), batch, b2, 0.5).value).item();
    CHECK(l1 == doctest::Approx(l2).epsilon(1e-12));

    CHECK_THROWS_AS(cga_loss(ad::constant(pairs), pairs, bank, 0.0), Error);  // tau must be positive
  }

  TEST_CASE("bank entries never contribute gradient") {
    Rng rng(7);
    ParamSet ps;
    ad::Value recon = ps.add("recon", unit_rows({2, 3}, rng));
    Tensor targets = unit_rows({2, 3}, rng);
    TokenBank bank(4);
    bank.push(unit_rows({1, 3}, rng));
    ps.clear_grads();
    ad::backward(cga_loss(recon, targets, bank, 0.07).value);
    CHECK(recon->grad_allocated());  // gradient reaches the reconstruction...
    CHECK(bank.size() == 3);         // ...and the bank only ever holds plain tensors
  }

  TEST_CASE("instance alignment") {
    // Single pooled pair: no negatives -> 0.
    Tensor p1({1, 2}, {1, 0});
    LossTerm t = cia_loss(ad::constant(p1), p1, 1.0);
    CHECK(ad::evaluate(t.value).item() == doctest::Approx(0.0).epsilon(1e-12));
    CHECK_FALSE(t.skipped);

    // Two orthonormal aligned pairs, tau = 1.
    Tensor pairs({2, 2}, {1, 0, 0, 1});
    t = cia_loss(ad::constant(pairs), pairs, 1.0);
    CHECK(ad::evaluate(t.value).item() == doctest::Approx(kPairNce).epsilon(1e-4));

    // Duplicated segment token among negatives raises the loss versus
    // distinct negatives (the duplicate sits at cosine 1 with the positive).
    Tensor queries({2, 2}, {1, 0, 0, 1});
    Tensor distinct({2, 2}, {1, 0, 0, 1});
    Tensor duplicated({2, 2}, {1, 0, 1, 0});
    const double base = ad::evaluate(cia_loss(ad::constant(queries), distinct, 0.5).value).item();
    const double dup = ad::evaluate(cia_loss(ad::constant(queries), duplicated, 0.5).value).item();
    CHECK(dup > base);
  }

  TEST_CASE("mmd hand values and properties") {
    const std::vector<double> unit_bw = {1.0};
    // n = m = 1 with squared distance 2 at bandwidth 1: 2 - 2 e^{-1}.
    Tensor x({1, 2}, {1, 0});
    Tensor y({1, 2}, {0, 1});
    const double v = ad::evaluate(mmd_loss(x, ad::constant(y), unit_bw)).item();
    CHECK(v == doctest::Approx(2.0 - 2.0 * std::exp(-1.0)).epsilon(1e-9));
    CHECK(v == doctest::Approx(1.2642).epsilon(1e-3));

    // Identical sets vanish under every default bandwidth.
    Rng rng(31);
    const LossWeights w;
    Tensor same = randn({4, 3}, rng);
    CHECK(std::abs(ad::evaluate(mmd_loss(same, ad::constant(same), w.bandwidths)).item()) < 1e-12);

    // Symmetric in the two sets (values only).
    Tensor a = randn({3, 3}, rng), b = randn({5, 3}, rng);
    const double ab = ad::evaluate(mmd_loss(a, ad::constant(b), w.bandwidths)).item();
    const double ba = ad::evaluate(mmd_loss(b, ad::constant(a), w.bandwidths)).item();
    CHECK(ab == doctest::Approx(ba).epsilon(1e-12));

    // Nonnegative for 100 random draws.
    for (std::uint64_t s = 0; s < 100; ++s) {
      Rng r(1000 + s);
      Tensor real = randn({static_cast<std::int64_t>(1 + s % 4), 3}, r);
      Tensor gen = randn({static_cast<std::int64_t>(1 + (s / 4) % 4), 3}, r);
      CHECK(ad::evaluate(mmd_loss(real, ad::constant(gen), {2, 5})).item() >= -1e-12);
    }

    CHECK_THROWS_AS(mmd_loss(Tensor({0, 3}), ad::constant(a), unit_bw), Error);
    CHECK_THROWS_AS(mmd_loss(a, ad::constant(b), std::vector<double>{}), Error);

    // Gradient flows to the generated side only, and matches finite
    // differences.
    ParamSet ps;
    ad::Value gen = ps.add("gen", randn({3, 3}, rng));
    Tensor real = randn({4, 3}, rng);
    const GradCheckResult g = gradcheck([&] { return mmd_loss(real, gen, {2, 5, 10}); }, ps);
    CHECK_MESSAGE(g.pass, "rel err ", g.max_rel_err);
  }

  TEST_CASE("query contrast") {
    // Positive only: zero loss.
    Tensor v({1, 2}, {1, 0});
    LossTerm t = query_contrast_loss(ad::constant(v), v, Tensor(), 1.0);
    CHECK(ad::evaluate(t.value).item() == doctest::Approx(0.0).epsilon(1e-12));

    // One orthogonal unmatched negative, positive cosine 1, tau_r = 1.
    Tensor neg({1, 2}, {0, 1});
    t = query_contrast_loss(ad::constant(v), v, neg, 1.0);
    CHECK(ad::evaluate(t.value).item() == doctest::Approx(kPairNce).epsilon(1e-4));

    // Zero matched pairs: skipped flag.
    t = query_contrast_loss(ad::constant(Tensor({0, 2})), Tensor({0, 2}), neg, 1.0);
    CHECK(t.skipped);
    CHECK(ad::evaluate(t.value).item() == 0.0);

    // Moving the generated query toward an unmatched negative increases the
    // loss at fixed positives.
    Tensor matched({1, 3}, {1, 0, 0});
    Tensor negat({1, 3}, {0, 1, 0});
    Tensor near_pos({1, 3}, {1, 0.1, 0});
    Tensor near_neg({1, 3}, {1, 0.8, 0});
    const double lp = ad::evaluate(query_contrast_loss(ad::constant(near_pos), matched, negat, 0.5).value).item();
    const double ln = ad::evaluate(query_contrast_loss(ad::constant(near_neg), matched, negat, 0.5).value).item();
    CHECK(ln > lp);

    // Excluding matched negatives can only shrink the denominator.
    Rng rng(88);
    Tensor gen = unit_rows({3, 4}, rng);
    Tensor real = unit_rows({3, 4}, rng);
    Tensor unmatched = unit_rows({2, 4}, rng);
    const double with_m =
        ad::evaluate(query_contrast_loss(ad::constant(gen), real, unmatched, 0.3, true).value).item();
    const double without_m =
        ad::evaluate(query_contrast_loss(ad::constant(gen), real, unmatched, 0.3, false).value).item();
    CHECK(without_m <= with_m + 1e-9);

    // Real queries are gradient-free; generated receive exact gradients.
    ParamSet ps;
    ad::Value g = ps.add("g", randn({3, 4}, rng));
    const GradCheckResult gc =
        gradcheck([&] { return query_contrast_loss(g, real, unmatched, 0.07).value; }, ps);
    CHECK_MESSAGE(gc.pass, "rel err ", gc.max_rel_err);
  }

  TEST_CASE("kl divergence") {
    CHECK(ad::evaluate(kl_loss(ad::constant(Tensor::zeros({2, 3})), ad::constant(Tensor::zeros({2, 3})))).item() ==
          doctest::Approx(0.0).epsilon(1e-12));
    // mu = 1, logvar = 0, single latent dim -> 0.5.
    CHECK(ad::evaluate(kl_loss(ad::constant(Tensor({1, 1}, {1.0})), ad::constant(Tensor({1, 1}, {0.0})))).item() ==
          doctest::Approx(0.5).epsilon(1e-12));
    // Nonnegative on random draws.
    Rng rng(99);
    for (int i = 0; i < 50; ++i) {
      Tensor mu = randn({2, 3}, rng);
      Tensor lv = randn({2, 3}, rng, 0.5);
      CHECK(ad::evaluate(kl_loss(ad::constant(mu), ad::constant(lv))).item() >= -1e-12);
    }
    CHECK_THROWS_AS(kl_loss(ad::constant(Tensor({1, 2})), ad::constant(Tensor({2, 2}))), Error);
  }

  TEST_CASE("stage composition reports weighted totals") {
    Rng rng(13);
    const LossWeights w;
    std::map<std::string, ad::Value> c1 = {
        {"cga", ad::constant(Tensor::scalar(0.7))},
        {"cia", ad::constant(Tensor::scalar(0.3))},
        {"match_focal", ad::constant(Tensor::scalar(0.11))},
        {"match_mask", ad::constant(Tensor::scalar(0.23))},
    };
    ComposedLoss s1 = compose_stage_loss(1, c1, w);
    const double expect1 = w.lambda_cga * 0.7 + w.lambda_c * 0.3 + 0.11 + 0.23;
    CHECK(s1.report.total == doctest::Approx(expect1).epsilon(1e-9));
    CHECK(ad::evaluate(s1.root).item() == doctest::Approx(expect1).epsilon(1e-9));
    CHECK(s1.report.components.at("cga") == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(s1.report.stage == 1);

    // Weighted total must equal the weighted sum of reported components.
    double manual = 0.0;
    for (const auto& [name, value] : s1.report.components) manual += s1.report.weights.at(name) * value;
    CHECK(manual == doctest::Approx(s1.report.total).epsilon(1e-9));

    // lambda_c = 0 makes the total independent of the instance term.
    LossWeights nocia = w;
    nocia.lambda_c = 0.0;
    std::map<std::string, ad::Value> c1b = c1;
    c1b["cia"] = ad::constant(Tensor::scalar(123.0));
    const double t_zeroed = compose_stage_loss(1, c1b, nocia).report.total;
    c1b["cia"] = ad::constant(Tensor::scalar(-55.0));
    CHECK(compose_stage_loss(1, c1b, nocia).report.total == doctest::Approx(t_zeroed).epsilon(1e-9));

    // Stage 2: all-zero components -> zero total.
    std::map<std::string, ad::Value> c2 = {
        {"mmd", ad::constant(Tensor::scalar(0.0))},
        {"kl", ad::constant(Tensor::scalar(0.0))},
        {"qc", ad::constant(Tensor::scalar(0.0))},
        {"sup_focal", ad::constant(Tensor::scalar(0.0))},
    };
    CHECK(compose_stage_loss(2, c2, w).report.total == doctest::Approx(0.0).epsilon(1e-12));

    // Stage 2 weights: mmd + beta_kl*kl + lambda_r*qc + lambda_f*sup.
    std::map<std::string, ad::Value> c2b = {
        {"mmd", ad::constant(Tensor::scalar(1.0))},
        {"kl", ad::constant(Tensor::scalar(1.0))},
        {"qc", ad::constant(Tensor::scalar(1.0))},
        {"sup_focal", ad::constant(Tensor::scalar(1.0))},
    };
    CHECK(compose_stage_loss(2, c2b, w).report.total ==
          doctest::Approx(1.0 + w.beta_kl + w.lambda_r + w.lambda_f).epsilon(1e-9));

    // Stage 3 at the classification optimum: near-zero focal terms.
    Tensor perfect({2, 3}, {1 - 1e-7, 1e-7, 1e-7, 1e-7, 1 - 1e-7, 1e-7});
    Tensor onehot({2, 3}, {1, 0, 0, 0, 1, 0});
    std::map<std::string, ad::Value> c3 = {
        {"seen_focal", focal_loss(ad::constant(perfect), onehot, w.alpha_focal, w.gamma_focal)},
        {"pseudo_focal", focal_loss(ad::constant(perfect), onehot, w.alpha_focal, w.gamma_focal)},
    };
    CHECK(compose_stage_loss(3, c3, w).report.total < 1e-5);

    // Missing components are named.
    std::map<std::string, ad::Value> missing = {{"cga", ad::constant(Tensor::scalar(0.0))}};
    CHECK_THROWS_WITH_AS(compose_stage_loss(1, missing, w), doctest::Contains("cia"), ContractError);
    (void)rng;
  }

  TEST_CASE("alignment losses pass gradcheck") {
    Rng rng(2718);
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      Rng r = rng.fork(seed);
      ParamSet ps;
      ad::Value recon = ps.add("recon", randn({3, 4}, r));
      ad::Value matched = ps.add("matched", randn({3, 4}, r));
      Tensor targets = unit_rows({3, 4}, r);
      Tensor segment_tokens = unit_rows({3, 4}, r);
      Tensor bank_token = unit_rows({1, 4}, r);

      const GradCheckResult g1 = gradcheck(
          [&] {
            TokenBank bank(8);  // rebuilt per call: the builder stays side-effect free
            bank.push(bank_token);
            return cga_loss(recon, targets, bank, 0.07).value;
          },
          ps);
      CHECK_MESSAGE(g1.pass, "cga rel err ", g1.max_rel_err);

      const GradCheckResult g2 = gradcheck([&] { return cia_loss(matched, segment_tokens, 0.07).value; }, ps);
      CHECK_MESSAGE(g2.pass, "cia rel err ", g2.max_rel_err);
    }
  }
}
