#include <cmath>
#include <limits>
#include <vector>

#include "concatlab/losses.hpp"
#include "concatlab/matching.hpp"
#include "concatlab/optim.hpp"
#include "concatlab/rng.hpp"
#include "doctest.h"

using namespace concatlab;
namespace ad = concatlab::ad;

namespace {

// Exhaustive assignment oracle: tries every injection of segments into
// queries (segments ascending, candidate queries ascending), keeping the
// first strictly-better total — which makes ties resolve to the
// lexicographically smallest segment_to_query vector.
struct BruteResult {
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::int64_t> seg_to_query;
};

void brute_rec(const Tensor& cost, std::int64_t seg, std::vector<std::int64_t>& cur, std::vector<bool>& used,
               double sum, BruteResult& out) {
  const std::int64_t k = cost.rows(), o = cost.cols();
  if (seg == o) {
    if (sum < out.best - 1e-12) {
      out.best = sum;
      out.seg_to_query = cur;
    }
    return;
  }
  for (std::int64_t q = 0; q < k; ++q) {
    if (used[static_cast<std::size_t>(q)]) continue;
    used[static_cast<std::size_t>(q)] = true;
    cur.push_back(q);
    brute_rec(cost, seg + 1, cur, used, sum + cost.at2(q, seg), out);
    cur.pop_back();
    used[static_cast<std::size_t>(q)] = false;
  }
}

BruteResult brute_force(const Tensor& cost) {
  BruteResult out;
  std::vector<std::int64_t> cur;
  std::vector<bool> used(static_cast<std::size_t>(cost.rows()), false);
  brute_rec(cost, 0, cur, used, 0.0, out);
  return out;
}

void check_assignment_invariants(const Assignment& a, const Tensor& cost) {
  const std::int64_t k = cost.rows(), o = cost.cols();
  REQUIRE(static_cast<std::int64_t>(a.query_to_segment.size()) == k);
  REQUIRE(static_cast<std::int64_t>(a.segment_to_query.size()) == o);
  std::int64_t matched = 0;
  double total = 0.0;
  for (std::int64_t q = 0; q < k; ++q) {
    const std::int64_t s = a.query_to_segment[static_cast<std::size_t>(q)];
    if (s < 0) continue;
    ++matched;
    CHECK(a.segment_to_query[static_cast<std::size_t>(s)] == q);
    total += cost.at2(q, s);
  }
  CHECK(matched == o);
  CHECK(a.total_cost == doctest::Approx(total).epsilon(1e-12));
}

}  // namespace

TEST_SUITE("matching") {
  TEST_CASE("focal loss hand values") {
    // p = 0.5, y = 1 -> 0.25 * 0.25 * ln 2
    CHECK(focal_loss(Tensor::scalar(0.5), Tensor::scalar(1.0), 0.25, 2.0) ==
          doctest::Approx(0.25 * 0.25 * std::log(2.0)).epsilon(1e-9));
    // p = 0.5, y = 0 -> 0.75 * 0.25 * ln 2
    CHECK(focal_loss(Tensor::scalar(0.5), Tensor::scalar(0.0), 0.25, 2.0) ==
          doctest::Approx(0.75 * 0.25 * std::log(2.0)).epsilon(1e-9));
    CHECK(focal_loss(Tensor::scalar(0.5), Tensor::scalar(1.0), 0.25, 2.0) == doctest::Approx(0.043322).epsilon(1e-4));
    CHECK(focal_loss(Tensor::scalar(0.5), Tensor::scalar(0.0), 0.25, 2.0) == doctest::Approx(0.129966).epsilon(1e-4));
    // Confident and correct -> vanishing loss.
    CHECK(focal_loss(Tensor::scalar(1.0 - 1e-7), Tensor::scalar(1.0), 0.25, 2.0) < 1e-6);
    CHECK_THROWS_AS(focal_loss(Tensor({1, 2}, {0.5, 0.5}), Tensor::scalar(1.0), 0.25, 2.0), ShapeError);
  }

  TEST_CASE("focal at alpha 0.5, gamma 0 is half of binary cross-entropy") {
    Rng rng(17);
    Tensor p({4, 3}), y({4, 3});
    for (std::int64_t i = 0; i < p.size(); ++i) {
      p.at(i) = 0.1 + 0.8 * rng.uniform();
      y.at(i) = rng.uniform() < 0.5 ? 0.0 : 1.0;
    }
    double bce = 0.0;
    for (std::int64_t i = 0; i < p.size(); ++i) {
      bce += -(y.at(i) * std::log(p.at(i)) + (1.0 - y.at(i)) * std::log(1.0 - p.at(i)));
    }
    bce /= static_cast<double>(p.size());
    // With alpha = 0.5 both terms carry weight 0.5, so the focal mean is
    // exactly half the plain BCE mean.
    CHECK(2.0 * focal_loss(p, y, 0.5, 0.0) == doctest::Approx(bce).epsilon(1e-12));
  }

  TEST_CASE("focal graph form matches the plain form and its gradient") {
    Rng rng(21);
    ParamSet ps;
    Tensor logits({3, 4});
    for (std::int64_t i = 0; i < logits.size(); ++i) logits.at(i) = rng.normal();
    Tensor target({3, 4});
    for (std::int64_t i = 0; i < target.size(); ++i) target.at(i) = rng.uniform() < 0.5 ? 0.0 : 1.0;
    ad::Value x = ps.add("x", logits);
    const ad::Value prob = ad::sigmoid(x);
    const ad::Value loss = focal_loss(prob, target, 0.25, 2.0);
    CHECK(ad::evaluate(loss).item() ==
          doctest::Approx(focal_loss(ad::evaluate(prob), target, 0.25, 2.0)).epsilon(1e-12));
    const GradCheckResult r = gradcheck([&] { return focal_loss(ad::sigmoid(x), target, 0.25, 2.0); }, ps);
    CHECK_MESSAGE(r.pass, "rel err ", r.max_rel_err);
  }

  TEST_CASE("mask loss hand values") {
    // Perfect confident mask.
    Tensor gt({2, 2}, {1, 1, 1, 1});
    CHECK(mask_loss(Tensor::full({2, 2}, 40.0), gt) < 1e-6);
    // Zero logits, half-ones gt: BCE = ln 2, dice = 1 - 3/5.
    Tensor half({2, 2}, {1, 1, 0, 0});
    const double expected = std::log(2.0) + (1.0 - (2.0 * 1.0 + 1.0) / (2.0 + 2.0 + 1.0));
    CHECK(mask_loss(Tensor::zeros({2, 2}), half) == doctest::Approx(expected).epsilon(1e-9));
    CHECK(mask_loss(Tensor::zeros({2, 2}), half) == doctest::Approx(1.0931).epsilon(1e-3));
    // Empty gt with confidently-empty prediction: dice smoothing keeps it 0.
    CHECK(mask_loss(Tensor::full({2, 2}, -40.0), Tensor::zeros({2, 2})) < 1e-6);
    CHECK_THROWS_AS(mask_loss(Tensor::zeros({2, 2}), Tensor::zeros({2, 3})), ShapeError);
  }

  TEST_CASE("mask loss graph form matches plain, passes gradcheck") {
    Rng rng(33);
    Tensor gt({3, 3});
    for (std::int64_t i = 0; i < gt.size(); ++i) gt.at(i) = rng.uniform() < 0.4 ? 1.0 : 0.0;
    Tensor logits({3, 3});
    for (std::int64_t i = 0; i < logits.size(); ++i) logits.at(i) = 2.0 * rng.normal();
    ParamSet ps;
    ad::Value x = ps.add("x", logits);
    CHECK(ad::evaluate(mask_loss(x, gt, 1.0, 1.0)).item() == doctest::Approx(mask_loss(logits, gt)).epsilon(1e-12));
    const GradCheckResult r = gradcheck([&] { return mask_loss(x, gt, 1.0, 1.0); }, ps);
    CHECK_MESSAGE(r.pass, "rel err ", r.max_rel_err);
  }

  TEST_CASE("hungarian hand cases") {
    {
      const Assignment a = hungarian(Tensor({2, 2}, {0, 1, 1, 0}));
      CHECK(a.query_to_segment == std::vector<std::int64_t>{0, 1});
      CHECK(a.total_cost == doctest::Approx(0.0));
    }
    {
      // Single segment, three queries: query 1 is cheapest.
      const Assignment a = hungarian(Tensor({3, 1}, {1, 0, 2}));
      CHECK(a.segment_to_query == std::vector<std::int64_t>{1});
      CHECK(a.query_to_segment == std::vector<std::int64_t>{-1, 0, -1});
      CHECK(a.total_cost == doctest::Approx(0.0));
    }
    {
      // All-equal costs: lexicographic tie-break gives segment o -> query o.
      const Assignment a = hungarian(Tensor::ones({3, 3}));
      CHECK(a.segment_to_query == std::vector<std::int64_t>{0, 1, 2});
    }
    CHECK_THROWS_AS(hungarian(Tensor({1, 2}, {1, 2})), Error);  // more segments than queries
    Tensor bad({2, 1}, {1, 2});
    bad.at(0) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(hungarian(bad), Error);
  }

  TEST_CASE("hungarian equals the exhaustive oracle on 1000 random instances") {
    Rng rng(555);
    for (int trial = 0; trial < 1000; ++trial) {
      const std::int64_t k = rng.uniform_int(1, 6);
      const std::int64_t o = rng.uniform_int(1, k);
      Tensor cost({k, o});
      const bool integer_costs = trial % 2 == 0;  // integer costs force exact ties
      for (std::int64_t i = 0; i < cost.size(); ++i) {
        cost.at(i) = integer_costs ? static_cast<double>(rng.uniform_int(0, 3)) : 10.0 * rng.uniform();
      }
      const Assignment a = hungarian(cost);
      const BruteResult b = brute_force(cost);
      check_assignment_invariants(a, cost);
      CHECK(a.total_cost == doctest::Approx(b.best).epsilon(1e-9));
      if (integer_costs) {
        // Exact ties exist: the lexicographic tie-break must agree with the
        // oracle's first-found-optimal convention.
        CHECK(a.segment_to_query == b.seg_to_query);
      }
    }
  }

  TEST_CASE("match cost matrix separates constructed perfect pairs") {
    const std::int64_t n_seen = 3;
    Tensor probs({2, n_seen}, {1 - 1e-7, 1e-7, 1e-7, 1e-7, 1 - 1e-7, 1e-7});
    std::vector<std::int64_t> gt_seen_index = {0, 1};
    Tensor mask_logits({2, 2, 2});
    std::vector<Tensor> gt_masks;
    // Query 0's mask = segment 0's, query 1's = segment 1's (complement).
    Tensor m0({2, 2}, {1, 1, 0, 0});
    Tensor m1({2, 2}, {0, 0, 1, 1});
    gt_masks = {m0, m1};
    for (std::int64_t j = 0; j < 4; ++j) {
      mask_logits.at(j) = m0.at(j) > 0.5 ? 40.0 : -40.0;
      mask_logits.at(4 + j) = m1.at(j) > 0.5 ? 40.0 : -40.0;
    }
    const LossWeights w;
    const Tensor cost = match_cost_matrix(probs, gt_seen_index, mask_logits, gt_masks, w);
    REQUIRE(cost.rows() == 2);
    REQUIRE(cost.cols() == 2);
    CHECK(cost.at2(0, 0) < 1e-5);
    CHECK(cost.at2(1, 1) < 1e-5);
    CHECK(cost.at2(0, 1) > cost.at2(0, 0));
    CHECK(cost.at2(1, 0) > cost.at2(1, 1));
    const Assignment a = hungarian(cost);
    CHECK(a.segment_to_query == std::vector<std::int64_t>{0, 1});
  }

  TEST_CASE("match cost matrix: random instance agrees with injection brute force") {
    Rng rng(4242);
    const std::int64_t k = 4, o = 3, n_seen = 4, h = 3, wd = 3;
    Tensor probs({k, n_seen});
    for (std::int64_t i = 0; i < probs.size(); ++i) probs.at(i) = 0.05 + 0.9 * rng.uniform();
    std::vector<std::int64_t> gt_seen_index = {2, 0, 3};
    Tensor mask_logits({k, h, wd});
    for (std::int64_t i = 0; i < mask_logits.size(); ++i) mask_logits.at(i) = 3.0 * rng.normal();
    std::vector<Tensor> gt_masks;
    for (std::int64_t s = 0; s < o; ++s) {
      Tensor m({h, wd});
      for (std::int64_t i = 0; i < m.size(); ++i) m.at(i) = rng.uniform() < 0.5 ? 1.0 : 0.0;
      gt_masks.push_back(m);
    }
    const LossWeights w;
    const Tensor cost = match_cost_matrix(probs, gt_seen_index, mask_logits, gt_masks, w);
    const Assignment a = hungarian(cost);
    const BruteResult b = brute_force(cost);
    CHECK(a.total_cost == doctest::Approx(b.best).epsilon(1e-9));

    // Cached mask-cost path reproduces the computed path bit-for-bit.
    Tensor cached({k, o});
    for (std::int64_t q = 0; q < k; ++q) {
      const Tensor logits_q = slice_first(mask_logits, q);
      for (std::int64_t s = 0; s < o; ++s) {
        cached.at2(q, s) = mask_loss(logits_q, gt_masks[static_cast<std::size_t>(s)], w.bce_weight, w.dice_weight);
      }
    }
    const Tensor cost2 = match_cost_matrix(probs, gt_seen_index, mask_logits, gt_masks, w, cached);
    for (std::int64_t i = 0; i < cost.size(); ++i) CHECK(cost.at(i) == cost2.at(i));
  }

  TEST_CASE("match cost matrix is permutation-equivariant in segments") {
    Rng rng(808);
    const std::int64_t k = 5, o = 4, n_seen = 5;
    Tensor probs({k, n_seen});
    for (std::int64_t i = 0; i < probs.size(); ++i) probs.at(i) = 0.1 + 0.8 * rng.uniform();
    std::vector<std::int64_t> idx = {1, 3, 0, 4};
    Tensor mask_logits({k, 2, 2});
    for (std::int64_t i = 0; i < mask_logits.size(); ++i) mask_logits.at(i) = rng.normal();
    std::vector<Tensor> masks;
    for (std::int64_t s = 0; s < o; ++s) {
      Tensor m({2, 2});
      for (std::int64_t i = 0; i < 4; ++i) m.at(i) = rng.uniform() < 0.5 ? 1.0 : 0.0;
      masks.push_back(m);
    }
    const LossWeights w;
    const Tensor base = match_cost_matrix(probs, idx, mask_logits, masks, w);

    const std::vector<std::int64_t> perm = {2, 0, 3, 1};  // new position p holds old segment perm[p]
    std::vector<std::int64_t> idx_p(idx.size());
    std::vector<Tensor> masks_p(masks.size());
    for (std::size_t p = 0; p < perm.size(); ++p) {
      idx_p[p] = idx[static_cast<std::size_t>(perm[p])];
      masks_p[p] = masks[static_cast<std::size_t>(perm[p])];
    }
    const Tensor permuted = match_cost_matrix(probs, idx_p, mask_logits, masks_p, w);
    for (std::int64_t q = 0; q < k; ++q) {
      for (std::size_t p = 0; p < perm.size(); ++p) {
        CHECK(permuted.at2(q, static_cast<std::int64_t>(p)) == base.at2(q, perm[p]));
      }
    }
    // O > K is infeasible.
    std::vector<std::int64_t> too_many = {0, 1, 2, 3, 4, 0};
    std::vector<Tensor> many_masks(6, masks[0]);
    CHECK_THROWS_AS(match_cost_matrix(probs, too_many, mask_logits, many_masks, w), Error);
  }
}
