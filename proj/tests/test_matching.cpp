// Assignment solver against exhaustive search, the pairwise cost against its
// closed form, and the set-loss permutation invariance.

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "medvg/matching.hpp"
#include "medvg/rng.hpp"

using namespace medvg;

namespace {

struct BruteResult {
  double best = 1e300;
  std::vector<std::int64_t> best_perm;  // lexicographically smallest co-optimal
};

BruteResult brute_force(const std::vector<std::vector<double>>& cost) {
  std::size_t n = cost.size();
  std::vector<std::int64_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = static_cast<std::int64_t>(i);
  BruteResult r;
  do {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += cost[i][static_cast<std::size_t>(perm[i])];
    if (r.best_perm.empty() || total < r.best) {
      r.best = total;
      r.best_perm = perm;
    }
    // next_permutation enumerates in lexicographic order, so the first
    // optimum found is already the lexicographically smallest
  } while (std::next_permutation(perm.begin(), perm.end()));
  return r;
}

Box random_box(Rng& rng) {
  double z0 = rng.uniform(0.0, 0.8), y0 = rng.uniform(0.0, 0.8), x0 = rng.uniform(0.0, 0.8);
  return Box::make3d(z0, y0, x0, z0 + rng.uniform(0.05, 1.0 - z0), y0 + rng.uniform(0.05, 1.0 - y0),
                     x0 + rng.uniform(0.05, 1.0 - x0));
}

}  // namespace

TEST_CASE("hungarian equals exhaustive search on random matrices") {
  Rng rng(41);
  for (int t = 0; t < 300; ++t) {
    std::size_t n = 1 + rng.uniform_int(6);
    std::vector<std::vector<double>> cost(n, std::vector<double>(n));
    for (auto& row : cost)
      for (double& v : row) v = rng.uniform(-5.0, 5.0);
    Assignment a = hungarian(cost);
    BruteResult b = brute_force(cost);
    double ordered = 0.0;
    for (std::size_t i = 0; i < n; ++i) ordered += cost[i][static_cast<std::size_t>(a.perm[i])];
    CHECK(ordered == b.best);  // exact: same summation order
  }
}

TEST_CASE("hungarian returns the lexicographically smallest co-optimal permutation") {
  // all-equal costs: every permutation is optimal; identity is smallest
  std::vector<std::vector<double>> flat(4, std::vector<double>(4, 1.0));
  Assignment a = hungarian(flat);
  CHECK(a.perm == std::vector<std::int64_t>{0, 1, 2, 3});

  // duplicated rows force ties with a unique lexicographic winner
  Rng rng(43);
  for (int t = 0; t < 50; ++t) {
    std::size_t n = 2 + rng.uniform_int(4);
    std::vector<std::vector<double>> cost(n, std::vector<double>(n));
    for (double& v : cost[0]) v = rng.uniform(-2.0, 2.0);
    for (std::size_t i = 1; i < n; ++i) cost[i] = cost[0];
    Assignment a2 = hungarian(cost);
    CHECK(a2.perm == brute_force(cost).best_perm);
  }
}

TEST_CASE("hungarian input validation") {
  CHECK_THROWS(hungarian({}));
  CHECK_THROWS(hungarian({{1.0, 2.0}}));  // not square
  CHECK_THROWS(hungarian({{1.0, std::nan("")}, {0.0, 1.0}}));
}

TEST_CASE("pair_cost matches the weighted closed form") {
  Rng rng(47);
  LossWeights w;
  FocalParams fp;
  for (int t = 0; t < 100; ++t) {
    InstancePrediction pred{random_box(rng), rng.uniform()};
    InstanceLabel pos{random_box(rng), 1};
    InstanceLabel neg{Box{}, 0};
    double expect_pos = w.w_disc * focal_loss(pred.presence_prob, 1, fp) +
                        w.w_l1 * l1_box(pred.box, pos.box) +
                        w.w_giou * (1.0 - giou(pred.box, pos.box));
    CHECK(pair_cost(pred, pos, w, fp) == doctest::Approx(expect_pos).epsilon(1e-12));
    // dummy negatives participate through the discrimination term only
    CHECK(pair_cost(pred, neg, w, fp) ==
          doctest::Approx(w.w_disc * focal_loss(pred.presence_prob, 0, fp)).epsilon(1e-12));
  }
}

TEST_CASE("pad_labels fills dummy negatives and validates input") {
  Rng rng(53);
  std::vector<InstanceLabel> labels = {{random_box(rng), 1}, {random_box(rng), 1}};
  auto padded = pad_labels(labels, 5);
  CHECK(padded.size() == 5);
  for (std::size_t i = 2; i < 5; ++i) CHECK(padded[i].positive == 0);
  CHECK_THROWS(pad_labels(padded, 5));       // contains negatives
  CHECK_THROWS(pad_labels(labels, 1));       // m too small
}

TEST_CASE("box_set_loss is invariant under ground-truth permutations") {
  Rng rng(59);
  LossWeights w;
  FocalParams fp;
  for (std::int64_t m : {4, 8}) {
    for (int t = 0; t < 50; ++t) {
      std::vector<InstancePrediction> preds;
      for (std::int64_t i = 0; i < m; ++i) preds.push_back({random_box(rng), rng.uniform()});
      std::size_t k = 1 + rng.uniform_int(static_cast<std::uint64_t>(m));
      std::vector<InstanceLabel> labels;
      for (std::size_t i = 0; i < k; ++i) labels.push_back({random_box(rng), 1});
      double base = box_set_loss(preds, labels, m, w, fp).loss;
      for (int s = 0; s < 4; ++s) {
        // Fisher-Yates with the shared stream
        for (std::size_t i = labels.size(); i > 1; --i)
          std::swap(labels[i - 1], labels[rng.uniform_int(i)]);
        double shuffled = box_set_loss(preds, labels, m, w, fp).loss;
        CHECK(std::fabs(shuffled - base) <= 1e-9);
      }
    }
  }
}

TEST_CASE("mask_loss oracle on a tiny grid") {
  VoxelMask target = VoxelMask::zeros(1, 2, 2);
  target.at(0, 0, 0) = 1;
  Tensor logits = Tensor::from({4, 1}, {3.0, -3.0, -3.0, -3.0});
  FocalParams fp;
  double inter = 0.0, psum = 0.0, focal_sum = 0.0;
  for (int i = 0; i < 4; ++i) {
    double p = 1.0 / (1.0 + std::exp(-logits.at(i)));
    int lbl = target.data[static_cast<std::size_t>(i)];
    inter += p * lbl;
    psum += p;
    focal_sum += focal_loss(p, lbl, fp);
  }
  double expect = (1.0 - 2.0 * inter / (psum + 1.0)) + focal_sum / 4.0;
  CHECK(mask_loss(logits, target, fp) == doctest::Approx(expect).epsilon(1e-12));
}
