// Text-overlap metrics against independent oracles, including a quadratic
// longest-common-subsequence reference.

#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "medvg/metrics.hpp"
#include "medvg/rng.hpp"

using namespace medvg;

namespace {

// Independent quadratic LCS via full-table recursion, memoized top-down to
// differ structurally from the library's iterative rolling-row version.
std::int64_t lcs_oracle(const std::vector<MetricToken>& a, const std::vector<MetricToken>& b) {
  std::size_t n = a.size(), m = b.size();
  std::vector<std::vector<std::int64_t>> memo(n + 1, std::vector<std::int64_t>(m + 1, -1));
  std::function<std::int64_t(std::size_t, std::size_t)> rec = [&](std::size_t i,
                                                                  std::size_t j) -> std::int64_t {
    if (i == 0 || j == 0) return 0;
    std::int64_t& slot = memo[i][j];
    if (slot >= 0) return slot;
    if (a[i - 1] == b[j - 1]) return slot = rec(i - 1, j - 1) + 1;
    return slot = std::max(rec(i - 1, j), rec(i, j - 1));
  };
  return rec(n, m);
}

std::vector<MetricToken> random_seq(Rng& rng, std::size_t max_len, std::int64_t alphabet) {
  std::size_t len = 1 + rng.uniform_int(max_len);
  std::vector<MetricToken> s(len);
  for (auto& t : s) t = static_cast<MetricToken>(rng.uniform_int(
                        static_cast<std::uint64_t>(alphabet)));
  return s;
}

}  // namespace

TEST_CASE("bleu-1 self-score is exactly one") {
  Rng rng(89);
  for (int t = 0; t < 20; ++t) {
    auto s = random_seq(rng, 30, 8);
    CHECK(bleu1(s, s) == 1.0);
    CHECK(rouge1(s, s) == doctest::Approx(1.0));
    CHECK(rouge_l(s, s) == doctest::Approx(1.0));
  }
}

TEST_CASE("bleu-1 hand oracle with clipping and brevity penalty") {
  // candidate {1,1,2}, reference {1,2,3,4}: clipped overlap = min(2,1)+1 = 2,
  // precision 2/3, brevity penalty exp(1 - 4/3)
  std::vector<MetricToken> cand = {1, 1, 2}, ref = {1, 2, 3, 4};
  CHECK(bleu1(cand, ref) ==
        doctest::Approx((2.0 / 3.0) * std::exp(1.0 - 4.0 / 3.0)).epsilon(1e-12));
  // candidate longer than reference: no penalty
  std::vector<MetricToken> longc = {1, 2, 3, 4, 5};
  CHECK(bleu1(longc, ref) == doctest::Approx(4.0 / 5.0).epsilon(1e-12));
  CHECK(bleu1({}, ref) == 0.0);
  CHECK(bleu1(cand, {}) == 0.0);
}

TEST_CASE("rouge-1 hand oracle") {
  // overlap 2, precision 2/3, recall 2/4 -> F1 = 2*pr/(p+r)
  std::vector<MetricToken> cand = {1, 1, 2}, ref = {1, 2, 3, 4};
  double p = 2.0 / 3.0, r = 2.0 / 4.0;
  CHECK(rouge1(cand, ref) == doctest::Approx(2.0 * p * r / (p + r)).epsilon(1e-12));
}

TEST_CASE("lcs length agrees with the recursive oracle on seeded pairs") {
  Rng rng(97);
  for (int t = 0; t < 100; ++t) {
    auto a = random_seq(rng, 40, 5);
    auto b = random_seq(rng, 40, 5);
    CHECK(lcs_length(a, b) == lcs_oracle(a, b));
  }
  CHECK(lcs_length({1, 2, 3}, {}) == 0);
  CHECK(lcs_length({1, 3, 2, 4}, {3, 4, 1, 2}) == 2);
}

TEST_CASE("rouge-l is the lcs f-measure") {
  Rng rng(101);
  for (int t = 0; t < 100; ++t) {
    auto a = random_seq(rng, 30, 4);
    auto b = random_seq(rng, 30, 4);
    double l = static_cast<double>(lcs_oracle(a, b));
    double expect = 0.0;
    if (l > 0.0) {
      double p = l / static_cast<double>(a.size());
      double r = l / static_cast<double>(b.size());
      expect = 2.0 * p * r / (p + r);
    }
    CHECK(rouge_l(a, b) == doctest::Approx(expect).epsilon(1e-12));
  }
}
