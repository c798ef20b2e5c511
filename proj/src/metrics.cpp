#include "medvg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace medvg {

namespace {
std::map<MetricToken, std::int64_t> counts(const std::vector<MetricToken>& seq) {
  std::map<MetricToken, std::int64_t> c;
  for (MetricToken t : seq) ++c[t];
  return c;
}

std::int64_t overlap(const std::vector<MetricToken>& a, const std::vector<MetricToken>& b) {
  auto ca = counts(a), cb = counts(b);
  std::int64_t n = 0;
  for (const auto& [tok, cnt] : ca) {
    auto it = cb.find(tok);
    if (it != cb.end()) n += std::min(cnt, it->second);
  }
  return n;
}

double f_measure(double precision, double recall) {
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}
}  // namespace

double bleu1(const std::vector<MetricToken>& candidate,
             const std::vector<MetricToken>& reference) {
  if (candidate.empty() || reference.empty()) return 0.0;
  double precision = static_cast<double>(overlap(candidate, reference)) /
                     static_cast<double>(candidate.size());
  double bp = candidate.size() >= reference.size()
                  ? 1.0
                  : std::exp(1.0 - static_cast<double>(reference.size()) /
                                       static_cast<double>(candidate.size()));
  return bp * precision;
}

double rouge1(const std::vector<MetricToken>& candidate,
              const std::vector<MetricToken>& reference) {
  if (candidate.empty() || reference.empty()) return 0.0;
  double ov = static_cast<double>(overlap(candidate, reference));
  return f_measure(ov / static_cast<double>(candidate.size()),
                   ov / static_cast<double>(reference.size()));
}

std::int64_t lcs_length(const std::vector<MetricToken>& a, const std::vector<MetricToken>& b) {
  std::size_t n = a.size(), m = b.size();
  std::vector<std::int64_t> prev(m + 1, 0), cur(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[m];
}

double rouge_l(const std::vector<MetricToken>& candidate,
               const std::vector<MetricToken>& reference) {
  if (candidate.empty() || reference.empty()) return 0.0;
  double l = static_cast<double>(lcs_length(candidate, reference));
  return f_measure(l / static_cast<double>(candidate.size()),
                   l / static_cast<double>(reference.size()));
}

}  // namespace medvg
