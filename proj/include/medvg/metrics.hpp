#pragma once
// Text-overlap metrics over token sequences: BLEU-1 (modified unigram
// precision with brevity penalty), ROUGE-1 and ROUGE-L F-measures.

#include <cstdint>
#include <vector>

namespace medvg {

using MetricToken = std::int64_t;

double bleu1(const std::vector<MetricToken>& candidate, const std::vector<MetricToken>& reference);
double rouge1(const std::vector<MetricToken>& candidate, const std::vector<MetricToken>& reference);
double rouge_l(const std::vector<MetricToken>& candidate, const std::vector<MetricToken>& reference);

// Length of the longest common subsequence (iterative dynamic program).
std::int64_t lcs_length(const std::vector<MetricToken>& a, const std::vector<MetricToken>& b);

}  // namespace medvg
