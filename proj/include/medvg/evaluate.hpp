#pragma once
// Evaluation protocol: target names are fed in grounding format directly and
// the hidden state at the closing bracket prompts the localization decoder;
// text metrics compare a greedily generated report against the reference.

#include <cstdint>
#include <string>
#include <vector>

#include "medvg/corpus.hpp"
#include "medvg/model.hpp"

namespace medvg {

struct EvalReport {
  double dice_mean = 0.0;
  double l1_mean = 0.0;
  double giou_mean = 0.0;  // over greedy-IoU-matched pairs
  double presence_precision = 0.0;
  double presence_recall = 0.0;
  double presence_f1 = 0.0;
  double bleu1 = 0.0;
  double rouge1 = 0.0;
  double rouge_l = 0.0;
  std::int64_t mask_queries = 0;
  std::int64_t box_queries = 0;
  std::int64_t text_samples = 0;
  std::string to_json() const;
};

struct EvalOptions {
  double presence_threshold = 0.5;
  double match_iou = 0.1;  // greedy matches below this do not count as hits
  std::int64_t max_gen_tokens = 96;
  bool generate_text = true;  // localization-only evaluation when false
};

// Greedy next-token decoding until the end-of-response word or the limit.
std::vector<TokenId> generate(const Model& model, const Tokenizer& tokenizer,
                              const Tensor& image, const std::vector<TokenId>& instruction,
                              std::int64_t max_tokens);

EvalReport evaluate(const Model& model, const Tokenizer& tokenizer,
                    const std::vector<SyntheticSample>& corpus, const EvalOptions& opts = {});

}  // namespace medvg
