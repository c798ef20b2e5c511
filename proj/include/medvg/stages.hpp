#pragma once
// Stage-specific training-instance construction: stage 1 (target detection
// and localization in grounding format), stage 2 (VQA / captioning / report
// generation with grounding disabled), stage 3 (grounded report generation
// via the construction pipeline).

#include <cstdint>
#include <vector>

#include "medvg/corpus.hpp"
#include "medvg/grounding.hpp"
#include "medvg/pipeline.hpp"

namespace medvg {

struct TrainingTurn {
  std::vector<TokenId> instruction;  // mode token already inserted
  std::vector<TokenId> response;     // ends with the end-of-response word
};

struct TrainingInstance {
  std::string image_ref;
  Tensor image;  // [D,H,W]; empty for text-only instances
  bool has_image = true;
  bool grounding = false;
  std::vector<TrainingTurn> turns;
  // one entry per bracketed phrase, in response order across all turns
  std::vector<AnnotationGeometry> groundings;
};

struct TaskMixRates {
  double modality = 0.5;
  double plane = 0.2;
  double abnormality = 0.2;
};

inline constexpr const char* kEndOfResponse = "</s>";

std::vector<TrainingInstance> build_stage1(const std::vector<SyntheticSample>& corpus,
                                           const Tokenizer& tokenizer, const Taxonomy& taxonomy,
                                           std::uint64_t seed);

std::vector<TrainingInstance> build_stage2(const std::vector<SyntheticSample>& corpus,
                                           const Tokenizer& tokenizer, const TaskMixRates& rates,
                                           std::uint64_t seed);

std::vector<TrainingInstance> build_stage3(const std::vector<SyntheticSample>& corpus,
                                           const Tokenizer& tokenizer, const Taxonomy& taxonomy,
                                           const PromptTemplates& templates,
                                           AnnotatorBackend& backend, Localizer& localizer,
                                           PipelineStats& stats);

// Tokenizes text and brackets the given character spans; spans must align
// with piece boundaries. Geometry entries parallel the spans.
std::vector<TokenId> bracket_text(const std::string& text, const Tokenizer& tokenizer,
                                  const std::vector<Annotation>& annotations,
                                  const std::vector<bool>& bracketed);

}  // namespace medvg
