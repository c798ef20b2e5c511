#pragma once
// Automatic grounded-report construction: report cleaning, key-phrase tagging
// against a taxonomy, positive-target filtering, and localized annotation
// generation, with pluggable text-completion and localizer backends.

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "medvg/geometry.hpp"

namespace medvg {

enum class TargetKind { anatomy, abnormality };

struct TaxonomyEntry {
  std::string canonical;
  TargetKind kind = TargetKind::anatomy;
  std::vector<std::string> synonyms;  // does not repeat the canonical name
};

// Flat-file taxonomy, one entry per line: kind|canonical|synonym;synonym;...
class Taxonomy {
 public:
  static Taxonomy parse(const std::string& text);
  static Taxonomy load(const std::string& path);

  const std::vector<TaxonomyEntry>& entries() const { return entries_; }
  const TaxonomyEntry* find(const std::string& canonical) const;
  // Every matchable phrase (canonical + synonyms), longest first.
  std::vector<std::pair<std::string, const TaxonomyEntry*>> phrase_index() const;
  std::vector<std::string> names_of_kind(TargetKind kind) const;

 private:
  std::vector<TaxonomyEntry> entries_;
  std::map<std::string, std::size_t> by_canonical_;
};

struct Report {
  std::string image_ref;
  std::string findings;
  std::string impression;
  bool is_volume = false;  // selects the cleaning path (two-step vs keyword-gated)
};

struct Annotation {
  std::string phrase;
  std::string target;          // canonical taxonomy name
  std::int64_t begin = 0, end = 0;  // character span in the de-tagged source text
};

struct TaggedText {
  std::string source;  // cleaned text with annotation syntax stripped
  std::string tagged;  // text with inline [phrase](target) annotations
  std::vector<Annotation> annotations;
};

struct TaggedReport {
  std::string image_ref;
  TaggedText findings;
  TaggedText impression;
};

class AnnotatorBackend {
 public:
  virtual ~AnnotatorBackend() = default;
  // (system prompt, user text) -> completion; throws TransportError on failure
  virtual std::string complete(const std::string& system_prompt, const std::string& user_text) = 0;
};

// Deterministic stand-in: routes on system-prompt content (tagging, filtering,
// cleaning) with simple auditable rules.
class MockBackend : public AnnotatorBackend {
 public:
  // With a taxonomy, tagging maps synonyms to canonical names; without one,
  // only the names listed in the rendered prompt are matched.
  explicit MockBackend(const Taxonomy* taxonomy = nullptr) : taxonomy_(taxonomy) {}
  std::string complete(const std::string& system_prompt, const std::string& user_text) override;

 private:
  const Taxonomy* taxonomy_;
};

// Chat-completion client. Endpoint/model/key come from MEDVG_BACKEND_URL,
// MEDVG_BACKEND_MODEL, MEDVG_BACKEND_KEY unless given explicitly.
class HttpBackend : public AnnotatorBackend {
 public:
  HttpBackend();
  HttpBackend(std::string base_url, std::string model, std::string api_key, bool debug);
  std::string complete(const std::string& system_prompt, const std::string& user_text) override;

 private:
  std::string base_url_, model_, api_key_;
  bool debug_ = false;
};

struct PromptTemplates {
  std::string tag;            // key-phrase identification
  std::string filter;         // positive-target filtering
  std::string clean_2d_step1; // meta-information removal
  std::string clean_2d_step2; // prior-comparison / history removal
  std::string clean_3d;       // keyword-gated single-step cleaning
  static PromptTemplates load(const std::string& dir);
};

// Replaces each literal placeholder key with its value.
std::string substitute(const std::string& tmpl,
                       const std::map<std::string, std::string>& values);

struct PipelineStats {
  std::int64_t samples = 0;        // grounded samples emitted
  std::int64_t tags = 0;           // annotations surviving filtering
  std::int64_t masks = 0;          // annotations with mask geometry
  std::int64_t boxes = 0;          // annotations with box geometry
  std::int64_t box_instances = 0;  // total individual boxes
  std::int64_t dropped = 0;
  std::int64_t retries = 0;
  std::int64_t backend_calls = 0;
  std::int64_t clean_calls_skipped = 0;  // keyword gate hits
};

Report clean_report(const Report& report, AnnotatorBackend& backend,
                    const PromptTemplates& templates, PipelineStats& stats);

// Parses inline [phrase](target) annotations; computes character spans over
// the stripped text. Malformed annotation syntax -> InputError.
TaggedText parse_tagged(const std::string& tagged);

// nullopt = sample dropped after retries.
std::optional<TaggedText> tag_key_phrases(const std::string& text, const Taxonomy& taxonomy,
                                          AnnotatorBackend& backend,
                                          const PromptTemplates& templates,
                                          PipelineStats& stats, int max_retries = 2);
std::optional<TaggedText> filter_positive(const TaggedText& tagged, AnnotatorBackend& backend,
                                          const PromptTemplates& templates,
                                          PipelineStats& stats, int max_retries = 2);

class Localizer {
 public:
  virtual ~Localizer() = default;
  // false = target unsupported; the annotation stays tag-only
  virtual bool segment(const std::string& image_ref, const std::string& target,
                       VoxelMask& out) = 0;
  virtual bool detect(const std::string& image_ref, const std::string& target,
                      std::vector<Box>& out) = 0;
};

struct AnnotationGeometry {
  enum class Kind { none, mask, boxes };
  Kind kind = Kind::none;
  VoxelMask mask;
  std::vector<Box> boxes;
};

struct GroundedSample {
  TaggedReport tagged;
  std::vector<AnnotationGeometry> findings_geometry;    // parallel to annotations
  std::vector<AnnotationGeometry> impression_geometry;
};

GroundedSample localize_annotations(const TaggedReport& tagged, const Taxonomy& taxonomy,
                                    Localizer& localizer, PipelineStats& stats);

// Full per-report path: clean -> tag -> filter -> localize.
std::optional<GroundedSample> process_report(const Report& report, const Taxonomy& taxonomy,
                                             const PromptTemplates& templates,
                                             AnnotatorBackend& backend, Localizer& localizer,
                                             PipelineStats& stats, int max_retries = 2);

// --- serialization ----------------------------------------------------------
std::vector<Report> read_reports_jsonl(const std::string& path);
std::string grounded_to_json(const GroundedSample& sample);
std::string stats_to_json(const PipelineStats& stats);
void write_grounded_jsonl(const std::string& path, const std::vector<GroundedSample>& samples);

// Run-length encoding, alternating zero/one runs starting with zeros.
std::vector<std::int64_t> rle_encode(const VoxelMask& mask);
VoxelMask rle_decode(const std::array<std::int64_t, 3>& shape,
                     const std::vector<std::int64_t>& counts);

}  // namespace medvg
