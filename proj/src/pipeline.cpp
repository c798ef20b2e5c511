#include "medvg/pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "medvg/errors.hpp"

namespace medvg {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::string lower(const std::string& s) {
  std::string out = s;
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

bool word_boundary(const std::string& text, std::size_t pos, std::size_t len) {
  auto alnum = [&](std::size_t i) {
    return std::isalnum(static_cast<unsigned char>(text[i])) != 0;
  };
  bool left_ok = pos == 0 || !alnum(pos - 1);
  bool right_ok = pos + len >= text.size() || !alnum(pos + len);
  return left_ok && right_ok;
}

// case-insensitive whole-word search
bool contains_word(const std::string& text_lower, const std::string& word) {
  std::size_t pos = 0;
  while ((pos = text_lower.find(word, pos)) != std::string::npos) {
    if (word_boundary(text_lower, pos, word.size())) return true;
    ++pos;
  }
  return false;
}

std::string read_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

// --- taxonomy ---------------------------------------------------------------

Taxonomy Taxonomy::parse(const std::string& text) {
  Taxonomy t;
  std::map<std::string, std::string> phrase_owner;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    std::size_t p1 = line.find('|');
    std::size_t p2 = line.find('|', p1 == std::string::npos ? p1 : p1 + 1);
    if (p1 == std::string::npos || p2 == std::string::npos)
      throw ConfigError("taxonomy: malformed line: " + line);
    TaxonomyEntry e;
    std::string kind = trim(line.substr(0, p1));
    if (kind == "anatomy")
      e.kind = TargetKind::anatomy;
    else if (kind == "abnormality")
      e.kind = TargetKind::abnormality;
    else
      throw ConfigError("taxonomy: unknown kind: " + kind);
    e.canonical = trim(line.substr(p1 + 1, p2 - p1 - 1));
    if (e.canonical.empty()) throw ConfigError("taxonomy: empty canonical name");
    std::string syns = line.substr(p2 + 1);
    std::istringstream ss(syns);
    std::string syn;
    while (std::getline(ss, syn, ';')) {
      syn = trim(syn);
      if (!syn.empty()) e.synonyms.push_back(syn);
    }
    if (t.by_canonical_.count(e.canonical))
      throw ConfigError("taxonomy: duplicate canonical name " + e.canonical);
    for (const std::string& phrase : e.synonyms) {
      auto [it, inserted] = phrase_owner.emplace(lower(phrase), e.canonical);
      if (!inserted && it->second != e.canonical)
        throw ConfigError("taxonomy: synonym '" + phrase + "' maps to multiple entries");
    }
    auto [it, inserted] = phrase_owner.emplace(lower(e.canonical), e.canonical);
    if (!inserted && it->second != e.canonical)
      throw ConfigError("taxonomy: name '" + e.canonical + "' collides with a synonym");
    t.by_canonical_.emplace(e.canonical, t.entries_.size());
    t.entries_.push_back(std::move(e));
  }
  return t;
}

Taxonomy Taxonomy::load(const std::string& path) { return parse(read_file(path)); }

const TaxonomyEntry* Taxonomy::find(const std::string& canonical) const {
  auto it = by_canonical_.find(canonical);
  return it == by_canonical_.end() ? nullptr : &entries_[it->second];
}

std::vector<std::pair<std::string, const TaxonomyEntry*>> Taxonomy::phrase_index() const {
  std::vector<std::pair<std::string, const TaxonomyEntry*>> out;
  for (const auto& e : entries_) {
    out.emplace_back(e.canonical, &e);
    for (const auto& s : e.synonyms) out.emplace_back(s, &e);
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    if (a.first.size() != b.first.size()) return a.first.size() > b.first.size();
    return a.first < b.first;
  });
  return out;
}

std::vector<std::string> Taxonomy::names_of_kind(TargetKind kind) const {
  std::vector<std::string> out;
  for (const auto& e : entries_)
    if (e.kind == kind) out.push_back(e.canonical);
  return out;
}

// --- templates --------------------------------------------------------------

PromptTemplates PromptTemplates::load(const std::string& dir) {
  PromptTemplates t;
  t.tag = read_file(dir + "/tag_prompt.txt");
  t.filter = read_file(dir + "/filter_prompt.txt");
  t.clean_2d_step1 = read_file(dir + "/clean_2d_step1.txt");
  t.clean_2d_step2 = read_file(dir + "/clean_2d_step2.txt");
  t.clean_3d = read_file(dir + "/clean_3d.txt");
  return t;
}

std::string substitute(const std::string& tmpl,
                       const std::map<std::string, std::string>& values) {
  std::string out = tmpl;
  for (const auto& [key, value] : values) {
    std::size_t pos = 0;
    while ((pos = out.find(key, pos)) != std::string::npos) {
      out.replace(pos, key.size(), value);
      pos += value.size();
    }
  }
  return out;
}

// --- inline annotation syntax ----------------------------------------------

TaggedText parse_tagged(const std::string& tagged) {
  TaggedText out;
  out.tagged = tagged;
  std::size_t i = 0;
  while (i < tagged.size()) {
    if (tagged[i] == '[') {
      std::size_t close = tagged.find("](", i + 1);
      if (close == std::string::npos)
        throw InputError("parse_tagged: '[' without matching '](' near index " +
                         std::to_string(i));
      std::size_t end = tagged.find(')', close + 2);
      if (end == std::string::npos)
        throw InputError("parse_tagged: unterminated annotation target");
      Annotation a;
      a.phrase = tagged.substr(i + 1, close - i - 1);
      a.target = tagged.substr(close + 2, end - close - 2);
      if (a.phrase.empty() || a.target.empty())
        throw InputError("parse_tagged: empty phrase or target");
      a.begin = static_cast<std::int64_t>(out.source.size());
      out.source += a.phrase;
      a.end = static_cast<std::int64_t>(out.source.size());
      out.annotations.push_back(std::move(a));
      i = end + 1;
    } else {
      out.source += tagged[i];
      ++i;
    }
  }
  return out;
}

// --- cleaning ---------------------------------------------------------------

namespace {

const std::vector<std::string> kGateKeywords = {"prior",  "previous", "new",
                                                "stable", "patient",  "history"};

bool has_gate_keyword(const std::string& text) {
  std::string lo = lower(text);
  for (const auto& k : kGateKeywords)
    if (contains_word(lo, k)) return true;
  return false;
}

std::string clean_section(const std::string& text, AnnotatorBackend& backend,
                          const std::string& tmpl, PipelineStats& stats) {
  std::string system = substitute(tmpl, {{"{input}", text}});
  ++stats.backend_calls;
  std::string out = trim(backend.complete(system, text));
  if (out.empty()) throw CleaningError("clean_report: backend returned an empty completion");
  return out;
}

}  // namespace

Report clean_report(const Report& report, AnnotatorBackend& backend,
                    const PromptTemplates& templates, PipelineStats& stats) {
  if (trim(report.findings).empty() || trim(report.impression).empty())
    throw InputError("clean_report: both Findings and Impression must be non-empty");
  Report out = report;
  auto clean_one = [&](const std::string& text) -> std::string {
    if (report.is_volume) {
      if (!has_gate_keyword(text)) {
        ++stats.clean_calls_skipped;
        return text;
      }
      return clean_section(text, backend, templates.clean_3d, stats);
    }
    std::string step1 = clean_section(text, backend, templates.clean_2d_step1, stats);
    return clean_section(step1, backend, templates.clean_2d_step2, stats);
  };
  out.findings = clean_one(report.findings);
  out.impression = clean_one(report.impression);
  return out;
}

// --- tagging and filtering --------------------------------------------------

namespace {

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

}  // namespace

std::optional<TaggedText> tag_key_phrases(const std::string& text, const Taxonomy& taxonomy,
                                          AnnotatorBackend& backend,
                                          const PromptTemplates& templates,
                                          PipelineStats& stats, int max_retries) {
  std::string system = substitute(
      templates.tag,
      {{"{'; '.join(anatomy_list)}", join(taxonomy.names_of_kind(TargetKind::anatomy), "; ")},
       {"{'; '.join(anomaly_list)}",
        join(taxonomy.names_of_kind(TargetKind::abnormality), "; ")}});
  for (int attempt = 0; attempt <= max_retries; ++attempt) {
    if (attempt > 0) ++stats.retries;
    ++stats.backend_calls;
    std::string completion = backend.complete(system, text);
    try {
      TaggedText parsed = parse_tagged(completion);
      if (parsed.source != text) continue;  // prose altered: validation failure
      bool canonical_ok = true;
      for (const auto& a : parsed.annotations)
        if (taxonomy.find(a.target) == nullptr) canonical_ok = false;
      if (!canonical_ok) continue;
      return parsed;
    } catch (const InputError&) {
      continue;  // parse failure: retry
    }
  }
  return std::nullopt;
}

std::optional<TaggedText> filter_positive(const TaggedText& tagged, AnnotatorBackend& backend,
                                          const PromptTemplates& templates,
                                          PipelineStats& stats, int max_retries) {
  auto key = [](const Annotation& a) {
    return std::tuple(a.phrase, a.target, a.begin, a.end);
  };
  for (int attempt = 0; attempt <= max_retries; ++attempt) {
    if (attempt > 0) ++stats.retries;
    ++stats.backend_calls;
    std::string completion = backend.complete(templates.filter, tagged.tagged);
    try {
      TaggedText parsed = parse_tagged(completion);
      if (parsed.source != tagged.source) continue;
      // output annotations must be a subset of the input annotations
      std::vector<std::tuple<std::string, std::string, std::int64_t, std::int64_t>> in;
      for (const auto& a : tagged.annotations) in.push_back(key(a));
      bool subset = true;
      for (const auto& a : parsed.annotations) {
        auto it = std::find(in.begin(), in.end(), key(a));
        if (it == in.end()) {
          subset = false;
          break;
        }
        in.erase(it);
      }
      if (!subset) continue;
      return parsed;
    } catch (const InputError&) {
      continue;
    }
  }
  return std::nullopt;
}

// --- localization -----------------------------------------------------------

GroundedSample localize_annotations(const TaggedReport& tagged, const Taxonomy& taxonomy,
                                    Localizer& localizer, PipelineStats& stats) {
  GroundedSample out;
  out.tagged = tagged;
  auto localize_section = [&](const TaggedText& section) {
    std::vector<AnnotationGeometry> geos;
    for (const auto& a : section.annotations) {
      const TaxonomyEntry* entry = taxonomy.find(a.target);
      if (entry == nullptr)
        throw InputError("localize_annotations: non-canonical target " + a.target);
      AnnotationGeometry geo;
      if (entry->kind == TargetKind::anatomy) {
        VoxelMask mask;
        if (localizer.segment(tagged.image_ref, a.target, mask)) {
          mask.validate();
          geo.kind = AnnotationGeometry::Kind::mask;
          geo.mask = std::move(mask);
          ++stats.masks;
        }
      } else {
        std::vector<Box> boxes;
        if (localizer.detect(tagged.image_ref, a.target, boxes) && !boxes.empty()) {
          for (const auto& b : boxes) {
            b.validate();
            for (int ax = 0; ax < b.rank; ++ax)
              if (b.mn[static_cast<std::size_t>(ax)] < 0.0 ||
                  b.mx[static_cast<std::size_t>(ax)] > 1.0)
                throw InputError("localize_annotations: box outside image bounds");
          }
          geo.kind = AnnotationGeometry::Kind::boxes;
          geo.boxes = std::move(boxes);
          ++stats.boxes;
          stats.box_instances += static_cast<std::int64_t>(geo.boxes.size());
        }
      }
      ++stats.tags;
      geos.push_back(std::move(geo));
    }
    return geos;
  };
  out.findings_geometry = localize_section(tagged.findings);
  out.impression_geometry = localize_section(tagged.impression);
  return out;
}

std::optional<GroundedSample> process_report(const Report& report, const Taxonomy& taxonomy,
                                             const PromptTemplates& templates,
                                             AnnotatorBackend& backend, Localizer& localizer,
                                             PipelineStats& stats, int max_retries) {
  Report cleaned = clean_report(report, backend, templates, stats);
  TaggedReport tagged;
  tagged.image_ref = cleaned.image_ref;
  for (auto [text, slot] : {std::pair<const std::string*, TaggedText*>{&cleaned.findings,
                                                                       &tagged.findings},
                            {&cleaned.impression, &tagged.impression}}) {
    auto t = tag_key_phrases(*text, taxonomy, backend, templates, stats, max_retries);
    if (!t) {
      ++stats.dropped;
      return std::nullopt;
    }
    auto f = filter_positive(*t, backend, templates, stats, max_retries);
    if (!f) {
      ++stats.dropped;
      return std::nullopt;
    }
    *slot = std::move(*f);
  }
  GroundedSample sample = localize_annotations(tagged, taxonomy, localizer, stats);
  ++stats.samples;
  return sample;
}

// --- serialization ----------------------------------------------------------

std::vector<std::int64_t> rle_encode(const VoxelMask& mask) {
  std::vector<std::int64_t> counts;
  std::uint8_t cur = 0;
  std::int64_t run = 0;
  for (std::uint8_t v : mask.data) {
    if (v == cur) {
      ++run;
    } else {
      counts.push_back(run);
      cur = v;
      run = 1;
    }
  }
  counts.push_back(run);
  return counts;
}

VoxelMask rle_decode(const std::array<std::int64_t, 3>& shape,
                     const std::vector<std::int64_t>& counts) {
  VoxelMask mask = VoxelMask::zeros(shape[0], shape[1], shape[2]);
  std::size_t pos = 0;
  std::uint8_t cur = 0;
  for (std::int64_t run : counts) {
    if (run < 0 || pos + static_cast<std::size_t>(run) > mask.data.size())
      throw InputError("rle_decode: counts exceed mask size");
    std::fill_n(mask.data.begin() + static_cast<std::ptrdiff_t>(pos),
                static_cast<std::size_t>(run), cur);
    pos += static_cast<std::size_t>(run);
    cur = cur ? 0 : 1;
  }
  if (pos != mask.data.size()) throw InputError("rle_decode: counts do not cover mask");
  return mask;
}

namespace {

nlohmann::ordered_json box_to_json(const Box& b) {
  nlohmann::ordered_json j;
  j["rank"] = b.rank;
  for (int a = 0; a < b.rank; ++a) j["mn"].push_back(b.mn[static_cast<std::size_t>(a)]);
  for (int a = 0; a < b.rank; ++a) j["mx"].push_back(b.mx[static_cast<std::size_t>(a)]);
  return j;
}

nlohmann::ordered_json section_to_json(const TaggedText& t,
                                       const std::vector<AnnotationGeometry>& geos) {
  nlohmann::ordered_json j;
  j["text"] = t.source;
  j["tagged"] = t.tagged;
  j["annotations"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < t.annotations.size(); ++i) {
    const auto& a = t.annotations[i];
    nlohmann::ordered_json ja;
    ja["phrase"] = a.phrase;
    ja["target"] = a.target;
    ja["begin"] = a.begin;
    ja["end"] = a.end;
    const AnnotationGeometry& g = geos.at(i);
    nlohmann::ordered_json jg;
    switch (g.kind) {
      case AnnotationGeometry::Kind::none:
        jg["kind"] = "none";
        break;
      case AnnotationGeometry::Kind::mask:
        jg["kind"] = "mask";
        jg["shape"] = g.mask.shape;
        jg["rle"] = rle_encode(g.mask);
        break;
      case AnnotationGeometry::Kind::boxes:
        jg["kind"] = "boxes";
        jg["boxes"] = nlohmann::ordered_json::array();
        for (const auto& b : g.boxes) jg["boxes"].push_back(box_to_json(b));
        break;
    }
    ja["geometry"] = std::move(jg);
    j["annotations"].push_back(std::move(ja));
  }
  return j;
}

}  // namespace

std::string grounded_to_json(const GroundedSample& sample) {
  nlohmann::ordered_json j;
  j["image_ref"] = sample.tagged.image_ref;
  j["findings"] = section_to_json(sample.tagged.findings, sample.findings_geometry);
  j["impression"] = section_to_json(sample.tagged.impression, sample.impression_geometry);
  return j.dump();
}

std::string stats_to_json(const PipelineStats& s) {
  nlohmann::ordered_json j;
  j["samples"] = s.samples;
  j["tags"] = s.tags;
  j["masks"] = s.masks;
  j["boxes"] = s.boxes;
  j["box_instances"] = s.box_instances;
  j["dropped"] = s.dropped;
  j["retries"] = s.retries;
  j["backend_calls"] = s.backend_calls;
  j["clean_calls_skipped"] = s.clean_calls_skipped;
  return j.dump();
}

std::vector<Report> read_reports_jsonl(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("read_reports_jsonl: cannot open " + path);
  std::vector<Report> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw IoError("read_reports_jsonl: malformed JSON at line " + std::to_string(lineno));
    Report r;
    r.image_ref = j.at("image_ref");
    r.findings = j.at("findings");
    r.impression = j.at("impression");
    r.is_volume = j.value("is_volume", false);
    out.push_back(std::move(r));
  }
  return out;
}

void write_grounded_jsonl(const std::string& path, const std::vector<GroundedSample>& samples) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("write_grounded_jsonl: cannot open " + path);
  for (const auto& s : samples) f << grounded_to_json(s) << '\n';
  if (!f) throw IoError("write_grounded_jsonl: write failure on " + path);
}

}  // namespace medvg
