#include <algorithm>
#include <cctype>
#include <sstream>

#include "medvg/errors.hpp"
#include "medvg/pipeline.hpp"

// Deterministic annotator stand-in. Routes on distinctive phrases of the
// rendered system prompt; the rules are deliberately simple so behavior is
// auditable: longest-match name scanning for tagging, a clause-scoped
// negation cue list for filtering, and trigger-word sentence rules for
// cleaning.

namespace medvg {

namespace {

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

bool contains_word(const std::string& text_lower, const std::string& word) {
  std::size_t pos = 0;
  while ((pos = text_lower.find(word, pos)) != std::string::npos) {
    if (word_boundary(text_lower, pos, word.size())) return true;
    ++pos;
  }
  return false;
}

// --- tagging ----------------------------------------------------------------

// pulls "- <label>: a; b; c" out of the rendered prompt
std::vector<std::string> parse_prompt_list(const std::string& system, const std::string& label) {
  std::size_t pos = system.find(label);
  if (pos == std::string::npos) return {};
  pos += label.size();
  std::size_t end = system.find('\n', pos);
  std::string body = system.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
  std::vector<std::string> out;
  std::istringstream ss(body);
  std::string item;
  while (std::getline(ss, item, ';')) {
    std::size_t a = item.find_first_not_of(' ');
    std::size_t b = item.find_last_not_of(' ');
    if (a != std::string::npos) out.push_back(item.substr(a, b - a + 1));
  }
  return out;
}

std::string mock_tag(const std::string& system, const std::string& text,
                     const Taxonomy* taxonomy) {
  // phrase -> canonical target, longest phrase first
  std::vector<std::pair<std::string, std::string>> index;
  if (taxonomy != nullptr) {
    for (const auto& [phrase, entry] : taxonomy->phrase_index())
      index.emplace_back(phrase, entry->canonical);
  } else {
    for (const auto& label : {"- anatomy list (with optional anatomical modifiers): ",
                              "- anomaly list: "})
      for (const auto& name : parse_prompt_list(system, label)) index.emplace_back(name, name);
    std::sort(index.begin(), index.end(), [](const auto& a, const auto& b) {
      if (a.first.size() != b.first.size()) return a.first.size() > b.first.size();
      return a.first < b.first;
    });
  }

  std::string lo = lower(text);
  std::string out;
  std::size_t i = 0;
  while (i < text.size()) {
    const std::pair<std::string, std::string>* hit = nullptr;
    for (const auto& cand : index) {
      const std::string& phrase = cand.first;
      if (i + phrase.size() <= text.size() && lo.compare(i, phrase.size(), lower(phrase)) == 0 &&
          word_boundary(lo, i, phrase.size())) {
        hit = &cand;
        break;  // index is longest-first
      }
    }
    if (hit != nullptr) {
      out += '[' + text.substr(i, hit->first.size()) + "](" + hit->second + ')';
      i += hit->first.size();
    } else {
      out += text[i];
      ++i;
    }
  }
  return out;
}

// --- filtering --------------------------------------------------------------

const std::vector<std::string> kNegationCues = {"no",  "without",    "absent",
                                                "not", "free of",    "unremarkable"};

std::string detag(const std::string& s) { return parse_tagged(s).source; }

std::string remove_tags(const std::string& s) {
  std::string out;
  std::size_t i = 0;
  while (i < s.size()) {
    if (s[i] == '[') {
      std::size_t close = s.find("](", i + 1);
      std::size_t end = close == std::string::npos ? std::string::npos : s.find(')', close + 2);
      if (end != std::string::npos) {
        out += s.substr(i + 1, close - i - 1);
        i = end + 1;
        continue;
      }
    }
    out += s[i];
    ++i;
  }
  return out;
}

// A negation cue governs its clause, delimited by sentence punctuation.
std::string mock_filter(const std::string& tagged) {
  std::string out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= tagged.size(); ++i) {
    bool boundary = i == tagged.size() || tagged[i] == '.' || tagged[i] == ',' ||
                    tagged[i] == ';' || tagged[i] == ':';
    if (!boundary) continue;
    std::string clause = tagged.substr(start, i - start);
    std::string plain = lower(detag(clause));
    bool negated = false;
    for (const auto& cue : kNegationCues)
      if (contains_word(plain, cue)) negated = true;
    out += negated ? remove_tags(clause) : clause;
    if (i < tagged.size()) out += tagged[i];
    start = i + 1;
  }
  return out;
}

// --- cleaning ---------------------------------------------------------------

const std::vector<std::string> kMetaTriggers = {"view",    "views",    "portable", "radiograph",
                                                "technique", "position", "rotation"};
const std::vector<std::string> kPriorTriggers = {"compared", "comparison", "prior",
                                                 "previous", "previously", "interval",
                                                 "unchanged", "stable",     "new",
                                                 "history",  "known",      "again"};

bool has_any(const std::string& text_lower, const std::vector<std::string>& words) {
  for (const auto& w : words)
    if (contains_word(text_lower, w)) return true;
  return false;
}

// "X has improved." -> "There is X."
bool rewrite_finding(const std::string& sentence, std::string* out) {
  static const std::vector<std::string> verbs = {" has improved", " has worsened",
                                                 " has increased", " has decreased",
                                                 " have improved", " have worsened"};
  for (const auto& v : verbs) {
    std::size_t pos = lower(sentence).find(v);
    if (pos == std::string::npos) continue;
    std::string subject = sentence.substr(0, pos);
    std::size_t a = subject.find_first_not_of(' ');
    if (a == std::string::npos) return false;
    subject = subject.substr(a);
    if (lower(subject).rfind("the ", 0) == 0) subject = subject.substr(4);
    if (subject.empty()) return false;
    *out = "There is " + subject + ".";
    return true;
  }
  return false;
}

std::string mock_clean(const std::string& text, const std::vector<std::string>& triggers) {
  std::vector<std::string> kept;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= text.size(); ++i) {
    if (i != text.size() && text[i] != '.') continue;
    std::string sentence = text.substr(start, i - start);
    start = i + 1;
    std::size_t a = sentence.find_first_not_of(' ');
    if (a == std::string::npos) continue;
    sentence = sentence.substr(a);
    if (!has_any(lower(sentence), triggers)) {
      kept.push_back(sentence + ".");
      continue;
    }
    // drop a leading subordinate clause that carries the trigger
    std::string rest = sentence;
    std::size_t comma = sentence.find(',');
    if (comma != std::string::npos && has_any(lower(sentence.substr(0, comma)), triggers)) {
      rest = sentence.substr(comma + 1);
      std::size_t b = rest.find_first_not_of(' ');
      rest = b == std::string::npos ? "" : rest.substr(b);
    }
    std::string rewritten;
    if (rewrite_finding(rest, &rewritten)) {
      kept.push_back(rewritten);
    } else if (!rest.empty() && !has_any(lower(rest), triggers)) {
      if (!rest.empty()) rest[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(rest[0])));
      kept.push_back(rest + ".");
    }
    // otherwise the sentence only references external information: drop it
  }
  std::string out;
  for (std::size_t i = 0; i < kept.size(); ++i) {
    if (i) out += ' ';
    out += kept[i];
  }
  return out;
}

}  // namespace

std::string MockBackend::complete(const std::string& system_prompt,
                                  const std::string& user_text) {
  if (system_prompt.find("identify the specified anatomical structures") != std::string::npos)
    return mock_tag(system_prompt, user_text, taxonomy_);
  if (system_prompt.find("preliminarily annotated radiology report") != std::string::npos)
    return mock_filter(user_text);
  if (system_prompt.find("imaging planes and techniques") != std::string::npos)
    return mock_clean(user_text, kMetaTriggers);
  if (system_prompt.find("comparison with prior examinations") != std::string::npos)
    return mock_clean(user_text, kPriorTriggers);
  return user_text;  // identity for unrecognized prompts
}

}  // namespace medvg
