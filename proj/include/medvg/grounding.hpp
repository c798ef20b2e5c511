#pragma once
// The bracket-token protocol: a small deterministic tokenizer, the four
// special tokens, rendering/parsing of grounded spans, the grounding on/off
// mode switch, and extraction of per-phrase prompt embeddings.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "medvg/errors.hpp"
#include "medvg/tensor.hpp"

namespace medvg {

using TokenId = std::int64_t;

enum class SpecialKind { OPEN_P, CLOSE_P, GRD, NGRD };

struct SpecialTokens {
  TokenId open_p = 0;
  TokenId close_p = 1;
  TokenId grd = 2;
  TokenId ngrd = 3;
  bool is_special(TokenId id) const {
    return id == open_p || id == close_p || id == grd || id == ngrd;
  }
};

// Whitespace/punctuation tokenizer over a fixed small vocabulary plus the
// four specials. Detokenization attaches punctuation to the previous word,
// so canonical text round-trips exactly.
class Tokenizer {
 public:
  static Tokenizer build(const std::vector<std::string>& words);

  std::vector<TokenId> encode(const std::string& text) const;
  std::string decode(const std::vector<TokenId>& tokens) const;

  const SpecialTokens& specials() const { return specials_; }
  std::int64_t vocab_size() const { return static_cast<std::int64_t>(vocab_.size()); }
  const std::vector<std::string>& vocab() const { return vocab_; }
  TokenId unk() const { return unk_; }
  TokenId id_of(const std::string& piece) const;

 private:
  std::vector<std::string> vocab_;
  std::unordered_map<std::string, TokenId> lookup_;
  SpecialTokens specials_;
  TokenId unk_ = 4;
};

// Splits text into word/punctuation pieces (the tokenizer's segmentation).
std::vector<std::string> split_pieces(const std::string& text);

// Same segmentation with character offsets [begin, end) into the input.
struct PiecePos {
  std::string text;
  std::int64_t begin = 0, end = 0;
};
std::vector<PiecePos> split_pieces_with_offsets(const std::string& text);

struct GroundedSpan {
  std::string phrase;
  std::int64_t start = 0;        // token_range [start, end) in the token sequence
  std::int64_t end = 0;
  std::int64_t close_index = 0;  // index of the CLOSE_P token; == end
};

struct GroundedResponse {
  std::string text;  // detokenized response with bracket tokens stripped
  std::vector<GroundedSpan> spans;
};

// Prepends GRD or NGRD. Idempotent when the same mode is already present;
// conflicting mode token raises a protocol error.
std::vector<TokenId> insert_mode_token(const std::vector<TokenId>& instruction_tokens,
                                       bool grounding_enabled, const SpecialTokens& st,
                                       const Tokenizer& tok);

GroundedResponse parse_response(const std::vector<TokenId>& tokens, const Tokenizer& tok);

std::vector<TokenId> strip_tags(const std::vector<TokenId>& tokens, const SpecialTokens& st);

// Token-index span over plain (bracket-free) text tokens.
struct SpanRange {
  std::int64_t start = 0;
  std::int64_t end = 0;  // exclusive
};

std::vector<TokenId> render_grounded(const std::vector<TokenId>& text_tokens,
                                     const std::vector<SpanRange>& spans,
                                     const SpecialTokens& st);

// One hidden-state row per span, taken at close_index, in span order.
std::vector<Tensor> extract_prompt_embeddings(const Tensor& hidden_states,
                                              const GroundedResponse& response);

}  // namespace medvg
