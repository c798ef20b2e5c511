#include "medvg/grounding.hpp"

#include <algorithm>
#include <cctype>

namespace medvg {

namespace {
bool is_punct_piece(const std::string& s) {
  return s.size() == 1 && (s[0] == '.' || s[0] == ',' || s[0] == ':' || s[0] == ';' ||
                           s[0] == '?' || s[0] == '!');
}
}  // namespace

std::vector<PiecePos> split_pieces_with_offsets(const std::string& text) {
  std::vector<PiecePos> pieces;
  std::string cur;
  std::int64_t cur_begin = 0;
  auto flush = [&](std::int64_t end) {
    if (!cur.empty()) {
      pieces.push_back(PiecePos{cur, cur_begin, end});
      cur.clear();
    }
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    char c = text[i];
    std::int64_t pos = static_cast<std::int64_t>(i);
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush(pos);
    } else if (c == '.' || c == ',' || c == ':' || c == ';' || c == '?' || c == '!') {
      flush(pos);
      pieces.push_back(PiecePos{std::string(1, c), pos, pos + 1});
    } else {
      if (cur.empty()) cur_begin = pos;
      cur.push_back(c);
    }
  }
  flush(static_cast<std::int64_t>(text.size()));
  return pieces;
}

std::vector<std::string> split_pieces(const std::string& text) {
  std::vector<std::string> pieces;
  for (auto& p : split_pieces_with_offsets(text)) pieces.push_back(std::move(p.text));
  return pieces;
}

Tokenizer Tokenizer::build(const std::vector<std::string>& words) {
  Tokenizer t;
  t.vocab_ = {"<p>", "</p>", "<grd>", "<ngrd>", "<unk>"};
  t.specials_ = SpecialTokens{};
  t.unk_ = 4;
  for (const auto& w : words) {
    for (const auto& piece : split_pieces(w)) {
      if (t.lookup_.count(piece) ||
          std::find(t.vocab_.begin(), t.vocab_.end(), piece) != t.vocab_.end())
        continue;
      t.lookup_.emplace(piece, static_cast<TokenId>(t.vocab_.size()));
      t.vocab_.push_back(piece);
    }
  }
  // rebuild lookup including specials
  t.lookup_.clear();
  for (std::size_t i = 0; i < t.vocab_.size(); ++i)
    t.lookup_.emplace(t.vocab_[i], static_cast<TokenId>(i));
  return t;
}

TokenId Tokenizer::id_of(const std::string& piece) const {
  auto it = lookup_.find(piece);
  return it == lookup_.end() ? unk_ : it->second;
}

std::vector<TokenId> Tokenizer::encode(const std::string& text) const {
  std::vector<TokenId> out;
  for (const auto& piece : split_pieces(text)) out.push_back(id_of(piece));
  return out;
}

std::string Tokenizer::decode(const std::vector<TokenId>& tokens) const {
  std::string out;
  for (TokenId id : tokens) {
    if (id < 0 || id >= vocab_size()) throw InputError("decode: token id out of range");
    const std::string& piece = vocab_[static_cast<std::size_t>(id)];
    if (out.empty() || is_punct_piece(piece)) {
      out += piece;
    } else {
      out += ' ';
      out += piece;
    }
  }
  return out;
}

std::vector<TokenId> insert_mode_token(const std::vector<TokenId>& instruction_tokens,
                                       bool grounding_enabled, const SpecialTokens& st,
                                       const Tokenizer&) {
  if (instruction_tokens.empty()) throw ProtocolError("insert_mode_token: empty instruction");
  TokenId want = grounding_enabled ? st.grd : st.ngrd;
  TokenId other = grounding_enabled ? st.ngrd : st.grd;
  if (instruction_tokens.front() == want) return instruction_tokens;
  if (instruction_tokens.front() == other)
    throw ProtocolError("insert_mode_token: conflicting mode token already present");
  std::vector<TokenId> out;
  out.reserve(instruction_tokens.size() + 1);
  out.push_back(want);
  out.insert(out.end(), instruction_tokens.begin(), instruction_tokens.end());
  return out;
}

GroundedResponse parse_response(const std::vector<TokenId>& tokens, const Tokenizer& tok) {
  const SpecialTokens& st = tok.specials();
  GroundedResponse resp;
  std::vector<TokenId> plain;
  bool open = false;
  std::int64_t span_start = 0;
  std::vector<TokenId> span_tokens;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    TokenId id = tokens[i];
    if (id == st.open_p) {
      if (open) throw MalformedResponseError("nested OPEN_P bracket", i);
      open = true;
      span_start = static_cast<std::int64_t>(i) + 1;
      span_tokens.clear();
    } else if (id == st.close_p) {
      if (!open) throw MalformedResponseError("CLOSE_P without matching OPEN_P", i);
      if (span_tokens.empty()) throw MalformedResponseError("empty bracket span", i);
      GroundedSpan s;
      s.phrase = tok.decode(span_tokens);
      s.start = span_start;
      s.end = static_cast<std::int64_t>(i);
      s.close_index = s.end;
      resp.spans.push_back(std::move(s));
      open = false;
    } else {
      if (open) span_tokens.push_back(id);
      if (id != st.grd && id != st.ngrd) plain.push_back(id);
    }
  }
  if (open) throw MalformedResponseError("unbalanced OPEN_P at end of sequence", tokens.size());
  resp.text = tok.decode(plain);
  return resp;
}

std::vector<TokenId> strip_tags(const std::vector<TokenId>& tokens, const SpecialTokens& st) {
  std::vector<TokenId> out;
  out.reserve(tokens.size());
  for (TokenId id : tokens)
    if (!st.is_special(id)) out.push_back(id);
  return out;
}

std::vector<TokenId> render_grounded(const std::vector<TokenId>& text_tokens,
                                     const std::vector<SpanRange>& spans,
                                     const SpecialTokens& st) {
  std::int64_t prev_end = 0;
  for (const auto& s : spans) {
    if (s.start < prev_end || s.start >= s.end ||
        s.end > static_cast<std::int64_t>(text_tokens.size()))
      throw SpanLayoutError("render_grounded: spans must be sorted, non-overlapping, in bounds");
    prev_end = s.end;
  }
  std::vector<TokenId> out;
  out.reserve(text_tokens.size() + 2 * spans.size());
  std::size_t si = 0;
  for (std::int64_t i = 0; i <= static_cast<std::int64_t>(text_tokens.size()); ++i) {
    if (si < spans.size() && spans[si].end == i) {
      out.push_back(st.close_p);
      ++si;
    }
    if (si < spans.size() && spans[si].start == i) out.push_back(st.open_p);
    if (i < static_cast<std::int64_t>(text_tokens.size())) out.push_back(text_tokens[i]);
  }
  return out;
}

std::vector<Tensor> extract_prompt_embeddings(const Tensor& hidden_states,
                                              const GroundedResponse& response) {
  if (hidden_states.shape.size() != 2)
    throw ShapeError("extract_prompt_embeddings: hidden states must be [T, dim]");
  std::int64_t t = hidden_states.shape[0], dim = hidden_states.shape[1];
  std::vector<Tensor> out;
  out.reserve(response.spans.size());
  for (const auto& s : response.spans) {
    if (s.close_index < 0 || s.close_index >= t)
      throw ProtocolError("extract_prompt_embeddings: close index out of range");
    Tensor v({dim});
    std::copy_n(hidden_states.data.data() + s.close_index * dim, dim, v.data.data());
    out.push_back(std::move(v));
  }
  return out;
}

}  // namespace medvg
