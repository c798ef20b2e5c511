// Bracket-token protocol: tokenizer round trips, span render/parse identity,
// and the mode-switch rules.

#include <doctest.h>

#include "medvg/grounding.hpp"
#include "medvg/rng.hpp"

using namespace medvg;

namespace {
Tokenizer test_tokenizer() {
  return Tokenizer::build({"there", "is", "an", "opacity", "in", "the", "right", "lung",
                           "heart", "no", "effusion", ".", ",", "seen"});
}
}  // namespace

TEST_CASE("canonical text round-trips through the tokenizer") {
  Tokenizer tok = test_tokenizer();
  std::string text = "there is an opacity in the right lung.";
  CHECK(tok.decode(tok.encode(text)) == text);
  CHECK(tok.id_of("nonexistent") == tok.unk());
}

TEST_CASE("specials occupy the reserved low ids") {
  Tokenizer tok = test_tokenizer();
  CHECK(tok.specials().open_p == 0);
  CHECK(tok.specials().close_p == 1);
  CHECK(tok.specials().grd == 2);
  CHECK(tok.specials().ngrd == 3);
  CHECK(tok.unk() == 4);
  CHECK(tok.id_of("<p>") == 0);
  CHECK(tok.id_of("</p>") == 1);
}

TEST_CASE("mode-token insertion is idempotent and rejects conflicts") {
  Tokenizer tok = test_tokenizer();
  const SpecialTokens& st = tok.specials();
  auto base = tok.encode("there is an opacity");
  auto grd = insert_mode_token(base, true, st, tok);
  CHECK(grd.front() == st.grd);
  CHECK(insert_mode_token(grd, true, st, tok) == grd);  // idempotent
  CHECK_THROWS(insert_mode_token(grd, false, st, tok));  // conflicting switch
}

TEST_CASE("render/parse round trip on seeded span layouts") {
  Tokenizer tok = test_tokenizer();
  const SpecialTokens& st = tok.specials();
  Rng rng(79);
  for (int trial = 0; trial < 500; ++trial) {
    std::int64_t n = 3 + static_cast<std::int64_t>(rng.uniform_int(24));
    std::vector<TokenId> text;
    for (std::int64_t i = 0; i < n; ++i)
      text.push_back(5 + static_cast<TokenId>(
                             rng.uniform_int(static_cast<std::uint64_t>(tok.vocab_size() - 5))));
    std::vector<SpanRange> spans;
    std::int64_t pos = 0;
    while (pos < n) {
      if (rng.bernoulli(0.35)) {
        std::int64_t len = 1 + static_cast<std::int64_t>(rng.uniform_int(3));
        len = std::min(len, n - pos);
        spans.push_back(SpanRange{pos, pos + len});
        pos += len + 1;
      } else {
        ++pos;
      }
    }
    auto rendered = render_grounded(text, spans, st);
    GroundedResponse parsed = parse_response(rendered, tok);
    REQUIRE(parsed.spans.size() == spans.size());
    for (std::size_t s = 0; s < spans.size(); ++s) {
      std::vector<TokenId> expect(text.begin() + spans[s].start, text.begin() + spans[s].end);
      CHECK(parsed.spans[s].phrase == tok.decode(expect));
    }
    CHECK(strip_tags(rendered, st) == text);
    CHECK(parsed.text == tok.decode(text));
  }
}

TEST_CASE("parse rejects malformed bracket structure") {
  Tokenizer tok = test_tokenizer();
  const SpecialTokens& st = tok.specials();
  TokenId w = tok.id_of("lung");
  CHECK_THROWS(parse_response({st.open_p, w}, tok));            // unclosed
  CHECK_THROWS(parse_response({st.close_p, w}, tok));           // close before open
  CHECK_THROWS(parse_response({st.open_p, st.open_p, w, st.close_p}, tok));  // nested
  CHECK_THROWS(parse_response({st.open_p, st.close_p}, tok));   // empty span
}

TEST_CASE("prompt embeddings are taken at the closing-bracket rows") {
  Tokenizer tok = test_tokenizer();
  const SpecialTokens& st = tok.specials();
  std::vector<TokenId> text = tok.encode("there is an opacity seen");
  auto rendered = render_grounded(text, {SpanRange{3, 4}}, st);
  GroundedResponse parsed = parse_response(rendered, tok);
  REQUIRE(parsed.spans.size() == 1);
  Tensor hidden({static_cast<std::int64_t>(rendered.size()), 2});
  for (std::int64_t r = 0; r < hidden.shape[0]; ++r) {
    hidden.at(r, 0) = static_cast<double>(r);
    hidden.at(r, 1) = 10.0 + static_cast<double>(r);
  }
  auto embs = extract_prompt_embeddings(hidden, parsed);
  REQUIRE(embs.size() == 1);
  CHECK(embs[0].at(0) == static_cast<double>(parsed.spans[0].close_index));
}

TEST_CASE("piece offsets cover the source text exactly") {
  std::string text = "no effusion, heart seen.";
  auto pieces = split_pieces_with_offsets(text);
  for (const auto& p : pieces) CHECK(text.substr(static_cast<std::size_t>(p.begin),
                                                 static_cast<std::size_t>(p.end - p.begin)) ==
                                     p.text);
  CHECK(pieces.back().text == ".");
}
