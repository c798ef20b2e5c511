#include "medvg/stages.hpp"

#include <algorithm>

#include "medvg/errors.hpp"

namespace medvg {

namespace {

std::vector<TokenId> with_eos(const Tokenizer& tok, std::vector<TokenId> tokens) {
  TokenId eos = tok.id_of(kEndOfResponse);
  if (eos == tok.unk()) throw ConfigError("tokenizer vocabulary lacks the end-of-response word");
  tokens.push_back(eos);
  return tokens;
}

std::vector<TokenId> encode_checked(const Tokenizer& tok, const std::string& text) {
  std::vector<TokenId> ids = tok.encode(text);
  for (TokenId id : ids)
    if (id == tok.unk())
      throw ConfigError("out-of-vocabulary word in template text: " + text);
  return ids;
}

}  // namespace

std::vector<TokenId> bracket_text(const std::string& text, const Tokenizer& tokenizer,
                                  const std::vector<Annotation>& annotations,
                                  const std::vector<bool>& bracketed) {
  std::vector<PiecePos> pieces = split_pieces_with_offsets(text);
  std::vector<TokenId> tokens;
  tokens.reserve(pieces.size());
  for (const auto& p : pieces) tokens.push_back(tokenizer.id_of(p.text));

  std::vector<SpanRange> spans;
  for (std::size_t i = 0; i < annotations.size(); ++i) {
    if (!bracketed[i]) continue;
    const Annotation& a = annotations[i];
    std::int64_t first = -1, last = -1;
    for (std::size_t t = 0; t < pieces.size(); ++t) {
      if (pieces[t].begin >= a.begin && pieces[t].end <= a.end) {
        if (first < 0) first = static_cast<std::int64_t>(t);
        last = static_cast<std::int64_t>(t);
      }
    }
    if (first < 0)
      throw SpanLayoutError("bracket_text: annotation does not align with piece boundaries");
    spans.push_back(SpanRange{first, last + 1});
  }
  std::sort(spans.begin(), spans.end(),
            [](const SpanRange& a, const SpanRange& b) { return a.start < b.start; });
  return render_grounded(tokens, spans, tokenizer.specials());
}

std::vector<TrainingInstance> build_stage1(const std::vector<SyntheticSample>& corpus,
                                           const Tokenizer& tokenizer, const Taxonomy& taxonomy,
                                           std::uint64_t seed) {
  Rng base = Rng(seed).substream("stage1");
  const SpecialTokens& st = tokenizer.specials();
  std::vector<TrainingInstance> out;
  out.reserve(corpus.size());
  std::vector<std::string> all_names;
  for (const auto& e : taxonomy.entries()) all_names.push_back(e.canonical);

  for (std::size_t si = 0; si < corpus.size(); ++si) {
    const SyntheticSample& s = corpus[si];
    Rng rng = base.substream("sample-" + std::to_string(si));
    TrainingInstance inst;
    inst.image_ref = s.image_ref;
    inst.image = s.image;
    inst.grounding = true;

    // queried set: every scene target plus one or two absent distractors
    std::vector<std::pair<std::string, const SceneObject*>> queries;
    for (const auto& obj : s.objects) queries.emplace_back(obj.target, &obj);
    std::int64_t n_absent = 1 + static_cast<std::int64_t>(rng.uniform_int(2));
    for (std::int64_t k = 0; k < n_absent; ++k) {
      const std::string& name = all_names[rng.uniform_int(all_names.size())];
      bool used = false;
      for (const auto& [qn, qo] : queries) {
        (void)qo;
        if (qn == name) used = true;
      }
      if (!used) queries.emplace_back(name, nullptr);
    }

    // one instance per queried target, so the causal context at the closing
    // bracket matches the single-target evaluation prompt exactly
    for (const auto& [name, obj] : queries) {
      TrainingInstance per = inst;
      std::vector<TokenId> instr =
          encode_checked(tokenizer, "Locate the following targets: " + name + ".");
      TrainingTurn turn;
      turn.instruction = insert_mode_token(instr, true, st, tokenizer);
      std::vector<TokenId> name_tokens = encode_checked(tokenizer, name);
      if (obj != nullptr) {
        turn.response.push_back(st.open_p);
        turn.response.insert(turn.response.end(), name_tokens.begin(), name_tokens.end());
        turn.response.push_back(st.close_p);
        // echo the name right after the closing bracket: the next-token target
        // at </p> is then the target name itself, so the language loss forces
        // the </p> hidden state (the localization prompt) to identify the target
        turn.response.insert(turn.response.end(), name_tokens.begin(), name_tokens.end());
        std::vector<TokenId> tail = encode_checked(tokenizer, "is present.");
        turn.response.insert(turn.response.end(), tail.begin(), tail.end());
        AnnotationGeometry geo;
        if (obj->kind == TargetKind::anatomy) {
          geo.kind = AnnotationGeometry::Kind::mask;
          geo.mask = obj->mask;
        } else {
          geo.kind = AnnotationGeometry::Kind::boxes;
          geo.boxes = obj->boxes;
        }
        per.groundings.push_back(std::move(geo));
      } else {
        turn.response.insert(turn.response.end(), name_tokens.begin(), name_tokens.end());
        std::vector<TokenId> tail = encode_checked(tokenizer, "is absent.");
        turn.response.insert(turn.response.end(), tail.begin(), tail.end());
      }
      turn.response = with_eos(tokenizer, std::move(turn.response));
      per.turns.push_back(std::move(turn));
      // box-target instances are a minority of the corpus (masks plus absent
      // distractors outnumber them ~2:1 under uniform sampling); emit them
      // twice so the instance-detection heads train at parity with the mask head
      bool balance = obj != nullptr && obj->kind != TargetKind::anatomy;
      if (balance) out.push_back(per);
      out.push_back(std::move(per));
    }
  }
  return out;
}

std::vector<TrainingInstance> build_stage2(const std::vector<SyntheticSample>& corpus,
                                           const Tokenizer& tokenizer, const TaskMixRates& rates,
                                           std::uint64_t seed) {
  if (rates.modality < 0 || rates.modality > 1 || rates.plane < 0 || rates.plane > 1 ||
      rates.abnormality < 0 || rates.abnormality > 1)
    throw ConfigError("build_stage2: task-mix rates must lie in [0,1]");
  Rng base = Rng(seed).substream("stage2");
  const SpecialTokens& st = tokenizer.specials();
  std::vector<TrainingInstance> out;
  out.reserve(corpus.size());

  for (std::size_t si = 0; si < corpus.size(); ++si) {
    const SyntheticSample& s = corpus[si];
    Rng rng = base.substream("sample-" + std::to_string(si));
    TrainingInstance inst;
    inst.image_ref = s.image_ref;
    inst.image = s.image;
    inst.grounding = false;

    auto add_turn = [&](const std::string& q, const std::string& a) {
      TrainingTurn t;
      t.instruction = insert_mode_token(encode_checked(tokenizer, q), false, st, tokenizer);
      t.response = with_eos(tokenizer, encode_checked(tokenizer, a));
      inst.turns.push_back(std::move(t));
    };

    // all QA pairs for one image merge into one multi-turn conversation
    if (rng.bernoulli(rates.modality)) {
      add_turn("What imaging modality is this?",
               s.depth > 1 ? "This is a computed tomography scan." : "This is a radiograph.");
    }
    if (rng.bernoulli(rates.plane)) {
      add_turn("What is the imaging plane?", "The imaging plane is " + s.plane + ".");
    }
    if (rng.bernoulli(rates.abnormality)) {
      std::string ans;
      for (const auto& obj : s.objects)
        if (obj.kind == TargetKind::abnormality) ans += "There is " + obj.target + ". ";
      if (ans.empty())
        ans = "No acute abnormality.";
      else
        ans.pop_back();
      add_turn("Are there any abnormalities?", ans);
    }
    {
      std::string caption = "This image shows";
      bool first = true;
      for (const auto& obj : s.objects) {
        if (obj.kind != TargetKind::anatomy) continue;
        caption += first ? " the " + obj.target : " and the " + obj.target;
        first = false;
      }
      caption += ".";
      add_turn("Describe the image.", caption);
    }
    add_turn("Write a report for this image.",
             "Findings: " + s.report.findings + " Impression: " + s.report.impression);
    out.push_back(std::move(inst));
  }
  return out;
}

std::vector<TrainingInstance> build_stage3(const std::vector<SyntheticSample>& corpus,
                                           const Tokenizer& tokenizer, const Taxonomy& taxonomy,
                                           const PromptTemplates& templates,
                                           AnnotatorBackend& backend, Localizer& localizer,
                                           PipelineStats& stats) {
  const SpecialTokens& st = tokenizer.specials();
  std::vector<TrainingInstance> out;
  for (const auto& s : corpus) {
    auto grounded = process_report(s.report, taxonomy, templates, backend, localizer, stats);
    if (!grounded) continue;  // pipeline drop

    TrainingInstance inst;
    inst.image_ref = s.image_ref;
    inst.image = s.image;
    inst.grounding = true;
    TrainingTurn turn;
    turn.instruction = insert_mode_token(
        encode_checked(tokenizer, "Write a report for this image."), true, st, tokenizer);

    auto append_section = [&](const std::string& header, const TaggedText& section,
                              const std::vector<AnnotationGeometry>& geos) {
      std::vector<TokenId> head = encode_checked(tokenizer, header);
      turn.response.insert(turn.response.end(), head.begin(), head.end());
      // bracket only phrases that carry geometry
      std::vector<bool> bracketed(section.annotations.size());
      for (std::size_t i = 0; i < geos.size(); ++i) {
        bracketed[i] = geos[i].kind != AnnotationGeometry::Kind::none;
        if (bracketed[i]) inst.groundings.push_back(geos[i]);
      }
      std::vector<TokenId> body = bracket_text(section.source, tokenizer,
                                               section.annotations, bracketed);
      turn.response.insert(turn.response.end(), body.begin(), body.end());
    };
    append_section("Findings:", grounded->tagged.findings, grounded->findings_geometry);
    append_section("Impression:", grounded->tagged.impression, grounded->impression_geometry);
    turn.response = with_eos(tokenizer, std::move(turn.response));
    inst.turns.push_back(std::move(turn));
    out.push_back(std::move(inst));
  }
  return out;
}

}  // namespace medvg
