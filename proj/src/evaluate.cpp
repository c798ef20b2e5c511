#include "medvg/evaluate.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "medvg/metrics.hpp"
#include "medvg/stages.hpp"

namespace medvg {

namespace {

VoxelMask threshold_mask(const Tensor& logits, const std::array<std::int64_t, 3>& shape) {
  VoxelMask m = VoxelMask::zeros(shape[0], shape[1], shape[2]);
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = logits.data[i] > 0.0 ? 1 : 0;
  return m;
}

double mask_l1(const VoxelMask& a, const VoxelMask& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    s += std::fabs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]));
  return s / static_cast<double>(a.data.size());
}

struct GreedyMatch {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (pred, gt)
  std::vector<double> ious;
};

GreedyMatch greedy_iou_match(const std::vector<Box>& preds, const std::vector<Box>& gts) {
  struct Cand {
    double iou;
    std::size_t p, g;
  };
  std::vector<Cand> cands;
  for (std::size_t p = 0; p < preds.size(); ++p)
    for (std::size_t gt = 0; gt < gts.size(); ++gt) {
      double v = iou(preds[p].as_rank3(), gts[gt].as_rank3());
      cands.push_back({v, p, gt});
    }
  std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    return a.iou > b.iou;  // descending; stable keeps index order among ties
  });
  std::vector<bool> pu(preds.size(), false), gu(gts.size(), false);
  GreedyMatch out;
  for (const auto& c : cands) {
    if (pu[c.p] || gu[c.g]) continue;
    pu[c.p] = true;
    gu[c.g] = true;
    out.pairs.emplace_back(c.p, c.g);
    out.ious.push_back(c.iou);
  }
  return out;
}

std::vector<MetricToken> plain_tokens(const std::vector<TokenId>& tokens, const Tokenizer& tok) {
  std::vector<MetricToken> out;
  TokenId eos = tok.id_of(kEndOfResponse);
  for (TokenId id : tokens) {
    if (tok.specials().is_special(id) || id == eos) continue;
    out.push_back(id);
  }
  return out;
}

}  // namespace

std::vector<TokenId> generate(const Model& model, const Tokenizer& tokenizer,
                              const Tensor& image, const std::vector<TokenId>& instruction,
                              std::int64_t max_tokens) {
  TokenId eos = tokenizer.id_of(kEndOfResponse);
  std::vector<TokenId> tokens = instruction;
  std::vector<TokenId> generated;
  Graph g;
  LeafMap lm = model.make_leaves(g);
  Model::ImageEncoding enc =
      model.encode_image(g, image, model.patch_spec_for(image.shape[0]), lm);
  for (std::int64_t i = 0; i < max_tokens; ++i) {
    Model::VlmOut out = model.forward_vlm(g, &enc, tokens, lm);
    const Tensor& logits = g.value(out.text_logits);
    std::int64_t last = logits.shape[0] - 1;
    std::int64_t best = 0;
    for (std::int64_t v = 1; v < logits.shape[1]; ++v)
      if (logits.at(last, v) > logits.at(last, best)) best = v;
    if (best == eos) break;
    tokens.push_back(best);
    generated.push_back(best);
  }
  return generated;
}

EvalReport evaluate(const Model& model, const Tokenizer& tokenizer,
                    const std::vector<SyntheticSample>& corpus, const EvalOptions& opts) {
  EvalReport rep;
  const SpecialTokens& st = tokenizer.specials();
  double dice_sum = 0.0, l1_sum = 0.0, giou_sum = 0.0;
  std::int64_t giou_n = 0, tp = 0, fp = 0, fn = 0;
  double bleu_sum = 0.0, r1_sum = 0.0, rl_sum = 0.0;

  for (const auto& s : corpus) {
    Graph g;
    LeafMap lm = model.make_leaves(g);
    Model::ImageEncoding enc =
        model.encode_image(g, s.image, model.patch_spec_for(s.image.shape[0]), lm);
    for (const auto& obj : s.objects) {
      // class name in visual grounding format; the closing-bracket hidden
      // state prompts the decoder
      std::vector<TokenId> tokens = insert_mode_token(
          tokenizer.encode("Locate the following targets: " + obj.target + "."), true, st,
          tokenizer);
      tokens.push_back(st.open_p);
      for (TokenId id : tokenizer.encode(obj.target)) tokens.push_back(id);
      tokens.push_back(st.close_p);
      Model::VlmOut out = model.forward_vlm(g, &enc, tokens, lm);
      Var prompt = g.slice_rows(out.hidden, out.img_tokens +
                                                static_cast<std::int64_t>(tokens.size()) - 1,
                                1);
      Model::Localization loc = model.decode_localization(g, enc, prompt, lm);

      if (obj.kind == TargetKind::anatomy) {
        VoxelMask pred = threshold_mask(g.value(loc.mask_logits), loc.mask_shape);
        dice_sum += dice(pred, obj.mask);
        l1_sum += mask_l1(pred, obj.mask);
        ++rep.mask_queries;
      } else {
        const Tensor& boxes = g.value(loc.boxes);
        const Tensor& presence = g.value(loc.presence);
        std::vector<Box> preds;
        for (std::int64_t i = 0; i < boxes.shape[0]; ++i)
          if (presence.at(i, 0) >= opts.presence_threshold)
            preds.push_back(Box::make3d(boxes.at(i, 0), boxes.at(i, 1), boxes.at(i, 2),
                                        boxes.at(i, 3), boxes.at(i, 4), boxes.at(i, 5)));
        GreedyMatch match = greedy_iou_match(preds, obj.boxes);
        std::int64_t hits = 0;
        for (std::size_t k = 0; k < match.pairs.size(); ++k) {
          if (match.ious[k] < opts.match_iou) continue;
          ++hits;
          giou_sum += giou(preds[match.pairs[k].first].as_rank3(),
                           obj.boxes[match.pairs[k].second].as_rank3());
          ++giou_n;
        }
        tp += hits;
        fp += static_cast<std::int64_t>(preds.size()) - hits;
        fn += static_cast<std::int64_t>(obj.boxes.size()) - hits;
        ++rep.box_queries;
      }
    }

    if (opts.generate_text) {
      std::vector<TokenId> instr = insert_mode_token(
          tokenizer.encode("Write a report for this image."), true, st, tokenizer);
      std::vector<TokenId> generated =
          generate(model, tokenizer, s.image, instr, opts.max_gen_tokens);
      std::vector<MetricToken> cand = plain_tokens(generated, tokenizer);
      std::vector<MetricToken> ref = plain_tokens(
          tokenizer.encode("Findings: " + s.report.findings +
                           " Impression: " + s.report.impression),
          tokenizer);
      bleu_sum += bleu1(cand, ref);
      r1_sum += rouge1(cand, ref);
      rl_sum += rouge_l(cand, ref);
      ++rep.text_samples;
    }
  }

  if (rep.mask_queries > 0) {
    dice_sum /= static_cast<double>(rep.mask_queries);
    l1_sum /= static_cast<double>(rep.mask_queries);
  }
  rep.dice_mean = dice_sum;
  rep.l1_mean = l1_sum;
  rep.giou_mean = giou_n > 0 ? giou_sum / static_cast<double>(giou_n) : 0.0;
  rep.presence_precision = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp)
                                       : (fn == 0 ? 1.0 : 0.0);
  rep.presence_recall =
      tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 1.0;
  rep.presence_f1 = rep.presence_precision + rep.presence_recall > 0
                        ? 2.0 * rep.presence_precision * rep.presence_recall /
                              (rep.presence_precision + rep.presence_recall)
                        : 0.0;
  if (rep.text_samples > 0) {
    rep.bleu1 = bleu_sum / static_cast<double>(rep.text_samples);
    rep.rouge1 = r1_sum / static_cast<double>(rep.text_samples);
    rep.rouge_l = rl_sum / static_cast<double>(rep.text_samples);
  }
  return rep;
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["dice_mean"] = dice_mean;
  j["l1_mean"] = l1_mean;
  j["giou_mean"] = giou_mean;
  j["presence_precision"] = presence_precision;
  j["presence_recall"] = presence_recall;
  j["presence_f1"] = presence_f1;
  j["bleu1"] = bleu1;
  j["rouge1"] = rouge1;
  j["rouge_l"] = rouge_l;
  j["mask_queries"] = mask_queries;
  j["box_queries"] = box_queries;
  j["text_samples"] = text_samples;
  return j.dump();
}

}  // namespace medvg
