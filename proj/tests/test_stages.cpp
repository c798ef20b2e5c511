// Stage construction invariants, task-mix frequencies, loss additivity,
// schedule shape, freeze behavior, and training determinism.

#include <doctest.h>

#include <cmath>

#include "medvg/corpus.hpp"
#include "medvg/stages.hpp"
#include "medvg/trainer.hpp"

using namespace medvg;

namespace {

const char* kTaxonomyPath = MEDVG_SOURCE_DIR "/data/taxonomy.txt";
const char* kTemplatesDir = MEDVG_SOURCE_DIR "/data/templates";

struct World {
  Taxonomy taxonomy = Taxonomy::load(kTaxonomyPath);
  Tokenizer tokenizer = Tokenizer::build(corpus_vocabulary(taxonomy));
  std::vector<SyntheticSample> corpus;
  World(std::int64_t count = 8, std::uint64_t seed = 2024) {
    CorpusSpec spec;
    spec.count = count;
    corpus = make_corpus(spec, seed, taxonomy);
  }
};

ModelConfig tiny_config(const Tokenizer& tok) {
  ModelConfig cfg;
  cfg.embed_dim = 16;
  cfg.num_enc_layers = 1;
  cfg.num_lang_layers = 1;
  cfg.num_heads = 2;
  cfg.m = 3;
  cfg.mask_channels = 4;
  cfg.vocab_size = tok.vocab_size();
  return cfg;
}

std::int64_t count_brackets(const TrainingInstance& inst, const SpecialTokens& st) {
  std::int64_t n = 0;
  for (const auto& turn : inst.turns) {
    for (TokenId id : turn.instruction)
      if (id == st.open_p || id == st.close_p) ++n;
    for (TokenId id : turn.response)
      if (id == st.open_p || id == st.close_p) ++n;
  }
  return n;
}

std::int64_t count_spans(const TrainingInstance& inst, const Tokenizer& tok) {
  std::int64_t n = 0;
  for (const auto& turn : inst.turns)
    n += static_cast<std::int64_t>(parse_response(turn.response, tok).spans.size());
  return n;
}

}  // namespace

TEST_CASE("corpus generation is deterministic and mixes 2d/3d") {
  World w;
  CorpusSpec spec;
  spec.count = 200;
  auto a = make_corpus(spec, 31337, w.taxonomy);
  auto b = make_corpus(spec, 31337, w.taxonomy);
  REQUIRE(a.size() == b.size());
  std::int64_t volumes = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].image.data == b[i].image.data);
    CHECK(a[i].report.findings == b[i].report.findings);
    if (a[i].depth > 1) ++volumes;
    // every object's boxes contain its mask voxels (abnormalities)
    for (const auto& obj : a[i].objects) {
      if (obj.kind != TargetKind::abnormality) continue;
      for (std::int64_t z = 0; z < obj.mask.shape[0]; ++z)
        for (std::int64_t y = 0; y < obj.mask.shape[1]; ++y)
          for (std::int64_t x = 0; x < obj.mask.shape[2]; ++x) {
            if (!obj.mask.at(z, y, x)) continue;
            double cz = (static_cast<double>(z) + 0.5) / static_cast<double>(obj.mask.shape[0]);
            double cy = (static_cast<double>(y) + 0.5) / static_cast<double>(obj.mask.shape[1]);
            double cx = (static_cast<double>(x) + 0.5) / static_cast<double>(obj.mask.shape[2]);
            bool inside = false;
            for (const auto& box : obj.boxes) {
              Box b3 = box.as_rank3();
              if (cz >= b3.mn[0] && cz <= b3.mx[0] && cy >= b3.mn[1] && cy <= b3.mx[1] &&
                  cx >= b3.mn[2] && cx <= b3.mx[2])
                inside = true;
            }
            CHECK(inside);
          }
    }
  }
  double frac = static_cast<double>(volumes) / static_cast<double>(a.size());
  CHECK(std::fabs(frac - 0.5) <= 0.1);  // requested volume fraction 0.5
}

TEST_CASE("stage-1 instances pair every bracketed phrase with geometry") {
  World w;
  auto instances = build_stage1(w.corpus, w.tokenizer, w.taxonomy, 99);
  REQUIRE(!instances.empty());
  const SpecialTokens& st = w.tokenizer.specials();
  for (const auto& inst : instances) {
    CHECK(inst.grounding);
    REQUIRE(!inst.turns.empty());
    CHECK(inst.turns[0].instruction.front() == st.grd);
    CHECK(inst.turns[0].response.back() == w.tokenizer.id_of(kEndOfResponse));
    // bijective phrase <-> geometry map
    CHECK(count_spans(inst, w.tokenizer) ==
          static_cast<std::int64_t>(inst.groundings.size()));
    for (const auto& g : inst.groundings)
      CHECK(g.kind != AnnotationGeometry::Kind::none);
  }
}

TEST_CASE("stage-2 instances contain no grounding tokens and merge turns") {
  World w;
  auto instances = build_stage2(w.corpus, w.tokenizer, TaskMixRates{}, 99);
  REQUIRE(instances.size() == w.corpus.size());
  const SpecialTokens& st = w.tokenizer.specials();
  for (const auto& inst : instances) {
    CHECK(!inst.grounding);
    CHECK(inst.groundings.empty());
    CHECK(count_brackets(inst, st) == 0);
    REQUIRE(!inst.turns.empty());
    for (const auto& turn : inst.turns) CHECK(turn.instruction.front() == st.ngrd);
    // the report turn is always present with both section headers
    std::string last = w.tokenizer.decode(inst.turns.back().response);
    CHECK(last.find("Findings:") != std::string::npos);
    CHECK(last.find("Impression:") != std::string::npos);
  }
}

TEST_CASE("stage-2 task mix converges to the configured rates") {
  World w(1, 5);
  CorpusSpec spec;
  spec.count = 2000;  // large-sample frequency check
  auto corpus = make_corpus(spec, 5, w.taxonomy);
  TaskMixRates rates;  // 0.5 / 0.2 / 0.2
  auto instances = build_stage2(corpus, w.tokenizer, rates, 1234);
  std::int64_t modality = 0, plane = 0, abnormality = 0;
  for (const auto& inst : instances) {
    for (const auto& turn : inst.turns) {
      std::string q = w.tokenizer.decode(turn.instruction);
      if (q.find("What imaging modality") != std::string::npos) ++modality;
      if (q.find("What is the imaging plane") != std::string::npos) ++plane;
      if (q.find("Are there any abnormalities") != std::string::npos) ++abnormality;
    }
  }
  double n = static_cast<double>(instances.size());
  // ~3 sigma at n = 2000 for a bernoulli rate of 0.5; the draw is seeded
  CHECK(std::fabs(modality / n - rates.modality) <= 0.035);
  CHECK(std::fabs(plane / n - rates.plane) <= 0.035);
  CHECK(std::fabs(abnormality / n - rates.abnormality) <= 0.035);
}

TEST_CASE("stage-3 instances parse cleanly with geometry per span") {
  World w;
  PromptTemplates templates = PromptTemplates::load(kTemplatesDir);
  MockBackend backend(&w.taxonomy);
  OracleLocalizer localizer(w.corpus);
  PipelineStats stats;
  auto instances =
      build_stage3(w.corpus, w.tokenizer, w.taxonomy, templates, backend, localizer, stats);
  REQUIRE(!instances.empty());
  for (const auto& inst : instances) {
    CHECK(inst.grounding);
    CHECK(count_spans(inst, w.tokenizer) ==
          static_cast<std::int64_t>(inst.groundings.size()));
    for (const auto& g : inst.groundings)
      CHECK(g.kind != AnnotationGeometry::Kind::none);
  }
}

TEST_CASE("grounding weight zero reproduces the pure language loss") {
  World w(4);
  Model model(tiny_config(w.tokenizer), w.tokenizer.specials(), 3);
  auto instances = build_stage1(w.corpus, w.tokenizer, w.taxonomy, 55);
  REQUIRE(!instances.empty());
  for (std::size_t i = 0; i < std::min<std::size_t>(3, instances.size()); ++i) {
    Graph g1;
    LeafMap lm1 = model.make_leaves(g1);
    LossParts parts;
    Var off = build_instance_loss(g1, lm1, model, instances[i], 0.0, &parts);
    CHECK(std::fabs(g1.value(off).item() - parts.lang) <= 1e-12);

    Graph g2;
    LeafMap lm2 = model.make_leaves(g2);
    LossParts parts_on;
    Var on = build_instance_loss(g2, lm2, model, instances[i], 1.0, &parts_on);
    CHECK(std::fabs(parts_on.lang - parts.lang) <= 1e-12);
    CHECK(std::fabs(g2.value(on).item() - (parts_on.lang + parts_on.mask + parts_on.box)) <=
          1e-9);
    if (!instances[i].groundings.empty()) CHECK(parts_on.grounded_phrases > 0);
  }
}

TEST_CASE("learning-rate schedule: linear warmup into cosine decay") {
  World w(1);
  Model model(tiny_config(w.tokenizer), w.tokenizer.specials(), 3);
  StageConfig cfg;
  cfg.steps = 100;
  cfg.warmup_steps = 10;
  cfg.peak_lr = 1e-3;
  Trainer tr(model, cfg);
  CHECK(tr.lr_at(0) == doctest::Approx(1e-3 / 10.0));
  CHECK(tr.lr_at(9) == doctest::Approx(1e-3));
  // cosine decay starts at the warmup boundary and is strictly below peak after
  CHECK(tr.lr_at(10) == doctest::Approx(1e-3));
  CHECK(tr.lr_at(11) < 1e-3);
  CHECK(tr.lr_at(99) < tr.lr_at(50));
  CHECK(tr.lr_at(99) >= 0.0);
  for (int s = 1; s < 100; ++s) CHECK(tr.lr_at(s) <= 1e-3 + 1e-15);
}

TEST_CASE("training is deterministic in the seed") {
  World w(4);
  auto instances = build_stage1(w.corpus, w.tokenizer, w.taxonomy, 55);
  StageConfig cfg;
  cfg.stage = 1;
  cfg.steps = 4;
  cfg.warmup_steps = 1;
  cfg.batch_size = 2;
  cfg.seed = 77;
  auto run = [&] {
    Model model(tiny_config(w.tokenizer), w.tokenizer.specials(), 3);
    return train_stage(model, instances, cfg);
  };
  auto la = run(), lb = run();
  REQUIRE(la.size() == lb.size());
  for (std::size_t i = 0; i < la.size(); ++i) {
    CHECK(std::fabs(la[i].loss - lb[i].loss) <= 1e-9);
    CHECK(la[i].lr == lb[i].lr);
  }
  // losses and gradient norms are finite throughout
  for (const auto& log : la) {
    CHECK(std::isfinite(log.loss));
    CHECK(std::isfinite(log.grad_norm));
  }
}

TEST_CASE("batch order does not change the update") {
  World w(4);
  auto instances = build_stage1(w.corpus, w.tokenizer, w.taxonomy, 55);
  REQUIRE(instances.size() >= 2);
  StageConfig cfg;
  cfg.steps = 1;
  cfg.warmup_steps = 0;
  auto run = [&](bool swap) {
    Model model(tiny_config(w.tokenizer), w.tokenizer.specials(), 3);
    Trainer tr(model, cfg);
    std::vector<const TrainingInstance*> batch = {&instances[0], &instances[1]};
    if (swap) std::swap(batch[0], batch[1]);
    tr.step(batch);
    return model;
  };
  Model a = run(false), b = run(true);
  for (const auto& [name, p] : a.params().all()) {
    const Tensor& q = b.params().at(name).value;
    for (std::size_t i = 0; i < p.value.data.size(); ++i)
      CHECK(std::fabs(p.value.data[i] - q.data[i]) <= 1e-10);
  }
}

TEST_CASE("freezing the base leaves only adapters and heads trainable") {
  World w(1);
  ModelConfig cfg = tiny_config(w.tokenizer);
  cfg.lora_enabled = true;
  cfg.freeze_base = true;
  Model model(cfg, w.tokenizer.specials(), 3);
  apply_freeze(model);
  for (const auto& [name, p] : model.params().all()) {
    bool open = p.group == "lora" || p.group == "adapter" || p.group == "lang_head" ||
                p.group == "prompt_proj" || p.group == "mask_query" ||
                p.group == "instance_query" || p.group == "loc_decoder" ||
                p.group == "mask_head" || p.group == "box_head" || p.group == "presence_head";
    CHECK(p.trainable == open);
  }
  // a training step must not move frozen parameters
  auto instances = build_stage1(w.corpus, w.tokenizer, w.taxonomy, 55);
  REQUIRE(!instances.empty());
  std::map<std::string, Tensor> before;
  for (const auto& [name, p] : model.params().all()) before[name] = p.value;
  StageConfig scfg;
  scfg.steps = 1;
  scfg.warmup_steps = 0;
  Trainer tr(model, scfg);
  tr.step({&instances[0]});
  for (const auto& [name, p] : model.params().all()) {
    if (!p.trainable)
      CHECK(p.value.data == before[name].data);
  }
}
