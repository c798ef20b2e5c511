// Command-line entry point: verification suites, stage training, evaluation,
// the synthesis pipeline, and a one-shot demo.
//
// Exit codes: 0 success, 1 verification failure, 2 config error, 3 I/O error,
// 4 backend error.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "medvg/checkpoint.hpp"
#include "medvg/corpus.hpp"
#include "medvg/evaluate.hpp"
#include "medvg/matching.hpp"
#include "medvg/patching.hpp"
#include "medvg/pipeline.hpp"
#include "medvg/stages.hpp"
#include "medvg/trainer.hpp"

using namespace medvg;

namespace {

constexpr std::uint64_t kDefaultSeed = 20240901;

struct RunConfig {
  ModelConfig model;
  CorpusSpec corpus;
  StageConfig stage;
  std::string taxonomy_path = "data/taxonomy.txt";
  std::string templates_dir = "data/templates";
  std::string reports_path;  // input corpus for synthesize
};

RunConfig load_config(const std::string& path) {
  RunConfig rc;
  if (path.empty()) return rc;
  std::ifstream f(path);
  if (!f) throw IoError("config file not found: " + path);
  nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config file is not valid JSON: " + path);
  if (j.value("version", 1) != 1) throw ConfigError("unsupported config version");
  if (j.contains("model")) {
    const auto& m = j["model"];
    auto get = [&](const char* k, auto& field) {
      if (m.contains(k)) field = m[k].get<std::decay_t<decltype(field)>>();
    };
    get("embed_dim", rc.model.embed_dim);
    get("num_enc_layers", rc.model.num_enc_layers);
    get("num_lang_layers", rc.model.num_lang_layers);
    get("num_heads", rc.model.num_heads);
    get("m", rc.model.m);
    get("t_d", rc.model.t_d);
    get("base_patch_depth", rc.model.base_patch_depth);
    get("patch_hw", rc.model.patch_hw);
    get("feature_pool_factor", rc.model.feature_pool_factor);
    get("mask_channels", rc.model.mask_channels);
    get("lora_rank", rc.model.lora_rank);
    get("lora_alpha", rc.model.lora_alpha);
    get("lora_enabled", rc.model.lora_enabled);
    get("freeze_base", rc.model.freeze_base);
    get("max_seq_len", rc.model.max_seq_len);
  }
  if (j.contains("corpus")) {
    const auto& c = j["corpus"];
    rc.corpus.count = c.value("count", rc.corpus.count);
    rc.corpus.height = c.value("height", rc.corpus.height);
    rc.corpus.width = c.value("width", rc.corpus.width);
    rc.corpus.volume_fraction = c.value("volume_fraction", rc.corpus.volume_fraction);
    rc.corpus.max_abnormalities = c.value("max_abnormalities", rc.corpus.max_abnormalities);
    if (c.contains("volume_depths"))
      rc.corpus.volume_depths = c["volume_depths"].get<std::vector<std::int64_t>>();
  }
  if (j.contains("stage")) {
    const auto& s = j["stage"];
    rc.stage.steps = s.value("steps", rc.stage.steps);
    rc.stage.batch_size = s.value("batch_size", rc.stage.batch_size);
    rc.stage.peak_lr = s.value("peak_lr", rc.stage.peak_lr);
    rc.stage.warmup_steps = s.value("warmup_steps", rc.stage.warmup_steps);
    rc.stage.grounding_loss_weight =
        s.value("grounding_loss_weight", rc.stage.grounding_loss_weight);
    rc.stage.weight_decay = s.value("weight_decay", rc.stage.weight_decay);
    if (s.contains("rates")) {
      rc.stage.rates.modality = s["rates"].value("modality", rc.stage.rates.modality);
      rc.stage.rates.plane = s["rates"].value("plane", rc.stage.rates.plane);
      rc.stage.rates.abnormality = s["rates"].value("abnormality", rc.stage.rates.abnormality);
    }
  }
  rc.taxonomy_path = j.value("taxonomy", rc.taxonomy_path);
  rc.templates_dir = j.value("templates", rc.templates_dir);
  rc.reports_path = j.value("reports", rc.reports_path);
  return rc;
}

// --- verify ------------------------------------------------------------------

double brute_force_min(const std::vector<std::vector<double>>& cost) {
  std::size_t n = cost.size();
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  double best = 1e300;
  do {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += cost[i][perm[i]];
    if (total < best) best = total;
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

bool verify_matching() {
  Rng rng = Rng(kDefaultSeed).substream("verify-matching");
  for (int trial = 0; trial < 200; ++trial) {
    std::size_t n = 2 + rng.uniform_int(5);
    std::vector<std::vector<double>> cost(n, std::vector<double>(n));
    for (auto& row : cost)
      for (double& v : row) v = rng.uniform(-4.0, 4.0);
    Assignment a = hungarian(cost);
    double ordered = 0.0;
    for (std::size_t i = 0; i < n; ++i) ordered += cost[i][static_cast<std::size_t>(a.perm[i])];
    if (ordered != brute_force_min(cost)) return false;
  }
  return true;
}

bool verify_gradients() {
  {  // quadratic toy: exact up to the finite-difference step squared
    Graph g;
    Tensor x0 = Tensor::from({3}, {0.4, -1.2, 2.0});
    Var x = g.leaf(x0);
    Var loss = g.sum(g.mul(x, x));
    g.backward(loss);
    for (std::int64_t i = 0; i < 3; ++i) {
      double h = 1e-5;
      Tensor xp = x0, xm = x0;
      xp.at(i) += h;
      xm.at(i) -= h;
      auto eval = [&](const Tensor& t) {
        Graph g2;
        Var v = g2.leaf(t);
        return g2.value(g2.sum(g2.mul(v, v))).item();
      };
      double fd = (eval(xp) - eval(xm)) / (2 * h);
      double an = g.grad(x).at(i);
      if (std::fabs(an - fd) / std::max(1.0, std::fabs(an)) > 1e-9) return false;
    }
  }
  // small end-to-end model check
  ModelConfig cfg;
  cfg.embed_dim = 16;
  cfg.num_enc_layers = 1;
  cfg.num_lang_layers = 1;
  cfg.num_heads = 2;
  cfg.m = 2;
  cfg.mask_channels = 4;
  cfg.vocab_size = 24;
  Model model(cfg, SpecialTokens{}, 11);
  Rng rng(5);
  Tensor img = Tensor::randn({4, 16, 16}, rng, 1.0);
  VoxelMask target = VoxelMask::zeros(4, 16, 16);
  target.at(1, 4, 5) = 1;
  target.at(2, 5, 6) = 1;
  std::vector<TokenId> toks = {2, 7, 9, 1};
  auto loss_fn = [&](Graph& g, const LeafMap& lm) {
    auto enc = model.encode_image(g, img, model.patch_spec_for(4), lm);
    auto out = model.forward_vlm(g, &enc, toks, lm);
    Var pe = g.slice_rows(out.hidden, g.value(out.hidden).shape[0] - 1, 1);
    auto loc = model.decode_localization(g, enc, pe, lm);
    Var ml = graph_mask_loss(g, loc.mask_logits, target, FocalParams{});
    std::vector<std::int64_t> tg = {7, 9, 1, 5};
    Var ce = g.cross_entropy(out.text_logits, tg, {1, 1, 1, 1});
    return g.add(ce, ml);
  };
  GradCheckResult res = gradient_check(model, loss_fn, 1, 1e-5, 3);
  return res.max_rel_err < 1e-3;
}

bool verify_patch_lattice() {
  struct Case {
    std::int64_t td, pd;
  };
  for (Case c : {Case{4, 8}, Case{8, 16}, Case{8, 32}}) {
    for (std::int64_t depth = 1; depth <= 4 * c.td * c.pd; ++depth) {
      // independent branch-by-branch evaluation
      std::int64_t expected;
      if (depth <= c.td) {
        expected = 1;
      } else if (depth <= c.td * c.pd) {
        double e = std::log2(static_cast<double>(depth) / static_cast<double>(c.td));
        expected = std::int64_t{1} << static_cast<std::int64_t>(std::floor(e + 0.5));
      } else {
        expected = c.pd;
      }
      if (effective_patch_size(depth, c.td, c.pd) != expected) return false;
    }
  }
  return true;
}

bool verify_round_trips() {
  Taxonomy tax = Taxonomy::parse("anatomy|heart|\nabnormality|opacity|opacities");
  Tokenizer tok = Tokenizer::build(corpus_vocabulary(tax));
  Rng rng = Rng(kDefaultSeed).substream("verify-roundtrip");
  for (int trial = 0; trial < 100; ++trial) {
    std::int64_t n = 4 + static_cast<std::int64_t>(rng.uniform_int(20));
    std::vector<TokenId> text;
    for (std::int64_t i = 0; i < n; ++i)
      text.push_back(5 + static_cast<TokenId>(rng.uniform_int(
                             static_cast<std::uint64_t>(tok.vocab_size() - 5))));
    std::vector<SpanRange> spans;
    std::int64_t pos = 0;
    while (pos + 1 < n) {
      if (rng.bernoulli(0.4)) {
        std::int64_t len = 1 + static_cast<std::int64_t>(rng.uniform_int(3));
        len = std::min(len, n - pos);
        spans.push_back(SpanRange{pos, pos + len});
        pos += len;
      }
      ++pos;
    }
    auto rendered = render_grounded(text, spans, tok.specials());
    auto parsed = parse_response(rendered, tok);
    if (parsed.spans.size() != spans.size()) return false;
    if (strip_tags(rendered, tok.specials()) != text) return false;
  }
  // RLE round trip
  for (int trial = 0; trial < 20; ++trial) {
    VoxelMask m = VoxelMask::zeros(4, 8, 8);
    for (auto& v : m.data) v = rng.bernoulli(0.3) ? 1 : 0;
    VoxelMask back = rle_decode(m.shape, rle_encode(m));
    if (back.data != m.data) return false;
  }
  return true;
}

int cmd_verify() {
  struct Suite {
    const char* name;
    bool (*fn)();
  };
  const Suite suites[] = {
      {"hungarian-brute-force", verify_matching},
      {"gradient-checks", verify_gradients},
      {"patch-formula-lattice", verify_patch_lattice},
      {"round-trips", verify_round_trips},
  };
  bool all_ok = true;
  for (const auto& s : suites) {
    bool ok = s.fn();
    std::printf("%-24s %s\n", s.name, ok ? "ok" : "FAIL");
    all_ok = all_ok && ok;
  }
  return all_ok ? 0 : 1;
}

// --- train / eval ------------------------------------------------------------

std::string ckpt_path(const std::string& out, int stage) {
  return out + "/checkpoint-stage" + std::to_string(stage) + ".bin";
}

int cmd_train(const RunConfig& rc_in, int stage, std::uint64_t seed, const std::string& out) {
  RunConfig rc = rc_in;
  rc.stage.stage = stage;
  rc.stage.seed = seed;
  std::filesystem::create_directories(out);
  Taxonomy taxonomy = Taxonomy::load(rc.taxonomy_path);
  Tokenizer tokenizer = Tokenizer::build(corpus_vocabulary(taxonomy));
  std::vector<SyntheticSample> corpus = make_corpus(rc.corpus, seed, taxonomy);

  Model model = [&] {
    std::string prev = ckpt_path(out, stage - 1);
    if (stage > 1 && std::filesystem::exists(prev)) {
      std::printf("continuing from %s\n", prev.c_str());
      return load_checkpoint(prev).model;
    }
    ModelConfig mc = rc.model;
    mc.vocab_size = tokenizer.vocab_size();
    return Model(mc, tokenizer.specials(), seed);
  }();

  std::vector<TrainingInstance> instances;
  if (stage == 1) {
    instances = build_stage1(corpus, tokenizer, taxonomy, seed);
  } else if (stage == 2) {
    instances = build_stage2(corpus, tokenizer, rc.stage.rates, seed);
  } else {
    PromptTemplates templates = PromptTemplates::load(rc.templates_dir);
    MockBackend backend(&taxonomy);
    OracleLocalizer localizer(corpus);
    PipelineStats stats;
    instances = build_stage3(corpus, tokenizer, taxonomy, templates, backend, localizer, stats);
  }
  if (instances.empty()) throw InputError("train: no training instances built");

  std::vector<StepLog> logs = train_stage(model, instances, rc.stage);
  write_metrics_log(out + "/metrics-stage" + std::to_string(stage) + ".jsonl", logs);
  save_checkpoint(ckpt_path(out, stage), model, tokenizer);
  std::printf("stage %d: %zu instances, final loss %.6f\n", stage, instances.size(),
              logs.back().loss);
  return 0;
}

int cmd_eval(const RunConfig& rc, std::uint64_t seed, const std::string& out) {
  std::string path;
  for (int stage = 3; stage >= 1; --stage) {
    std::string p = ckpt_path(out, stage);
    if (std::filesystem::exists(p)) {
      path = p;
      break;
    }
  }
  if (path.empty()) throw IoError("eval: no checkpoint found under " + out);
  LoadedCheckpoint ckpt = load_checkpoint(path);
  Taxonomy taxonomy = Taxonomy::load(rc.taxonomy_path);
  std::vector<SyntheticSample> corpus = make_corpus(rc.corpus, seed, taxonomy);
  EvalReport rep = evaluate(ckpt.model, ckpt.tokenizer, corpus);
  std::ofstream f(out + "/eval-report.json", std::ios::trunc);
  if (!f) throw IoError("eval: cannot write report");
  f << rep.to_json() << '\n';
  std::printf("%s\n", rep.to_json().c_str());
  return 0;
}

// --- synthesize / demo -------------------------------------------------------

int cmd_synthesize(const RunConfig& rc, std::uint64_t seed, const std::string& backend_name,
                   const std::string& out, int jobs) {
  if (rc.reports_path.empty())
    throw ConfigError("synthesize: config must set the 'reports' input path");
  std::filesystem::create_directories(out);
  Taxonomy taxonomy = Taxonomy::load(rc.taxonomy_path);
  PromptTemplates templates = PromptTemplates::load(rc.templates_dir);
  std::vector<Report> reports = read_reports_jsonl(rc.reports_path);
  std::vector<SyntheticSample> scenes = make_corpus(rc.corpus, seed, taxonomy);
  OracleLocalizer localizer(scenes);

  auto make_backend = [&]() -> std::unique_ptr<AnnotatorBackend> {
    if (backend_name == "mock") return std::make_unique<MockBackend>(&taxonomy);
    if (backend_name == "http") return std::make_unique<HttpBackend>();
    throw ConfigError("synthesize: unknown backend " + backend_name);
  };

  std::vector<std::optional<GroundedSample>> results(reports.size());
  std::vector<PipelineStats> stats_per(reports.size());
  jobs = std::max(1, jobs);
  std::vector<std::thread> workers;
  std::atomic<std::size_t> next{0};
  std::atomic<bool> transport_failed{false};
  for (int w = 0; w < jobs; ++w) {
    workers.emplace_back([&] {
      auto backend = make_backend();
      for (;;) {
        std::size_t i = next.fetch_add(1);
        if (i >= reports.size() || transport_failed.load()) break;
        try {
          results[i] = process_report(reports[i], taxonomy, templates, *backend, localizer,
                                      stats_per[i]);
        } catch (const TransportError&) {
          transport_failed.store(true);
        }
      }
    });
  }
  for (auto& t : workers) t.join();
  if (transport_failed.load()) throw TransportError("synthesize: backend transport failure");

  PipelineStats stats;  // commutative counters: order-independent merge
  for (const auto& s : stats_per) {
    stats.samples += s.samples;
    stats.tags += s.tags;
    stats.masks += s.masks;
    stats.boxes += s.boxes;
    stats.box_instances += s.box_instances;
    stats.dropped += s.dropped;
    stats.retries += s.retries;
    stats.backend_calls += s.backend_calls;
    stats.clean_calls_skipped += s.clean_calls_skipped;
  }
  std::vector<GroundedSample> samples;
  for (auto& r : results)
    if (r) samples.push_back(std::move(*r));
  write_grounded_jsonl(out + "/grounded.jsonl", samples);
  std::ofstream f(out + "/stats.json", std::ios::trunc);
  if (!f) throw IoError("synthesize: cannot write stats");
  f << stats_to_json(stats) << '\n';
  std::printf("%s\n", stats_to_json(stats).c_str());
  return 0;
}

int cmd_demo(const RunConfig& rc_in, std::uint64_t seed, const std::string& out) {
  RunConfig rc = rc_in;
  rc.corpus.count = 1;
  std::filesystem::create_directories(out);
  Taxonomy taxonomy = Taxonomy::load(rc.taxonomy_path);
  PromptTemplates templates = PromptTemplates::load(rc.templates_dir);
  std::vector<SyntheticSample> scenes = make_corpus(rc.corpus, seed, taxonomy);
  OracleLocalizer localizer(scenes);
  MockBackend backend(&taxonomy);
  PipelineStats stats;
  auto sample = process_report(scenes[0].report, taxonomy, templates, backend, localizer, stats);
  if (!sample) throw InputError("demo: sample was dropped by the pipeline");
  std::ofstream f(out + "/demo.json", std::ios::trunc);
  if (!f) throw IoError("demo: cannot write output");
  f << grounded_to_json(*sample) << '\n';
  std::printf("%s\n", grounded_to_json(*sample).c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"grounded medical vision-language toolkit"};
  app.require_subcommand(1);

  std::string config_path, out = "out", backend = "mock";
  std::uint64_t seed = kDefaultSeed;
  int stage = 1, jobs = 1;
  bool debug_prompts = false;
  app.add_option("--config", config_path, "run configuration file (JSON)");
  app.add_option("--seed", seed, "root seed for all substreams");
  app.add_option("--out", out, "output directory");
  app.add_flag("--debug-prompts", debug_prompts, "log backend request/response bodies");

  app.fallthrough();  // accept the global flags after the subcommand too

  CLI::App* verify = app.add_subcommand("verify", "run the oracle suites");
  CLI::App* train = app.add_subcommand("train", "train one stage and write a checkpoint");
  train->add_option("--stage", stage, "training stage (1-3)")->check(CLI::Range(1, 3));
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate the latest checkpoint");
  CLI::App* synthesize = app.add_subcommand("synthesize", "run the grounding pipeline");
  synthesize->add_option("--backend", backend, "annotator backend: mock or http");
  synthesize->add_option("--jobs", jobs, "parallel report workers")->check(CLI::Range(1, 64));
  CLI::App* demo = app.add_subcommand("demo", "one grounded report on a synthetic image");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (debug_prompts) setenv("MEDVG_DEBUG_PROMPTS", "1", 1);
    RunConfig rc = load_config(config_path);
    if (verify->parsed()) return cmd_verify();
    if (train->parsed()) return cmd_train(rc, stage, seed, out);
    if (eval_cmd->parsed()) return cmd_eval(rc, seed, out);
    if (synthesize->parsed()) return cmd_synthesize(rc, seed, backend, out, jobs);
    if (demo->parsed()) return cmd_demo(rc, seed, out);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const IoError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return 3;
  } catch (const TransportError& e) {
    std::fprintf(stderr, "backend error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
