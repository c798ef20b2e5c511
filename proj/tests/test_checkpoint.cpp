// Checkpoint container round trip: parameters bytewise, tokenizer vocabulary,
// config, and corruption detection.

#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <string>

#include "medvg/checkpoint.hpp"

using namespace medvg;

namespace {

struct TempFile {
  std::string path;
  explicit TempFile(const char* name) : path(std::string("/tmp/medvg-test-") + name) {}
  ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("checkpoint round trip is exact") {
  ModelConfig cfg;
  cfg.embed_dim = 16;
  cfg.num_enc_layers = 1;
  cfg.num_lang_layers = 1;
  cfg.num_heads = 2;
  cfg.m = 2;
  cfg.mask_channels = 4;
  cfg.lora_enabled = true;
  Tokenizer tok = Tokenizer::build({"there", "is", "a", "lung", "heart", ".", "</s>"});
  cfg.vocab_size = tok.vocab_size();
  Model model(cfg, tok.specials(), 123);

  TempFile f("ckpt.bin");
  save_checkpoint(f.path, model, tok);
  LoadedCheckpoint loaded = load_checkpoint(f.path);

  CHECK(loaded.tokenizer.vocab() == tok.vocab());
  CHECK(loaded.model.config().embed_dim == cfg.embed_dim);
  CHECK(loaded.model.config().lora_enabled == cfg.lora_enabled);
  CHECK(loaded.model.config().vocab_size == cfg.vocab_size);

  std::size_t n = 0;
  for (const auto& [name, p] : model.params().all()) {
    REQUIRE(loaded.model.params().has(name));
    const Param& q = loaded.model.params().at(name);
    CHECK(q.value.shape == p.value.shape);
    CHECK(q.value.data == p.value.data);  // bytewise: doubles stored verbatim
    CHECK(q.group == p.group);
    ++n;
  }
  CHECK(loaded.model.params().all().size() == n);
}

TEST_CASE("save then save again is bytewise identical") {
  ModelConfig cfg;
  cfg.embed_dim = 16;
  cfg.num_enc_layers = 1;
  cfg.num_lang_layers = 1;
  cfg.num_heads = 2;
  cfg.m = 2;
  cfg.mask_channels = 4;
  Tokenizer tok = Tokenizer::build({"a", "b", "</s>"});
  cfg.vocab_size = tok.vocab_size();
  Model model(cfg, tok.specials(), 5);
  TempFile f1("ckpt1.bin"), f2("ckpt2.bin");
  save_checkpoint(f1.path, model, tok);
  save_checkpoint(f2.path, model, tok);
  std::ifstream a(f1.path, std::ios::binary), b(f2.path, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
  CHECK(sa == sb);
  CHECK(!sa.empty());
  CHECK(sa.substr(0, 8) == "MVGCKPT\n");
}

TEST_CASE("corrupted or missing files are rejected") {
  CHECK_THROWS(load_checkpoint("/tmp/medvg-test-does-not-exist.bin"));
  TempFile f("ckpt-bad.bin");
  std::ofstream(f.path, std::ios::binary) << "NOTACKPT and some garbage";
  CHECK_THROWS(load_checkpoint(f.path));
}
