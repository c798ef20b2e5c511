#include "medvg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace medvg {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are written as native little-endian doubles");

namespace {
constexpr char kMagic[8] = {'M', 'V', 'G', 'C', 'K', 'P', 'T', '\n'};

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"embed_dim", c.embed_dim},
          {"num_enc_layers", c.num_enc_layers},
          {"num_lang_layers", c.num_lang_layers},
          {"num_heads", c.num_heads},
          {"vocab_size", c.vocab_size},
          {"m", c.m},
          {"t_d", c.t_d},
          {"base_patch_depth", c.base_patch_depth},
          {"patch_hw", c.patch_hw},
          {"feature_pool_factor", c.feature_pool_factor},
          {"mask_channels", c.mask_channels},
          {"lora_rank", c.lora_rank},
          {"lora_alpha", c.lora_alpha},
          {"lora_enabled", c.lora_enabled},
          {"freeze_base", c.freeze_base},
          {"max_seq_len", c.max_seq_len}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.embed_dim = j.at("embed_dim");
  c.num_enc_layers = j.at("num_enc_layers");
  c.num_lang_layers = j.at("num_lang_layers");
  c.num_heads = j.at("num_heads");
  c.vocab_size = j.at("vocab_size");
  c.m = j.at("m");
  c.t_d = j.at("t_d");
  c.base_patch_depth = j.at("base_patch_depth");
  c.patch_hw = j.at("patch_hw");
  c.feature_pool_factor = j.at("feature_pool_factor");
  c.mask_channels = j.at("mask_channels");
  c.lora_rank = j.at("lora_rank");
  c.lora_alpha = j.at("lora_alpha");
  c.lora_enabled = j.at("lora_enabled");
  c.freeze_base = j.at("freeze_base");
  c.max_seq_len = j.at("max_seq_len");
  return c;
}
}  // namespace

void save_checkpoint(const std::string& path, const Model& model, const Tokenizer& tokenizer) {
  nlohmann::json header;
  header["version"] = kCheckpointVersion;
  header["config"] = config_to_json(model.config());
  const SpecialTokens& st = model.specials();
  header["specials"] = {{"open_p", st.open_p}, {"close_p", st.close_p}, {"grd", st.grd},
                        {"ngrd", st.ngrd}};
  header["vocab"] = tokenizer.vocab();

  nlohmann::json index = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, p] : model.params().all()) {
    index.push_back({{"name", name},
                     {"shape", p.value.shape},
                     {"group", p.group},
                     {"trainable", p.trainable},
                     {"offset", offset}});
    offset += static_cast<std::uint64_t>(p.value.numel()) * sizeof(double);
  }
  header["params"] = std::move(index);

  std::string hs = header.dump();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("save_checkpoint: cannot open " + path);
  f.write(kMagic, sizeof(kMagic));
  std::uint64_t hlen = hs.size();
  f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [name, p] : model.params().all()) {
    (void)name;
    f.write(reinterpret_cast<const char*>(p.value.data.data()),
            static_cast<std::streamsize>(p.value.data.size() * sizeof(double)));
  }
  if (!f) throw IoError("save_checkpoint: write failure on " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("load_checkpoint: cannot open " + path);
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw IoError("load_checkpoint: bad magic in " + path);
  std::uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string hs(hlen, '\0');
  f.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!f) throw IoError("load_checkpoint: truncated header in " + path);

  nlohmann::json header = nlohmann::json::parse(hs, nullptr, false);
  if (header.is_discarded()) throw IoError("load_checkpoint: malformed header JSON");
  if (header.at("version").get<std::uint32_t>() != kCheckpointVersion)
    throw IoError("load_checkpoint: unsupported checkpoint version");

  ModelConfig cfg = config_from_json(header.at("config"));
  SpecialTokens st;
  st.open_p = header.at("specials").at("open_p");
  st.close_p = header.at("specials").at("close_p");
  st.grd = header.at("specials").at("grd");
  st.ngrd = header.at("specials").at("ngrd");

  std::vector<std::string> vocab = header.at("vocab").get<std::vector<std::string>>();
  if (vocab.size() < 5) throw IoError("load_checkpoint: vocabulary missing specials");
  Tokenizer tok = Tokenizer::build({vocab.begin() + 5, vocab.end()});
  if (tok.vocab() != vocab) throw IoError("load_checkpoint: vocabulary not reconstructible");

  LoadedCheckpoint out{Model(cfg, st, 0), std::move(tok)};
  for (const auto& entry : header.at("params")) {
    std::string name = entry.at("name");
    if (!out.model.params().has(name))
      throw IoError("load_checkpoint: unexpected parameter " + name);
    Param& p = out.model.params().at(name);
    std::vector<std::int64_t> shape = entry.at("shape").get<std::vector<std::int64_t>>();
    if (shape != p.value.shape) throw IoError("load_checkpoint: shape mismatch for " + name);
    f.read(reinterpret_cast<char*>(p.value.data.data()),
           static_cast<std::streamsize>(p.value.data.size() * sizeof(double)));
    p.trainable = entry.at("trainable");
  }
  if (!f) throw IoError("load_checkpoint: truncated parameter data in " + path);
  return out;
}

}  // namespace medvg
