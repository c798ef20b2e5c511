#pragma once
// Self-describing checkpoint container: a JSON header (format version, model
// config, special-token id map, vocabulary, parameter index) followed by the
// named parameter arrays as little-endian IEEE-754 doubles.

#include <string>

#include "medvg/grounding.hpp"
#include "medvg/model.hpp"

namespace medvg {

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const Model& model, const Tokenizer& tokenizer);

struct LoadedCheckpoint {
  Model model;
  Tokenizer tokenizer;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace medvg
