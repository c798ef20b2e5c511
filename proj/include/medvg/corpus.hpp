#pragma once
// Seeded synthetic scenes: geometric anatomy-like shapes and abnormality
// blobs with exact ground-truth geometry, templated reports over a closed
// vocabulary, and the oracle localizer backed by the generator's truth.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "medvg/pipeline.hpp"
#include "medvg/rng.hpp"
#include "medvg/tensor.hpp"

namespace medvg {

struct SceneObject {
  std::string target;  // canonical taxonomy name
  TargetKind kind = TargetKind::anatomy;
  VoxelMask mask;           // exact voxel mask in the image grid
  std::vector<Box> boxes;   // one normalized box per blob instance
};

struct SyntheticSample {
  std::string image_ref;
  Tensor image;  // [D,H,W]
  std::string modality;  // "radiograph" or "computed tomography"
  std::string plane;     // "frontal" / "axial" / ...
  std::int64_t depth = 1;
  std::vector<SceneObject> objects;
  Report report;  // templated Findings/Impression text
};

struct CorpusSpec {
  std::int64_t count = 32;
  std::int64_t height = 16;
  std::int64_t width = 16;
  std::vector<std::int64_t> volume_depths = {4, 8, 16};
  double volume_fraction = 0.5;  // fraction of 3D samples (D > 1)
  std::int64_t max_abnormalities = 4;
};

std::vector<SyntheticSample> make_corpus(const CorpusSpec& spec, std::uint64_t seed,
                                         const Taxonomy& taxonomy);

// Answers segment/detect queries from the generator's stored ground truth.
class OracleLocalizer : public Localizer {
 public:
  explicit OracleLocalizer(const std::vector<SyntheticSample>& corpus);
  bool segment(const std::string& image_ref, const std::string& target,
               VoxelMask& out) override;
  bool detect(const std::string& image_ref, const std::string& target,
              std::vector<Box>& out) override;

 private:
  const SceneObject* find(const std::string& image_ref, const std::string& target) const;
  std::map<std::string, const SyntheticSample*> by_ref_;
};

// The closed word list for the synthetic-report vocabulary (taxonomy names
// plus template words); used to build the tokenizer.
std::vector<std::string> corpus_vocabulary(const Taxonomy& taxonomy);

}  // namespace medvg
