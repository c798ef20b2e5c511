#include "medvg/corpus.hpp"

#include <algorithm>

#include "medvg/errors.hpp"
#include "medvg/grounding.hpp"

namespace medvg {

namespace {

struct Block {
  std::int64_t z0, z1, y0, y1, x0, x1;  // inclusive voxel bounds
};

void paint(Tensor& image, const Block& b, double value) {
  auto [d, h, w] = std::tuple(image.shape[0], image.shape[1], image.shape[2]);
  (void)d;
  for (std::int64_t z = b.z0; z <= b.z1; ++z)
    for (std::int64_t y = b.y0; y <= b.y1; ++y)
      for (std::int64_t x = b.x0; x <= b.x1; ++x)
        image.data[static_cast<std::size_t>((z * h + y) * w + x)] += value;
}

void fill_mask(VoxelMask& mask, const Block& b) {
  for (std::int64_t z = b.z0; z <= b.z1; ++z)
    for (std::int64_t y = b.y0; y <= b.y1; ++y)
      for (std::int64_t x = b.x0; x <= b.x1; ++x) mask.at(z, y, x) = 1;
}

Box block_box(const Block& b, std::int64_t d, std::int64_t h, std::int64_t w) {
  double z0 = static_cast<double>(b.z0) / static_cast<double>(d);
  double z1 = static_cast<double>(b.z1 + 1) / static_cast<double>(d);
  double y0 = static_cast<double>(b.y0) / static_cast<double>(h);
  double y1 = static_cast<double>(b.y1 + 1) / static_cast<double>(h);
  double x0 = static_cast<double>(b.x0) / static_cast<double>(w);
  double x1 = static_cast<double>(b.x1 + 1) / static_cast<double>(w);
  if (d == 1) return Box::make2d(y0, x0, y1, x1);
  return Box::make3d(z0, y0, x0, z1, y1, x1);
}

std::int64_t rint(Rng& rng, std::int64_t lo, std::int64_t hi) {  // inclusive
  return lo + static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(hi - lo + 1)));
}

// anatomy region templates on the unit grid, jittered per scene
struct AnatomyTemplate {
  const char* name;
  double y0, y1, x0, x1;
};
const AnatomyTemplate kAnatomy[] = {
    {"right lung", 0.10, 0.90, 0.05, 0.45},
    {"left lung", 0.10, 0.90, 0.55, 0.95},
    {"heart", 0.40, 0.80, 0.35, 0.70},
};

const char* const kAbnormalities[] = {"opacity",       "nodule", "pleural effusion",
                                      "atelectasis",   "mass",   "consolidation"};
const char* const kMentionOnly[] = {"granuloma", "fibrosis"};

}  // namespace

std::vector<SyntheticSample> make_corpus(const CorpusSpec& spec, std::uint64_t seed,
                                         const Taxonomy& taxonomy) {
  if (spec.count < 1 || spec.height < 8 || spec.width < 8)
    throw ConfigError("make_corpus: spec sizes too small");
  for (const char* name : kAbnormalities)
    if (taxonomy.find(name) == nullptr)
      throw ConfigError(std::string("make_corpus: taxonomy lacks target ") + name);

  Rng base = Rng(seed).substream("corpus");
  std::vector<SyntheticSample> corpus;
  corpus.reserve(static_cast<std::size_t>(spec.count));
  for (std::int64_t i = 0; i < spec.count; ++i) {
    Rng rng = base.substream("sample-" + std::to_string(i));
    SyntheticSample s;
    s.image_ref = "synthetic-" + std::to_string(i);
    bool volume = rng.bernoulli(spec.volume_fraction) && !spec.volume_depths.empty();
    s.depth = volume ? spec.volume_depths[static_cast<std::size_t>(
                           rng.uniform_int(spec.volume_depths.size()))]
                     : 1;
    s.modality = volume ? "computed tomography" : "radiograph";
    static const char* planes3d[] = {"axial", "coronal", "sagittal"};
    s.plane = volume ? planes3d[rng.uniform_int(3)] : "frontal";
    const std::int64_t d = s.depth, h = spec.height, w = spec.width;
    s.image = Tensor::zeros({d, h, w});

    // anatomy shapes
    std::int64_t n_anat = rint(rng, 2, 3);
    for (std::int64_t a = 0; a < n_anat; ++a) {
      const AnatomyTemplate& t = kAnatomy[a];
      Block b;
      b.y0 = std::clamp<std::int64_t>(
          static_cast<std::int64_t>(t.y0 * static_cast<double>(h)) + rint(rng, -1, 1), 0, h - 2);
      b.y1 = std::clamp<std::int64_t>(
          static_cast<std::int64_t>(t.y1 * static_cast<double>(h)) + rint(rng, -1, 1), b.y0 + 1,
          h - 1);
      b.x0 = std::clamp<std::int64_t>(
          static_cast<std::int64_t>(t.x0 * static_cast<double>(w)) + rint(rng, -1, 1), 0, w - 2);
      b.x1 = std::clamp<std::int64_t>(
          static_cast<std::int64_t>(t.x1 * static_cast<double>(w)) + rint(rng, -1, 1), b.x0 + 1,
          w - 1);
      b.z0 = 0;
      b.z1 = d - 1;
      if (d > 2) {
        b.z0 = rint(rng, 0, 1);
        b.z1 = d - 1 - rint(rng, 0, 1);
      }
      SceneObject obj;
      obj.target = t.name;
      obj.kind = TargetKind::anatomy;
      obj.mask = VoxelMask::zeros(d, h, w);
      fill_mask(obj.mask, b);
      paint(s.image, b, 0.3);
      s.objects.push_back(std::move(obj));
    }

    // abnormality blobs
    std::int64_t n_abn = rint(rng, 0, spec.max_abnormalities);
    std::vector<std::string> pool(std::begin(kAbnormalities), std::end(kAbnormalities));
    for (std::int64_t a = 0; a < n_abn && !pool.empty(); ++a) {
      std::size_t pick = rng.uniform_int(pool.size());
      SceneObject obj;
      obj.target = pool[pick];
      pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
      obj.kind = TargetKind::abnormality;
      obj.mask = VoxelMask::zeros(d, h, w);
      std::int64_t blobs = rng.bernoulli(0.25) ? 2 : 1;
      for (std::int64_t bi = 0; bi < blobs; ++bi) {
        Block b;
        std::int64_t ey = rint(rng, 2, 4), ex = rint(rng, 2, 4);
        std::int64_t ez = d == 1 ? 1 : rint(rng, 1, std::min<std::int64_t>(3, d));
        b.y0 = rint(rng, 0, h - ey);
        b.y1 = b.y0 + ey - 1;
        b.x0 = rint(rng, 0, w - ex);
        b.x1 = b.x0 + ex - 1;
        b.z0 = rint(rng, 0, d - ez);
        b.z1 = b.z0 + ez - 1;
        fill_mask(obj.mask, b);
        paint(s.image, b, 0.7);
        obj.boxes.push_back(block_box(b, d, h, w));
      }
      s.objects.push_back(std::move(obj));
    }

    // light acquisition noise
    for (double& v : s.image.data) v += rng.normal(0.0, 0.05);

    // templated report over the closed vocabulary
    std::string findings, impression;
    std::vector<std::string> present_abn;
    for (const auto& obj : s.objects) {
      if (obj.kind == TargetKind::anatomy) {
        findings += "The " + obj.target + " is clearly seen. ";
      } else {
        findings += obj.boxes.size() > 1 ? "There are multiple foci of " + obj.target + ". "
                                         : "There is " + obj.target + ". ";
        present_abn.push_back(obj.target);
      }
    }
    // a finding mentioned without localizer support (tag-only annotation)
    if (rng.bernoulli(0.15)) {
      const char* extra = kMentionOnly[rng.uniform_int(2)];
      findings += std::string("There is ") + extra + ". ";
      present_abn.push_back(extra);
    }
    // explicit negatives
    std::int64_t n_neg = rint(rng, 1, 2);
    for (std::int64_t k = 0; k < n_neg && !pool.empty(); ++k) {
      std::size_t pick = rng.uniform_int(pool.size());
      findings += "No " + pool[pick] + " is seen. ";
      pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
    }
    if (!findings.empty() && findings.back() == ' ') findings.pop_back();
    if (present_abn.empty()) {
      impression = "No acute abnormality.";
    } else {
      for (std::size_t k = 0; k < present_abn.size(); ++k)
        impression += "There is " + present_abn[k] + ". ";
      impression.pop_back();
    }
    s.report = Report{s.image_ref, findings, impression, d > 1};
    corpus.push_back(std::move(s));
  }
  return corpus;
}

OracleLocalizer::OracleLocalizer(const std::vector<SyntheticSample>& corpus) {
  for (const auto& s : corpus) by_ref_.emplace(s.image_ref, &s);
}

const SceneObject* OracleLocalizer::find(const std::string& image_ref,
                                         const std::string& target) const {
  auto it = by_ref_.find(image_ref);
  if (it == by_ref_.end()) return nullptr;
  for (const auto& obj : it->second->objects)
    if (obj.target == target) return &obj;
  return nullptr;
}

bool OracleLocalizer::segment(const std::string& image_ref, const std::string& target,
                              VoxelMask& out) {
  const SceneObject* obj = find(image_ref, target);
  if (obj == nullptr || obj->kind != TargetKind::anatomy) return false;
  out = obj->mask;
  return true;
}

bool OracleLocalizer::detect(const std::string& image_ref, const std::string& target,
                             std::vector<Box>& out) {
  const SceneObject* obj = find(image_ref, target);
  if (obj == nullptr || obj->kind != TargetKind::abnormality) return false;
  out = obj->boxes;
  return true;
}

std::vector<std::string> corpus_vocabulary(const Taxonomy& taxonomy) {
  std::vector<std::string> words;
  auto add = [&](const std::string& text) {
    for (const auto& piece : split_pieces(text))
      if (std::find(words.begin(), words.end(), piece) == words.end()) words.push_back(piece);
  };
  for (const auto& e : taxonomy.entries()) {
    add(e.canonical);
    for (const auto& s : e.synonyms) add(s);
  }
  // template literals used by reports, stage builders, and evaluation
  for (const char* text :
       {"The is clearly seen .", "There are multiple foci of", "There is", "No is seen",
        "No acute abnormality", "Findings :", "Impression :",
        "Locate the following targets , ?", "present absent",
        "What imaging modality is this ?", "This is a radiograph",
        "This is a computed tomography scan", "What is the imaging plane ?",
        "frontal axial coronal sagittal", "The imaging plane is",
        "Are there any abnormalities ?", "and", "Describe the image .",
        "This image shows", "Write a report for this image .", "</s>"})
    add(text);
  return words;
}

}  // namespace medvg
