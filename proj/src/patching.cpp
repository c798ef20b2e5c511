#include "medvg/patching.hpp"

#include <cmath>

#include "medvg/errors.hpp"
#include "medvg/kernels.hpp"

namespace medvg {

bool is_power_of_two(std::int64_t v) { return v > 0 && (v & (v - 1)) == 0; }

std::int64_t round_half_up_log(double x) {
  return static_cast<std::int64_t>(std::floor(x + 0.5));
}

void PatchSpec::validate() const {
  if (depth < 1) throw ConfigError("PatchSpec: depth must be >= 1");
  if (max_depth_tokens < 1) throw ConfigError("PatchSpec: max_depth_tokens must be >= 1");
  if (!is_power_of_two(base_patch)) throw ConfigError("PatchSpec: base_patch must be a power of two");
  if (!is_power_of_two(effective_patch) || effective_patch > base_patch ||
      base_patch % effective_patch != 0)
    throw ConfigError("PatchSpec: effective_patch must be a power of two dividing base_patch");
}

std::int64_t effective_patch_size(std::int64_t depth, std::int64_t max_depth_tokens,
                                  std::int64_t base_patch) {
  if (depth < 1 || max_depth_tokens < 1) throw ConfigError("effective_patch_size: bad arguments");
  if (!is_power_of_two(base_patch))
    throw ConfigError("effective_patch_size: base_patch must be a power of two");
  if (depth <= max_depth_tokens) return 1;
  if (depth > max_depth_tokens * base_patch) return base_patch;
  double x = std::log2(static_cast<double>(depth) / static_cast<double>(max_depth_tokens));
  return std::int64_t{1} << round_half_up_log(x);
}

std::int64_t sample_patch_size(std::int64_t depth, std::int64_t max_depth_tokens,
                               std::int64_t base_patch, Rng& rng) {
  if (depth < 1 || max_depth_tokens < 1) throw ConfigError("sample_patch_size: bad arguments");
  if (!is_power_of_two(base_patch))
    throw ConfigError("sample_patch_size: base_patch must be a power of two");
  double mean = std::log2(static_cast<double>(depth) / static_cast<double>(max_depth_tokens));
  double draw = rng.normal(mean, 0.5);  // variance 0.25
  std::int64_t e = round_half_up_log(draw);
  std::int64_t emax = 0;
  for (std::int64_t p = base_patch; p > 1; p >>= 1) ++emax;
  e = std::max<std::int64_t>(0, std::min(e, emax));
  return std::int64_t{1} << e;
}

ConvKernel reduce_patch_kernel(const ConvKernel& kernel, std::int64_t effective_patch) {
  std::int64_t pd = kernel.depth_extent();
  if (effective_patch < 1 || pd % effective_patch != 0)
    throw ShapeError("reduce_patch_kernel: effective patch must divide kernel depth extent");
  if (effective_patch == pd) return kernel;
  std::int64_t win = pd / effective_patch;
  std::int64_t oc = kernel.out_channels(), ic = kernel.in_channels();
  std::int64_t he = kernel.height_extent(), we = kernel.width_extent();
  ConvKernel out;
  out.weights = Tensor({oc, ic, effective_patch, he, we});
  const auto& src = kernel.weights.data;
  auto& dst = out.weights.data;
  for (std::int64_t o = 0; o < oc; ++o)
    for (std::int64_t i = 0; i < ic; ++i)
      for (std::int64_t z = 0; z < effective_patch; ++z)
        for (std::int64_t y = 0; y < he; ++y)
          for (std::int64_t x = 0; x < we; ++x) {
            double s = 0.0;  // ascending-index window sum
            for (std::int64_t a = 0; a < win; ++a)
              s += src[(((o * ic + i) * pd + z * win + a) * he + y) * we + x];
            dst[(((o * ic + i) * effective_patch + z) * he + y) * we + x] = s;
          }
  return out;
}

TokenGrid patch_embed(const Tensor& image, const ConvKernel& kernel, const PatchSpec& spec) {
  spec.validate();
  if (image.shape.size() != 3) throw ShapeError("patch_embed: image must be [D,H,W]");
  if (image.shape[0] != spec.depth) throw ShapeError("patch_embed: image depth != spec depth");
  if (kernel.in_channels() != 1) throw ShapeError("patch_embed: single input channel expected");
  ConvKernel reduced = reduce_patch_kernel(kernel, spec.effective_patch);
  std::int64_t pd = reduced.depth_extent();
  std::int64_t ph = reduced.height_extent(), pw = reduced.width_extent();
  std::int64_t d = image.shape[0], h = image.shape[1], w = image.shape[2];
  if (h % ph != 0 || w % pw != 0)
    throw ShapeError("patch_embed: height/width must be divisible by the patch extent");
  std::int64_t td = (d + pd - 1) / pd;
  std::int64_t th = h / ph, tw = w / pw;
  std::int64_t c = reduced.out_channels();
  TokenGrid grid;
  grid.d = td;
  grid.h = th;
  grid.w = tw;
  grid.tokens = Tensor({td * th * tw, c});
  std::int64_t ti = 0;
  for (std::int64_t zd = 0; zd < td; ++zd)
    for (std::int64_t zy = 0; zy < th; ++zy)
      for (std::int64_t zx = 0; zx < tw; ++zx, ++ti)
        for (std::int64_t ch = 0; ch < c; ++ch) {
          double acc = 0.0;  // fixed ascending order
          for (std::int64_t a = 0; a < pd; ++a) {
            std::int64_t sz = zd * pd + a;
            if (sz >= d) continue;  // depth zero padding
            for (std::int64_t b = 0; b < ph; ++b)
              for (std::int64_t e = 0; e < pw; ++e)
                acc += reduced.weights.data[((ch * pd + a) * ph + b) * pw + e] *
                       image.data[(sz * h + zy * ph + b) * w + zx * pw + e];
          }
          grid.tokens.data[ti * c + ch] = acc;
        }
  return grid;
}

Tensor reduce_transposed_kernel(const Tensor& kernel, std::int64_t target_scale) {
  if (kernel.shape.size() != 4 || kernel.shape[2] != 2 || kernel.shape[3] != 2)
    throw ShapeError("reduce_transposed_kernel: kernel must be [C,taps,2,2]");
  if (kernel.shape[1] != 2)
    throw ShapeError("reduce_transposed_kernel: depth extent must be 2");
  if (target_scale == 2) return kernel;
  if (target_scale != 1) throw ShapeError("reduce_transposed_kernel: unsupported target scale");
  std::int64_t c = kernel.shape[0];
  Tensor out({c, 1, 2, 2});
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t b = 0; b < 2; ++b)
      for (std::int64_t e = 0; e < 2; ++e)
        out.data[(ch * 2 + b) * 2 + e] =
            0.5 * (kernel.data[((ch * 2 + 0) * 2 + b) * 2 + e] +
                   kernel.data[((ch * 2 + 1) * 2 + b) * 2 + e]);
  return out;
}

Tensor upsample_step_apply(const Tensor& features, const Tensor& kernel) {
  if (features.shape.size() != 4) throw ShapeError("upsample_step_apply: features must be [C,d,h,w]");
  if (kernel.shape.size() != 4 || kernel.shape[0] != features.shape[0] ||
      kernel.shape[2] != 2 || kernel.shape[3] != 2)
    throw ShapeError("upsample_step_apply: kernel must be [C,taps,2,2]");
  std::int64_t taps = kernel.shape[1];
  if (taps != 1 && taps != 2) throw ShapeError("upsample_step_apply: taps must be 1 or 2");
  std::int64_t c = features.shape[0], d = features.shape[1];
  std::int64_t h = features.shape[2], w = features.shape[3];
  std::int64_t od = d * taps, oh = 2 * h, ow = 2 * w;
  Tensor out({c, od, oh, ow});
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t z = 0; z < d; ++z)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
          double v = features.data[((ch * d + z) * h + y) * w + x];
          for (std::int64_t a = 0; a < taps; ++a)
            for (std::int64_t b = 0; b < 2; ++b)
              for (std::int64_t e = 0; e < 2; ++e)
                out.data[((ch * od + z * taps + a) * oh + 2 * y + b) * ow + 2 * x + e] =
                    kernel.data[((ch * taps + a) * 2 + b) * 2 + e] * v;
        }
  return out;
}

Tensor adaptive_upsample(const Tensor& features, std::int64_t image_depth,
                         const std::vector<Tensor>& step_kernels) {
  if (features.shape.size() != 4) throw ShapeError("adaptive_upsample: features must be [C,d,h,w]");
  if (features.shape[1] > image_depth)
    throw ShapeError("adaptive_upsample: feature depth exceeds image depth");
  Tensor cur = features;
  for (const Tensor& k : step_kernels) {
    bool grow_depth = cur.shape[1] * 2 <= image_depth;
    Tensor step = grow_depth ? k : reduce_transposed_kernel(k, 1);
    cur = upsample_step_apply(cur, step);
  }
  if (cur.shape[1] != image_depth)
    throw ShapeError("adaptive_upsample: output depth does not reach image depth");
  return cur;
}

}  // namespace medvg
