#pragma once
// Dynamic depth-axis patch embedding and depth-aware upsampling: the
// effective-patch-size closed form, kernel sum pooling, train-time patch-size
// sampling, and mean-pooled transposed kernels.

#include <cstdint>
#include <vector>

#include "medvg/rng.hpp"
#include "medvg/tensor.hpp"

namespace medvg {

struct PatchSpec {
  std::int64_t depth = 1;            // D, slice count
  std::int64_t max_depth_tokens = 8; // t_d
  std::int64_t base_patch = 16;      // P_d, power of two
  std::int64_t effective_patch = 1;  // P'_d, power of two dividing base_patch
  void validate() const;
};

// Dense conv kernel, weights over (out, in, depth, height, width).
struct ConvKernel {
  Tensor weights;  // 5D
  std::int64_t out_channels() const { return weights.shape.at(0); }
  std::int64_t in_channels() const { return weights.shape.at(1); }
  std::int64_t depth_extent() const { return weights.shape.at(2); }
  std::int64_t height_extent() const { return weights.shape.at(3); }
  std::int64_t width_extent() const { return weights.shape.at(4); }
};

struct TokenGrid {
  std::int64_t d = 0, h = 0, w = 0;  // token counts per axis
  Tensor tokens;                     // [d*h*w, C], depth-major row order
};

bool is_power_of_two(std::int64_t v);
std::int64_t round_half_up_log(double x);  // floor(x + 1/2)

// Closed-form effective patch size for a D-slice input.
std::int64_t effective_patch_size(std::int64_t depth, std::int64_t max_depth_tokens,
                                  std::int64_t base_patch);

// Train-time augmentation draw: log2 P'_d ~ N(log2(D/t_d), 0.25), rounded and
// clamped to [0, log2 P_d].
std::int64_t sample_patch_size(std::int64_t depth, std::int64_t max_depth_tokens,
                               std::int64_t base_patch, Rng& rng);

// Sum-pools the kernel depth axis down to the effective patch size.
// Non-overlapping windows, ascending-index summation; weight sum preserved.
ConvKernel reduce_patch_kernel(const ConvKernel& kernel, std::int64_t effective_patch);

// Strided convolution of a single-channel [D,H,W] image with the reduced
// kernel; depth zero-padded to a multiple of the effective patch.
TokenGrid patch_embed(const Tensor& image, const ConvKernel& kernel, const PatchSpec& spec);

// Mean-pools the two depth taps of a scale-2 transposed kernel when the depth
// axis is frozen (target_scale == 1). Kernel layout [C, depth_taps, 2, 2].
Tensor reduce_transposed_kernel(const Tensor& kernel, std::int64_t target_scale);

// Applies the transposed-convolution stack: height/width double each step;
// depth doubles only while feature depth < D, freezing via
// reduce_transposed_kernel. features layout [C, d, h, w].
Tensor adaptive_upsample(const Tensor& features, std::int64_t image_depth,
                         const std::vector<Tensor>& step_kernels);

// One depthwise transposed-conv step; kernel [C, taps, 2, 2], taps in {1,2}.
Tensor upsample_step_apply(const Tensor& features, const Tensor& kernel);

}  // namespace medvg
