// Dynamic depth patching: the closed-form patch size against branch-by-branch
// evaluation, weight conservation under kernel pooling, and the depth-token
// bound.

#include <doctest.h>

#include <cmath>

#include "medvg/patching.hpp"

using namespace medvg;

namespace {

// Independent evaluation of the three branches of the patch-size rule.
std::int64_t oracle_patch_size(std::int64_t depth, std::int64_t td, std::int64_t pd) {
  if (depth <= td) return 1;
  if (depth > td * pd) return pd;
  double e = std::log2(static_cast<double>(depth) / static_cast<double>(td));
  std::int64_t r = static_cast<std::int64_t>(std::floor(e + 0.5));  // round(x) = floor(x+1/2)
  return std::int64_t{1} << r;
}

ConvKernel make_kernel(std::int64_t out_c, std::int64_t pd, std::int64_t ph, std::int64_t pw,
                       Rng& rng) {
  ConvKernel k;
  k.weights = Tensor::randn({out_c, 1, pd, ph, pw}, rng, 1.0);
  return k;
}

}  // namespace

TEST_CASE("patch-size rule matches the branch oracle over the full lattice") {
  struct P {
    std::int64_t td, pd;
  };
  for (P p : {P{4, 8}, P{8, 16}, P{8, 32}}) {
    for (std::int64_t depth = 1; depth <= 4 * p.td * p.pd; ++depth) {
      std::int64_t got = effective_patch_size(depth, p.td, p.pd);
      CHECK(got == oracle_patch_size(depth, p.td, p.pd));
      CHECK(is_power_of_two(got));
      // middle branch: |x - round(x)| <= 1/2 gives D / P'_d <= sqrt(2) t_d;
      // the padded token count can only exceed that by the final ceiling
      if (depth > p.td && depth <= p.td * p.pd) {
        double bound = std::sqrt(2.0) * static_cast<double>(p.td);
        CHECK(static_cast<double>(depth) / static_cast<double>(got) <= bound + 1e-9);
        std::int64_t tokens = (depth + got - 1) / got;
        CHECK(tokens <= static_cast<std::int64_t>(std::ceil(bound)));
      }
    }
  }
}

TEST_CASE("round_half_up_log rounds halves upward") {
  CHECK(round_half_up_log(0.5) == 1);
  CHECK(round_half_up_log(1.49) == 1);
  CHECK(round_half_up_log(1.5) == 2);
  CHECK(round_half_up_log(-0.5) == 0);
  CHECK(round_half_up_log(-0.51) == -1);
}

TEST_CASE("sampled patch sizes stay in the legal range") {
  Rng rng(61);
  for (int t = 0; t < 500; ++t) {
    std::int64_t v = sample_patch_size(24, 4, 16, rng);
    CHECK(is_power_of_two(v));
    CHECK(v >= 1);
    CHECK(v <= 16);
  }
}

TEST_CASE("kernel sum pooling preserves total weight and constant responses") {
  Rng rng(67);
  ConvKernel k = make_kernel(3, 8, 2, 2, rng);
  for (std::int64_t eff : {1, 2, 4, 8}) {
    ConvKernel r = reduce_patch_kernel(k, eff);
    CHECK(r.depth_extent() == eff);
    // total weight per output channel is conserved exactly
    for (std::int64_t c = 0; c < 3; ++c) {
      double full = 0.0, red = 0.0;
      for (std::int64_t i = 0; i < 8 * 2 * 2; ++i) full += k.weights.data[c * 8 * 4 + i];
      for (std::int64_t i = 0; i < eff * 2 * 2; ++i) red += r.weights.data[c * eff * 4 + i];
      CHECK(std::fabs(full - red) <= 1e-12);
    }
  }

  // constant input: sum pooling conserves the per-channel total weight, so
  // every reduced-depth token responds exactly like the full-depth token
  Tensor ones = Tensor::full({8, 4, 4}, 1.0);
  PatchSpec spec_full{8, 4, 8, 8};
  PatchSpec spec_red{8, 4, 8, 2};
  ConvKernel k2 = make_kernel(2, 8, 2, 2, rng);
  TokenGrid full = patch_embed(ones, reduce_patch_kernel(k2, 8), spec_full);
  TokenGrid red = patch_embed(ones, reduce_patch_kernel(k2, 2), spec_red);
  CHECK(full.d == 1);
  CHECK(red.d == 4);
  for (std::int64_t y = 0; y < full.h; ++y)
    for (std::int64_t x = 0; x < full.w; ++x)
      for (std::int64_t c = 0; c < 2; ++c) {
        double want = full.tokens.at(y * full.w + x, c);
        for (std::int64_t z = 0; z < red.d; ++z)
          CHECK(std::fabs(red.tokens.at((z * red.h + y) * red.w + x, c) - want) <= 1e-12);
      }
}

TEST_CASE("transposed-kernel mean pooling matches the constant closed form") {
  Rng rng(71);
  Tensor k = Tensor::randn({3, 2, 2, 2}, rng, 1.0);  // [C, taps, 2, 2]
  Tensor frozen = reduce_transposed_kernel(k, 1);
  CHECK(frozen.shape == std::vector<std::int64_t>{3, 1, 2, 2});
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t y = 0; y < 2; ++y)
      for (std::int64_t x = 0; x < 2; ++x) {
        double mean = 0.5 * (k.data[((c * 2 + 0) * 2 + y) * 2 + x] +
                             k.data[((c * 2 + 1) * 2 + y) * 2 + x]);
        CHECK(std::fabs(frozen.data[(c * 2 + y) * 2 + x] - mean) <= 1e-12);
      }
  // scale 2 keeps the kernel untouched
  Tensor same = reduce_transposed_kernel(k, 2);
  CHECK(same.data == k.data);

  // constant-input check: a frozen step applied to constant features yields
  // per-position outputs equal to kernel-tap means times the constant
  Tensor feat = Tensor::full({3, 2, 2, 2}, 2.0);
  Tensor up = upsample_step_apply(feat, frozen);
  CHECK(up.shape == std::vector<std::int64_t>{3, 2, 4, 4});
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t y = 0; y < 2; ++y)
      for (std::int64_t x = 0; x < 2; ++x)
        CHECK(std::fabs(up.data[((c * 2 + 0) * 4 + y) * 4 + x] -
                        2.0 * frozen.data[(c * 2 + y) * 2 + x]) <= 1e-12);
}

TEST_CASE("adaptive upsampling doubles depth only while below the image depth") {
  Rng rng(73);
  std::vector<Tensor> kernels;
  for (int s = 0; s < 3; ++s) kernels.push_back(Tensor::randn({2, 2, 2, 2}, rng, 1.0));
  Tensor feat = Tensor::randn({2, 1, 2, 2}, rng, 1.0);
  // 2D image: depth stays 1 through all steps
  Tensor flat = adaptive_upsample(feat, 1, kernels);
  CHECK(flat.shape == std::vector<std::int64_t>{2, 1, 16, 16});
  // depth-4 image: depth doubles twice then freezes
  Tensor vol = adaptive_upsample(feat, 4, kernels);
  CHECK(vol.shape == std::vector<std::int64_t>{2, 4, 16, 16});
}
