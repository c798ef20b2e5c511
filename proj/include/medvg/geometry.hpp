#pragma once
// Normalized box and voxel-mask primitives plus the pointwise losses used by
// the localization head. Axis order is (depth, height, width) everywhere;
// 2D data occupies depth index 0.

#include <array>
#include <cstdint>
#include <vector>

#include "medvg/errors.hpp"

namespace medvg {

// Axis-aligned region in normalized coordinates, rank 2 or 3.
struct Box {
  int rank = 3;
  std::array<double, 3> mn{0, 0, 0};
  std::array<double, 3> mx{0, 0, 0};

  static Box make2d(double y0, double x0, double y1, double x1);
  static Box make3d(double z0, double y0, double x0, double z1, double y1, double x1);

  // Single-slice convention: a 2D box as a rank-3 box with depth extent [0,1].
  // Lossless and idempotent.
  Box as_rank3() const;

  double volume() const;
  bool degenerate() const { return volume() == 0.0; }
  void validate() const;
};

struct VoxelMask {
  std::array<std::int64_t, 3> shape{1, 1, 1};  // (D, H, W)
  std::vector<std::uint8_t> data;              // 0 or 1, length = D*H*W

  static VoxelMask zeros(std::int64_t d, std::int64_t h, std::int64_t w);
  std::int64_t numel() const { return shape[0] * shape[1] * shape[2]; }
  std::int64_t count() const;
  std::uint8_t& at(std::int64_t z, std::int64_t y, std::int64_t x) {
    return data[static_cast<std::size_t>((z * shape[1] + y) * shape[2] + x)];
  }
  std::uint8_t at(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return data[static_cast<std::size_t>((z * shape[1] + y) * shape[2] + x)];
  }
  void validate() const;
};

struct FocalParams {
  double gamma = 2.0;
  double alpha = 0.25;
  void validate() const;
};

double iou(const Box& a, const Box& b);
double giou(const Box& a, const Box& b);
double l1_box(const Box& a, const Box& b);
double dice(const VoxelMask& a, const VoxelMask& b);

// Probabilities are clamped to [1e-7, 1-1e-7] before the log.
double clamp_prob(double p);
double focal_loss(double prob, int label, const FocalParams& params);

}  // namespace medvg
