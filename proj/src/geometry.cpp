#include "medvg/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace medvg {

Box Box::make2d(double y0, double x0, double y1, double x1) {
  Box b;
  b.rank = 2;
  b.mn = {y0, x0, 0.0};
  b.mx = {y1, x1, 0.0};
  b.validate();
  return b;
}

Box Box::make3d(double z0, double y0, double x0, double z1, double y1, double x1) {
  Box b;
  b.rank = 3;
  b.mn = {z0, y0, x0};
  b.mx = {z1, y1, x1};
  b.validate();
  return b;
}

Box Box::as_rank3() const {
  if (rank == 3) return *this;
  Box b;
  b.rank = 3;
  b.mn = {0.0, mn[0], mn[1]};
  b.mx = {1.0, mx[0], mx[1]};
  return b;
}

double Box::volume() const {
  double v = 1.0;
  for (int a = 0; a < rank; ++a) v *= (mx[a] - mn[a]);
  return v;
}

void Box::validate() const {
  if (rank != 2 && rank != 3) throw ShapeError("Box: rank must be 2 or 3");
  for (int a = 0; a < rank; ++a) {
    if (!(0.0 <= mn[a] && mn[a] <= mx[a] && mx[a] <= 1.0))
      throw InputError("Box: corners must satisfy 0 <= min <= max <= 1");
  }
}

VoxelMask VoxelMask::zeros(std::int64_t d, std::int64_t h, std::int64_t w) {
  VoxelMask m;
  m.shape = {d, h, w};
  m.data.assign(static_cast<std::size_t>(d * h * w), 0);
  return m;
}

std::int64_t VoxelMask::count() const {
  std::int64_t c = 0;
  for (auto v : data) c += v;
  return c;
}

void VoxelMask::validate() const {
  if (static_cast<std::int64_t>(data.size()) != numel())
    throw ShapeError("VoxelMask: data length does not match shape");
  for (auto v : data)
    if (v != 0 && v != 1) throw InputError("VoxelMask: values must be 0 or 1");
}

void FocalParams::validate() const {
  if (gamma < 0.0) throw ConfigError("FocalParams: gamma must be >= 0");
  if (alpha < 0.0 || alpha > 1.0) throw ConfigError("FocalParams: alpha must be in [0,1]");
}

static void check_ranks(const Box& a, const Box& b, const char* op) {
  if (a.rank != b.rank) throw ShapeError(std::string(op) + ": rank mismatch");
}

static double intersection_volume(const Box& a, const Box& b) {
  double v = 1.0;
  for (int ax = 0; ax < a.rank; ++ax) {
    double lo = std::max(a.mn[ax], b.mn[ax]);
    double hi = std::min(a.mx[ax], b.mx[ax]);
    if (hi <= lo) return 0.0;
    v *= (hi - lo);
  }
  return v;
}

double iou(const Box& a, const Box& b) {
  check_ranks(a, b, "iou");
  double va = a.volume(), vb = b.volume();
  if (va == 0.0 && vb == 0.0)
    throw DegenerateGeometryError("iou: both boxes have zero volume");
  double inter = intersection_volume(a, b);
  double uni = va + vb - inter;
  return inter / uni;
}

double giou(const Box& a, const Box& b) {
  check_ranks(a, b, "giou");
  double va = a.volume(), vb = b.volume();
  if (va == 0.0 && vb == 0.0)
    throw DegenerateGeometryError("giou: both boxes have zero volume");
  double inter = intersection_volume(a, b);
  double uni = va + vb - inter;
  double hull = 1.0;
  for (int ax = 0; ax < a.rank; ++ax)
    hull *= (std::max(a.mx[ax], b.mx[ax]) - std::min(a.mn[ax], b.mn[ax]));
  return inter / uni - (hull - uni) / hull;
}

double l1_box(const Box& a, const Box& b) {
  check_ranks(a, b, "l1_box");
  double s = 0.0;
  for (int ax = 0; ax < a.rank; ++ax)
    s += std::fabs(a.mn[ax] - b.mn[ax]) + std::fabs(a.mx[ax] - b.mx[ax]);
  return s;
}

double dice(const VoxelMask& a, const VoxelMask& b) {
  if (a.shape != b.shape) throw ShapeError("dice: shape mismatch");
  std::int64_t inter = 0, ca = 0, cb = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    inter += (a.data[i] & b.data[i]);
    ca += a.data[i];
    cb += b.data[i];
  }
  if (ca + cb == 0) return 1.0;  // empty vs empty: perfect agreement
  return 2.0 * static_cast<double>(inter) / static_cast<double>(ca + cb);
}

double clamp_prob(double p) { return std::min(std::max(p, 1e-7), 1.0 - 1e-7); }

double focal_loss(double prob, int label, const FocalParams& params) {
  params.validate();
  double p = clamp_prob(prob);
  if (label == 1) return -params.alpha * std::pow(1.0 - p, params.gamma) * std::log(p);
  if (label == 0) return -(1.0 - params.alpha) * std::pow(p, params.gamma) * std::log(1.0 - p);
  throw InputError("focal_loss: label must be 0 or 1");
}

}  // namespace medvg
