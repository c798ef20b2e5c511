#pragma once

#include <cstdint>
#include <initializer_list>
#include <vector>

#include "medvg/errors.hpp"
#include "medvg/rng.hpp"

namespace medvg {

// Dense row-major tensor of doubles. Small, value-semantic; shapes are
// explicit and checked at op boundaries.
struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::int64_t> s);

  static Tensor zeros(std::vector<std::int64_t> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<std::int64_t> s, double v);
  static Tensor scalar(double v);
  static Tensor from(std::vector<std::int64_t> s, std::vector<double> d);
  static Tensor randn(std::vector<std::int64_t> s, Rng& rng, double stddev = 1.0);

  std::int64_t numel() const;
  std::int64_t rows() const { return shape.at(0); }
  std::int64_t cols() const { return shape.at(1); }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  double& at(std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
  double at(std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }
  // 2D access
  double& at(std::int64_t r, std::int64_t c) { return data[static_cast<std::size_t>(r * shape[1] + c)]; }
  double at(std::int64_t r, std::int64_t c) const { return data[static_cast<std::size_t>(r * shape[1] + c)]; }

  double item() const;
  void fill(double v);
};

std::int64_t numel_of(const std::vector<std::int64_t>& shape);

}  // namespace medvg
