#include "medvg/tensor.hpp"

namespace medvg {

std::int64_t numel_of(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative dimension");
    n *= d;
  }
  return n;
}

Tensor::Tensor(std::vector<std::int64_t> s) : shape(std::move(s)) {
  data.assign(static_cast<std::size_t>(numel_of(shape)), 0.0);
}

Tensor Tensor::full(std::vector<std::int64_t> s, double v) {
  Tensor t(std::move(s));
  t.fill(v);
  return t;
}

Tensor Tensor::scalar(double v) {
  Tensor t({1});
  t.data[0] = v;
  return t;
}

Tensor Tensor::from(std::vector<std::int64_t> s, std::vector<double> d) {
  if (numel_of(s) != static_cast<std::int64_t>(d.size()))
    throw ShapeError("Tensor::from: data size does not match shape");
  Tensor t;
  t.shape = std::move(s);
  t.data = std::move(d);
  return t;
}

Tensor Tensor::randn(std::vector<std::int64_t> s, Rng& rng, double stddev) {
  Tensor t(std::move(s));
  for (auto& v : t.data) v = rng.normal(0.0, stddev);
  return t;
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(data.size()); }

double Tensor::item() const {
  if (data.size() != 1) throw ShapeError("item() on non-scalar tensor");
  return data[0];
}

void Tensor::fill(double v) {
  for (auto& x : data) x = v;
}

}  // namespace medvg
