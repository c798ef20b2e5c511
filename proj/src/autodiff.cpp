#include "medvg/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "medvg/kernels.hpp"

namespace medvg {

namespace {
const kernels::Ops& K() { return kernels::active(); }
}  // namespace

Var Graph::push(Tensor value, std::function<void(Graph&)> backward) {
  Node n;
  n.value = std::move(value);
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

void Graph::backward(Var loss) {
  if (!loss.valid()) throw InputError("backward on invalid Var");
  for (auto& n : nodes_) {
    n.grad = Tensor(n.value.shape);
  }
  if (nodes_[loss.id].value.numel() != 1)
    throw ShapeError("backward: loss must be scalar");
  nodes_[loss.id].grad.data[0] = 1.0;
  for (std::int64_t i = loss.id; i >= 0; --i) {
    if (nodes_[i].backward) nodes_[i].backward(*this);
  }
}

Var Graph::leaf(const Tensor& t) { return push(t, nullptr); }
Var Graph::constant(const Tensor& t) { return push(t, nullptr); }

// --- elementwise -----------------------------------------------------------

static void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) throw ShapeError(std::string(op) + ": shape mismatch");
}

Var Graph::add(Var a, Var b) {
  const Tensor &av = value(a), &bv = value(b);
  check_same_shape(av, bv, "add");
  Tensor out(av.shape);
  K().add(av.data.data(), bv.data.data(), out.data.data(), out.data.size());
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(std::move(out), [self, a, b](Graph& g) {
    const Tensor& go = g.nodes_[self].grad;
    K().axpy(1.0, go.data.data(), g.grad_ref(a).data.data(), go.data.size());
    K().axpy(1.0, go.data.data(), g.grad_ref(b).data.data(), go.data.size());
  });
}

Var Graph::sub(Var a, Var b) {
  const Tensor &av = value(a), &bv = value(b);
  check_same_shape(av, bv, "sub");
  Tensor out(av.shape);
  K().sub(av.data.data(), bv.data.data(), out.data.data(), out.data.size());
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(std::move(out), [self, a, b](Graph& g) {
    const Tensor& go = g.nodes_[self].grad;
    K().axpy(1.0, go.data.data(), g.grad_ref(a).data.data(), go.data.size());
    K().axpy(-1.0, go.data.data(), g.grad_ref(b).data.data(), go.data.size());
  });
}

Var Graph::mul(Var a, Var b) {
  const Tensor &av = value(a), &bv = value(b);
  check_same_shape(av, bv, "mul");
  Tensor out(av.shape);
  K().mul(av.data.data(), bv.data.data(), out.data.data(), out.data.size());
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(std::move(out), [self, a, b](Graph& g) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor &av = g.value(a), &bv = g.value(b);
    Tensor& ga = g.grad_ref(a);
    Tensor& gb = g.grad_ref(b);
    for (std::size_t i = 0; i < go.data.size(); ++i) {
      ga.data[i] += go.data[i] * bv.data[i];
      gb.data[i] += go.data[i] * av.data[i];
    }
  });
}

Var Graph::div(Var a, Var b) {
  const Tensor &av = value(a), &bv = value(b);
  check_same_shape(av, bv, "div");
  Tensor out(av.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = av.data[i] / bv.data[i];
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(std::move(out), [self, a, b](Graph& g) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor &av = g.value(a), &bv = g.value(b);
    Tensor& ga = g.grad_ref(a);
    Tensor& gb = g.grad_ref(b);
    for (std::size_t i = 0; i < go.data.size(); ++i) {
      ga.data[i] += go.data[i] / bv.data[i];
      gb.data[i] -= go.data[i] * av.data[i] / (bv.data[i] * bv.data[i]);
    }
  });
}

Var Graph::scale(Var a, double c) {
  Tensor out(value(a).shape);
  K().scale(c, value(a).data.data(), out.data.data(), out.data.size());
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(std::move(out), [self, a, c](Graph& g) {
    const Tensor& go = g.nodes_[self].grad;
    K().axpy(c, go.data.data(), g.grad_ref(a).data.data(), go.data.size());
  });
}

Var Graph::affine(Var a, double k, double b) {
  Tensor out(value(a).shape);
  const auto& av = value(a).data;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = k * av[i] + b;
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(std::move(out), [self, a, k](Graph& g) {
    const Tensor& go = g.nodes_[self].grad;
    K().axpy(k, go.data.data(), g.grad_ref(a).data.data(), go.data.size());
  });
}

Var Graph::sigmoid(Var a) {
  Tensor out(value(a).shape);
  const auto& av = value(a).data;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = 1.0 / (1.0 + std::exp(-av[i]));
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(std::move(out), [self, a](Graph& g) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& y = g.nodes_[self].value;
    Tensor& ga = g.grad_ref(a);
    for (std::size_t i = 0; i < go.data.size(); ++i)
      ga.data[i] += go.data[i] * y.data[i] * (1.0 - y.data[i]);
  });
}

Var Graph::log(Var a) {
  Tensor out(value(a).shape);
  const auto& av = value(a).data;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::log(av[i]);
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(std::move(out), [self, a](Graph& g) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& av = g.value(a);
    Tensor& ga = g.grad_ref(a);
    for (std::size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i] / av.data[i];
  });
}

Var Graph::exp(Var a) {
  Tensor out(value(a).shape);
  const auto& av = value(a).data;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::exp(av[i]);
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(std::move(out), [self, a](Graph& g) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& y = g.nodes_[self].value;
    Tensor& ga = g.grad_ref(a);
    for (std::size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i] * y.data[i];
  });
}

Var Graph::pow_const(Var a, double p) {
  Tensor out(value(a).shape);
  const auto& av = value(a).data;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::pow(av[i], p);
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(std::move(out), [self, a, p](Graph& g) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& av = g.value(a);
    Tensor& ga = g.grad_ref(a);
    for (std::size_t i = 0; i < go.data.size(); ++i)
      ga.data[i] += go.data[i] * p * std::pow(av.data[i], p - 1.0);
  });
}

Var Graph::relu(Var a) {
  Tensor out(value(a).shape);
  const auto& av = value(a).data;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = av[i] > 0.0 ? av[i] : 0.0;
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(std::move(out), [self, a](Graph& g) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& av = g.value(a);
    Tensor& ga = g.grad_ref(a);
    for (std::size_t i = 0; i < go.data.size(); ++i)
      if (av.data[i] > 0.0) ga.data[i] += go.data[i];
  });
}

Var Graph::silu(Var a) {
  Tensor out(value(a).shape);
  const auto& av = value(a).data;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    double s = 1.0 / (1.0 + std::exp(-av[i]));
    out.data[i] = av[i] * s;
  }
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(std::move(out), [self, a](Graph& g) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& av = g.value(a);
    Tensor& ga = g.grad_ref(a);
    for (std::size_t i = 0; i < go.data.size(); ++i) {
      double s = 1.0 / (1.0 + std::exp(-av.data[i]));
      ga.data[i] += go.data[i] * (s + av.data[i] * s * (1.0 - s));
    }
  });
}

Var Graph::abs(Var a) {
  Tensor out(value(a).shape);
  const auto& av = value(a).data;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::fabs(av[i]);
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(std::move(out), [self, a](Graph& g) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& av = g.value(a);
    Tensor& ga = g.grad_ref(a);
    for (std::size_t i = 0; i < go.data.size(); ++i)
      ga.data[i] += go.data[i] * (av.data[i] >= 0.0 ? 1.0 : -1.0);
  });
}

Var Graph::elem_min(Var a, Var b) {
  const Tensor &av = value(a), &bv = value(b);
  check_same_shape(av, bv, "elem_min");
  Tensor out(av.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::min(av.data[i], bv.data[i]);
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(std::move(out), [self, a, b](Graph& g) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor &av = g.value(a), &bv = g.value(b);
    Tensor& ga = g.grad_ref(a);
    Tensor& gb = g.grad_ref(b);
    for (std::size_t i = 0; i < go.data.size(); ++i) {
      if (av.data[i] <= bv.data[i]) ga.data[i] += go.data[i];
      else gb.data[i] += go.data[i];
    }
  });
}

Var Graph::elem_max(Var a, Var b) {
  const Tensor &av = value(a), &bv = value(b);
  check_same_shape(av, bv, "elem_max");
  Tensor out(av.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::max(av.data[i], bv.data[i]);
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(std::move(out), [self, a, b](Graph& g) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor &av = g.value(a), &bv = g.value(b);
    Tensor& ga = g.grad_ref(a);
    Tensor& gb = g.grad_ref(b);
    for (std::size_t i = 0; i < go.data.size(); ++i) {
      if (av.data[i] >= bv.data[i]) ga.data[i] += go.data[i];
      else gb.data[i] += go.data[i];
    }
  });
}

// --- reductions ------------------------------------------------------------

Var Graph::sum(Var a) {
  double s = kernels::scalar::sum_ordered(value(a).data.data(), value(a).data.size());
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(Tensor::scalar(s), [self, a](Graph& g) {
    double go = g.nodes_[self].grad.data[0];
    Tensor& ga = g.grad_ref(a);
    for (auto& v : ga.data) v += go;
  });
}

Var Graph::mean(Var a) {
  std::int64_t n = value(a).numel();
  if (n == 0) throw ShapeError("mean of empty tensor");
  double s = kernels::scalar::sum_ordered(value(a).data.data(), value(a).data.size());
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(Tensor::scalar(s / static_cast<double>(n)), [self, a, n](Graph& g) {
    double go = g.nodes_[self].grad.data[0] / static_cast<double>(n);
    Tensor& ga = g.grad_ref(a);
    for (auto& v : ga.data) v += go;
  });
}

Var Graph::prod(Var a) {
  const auto& av = value(a).data;
  double p = 1.0;
  for (double v : av) p *= v;
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(Tensor::scalar(p), [self, a](Graph& g) {
    double go = g.nodes_[self].grad.data[0];
    const Tensor& av = g.value(a);
    Tensor& ga = g.grad_ref(a);
    for (std::size_t i = 0; i < av.data.size(); ++i) {
      double partial = 1.0;
      for (std::size_t j = 0; j < av.data.size(); ++j)
        if (j != i) partial *= av.data[j];
      ga.data[i] += go * partial;
    }
  });
}

// --- linear algebra --------------------------------------------------------

Var Graph::matmul(Var a, Var b) {
  const Tensor &av = value(a), &bv = value(b);
  if (av.shape.size() != 2 || bv.shape.size() != 2 || av.shape[1] != bv.shape[0])
    throw ShapeError("matmul: incompatible shapes");
  std::int64_t m = av.shape[0], k = av.shape[1], n = bv.shape[1];
  Tensor out({m, n});
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = av.data.data() + i * k;
    double* orow = out.data.data() + i * n;
    for (std::int64_t p = 0; p < k; ++p)
      K().axpy(arow[p], bv.data.data() + p * n, orow, static_cast<std::size_t>(n));
  }
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(std::move(out), [self, a, b, m, k, n](Graph& g) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor &av = g.value(a), &bv = g.value(b);
    Tensor& ga = g.grad_ref(a);
    Tensor& gb = g.grad_ref(b);
    // ga += go * b^T
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t p = 0; p < k; ++p)
        ga.data[i * k + p] += K().dot(go.data.data() + i * n, bv.data.data() + p * n,
                                      static_cast<std::size_t>(n));
    // gb += a^T * go
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t p = 0; p < k; ++p)
        K().axpy(av.data[i * k + p], go.data.data() + i * n, gb.data.data() + p * n,
                 static_cast<std::size_t>(n));
  });
}

Var Graph::matmul_nt(Var a, Var b) {
  const Tensor &av = value(a), &bv = value(b);
  if (av.shape.size() != 2 || bv.shape.size() != 2 || av.shape[1] != bv.shape[1])
    throw ShapeError("matmul_nt: incompatible shapes");
  std::int64_t m = av.shape[0], k = av.shape[1], n = bv.shape[0];
  Tensor out({m, n});
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j)
      out.data[i * n + j] = K().dot(av.data.data() + i * k, bv.data.data() + j * k,
                                    static_cast<std::size_t>(k));
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(std::move(out), [self, a, b, m, k, n](Graph& g) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor &av = g.value(a), &bv = g.value(b);
    Tensor& ga = g.grad_ref(a);
    Tensor& gb = g.grad_ref(b);
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j) {
        double gij = go.data[i * n + j];
        if (gij == 0.0) continue;
        K().axpy(gij, bv.data.data() + j * k, ga.data.data() + i * k,
                 static_cast<std::size_t>(k));
        K().axpy(gij, av.data.data() + i * k, gb.data.data() + j * k,
                 static_cast<std::size_t>(k));
      }
  });
}

Var Graph::add_rowvec(Var a, Var b) {
  const Tensor &av = value(a), &bv = value(b);
  if (av.shape.size() != 2 || bv.numel() != av.shape[1])
    throw ShapeError("add_rowvec: incompatible shapes");
  std::int64_t m = av.shape[0], n = av.shape[1];
  Tensor out(av.shape);
  for (std::int64_t i = 0; i < m; ++i)
    K().add(av.data.data() + i * n, bv.data.data(), out.data.data() + i * n,
            static_cast<std::size_t>(n));
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(std::move(out), [self, a, b, m, n](Graph& g) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor& ga = g.grad_ref(a);
    Tensor& gb = g.grad_ref(b);
    K().axpy(1.0, go.data.data(), ga.data.data(), go.data.size());
    for (std::int64_t i = 0; i < m; ++i)
      K().axpy(1.0, go.data.data() + i * n, gb.data.data(), static_cast<std::size_t>(n));
  });
}

// --- shape / indexing ------------------------------------------------------

Var Graph::reshape(Var a, std::vector<std::int64_t> shape) {
  if (numel_of(shape) != value(a).numel()) throw ShapeError("reshape: numel mismatch");
  Tensor out = value(a);
  out.shape = std::move(shape);
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(std::move(out), [self, a](Graph& g) {
    const Tensor& go = g.nodes_[self].grad;
    K().axpy(1.0, go.data.data(), g.grad_ref(a).data.data(), go.data.size());
  });
}

Var Graph::gather_rows(Var a, std::vector<std::int64_t> idx) {
  const Tensor& av = value(a);
  if (av.shape.size() != 2) throw ShapeError("gather_rows: need 2D input");
  std::int64_t n = av.shape[1];
  Tensor out({static_cast<std::int64_t>(idx.size()), n});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= av.shape[0]) throw ProtocolError("gather_rows: index out of range");
    std::copy_n(av.data.data() + idx[r] * n, n, out.data.data() + static_cast<std::int64_t>(r) * n);
  }
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(std::move(out), [self, a, idx = std::move(idx), n](Graph& g) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor& ga = g.grad_ref(a);
    for (std::size_t r = 0; r < idx.size(); ++r)
      K().axpy(1.0, go.data.data() + static_cast<std::int64_t>(r) * n,
               ga.data.data() + idx[r] * n, static_cast<std::size_t>(n));
  });
}

Var Graph::concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: empty");
  std::int64_t n = value(parts[0]).shape.at(1);
  std::int64_t rows = 0;
  for (Var p : parts) {
    if (value(p).shape.size() != 2 || value(p).shape[1] != n)
      throw ShapeError("concat_rows: column mismatch");
    rows += value(p).shape[0];
  }
  Tensor out({rows, n});
  std::int64_t off = 0;
  for (Var p : parts) {
    const Tensor& pv = value(p);
    std::copy(pv.data.begin(), pv.data.end(), out.data.begin() + off);
    off += pv.numel();
  }
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(std::move(out), [self, parts](Graph& g) {
    const Tensor& go = g.nodes_[self].grad;
    std::int64_t off = 0;
    for (Var p : parts) {
      Tensor& gp = g.grad_ref(p);
      K().axpy(1.0, go.data.data() + off, gp.data.data(), gp.data.size());
      off += gp.numel();
    }
  });
}

Var Graph::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: empty");
  std::int64_t m = value(parts[0]).shape.at(0);
  std::int64_t n = 0;
  for (Var p : parts) {
    if (value(p).shape.size() != 2 || value(p).shape[0] != m)
      throw ShapeError("concat_cols: row mismatch");
    n += value(p).shape[1];
  }
  Tensor out({m, n});
  std::int64_t coff = 0;
  for (Var p : parts) {
    const Tensor& pv = value(p);
    std::int64_t pn = pv.shape[1];
    for (std::int64_t i = 0; i < m; ++i)
      std::copy_n(pv.data.data() + i * pn, pn, out.data.data() + i * n + coff);
    coff += pn;
  }
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(std::move(out), [self, parts, m, n](Graph& g) {
    const Tensor& go = g.nodes_[self].grad;
    std::int64_t coff = 0;
    for (Var p : parts) {
      Tensor& gp = g.grad_ref(p);
      std::int64_t pn = gp.shape[1];
      for (std::int64_t i = 0; i < m; ++i)
        K().axpy(1.0, go.data.data() + i * n + coff, gp.data.data() + i * pn,
                 static_cast<std::size_t>(pn));
      coff += pn;
    }
  });
}

Var Graph::slice_rows(Var a, std::int64_t start, std::int64_t len) {
  const Tensor& av = value(a);
  if (av.shape.size() != 2 || start < 0 || start + len > av.shape[0])
    throw ShapeError("slice_rows: out of range");
  std::int64_t n = av.shape[1];
  Tensor out({len, n});
  std::copy_n(av.data.data() + start * n, len * n, out.data.data());
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(std::move(out), [self, a, start, n](Graph& g) {
    const Tensor& go = g.nodes_[self].grad;
    K().axpy(1.0, go.data.data(), g.grad_ref(a).data.data() + start * n, go.data.size());
  });
}

Var Graph::slice_cols(Var a, std::int64_t start, std::int64_t len) {
  const Tensor& av = value(a);
  if (av.shape.size() != 2 || start < 0 || start + len > av.shape[1])
    throw ShapeError("slice_cols: out of range");
  std::int64_t m = av.shape[0], n = av.shape[1];
  Tensor out({m, len});
  for (std::int64_t i = 0; i < m; ++i)
    std::copy_n(av.data.data() + i * n + start, len, out.data.data() + i * len);
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(std::move(out), [self, a, start, m, n, len](Graph& g) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor& ga = g.grad_ref(a);
    for (std::int64_t i = 0; i < m; ++i)
      K().axpy(1.0, go.data.data() + i * len, ga.data.data() + i * n + start,
               static_cast<std::size_t>(len));
  });
}

Var Graph::channels_to_rows(Var a) {
  const Tensor& av = value(a);
  if (av.shape.size() != 4) throw ShapeError("channels_to_rows: need [C,d,h,w]");
  std::int64_t c = av.shape[0], v = av.shape[1] * av.shape[2] * av.shape[3];
  Tensor out({v, c});
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t i = 0; i < v; ++i) out.data[i * c + ch] = av.data[ch * v + i];
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(std::move(out), [self, a, c, v](Graph& g) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor& ga = g.grad_ref(a);
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t i = 0; i < v; ++i) ga.data[ch * v + i] += go.data[i * c + ch];
  });
}

Var Graph::rows_to_channels(Var a, std::vector<std::int64_t> cdhw) {
  const Tensor& av = value(a);
  if (av.shape.size() != 2 || cdhw.size() != 4) throw ShapeError("rows_to_channels: bad shapes");
  std::int64_t c = cdhw[0], v = cdhw[1] * cdhw[2] * cdhw[3];
  if (av.shape[0] != v || av.shape[1] != c) throw ShapeError("rows_to_channels: numel mismatch");
  Tensor out(cdhw);
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t i = 0; i < v; ++i) out.data[ch * v + i] = av.data[i * c + ch];
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(std::move(out), [self, a, c, v](Graph& g) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor& ga = g.grad_ref(a);
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t i = 0; i < v; ++i) ga.data[i * c + ch] += go.data[ch * v + i];
  });
}

Var Graph::permute_general(Var a, std::vector<std::int64_t> src_index,
                           std::vector<std::int64_t> out_shape) {
  const Tensor& av = value(a);
  if (numel_of(out_shape) != static_cast<std::int64_t>(src_index.size()))
    throw ShapeError("permute_general: index count does not match output shape");
  Tensor out(out_shape);
  for (std::size_t i = 0; i < src_index.size(); ++i) {
    if (src_index[i] < 0 || src_index[i] >= av.numel())
      throw ShapeError("permute_general: source index out of range");
    out.data[i] = av.data[static_cast<std::size_t>(src_index[i])];
  }
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(std::move(out), [self, a, src_index = std::move(src_index)](Graph& g) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor& ga = g.grad_ref(a);
    for (std::size_t i = 0; i < src_index.size(); ++i)
      ga.data[static_cast<std::size_t>(src_index[i])] += go.data[i];
  });
}

// --- neural-net composites --------------------------------------------------

Var Graph::row_softmax(Var a, const Tensor& additive_mask) {
  const Tensor& av = value(a);
  if (av.shape.size() != 2) throw ShapeError("row_softmax: need 2D");
  bool masked = !additive_mask.data.empty();
  if (masked && !additive_mask.same_shape(av)) throw ShapeError("row_softmax: mask shape");
  std::int64_t m = av.shape[0], n = av.shape[1];
  Tensor out(av.shape);
  for (std::int64_t i = 0; i < m; ++i) {
    double mx = -1e300;
    for (std::int64_t j = 0; j < n; ++j) {
      double z = av.data[i * n + j] + (masked ? additive_mask.data[i * n + j] : 0.0);
      mx = std::max(mx, z);
    }
    double denom = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
      double z = av.data[i * n + j] + (masked ? additive_mask.data[i * n + j] : 0.0);
      double e = std::exp(z - mx);
      out.data[i * n + j] = e;
      denom += e;
    }
    for (std::int64_t j = 0; j < n; ++j) out.data[i * n + j] /= denom;
  }
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(std::move(out), [self, a, m, n](Graph& g) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& y = g.nodes_[self].value;
    Tensor& ga = g.grad_ref(a);
    for (std::int64_t i = 0; i < m; ++i) {
      double dotv = K().dot(go.data.data() + i * n, y.data.data() + i * n,
                            static_cast<std::size_t>(n));
      for (std::int64_t j = 0; j < n; ++j)
        ga.data[i * n + j] += y.data[i * n + j] * (go.data[i * n + j] - dotv);
    }
  });
}

Var Graph::rmsnorm(Var a, Var weight, double eps) {
  const Tensor& av = value(a);
  const Tensor& wv = value(weight);
  if (av.shape.size() != 2 || wv.numel() != av.shape[1]) throw ShapeError("rmsnorm: shapes");
  std::int64_t m = av.shape[0], n = av.shape[1];
  Tensor out(av.shape);
  std::vector<double> inv_rms(static_cast<std::size_t>(m));
  for (std::int64_t i = 0; i < m; ++i) {
    double ms = K().dot(av.data.data() + i * n, av.data.data() + i * n,
                        static_cast<std::size_t>(n)) / static_cast<double>(n);
    double ir = 1.0 / std::sqrt(ms + eps);
    inv_rms[static_cast<std::size_t>(i)] = ir;
    for (std::int64_t j = 0; j < n; ++j)
      out.data[i * n + j] = av.data[i * n + j] * ir * wv.data[static_cast<std::size_t>(j)];
  }
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(std::move(out),
              [self, a, weight, m, n, inv_rms = std::move(inv_rms)](Graph& g) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& av = g.value(a);
    const Tensor& wv = g.value(weight);
    Tensor& ga = g.grad_ref(a);
    Tensor& gw = g.grad_ref(weight);
    for (std::int64_t i = 0; i < m; ++i) {
      double ir = inv_rms[static_cast<std::size_t>(i)];
      // s = sum_j go_j * w_j * x_j
      double s = 0.0;
      for (std::int64_t j = 0; j < n; ++j)
        s += go.data[i * n + j] * wv.data[static_cast<std::size_t>(j)] * av.data[i * n + j];
      for (std::int64_t j = 0; j < n; ++j) {
        double gj = go.data[i * n + j];
        double xj = av.data[i * n + j];
        ga.data[i * n + j] += ir * gj * wv.data[static_cast<std::size_t>(j)] -
                              ir * ir * ir * xj * s / static_cast<double>(n);
        gw.data[static_cast<std::size_t>(j)] += gj * xj * ir;
      }
    }
  });
}

Var Graph::rope(Var a, const std::vector<std::int64_t>& positions, double base) {
  const Tensor& av = value(a);
  if (av.shape.size() != 2) throw ShapeError("rope: need 2D");
  std::int64_t m = av.shape[0], n = av.shape[1];
  if (static_cast<std::int64_t>(positions.size()) != m) throw ShapeError("rope: position count");
  if (n % 2 != 0) throw ShapeError("rope: dim must be even");
  Tensor out(av.shape);
  std::vector<double> cs(static_cast<std::size_t>(m * n / 2)), sn(static_cast<std::size_t>(m * n / 2));
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n / 2; ++j) {
      double theta = static_cast<double>(positions[static_cast<std::size_t>(i)]) *
                     std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(n));
      double c = std::cos(theta), s = std::sin(theta);
      cs[static_cast<std::size_t>(i * (n / 2) + j)] = c;
      sn[static_cast<std::size_t>(i * (n / 2) + j)] = s;
      double x = av.data[i * n + 2 * j], y = av.data[i * n + 2 * j + 1];
      out.data[i * n + 2 * j] = x * c - y * s;
      out.data[i * n + 2 * j + 1] = x * s + y * c;
    }
  }
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(std::move(out), [self, a, m, n, cs = std::move(cs), sn = std::move(sn)](Graph& g) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor& ga = g.grad_ref(a);
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n / 2; ++j) {
        double c = cs[static_cast<std::size_t>(i * (n / 2) + j)];
        double s = sn[static_cast<std::size_t>(i * (n / 2) + j)];
        double gx = go.data[i * n + 2 * j], gy = go.data[i * n + 2 * j + 1];
        ga.data[i * n + 2 * j] += gx * c + gy * s;
        ga.data[i * n + 2 * j + 1] += -gx * s + gy * c;
      }
  });
}

Var Graph::cross_entropy(Var logits, const std::vector<std::int64_t>& targets,
                         const std::vector<double>& weights) {
  const Tensor& lv = value(logits);
  if (lv.shape.size() != 2) throw ShapeError("cross_entropy: need 2D logits");
  std::int64_t m = lv.shape[0], v = lv.shape[1];
  if (static_cast<std::int64_t>(targets.size()) != m ||
      static_cast<std::int64_t>(weights.size()) != m)
    throw ShapeError("cross_entropy: target/weight count");
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  // cache softmax rows for backward
  Tensor probs({m, v});
  double loss = 0.0;
  for (std::int64_t i = 0; i < m; ++i) {
    double mx = -1e300;
    for (std::int64_t j = 0; j < v; ++j) mx = std::max(mx, lv.data[i * v + j]);
    double denom = 0.0;
    for (std::int64_t j = 0; j < v; ++j) {
      double e = std::exp(lv.data[i * v + j] - mx);
      probs.data[i * v + j] = e;
      denom += e;
    }
    for (std::int64_t j = 0; j < v; ++j) probs.data[i * v + j] /= denom;
    double w = weights[static_cast<std::size_t>(i)];
    if (w != 0.0) {
      std::int64_t t = targets[static_cast<std::size_t>(i)];
      if (t < 0 || t >= v) throw InputError("cross_entropy: target out of range");
      loss -= w * std::log(std::max(probs.data[i * v + t], 1e-300));
    }
  }
  double denom = wsum > 0.0 ? wsum : 1.0;
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(Tensor::scalar(loss / denom),
              [self, logits, targets, weights, probs = std::move(probs), denom, m, v](Graph& g) {
    double go = g.nodes_[self].grad.data[0] / denom;
    Tensor& gl = g.grad_ref(logits);
    for (std::int64_t i = 0; i < m; ++i) {
      double w = weights[static_cast<std::size_t>(i)];
      if (w == 0.0) continue;
      std::int64_t t = targets[static_cast<std::size_t>(i)];
      for (std::int64_t j = 0; j < v; ++j)
        gl.data[i * v + j] += go * w * (probs.data[i * v + j] - (j == t ? 1.0 : 0.0));
    }
  });
}

Var Graph::patch_embed(const Tensor& image, Var kernel, std::int64_t pd, std::int64_t ph,
                       std::int64_t pw) {
  if (image.shape.size() != 3) throw ShapeError("patch_embed: image must be [D,H,W]");
  const Tensor& kv = value(kernel);
  if (kv.shape.size() != 2 || kv.shape[1] != pd * ph * pw)
    throw ShapeError("patch_embed: kernel must be [C, pd*ph*pw]");
  std::int64_t d = image.shape[0], h = image.shape[1], w = image.shape[2];
  if (h % ph != 0 || w % pw != 0) throw ShapeError("patch_embed: height/width not divisible");
  std::int64_t td = (d + pd - 1) / pd;  // depth zero-padded
  std::int64_t th = h / ph, tw = w / pw;
  std::int64_t c = kv.shape[0];
  std::int64_t t = td * th * tw;
  std::int64_t psz = pd * ph * pw;
  // gather patches once; shared by forward and backward
  Tensor patches({t, psz});
  std::int64_t ti = 0;
  for (std::int64_t zd = 0; zd < td; ++zd)
    for (std::int64_t zy = 0; zy < th; ++zy)
      for (std::int64_t zx = 0; zx < tw; ++zx, ++ti) {
        std::int64_t pi = 0;
        for (std::int64_t a = 0; a < pd; ++a)
          for (std::int64_t b = 0; b < ph; ++b)
            for (std::int64_t e = 0; e < pw; ++e, ++pi) {
              std::int64_t sz = zd * pd + a;
              double v = sz < d ? image.data[(sz * h + zy * ph + b) * w + zx * pw + e] : 0.0;
              patches.data[ti * psz + pi] = v;
            }
      }
  Tensor out({t, c});
  for (std::int64_t i = 0; i < t; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch)
      out.data[i * c + ch] = kernels::scalar::dot(patches.data.data() + i * psz,
                                                  kv.data.data() + ch * psz,
                                                  static_cast<std::size_t>(psz));
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(std::move(out), [self, kernel, patches = std::move(patches), t, c, psz](Graph& g) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor& gk = g.grad_ref(kernel);
    for (std::int64_t i = 0; i < t; ++i)
      for (std::int64_t ch = 0; ch < c; ++ch)
        K().axpy(go.data[i * c + ch], patches.data.data() + i * psz,
                 gk.data.data() + ch * psz, static_cast<std::size_t>(psz));
  });
}

Var Graph::upsample_step(Var feat, Var kernel) {
  const Tensor& fv = value(feat);
  const Tensor& kv = value(kernel);
  if (fv.shape.size() != 4) throw ShapeError("upsample_step: feat must be [C,d,h,w]");
  if (kv.shape.size() != 4 || kv.shape[0] != fv.shape[0] || kv.shape[2] != 2 || kv.shape[3] != 2)
    throw ShapeError("upsample_step: kernel must be [C,taps,2,2]");
  std::int64_t c = fv.shape[0], d = fv.shape[1], h = fv.shape[2], w = fv.shape[3];
  std::int64_t taps = kv.shape[1];
  if (taps != 1 && taps != 2) throw ShapeError("upsample_step: unsupported depth taps");
  std::int64_t od = d * taps, oh = 2 * h, ow = 2 * w;
  Tensor out({c, od, oh, ow});
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t z = 0; z < d; ++z)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
          double v = fv.data[((ch * d + z) * h + y) * w + x];
          for (std::int64_t a = 0; a < taps; ++a)
            for (std::int64_t b = 0; b < 2; ++b)
              for (std::int64_t e = 0; e < 2; ++e) {
                double k = kv.data[((ch * taps + a) * 2 + b) * 2 + e];
                out.data[((ch * od + z * taps + a) * oh + 2 * y + b) * ow + 2 * x + e] = k * v;
              }
        }
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(std::move(out), [self, feat, kernel, c, d, h, w, taps, od, oh, ow](Graph& g) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& fv = g.value(feat);
    const Tensor& kv = g.value(kernel);
    Tensor& gf = g.grad_ref(feat);
    Tensor& gk = g.grad_ref(kernel);
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t z = 0; z < d; ++z)
        for (std::int64_t y = 0; y < h; ++y)
          for (std::int64_t x = 0; x < w; ++x) {
            double v = fv.data[((ch * d + z) * h + y) * w + x];
            double acc = 0.0;
            for (std::int64_t a = 0; a < taps; ++a)
              for (std::int64_t b = 0; b < 2; ++b)
                for (std::int64_t e = 0; e < 2; ++e) {
                  double gout =
                      go.data[((ch * od + z * taps + a) * oh + 2 * y + b) * ow + 2 * x + e];
                  acc += gout * kv.data[((ch * taps + a) * 2 + b) * 2 + e];
                  gk.data[((ch * taps + a) * 2 + b) * 2 + e] += gout * v;
                }
            gf.data[((ch * d + z) * h + y) * w + x] += acc;
          }
  });
}

Var Graph::maxpool2(Var feat) {
  const Tensor& fv = value(feat);
  if (fv.shape.size() != 4) throw ShapeError("maxpool2: feat must be [C,d,h,w]");
  std::int64_t c = fv.shape[0], d = fv.shape[1], h = fv.shape[2], w = fv.shape[3];
  auto pooled = [](std::int64_t n) { return n > 1 ? (n + 1) / 2 : n; };
  std::int64_t pd = pooled(d), ph = pooled(h), pw = pooled(w);
  std::int64_t sd = d > 1 ? 2 : 1, sh = h > 1 ? 2 : 1, sw = w > 1 ? 2 : 1;
  Tensor out({c, pd, ph, pw});
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(out.numel()));
  std::int64_t oi = 0;
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t z = 0; z < pd; ++z)
      for (std::int64_t y = 0; y < ph; ++y)
        for (std::int64_t x = 0; x < pw; ++x, ++oi) {
          double best = -1e300;
          std::int64_t besti = -1;
          for (std::int64_t a = 0; a < sd; ++a)
            for (std::int64_t b = 0; b < sh; ++b)
              for (std::int64_t e = 0; e < sw; ++e) {
                std::int64_t zz = z * sd + a, yy = y * sh + b, xx = x * sw + e;
                if (zz >= d || yy >= h || xx >= w) continue;
                std::int64_t fi = ((ch * d + zz) * h + yy) * w + xx;
                if (fv.data[fi] > best) {
                  best = fv.data[fi];
                  besti = fi;
                }
              }
          out.data[oi] = best;
          argmax[static_cast<std::size_t>(oi)] = besti;
        }
  auto self = static_cast<std::int32_t>(nodes_.size());
  return push(std::move(out), [self, feat, argmax = std::move(argmax)](Graph& g) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor& gf = g.grad_ref(feat);
    for (std::size_t i = 0; i < argmax.size(); ++i) gf.data[argmax[i]] += go.data[i];
  });
}

}  // namespace medvg
