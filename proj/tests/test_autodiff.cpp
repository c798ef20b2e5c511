// Finite-difference validation of the reverse-mode tape, op by op and on a
// composite graph mixing attention-style pieces.

#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "medvg/autodiff.hpp"
#include "medvg/rng.hpp"

using namespace medvg;

namespace {

using Builder = std::function<Var(Graph&, const std::vector<Var>&)>;

double eval(const Builder& build, const std::vector<Tensor>& inputs) {
  Graph g;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(g.leaf(t));
  return g.value(build(g, vars)).item();
}

// Central finite differences on every element of every input; returns the
// maximum relative error against the analytic gradient.
double fd_max_rel_err(const Builder& build, std::vector<Tensor> inputs, double h = 1e-5) {
  Graph g;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(g.leaf(t));
  Var loss = build(g, vars);
  g.backward(loss);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::int64_t i = 0; i < inputs[k].numel(); ++i) {
      double orig = inputs[k].at(i);
      inputs[k].at(i) = orig + h;
      double fp = eval(build, inputs);
      inputs[k].at(i) = orig - h;
      double fm = eval(build, inputs);
      inputs[k].at(i) = orig;
      double fd = (fp - fm) / (2.0 * h);
      double an = g.grad(vars[k]).at(i);
      double rel = std::fabs(an - fd) / std::max(1e-6, std::fabs(an) + std::fabs(fd));
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

Tensor rand_t(std::vector<std::int64_t> shape, Rng& rng, double lo = -1.5, double hi = 1.5) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("quadratic gradient is exact to finite-difference order") {
  // d/dx sum(x*x) = 2x; central differences are exact for quadratics up to
  // roundoff, so the tolerance here is much tighter than the generic one.
  Builder quad = [](Graph& g, const std::vector<Var>& v) { return g.sum(g.mul(v[0], v[1])); };
  Rng rng(7);
  Tensor x = rand_t({5}, rng);
  CHECK(fd_max_rel_err([](Graph& g, const std::vector<Var>& v) { return g.sum(g.mul(v[0], v[0])); },
                       {x}) < 1e-9);
  Tensor y = rand_t({5}, rng);
  CHECK(fd_max_rel_err(quad, {x, y}) < 1e-9);
}

TEST_CASE("elementwise op gradients") {
  Rng rng(11);
  auto check = [&](const Builder& b, std::vector<Tensor> in, double tol = 1e-6) {
    CHECK(fd_max_rel_err(b, std::move(in)) < tol);
  };
  Tensor a = rand_t({2, 3}, rng), b2 = rand_t({2, 3}, rng);
  Tensor pos = rand_t({2, 3}, rng, 0.5, 2.0);  // away from log/abs kinks
  check([](Graph& g, const std::vector<Var>& v) { return g.sum(g.add(v[0], v[1])); }, {a, b2});
  check([](Graph& g, const std::vector<Var>& v) { return g.sum(g.sub(v[0], v[1])); }, {a, b2});
  check([](Graph& g, const std::vector<Var>& v) { return g.sum(g.div(v[0], v[1])); }, {a, pos});
  check([](Graph& g, const std::vector<Var>& v) { return g.sum(g.affine(v[0], 2.5, -1.0)); }, {a});
  check([](Graph& g, const std::vector<Var>& v) { return g.sum(g.sigmoid(v[0])); }, {a});
  check([](Graph& g, const std::vector<Var>& v) { return g.sum(g.log(v[0])); }, {pos});
  check([](Graph& g, const std::vector<Var>& v) { return g.sum(g.exp(v[0])); }, {a});
  check([](Graph& g, const std::vector<Var>& v) { return g.sum(g.pow_const(v[0], 3.0)); }, {pos});
  check([](Graph& g, const std::vector<Var>& v) { return g.sum(g.silu(v[0])); }, {a});
  check([](Graph& g, const std::vector<Var>& v) { return g.sum(g.abs(v[0])); }, {pos});
  check([](Graph& g, const std::vector<Var>& v) { return g.sum(g.elem_min(v[0], v[1])); },
        {a, b2});
  check([](Graph& g, const std::vector<Var>& v) { return g.sum(g.elem_max(v[0], v[1])); },
        {a, b2});
  check([](Graph& g, const std::vector<Var>& v) { return g.mean(v[0]); }, {a});
  check([](Graph& g, const std::vector<Var>& v) { return g.prod(v[0]); }, {pos});
}

TEST_CASE("linear algebra and shape op gradients") {
  Rng rng(13);
  Tensor a = rand_t({3, 4}, rng), b = rand_t({4, 2}, rng), c = rand_t({2, 4}, rng);
  Tensor row = rand_t({4}, rng);
  CHECK(fd_max_rel_err([](Graph& g, const std::vector<Var>& v) {
          return g.sum(g.matmul(v[0], v[1]));
        }, {a, b}) < 1e-6);
  CHECK(fd_max_rel_err([](Graph& g, const std::vector<Var>& v) {
          return g.sum(g.matmul_nt(v[0], v[1]));
        }, {a, c}) < 1e-6);
  CHECK(fd_max_rel_err([](Graph& g, const std::vector<Var>& v) {
          return g.sum(g.add_rowvec(v[0], v[1]));
        }, {a, row}) < 1e-6);
  CHECK(fd_max_rel_err([](Graph& g, const std::vector<Var>& v) {
          Var r = g.reshape(v[0], {4, 3});
          Var gathered = g.gather_rows(r, {0, 2, 2, 1});
          return g.sum(g.mul(gathered, gathered));
        }, {a}) < 1e-6);
  CHECK(fd_max_rel_err([](Graph& g, const std::vector<Var>& v) {
          Var cat = g.concat_rows({v[0], v[0]});
          Var sl = g.slice_rows(cat, 1, 3);
          return g.sum(g.mul(sl, sl));
        }, {a}) < 1e-6);
  CHECK(fd_max_rel_err([](Graph& g, const std::vector<Var>& v) {
          Var cat = g.concat_cols({v[0], v[0]});
          Var sl = g.slice_cols(cat, 2, 5);
          return g.sum(g.mul(sl, sl));
        }, {a}) < 1e-6);
  CHECK(fd_max_rel_err([](Graph& g, const std::vector<Var>& v) {
          // reverse all 12 elements via permute_general
          std::vector<std::int64_t> idx(12);
          for (std::int64_t i = 0; i < 12; ++i) idx[i] = 11 - i;
          Var p = g.permute_general(v[0], idx, {12});
          return g.sum(g.mul(p, p));
        }, {a}) < 1e-6);
}

TEST_CASE("neural composite op gradients") {
  Rng rng(17);
  Tensor x = rand_t({3, 4}, rng), w = rand_t({4}, rng, 0.5, 1.5);
  CHECK(fd_max_rel_err([](Graph& g, const std::vector<Var>& v) {
          Var s = g.row_softmax(v[0], Tensor{});
          return g.sum(g.mul(s, s));
        }, {x}) < 1e-6);
  CHECK(fd_max_rel_err([](Graph& g, const std::vector<Var>& v) {
          Var n = g.rmsnorm(v[0], v[1]);
          return g.sum(g.mul(n, n));
        }, {x, w}) < 1e-6);
  CHECK(fd_max_rel_err([](Graph& g, const std::vector<Var>& v) {
          Var r = g.rope(v[0], {0, 3, 5});
          return g.sum(g.mul(r, r));
        }, {x}) < 1e-6);
  Tensor logits = rand_t({3, 5}, rng);
  CHECK(fd_max_rel_err([](Graph& g, const std::vector<Var>& v) {
          return g.cross_entropy(v[0], {1, 4, 0}, {1.0, 0.0, 2.0});
        }, {logits}) < 1e-6);

  Rng rng2(18);
  Tensor img = rand_t({4, 4, 4}, rng2);
  Tensor kernel = rand_t({3, 2 * 2 * 2}, rng2);
  CHECK(fd_max_rel_err([&](Graph& g, const std::vector<Var>& v) {
          Var t = g.patch_embed(img, v[0], 2, 2, 2);
          return g.sum(g.mul(t, t));
        }, {kernel}) < 1e-6);

  Tensor feat = rand_t({2, 1, 2, 2}, rng2);  // [C,d,h,w]
  Tensor up = rand_t({2, 2, 2, 2}, rng2);  // [C, taps, 2, 2], taps=2
  CHECK(fd_max_rel_err([](Graph& g, const std::vector<Var>& v) {
          Var u = g.upsample_step(v[0], v[1]);
          return g.sum(g.mul(u, u));
        }, {feat, up}) < 1e-6);
  CHECK(fd_max_rel_err([](Graph& g, const std::vector<Var>& v) {
          Var p = g.maxpool2(v[0]);
          return g.sum(g.mul(p, p));
        }, {rand_t({2, 2, 4, 4}, rng2)}) < 1e-6);
}

TEST_CASE("composite attention-style graph gradient") {
  Rng rng(23);
  Tensor x = rand_t({4, 6}, rng), wq = rand_t({6, 6}, rng), wv = rand_t({6, 6}, rng);
  CHECK(fd_max_rel_err([](Graph& g, const std::vector<Var>& v) {
          Var q = g.matmul(v[0], v[1]);
          Var scores = g.scale(g.matmul_nt(q, v[0]), 0.5);
          Var attn = g.row_softmax(scores, Tensor{});
          Var out = g.matmul(attn, g.matmul(v[0], v[2]));
          return g.sum(g.mul(out, out));
        }, {x, wq, wv}) < 1e-6);
}
