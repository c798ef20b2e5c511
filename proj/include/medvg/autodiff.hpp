#pragma once
// Reverse-mode differentiation over a per-forward-pass tape of dense tensors.
// Nodes are created in topological order; backward() walks the tape in
// reverse. One Graph per forward pass; parameters enter as leaves and their
// gradients are read back by id after backward().

#include <cstdint>
#include <functional>
#include <vector>

#include "medvg/tensor.hpp"

namespace medvg {

struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // --- tape access -------------------------------------------------------
  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  const Tensor& grad(Var v) const { return nodes_[v.id].grad; }
  std::size_t size() const { return nodes_.size(); }

  void backward(Var loss);

  // --- leaves ------------------------------------------------------------
  Var leaf(const Tensor& t);       // differentiable input (parameter)
  Var constant(const Tensor& t);   // treated as a leaf; grad unused by caller

  // --- elementwise -------------------------------------------------------
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var scale(Var a, double c);
  Var affine(Var a, double k, double b);  // k*a + b
  Var neg(Var a) { return scale(a, -1.0); }
  Var sigmoid(Var a);
  Var log(Var a);
  Var exp(Var a);
  Var pow_const(Var a, double p);
  Var relu(Var a);
  Var silu(Var a);
  Var abs(Var a);
  Var elem_min(Var a, Var b);
  Var elem_max(Var a, Var b);

  // --- reductions --------------------------------------------------------
  Var sum(Var a);
  Var mean(Var a);
  Var prod(Var a);  // product of all elements (small tensors)

  // --- linear algebra ----------------------------------------------------
  Var matmul(Var a, Var b);     // [m,k] x [k,n]
  Var matmul_nt(Var a, Var b);  // [m,k] x [n,k]^T -> [m,n]
  Var add_rowvec(Var a, Var b);  // [m,n] + broadcast [n]

  // --- shape / indexing --------------------------------------------------
  Var reshape(Var a, std::vector<std::int64_t> shape);
  Var gather_rows(Var a, std::vector<std::int64_t> idx);
  Var concat_rows(const std::vector<Var>& parts);
  Var concat_cols(const std::vector<Var>& parts);
  Var slice_rows(Var a, std::int64_t start, std::int64_t len);
  Var slice_cols(Var a, std::int64_t start, std::int64_t len);
  // [C,d,h,w] -> [d*h*w, C] and back
  Var channels_to_rows(Var a);
  Var rows_to_channels(Var a, std::vector<std::int64_t> cdhw);
  // out.data[i] = in.data[src_index[i]]; arbitrary static reindexing
  Var permute_general(Var a, std::vector<std::int64_t> src_index,
                      std::vector<std::int64_t> out_shape);

  // --- neural-net composites ---------------------------------------------
  // softmax over rows of (a + mask); mask may be empty
  Var row_softmax(Var a, const Tensor& additive_mask);
  Var rmsnorm(Var a, Var weight, double eps = 1e-6);
  // rotary embedding over column pairs, one position per row
  Var rope(Var a, const std::vector<std::int64_t>& positions, double base = 10000.0);
  // mean over weighted positions of -log softmax(logits)[target]
  Var cross_entropy(Var logits, const std::vector<std::int64_t>& targets,
                    const std::vector<double>& weights);
  // single-channel image [D,H,W] embedded with kernel [C, pd*ph*pw] at stride
  // (pd,ph,pw); depth zero-padded to a multiple of pd; output [Td*Th*Tw, C]
  Var patch_embed(const Tensor& image, Var kernel, std::int64_t pd, std::int64_t ph,
                  std::int64_t pw);
  // depthwise transposed conv, scale 2 on h/w and (taps==2 ? 2 : 1) on depth;
  // feat [C,d,h,w], kernel [C, taps, 2, 2]
  Var upsample_step(Var feat, Var kernel);
  // max pool by 2 (ceil) along each spatial axis whose extent exceeds 1
  Var maxpool2(Var feat);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::function<void(Graph&)> backward;
  };

  Var push(Tensor value, std::function<void(Graph&)> backward);
  Tensor& grad_ref(Var v) { return nodes_[v.id].grad; }

  std::vector<Node> nodes_;
  friend struct GraphDetail;
};

}  // namespace medvg
