#pragma once
// Instance set prediction: ground-truth padding, pairwise costs, exact
// minimum-cost assignment, and the assembled box-set and mask losses.

#include <cstdint>
#include <vector>

#include "medvg/geometry.hpp"
#include "medvg/tensor.hpp"

namespace medvg {

struct InstanceLabel {
  Box box;            // meaningful only when positive
  int positive = 0;   // c_i in {0,1}
};

struct InstancePrediction {
  Box box;
  double presence_prob = 0.5;  // clamped per geometry rules before use
};

struct Assignment {
  // perm[i] = label index assigned to prediction i; a permutation of 0..m-1
  std::vector<std::int64_t> perm;
  double total_cost = 0.0;
};

struct LossWeights {
  double w_l1 = 5.0;
  double w_giou = 2.0;
  double w_disc = 1.0;
  void validate() const;
};

// Pads with dummy negatives up to m slots. All inputs must be positive labels.
std::vector<InstanceLabel> pad_labels(const std::vector<InstanceLabel>& labels, std::int64_t m);

double pair_cost(const InstancePrediction& pred, const InstanceLabel& label,
                 const LossWeights& w, const FocalParams& fp);

// Exact minimum-cost assignment. Among co-optimal permutations returns the
// lexicographically smallest. Entries must be finite; matrix must be square.
Assignment hungarian(const std::vector<std::vector<double>>& cost);

struct BoxSetLossResult {
  double loss = 0.0;
  Assignment assignment;
  std::vector<InstanceLabel> padded_labels;
};

BoxSetLossResult box_set_loss(const std::vector<InstancePrediction>& preds,
                              const std::vector<InstanceLabel>& labels, std::int64_t m,
                              const LossWeights& w, const FocalParams& fp);

// (1 - soft Dice on sigmoid(logits)) + mean per-voxel focal loss, weights 1:1.
double mask_loss(const Tensor& pred_logits, const VoxelMask& target, const FocalParams& fp);

}  // namespace medvg
