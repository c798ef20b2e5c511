#include "medvg/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace medvg {

void LossWeights::validate() const {
  if (w_l1 < 0.0 || w_giou < 0.0 || w_disc < 0.0)
    throw ConfigError("LossWeights: weights must be non-negative");
}

std::vector<InstanceLabel> pad_labels(const std::vector<InstanceLabel>& labels, std::int64_t m) {
  if (static_cast<std::int64_t>(labels.size()) > m)
    throw CapacityError("pad_labels: more labels than instance slots (m too small)");
  for (const auto& l : labels)
    if (!l.positive) throw InputError("pad_labels: input labels must all be positive");
  std::vector<InstanceLabel> out = labels;
  out.resize(static_cast<std::size_t>(m));
  return out;
}

double pair_cost(const InstancePrediction& pred, const InstanceLabel& label,
                 const LossWeights& w, const FocalParams& fp) {
  w.validate();
  double cost = w.w_disc * focal_loss(pred.presence_prob, label.positive, fp);
  if (label.positive) {
    cost += w.w_l1 * l1_box(pred.box, label.box);
    cost += w.w_giou * (1.0 - giou(pred.box, label.box));
  }
  return cost;
}

namespace {

// Jonker-Volgenant style shortest augmenting path; O(n^3).
// Returns row -> column assignment for one optimal solution.
std::vector<std::int64_t> solve_optimal(const std::vector<std::vector<double>>& c) {
  const std::int64_t n = static_cast<std::int64_t>(c.size());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n + 1)), v(static_cast<std::size_t>(n + 1));
  std::vector<std::int64_t> p(static_cast<std::size_t>(n + 1), 0);    // column -> row (1-based)
  std::vector<std::int64_t> way(static_cast<std::size_t>(n + 1), 0);
  for (std::int64_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::int64_t j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(n + 1), inf);
    std::vector<char> used(static_cast<std::size_t>(n + 1), 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      std::int64_t i0 = p[static_cast<std::size_t>(j0)], j1 = -1;
      double delta = inf;
      for (std::int64_t j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        double cur = c[static_cast<std::size_t>(i0 - 1)][static_cast<std::size_t>(j - 1)] -
                     u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (std::int64_t j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      std::int64_t j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::int64_t> row_to_col(static_cast<std::size_t>(n), -1);
  for (std::int64_t j = 1; j <= n; ++j)
    row_to_col[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
  return row_to_col;
}

// Ordered sum along a permutation, ascending row index; matches how the
// brute-force oracle accumulates, so equal permutations give equal doubles.
double ordered_total(const std::vector<std::vector<double>>& c,
                     const std::vector<std::int64_t>& perm) {
  double t = 0.0;
  for (std::size_t i = 0; i < perm.size(); ++i)
    t += c[i][static_cast<std::size_t>(perm[i])];
  return t;
}

}  // namespace

Assignment hungarian(const std::vector<std::vector<double>>& cost) {
  const std::int64_t n = static_cast<std::int64_t>(cost.size());
  if (n == 0) throw InputError("hungarian: empty matrix");
  for (const auto& row : cost) {
    if (static_cast<std::int64_t>(row.size()) != n)
      throw InputError("hungarian: matrix must be square");
    for (double x : row)
      if (!std::isfinite(x)) throw InputError("hungarian: entries must be finite");
  }

  // Fix rows one at a time, choosing for each the smallest column that still
  // admits an optimal completion; yields the lexicographically smallest
  // co-optimal permutation.
  std::vector<std::int64_t> perm(static_cast<std::size_t>(n), -1);
  std::vector<char> col_used(static_cast<std::size_t>(n), 0);
  double prefix = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    std::vector<std::int64_t> free_cols;
    for (std::int64_t j = 0; j < n; ++j)
      if (!col_used[static_cast<std::size_t>(j)]) free_cols.push_back(j);
    std::int64_t best_j = -1;
    double best_total = std::numeric_limits<double>::infinity();
    std::vector<std::int64_t> rest_rows;
    for (std::int64_t r = i + 1; r < n; ++r) rest_rows.push_back(r);
    for (std::int64_t j : free_cols) {
      double rest = 0.0;
      if (!rest_rows.empty()) {
        std::vector<std::vector<double>> sub;
        sub.reserve(rest_rows.size());
        std::vector<std::int64_t> sub_cols;
        for (std::int64_t cidx : free_cols)
          if (cidx != j) sub_cols.push_back(cidx);
        for (std::int64_t r : rest_rows) {
          std::vector<double> row;
          row.reserve(sub_cols.size());
          for (std::int64_t cidx : sub_cols) row.push_back(cost[static_cast<std::size_t>(r)][static_cast<std::size_t>(cidx)]);
          sub.push_back(std::move(row));
        }
        auto sub_assign = solve_optimal(sub);
        std::vector<std::int64_t> full(rest_rows.size());
        for (std::size_t r = 0; r < rest_rows.size(); ++r)
          full[r] = sub_cols[static_cast<std::size_t>(sub_assign[r])];
        double t = prefix + cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        for (std::size_t r = 0; r < rest_rows.size(); ++r)
          t += cost[static_cast<std::size_t>(rest_rows[r])][static_cast<std::size_t>(full[r])];
        rest = t;
      } else {
        rest = prefix + cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      }
      if (rest < best_total) {
        best_total = rest;
        best_j = j;
      }
    }
    perm[static_cast<std::size_t>(i)] = best_j;
    col_used[static_cast<std::size_t>(best_j)] = 1;
    prefix += cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(best_j)];
  }

  Assignment out;
  out.perm = std::move(perm);
  out.total_cost = ordered_total(cost, out.perm);
  return out;
}

BoxSetLossResult box_set_loss(const std::vector<InstancePrediction>& preds,
                              const std::vector<InstanceLabel>& labels, std::int64_t m,
                              const LossWeights& w, const FocalParams& fp) {
  if (static_cast<std::int64_t>(preds.size()) != m)
    throw ShapeError("box_set_loss: prediction count must equal m");
  BoxSetLossResult res;
  res.padded_labels = pad_labels(labels, m);
  std::vector<std::vector<double>> cost(static_cast<std::size_t>(m),
                                        std::vector<double>(static_cast<std::size_t>(m)));
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < m; ++j)
      cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
          pair_cost(preds[static_cast<std::size_t>(i)], res.padded_labels[static_cast<std::size_t>(j)], w, fp);
  res.assignment = hungarian(cost);
  res.loss = res.assignment.total_cost;
  return res;
}

double mask_loss(const Tensor& pred_logits, const VoxelMask& target, const FocalParams& fp) {
  if (pred_logits.numel() != target.numel())
    throw ShapeError("mask_loss: logits/target shape mismatch");
  double inter = 0.0, psum = 0.0;
  std::int64_t tsum = 0;
  double focal_sum = 0.0;
  for (std::size_t i = 0; i < pred_logits.data.size(); ++i) {
    double p = 1.0 / (1.0 + std::exp(-pred_logits.data[i]));
    int t = target.data[i];
    inter += p * static_cast<double>(t);
    psum += p;
    tsum += t;
    focal_sum += focal_loss(p, t, fp);
  }
  double denom = psum + static_cast<double>(tsum);
  double soft_dice = denom > 0.0 ? 2.0 * inter / denom : 1.0;
  return (1.0 - soft_dice) + focal_sum / static_cast<double>(pred_logits.numel());
}

}  // namespace medvg
