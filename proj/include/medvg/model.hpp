#pragma once
// Desk-scale trainable networks: vision encoder with dynamic patch embedding,
// gated feed-forward adapter, causal language core with visual-expert
// parameter routing, low-rank adapters with rank-stabilized scaling, and the
// promptable localization decoder with mask and instance branches.

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "medvg/autodiff.hpp"
#include "medvg/geometry.hpp"
#include "medvg/grounding.hpp"
#include "medvg/matching.hpp"
#include "medvg/patching.hpp"

namespace medvg {

struct ModelConfig {
  std::int64_t embed_dim = 64;
  std::int64_t num_enc_layers = 2;
  std::int64_t num_lang_layers = 2;
  std::int64_t num_heads = 4;
  std::int64_t vocab_size = 0;       // set from the tokenizer
  std::int64_t m = 8;                // instance query slots
  std::int64_t t_d = 4;              // max depth tokens
  std::int64_t base_patch_depth = 4; // P_d (power of two)
  std::int64_t patch_hw = 4;         // height/width patch extent
  std::int64_t feature_pool_factor = 2;
  std::int64_t mask_channels = 16;
  std::int64_t lora_rank = 8;
  double lora_alpha = 8.0;
  bool lora_enabled = false;
  bool freeze_base = false;  // with adapters enabled, base weights stay fixed
  std::int64_t max_seq_len = 512;
  void validate() const;
};

struct Param {
  Tensor value;
  bool trainable = true;
  std::string group;  // parameter group for gradient-coverage reporting
};

class ParamStore {
 public:
  void add(const std::string& name, Tensor value, const std::string& group,
           bool trainable = true);
  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;
  bool has(const std::string& name) const { return params_.count(name) != 0; }
  std::map<std::string, Param>& all() { return params_; }
  const std::map<std::string, Param>& all() const { return params_; }

 private:
  std::map<std::string, Param> params_;
};

using LeafMap = std::map<std::string, Var>;

// gamma = alpha / sqrt(r)  (rank-stabilized scaling)
double lora_scaling(std::int64_t rank, double alpha);

// base path plus gamma * (x A) B
Var apply_lora(Graph& g, Var input, Var base_weight, Var down, Var up, double scaling);

class Model {
 public:
  Model(ModelConfig cfg, SpecialTokens specials, std::uint64_t init_seed);

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& config() { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const SpecialTokens& specials() const { return specials_; }

  LeafMap make_leaves(Graph& g) const;

  struct ImageEncoding {
    Var rows;                      // [d*h*w, dim], pooled grid for the language model
    std::int64_t d = 0, h = 0, w = 0;
    Var dec_rows;                  // [dd*dh*dw, dim], pre-pool grid for the decoder
    std::int64_t dd = 0, dh = 0, dw = 0;
    std::array<std::int64_t, 3> image_shape{1, 1, 1};
  };
  ImageEncoding encode_image(Graph& g, const Tensor& image, const PatchSpec& spec,
                             const LeafMap& lm) const;

  // Builds the PatchSpec for an image depth via the closed form.
  PatchSpec patch_spec_for(std::int64_t depth) const;

  struct VlmOut {
    Var hidden;       // [T_total, dim] last-layer hidden states
    Var text_logits;  // [T_text, vocab]
    std::int64_t img_tokens = 0;
  };
  // img may be null for text-only sequences (routing isolation).
  VlmOut forward_vlm(Graph& g, const ImageEncoding* img, const std::vector<TokenId>& tokens,
                     const LeafMap& lm) const;

  struct Localization {
    Var mask_logits;  // [D*H*W, 1] at image resolution
    std::array<std::int64_t, 3> mask_shape{1, 1, 1};
    Var boxes;        // [m, 6] normalized corner form (depth,height,width)
    Var presence;     // [m, 1] presence probabilities in (0,1)
  };
  Localization decode_localization(Graph& g, const ImageEncoding& img, Var prompt_embedding,
                                   const LeafMap& lm) const;

  std::vector<std::string> group_names() const;

 private:
  Var transformer_block(Graph& g, Var x, const std::string& prefix, const LeafMap& lm,
                        const Tensor& attn_mask, bool use_rope,
                        const std::vector<std::int64_t>& positions) const;
  Var routed_linear(Graph& g, Var x_img, Var x_txt, const std::string& base,
                    const LeafMap& lm) const;
  Var attention(Graph& g, Var q_in, Var kv_in, const std::string& prefix, const LeafMap& lm,
                const Tensor& attn_mask, bool use_rope,
                const std::vector<std::int64_t>& q_pos,
                const std::vector<std::int64_t>& k_pos) const;
  Var lang_layer(Graph& g, Var x, std::int64_t layer, std::int64_t img_len,
                 const Tensor& attn_mask, const std::vector<std::int64_t>& positions,
                 const LeafMap& lm) const;
  Var maybe_lora(Graph& g, Var x, const std::string& weight_name, const LeafMap& lm) const;

  ModelConfig cfg_;
  SpecialTokens specials_;
  ParamStore params_;
};

// Differentiable mask loss: (1 - soft Dice) + mean per-voxel focal.
Var graph_mask_loss(Graph& g, Var mask_logits, const VoxelMask& target, const FocalParams& fp);

// Matching on detached costs; gradients flow through the loss at the chosen
// assignment only.
struct GraphBoxSetLoss {
  Var loss;
  Assignment assignment;
};
GraphBoxSetLoss graph_box_set_loss(Graph& g, Var boxes, Var presence,
                                   const std::vector<InstanceLabel>& labels, std::int64_t m,
                                   const LossWeights& w, const FocalParams& fp);

// Analytic vs central finite differences over a sampled subset of every
// parameter group.
struct GradCheckResult {
  double max_rel_err = 0.0;
  std::map<std::string, double> group_grad_abs_max;
  bool all_groups_nonzero = false;
};
using LossFn = std::function<Var(Graph&, const LeafMap&)>;
GradCheckResult gradient_check(Model& model, const LossFn& loss_fn,
                               std::int64_t samples_per_param = 3, double step = 1e-5,
                               std::uint64_t seed = 17);

}  // namespace medvg
