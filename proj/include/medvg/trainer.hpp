#pragma once
// Single-threaded stage training: per-instance combined loss (language
// cross-entropy plus mask and box-set terms over grounded phrases), decoupled
// weight-decay adaptive-moment updates with global-norm clipping, and linear
// warmup into cosine decay.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "medvg/model.hpp"
#include "medvg/stages.hpp"

namespace medvg {

struct StageConfig {
  int stage = 1;
  std::int64_t steps = 200;
  std::int64_t batch_size = 2;
  double peak_lr = 1e-3;
  std::int64_t warmup_steps = 20;
  std::uint64_t seed = 0;
  TaskMixRates rates;
  double grounding_loss_weight = 1.0;  // 1:1 with the language term by default
  double weight_decay = 5e-2;  // decoupled (AdamW) weight decay
  void validate() const;
};

struct OptimConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-2;
  double clip_norm = 1.0;
};

struct LossParts {
  double lang = 0.0;
  double mask = 0.0;
  double box = 0.0;
  std::int64_t grounded_phrases = 0;
};

// Combined differentiable loss for one training instance. With
// grounding_weight == 0 the returned value is exactly the language term.
Var build_instance_loss(Graph& g, const LeafMap& lm, const Model& model,
                        const TrainingInstance& inst, double grounding_weight,
                        LossParts* parts = nullptr);

struct StepLog {
  std::int64_t step = 0;
  double loss = 0.0, lang = 0.0, mask = 0.0, box = 0.0;
  double lr = 0.0, grad_norm = 0.0;
};

class Trainer {
 public:
  Trainer(Model& model, StageConfig cfg, OptimConfig opt = {});

  StepLog step(const std::vector<const TrainingInstance*>& batch);
  double lr_at(std::int64_t step_index) const;  // linear warmup + cosine decay
  std::int64_t steps_taken() const { return t_; }

 private:
  Model& model_;
  StageConfig cfg_;
  OptimConfig opt_;
  struct Moments {
    Tensor m, v;
  };
  std::map<std::string, Moments> state_;
  std::int64_t t_ = 0;
};

// With adapters enabled and the base frozen, only adapter/head/localization
// parameters remain trainable.
void apply_freeze(Model& model);

std::vector<StepLog> train_stage(Model& model, const std::vector<TrainingInstance>& corpus,
                                 const StageConfig& cfg);

void write_metrics_log(const std::string& path, const std::vector<StepLog>& logs);

}  // namespace medvg
