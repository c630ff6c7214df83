#pragma once

#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ralign/data_types.hpp"
#include "ralign/losses.hpp"
#include "ralign/model.hpp"

namespace ralign {

// Settings for one optimization stage.
struct TrainConfig {
  double peak_lr = 1e-4;
  double min_lr = 1e-5;
  int warmup_steps = 200;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
  double clip_norm = 1.0;  // global gradient-norm cap; <= 0 disables clipping
  int total_steps = 1000;
  int batch_size = 8;
  double lambda = 1.0;  // weight of the box-regression term in the combined loss
  u64 seed = 0;
  std::vector<Modality> modality_order;
  bool use_pafe = true;

  void validate() const;  // throws ConfigError on inconsistent settings
};

// Piecewise learning-rate schedule: linear ramp from 0 to peak_lr over
// warmup_steps, then a half cosine from peak_lr down to min_lr at
// total_steps. Continuous at the warmup boundary.
double lr_at(int step, const TrainConfig& cfg);

// Adam with decoupled weight decay and bias-corrected moments. Moment state
// is keyed by parameter name with a per-parameter step count, so parameters
// that sit out some steps (no gradient recorded) still get correct bias
// correction when they participate again.
class AdamW {
 public:
  AdamW(double beta1, double beta2, double eps, double weight_decay);

  // One update over `params` using gradients recorded on `tape`. Parameters
  // the tape never saw are skipped entirely (no decay, no moment update).
  // Gradients are clipped jointly to `clip_norm` (disabled when <= 0);
  // returns the pre-clip global gradient norm. Throws when any gradient is
  // not finite, naming the parameter.
  double step(const Tape& tape,
              const std::vector<std::pair<std::string, Tensor*>>& params, double lr,
              double clip_norm);

  bool has_state_for(const std::string& name) const;
  size_t state_size() const { return state_.size(); }

 private:
  struct Moments {
    int t = 0;
    std::vector<double> m, v;
  };
  double b1_, b2_, eps_, wd_;
  std::map<std::string, Moments> state_;
};

// One scheduled slot of an epoch: a homogeneous batch given as indices into
// that modality's dataset.
struct BatchPlanEntry {
  Modality modality = Modality::img_text;
  std::vector<size_t> indices;
};

// One epoch of the sequential multi-modality schedule: every batch of
// order[0]'s dataset (seeded shuffle, trailing partial batch kept), then
// order[1]'s, and so on. Each sample index appears exactly once per epoch.
// Distinct epochs derive distinct shuffle seeds; the segmentation by
// modality never changes.
std::vector<BatchPlanEntry> semi_hybrid_epoch(const std::map<Modality, size_t>& sizes,
                                              const std::vector<Modality>& order,
                                              int batch_size, u64 seed, int epoch);

// Per-step record, serializable as one JSONL line.
struct StepReport {
  int step = 0;
  Modality modality = Modality::img_text;
  double itc = 0, itg = 0, itm = 0, llm = 0, reg = 0;
  bool has_reg = false;
  double total = 0;
  double lr = 0;
  double grad_norm = 0;  // pre-clip global norm
};

std::string step_report_json(const StepReport& r);

// Drives optimization of one stage: freezes everything outside the selected
// parameter set, keeps one optimizer state per modality (sequential modality
// segments would otherwise cross-contaminate moments), and advances the
// learning-rate schedule one tick per step.
class Trainer {
 public:
  Trainer(Model& model, const TrainConfig& cfg,
          const std::function<bool(const std::string&)>& trainable);

  // One optimization step on a homogeneous batch through the combined
  // multi-task loss.
  StepReport train_step(const std::vector<Sample>& batch);

  // One optimization step of next-token caption modeling on the language
  // model alone, conditioned on the modality prompt (used to manufacture the
  // frozen generator before alignment training).
  StepReport train_step_lm(const std::vector<Sample>& batch);

  int step() const { return step_; }
  const std::vector<std::pair<std::string, Tensor*>>& trainable_params() const {
    return trainable_;
  }
  const TrainConfig& config() const { return cfg_; }

 private:
  Model& model_;
  TrainConfig cfg_;
  std::vector<std::pair<std::string, Tensor*>> trainable_;
  std::map<Modality, AdamW> opt_;
  int step_ = 0;

  AdamW& opt_for(Modality m);
};

}  // namespace ralign
