#include "ralign/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

#include "json.hpp"

namespace ralign {

void TrainConfig::validate() const {
  if (!(min_lr > 0.0)) throw ConfigError("min_lr must be positive");
  if (!(min_lr <= peak_lr)) throw ConfigError("min_lr must not exceed peak_lr");
  if (warmup_steps < 0) throw ConfigError("warmup_steps must be non-negative");
  if (total_steps <= warmup_steps)
    throw ConfigError("total_steps must exceed warmup_steps");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("beta1 and beta2 must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("eps must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (lambda < 0.0) throw ConfigError("lambda must be non-negative");
}

double lr_at(int step, const TrainConfig& cfg) {
  if (step < 0 || step > cfg.total_steps)
    throw std::runtime_error("lr_at: step " + std::to_string(step) +
                             " outside [0, " + std::to_string(cfg.total_steps) + "]");
  if (step < cfg.warmup_steps)
    return cfg.peak_lr * static_cast<double>(step) / cfg.warmup_steps;
  const double phase = static_cast<double>(step - cfg.warmup_steps) /
                       static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  return cfg.min_lr +
         0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + std::cos(M_PI * phase));
}

AdamW::AdamW(double beta1, double beta2, double eps, double weight_decay)
    : b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {}

bool AdamW::has_state_for(const std::string& name) const {
  return state_.count(name) != 0;
}

double AdamW::step(const Tape& tape,
                   const std::vector<std::pair<std::string, Tensor*>>& params,
                   double lr, double clip_norm) {
  struct Active {
    const std::string* name;
    Tensor* param;
    const Tensor* grad;
  };
  std::vector<Active> active;
  active.reserve(params.size());
  double sq = 0.0;
  for (const auto& [name, t] : params) {
    const Tensor* g = tape.grad_of(*t);
    if (!g) continue;
    if (g->numel() != t->numel())
      throw std::runtime_error("optimizer: gradient shape mismatch for '" + name + "'");
    for (float v : *g->data) {
      if (!std::isfinite(v))
        throw std::runtime_error("optimizer: gradient for '" + name +
                                 "' is not finite");
      sq += static_cast<double>(v) * static_cast<double>(v);
    }
    active.push_back({&name, t, g});
  }
  const double norm = std::sqrt(sq);
  const double scale =
      (clip_norm > 0.0 && norm > clip_norm) ? clip_norm / norm : 1.0;

  for (Active& a : active) {
    Moments& st = state_[*a.name];
    const size_t n = a.param->numel();
    if (st.m.empty()) {
      st.m.assign(n, 0.0);
      st.v.assign(n, 0.0);
    }
    st.t += 1;
    const double bc1 = 1.0 - std::pow(b1_, st.t);
    const double bc2 = 1.0 - std::pow(b2_, st.t);
    std::vector<float>& w = *a.param->data;
    const std::vector<float>& g = *a.grad->data;
    for (size_t i = 0; i < n; ++i) {
      const double gi = static_cast<double>(g[i]) * scale;
      st.m[i] = b1_ * st.m[i] + (1.0 - b1_) * gi;
      st.v[i] = b2_ * st.v[i] + (1.0 - b2_) * gi * gi;
      const double mhat = st.m[i] / bc1;
      const double vhat = st.v[i] / bc2;
      double wi = static_cast<double>(w[i]);
      wi -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd_ * wi);
      w[i] = static_cast<float>(wi);
    }
    a.param->has_exact = false;
  }
  return norm;
}

std::vector<BatchPlanEntry> semi_hybrid_epoch(const std::map<Modality, size_t>& sizes,
                                              const std::vector<Modality>& order,
                                              int batch_size, u64 seed, int epoch) {
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (order.empty()) throw ConfigError("modality_order must not be empty");
  std::set<Modality> seen;
  for (Modality m : order)
    if (!seen.insert(m).second)
      throw ConfigError("modality_order lists '" + std::string(modality_name(m)) +
                        "' more than once");

  std::vector<BatchPlanEntry> plan;
  for (Modality m : order) {
    auto it = sizes.find(m);
    if (it == sizes.end() || it->second == 0)
      throw std::runtime_error("epoch schedule: dataset for modality '" +
                               std::string(modality_name(m)) + "' is empty");
    std::vector<size_t> idx(it->second);
    std::iota(idx.begin(), idx.end(), size_t{0});
    Rng rng(derive_seed(seed, "epoch/" + std::to_string(epoch) + "/" +
                                  modality_name(m)));
    rng.shuffle(idx);
    for (size_t off = 0; off < idx.size(); off += static_cast<size_t>(batch_size)) {
      BatchPlanEntry e;
      e.modality = m;
      const size_t end = std::min(idx.size(), off + static_cast<size_t>(batch_size));
      e.indices.assign(idx.begin() + static_cast<long>(off),
                       idx.begin() + static_cast<long>(end));
      plan.push_back(std::move(e));
    }
  }
  return plan;
}

std::string step_report_json(const StepReport& r) {
  nlohmann::json j;
  j["step"] = r.step;
  j["modality"] = modality_name(r.modality);
  j["itc"] = r.itc;
  j["itg"] = r.itg;
  j["itm"] = r.itm;
  j["llm"] = r.llm;
  j["reg"] = r.reg;
  j["total"] = r.total;
  j["lr"] = r.lr;
  j["grad_norm"] = r.grad_norm;
  return j.dump();
}

Trainer::Trainer(Model& model, const TrainConfig& cfg,
                 const std::function<bool(const std::string&)>& trainable)
    : model_(model), cfg_(cfg) {
  cfg_.validate();
  ParamRegistry& reg = model_.params();
  reg.set_trainable(trainable);
  for (const auto& [name, t] : reg.items())
    if (t->requires_grad) trainable_.emplace_back(name, t);
  if (trainable_.empty())
    throw ConfigError("trainer: the trainable-parameter selection is empty");
}

AdamW& Trainer::opt_for(Modality m) {
  auto it = opt_.find(m);
  if (it == opt_.end())
    it = opt_.emplace(m, AdamW(cfg_.beta1, cfg_.beta2, cfg_.eps, cfg_.weight_decay))
             .first;
  return it->second;
}

StepReport Trainer::train_step(const std::vector<Sample>& batch) {
  if (step_ >= cfg_.total_steps)
    throw std::runtime_error("trainer: schedule exhausted after " +
                             std::to_string(cfg_.total_steps) + " steps");
  step_ += 1;
  StepReport r;
  r.step = step_;
  r.modality = batch.empty() ? Modality::img_text : batch[0].modality;
  r.lr = lr_at(step_, cfg_);

  Tape tape;
  TapeGuard guard(tape);
  LossBreakdown lb = combined_loss(model_, batch, cfg_.lambda, cfg_.use_pafe);
  tape.backward(lb.total);
  r.grad_norm = opt_for(r.modality).step(tape, trainable_, r.lr, cfg_.clip_norm);

  r.itc = lb.itc.scalar();
  r.itg = lb.itg.scalar();
  r.itm = lb.itm.scalar();
  r.llm = lb.llm.scalar();
  r.has_reg = lb.has_reg;
  r.reg = lb.has_reg ? lb.reg.scalar() : 0.0;
  r.total = lb.total.scalar();
  return r;
}

StepReport Trainer::train_step_lm(const std::vector<Sample>& batch) {
  if (batch.empty()) throw std::runtime_error("train_step_lm: batch is empty");
  const Modality mod = batch[0].modality;
  for (const Sample& s : batch)
    if (s.modality != mod)
      throw std::runtime_error("train_step_lm: batch mixes modalities");
  if (step_ >= cfg_.total_steps)
    throw std::runtime_error("trainer: schedule exhausted after " +
                             std::to_string(cfg_.total_steps) + " steps");
  step_ += 1;
  StepReport r;
  r.step = step_;
  r.modality = mod;
  r.lr = lr_at(step_, cfg_);

  const Vocab& vocab = model_.vocab();
  const std::vector<int> prompt = Model::prompt_ids(mod, vocab);

  Tape tape;
  TapeGuard guard(tape);
  Tensor none;  // no soft prefix: plain prompted next-token modeling
  std::vector<Tensor> terms;
  terms.reserve(batch.size());
  for (const Sample& s : batch) {
    std::vector<int> target = vocab.encode(s.caption, false, false);
    target.push_back(Vocab::kEos);
    terms.push_back(reshape(model_.lm().loss(none, prompt, target), {1}));
  }
  Tensor total = mean(concat(terms, 0));
  if (!std::isfinite(total.scalar()))
    throw std::runtime_error("loss component 'llm' is not finite");
  tape.backward(total);
  r.grad_norm = opt_for(mod).step(tape, trainable_, r.lr, cfg_.clip_norm);

  r.llm = total.scalar();
  r.total = r.llm;
  return r;
}

}  // namespace ralign
