#include "ralign/lm.hpp"

#include <stdexcept>

namespace ralign {

ToyLM ToyLM::create(const LmConfig& cfg, u64 seed) {
  ToyLM lm;
  lm.cfg_ = cfg;
  Rng rng(derive_seed(seed, "toy_lm"));
  lm.tok_emb_ = Tensor::randn({cfg.vocab, cfg.d}, rng, 0.02);
  lm.pos_emb_ = Tensor::randn({cfg.max_len, cfg.d}, rng, 0.02);
  for (int i = 0; i < cfg.layers; ++i)
    lm.blocks_.push_back(TransformerBlock::create(cfg.d, cfg.heads, 2 * cfg.d, rng));
  lm.ln_f_ = LayerNorm::create(cfg.d);
  return lm;
}

Tensor ToyLM::embed(const std::vector<int>& ids, int pos_offset) const {
  const int n = static_cast<int>(ids.size());
  if (pos_offset + n > cfg_.max_len)
    throw std::runtime_error("lm: sequence length exceeds positional capacity");
  Tensor tok = embedding(tok_emb_, ids);
  Tensor pos = slice(pos_emb_, 0, pos_offset, n);
  return add(tok, pos);
}

Tensor ToyLM::hidden(const Tensor& x, const Tensor& mask,
                     const std::vector<AttnAdapters>* adapters) const {
  if (adapters && adapters->size() != blocks_.size())
    throw std::runtime_error("lm: adapter count does not match layer count");
  Tensor h = x;
  for (size_t i = 0; i < blocks_.size(); ++i)
    h = blocks_[i].forward(h, &mask, adapters ? &(*adapters)[i] : nullptr);
  return ln_f_.forward(h);
}

Tensor ToyLM::logits(const Tensor& h) const {
  return matmul(h, transpose(tok_emb_, 0, 1));
}

Tensor ToyLM::assemble(const Tensor& soft_prefix, const std::vector<int>& text_ids,
                       Tensor* mask_out) const {
  const int p = soft_prefix.data && soft_prefix.rank() == 2 ? soft_prefix.shape[0] : 0;
  const int s = p + static_cast<int>(text_ids.size());
  if (s > cfg_.max_len)
    throw std::runtime_error("lm: sequence length exceeds positional capacity");
  Tensor x;
  if (p > 0) {
    Tensor pre = add(soft_prefix, slice(pos_emb_, 0, 0, p));
    x = text_ids.empty() ? pre : concat({pre, embed(text_ids, p)}, 0);
  } else {
    x = embed(text_ids, 0);
  }
  if (mask_out) *mask_out = prefix_causal_mask(s, p);
  return x;
}

Tensor ToyLM::loss(const Tensor& soft_prefix, const std::vector<int>& prompt_ids,
                   const std::vector<int>& target_ids,
                   const std::vector<AttnAdapters>* adapters) const {
  if (prompt_ids.empty())
    throw std::runtime_error("lm: prompt must contain at least one token");
  if (target_ids.empty()) throw std::runtime_error("lm: empty target");
  const int p = soft_prefix.data && soft_prefix.rank() == 2 ? soft_prefix.shape[0] : 0;
  const int np = static_cast<int>(prompt_ids.size());
  const int nt = static_cast<int>(target_ids.size());

  std::vector<int> text = prompt_ids;
  text.insert(text.end(), target_ids.begin(), target_ids.end());
  Tensor mask;
  Tensor x = assemble(soft_prefix, text, &mask);
  Tensor h = hidden(x, mask, adapters);

  // Position p+np-1+j predicts target j.
  Tensor rows = slice(h, 0, p + np - 1, nt);
  Tensor lsm = log_softmax(logits(rows), -1);
  Tensor pick = Tensor::zeros({nt, cfg_.vocab});
  for (int j = 0; j < nt; ++j) {
    if (target_ids[size_t(j)] < 0 || target_ids[size_t(j)] >= cfg_.vocab)
      throw std::runtime_error("lm: target token id out of range");
    (*pick.data)[static_cast<size_t>(j) * cfg_.vocab + target_ids[size_t(j)]] = 1.0f;
  }
  return mul_scalar(sum(mul(lsm, pick)), -1.0 / nt);
}

std::vector<int> ToyLM::greedy_decode(const Tensor& soft_prefix,
                                      const std::vector<int>& prompt_ids, int max_new,
                                      int eos_id,
                                      const std::vector<AttnAdapters>* adapters) const {
  std::vector<int> text = prompt_ids;
  std::vector<int> out;
  for (int step = 0; step < max_new; ++step) {
    Tensor mask;
    Tensor x = assemble(soft_prefix, text, &mask);
    Tensor h = hidden(x, mask, adapters);
    Tensor row = slice(h, 0, x.shape[0] - 1, 1);
    Tensor lg = logits(row);  // [1, V]
    int best = 0;
    for (int v = 1; v < cfg_.vocab; ++v)
      if (lg.at(size_t(v)) > lg.at(size_t(best))) best = v;
    if (best == eos_id) break;
    out.push_back(best);
    text.push_back(best);
    if (static_cast<int>(text.size()) +
            (soft_prefix.data && soft_prefix.rank() == 2 ? soft_prefix.shape[0] : 0) >=
        cfg_.max_len)
      break;
  }
  return out;
}

void ToyLM::register_params(ParamRegistry& reg, const std::string& prefix) {
  reg.add(prefix + ".tok_emb", &tok_emb_);
  reg.add(prefix + ".pos_emb", &pos_emb_);
  for (size_t i = 0; i < blocks_.size(); ++i)
    blocks_[i].register_params(reg, prefix + ".block" + std::to_string(i));
  ln_f_.register_params(reg, prefix + ".ln_f");
}

}  // namespace ralign
