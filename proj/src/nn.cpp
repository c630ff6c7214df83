#include "ralign/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace ralign {

void ParamRegistry::add(const std::string& name, Tensor* t) {
  if (by_name_.count(name))
    throw std::runtime_error("ParamRegistry: duplicate parameter name '" + name + "'");
  by_name_[name] = items_.size();
  items_.emplace_back(name, t);
}

Tensor* ParamRegistry::find(const std::string& name) {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? nullptr : items_[it->second].second;
}

const Tensor* ParamRegistry::find(const std::string& name) const {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? nullptr : items_[it->second].second;
}

std::vector<std::string> ParamRegistry::names() const {
  std::vector<std::string> out;
  out.reserve(items_.size());
  for (const auto& [n, _] : items_) out.push_back(n);
  return out;
}

void ParamRegistry::set_trainable(const std::function<bool(const std::string&)>& pred) {
  for (auto& [n, t] : items_) t->requires_grad = pred(n);
}

LinearLayer LinearLayer::create(int in, int out, Rng& rng, bool bias, double sigma) {
  LinearLayer l;
  l.W = Tensor::randn({out, in}, rng, sigma);
  l.has_bias = bias;
  if (bias) l.b = Tensor::zeros({out});
  return l;
}

Tensor LinearLayer::forward(const Tensor& x) const {
  Tensor y = matmul(x, transpose(W, 0, 1));
  if (has_bias) y = add(y, b);
  return y;
}

void LinearLayer::register_params(ParamRegistry& reg, const std::string& prefix) {
  reg.add(prefix + ".weight", &W);
  if (has_bias) reg.add(prefix + ".bias", &b);
}

LoraAdapter LoraAdapter::create(int in, int out, int r, double alpha, Rng& rng,
                                double sigma) {
  LoraAdapter a;
  a.A = Tensor::randn({r, in}, rng, sigma);
  a.B = Tensor::zeros({out, r});
  a.r = r;
  a.alpha = alpha;
  return a;
}

void LoraAdapter::register_params(ParamRegistry& reg, const std::string& prefix) {
  reg.add(prefix + ".lora_a", &A);
  reg.add(prefix + ".lora_b", &B);
}

Tensor lora_forward(const Tensor& x, const LinearLayer& base, const LoraAdapter* adapter) {
  Tensor y = base.forward(x);
  if (!adapter) return y;
  Tensor low = matmul(x, transpose(adapter->A, 0, 1));        // [..., r]
  Tensor up = matmul(low, transpose(adapter->B, 0, 1));       // [..., out]
  return add(y, mul_scalar(up, adapter->alpha / adapter->r));
}

LinearLayer lora_merge(const LinearLayer& base, const LoraAdapter& adapter) {
  LinearLayer merged;
  merged.W = base.W.detached_copy();
  merged.has_bias = base.has_bias;
  if (base.has_bias) merged.b = base.b.detached_copy();
  const int out = merged.W.shape[0];
  const int in = merged.W.shape[1];
  if (adapter.A.shape[1] != in || adapter.B.shape[0] != out)
    throw std::runtime_error("lora_merge: adapter shape does not match base layer");
  const double scale = adapter.alpha / adapter.r;
  for (int o = 0; o < out; ++o) {
    for (int i = 0; i < in; ++i) {
      double acc = 0.0;
      for (int k = 0; k < adapter.r; ++k)
        acc += static_cast<double>(adapter.B.at(static_cast<size_t>(o) * adapter.r + k)) *
               static_cast<double>(adapter.A.at(static_cast<size_t>(k) * in + i));
      float& w = (*merged.W.data)[static_cast<size_t>(o) * in + i];
      w = static_cast<float>(static_cast<double>(w) + scale * acc);
    }
  }
  return merged;
}

LayerNorm LayerNorm::create(int d) {
  LayerNorm ln;
  ln.gamma = Tensor::full({d}, 1.0f);
  ln.beta = Tensor::zeros({d});
  return ln;
}

Tensor LayerNorm::forward(const Tensor& x) const {
  Tensor m = mean(x, -1, true);
  Tensor c = sub(x, m);
  Tensor v = mean(mul(c, c), -1, true);
  Tensor inv = pow_scalar(add_scalar(v, eps), -0.5);
  return add(mul(mul(c, inv), gamma), beta);
}

void LayerNorm::register_params(ParamRegistry& reg, const std::string& prefix) {
  reg.add(prefix + ".gamma", &gamma);
  reg.add(prefix + ".beta", &beta);
}

FeedForward FeedForward::create(int d, int hidden, Rng& rng) {
  FeedForward f;
  f.fc1 = LinearLayer::create(d, hidden, rng);
  f.fc2 = LinearLayer::create(hidden, d, rng);
  return f;
}

Tensor FeedForward::forward(const Tensor& x) const {
  return fc2.forward(gelu(fc1.forward(x)));
}

void FeedForward::register_params(ParamRegistry& reg, const std::string& prefix) {
  fc1.register_params(reg, prefix + ".fc1");
  fc2.register_params(reg, prefix + ".fc2");
}

AttentionBlock AttentionBlock::create(int d, int heads, Rng& rng) {
  if (d % heads != 0)
    throw std::runtime_error("AttentionBlock: model dim not divisible by head count");
  AttentionBlock b;
  b.d = d;
  b.heads = heads;
  b.q = LinearLayer::create(d, d, rng);
  b.k = LinearLayer::create(d, d, rng);
  b.v = LinearLayer::create(d, d, rng);
  b.o = LinearLayer::create(d, d, rng);
  return b;
}

void AttentionBlock::register_params(ParamRegistry& reg, const std::string& prefix) {
  q.register_params(reg, prefix + ".q");
  k.register_params(reg, prefix + ".k");
  v.register_params(reg, prefix + ".v");
  o.register_params(reg, prefix + ".o");
}

Tensor attention_forward(const AttentionBlock& blk, const Tensor& xq, const Tensor& xkv,
                         const Tensor* mask, const AttnAdapters* adapters,
                         Tensor* weights_out) {
  if (xq.rank() != 2 || xkv.rank() != 2)
    throw std::runtime_error("attention_forward: expects rank-2 [seq, dim] inputs");
  const int sq = xq.shape[0];
  const int sk = xkv.shape[0];
  const int h = blk.heads;
  const int dh = blk.d / h;

  const LoraAdapter* aq = adapters ? adapters->q : nullptr;
  const LoraAdapter* av = adapters ? adapters->v : nullptr;

  Tensor qh = transpose(reshape(lora_forward(xq, blk.q, aq), {sq, h, dh}), 0, 1);
  Tensor kh = transpose(reshape(blk.k.forward(xkv), {sk, h, dh}), 0, 1);
  Tensor vh = transpose(reshape(lora_forward(xkv, blk.v, av), {sk, h, dh}), 0, 1);

  Tensor scores = mul_scalar(matmul(qh, transpose(kh, 1, 2)), 1.0 / std::sqrt(double(dh)));
  if (mask) {
    if (mask->rank() != 2 || mask->shape[0] != sq || mask->shape[1] != sk)
      throw std::runtime_error("attention_forward: mask must be [Sq, Sk]");
    scores = masked_fill(scores, *mask, -1e9);
  }
  Tensor w = softmax(scores, -1);  // [H, Sq, Sk]
  if (weights_out) *weights_out = w;

  Tensor ctx = reshape(transpose(matmul(w, vh), 0, 1), {sq, blk.d});
  return blk.o.forward(ctx);
}

Tensor causal_mask(int s) {
  Tensor m = Tensor::zeros({s, s});
  for (int i = 0; i < s; ++i)
    for (int j = i + 1; j < s; ++j) (*m.data)[static_cast<size_t>(i) * s + j] = 1.0f;
  return m;
}

Tensor prefix_causal_mask(int s, int prefix_len) {
  Tensor m = Tensor::zeros({s, s});
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < s; ++j)
      if (j > i && j >= prefix_len) (*m.data)[static_cast<size_t>(i) * s + j] = 1.0f;
  return m;
}

TransformerBlock TransformerBlock::create(int d, int heads, int ffn_hidden, Rng& rng) {
  TransformerBlock b;
  b.ln1 = LayerNorm::create(d);
  b.attn = AttentionBlock::create(d, heads, rng);
  b.ln2 = LayerNorm::create(d);
  b.ffn = FeedForward::create(d, ffn_hidden, rng);
  return b;
}

Tensor TransformerBlock::forward(const Tensor& x, const Tensor* mask,
                                 const AttnAdapters* adapters) const {
  Tensor n1 = ln1.forward(x);
  Tensor h = add(x, attention_forward(attn, n1, n1, mask, adapters));
  return add(h, ffn.forward(ln2.forward(h)));
}

void TransformerBlock::register_params(ParamRegistry& reg, const std::string& prefix) {
  ln1.register_params(reg, prefix + ".ln1");
  attn.register_params(reg, prefix + ".attn");
  ln2.register_params(reg, prefix + ".ln2");
  ffn.register_params(reg, prefix + ".ffn");
}

}  // namespace ralign
