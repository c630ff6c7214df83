#pragma once

#include <map>
#include <string>
#include <vector>

#include "ralign/tensor.hpp"

namespace ralign {

// Ordered registry of named parameter tensors. Modules register pointers to
// their own Tensor members, so toggling requires_grad here is visible to
// every forward pass, and the optimizer writes straight into module storage.
class ParamRegistry {
 public:
  void add(const std::string& name, Tensor* t);
  Tensor* find(const std::string& name);
  const Tensor* find(const std::string& name) const;
  bool has(const std::string& name) const { return by_name_.count(name) > 0; }
  // Insertion order.
  const std::vector<std::pair<std::string, Tensor*>>& items() const { return items_; }
  std::vector<std::string> names() const;
  size_t size() const { return items_.size(); }

  // Sets requires_grad on every entry from the predicate.
  void set_trainable(const std::function<bool(const std::string&)>& pred);

 private:
  std::vector<std::pair<std::string, Tensor*>> items_;
  std::map<std::string, size_t> by_name_;
};

// y = x W^T + b, with W stored [out, in].
struct LinearLayer {
  Tensor W;
  Tensor b;
  bool has_bias = true;
  static LinearLayer create(int in, int out, Rng& rng, bool bias = true,
                            double sigma = 0.02);
  Tensor forward(const Tensor& x) const;
  void register_params(ParamRegistry& reg, const std::string& prefix);
};

// Low-rank additive delta for a linear layer: delta W = (alpha/r) * B A with
// A [r, in] Gaussian-initialized and B [out, r] zero-initialized, so a fresh
// adapter is an exact no-op.
struct LoraAdapter {
  Tensor A;
  Tensor B;
  int r = 0;
  double alpha = 0.0;
  static LoraAdapter create(int in, int out, int r, double alpha, Rng& rng,
                            double sigma = 0.02);
  void register_params(ParamRegistry& reg, const std::string& prefix);
};

// base(x) + (alpha/r) * (x A^T) B^T; adapter may be null (plain base path).
Tensor lora_forward(const Tensor& x, const LinearLayer& base, const LoraAdapter* adapter);

// Folds the adapter delta into a detached copy of the base layer.
LinearLayer lora_merge(const LinearLayer& base, const LoraAdapter& adapter);

struct LayerNorm {
  Tensor gamma;
  Tensor beta;
  double eps = 1e-5;
  static LayerNorm create(int d);
  Tensor forward(const Tensor& x) const;  // normalizes the last axis
  void register_params(ParamRegistry& reg, const std::string& prefix);
};

// Two-layer MLP with GELU; hidden width defaults to 2*d in callers.
struct FeedForward {
  LinearLayer fc1;
  LinearLayer fc2;
  static FeedForward create(int d, int hidden, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void register_params(ParamRegistry& reg, const std::string& prefix);
};

// Multi-head attention projections. Adapters (when present) apply to the
// query and value projections only.
struct AttentionBlock {
  int d = 0;
  int heads = 0;
  LinearLayer q, k, v, o;
  static AttentionBlock create(int d, int heads, Rng& rng);
  void register_params(ParamRegistry& reg, const std::string& prefix);
};

struct AttnAdapters {
  const LoraAdapter* q = nullptr;
  const LoraAdapter* v = nullptr;
};

// Single-sequence attention: xq [Sq, d], xkv [Sk, d]. `mask` is [Sq, Sk] with
// nonzero entries blocked (score forced to -1e9 before softmax). When
// `weights_out` is non-null it receives the post-softmax weights [H, Sq, Sk].
Tensor attention_forward(const AttentionBlock& blk, const Tensor& xq, const Tensor& xkv,
                         const Tensor* mask = nullptr,
                         const AttnAdapters* adapters = nullptr,
                         Tensor* weights_out = nullptr);

// Mask builders; 1 = blocked, 0 = visible.
Tensor causal_mask(int s);
// Bidirectional within the first `prefix_len` positions, causal afterwards.
Tensor prefix_causal_mask(int s, int prefix_len);

// Pre-LN self-attention block: x + attn(ln1(x)), then x + ffn(ln2(x)).
struct TransformerBlock {
  LayerNorm ln1;
  AttentionBlock attn;
  LayerNorm ln2;
  FeedForward ffn;
  static TransformerBlock create(int d, int heads, int ffn_hidden, Rng& rng);
  Tensor forward(const Tensor& x, const Tensor* mask = nullptr,
                 const AttnAdapters* adapters = nullptr) const;
  void register_params(ParamRegistry& reg, const std::string& prefix);
};

}  // namespace ralign
