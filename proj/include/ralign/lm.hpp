#pragma once

#include <vector>

#include "ralign/nn.hpp"
#include "ralign/tensor.hpp"

namespace ralign {

// Small causal language model used as the frozen captioning decoder. The
// token embedding is tied to the output head. A run of "soft prefix" vectors
// (projected query embeddings) can precede the text; prefix positions attend
// bidirectionally among themselves, text positions attend causally.
struct LmConfig {
  int vocab = 23;
  int d = 64;
  int layers = 4;
  int heads = 4;
  int max_len = 48;
};

class ToyLM {
 public:
  static ToyLM create(const LmConfig& cfg, u64 seed);

  const LmConfig& config() const { return cfg_; }
  Tensor& token_embedding() { return tok_emb_; }

  // Token + position embeddings, positions starting at `pos_offset`.
  Tensor embed(const std::vector<int>& ids, int pos_offset) const;

  // Transformer pass over pre-embedded inputs. `adapters`, when given, must
  // hold one entry per layer (query/value low-rank deltas).
  Tensor hidden(const Tensor& x, const Tensor& mask,
                const std::vector<AttnAdapters>* adapters = nullptr) const;

  // Tied-head logits for a [n, d] matrix of hidden rows.
  Tensor logits(const Tensor& h) const;

  // Mean negative log-likelihood of `target_ids`, conditioned on the soft
  // prefix (may be empty, shape [0, d] or default Tensor) and the BOS-led
  // prompt. Loss is averaged over target positions only.
  Tensor loss(const Tensor& soft_prefix, const std::vector<int>& prompt_ids,
              const std::vector<int>& target_ids,
              const std::vector<AttnAdapters>* adapters = nullptr) const;

  // Greedy continuation after the prompt; stops at `eos_id` (which is not
  // included in the result) or after max_new tokens.
  std::vector<int> greedy_decode(const Tensor& soft_prefix,
                                 const std::vector<int>& prompt_ids, int max_new,
                                 int eos_id,
                                 const std::vector<AttnAdapters>* adapters = nullptr) const;

  void register_params(ParamRegistry& reg, const std::string& prefix);

 private:
  LmConfig cfg_;
  Tensor tok_emb_;  // [V, d]
  Tensor pos_emb_;  // [max_len, d]
  std::vector<TransformerBlock> blocks_;
  LayerNorm ln_f_;

  // Assembles [prefix; embedded text] and the matching prefix-causal mask.
  Tensor assemble(const Tensor& soft_prefix, const std::vector<int>& text_ids,
                  Tensor* mask_out) const;
};

}  // namespace ralign
