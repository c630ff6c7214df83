#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "ralign/data_types.hpp"
#include "ralign/encoders.hpp"
#include "ralign/lm.hpp"
#include "ralign/nn.hpp"
#include "ralign/vocab.hpp"

namespace ralign {

// Maps a 6-number region descriptor to a feature-space offset that is added
// to every encoder token, conditioning extraction on the region position.
// Biases start at zero so a zero descriptor maps to a zero offset.
struct PafeModule {
  LinearLayer fc1;  // 6 -> hidden
  LinearLayer fc2;  // hidden -> enc_dim
  static PafeModule create(int hidden, int enc_dim, Rng& rng);
  Tensor forward(const std::array<float, 6>& feature) const;  // [enc_dim]
  void register_params(ParamRegistry& reg, const std::string& prefix);
};

struct QFormerConfig {
  int d = 64;
  int layers = 4;
  int heads = 4;
  int n_queries = 8;
  int d_itc = 32;
  int vocab = 23;
  int max_text = 24;
  int enc_dim = 64;  // must equal d (cross-attention consumes encoder tokens)
};

enum class TextMode { queries_only, text_only, joint_bidirectional, joint_causal_text };

// Query transformer: a stack of blocks where learned queries self-attend
// (optionally jointly with text), cross-attend into frozen encoder tokens at
// every layer, then pass through a feed-forward. Pre-LN residuals throughout.
class QFormer {
 public:
  struct Layer {
    LayerNorm self_ln;
    AttentionBlock self_attn;
    LayerNorm cross_ln;
    AttentionBlock cross_attn;
    LayerNorm ffn_ln;
    FeedForward ffn;
  };

  struct Output {
    Tensor queries;  // [nq, d] when queries were given
    Tensor text;     // [nt, d] when text was given
  };

  static QFormer create(const QFormerConfig& cfg, u64 seed);
  const QFormerConfig& config() const { return cfg_; }
  Tensor& token_embedding() { return tok_emb_; }
  const Tensor& token_embedding() const { return tok_emb_; }

  // `self_ad` / `cross_ad`, when given, carry one entry per layer.
  Output forward(const Tensor* queries, const Tensor* enc_tokens,
                 const std::vector<int>& text_ids, TextMode mode,
                 const std::vector<AttnAdapters>* self_ad = nullptr,
                 const std::vector<AttnAdapters>* cross_ad = nullptr,
                 const Tensor* pafe_vec = nullptr) const;

  void register_params(ParamRegistry& reg, const std::string& prefix);

 private:
  QFormerConfig cfg_;
  Tensor tok_emb_;  // [V, d]; also the tied caption-generation head
  Tensor pos_emb_;  // [max_text, d]
  std::vector<Layer> layers_;
  LayerNorm ln_f_;
};

// Heads shared by every modality; trained with the base stage, frozen after.
struct Heads {
  LinearLayer itc_q;     // d -> d_itc (query side)
  LinearLayer itc_t;     // d -> d_itc (text side)
  LinearLayer itm;       // d -> 2
  Tensor temperature;    // [1], clamped to [0.01, 1] at use
  LinearLayer lm_proj;   // d -> d_lm (base modality's projection)
  static Heads create(const QFormerConfig& qcfg, int d_lm, u64 seed);
  void register_params(ParamRegistry& reg, const std::string& prefix);
};

// Everything one extension modality trains: its own queries (copied from
// base), low-rank deltas for the query transformer and the language model, a
// language-model projection (copied from base), a region feature module and a
// region regression head for region modalities.
struct QFormerLayerAdapters {
  LoraAdapter self_q, self_v, cross_q, cross_v;
};

struct ModalityBundle {
  Modality modality = Modality::pc_text;
  Tensor queries;  // [nq, d]
  std::vector<QFormerLayerAdapters> qf;
  std::vector<LoraAdapter> lm_q, lm_v;
  LinearLayer lm_proj;
  bool has_pafe = false;
  PafeModule pafe;
  bool has_reg_head = false;
  LinearLayer reg_head;  // d -> 6, outputs squashed by sigmoid at use

  // Per-layer adapter views pointing into the vectors above; stable because
  // the vectors are sized once at construction.
  std::vector<AttnAdapters> qf_self_view, qf_cross_view, lm_view;
  void build_views();
};

struct ModelConfig {
  ImageEncoderConfig image_enc;
  PointEncoderConfig point_enc;
  QFormerConfig qformer;
  LmConfig lm;
  int lora_r = 8;
  double lora_alpha = 16.0;
  int pafe_hidden = 32;
};

// Digest of the architecture (dimensions and layer counts only; no seeds, no
// run settings), used to match checkpoints to configs.
u64 config_digest(const ModelConfig& cfg);

class Model {
 public:
  static Model create(const ModelConfig& cfg, u64 seed);

  const ModelConfig& config() const { return cfg_; }
  u64 seed() const { return seed_; }
  ToyLM& lm() { return lm_; }
  const ToyLM& lm() const { return lm_; }
  QFormer& qformer() { return qf_; }
  const QFormer& qformer() const { return qf_; }
  Heads& heads() { return heads_; }
  const Heads& heads() const { return heads_; }

  // Pipeline-stage flags carried through checkpoints.
  bool lm_pretrained = false;
  bool base_pretrained = false;

  // Parameter registry over every tensor in the model (encoders first, then
  // the language model, query transformer, heads, and adapters in
  // alphabetical modality order). Rebuilt after modality registration.
  ParamRegistry& params();

  // Extends the model with a new modality: fresh zero-initialized low-rank
  // deltas, queries and LM projection copied from base, plus a region module
  // for region modalities. img_text is the base modality and cannot be
  // re-registered; duplicates are errors.
  void register_modality(Modality m);
  bool has_modality(Modality m) const;
  std::vector<Modality> extended_modalities() const;

  // Frozen encoder tokens for the sample's payload ([S_enc, d]).
  Tensor encode_modal(const Sample& s) const;

  // Per-sample forward ingredients computed once and shared by every loss
  // term of a step: the frozen encoder tokens and, for region samples with
  // conditioning enabled, the position offset added to the input queries.
  struct ModalInput {
    Tensor enc;     // [S_enc, d]
    Tensor offset;  // [d], meaningful when has_offset
    bool has_offset = false;
    const Tensor* offset_ptr() const { return has_offset ? &offset : nullptr; }
  };
  ModalInput modal_input(const Sample& s, bool use_pafe = true) const;

  // Query-side embedding [nq, d]. Applies that modality's adapters and (for
  // region samples, unless disabled) the position-conditioned offset.
  Tensor query_output(const Sample& s, bool use_pafe = true) const;
  Tensor query_output_from(const ModalInput& in, Modality m) const;

  // Caption embedding for contrastive alignment: the BOS-position output of a
  // text-only pass, [d].
  Tensor text_feature(const std::string& caption) const;

  // Query outputs after a joint bidirectional pass over [queries; caption],
  // used by the match head.
  Tensor fused_queries(const Sample& s, const std::string& caption,
                       bool use_pafe = true) const;
  Tensor fused_queries_from(const ModalInput& in, Modality m,
                            const std::string& caption) const;

  // Mean NLL of the caption under the query transformer's tied text head
  // (queries visible to text, text causal, queries blind to text).
  Tensor caption_nll_qformer(const Sample& s, bool use_pafe = true) const;
  Tensor caption_nll_qformer_from(const ModalInput& in, Modality m,
                                  const std::string& caption) const;

  // Mean NLL of the caption under the frozen language model conditioned on
  // projected queries plus the modality prompt.
  Tensor caption_nll_lm(const Sample& s, bool use_pafe = true) const;
  // Same, reusing an already-computed query output.
  Tensor caption_nll_lm_from(const Tensor& z, Modality m, const std::string& caption) const;

  // Sigmoid box prediction (4 numbers for 2-D, 6 for 3-D regions).
  Tensor predict_region(const Sample& s, bool use_pafe = true) const;
  // Same, reusing an already-computed query output.
  Tensor predict_region_from(const Tensor& z, const Sample& s) const;

  // Greedy caption from the frozen language model.
  std::string generate_caption(const Sample& s, const Vocab& vocab, int max_new = 12,
                               bool use_pafe = true) const;

  // BOS-led prompt ids for a modality ("a photo of" / "a point cloud of").
  static std::vector<int> prompt_ids(Modality m, const Vocab& vocab);

  const ModalityBundle* bundle_for(Modality m) const;  // null for img_text
  const Vocab& vocab() const { return vocab_; }

 private:
  ModelConfig cfg_;
  Vocab vocab_ = Vocab::canonical();
  u64 seed_ = 0;
  ImageEncoder img_enc_;
  PointEncoder pc_enc_;
  QFormer qf_;
  Heads heads_;
  ToyLM lm_;
  Tensor base_queries_;  // [nq, d]
  std::map<std::string, std::unique_ptr<ModalityBundle>> bundles_;
  ParamRegistry reg_;
  bool reg_dirty_ = true;

  Model() = default;
  void rebuild_registry();
  // Adapter views + queries + projection for a modality (base fields for
  // img_text). Throws when an extension modality was never registered.
  struct ModalView {
    const Tensor* queries;
    const std::vector<AttnAdapters>* self_ad;
    const std::vector<AttnAdapters>* cross_ad;
    const std::vector<AttnAdapters>* lm_ad;
    const LinearLayer* lm_proj;
    const ModalityBundle* bundle;
  };
  ModalView view_for(Modality m) const;
};

}  // namespace ralign
