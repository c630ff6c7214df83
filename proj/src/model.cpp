#include "ralign/model.hpp"

#include <stdexcept>

namespace ralign {

PafeModule PafeModule::create(int hidden, int enc_dim, Rng& rng) {
  PafeModule p;
  p.fc1 = LinearLayer::create(6, hidden, rng);
  p.fc2 = LinearLayer::create(hidden, enc_dim, rng);
  return p;
}

Tensor PafeModule::forward(const std::array<float, 6>& feature) const {
  Tensor in = Tensor::from({1, 6}, std::vector<float>(feature.begin(), feature.end()));
  Tensor out = fc2.forward(gelu(fc1.forward(in)));
  return reshape(out, {out.shape[1]});
}

void PafeModule::register_params(ParamRegistry& reg, const std::string& prefix) {
  fc1.register_params(reg, prefix + ".fc1");
  fc2.register_params(reg, prefix + ".fc2");
}

QFormer QFormer::create(const QFormerConfig& cfg, u64 seed) {
  if (cfg.enc_dim != cfg.d)
    throw ConfigError("qformer: encoder token width must match model width");
  QFormer q;
  q.cfg_ = cfg;
  Rng rng(derive_seed(seed, "qformer"));
  q.tok_emb_ = Tensor::randn({cfg.vocab, cfg.d}, rng, 0.02);
  q.pos_emb_ = Tensor::randn({cfg.max_text, cfg.d}, rng, 0.02);
  for (int i = 0; i < cfg.layers; ++i) {
    Layer l;
    l.self_ln = LayerNorm::create(cfg.d);
    l.self_attn = AttentionBlock::create(cfg.d, cfg.heads, rng);
    l.cross_ln = LayerNorm::create(cfg.d);
    l.cross_attn = AttentionBlock::create(cfg.d, cfg.heads, rng);
    l.ffn_ln = LayerNorm::create(cfg.d);
    l.ffn = FeedForward::create(cfg.d, 2 * cfg.d, rng);
    q.layers_.push_back(std::move(l));
  }
  q.ln_f_ = LayerNorm::create(cfg.d);
  return q;
}

QFormer::Output QFormer::forward(const Tensor* queries, const Tensor* enc_tokens,
                                 const std::vector<int>& text_ids, TextMode mode,
                                 const std::vector<AttnAdapters>* self_ad,
                                 const std::vector<AttnAdapters>* cross_ad,
                                 const Tensor* pafe_vec) const {
  const int nq = queries ? queries->shape[0] : 0;
  const int nt = static_cast<int>(text_ids.size());
  switch (mode) {
    case TextMode::queries_only:
      if (nq == 0 || nt != 0)
        throw std::runtime_error("qformer: queries_only expects queries and no text");
      break;
    case TextMode::text_only:
      if (nq != 0 || nt == 0)
        throw std::runtime_error("qformer: text_only expects text and no queries");
      break;
    default:
      if (nq == 0 || nt == 0)
        throw std::runtime_error("qformer: joint modes expect queries and text");
  }
  if (self_ad && static_cast<int>(self_ad->size()) != cfg_.layers)
    throw std::runtime_error("qformer: self-adapter count does not match layer count");
  if (cross_ad && static_cast<int>(cross_ad->size()) != cfg_.layers)
    throw std::runtime_error("qformer: cross-adapter count does not match layer count");
  if (nt > cfg_.max_text)
    throw std::runtime_error("qformer: text length exceeds positional capacity");

  // The region offset steers extraction from the query side: it is
  // broadcast-added once to the input queries, leaving the encoder tokens
  // untouched.
  Tensor q_in;
  if (nq > 0) q_in = pafe_vec ? add(*queries, *pafe_vec) : *queries;

  Tensor x;
  if (nt > 0) {
    Tensor temb = add(embedding(tok_emb_, text_ids), slice(pos_emb_, 0, 0, nt));
    x = nq > 0 ? concat({q_in, temb}, 0) : temb;
  } else {
    x = q_in;
  }

  // Only the generation mode needs a mask: text runs causally and must not
  // leak into the queries; queries stay mutually visible and are readable by
  // every text position.
  Tensor mask;
  bool use_mask = false;
  if (mode == TextMode::joint_causal_text) {
    const int s = nq + nt;
    mask = Tensor::zeros({s, s});
    for (int i = 0; i < s; ++i)
      for (int j = 0; j < s; ++j) {
        const bool blocked = (i < nq && j >= nq) || (i >= nq && j > i);
        if (blocked) (*mask.data)[static_cast<size_t>(i) * s + j] = 1.0f;
      }
    use_mask = true;
  }

  const bool do_cross = enc_tokens != nullptr && nq > 0;
  if (do_cross && (enc_tokens->rank() != 2 || enc_tokens->shape[1] != cfg_.d))
    throw std::runtime_error("qformer: encoder tokens must be [S, d]");

  for (size_t i = 0; i < layers_.size(); ++i) {
    const Layer& l = layers_[i];
    Tensor n = l.self_ln.forward(x);
    x = add(x, attention_forward(l.self_attn, n, n, use_mask ? &mask : nullptr,
                                 self_ad ? &(*self_ad)[i] : nullptr));
    if (do_cross) {
      Tensor qp = slice(x, 0, 0, nq);
      Tensor cn = l.cross_ln.forward(qp);
      Tensor cv = attention_forward(l.cross_attn, cn, *enc_tokens, nullptr,
                                    cross_ad ? &(*cross_ad)[i] : nullptr);
      Tensor qp2 = add(qp, cv);
      x = nt > 0 ? concat({qp2, slice(x, 0, nq, nt)}, 0) : qp2;
    }
    x = add(x, l.ffn.forward(l.ffn_ln.forward(x)));
  }
  x = ln_f_.forward(x);

  Output out;
  if (nq > 0) out.queries = slice(x, 0, 0, nq);
  if (nt > 0) out.text = nq > 0 ? slice(x, 0, nq, nt) : x;
  return out;
}

void QFormer::register_params(ParamRegistry& reg, const std::string& prefix) {
  reg.add(prefix + ".tok_emb", &tok_emb_);
  reg.add(prefix + ".pos_emb", &pos_emb_);
  for (size_t i = 0; i < layers_.size(); ++i) {
    const std::string p = prefix + ".block" + std::to_string(i);
    layers_[i].self_ln.register_params(reg, p + ".self_ln");
    layers_[i].self_attn.register_params(reg, p + ".self_attn");
    layers_[i].cross_ln.register_params(reg, p + ".cross_ln");
    layers_[i].cross_attn.register_params(reg, p + ".cross_attn");
    layers_[i].ffn_ln.register_params(reg, p + ".ffn_ln");
    layers_[i].ffn.register_params(reg, p + ".ffn");
  }
  ln_f_.register_params(reg, prefix + ".ln_f");
}

Heads Heads::create(const QFormerConfig& qcfg, int d_lm, u64 seed) {
  Heads h;
  Rng rng(derive_seed(seed, "heads"));
  h.itc_q = LinearLayer::create(qcfg.d, qcfg.d_itc, rng);
  h.itc_t = LinearLayer::create(qcfg.d, qcfg.d_itc, rng);
  h.itm = LinearLayer::create(qcfg.d, 2, rng);
  h.temperature = Tensor::from({1}, {0.07f});
  h.lm_proj = LinearLayer::create(qcfg.d, d_lm, rng);
  return h;
}

void Heads::register_params(ParamRegistry& reg, const std::string& prefix) {
  itc_q.register_params(reg, prefix + ".itc_q");
  itc_t.register_params(reg, prefix + ".itc_t");
  itm.register_params(reg, prefix + ".itm");
  reg.add(prefix + ".temperature", &temperature);
  lm_proj.register_params(reg, prefix + ".lm_proj");
}

void ModalityBundle::build_views() {
  qf_self_view.resize(qf.size());
  qf_cross_view.resize(qf.size());
  for (size_t i = 0; i < qf.size(); ++i) {
    qf_self_view[i] = {&qf[i].self_q, &qf[i].self_v};
    qf_cross_view[i] = {&qf[i].cross_q, &qf[i].cross_v};
  }
  lm_view.resize(lm_q.size());
  for (size_t i = 0; i < lm_q.size(); ++i) lm_view[i] = {&lm_q[i], &lm_v[i]};
}

u64 config_digest(const ModelConfig& cfg) {
  std::string s = "arch:v1";
  auto app = [&s](long long v) { s += ":" + std::to_string(v); };
  app(cfg.image_enc.image_size);
  app(cfg.image_enc.patch);
  app(cfg.image_enc.d);
  app(cfg.image_enc.layers);
  app(cfg.image_enc.heads);
  app(cfg.point_enc.groups);
  app(cfg.point_enc.group_size);
  app(cfg.point_enc.d);
  app(cfg.point_enc.layers);
  app(cfg.point_enc.heads);
  app(cfg.point_enc.absolute_center ? 1 : 0);
  app(cfg.qformer.d);
  app(cfg.qformer.layers);
  app(cfg.qformer.heads);
  app(cfg.qformer.n_queries);
  app(cfg.qformer.d_itc);
  app(cfg.qformer.vocab);
  app(cfg.qformer.max_text);
  app(cfg.qformer.enc_dim);
  app(cfg.lm.vocab);
  app(cfg.lm.d);
  app(cfg.lm.layers);
  app(cfg.lm.heads);
  app(cfg.lm.max_len);
  app(cfg.lora_r);
  app(static_cast<long long>(cfg.lora_alpha * 1000));
  app(cfg.pafe_hidden);
  return fnv1a64(s);
}

Model Model::create(const ModelConfig& cfg, u64 seed) {
  if (cfg.image_enc.d != cfg.qformer.enc_dim || cfg.point_enc.d != cfg.qformer.enc_dim)
    throw ConfigError("model: encoder widths must match the query transformer input width");
  Model m;
  m.cfg_ = cfg;
  m.seed_ = seed;
  m.img_enc_ = ImageEncoder::create(cfg.image_enc, derive_seed(seed, "enc.image"));
  m.pc_enc_ = PointEncoder::create(cfg.point_enc, derive_seed(seed, "enc.point"));
  m.qf_ = QFormer::create(cfg.qformer, derive_seed(seed, "qf"));
  m.heads_ = Heads::create(cfg.qformer, cfg.lm.d, derive_seed(seed, "heads"));
  m.lm_ = ToyLM::create(cfg.lm, derive_seed(seed, "lm"));
  Rng qrng(derive_seed(seed, "queries"));
  m.base_queries_ = Tensor::randn({cfg.qformer.n_queries, cfg.qformer.d}, qrng, 0.02);
  return m;
}

ParamRegistry& Model::params() {
  if (reg_dirty_) rebuild_registry();
  return reg_;
}

void Model::rebuild_registry() {
  reg_ = ParamRegistry();
  img_enc_.register_params(reg_, "image_encoder");
  pc_enc_.register_params(reg_, "point_encoder");
  lm_.register_params(reg_, "lm");
  qf_.register_params(reg_, "qformer");
  reg_.add("qformer.queries", &base_queries_);
  heads_.register_params(reg_, "heads");
  for (auto& [key, b] : bundles_) {
    const std::string p = "adapters." + key;
    reg_.add(p + ".queries", &b->queries);
    for (size_t l = 0; l < b->qf.size(); ++l) {
      const std::string lp = p + ".qformer.block" + std::to_string(l);
      b->qf[l].self_q.register_params(reg_, lp + ".self.q");
      b->qf[l].self_v.register_params(reg_, lp + ".self.v");
      b->qf[l].cross_q.register_params(reg_, lp + ".cross.q");
      b->qf[l].cross_v.register_params(reg_, lp + ".cross.v");
    }
    for (size_t l = 0; l < b->lm_q.size(); ++l) {
      const std::string lp = p + ".lm.block" + std::to_string(l);
      b->lm_q[l].register_params(reg_, lp + ".q");
      b->lm_v[l].register_params(reg_, lp + ".v");
    }
    b->lm_proj.register_params(reg_, p + ".lm_proj");
    if (b->has_pafe) b->pafe.register_params(reg_, p + ".pafe");
    if (b->has_reg_head) b->reg_head.register_params(reg_, p + ".reg_head");
  }
  reg_dirty_ = false;
}

void Model::register_modality(Modality mod) {
  if (mod == Modality::img_text)
    throw ConfigError("img_text is the base modality and is always available");
  const std::string key = modality_name(mod);
  if (bundles_.count(key))
    throw ConfigError("modality '" + key + "' is already registered");

  auto b = std::make_unique<ModalityBundle>();
  b->modality = mod;
  b->queries = base_queries_.detached_copy();
  Rng rng(derive_seed(seed_, "adapters." + key));
  const int d = cfg_.qformer.d;
  const int r = cfg_.lora_r;
  const double a = cfg_.lora_alpha;
  for (int l = 0; l < cfg_.qformer.layers; ++l) {
    QFormerLayerAdapters la;
    la.self_q = LoraAdapter::create(d, d, r, a, rng);
    la.self_v = LoraAdapter::create(d, d, r, a, rng);
    la.cross_q = LoraAdapter::create(d, d, r, a, rng);
    la.cross_v = LoraAdapter::create(d, d, r, a, rng);
    b->qf.push_back(std::move(la));
  }
  for (int l = 0; l < cfg_.lm.layers; ++l) {
    b->lm_q.push_back(LoraAdapter::create(cfg_.lm.d, cfg_.lm.d, r, a, rng));
    b->lm_v.push_back(LoraAdapter::create(cfg_.lm.d, cfg_.lm.d, r, a, rng));
  }
  // The projection starts as an exact copy of the base projection so the new
  // modality's language pathway is identical to the base pathway at step 0.
  b->lm_proj.W = heads_.lm_proj.W.detached_copy();
  b->lm_proj.b = heads_.lm_proj.b.detached_copy();
  b->lm_proj.has_bias = heads_.lm_proj.has_bias;
  if (modality_is_region(mod)) {
    b->has_pafe = true;
    b->pafe = PafeModule::create(cfg_.pafe_hidden, cfg_.qformer.enc_dim, rng);
    b->has_reg_head = true;
    b->reg_head = LinearLayer::create(d, 6, rng);
  }
  b->build_views();
  bundles_[key] = std::move(b);
  reg_dirty_ = true;
}

bool Model::has_modality(Modality m) const {
  return m == Modality::img_text || bundles_.count(modality_name(m)) > 0;
}

std::vector<Modality> Model::extended_modalities() const {
  std::vector<Modality> out;
  for (const auto& [key, b] : bundles_) out.push_back(b->modality);
  return out;
}

const ModalityBundle* Model::bundle_for(Modality m) const {
  if (m == Modality::img_text) return nullptr;
  auto it = bundles_.find(modality_name(m));
  return it == bundles_.end() ? nullptr : it->second.get();
}

Model::ModalView Model::view_for(Modality m) const {
  if (m == Modality::img_text)
    return {&base_queries_, nullptr, nullptr, nullptr, &heads_.lm_proj, nullptr};
  auto it = bundles_.find(modality_name(m));
  if (it == bundles_.end())
    throw std::runtime_error(std::string("modality '") + modality_name(m) +
                             "' is not registered; extend the model first");
  const ModalityBundle* b = it->second.get();
  return {&b->queries, &b->qf_self_view, &b->qf_cross_view, &b->lm_view, &b->lm_proj, b};
}

Tensor Model::encode_modal(const Sample& s) const {
  return modality_is_point(s.modality) ? pc_enc_.encode(s.points) : img_enc_.encode(s.image);
}

Model::ModalInput Model::modal_input(const Sample& s, bool use_pafe) const {
  ModalView v = view_for(s.modality);
  ModalInput in;
  in.enc = encode_modal(s);
  if (use_pafe && s.region.kind != RegionKind::none && v.bundle && v.bundle->has_pafe) {
    in.offset = v.bundle->pafe.forward(s.region.feature());
    in.has_offset = true;
  }
  return in;
}

Tensor Model::query_output(const Sample& s, bool use_pafe) const {
  return query_output_from(modal_input(s, use_pafe), s.modality);
}

Tensor Model::query_output_from(const ModalInput& in, Modality m) const {
  ModalView v = view_for(m);
  return qf_
      .forward(v.queries, &in.enc, {}, TextMode::queries_only, v.self_ad, v.cross_ad,
               in.offset_ptr())
      .queries;
}

Tensor Model::text_feature(const std::string& caption) const {
  std::vector<int> ids = vocab_.encode(caption, true, true);
  QFormer::Output out = qf_.forward(nullptr, nullptr, ids, TextMode::text_only);
  return reshape(slice(out.text, 0, 0, 1), {cfg_.qformer.d});
}

Tensor Model::fused_queries(const Sample& s, const std::string& caption,
                            bool use_pafe) const {
  return fused_queries_from(modal_input(s, use_pafe), s.modality, caption);
}

Tensor Model::fused_queries_from(const ModalInput& in, Modality m,
                                 const std::string& caption) const {
  ModalView v = view_for(m);
  std::vector<int> ids = vocab_.encode(caption, true, true);
  return qf_
      .forward(v.queries, &in.enc, ids, TextMode::joint_bidirectional, v.self_ad,
               v.cross_ad, in.offset_ptr())
      .queries;
}

Tensor Model::caption_nll_qformer(const Sample& s, bool use_pafe) const {
  return caption_nll_qformer_from(modal_input(s, use_pafe), s.modality, s.caption);
}

Tensor Model::caption_nll_qformer_from(const ModalInput& in, Modality m,
                                       const std::string& caption) const {
  ModalView v = view_for(m);
  std::vector<int> cap = vocab_.encode(caption, false, false);
  if (cap.empty()) throw std::runtime_error("caption_nll_qformer: empty caption");
  std::vector<int> text_in = {Vocab::kBos};
  text_in.insert(text_in.end(), cap.begin(), cap.end());
  std::vector<int> targets = cap;
  targets.push_back(Vocab::kEos);

  QFormer::Output out =
      qf_.forward(v.queries, &in.enc, text_in, TextMode::joint_causal_text, v.self_ad,
                  v.cross_ad, in.offset_ptr());
  Tensor lsm = log_softmax(matmul(out.text, transpose(qf_.token_embedding(), 0, 1)), -1);
  const int nt = static_cast<int>(targets.size());
  Tensor pick = Tensor::zeros({nt, cfg_.qformer.vocab});
  for (int j = 0; j < nt; ++j)
    (*pick.data)[static_cast<size_t>(j) * cfg_.qformer.vocab + targets[size_t(j)]] = 1.0f;
  return mul_scalar(sum(mul(lsm, pick)), -1.0 / nt);
}

Tensor Model::caption_nll_lm(const Sample& s, bool use_pafe) const {
  return caption_nll_lm_from(query_output(s, use_pafe), s.modality, s.caption);
}

Tensor Model::caption_nll_lm_from(const Tensor& z, Modality m,
                                  const std::string& caption) const {
  ModalView v = view_for(m);
  Tensor soft = v.lm_proj->forward(z);
  std::vector<int> prompt = prompt_ids(m, vocab_);
  std::vector<int> target = vocab_.encode(caption, false, true);
  return lm_.loss(soft, prompt, target, v.lm_ad);
}

Tensor Model::predict_region(const Sample& s, bool use_pafe) const {
  if (s.region.kind == RegionKind::none)
    throw std::runtime_error("predict_region: sample carries no region");
  return predict_region_from(query_output(s, use_pafe), s);
}

Tensor Model::predict_region_from(const Tensor& z, const Sample& s) const {
  if (s.region.kind == RegionKind::none)
    throw std::runtime_error("predict_region: sample carries no region");
  ModalView v = view_for(s.modality);
  if (!v.bundle || !v.bundle->has_reg_head)
    throw std::runtime_error(std::string("predict_region: modality '") +
                             modality_name(s.modality) + "' has no region head");
  Tensor pooled = reshape(mean(z, 0), {1, cfg_.qformer.d});
  Tensor pred = sigmoid(v.bundle->reg_head.forward(pooled));
  Tensor flat = reshape(pred, {6});
  return slice(flat, 0, 0, s.region.target_dim());
}

std::string Model::generate_caption(const Sample& s, const Vocab& vocab, int max_new,
                                    bool use_pafe) const {
  ModalView v = view_for(s.modality);
  Tensor z = query_output(s, use_pafe);
  Tensor soft = v.lm_proj->forward(z);
  std::vector<int> prompt = prompt_ids(s.modality, vocab);
  std::vector<int> ids = lm_.greedy_decode(soft, prompt, max_new, Vocab::kEos, v.lm_ad);
  return vocab.decode(ids);
}

std::vector<int> Model::prompt_ids(Modality m, const Vocab& vocab) {
  std::vector<int> ids = {Vocab::kBos, vocab.id("a")};
  if (modality_is_point(m)) {
    ids.push_back(vocab.id("point"));
    ids.push_back(vocab.id("cloud"));
  } else {
    ids.push_back(vocab.id("photo"));
  }
  ids.push_back(vocab.id("of"));
  return ids;
}

}  // namespace ralign
