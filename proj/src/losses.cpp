#include "ralign/losses.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

namespace ralign {

namespace {

Tensor stack_rows(const std::vector<Tensor>& rows) {
  std::vector<Tensor> shaped;
  shaped.reserve(rows.size());
  for (const Tensor& r : rows) shaped.push_back(reshape(r, {1, r.shape[0]}));
  return concat(shaped, 0);
}

// Mean of the diagonal entries of -log_softmax(s) along the given axis's
// distribution (rows of `s`).
Tensor diagonal_nll(const Tensor& s) {
  const int b = s.shape[0];
  Tensor eye = Tensor::zeros({b, b});
  for (int i = 0; i < b; ++i) (*eye.data)[static_cast<size_t>(i) * b + i] = 1.0f;
  Tensor lsm = log_softmax(s, -1);
  return mul_scalar(mean(sum(mul(lsm, eye), 1)), -1.0);
}

void check_finite(const Tensor& t, const char* component) {
  if (!std::isfinite(t.scalar()))
    throw std::runtime_error(std::string("loss component '") + component +
                             "' is not finite");
}

}  // namespace

Tensor itc_from_features(const std::vector<Tensor>& query_feats,
                         const std::vector<Tensor>& text_feats,
                         const Tensor& temperature) {
  const size_t b = query_feats.size();
  if (b < 2) throw std::runtime_error("contrastive loss requires a batch of at least 2");
  if (text_feats.size() != b)
    throw std::runtime_error("contrastive loss: feature count mismatch");

  Tensor t_mat = normalize_rows(stack_rows(text_feats));  // [B, k]
  Tensor t_t = transpose(t_mat, 0, 1);                    // [k, B]
  std::vector<Tensor> sim_rows;
  sim_rows.reserve(b);
  for (const Tensor& q : query_feats) {
    Tensor qn = normalize_rows(q);          // [nq, k]
    Tensor sims = matmul(qn, t_t);          // [nq, B]
    sim_rows.push_back(max(sims, 0));       // best query per caption -> [B]
  }
  Tensor s = stack_rows(sim_rows);  // [B, B]; s[i][j] = sim(modal i, text j)
  Tensor tau = clamp(temperature, 0.01, 1.0);
  s = div(s, tau);

  Tensor i2t = diagonal_nll(s);
  Tensor t2i = diagonal_nll(transpose(s, 0, 1));
  return mul_scalar(add(i2t, t2i), 0.5);
}

Tensor itm_from_logits(const std::vector<Tensor>& pos_logits,
                       const std::vector<Tensor>& neg_logits) {
  if (pos_logits.empty() || pos_logits.size() != neg_logits.size())
    throw std::runtime_error("match loss: logit count mismatch");
  std::vector<Tensor> terms;
  for (const Tensor& lg : pos_logits) {
    Tensor lsm = log_softmax(reshape(lg, {1, 2}), -1);
    terms.push_back(mul_scalar(slice(lsm, 1, 1, 1), -1.0));  // matched class = 1
  }
  for (const Tensor& lg : neg_logits) {
    Tensor lsm = log_softmax(reshape(lg, {1, 2}), -1);
    terms.push_back(mul_scalar(slice(lsm, 1, 0, 1), -1.0));  // mismatched class = 0
  }
  return mean(concat(terms, 0));
}

LossBreakdown combined_loss(const Model& model, const std::vector<Sample>& batch,
                            double lambda_reg, bool use_pafe) {
  const size_t b = batch.size();
  if (b < 2) throw std::runtime_error("combined loss requires a batch of at least 2");
  const Modality mod = batch[0].modality;
  std::set<std::string> caption_set;
  for (const Sample& s : batch) {
    if (s.modality != mod)
      throw std::runtime_error("combined loss: batch mixes modalities");
    caption_set.insert(s.caption);
  }
  if (caption_set.size() < 2)
    throw std::runtime_error(
        "combined loss: batch holds a single caption class; matching negatives are "
        "impossible");

  const Heads& heads = model.heads();

  // One encoder pass and one region-offset evaluation per sample (the
  // encoders are frozen, so every term of the step sees identical tokens),
  // and one query forward shared by the contrastive, language-model, and
  // regression terms.
  std::vector<Model::ModalInput> in(b);
  std::vector<Tensor> z(b);
  for (size_t i = 0; i < b; ++i) {
    in[i] = model.modal_input(batch[i], use_pafe);
    z[i] = model.query_output_from(in[i], mod);
  }

  LossBreakdown out;

  // Contrastive term.
  std::vector<Tensor> q_feats(b), t_feats(b);
  for (size_t i = 0; i < b; ++i) {
    q_feats[i] = heads.itc_q.forward(z[i]);  // [nq, d_itc]
    Tensor tf = model.text_feature(batch[i].caption);
    t_feats[i] = reshape(heads.itc_t.forward(reshape(tf, {1, tf.shape[0]})),
                         {heads.itc_t.W.shape[0]});
  }
  out.itc = itc_from_features(q_feats, t_feats, heads.temperature);
  check_finite(out.itc, "itc");

  // Generation term through the query transformer's tied text head.
  {
    std::vector<Tensor> terms;
    for (size_t i = 0; i < b; ++i)
      terms.push_back(
          reshape(model.caption_nll_qformer_from(in[i], mod, batch[i].caption), {1}));
    out.itg = mean(concat(terms, 0));
    check_finite(out.itg, "itg");
  }

  // Match term: each sample against its caption (matched) and its right
  // neighbor's caption (mismatched).
  {
    std::vector<Tensor> pos(b), neg(b);
    for (size_t i = 0; i < b; ++i) {
      Tensor fp = model.fused_queries_from(in[i], mod, batch[i].caption);
      Tensor fn = model.fused_queries_from(in[i], mod, batch[(i + 1) % b].caption);
      pos[i] = reshape(heads.itm.forward(reshape(mean(fp, 0), {1, fp.shape[1]})), {2});
      neg[i] = reshape(heads.itm.forward(reshape(mean(fn, 0), {1, fn.shape[1]})), {2});
    }
    out.itm = itm_from_logits(pos, neg);
    check_finite(out.itm, "itm");
  }

  // Frozen-language-model caption term.
  {
    std::vector<Tensor> terms;
    for (size_t i = 0; i < b; ++i)
      terms.push_back(
          reshape(model.caption_nll_lm_from(z[i], mod, batch[i].caption), {1}));
    out.llm = mean(concat(terms, 0));
    check_finite(out.llm, "llm");
  }

  out.total = add(add(add(out.itc, out.itg), out.itm), out.llm);

  if (modality_is_region(mod)) {
    std::vector<Tensor> terms;
    for (size_t i = 0; i < b; ++i) {
      Tensor pred = model.predict_region_from(z[i], batch[i]);
      const int dim = batch[i].region.target_dim();
      std::vector<float> tv(static_cast<size_t>(dim));
      for (int k = 0; k < dim; ++k)
        tv[size_t(k)] = static_cast<float>(batch[i].region.target()[size_t(k)]);
      Tensor target = Tensor::from({dim}, tv);
      terms.push_back(reshape(mean(abs(sub(pred, target))), {1}));
    }
    out.reg = mean(concat(terms, 0));
    out.has_reg = true;
    check_finite(out.reg, "reg");
    out.total = add(out.total, mul_scalar(out.reg, lambda_reg));
  }

  check_finite(out.total, "total");
  return out;
}

}  // namespace ralign
