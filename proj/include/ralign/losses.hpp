#pragma once

#include <vector>

#include "ralign/model.hpp"

namespace ralign {

// All pre-training losses for one single-modality batch. Components are
// rank-0 tensors (readable via scalar()); `total` carries the gradient graph.
struct LossBreakdown {
  Tensor itc;   // modal-text contrastive alignment
  Tensor itg;   // caption generation through the query transformer's text head
  Tensor itm;   // modal-text match (2-way classification with hard pairing)
  Tensor llm;   // caption NLL under the frozen language model
  Tensor reg;   // region box L1 (region modalities only)
  bool has_reg = false;
  Tensor total;
};

// Symmetric contrastive loss over raw (unnormalized) projections. Each query
// set contributes its best-matching query per caption: rows are L2-normalized,
// sim(i, j) = max_q <z_iq, t_j> / clamp(temperature, 0.01, 1), and the loss is
// the mean of modal-to-text and text-to-modal cross entropies of the diagonal.
Tensor itc_from_features(const std::vector<Tensor>& query_feats,
                         const std::vector<Tensor>& text_feats,
                         const Tensor& temperature);

// Two-way match loss from pooled fused-query logits: `pos_logits[i]` scores
// the aligned pair, `neg_logits[i]` the sample paired with the next caption.
Tensor itm_from_logits(const std::vector<Tensor>& pos_logits,
                       const std::vector<Tensor>& neg_logits);

// Combined single-batch loss: itc + itg + itm + llm + lambda_reg * reg.
// Requires at least two samples, all of one modality with at least two
// distinct captions. Throws (naming the component) if any term is not finite.
LossBreakdown combined_loss(const Model& model, const std::vector<Sample>& batch,
                            double lambda_reg = 1.0, bool use_pafe = true);

}  // namespace ralign
