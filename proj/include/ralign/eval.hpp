#pragma once

#include <string>
#include <vector>

#include "ralign/metrics.hpp"
#include "ralign/model.hpp"

namespace ralign {

// One evaluation run over a dataset split, restricted to one modality.
struct EvalReport {
  std::string modality;
  std::string split;
  double cider = 0.0;
  double recall_at_1 = 0.0;
  int n_samples = 0;
  u64 seed = 0;
  // Region modalities additionally report localization and grounding quality.
  bool has_region = false;
  double region_l1 = 0.0;        // mean |predicted - target| over box coords
  double region_accuracy = 0.0;  // caption names the boxed object (see below)
};

// Single-line JSON rendering of a report (always carries modality, split,
// cider, recall_at_1, n_samples, seed; region runs add region_l1 and
// region_accuracy).
std::string eval_report_json(const EvalReport& r);

// True when the candidate mentions every content word of the reference
// ("a red circle" -> both "red" and "circle" appear). The article "a" and
// the connective "and" carry no object identity and are ignored.
bool caption_names_target(const TokenList& candidate, const TokenList& reference);

// Scores `model` on every sample of `samples` matching `modality`:
//  - captioning: greedy captions against the sample's reference, scored with
//    the consensus metric over a corpus built from all evaluated references;
//  - retrieval: recall@1 of the contrastive similarity between each sample's
//    projected queries and every evaluated caption's projection;
//  - regions: mean coordinate error of the box head and the fraction of
//    generated captions naming the boxed object.
// Deterministic; `seed` is recorded in the report for provenance.
EvalReport evaluate(const Model& model, const std::vector<Sample>& samples,
                    const std::string& split, Modality modality, u64 seed,
                    bool use_pafe = true);

}  // namespace ralign
