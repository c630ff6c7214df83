#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "ralign/tensor.hpp"

namespace ralign {

using TokenList = std::vector<std::string>;

// Lowercased whitespace split. Scoring is open-world: generated text is
// scored as-is, with no vocabulary lookup.
TokenList scoring_tokens(const std::string& text);

// Corpus statistics for the consensus captioning score: how many images'
// reference sets contain each n-gram, n = 1..4.
class CiderCorpus {
 public:
  // image_refs[i] holds every reference token list of image i.
  static CiderCorpus build(const std::vector<std::vector<TokenList>>& image_refs);

  int n_images() const { return n_images_; }

  // ln(N / df). Grams absent from the corpus count as df = 1 (they weigh
  // ln N); they can only lower a score, by inflating the candidate's norm
  // while matching nothing.
  double idf(int n, const std::string& gram) const;

 private:
  int n_images_ = 0;
  std::array<std::map<std::string, int>, 4> df_;
};

// Consensus captioning score: for each n = 1..4, cosine similarity between
// the TF-IDF n-gram vectors of the candidate and of each reference
// (zero-norm vectors score 0), averaged over references, averaged over n,
// scaled by 10. Plain variant: no length penalty, no count clipping. An
// empty candidate (or empty reference list) scores 0. Range [0, 10].
double cider(const TokenList& candidate, const std::vector<TokenList>& references,
             const CiderCorpus& corpus);

// Fraction of rows whose diagonal entry ranks in the top k of the row, with
// rank = 1 + the number of strictly larger entries: ties resolve in favor of
// the true pair, so duplicated captions in a probe set are not penalized.
double recall_at_k(const std::vector<std::vector<double>>& sim, int k);

// Modal-text retrieval over the contrastive-training similarity: rows of
// each sample's projected queries [nq, k] and each caption's projection [k]
// are L2-normalized and sim(i, j) = best dot product over i's queries. The
// temperature is omitted; positive scaling never changes ranks.
double retrieval_recall(const std::vector<Tensor>& query_feats,
                        const std::vector<Tensor>& text_feats, int k);

}  // namespace ralign
