#include "ralign/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

namespace ralign {

namespace {

constexpr int kMaxN = 4;

Tensor stack_rows(const std::vector<Tensor>& rows) {
  std::vector<Tensor> shaped;
  shaped.reserve(rows.size());
  for (const Tensor& r : rows) shaped.push_back(reshape(r, {1, r.shape[0]}));
  return concat(shaped, 0);
}

// Space-joined n-gram keys are unambiguous: tokens are whitespace-split, so
// they can never contain the joiner themselves.
std::map<std::string, int> gram_counts(const TokenList& tokens, int n) {
  std::map<std::string, int> counts;
  if (static_cast<int>(tokens.size()) < n) return counts;
  for (size_t i = 0; i + static_cast<size_t>(n) <= tokens.size(); ++i) {
    std::string key = tokens[i];
    for (size_t j = 1; j < static_cast<size_t>(n); ++j) key += " " + tokens[i + j];
    ++counts[key];
  }
  return counts;
}

// count * idf weights. Cosine similarity is scale-invariant, so normalizing
// counts by sentence length (as some formulations do) would change nothing.
std::map<std::string, double> tfidf(const TokenList& tokens, int n,
                                    const CiderCorpus& corpus) {
  std::map<std::string, double> vec;
  for (const auto& [gram, count] : gram_counts(tokens, n))
    vec[gram] = count * corpus.idf(n, gram);
  return vec;
}

double cosine(const std::map<std::string, double>& a,
              const std::map<std::string, double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (const auto& [gram, w] : a) {
    na += w * w;
    auto it = b.find(gram);
    if (it != b.end()) dot += w * it->second;
  }
  for (const auto& [gram, w] : b) nb += w * w;
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

TokenList scoring_tokens(const std::string& text) {
  std::string lowered = text;
  std::transform(lowered.begin(), lowered.end(), lowered.begin(), [](unsigned char c) {
    return static_cast<char>(std::tolower(c));
  });
  std::istringstream in(lowered);
  TokenList out;
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

CiderCorpus CiderCorpus::build(const std::vector<std::vector<TokenList>>& image_refs) {
  CiderCorpus corpus;
  corpus.n_images_ = static_cast<int>(image_refs.size());
  for (const std::vector<TokenList>& refs : image_refs) {
    for (int n = 1; n <= kMaxN; ++n) {
      std::set<std::string> seen;
      for (const TokenList& ref : refs)
        for (const auto& [gram, count] : gram_counts(ref, n)) seen.insert(gram);
      for (const std::string& gram : seen) ++corpus.df_[size_t(n - 1)][gram];
    }
  }
  return corpus;
}

double CiderCorpus::idf(int n, const std::string& gram) const {
  if (n < 1 || n > kMaxN) throw std::runtime_error("idf: n must be in [1, 4]");
  if (n_images_ < 1) throw std::runtime_error("idf: empty corpus");
  const auto& table = df_[size_t(n - 1)];
  auto it = table.find(gram);
  const int df = it == table.end() ? 1 : it->second;
  return std::log(static_cast<double>(n_images_) / df);
}

double cider(const TokenList& candidate, const std::vector<TokenList>& references,
             const CiderCorpus& corpus) {
  if (candidate.empty() || references.empty()) return 0.0;
  double total = 0.0;
  for (int n = 1; n <= kMaxN; ++n) {
    const auto c_vec = tfidf(candidate, n, corpus);
    double ref_sum = 0.0;
    for (const TokenList& ref : references)
      ref_sum += cosine(c_vec, tfidf(ref, n, corpus));
    total += ref_sum / static_cast<double>(references.size());
  }
  return 10.0 * total / kMaxN;
}

double recall_at_k(const std::vector<std::vector<double>>& sim, int k) {
  const size_t b = sim.size();
  if (b == 0) throw std::runtime_error("recall: empty similarity matrix");
  if (k < 1 || static_cast<size_t>(k) > b)
    throw std::runtime_error("recall: k must be in [1, batch]");
  int hits = 0;
  for (size_t i = 0; i < b; ++i) {
    if (sim[i].size() != b)
      throw std::runtime_error("recall: similarity matrix is not square");
    int rank = 1;
    for (size_t j = 0; j < b; ++j)
      if (sim[i][j] > sim[i][i]) ++rank;
    if (rank <= k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(b);
}

double retrieval_recall(const std::vector<Tensor>& query_feats,
                        const std::vector<Tensor>& text_feats, int k) {
  const size_t b = query_feats.size();
  if (text_feats.size() != b)
    throw std::runtime_error("recall: feature count mismatch");
  if (b == 0) throw std::runtime_error("recall: no samples");

  Tensor t_mat = normalize_rows(stack_rows(text_feats));  // [B, k]
  Tensor t_t = transpose(t_mat, 0, 1);
  std::vector<std::vector<double>> sim(b, std::vector<double>(b, 0.0));
  for (size_t i = 0; i < b; ++i) {
    Tensor best = max(matmul(normalize_rows(query_feats[i]), t_t), 0);  // [B]
    for (size_t j = 0; j < b; ++j) sim[i][j] = best.at(j);
  }
  return recall_at_k(sim, k);
}

}  // namespace ralign
