#include "ralign/eval.hpp"

#include <cmath>
#include <stdexcept>

#include "json.hpp"

namespace ralign {

using json = nlohmann::json;

std::string eval_report_json(const EvalReport& r) {
  json out;
  out["modality"] = r.modality;
  out["split"] = r.split;
  out["cider"] = r.cider;
  out["recall_at_1"] = r.recall_at_1;
  out["n_samples"] = r.n_samples;
  out["seed"] = r.seed;
  if (r.has_region) {
    out["region_l1"] = r.region_l1;
    out["region_accuracy"] = r.region_accuracy;
  }
  return out.dump();
}

bool caption_names_target(const TokenList& candidate, const TokenList& reference) {
  for (const std::string& word : reference) {
    if (word == "a" || word == "and") continue;
    bool found = false;
    for (const std::string& c : candidate)
      if (c == word) {
        found = true;
        break;
      }
    if (!found) return false;
  }
  return true;
}

EvalReport evaluate(const Model& model, const std::vector<Sample>& samples,
                    const std::string& split, Modality modality, u64 seed,
                    bool use_pafe) {
  EvalReport report;
  report.modality = modality_name(modality);
  report.split = split;
  report.seed = seed;
  report.has_region = modality_is_region(modality);

  std::vector<const Sample*> eval_set;
  for (const Sample& s : samples)
    if (s.modality == modality) eval_set.push_back(&s);
  report.n_samples = static_cast<int>(eval_set.size());
  if (eval_set.empty())
    throw std::runtime_error(std::string("eval: no samples of modality '") +
                             modality_name(modality) + "' in split '" + split + "'");

  // Corpus over every evaluated reference; one image per sample.
  std::vector<std::vector<TokenList>> image_refs;
  image_refs.reserve(eval_set.size());
  for (const Sample* s : eval_set)
    image_refs.push_back({scoring_tokens(s->caption)});
  const CiderCorpus corpus = CiderCorpus::build(image_refs);

  const Heads& heads = model.heads();
  std::vector<Tensor> q_feats(eval_set.size()), t_feats(eval_set.size());
  double cider_sum = 0.0, l1_sum = 0.0;
  int l1_terms = 0, named = 0;

  for (size_t i = 0; i < eval_set.size(); ++i) {
    const Sample& s = *eval_set[i];

    const std::string generated = model.generate_caption(s, model.vocab(), 18, use_pafe);
    const TokenList cand = scoring_tokens(generated);
    const TokenList ref = scoring_tokens(s.caption);
    cider_sum += cider(cand, {ref}, corpus);
    if (report.has_region && caption_names_target(cand, ref)) ++named;

    Tensor z = model.query_output(s, use_pafe);
    q_feats[i] = heads.itc_q.forward(z);
    Tensor tf = model.text_feature(s.caption);
    t_feats[i] = reshape(heads.itc_t.forward(reshape(tf, {1, tf.shape[0]})),
                         {heads.itc_t.W.shape[0]});

    if (report.has_region) {
      Tensor pred = model.predict_region(s, use_pafe);
      const std::array<double, 6> target = s.region.target();
      const int dim = s.region.target_dim();
      for (int d = 0; d < dim; ++d) {
        l1_sum += std::fabs(pred.at(size_t(d)) - target[size_t(d)]);
        ++l1_terms;
      }
    }
  }

  report.cider = cider_sum / static_cast<double>(eval_set.size());
  report.recall_at_1 =
      eval_set.size() < 2 ? 1.0 : retrieval_recall(q_feats, t_feats, 1);
  if (report.has_region) {
    report.region_l1 = l1_sum / static_cast<double>(l1_terms);
    report.region_accuracy =
        static_cast<double>(named) / static_cast<double>(eval_set.size());
  }
  return report;
}

}  // namespace ralign
