#include "coeforge/objectives.hpp"

#include "coeforge/errors.hpp"

namespace coeforge {

PairedLogProbs paired_log_probs(const graph::ModelGraph& g, std::span<const QueryTriple> batch, ad::Var ph,
                                ad::Var pt, PerturbationSites sites) {
  if (batch.empty()) throw InputError("empty malicious batch");
  PairedLogProbs out;
  for (const auto& q : batch) {
    const auto ctx = graph::prompt_segments(sites.prefix ? std::optional(ph) : std::nullopt, q.query,
                                            sites.suffix ? std::optional(pt) : std::nullopt);
    out.affirm.push_back(g.sequence_log_prob(ctx, q.affirm));
    out.refuse.push_back(g.sequence_log_prob(ctx, q.refuse));
  }
  return out;
}

ad::Var negative_log_likelihood(ad::Tape& t, std::span<const ad::Var> logp) {
  return ad::scale(t, ad::sum(t, logp), -1.0);
}

ad::Var contrastive_term(ad::Tape& t, std::span<const ad::Var> preferred, std::span<const ad::Var> rejected) {
  if (preferred.size() != rejected.size()) throw InputError("contrastive_term: size mismatch");
  std::vector<ad::Var> terms;
  terms.reserve(preferred.size());
  for (std::size_t i = 0; i < preferred.size(); ++i) {
    terms.push_back(ad::log_sigmoid(t, ad::sub(t, preferred[i], rejected[i])));
  }
  return ad::scale(t, ad::sum(t, terms), -1.0);
}

namespace {

ad::Var combine(ad::Tape& t, std::span<const ad::Var> preferred, std::span<const ad::Var> rejected, double lambda,
                ObjectiveTerms terms) {
  if (lambda < 0.0) throw InputError("lambda must be >= 0");
  if (!terms.target && !terms.contrastive) throw ConfigError("objective has no terms");
  std::vector<ad::Var> parts;
  if (terms.target) parts.push_back(negative_log_likelihood(t, preferred));
  if (terms.contrastive) parts.push_back(ad::scale(t, contrastive_term(t, preferred, rejected), lambda));
  return parts.size() == 1 ? parts[0] : ad::sum(t, parts);
}

}  // namespace

ad::Var attack_objective(ad::Tape& t, const PairedLogProbs& lp, double lambda, ObjectiveTerms terms) {
  return combine(t, lp.affirm, lp.refuse, lambda, terms);
}

ad::Var defense_objective(ad::Tape& t, const PairedLogProbs& lp, double lambda, ObjectiveTerms terms) {
  return combine(t, lp.refuse, lp.affirm, lambda, terms);
}

ad::Var utility_objective(const graph::ModelGraph& g, std::span<const BenignPair> batch) {
  if (batch.empty()) throw InputError("empty benign batch");
  std::vector<ad::Var> logp;
  for (const auto& p : batch) {
    TokenSeq q = p.context;
    q.insert(q.end(), p.question.begin(), p.question.end());
    const auto ctx = graph::prompt_segments(std::nullopt, q, std::nullopt);
    logp.push_back(g.sequence_log_prob(ctx, p.answer));
  }
  return negative_log_likelihood(g.tape(), logp);
}

double mean_value(const ad::Tape& t, std::span<const ad::Var> v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (ad::Var x : v) s += t.scalar(x);
  return s / static_cast<double>(v.size());
}

}  // namespace coeforge
