#pragma once

#include <optional>
#include <span>
#include <vector>

#include "coeforge/corpus.hpp"
#include "coeforge/model.hpp"

namespace coeforge {

/// Which perturbation matrices are spliced into the prompt.
struct PerturbationSites {
  bool prefix = true;
  bool suffix = true;
};

/// Which terms enter the attack and defense objectives. Lambda always scales the
/// contrastive term.
struct ObjectiveTerms {
  bool target = true;
  bool contrastive = true;
};

/// Per-query sequence log-probabilities of the affirmative and refusal responses,
/// both conditioned on the same perturbed prompt.
struct PairedLogProbs {
  std::vector<ad::Var> affirm;
  std::vector<ad::Var> refuse;
};

PairedLogProbs paired_log_probs(const graph::ModelGraph& g, std::span<const QueryTriple> batch, ad::Var ph,
                                ad::Var pt, PerturbationSites sites = {});

/// -sum_n logp[n].
ad::Var negative_log_likelihood(ad::Tape& t, std::span<const ad::Var> logp);
/// -sum_n log sigmoid(preferred[n] - rejected[n]).
ad::Var contrastive_term(ad::Tape& t, std::span<const ad::Var> preferred, std::span<const ad::Var> rejected);

/// Attack side: target term pushes towards the affirmative, contrastive prefers it over the refusal.
ad::Var attack_objective(ad::Tape& t, const PairedLogProbs& lp, double lambda, ObjectiveTerms terms = {});
/// Defense side: the same two terms with the polarities swapped.
ad::Var defense_objective(ad::Tape& t, const PairedLogProbs& lp, double lambda, ObjectiveTerms terms = {});

/// -sum_j log p(answer_j | context_j, question_j), unperturbed prompt.
ad::Var utility_objective(const graph::ModelGraph& g, std::span<const BenignPair> batch);

/// Mean over the batch of a set of 1x1 nodes.
double mean_value(const ad::Tape& t, std::span<const ad::Var> v);

}  // namespace coeforge
