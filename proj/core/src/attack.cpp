#include "coeforge/attack.hpp"

#include <cstdio>
#include <fstream>

#include "coeforge/errors.hpp"

namespace coeforge {

namespace {

struct Evaluated {
  double loss;
  double mean_affirm;
  double mean_refuse;
};

Evaluated evaluate_terms(std::span<const QueryTriple> batch, const PerturbationPair& pair, const ModelParams& params,
                         double lambda, ObjectiveTerms terms, PerturbationSites sites = {}) {
  ad::Tape tape;
  graph::ModelGraph g(tape, params, graph::Trainable::kNone);
  const auto lp = paired_log_probs(g, batch, tape.external(pair.ph, false), tape.external(pair.pt, false), sites);
  const ad::Var loss = attack_objective(tape, lp, lambda, terms);
  return {tape.scalar(loss), mean_value(tape, lp.affirm), mean_value(tape, lp.refuse)};
}

}  // namespace

PerturbationPair init_perturbations(const ModelParams& params, int K, Rng& rng) {
  if (K < 1) throw InputError("init_perturbations: K must be >= 1");
  const auto vocab = static_cast<std::size_t>(params.shape.vocab);
  PerturbationPair pair;
  pair.ph.resize(K, params.shape.dim);
  pair.pt.resize(K, params.shape.dim);
  for (int r = 0; r < K; ++r) pair.ph.row(r) = params.base.token_embedding.row(static_cast<Eigen::Index>(rng.uniform_index(vocab)));
  for (int r = 0; r < K; ++r) pair.pt.row(r) = params.base.token_embedding.row(static_cast<Eigen::Index>(rng.uniform_index(vocab)));
  pair.step = 0;
  return pair;
}

double attack_target_loss(std::span<const QueryTriple> batch, const PerturbationPair& pair, const ModelParams& params) {
  return evaluate_terms(batch, pair, params, 0.0, {.target = true, .contrastive = false}).loss;
}

double attack_contrastive_loss(std::span<const QueryTriple> batch, const PerturbationPair& pair,
                               const ModelParams& params) {
  return evaluate_terms(batch, pair, params, 1.0, {.target = false, .contrastive = true}).loss;
}

double attack_loss(std::span<const QueryTriple> batch, const PerturbationPair& pair, const ModelParams& params,
                   double lambda) {
  return evaluate_terms(batch, pair, params, lambda, {}).loss;
}

AttackResult optimize_perturbations(std::span<const QueryTriple> batch, const ModelParams& params,
                                    const AttackConfig& config, Rng& rng) {
  if (config.M < 0) throw InputError("optimize_perturbations: M must be >= 0");
  if (batch.empty()) throw InputError("optimize_perturbations: empty batch");
  AttackResult result;
  result.pair = init_perturbations(params, config.K, rng);
  PerturbationPair& pair = result.pair;

  for (int m = 0;; ++m) {
    ad::Tape tape;
    graph::ModelGraph g(tape, params, graph::Trainable::kNone);
    const bool last = m == config.M;
    ad::Var ph = tape.external(pair.ph, !last);
    ad::Var pt = tape.external(pair.pt, !last);
    const auto lp = paired_log_probs(g, batch, ph, pt, config.sites);
    const ad::Var loss = attack_objective(tape, lp, config.lambda, config.terms);
    result.trajectory.push_back({m, tape.scalar(loss), mean_value(tape, lp.affirm), mean_value(tape, lp.refuse)});
    if (last) break;

    if (!std::isfinite(tape.scalar(loss))) {
      throw InternalError("optimize_perturbations: non-finite attack loss at step " + std::to_string(m));
    }
    tape.backward(loss);
    for (auto [var, target] : {std::pair{ph, &pair.ph}, std::pair{pt, &pair.pt}}) {
      const Matrix& grad = tape.grad(var);
      if (grad.size() == 0) continue;  // site not in the prompt
      if (!grad.allFinite()) {
        throw InternalError("optimize_perturbations: non-finite gradient at step " + std::to_string(m));
      }
      *target -= config.epsilon * grad;
    }
    pair.step = m + 1;
  }
  return result;
}

void write_attack_trajectory_csv(const AttackTrajectory& trajectory, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw InputError("cannot write " + path.string());
  f << "step,m_loss,mean_logp_c,mean_logp_r\n";
  char line[160];
  for (const auto& s : trajectory) {
    std::snprintf(line, sizeof line, "%d,%.17g,%.17g,%.17g\n", s.step, s.loss, s.mean_logp_affirm, s.mean_logp_refuse);
    f << line;
  }
}

}  // namespace coeforge
