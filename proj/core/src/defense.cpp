#include "coeforge/defense.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "coeforge/errors.hpp"

namespace coeforge {

void TrainConfig::validate() const {
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  if (!(epsilon >= 0.0)) throw ConfigError("epsilon must be >= 0");
  if (M < 0) throw ConfigError("M must be >= 0");
  if (T < 1 || N < 1 || H < 1 || K < 1) throw ConfigError("T, N, H, K must be >= 1");
  if (!(outer_lr > 0.0)) throw ConfigError("outer_lr must be > 0");
  if (adapter_rank < 1) throw ConfigError("adapter_rank must be >= 1");
  if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
}

TrainConfig TrainConfig::from_key_values(const KeyValues& kv) {
  TrainConfig c;
  c.lambda = kv_double(kv, "lambda", c.lambda);
  c.epsilon = kv_double(kv, "epsilon", c.epsilon);
  c.M = static_cast<int>(kv_int(kv, "M", c.M));
  c.T = static_cast<int>(kv_int(kv, "T", c.T));
  c.N = static_cast<int>(kv_int(kv, "N", c.N));
  c.H = static_cast<int>(kv_int(kv, "H", c.H));
  c.K = static_cast<int>(kv_int(kv, "K", c.K));
  c.outer_lr = kv_double(kv, "outer_lr", c.outer_lr);
  c.adapter_rank = static_cast<int>(kv_int(kv, "adapter_rank", c.adapter_rank));
  c.seed_corpus = static_cast<std::uint64_t>(kv_int(kv, "seed_corpus", static_cast<long long>(c.seed_corpus)));
  c.seed_model = static_cast<std::uint64_t>(kv_int(kv, "seed_model", static_cast<long long>(c.seed_model)));
  c.seed_train = static_cast<std::uint64_t>(kv_int(kv, "seed_train", static_cast<long long>(c.seed_train)));
  c.corpus_dir = kv_string(kv, "corpus_dir", c.corpus_dir);
  c.checkpoint_every = static_cast<int>(kv_int(kv, "checkpoint_every", c.checkpoint_every));
  c.record_wall_time = kv_bool(kv, "record_wall_time", c.record_wall_time);
  c.validate();
  return c;
}

KeyValues TrainConfig::to_key_values() const {
  return {
      {"lambda", format_double(lambda)},
      {"epsilon", format_double(epsilon)},
      {"M", std::to_string(M)},
      {"T", std::to_string(T)},
      {"N", std::to_string(N)},
      {"H", std::to_string(H)},
      {"K", std::to_string(K)},
      {"outer_lr", format_double(outer_lr)},
      {"adapter_rank", std::to_string(adapter_rank)},
      {"seed_corpus", std::to_string(seed_corpus)},
      {"seed_model", std::to_string(seed_model)},
      {"seed_train", std::to_string(seed_train)},
      {"corpus_dir", corpus_dir},
      {"checkpoint_every", std::to_string(checkpoint_every)},
      {"record_wall_time", record_wall_time ? "true" : "false"},
  };
}

AttackConfig TrainConfig::attack_config() const {
  AttackConfig a;
  a.K = K;
  a.M = M;
  a.epsilon = epsilon;
  a.lambda = lambda;
  return a;
}

void AblationSwitches::validate() const {
  if (drop_target && drop_contra) throw ConfigError("ablation drops every defense loss (drop_target + drop_contra)");
  if (drop_ph && drop_pt) throw ConfigError("ablation drops both perturbation matrices (drop_ph + drop_pt)");
}

AblationSwitches AblationSwitches::parse(const std::string& list) {
  AblationSwitches s;
  std::istringstream in(list);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    if (item == "drop_ph") s.drop_ph = true;
    else if (item == "drop_pt") s.drop_pt = true;
    else if (item == "drop_target") s.drop_target = true;
    else if (item == "drop_contra") s.drop_contra = true;
    else if (item == "drop_utility") s.drop_utility = true;
    else throw ConfigError("unknown ablation switch: " + item);
  }
  s.validate();
  return s;
}

std::string AblationSwitches::to_string() const {
  std::string out;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!out.empty()) out += ',';
    out += name;
  };
  add(drop_ph, "drop_ph");
  add(drop_pt, "drop_pt");
  add(drop_target, "drop_target");
  add(drop_contra, "drop_contra");
  add(drop_utility, "drop_utility");
  return out;
}

namespace {

struct DefenseTerms {
  double target, contra;
};

DefenseTerms evaluate_defense(std::span<const QueryTriple> batch, const PerturbationPair& pair,
                              const ModelParams& params) {
  ad::Tape tape;
  graph::ModelGraph g(tape, params, graph::Trainable::kNone);
  const auto lp = paired_log_probs(g, batch, tape.external(pair.ph, false), tape.external(pair.pt, false));
  return {tape.scalar(negative_log_likelihood(tape, lp.refuse)),
          tape.scalar(contrastive_term(tape, lp.refuse, lp.affirm))};
}

}  // namespace

double defense_target_loss(std::span<const QueryTriple> batch, const PerturbationPair& pair, const ModelParams& params) {
  return evaluate_defense(batch, pair, params).target;
}

double defense_contrastive_loss(std::span<const QueryTriple> batch, const PerturbationPair& pair,
                                const ModelParams& params) {
  return evaluate_defense(batch, pair, params).contra;
}

double defense_loss(std::span<const QueryTriple> batch, const PerturbationPair& pair, const ModelParams& params,
                    double lambda) {
  if (lambda < 0.0) throw InputError("lambda must be >= 0");
  const auto t = evaluate_defense(batch, pair, params);
  return t.target + lambda * t.contra;
}

double utility_loss(std::span<const BenignPair> batch, const ModelParams& params) {
  ad::Tape tape;
  graph::ModelGraph g(tape, params, graph::Trainable::kNone);
  return tape.scalar(utility_objective(g, batch));
}

DefenseStepResult defense_step(ModelParams& params, std::span<const QueryTriple> batch,
                               std::span<const BenignPair> benign, const PerturbationPair& pair, double lambda,
                               Adam& optimizer, const AblationSwitches& switches) {
  switches.validate();
  DefenseStepResult out;
  std::vector<Matrix> grads;
  {
    ad::Tape tape;
    graph::ModelGraph g(tape, params, graph::Trainable::kAdapter);
    const auto lp = paired_log_probs(g, batch, tape.external(pair.ph, false), tape.external(pair.pt, false),
                                     switches.sites());
    const ad::Var target = negative_log_likelihood(tape, lp.refuse);
    const ad::Var contra = contrastive_term(tape, lp.refuse, lp.affirm);
    out.def_target = tape.scalar(target);
    out.def_contra = tape.scalar(contra);
    std::vector<ad::Var> parts;
    if (!switches.drop_target) parts.push_back(target);
    if (!switches.drop_contra) parts.push_back(ad::scale(tape, contra, lambda));
    const ad::Var def = ad::sum(tape, parts);
    out.def_total = tape.scalar(def);
    ad::Var total = def;
    if (!switches.drop_utility) {
      const ad::Var util = utility_objective(g, benign);
      out.utility = tape.scalar(util);
      total = ad::add(tape, def, util);
    } else {
      out.utility = tape.scalar(utility_objective(g, benign));
    }
    if (!std::isfinite(tape.scalar(total))) {
      throw InternalError("defense_step: non-finite loss (def_target=" + std::to_string(out.def_target) +
                          ", def_contra=" + std::to_string(out.def_contra) +
                          ", utility=" + std::to_string(out.utility) + ")");
    }
    tape.backward(total);
    std::size_t i = 0;
    params.for_each_adapter([&](const std::string& name, const Matrix& m) {
      const Matrix& gr = tape.grad(g.adapter_vars()[i++]);
      if (gr.size() != 0 && !gr.allFinite()) throw InternalError("defense_step: non-finite gradient for " + name);
      grads.push_back(gr.size() == 0 ? Matrix::Zero(m.rows(), m.cols()) : gr);
    });
  }
  std::vector<Matrix*> ptrs;
  params.for_each_adapter([&](const std::string&, Matrix& m) { ptrs.push_back(&m); });
  optimizer.step(ptrs, grads);
  return out;
}

TuningResult run_safemllm(const TrainConfig& config, const CorpusSplit& corpus, const ModelParams& base,
                          const RunHooks& hooks) {
  return ablation_variant(config, corpus, base, {}, hooks);
}

TuningResult ablation_variant(const TrainConfig& config, const CorpusSplit& corpus, const ModelParams& base,
                              const AblationSwitches& switches, const RunHooks& hooks) {
  config.validate();
  switches.validate();
  TuningResult result;
  result.params = base;
  if (config.adapter_rank != base.shape.adapter_rank) {
    ModelShape shape = base.shape;
    shape.adapter_rank = config.adapter_rank;
    shape.adapter_alpha = static_cast<int>(std::lround(base.shape.adapter_scale() * config.adapter_rank));
    ModelParams fresh = ModelParams::initialize(shape, config.seed_model);
    fresh.base = base.base;
    result.params = std::move(fresh);
  }
  ModelParams& params = result.params;

  AttackConfig attack = config.attack_config();
  attack.sites = switches.sites();
  attack.terms = switches.terms();
  Adam optimizer(config.outer_lr);
  Rng rng(config.seed_train);

  for (int i = 1; i <= config.T; ++i) {
    try {
      const auto start = std::chrono::steady_clock::now();
      const auto batch = sample_malicious_batch(corpus, static_cast<std::size_t>(config.N), rng);
      AttackResult adv = optimize_perturbations(batch, params, attack, rng);
      const auto benign = sample_benign_batch(corpus, static_cast<std::size_t>(config.H), rng);
      const DefenseStepResult step = defense_step(params, batch, benign, adv.pair, config.lambda, optimizer, switches);

      IterationRecord rec;
      rec.iteration = i;
      rec.attack_loss_final = adv.trajectory.back().loss;
      rec.def_target = step.def_target;
      rec.def_contra = step.def_contra;
      rec.def_total = step.def_total;
      rec.utility = step.utility;
      {
        ad::Tape tape;
        graph::ModelGraph g(tape, params, graph::Trainable::kNone);
        const auto lp = paired_log_probs(g, batch, tape.external(adv.pair.ph, false),
                                         tape.external(adv.pair.pt, false), switches.sites());
        rec.logp_refuse = mean_value(tape, lp.refuse);
        rec.logp_affirm = mean_value(tape, lp.affirm);
      }
      if (config.record_wall_time) {
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      }
      if (i == 1 || i % config.checkpoint_every == 0) result.trajectories[i] = std::move(adv.trajectory);
      result.records.push_back(rec);
      if (hooks.on_record) hooks.on_record(rec);
      if (hooks.on_checkpoint && (i % config.checkpoint_every == 0 || i == config.T)) hooks.on_checkpoint(i, params);
    } catch (const std::exception& e) {
      throw InternalError("iteration " + std::to_string(i) + ": " + e.what());
    }
  }
  return result;
}

std::string metrics_csv_header() { return "iter,attack_loss_final,def_target,def_contra,def_total,utility,logp_r,logp_c,seconds"; }

std::string metrics_csv_row(const IterationRecord& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.6f", r.iteration, r.attack_loss_final,
                r.def_target, r.def_contra, r.def_total, r.utility, r.logp_refuse, r.logp_affirm, r.seconds);
  return buf;
}

void write_metrics_csv(std::span<const IterationRecord> records, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw InputError("cannot write " + path.string());
  f << metrics_csv_header() << '\n';
  for (const auto& r : records) f << metrics_csv_row(r) << '\n';
}

std::vector<IterationRecord> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw LoadError("cannot open metrics file " + path.string());
  std::string line;
  if (!std::getline(f, line) || line != metrics_csv_header()) throw LoadError("metrics file has unexpected header");
  std::vector<IterationRecord> out;
  int lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    IterationRecord r;
    const int n = std::sscanf(line.c_str(), "%d,%lf,%lf,%lf,%lf,%lf,%lf,%lf,%lf", &r.iteration, &r.attack_loss_final,
                              &r.def_target, &r.def_contra, &r.def_total, &r.utility, &r.logp_refuse, &r.logp_affirm,
                              &r.seconds);
    if (n != 9) throw LoadError("metrics line " + std::to_string(lineno) + " is malformed");
    out.push_back(r);
  }
  return out;
}

}  // namespace coeforge
