#include "coeforge_cli/cli.hpp"

#include <ctime>
#include <fstream>
#include <map>
#include <optional>
#include <regex>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "coeforge/checkpoint.hpp"
#include "coeforge/errors.hpp"
#include "coeforge_cli/pipeline.hpp"

namespace coeforge::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed_corpus, seed_model, seed_train;
  std::vector<std::string> overrides;
  std::string out;
  bool force = false;
};

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

PipelineConfig resolve_config(const CommonOptions& o) {
  KeyValues kv = o.config.empty() ? KeyValues{} : read_key_values(o.config);
  for (const auto& s : o.overrides) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
    kv[s.substr(0, eq)] = s.substr(eq + 1);
  }
  if (o.seed_corpus) kv["seed_corpus"] = std::to_string(*o.seed_corpus);
  if (o.seed_model) kv["seed_model"] = std::to_string(*o.seed_model);
  if (o.seed_train) kv["seed_train"] = std::to_string(*o.seed_train);
  return PipelineConfig::from_key_values(kv);
}

/// Records inputs and outputs of one command and writes manifest_<command>.json.
class Manifest {
 public:
  Manifest(std::string command, const PipelineConfig& cfg, fs::path dir)
      : command_(std::move(command)), cfg_(cfg), dir_(std::move(dir)), started_(utc_now()) {}

  void input(const fs::path& p) { inputs_.push_back(p); }
  void output(const fs::path& p) { outputs_.push_back(p); }

  void write() const {
    json doc{{"command", command_}, {"config", cfg_.to_key_values()}, {"started", started_}, {"finished", utc_now()},
             {"seeds", {{"corpus", cfg_.train.seed_corpus}, {"model", cfg_.train.seed_model}, {"train", cfg_.train.seed_train}}}};
    auto hashed = [](const std::vector<fs::path>& paths) {
      json arr = json::array();
      for (const auto& p : paths) {
        if (fs::is_directory(p)) {
          arr.push_back({{"path", p.string()}});
        } else {
          arr.push_back({{"path", p.string()}, {"sha256", sha256_file(p)}});
        }
      }
      return arr;
    };
    doc["inputs"] = hashed(inputs_);
    doc["outputs"] = hashed(outputs_);
    std::ofstream f(dir_ / ("manifest_" + command_ + ".json"), std::ios::trunc);
    if (!f) throw InputError("cannot write manifest in " + dir_.string());
    f << doc.dump(2) << '\n';
  }

 private:
  std::string command_;
  PipelineConfig cfg_;
  fs::path dir_;
  std::string started_;
  std::vector<fs::path> inputs_, outputs_;
};

fs::path require_out(const CommonOptions& o) {
  if (o.out.empty()) throw InputError("--out DIR is required");
  fs::create_directories(o.out);
  return o.out;
}

void guard_outputs(const std::vector<fs::path>& files, bool force) {
  if (force) return;
  for (const auto& f : files) {
    if (fs::exists(f)) throw InputError("output exists: " + f.string() + " (pass --force to overwrite)");
  }
}

void write_json(const json& j, const fs::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw InputError("cannot write " + path.string());
  f << j.dump(2) << '\n';
}

std::string kind_short(ArtifactKind k) { return k == ArtifactKind::kPrefixEmbedding ? "prefix" : "suffix"; }

std::string checkpoint_id(const fs::path& p) { return "sha256:" + sha256_file(p); }

CorpusSplit load_corpus_dir(const fs::path& dir, std::ostream& err) {
  std::vector<std::string> warnings;
  CorpusSplit c = load_jsonl(dir, &warnings);
  for (const auto& w : warnings) err << "coeforge: warning: " << w << '\n';
  return c;
}

std::string iter_name(const char* stem, int iter, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%04d%s", stem, iter, ext);
  return buf;
}

int cmd_gen_data(const CommonOptions& o, std::ostream& out) {
  const PipelineConfig cfg = resolve_config(o);
  const fs::path dir = o.out.empty() ? fs::path(cfg.train.corpus_dir) : fs::path(o.out);
  if (fs::exists(dir) && !fs::is_empty(dir) && !o.force) {
    throw InputError("output directory " + dir.string() + " exists and is not empty (pass --force to overwrite)");
  }
  Manifest m("gen-data", cfg, (fs::create_directories(dir), dir));
  const CorpusSplit c = make_corpus(cfg);
  save_jsonl(c, dir);
  for (const char* f : {"malicious_train.jsonl", "malicious_heldout.jsonl", "benign_train.jsonl", "benign_heldout.jsonl", "meta.json"}) {
    m.output(dir / f);
  }
  m.write();
  out << "malicious_train " << c.malicious_train.size() << "\nmalicious_heldout " << c.malicious_heldout.size()
      << "\nbenign_train " << c.benign_train.size() << "\nbenign_heldout " << c.benign_heldout.size() << "\nvocab "
      << c.vocab.size() << '\n';
  return 0;
}

int cmd_pretrain(const CommonOptions& o, const std::string& corpus_dir, std::ostream& out, std::ostream& err) {
  const PipelineConfig cfg = resolve_config(o);
  const fs::path dir = require_out(o);
  const fs::path cdir = corpus_dir.empty() ? fs::path(cfg.train.corpus_dir) : fs::path(corpus_dir);
  const fs::path ckpt = dir / "base.ckpt";
  std::vector<fs::path> files = {ckpt};
  for (const char* k : {"prefix", "suffix"}) {
    files.push_back(dir / (std::string("artifact_original_") + k + ".json"));
    files.push_back(dir / (std::string("report_original_") + k + ".json"));
  }
  guard_outputs(files, o.force);
  Manifest m("pretrain", cfg, dir);
  m.input(cdir / "meta.json");
  const CorpusSplit corpus = load_corpus_dir(cdir, err);
  const ModelParams params = pretrain_model(cfg, corpus);
  save_checkpoint(params, ckpt);
  m.output(ckpt);
  const std::string id = checkpoint_id(ckpt);
  const int threads = eval_threads();
  for (ArtifactKind kind : {ArtifactKind::kPrefixEmbedding, ArtifactKind::kDiscreteSuffix}) {
    const AttackArtifact a = train_attack(cfg, params, corpus, kind);
    const fs::path ap = dir / ("artifact_original_" + kind_short(kind) + ".json");
    save_artifact(a, ap);
    const EvalReport r = evaluate(cfg, params, corpus, a, threads, id);
    const fs::path rp = dir / ("report_original_" + kind_short(kind) + ".json");
    write_json(report_to_json(r), rp);
    m.output(ap);
    m.output(rp);
    out << "original " << kind_short(kind) << " asr " << format_double(r.asr) << '\n';
  }
  m.write();
  return 0;
}

int cmd_tune(const CommonOptions& o, const std::string& corpus_dir, const std::string& checkpoint,
             const std::string& ablation, std::ostream& out, std::ostream& err) {
  const PipelineConfig cfg = resolve_config(o);
  const AblationSwitches switches = AblationSwitches::parse(ablation);
  switches.validate();
  const fs::path dir = require_out(o);
  if (checkpoint.empty()) throw InputError("--checkpoint PATH is required");
  const fs::path cdir = corpus_dir.empty() ? fs::path(cfg.train.corpus_dir) : fs::path(corpus_dir);
  const fs::path metrics = dir / "metrics.csv";
  const fs::path tuned = dir / "tuned.ckpt";
  guard_outputs({metrics, tuned}, o.force);
  Manifest m(switches.any() ? "tune-" + switches.to_string() : "tune", cfg, dir);
  m.input(checkpoint);
  m.input(cdir / "meta.json");
  const CorpusSplit corpus = load_corpus_dir(cdir, err);
  const ModelParams base = load_checkpoint(checkpoint);

  fs::create_directories(dir / "checkpoints");
  std::ofstream mf(metrics, std::ios::trunc);
  if (!mf) throw InputError("cannot write " + metrics.string());
  mf << metrics_csv_header() << '\n' << std::flush;
  RunHooks hooks;
  hooks.on_record = [&](const IterationRecord& r) { mf << metrics_csv_row(r) << '\n' << std::flush; };
  hooks.on_checkpoint = [&](int iter, const ModelParams& p) {
    save_checkpoint(p, dir / "checkpoints" / iter_name("iter", iter, ".ckpt"));
  };
  const TuningResult result = ablation_variant(cfg.train, corpus, base, switches, hooks);
  mf.close();
  save_checkpoint(result.params, tuned);
  m.output(metrics);
  m.output(tuned);

  fs::create_directories(dir / "attack_trajectories");
  for (const auto& [iter, traj] : result.trajectories) {
    const fs::path p = dir / "attack_trajectories" / iter_name("attack_iter", iter, ".csv");
    write_attack_trajectory_csv(traj, p);
    m.output(p);
  }
  for (const auto& p : trajectory_reports(result.trajectories, dir / "trajectories")) m.output(p);
  m.write();
  const IterationRecord& last = result.records.back();
  out << "iterations " << result.records.size() << "\nfinal logp_r " << format_double(last.logp_refuse)
      << "\nfinal logp_c " << format_double(last.logp_affirm) << '\n';
  return 0;
}

int cmd_attack(const CommonOptions& o, const std::string& corpus_dir, const std::string& checkpoint,
               const std::string& kind_name, std::ostream& out, std::ostream& err) {
  const PipelineConfig cfg = resolve_config(o);
  const ArtifactKind kind = parse_artifact_kind(kind_name);
  const fs::path dir = require_out(o);
  if (checkpoint.empty()) throw InputError("--checkpoint PATH is required");
  const fs::path cdir = corpus_dir.empty() ? fs::path(cfg.train.corpus_dir) : fs::path(corpus_dir);
  const fs::path ap = dir / ("artifact_" + kind_short(kind) + ".json");
  guard_outputs({ap}, o.force);
  Manifest m("attack-" + kind_short(kind), cfg, dir);
  m.input(checkpoint);
  m.input(cdir / "meta.json");
  const CorpusSplit corpus = load_corpus_dir(cdir, err);
  const ModelParams params = load_checkpoint(checkpoint);
  const AttackArtifact a = train_attack(cfg, params, corpus, kind);
  save_artifact(a, ap);
  m.output(ap);
  m.write();
  out << "artifact " << ap.string() << "\nfinal loss " << format_double(a.loss_history.back()) << '\n';
  return 0;
}

int cmd_eval(const CommonOptions& o, const std::string& corpus_dir, const std::string& checkpoint,
             const std::string& artifact, std::ostream& out, std::ostream& err) {
  const PipelineConfig cfg = resolve_config(o);
  const fs::path dir = require_out(o);
  if (checkpoint.empty()) throw InputError("--checkpoint PATH is required");
  if (artifact.empty()) throw InputError("--artifact PATH is required");
  if (!fs::exists(artifact)) throw LoadError("attack artifact not found: " + artifact);
  const fs::path cdir = corpus_dir.empty() ? fs::path(cfg.train.corpus_dir) : fs::path(corpus_dir);
  const CorpusSplit corpus = load_corpus_dir(cdir, err);
  const ModelParams params = load_checkpoint(checkpoint);
  const AttackArtifact a = load_artifact(artifact);
  const EvalReport r = evaluate(cfg, params, corpus, a, eval_threads(), checkpoint_id(checkpoint));
  const fs::path rp = dir / ("report_" + r.model_role + "_" + kind_short(a.kind) + ".json");
  guard_outputs({rp}, o.force);
  Manifest m("eval-" + r.model_role + "-" + kind_short(a.kind), cfg, dir);
  m.input(checkpoint);
  m.input(artifact);
  m.input(cdir / "meta.json");
  const json j = report_to_json(r);
  if (const auto problems = validate_report_json(j); !problems.empty()) {
    throw InternalError("report failed validation: " + problems.front());
  }
  write_json(j, rp);
  m.output(rp);
  m.write();
  out << r.model_role << ' ' << kind_short(a.kind) << " asr " << format_double(r.asr) << " other "
      << format_double(r.other_rate()) << " utility_nll " << format_double(r.utility_nll) << '\n';
  return 0;
}

int cmd_report(const CommonOptions& o, const std::string& input, std::ostream& out) {
  const PipelineConfig cfg = resolve_config(o);
  if (input.empty()) throw InputError("--input DIR is required");
  if (!fs::is_directory(input)) throw InputError("input directory not found: " + input);
  const fs::path dir = require_out(o);

  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(input)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());

  // (role, attack) -> list of ASRs
  std::map<std::pair<std::string, std::string>, std::vector<double>> cells;
  std::map<int, fs::path> attack_traj;
  static const std::regex traj_re("attack_iter_(\\d{4})\\.csv");
  for (const auto& f : files) {
    std::smatch match;
    const std::string name = f.filename().string();
    if (std::regex_match(name, match, traj_re)) {
      attack_traj[std::stoi(match[1].str())] = f;
      continue;
    }
    if (f.extension() != ".json" || name.rfind("report_", 0) != 0) continue;
    std::ifstream in(f);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw LoadError("report " + f.string() + " is not valid JSON");
    }
    const EvalReport r = report_from_json(j);
    const std::string attack = r.attack == "prefix-embedding" ? "prefix" : "suffix";
    cells[{r.model_role, attack}].push_back(r.asr);
  }
  if (cells.empty() && attack_traj.empty()) throw InputError("no eval reports or trajectories under " + input);

  guard_outputs({dir / "table1.csv", dir / "table1.md"}, o.force);
  Manifest m("report", cfg, dir);
  m.input(input);
  auto cell = [&](const std::string& role, const std::string& attack) -> std::string {
    auto it = cells.find({role, attack});
    if (it == cells.end()) return "";
    double s = 0.0;
    for (double v : it->second) s += v;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", 100.0 * s / static_cast<double>(it->second.size()));
    return buf;
  };
  {
    std::ofstream csv(dir / "table1.csv", std::ios::trunc);
    std::ofstream md(dir / "table1.md", std::ios::trunc);
    csv << "model,prefix_asr_pct,suffix_asr_pct\n";
    md << "| model | prefix ASR (%) | suffix ASR (%) |\n|---|---|---|\n";
    for (const char* role : {"original", "defended"}) {
      csv << role << ',' << cell(role, "prefix") << ',' << cell(role, "suffix") << '\n';
      md << "| " << role << " | " << cell(role, "prefix") << " | " << cell(role, "suffix") << " |\n";
      out << role << " prefix " << cell(role, "prefix") << " suffix " << cell(role, "suffix") << '\n';
    }
  }
  m.output(dir / "table1.csv");
  m.output(dir / "table1.md");

  std::map<int, AttackTrajectory> grid;
  for (const auto& [iter, path] : attack_traj) {
    if (iter == 1 || iter % cfg.train.checkpoint_every == 0) grid[iter] = read_attack_trajectory_csv(path);
  }
  for (const auto& p : trajectory_reports(grid, dir / "figure5")) m.output(p);
  out << "trajectory files " << grid.size() << '\n';
  m.write();
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"coeforge: adversarial tuning of a tiny decoder against contrastive embedding attacks"};
  app.require_subcommand(1);
  CommonOptions common;
  std::string corpus_dir, checkpoint, artifact, ablation, kind, input;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "Flat key = value config file");
    sub->add_option("--seed-corpus", common.seed_corpus, "Corpus seed");
    sub->add_option("--seed-model", common.seed_model, "Model init seed");
    sub->add_option("--seed-train", common.seed_train, "Training and attack seed");
    sub->add_option("--set", common.overrides, "Override one config key (key=value), repeatable");
    sub->add_option("--out", common.out, "Output directory");
    sub->add_flag("--force", common.force, "Overwrite existing outputs");
  };
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic corpus");
  add_common(gen);
  auto* pre = app.add_subcommand("pretrain", "Pretrain the base model and report undefended ASR");
  add_common(pre);
  pre->add_option("--corpus", corpus_dir, "Corpus directory (default: corpus_dir key)");
  auto* tune = app.add_subcommand("tune", "Run adversarial tuning");
  add_common(tune);
  tune->add_option("--corpus", corpus_dir, "Corpus directory");
  tune->add_option("--checkpoint", checkpoint, "Base checkpoint");
  tune->add_option("--ablation", ablation, "Comma list of drop_ph,drop_pt,drop_target,drop_contra,drop_utility");
  auto* atk = app.add_subcommand("attack", "Train a universal attack artifact");
  add_common(atk);
  atk->add_option("--corpus", corpus_dir, "Corpus directory");
  atk->add_option("--checkpoint", checkpoint, "Model checkpoint");
  atk->add_option("--kind", kind, "prefix or suffix")->required()->check(CLI::IsMember({"prefix", "suffix"}));
  auto* ev = app.add_subcommand("eval", "Evaluate an artifact against a model");
  add_common(ev);
  ev->add_option("--corpus", corpus_dir, "Corpus directory");
  ev->add_option("--checkpoint", checkpoint, "Model checkpoint");
  ev->add_option("--artifact", artifact, "Attack artifact JSON");
  auto* rep = app.add_subcommand("report", "Summarise reports and trajectories");
  add_common(rep);
  rep->add_option("--input", input, "Directory holding eval reports and tune outputs");

  std::vector<const char*> argv = {"coeforge"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "coeforge: error: usage: " << msg << '\n';
    return 2;
  }

  auto fail = [&](const char* category, std::string msg, int code) {
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "coeforge: error: " << category << ": " << msg << '\n';
    return code;
  };
  try {
    if (gen->parsed()) return cmd_gen_data(common, out);
    if (pre->parsed()) return cmd_pretrain(common, corpus_dir, out, err);
    if (tune->parsed()) return cmd_tune(common, corpus_dir, checkpoint, ablation, out, err);
    if (atk->parsed()) return cmd_attack(common, corpus_dir, checkpoint, kind, out, err);
    if (ev->parsed()) return cmd_eval(common, corpus_dir, checkpoint, artifact, out, err);
    if (rep->parsed()) return cmd_report(common, input, out);
  } catch (const ConfigError& e) {
    return fail("config", e.what(), 2);
  } catch (const InputError& e) {
    return fail("input", e.what(), 2);
  } catch (const LoadError& e) {
    return fail("load", e.what(), 3);
  } catch (const InternalError& e) {
    return fail("internal", e.what(), 4);
  } catch (const std::exception& e) {
    return fail("runtime", e.what(), 1);
  }
  return fail("usage", "no command", 2);
}

}  // namespace coeforge::cli
