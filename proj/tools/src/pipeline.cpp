#include "coeforge_cli/pipeline.hpp"

#include <array>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include <openssl/evp.h>

#include "coeforge/errors.hpp"

namespace coeforge::cli {

namespace {

// Keys owned by TrainConfig; everything else below belongs to the pipeline.
const std::set<std::string> kTrainKeys = {
    "lambda",      "epsilon",      "M",          "T",          "N",          "H",
    "K",           "outer_lr",     "adapter_rank", "seed_corpus", "seed_model", "seed_train",
    "corpus_dir",  "checkpoint_every", "record_wall_time"};

const std::set<std::string> kPipelineKeys = {
    "n_malicious", "n_benign",       "n_malicious_heldout", "n_benign_heldout", "vocab_size",
    "layers",      "heads",          "dim",                 "ff_dim",           "context",
    "adapter_alpha", "pretrain_epochs", "pretrain_lr",      "pretrain_batch",   "init_std",
    "embedding_std", "prefix_len",   "prefix_steps",        "prefix_epsilon",   "suffix_len",
    "suffix_iters", "suffix_top_k",  "max_decode",          "attack_train_queries"};

int as_int(const KeyValues& kv, const std::string& key, int fallback) {
  return static_cast<int>(kv_int(kv, key, fallback));
}

// Distinct attack streams derived from the training seed.
constexpr std::uint64_t kPrefixSalt = 0x70726566ULL;
constexpr std::uint64_t kSuffixSalt = 0x73756666ULL;

}  // namespace

PipelineConfig PipelineConfig::from_key_values(const KeyValues& kv) {
  for (const auto& [k, v] : kv) {
    if (!kTrainKeys.count(k) && !kPipelineKeys.count(k)) throw ConfigError("unknown config key: " + k);
  }
  PipelineConfig c;
  c.train = TrainConfig::from_key_values(kv);
  c.corpus.n_malicious = as_int(kv, "n_malicious", c.corpus.n_malicious);
  c.corpus.n_benign = as_int(kv, "n_benign", c.corpus.n_benign);
  c.corpus.n_malicious_heldout = as_int(kv, "n_malicious_heldout", c.corpus.n_malicious_heldout);
  c.corpus.n_benign_heldout = as_int(kv, "n_benign_heldout", c.corpus.n_benign_heldout);
  c.corpus.vocab_size = as_int(kv, "vocab_size", c.corpus.vocab_size);
  c.shape.layers = as_int(kv, "layers", c.shape.layers);
  c.shape.heads = as_int(kv, "heads", c.shape.heads);
  c.shape.dim = as_int(kv, "dim", c.shape.dim);
  c.shape.ff_dim = as_int(kv, "ff_dim", c.shape.ff_dim);
  c.shape.context = as_int(kv, "context", c.shape.context);
  c.shape.adapter_alpha = as_int(kv, "adapter_alpha", c.shape.adapter_alpha);
  c.pretrain.epochs = as_int(kv, "pretrain_epochs", c.pretrain.epochs);
  c.pretrain.lr = kv_double(kv, "pretrain_lr", c.pretrain.lr);
  c.pretrain.batch_size = as_int(kv, "pretrain_batch", c.pretrain.batch_size);
  c.pretrain.init_std = kv_double(kv, "init_std", c.pretrain.init_std);
  c.pretrain.embedding_std = kv_double(kv, "embedding_std", c.pretrain.embedding_std);
  c.prefix.length = as_int(kv, "prefix_len", c.prefix.length);
  c.prefix.steps = as_int(kv, "prefix_steps", c.prefix.steps);
  c.prefix.epsilon = kv_double(kv, "prefix_epsilon", c.prefix.epsilon);
  c.suffix.length = as_int(kv, "suffix_len", c.suffix.length);
  c.suffix.iterations = as_int(kv, "suffix_iters", c.suffix.iterations);
  c.suffix.top_k = as_int(kv, "suffix_top_k", c.suffix.top_k);
  c.max_decode = as_int(kv, "max_decode", c.max_decode);
  c.attack_train_queries = as_int(kv, "attack_train_queries", c.attack_train_queries);
  c.validate();
  return c;
}

KeyValues PipelineConfig::to_key_values() const {
  KeyValues kv = train.to_key_values();
  kv["n_malicious"] = std::to_string(corpus.n_malicious);
  kv["n_benign"] = std::to_string(corpus.n_benign);
  kv["n_malicious_heldout"] = std::to_string(corpus.n_malicious_heldout);
  kv["n_benign_heldout"] = std::to_string(corpus.n_benign_heldout);
  kv["vocab_size"] = std::to_string(corpus.vocab_size);
  kv["layers"] = std::to_string(shape.layers);
  kv["heads"] = std::to_string(shape.heads);
  kv["dim"] = std::to_string(shape.dim);
  kv["ff_dim"] = std::to_string(shape.ff_dim);
  kv["context"] = std::to_string(shape.context);
  kv["adapter_alpha"] = std::to_string(shape.adapter_alpha);
  kv["pretrain_epochs"] = std::to_string(pretrain.epochs);
  kv["pretrain_lr"] = format_double(pretrain.lr);
  kv["pretrain_batch"] = std::to_string(pretrain.batch_size);
  kv["init_std"] = format_double(pretrain.init_std);
  kv["embedding_std"] = format_double(pretrain.embedding_std);
  kv["prefix_len"] = std::to_string(prefix.length);
  kv["prefix_steps"] = std::to_string(prefix.steps);
  kv["prefix_epsilon"] = format_double(prefix.epsilon);
  kv["suffix_len"] = std::to_string(suffix.length);
  kv["suffix_iters"] = std::to_string(suffix.iterations);
  kv["suffix_top_k"] = std::to_string(suffix.top_k);
  kv["max_decode"] = std::to_string(max_decode);
  kv["attack_train_queries"] = std::to_string(attack_train_queries);
  return kv;
}

void PipelineConfig::validate() const {
  train.validate();
  if (pretrain.epochs < 0 || pretrain.batch_size < 1 || pretrain.lr <= 0.0) throw ConfigError("bad pretraining settings");
  if (pretrain.init_std <= 0.0 || pretrain.embedding_std <= 0.0) throw ConfigError("init_std and embedding_std must be > 0");
  if (prefix.length < 1 || prefix.steps < 0 || prefix.epsilon < 0.0) throw ConfigError("bad prefix attack settings");
  if (suffix.length < 1 || suffix.iterations < 0 || suffix.top_k < 1) throw ConfigError("bad suffix attack settings");
  if (max_decode < 1) throw ConfigError("max_decode must be >= 1");
  if (attack_train_queries < 1 || attack_train_queries >= corpus.n_malicious_heldout) {
    throw ConfigError("attack_train_queries must leave a non-empty scored held-out set");
  }
}

CorpusSplit make_corpus(const PipelineConfig& cfg) {
  CorpusOptions o = cfg.corpus;
  o.seed = cfg.train.seed_corpus;
  return generate_corpus(o);
}

ModelParams pretrain_model(const PipelineConfig& cfg, const CorpusSplit& corpus) {
  ModelShape shape = cfg.shape;
  shape.vocab = static_cast<int>(corpus.vocab.size());
  shape.adapter_rank = cfg.train.adapter_rank;
  PretrainOptions o = cfg.pretrain;
  o.seed = cfg.train.seed_model;
  const auto pairs = pretraining_pairs(corpus);
  return pretrain_base(pairs, shape, o);
}

AttackArtifact train_attack(const PipelineConfig& cfg, const ModelParams& params, const CorpusSplit& corpus,
                            ArtifactKind kind) {
  const HeldoutPools pools = split_heldout(corpus, cfg.attack_train_queries);
  if (kind == ArtifactKind::kPrefixEmbedding) {
    Rng rng(cfg.train.seed_train ^ kPrefixSalt);
    PrefixAttackOptions o = cfg.prefix;
    o.lambda = cfg.train.lambda;
    return train_universal_prefix(params, pools.attack_train, pools.attack_train_ids, o, rng);
  }
  Rng rng(cfg.train.seed_train ^ kSuffixSalt);
  return greedy_suffix_attack(params, pools.attack_train, pools.attack_train_ids, cfg.suffix, rng);
}

EvalReport evaluate(const PipelineConfig& cfg, const ModelParams& params, const CorpusSplit& corpus,
                    const AttackArtifact& artifact, int threads, const std::string& checkpoint_id) {
  const HeldoutPools pools = split_heldout(corpus, cfg.attack_train_queries);
  EvalReport r = compute_asr(params, artifact, pools.scored, corpus.vocab, threads, cfg.max_decode);
  r.utility_nll = utility_nll(params, corpus.benign_heldout);
  r.model_checkpoint = checkpoint_id;
  r.seed = cfg.train.seed_train;
  return r;
}

int eval_threads() {
  if (const char* env = std::getenv("COEFORGE_THREADS"); env != nullptr && *env != '\0') {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1 || v > 1024) throw ConfigError(std::string("COEFORGE_THREADS must be an integer in [1, 1024], got ") + env);
    return static_cast<int>(v);
  }
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw LoadError("cannot open " + path.string() + " for hashing");
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::array<char, 1 << 16> buf{};
  while (f) {
    f.read(buf.data(), buf.size());
    if (f.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(f.gcount()));
  }
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md.data(), &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

AttackTrajectory read_attack_trajectory_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw LoadError("cannot open trajectory " + path.string());
  std::string line;
  if (!std::getline(f, line) || line != "step,m_loss,mean_logp_c,mean_logp_r") {
    throw LoadError("trajectory " + path.string() + " has an unexpected header");
  }
  AttackTrajectory out;
  int lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    AttackStep s;
    if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf", &s.step, &s.loss, &s.mean_logp_affirm, &s.mean_logp_refuse) != 4) {
      throw LoadError("trajectory " + path.string() + " line " + std::to_string(lineno) + " is malformed");
    }
    out.push_back(s);
  }
  return out;
}

}  // namespace coeforge::cli
