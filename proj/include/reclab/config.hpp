#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "reclab/recycle.hpp"

namespace reclab {

/// Flat key=value pairs with dotted namespaces.
using KeyValues = std::map<std::string, std::string>;

/// One pair per line; blank lines and lines starting with '#' are skipped.
/// ConfigError on a line without '=' or a repeated key.
KeyValues parse_key_values(const std::string& text);
/// Sorted "key=value" lines.
std::string format_key_values(const KeyValues& kv);

enum class ExperimentKind : std::uint8_t {
  pretrain,
  adapt,
  direct_apply,
  connectivity,
  attention,
  init_recycle,
  distill,
  itp,
  projection,
  distance,
};

const char* kind_name(ExperimentKind k);
ExperimentKind parse_kind(const std::string& s);
const std::vector<ExperimentKind>& all_kinds();

/// Pre-training schedule of the lineage M0 -> M1 -> ... and of M_IND.
struct LineageConfig {
  OptimConfig optim{Real(1e-3), Real(0.9), Real(0.98), Real(1e-6), Real(0.01), Real(0.06), 32, 600, 0};
  std::size_t base_steps = 1500;       // M0 on D0, and M_IND
  std::size_t domain_steps = 300;      // each continual domain
  Real domain_lr = Real(3e-4);         // peak lr of D1..Dn; optim.lr drives M0 and M_IND
  std::size_t n_domains = 3;           // continual domains D1..Dn
  std::size_t checkpoint_every = 30;
  std::size_t seq_len = 32;
  std::size_t corpus_tokens = 300000;
  std::uint64_t init_seed = 1;
  std::uint64_t ind_init_seed = 2;
  std::uint64_t corpus_seed = 10;
  std::uint64_t ind_corpus_seed = 20;

  bool operator==(const LineageConfig&) const = default;
};

/// Downstream adaptation settings shared by every recipe.
struct AdaptConfig {
  Real fine_tune_lr = Real(1e-4);
  Real adapter_lr = Real(1e-3);
  std::size_t steps = 150;
  std::size_t batch_size = 16;
  std::size_t eval_every = 10;
  std::size_t n_per_split = 200;  // examples per split before k-shot sampling
  std::size_t kshot = 32;
  std::size_t dev_size = 64;
  Real weight_decay = Real(0.01);
  Real warmup_fraction = Real(0.06);

  bool operator==(const AdaptConfig&) const = default;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::adapt;
  ModelConfig model;
  SuiteConfig suite;
  LineageConfig lineage;
  AdaptConfig adapt;
  KDConfig kd;
  Method method = Method::fine_tune;
  std::string task = "sent-a";
  std::size_t n_interior = 25;
  std::size_t attention_inputs = 16;
  Real itp_gamma = 1;
  std::size_t itp_n_mu = 2;
  std::size_t projection_bottleneck = 8;
  std::size_t projection_steps = 150;
  Real projection_lr = Real(1e-3);
  std::size_t unlabeled_size = 256;
  std::size_t teacher_kshot = 64;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::string out = "runs";
  std::size_t threads = 1;

  void validate() const;
};

KeyValues to_key_values(const ExperimentConfig& cfg);
/// Missing keys keep their defaults; unknown keys raise ConfigError.
ExperimentConfig experiment_from_key_values(const KeyValues& kv);
ExperimentConfig load_experiment_config(const std::string& path);

/// Stable 64-bit FNV-1a hash of the serialized config, as 16 hex digits.
/// The output directory and thread count are left out.
std::string config_hash(const ExperimentConfig& cfg);

/// Optimizer for adaptation with the given method and seed.
OptimConfig adapt_optim(const ExperimentConfig& cfg, Method method, std::uint64_t seed);

void write_model_config(const ModelConfig& m, const std::string& prefix, KeyValues& kv);
ModelConfig read_model_config(const KeyValues& kv, const std::string& prefix);

}  // namespace reclab
