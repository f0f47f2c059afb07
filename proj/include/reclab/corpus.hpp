#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "reclab/model.hpp"

namespace reclab {

/// Token source: a background bigram chain plus theme clusters.
struct TokenSource {
  std::vector<std::int32_t> background;
  std::vector<std::vector<Real>> bigram;        // [i][j]: P(background[j] | background[i])
  std::vector<Real> stationary;                 // stationary distribution of the bigram chain
  std::vector<std::vector<std::int32_t>> themes;
  std::vector<Real> theme_weights;              // probability of each theme given a themed regime
};

/// Regime-switching generator. Before every token a new regime starts with
/// probability switch_prob: the source is the base with probability overlap,
/// otherwise the domain's own; then a theme is picked (none with
/// probability no_theme_prob). Inside a themed regime a token comes from the
/// theme cluster with probability theme_emit_prob, otherwise from the
/// source's background chain, which restarts from its stationary
/// distribution at every regime start.
struct DomainSpec {
  std::string id;
  Real overlap = 0;
  TokenSource own;
  TokenSource base;
  Real switch_prob = Real(0.05);
  Real no_theme_prob = Real(0.2);
  Real theme_emit_prob = Real(0.5);

  /// Throws SpecError on malformed distributions.
  void validate() const;
};

/// Exact unigram marginal of the generator over the full vocabulary.
std::vector<Real> domain_marginal(const DomainSpec& spec, std::size_t vocab_size);

std::vector<std::int32_t> generate_domain_corpus(const DomainSpec& spec, std::size_t n_tokens, std::uint64_t seed);

enum class TaskFamily : std::uint8_t { sentiment, emotion, nli };
const char* family_name(TaskFamily f);
TaskFamily parse_family(const std::string& s);

/// Latent rules, by family:
///   sentiment: 2-3 markers, all from group 0 (label 0) or all from group 1 (label 1)
///   emotion:   2-3 markers from group 0 present (label 1) or none (label 0)
///   nli:       four markers from groups 0/1 with counts 3:1 (label 0), 1:3 (label 1), 2:2 (label 2)
/// Tokens of `excluded` never occur in the background of an example.
struct TaskSpec {
  std::string id;
  std::string domain_id;
  TaskFamily family = TaskFamily::sentiment;
  std::vector<std::int32_t> verbalizer;  // label -> token
  std::vector<std::vector<std::int32_t>> markers;
  std::vector<std::int32_t> excluded;
  std::size_t seq_len = 16;

  std::size_t n_labels() const { return verbalizer.size(); }
  /// Throws SpecError on verbalizer collisions or malformed marker groups.
  void validate(std::size_t vocab_size) const;
};

struct TaskDataset {
  std::string task_id;
  std::vector<std::int32_t> verbalizer;
  std::vector<Example> train;
  std::vector<Example> dev;
  std::vector<Example> test;
  std::uint64_t seed = 0;
};

/// Label-balanced train/dev/test splits with no sequence shared between splits.
TaskDataset make_task_dataset(const TaskSpec& spec, const DomainSpec& domain, std::size_t n_per_split, std::uint64_t seed);

/// Label predicted by the latent rule.
std::int32_t rule_label(const TaskSpec& spec, const Example& ex);

/// Keeps exactly k training examples per label. Per label, examples are
/// ranked by a seeded shuffle and the first k kept, in dataset order, so
/// smaller k gives a subset of larger k.
TaskDataset sample_kshot(const TaskDataset& data, std::size_t k, std::uint64_t seed);

struct MaskedBatch {
  std::vector<std::int32_t> tokens;
  std::vector<std::size_t> rows;      // selected positions
  std::vector<std::int32_t> targets;  // original token at each selected position
};

/// Selects each position with mask_prob; a selected token becomes [MASK] with
/// probability 0.8, a uniform token from [random_low, random_high) with 0.1,
/// or stays with 0.1.
MaskedBatch mlm_mask(const std::vector<std::int32_t>& tokens, Real mask_prob, std::uint64_t seed,
                     std::int32_t random_low, std::int32_t random_high);

// ---------------------------------------------------------------------------
// Standard suite: base domain D0, continual domains D1..D4, six tasks.

struct SuiteConfig {
  std::size_t vocab_size = 512;
  std::int32_t first_content = 12;      // 4..11 are verbalizer tokens
  std::size_t base_background = 100;
  std::size_t base_themes = 6;
  std::size_t domain_background = 48;
  std::size_t domain_themes = 4;
  std::size_t theme_size = 8;
  std::size_t bigram_successors = 6;
  Real bigram_smoothing = Real(0.05);
  Real base_foreign_theme_mass = Real(0.3);  // base-domain share of themed regimes using continual-domain themes
  std::vector<Real> overlaps = {Real(0.3), Real(0.3), Real(0.3), Real(0.6)};
  std::size_t task_seq_len = 16;
  std::uint64_t seed = 1234;
};

struct Suite {
  std::vector<DomainSpec> domains;  // D0 .. D4
  std::vector<TaskSpec> tasks;      // two per family, family k drawn from domain k+1
  const DomainSpec& domain(const std::string& id) const;
  const TaskSpec& task(const std::string& id) const;
};

Suite make_suite(const SuiteConfig& cfg);

// ---------------------------------------------------------------------------
// Serialization

/// key=value lines; token lists and rows are comma separated.
std::map<std::string, std::string> to_config(const DomainSpec& spec, const std::string& prefix);
DomainSpec domain_from_config(const std::map<std::string, std::string>& kv, const std::string& prefix);
std::map<std::string, std::string> to_config(const TaskSpec& spec, const std::string& prefix);
TaskSpec task_from_config(const std::map<std::string, std::string>& kv, const std::string& prefix);

/// One line per example: "split<TAB>label<TAB>mask_index<TAB>t0 t1 ...".
std::string export_dataset(const TaskDataset& data);

}  // namespace reclab
