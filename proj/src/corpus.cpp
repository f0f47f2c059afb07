#include "reclab/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "reclab/errors.hpp"
#include "reclab/rng.hpp"

namespace reclab {

namespace {

constexpr Real kRowTol = Real(1e-9);

std::size_t sample_index(Rng& rng, std::span<const Real> weights) {
  const Real u = Real(rng.uniform());
  Real acc = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (u < acc) return i;
  }
  // Round-off: fall back to the last index with positive weight.
  for (std::size_t i = weights.size(); i-- > 0;) {
    if (weights[i] > 0) return i;
  }
  return 0;
}

std::vector<Real> stationary_of(const std::vector<std::vector<Real>>& p) {
  const std::size_t n = p.size();
  std::vector<Real> pi(n, Real(1) / Real(n)), next(n);
  for (int iter = 0; iter < 100000; ++iter) {
    std::fill(next.begin(), next.end(), Real(0));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) next[j] += pi[i] * p[i][j];
    }
    Real diff = 0;
    for (std::size_t j = 0; j < n; ++j) diff = std::max(diff, std::fabs(next[j] - pi[j]));
    pi.swap(next);
    if (diff < Real(1e-16)) break;
  }
  const Real s = std::accumulate(pi.begin(), pi.end(), Real(0));
  for (auto& v : pi) v /= s;
  return pi;
}

void validate_distribution(std::span<const Real> p, const std::string& what) {
  Real s = 0;
  for (Real v : p) {
    if (!(v >= 0)) throw SpecError(what + " has a negative or NaN entry");
    s += v;
  }
  if (std::fabs(s - 1) > kRowTol) throw SpecError(what + " sums to " + std::to_string(s));
}

void validate_source(const TokenSource& s, const std::string& what) {
  if (s.background.empty()) throw SpecError(what + ": empty background");
  if (s.bigram.size() != s.background.size() || s.stationary.size() != s.background.size()) {
    throw SpecError(what + ": bigram/stationary size does not match background");
  }
  for (std::size_t i = 0; i < s.bigram.size(); ++i) {
    if (s.bigram[i].size() != s.background.size()) throw SpecError(what + ": ragged bigram row " + std::to_string(i));
    validate_distribution(s.bigram[i], what + " bigram row " + std::to_string(i));
  }
  validate_distribution(s.stationary, what + " stationary");
  if (s.themes.size() != s.theme_weights.size()) throw SpecError(what + ": theme weight count mismatch");
  if (!s.themes.empty()) validate_distribution(s.theme_weights, what + " theme weights");
  for (const auto& t : s.themes) {
    if (t.empty()) throw SpecError(what + ": empty theme cluster");
  }
}

bool valid_prob(Real p) { return p >= 0 && p <= 1; }

// One regime-switching stream.
class DomainStream {
 public:
  DomainStream(const DomainSpec& spec, std::uint64_t seed) : spec_(spec), rng_(seed) {}

  std::int32_t next() {
    if (src_ == nullptr || rng_.uniform() < spec_.switch_prob) start_regime();
    if (theme_ >= 0 && rng_.uniform() < spec_.theme_emit_prob) {
      const auto& cluster = src_->themes[static_cast<std::size_t>(theme_)];
      return cluster[rng_.below(cluster.size())];
    }
    bg_ = bg_ < 0 ? static_cast<std::int64_t>(sample_index(rng_, src_->stationary))
                  : static_cast<std::int64_t>(sample_index(rng_, src_->bigram[static_cast<std::size_t>(bg_)]));
    return src_->background[static_cast<std::size_t>(bg_)];
  }

 private:
  void start_regime() {
    src_ = rng_.uniform() < spec_.overlap ? &spec_.base : &spec_.own;
    theme_ = -1;
    if (!src_->themes.empty() && rng_.uniform() >= spec_.no_theme_prob) {
      theme_ = static_cast<std::int64_t>(sample_index(rng_, src_->theme_weights));
    }
    bg_ = -1;
  }

  const DomainSpec& spec_;
  Rng rng_;
  const TokenSource* src_ = nullptr;
  std::int64_t theme_ = -1;
  std::int64_t bg_ = -1;
};

void source_marginal(const TokenSource& s, const DomainSpec& spec, Real weight, std::vector<Real>& out) {
  if (weight == 0) return;
  const Real themed = s.themes.empty() ? Real(0) : (1 - spec.no_theme_prob);
  const Real theme_mass = themed * spec.theme_emit_prob;
  for (std::size_t c = 0; c < s.themes.size(); ++c) {
    const Real per_token = weight * theme_mass * s.theme_weights[c] / Real(s.themes[c].size());
    for (std::int32_t t : s.themes[c]) out[static_cast<std::size_t>(t)] += per_token;
  }
  for (std::size_t i = 0; i < s.background.size(); ++i) {
    out[static_cast<std::size_t>(s.background[i])] += weight * (1 - theme_mass) * s.stationary[i];
  }
}

TokenSource make_source(std::vector<std::int32_t> background, std::vector<std::vector<std::int32_t>> themes,
                        std::vector<Real> theme_weights, const SuiteConfig& cfg, Rng& rng) {
  TokenSource s;
  s.background = std::move(background);
  const std::size_t n = s.background.size();
  s.bigram.assign(n, std::vector<Real>(n, cfg.bigram_smoothing / Real(n)));
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<Real> raw(cfg.bigram_successors);
    for (auto& w : raw) w = Real(rng.uniform() + 0.1);
    const Real total = std::accumulate(raw.begin(), raw.end(), Real(0));
    for (std::size_t k = 0; k < raw.size(); ++k) {
      s.bigram[i][rng.below(n)] += (1 - cfg.bigram_smoothing) * raw[k] / total;
    }
    const Real row = std::accumulate(s.bigram[i].begin(), s.bigram[i].end(), Real(0));
    for (auto& v : s.bigram[i]) v /= row;
  }
  s.stationary = stationary_of(s.bigram);
  s.themes = std::move(themes);
  s.theme_weights = std::move(theme_weights);
  return s;
}

std::string join_ints(std::span<const std::int32_t> v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

std::string format_real(Real v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", static_cast<double>(v));
  return buf;
}

std::string join_reals(std::span<const Real> v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += format_real(v[i]);
  }
  return out;
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  return out;
}

const std::string& require_key(const std::map<std::string, std::string>& kv, const std::string& key) {
  const auto it = kv.find(key);
  if (it == kv.end()) throw SpecError("missing key '" + key + "'");
  return it->second;
}

std::vector<std::int32_t> parse_ints(const std::string& s, const std::string& key) {
  std::vector<std::int32_t> out;
  for (const auto& item : split_commas(s)) {
    try {
      out.push_back(static_cast<std::int32_t>(std::stol(item)));
    } catch (const std::exception&) {
      throw SpecError("key '" + key + "': bad integer '" + item + "'");
    }
  }
  return out;
}

Real parse_real(const std::string& s, const std::string& key) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) throw SpecError("key '" + key + "': bad number '" + s + "'");
  return static_cast<Real>(v);
}

std::vector<Real> parse_reals(const std::string& s, const std::string& key) {
  std::vector<Real> out;
  for (const auto& item : split_commas(s)) out.push_back(parse_real(item, key));
  return out;
}

void source_to_config(const TokenSource& s, const std::string& p, std::map<std::string, std::string>& kv) {
  kv[p + ".background"] = join_ints(s.background);
  for (std::size_t i = 0; i < s.bigram.size(); ++i) kv[p + ".bigram." + std::to_string(i)] = join_reals(s.bigram[i]);
  kv[p + ".stationary"] = join_reals(s.stationary);
  kv[p + ".n_themes"] = std::to_string(s.themes.size());
  for (std::size_t c = 0; c < s.themes.size(); ++c) kv[p + ".theme." + std::to_string(c)] = join_ints(s.themes[c]);
  kv[p + ".theme_weights"] = join_reals(s.theme_weights);
}

TokenSource source_from_config(const std::map<std::string, std::string>& kv, const std::string& p) {
  TokenSource s;
  s.background = parse_ints(require_key(kv, p + ".background"), p + ".background");
  for (std::size_t i = 0; i < s.background.size(); ++i) {
    const std::string key = p + ".bigram." + std::to_string(i);
    s.bigram.push_back(parse_reals(require_key(kv, key), key));
  }
  s.stationary = parse_reals(require_key(kv, p + ".stationary"), p + ".stationary");
  const std::size_t n_themes = static_cast<std::size_t>(parse_real(require_key(kv, p + ".n_themes"), p + ".n_themes"));
  for (std::size_t c = 0; c < n_themes; ++c) {
    const std::string key = p + ".theme." + std::to_string(c);
    s.themes.push_back(parse_ints(require_key(kv, key), key));
  }
  s.theme_weights = parse_reals(require_key(kv, p + ".theme_weights"), p + ".theme_weights");
  return s;
}

}  // namespace

void DomainSpec::validate() const {
  if (!valid_prob(overlap)) throw SpecError("domain " + id + ": overlap must be in [0, 1]");
  if (!valid_prob(switch_prob) || !valid_prob(no_theme_prob) || !valid_prob(theme_emit_prob)) {
    throw SpecError("domain " + id + ": generator probabilities must be in [0, 1]");
  }
  validate_source(own, "domain " + id + " own source");
  validate_source(base, "domain " + id + " base source");
}

std::vector<Real> domain_marginal(const DomainSpec& spec, std::size_t vocab_size) {
  spec.validate();
  std::vector<Real> m(vocab_size, 0);
  source_marginal(spec.base, spec, spec.overlap, m);
  source_marginal(spec.own, spec, 1 - spec.overlap, m);
  return m;
}

std::vector<std::int32_t> generate_domain_corpus(const DomainSpec& spec, std::size_t n_tokens, std::uint64_t seed) {
  if (n_tokens == 0) throw InputError("generate_domain_corpus: n_tokens must be positive");
  spec.validate();
  DomainStream stream(spec, Rng::derive(seed, 0xC0).next_u64());
  std::vector<std::int32_t> out(n_tokens);
  for (auto& t : out) t = stream.next();
  return out;
}

const char* family_name(TaskFamily f) {
  switch (f) {
    case TaskFamily::sentiment: return "sentiment";
    case TaskFamily::emotion: return "emotion";
    case TaskFamily::nli: return "nli";
  }
  return "?";
}

TaskFamily parse_family(const std::string& s) {
  if (s == "sentiment") return TaskFamily::sentiment;
  if (s == "emotion") return TaskFamily::emotion;
  if (s == "nli") return TaskFamily::nli;
  throw SpecError("unknown task family '" + s + "'");
}

void TaskSpec::validate(std::size_t vocab_size) const {
  const std::size_t want_labels = family == TaskFamily::nli ? 3 : 2;
  const std::size_t want_groups = family == TaskFamily::emotion ? 1 : 2;
  if (verbalizer.size() != want_labels) throw SpecError("task " + id + ": " + family_name(family) + " needs " + std::to_string(want_labels) + " labels");
  if (markers.size() != want_groups) throw SpecError("task " + id + ": wrong number of marker groups");
  std::set<std::int32_t> seen;
  for (std::int32_t t : verbalizer) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab_size) throw SpecError("task " + id + ": verbalizer token outside vocabulary");
    if (!seen.insert(t).second) throw SpecError("task " + id + ": verbalizer token " + std::to_string(t) + " used twice");
  }
  std::set<std::int32_t> marker_set;
  for (const auto& g : markers) {
    if (g.empty()) throw SpecError("task " + id + ": empty marker group");
    for (std::int32_t t : g) {
      if (seen.count(t)) throw SpecError("task " + id + ": verbalizer token " + std::to_string(t) + " collides with a marker");
      if (!marker_set.insert(t).second) throw SpecError("task " + id + ": marker " + std::to_string(t) + " in two groups");
    }
  }
  for (std::int32_t t : marker_set) {
    if (std::find(excluded.begin(), excluded.end(), t) == excluded.end()) {
      throw SpecError("task " + id + ": marker " + std::to_string(t) + " is not excluded from backgrounds");
    }
  }
  if (seq_len < 6) throw SpecError("task " + id + ": seq_len too short for the marker patterns");
}

std::int32_t rule_label(const TaskSpec& spec, const Example& ex) {
  std::array<std::size_t, 2> counts{0, 0};
  for (std::int32_t t : ex.tokens) {
    for (std::size_t g = 0; g < spec.markers.size(); ++g) {
      if (std::find(spec.markers[g].begin(), spec.markers[g].end(), t) != spec.markers[g].end()) ++counts[g];
    }
  }
  switch (spec.family) {
    case TaskFamily::sentiment: return counts[0] > counts[1] ? 0 : 1;
    case TaskFamily::emotion: return counts[0] > 0 ? 1 : 0;
    case TaskFamily::nli: return counts[0] > counts[1] ? 0 : counts[1] > counts[0] ? 1 : 2;
  }
  return 0;
}

TaskDataset make_task_dataset(const TaskSpec& spec, const DomainSpec& domain, std::size_t n_per_split, std::uint64_t seed) {
  spec.validate(std::numeric_limits<std::int32_t>::max());
  if (n_per_split < spec.n_labels()) throw DataError("task " + spec.id + ": n_per_split below the label count");
  const std::set<std::int32_t> excluded(spec.excluded.begin(), spec.excluded.end());
  Rng rng = Rng::derive(seed, 0x7A5C);

  auto generate = [&](std::int32_t label) {
    Example ex;
    ex.label = label;
    DomainStream stream(domain, rng.next_u64());
    const std::size_t content = spec.seq_len - 1;
    while (ex.tokens.size() < content) {
      const std::int32_t t = stream.next();
      if (!excluded.count(t)) ex.tokens.push_back(t);
    }
    std::array<std::size_t, 2> counts{0, 0};
    switch (spec.family) {
      case TaskFamily::sentiment:
        counts[static_cast<std::size_t>(label)] = 2 + rng.below(2);
        break;
      case TaskFamily::emotion:
        counts[0] = label == 1 ? 2 + rng.below(2) : 0;
        break;
      case TaskFamily::nli:
        counts = label == 0 ? std::array<std::size_t, 2>{3, 1} : label == 1 ? std::array<std::size_t, 2>{1, 3} : std::array<std::size_t, 2>{2, 2};
        break;
    }
    std::vector<std::size_t> slots(content);
    std::iota(slots.begin(), slots.end(), 0);
    rng.shuffle(slots);
    std::size_t next_slot = 0;
    for (std::size_t g = 0; g < spec.markers.size(); ++g) {
      for (std::size_t i = 0; i < counts[g]; ++i) {
        ex.tokens[slots[next_slot++]] = spec.markers[g][rng.below(spec.markers[g].size())];
      }
    }
    ex.tokens.push_back(kMaskToken);
    return ex;
  };

  TaskDataset data;
  data.task_id = spec.id;
  data.verbalizer = spec.verbalizer;
  data.seed = seed;
  std::set<std::vector<std::int32_t>> seen;
  for (auto* split : {&data.train, &data.dev, &data.test}) {
    std::vector<std::int32_t> labels(n_per_split);
    for (std::size_t i = 0; i < n_per_split; ++i) labels[i] = static_cast<std::int32_t>(i % spec.n_labels());
    rng.shuffle(labels);
    for (std::int32_t label : labels) {
      for (;;) {
        Example ex = generate(label);
        if (seen.insert(ex.tokens).second) {
          split->push_back(std::move(ex));
          break;
        }
      }
    }
  }
  return data;
}

TaskDataset sample_kshot(const TaskDataset& data, std::size_t k, std::uint64_t seed) {
  std::map<std::int32_t, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < data.train.size(); ++i) by_label[data.train[i].label].push_back(i);
  std::vector<bool> keep(data.train.size(), false);
  for (auto& [label, idx] : by_label) {
    if (k > idx.size()) {
      throw DataError("sample_kshot: k=" + std::to_string(k) + " exceeds the " + std::to_string(idx.size()) +
                      " training examples of label " + std::to_string(label));
    }
    Rng rng = Rng::derive(seed, 0x5407, static_cast<std::uint64_t>(label));
    std::vector<std::size_t> ranked = idx;
    rng.shuffle(ranked);
    for (std::size_t i = 0; i < k; ++i) keep[ranked[i]] = true;
  }
  TaskDataset out = data;
  out.train.clear();
  for (std::size_t i = 0; i < data.train.size(); ++i) {
    if (keep[i]) out.train.push_back(data.train[i]);
  }
  return out;
}

MaskedBatch mlm_mask(const std::vector<std::int32_t>& tokens, Real mask_prob, std::uint64_t seed,
                     std::int32_t random_low, std::int32_t random_high) {
  if (!(mask_prob > 0 && mask_prob < 1)) throw InputError("mlm_mask: mask_prob must be in (0, 1)");
  if (random_high <= random_low) throw InputError("mlm_mask: empty replacement range");
  Rng rng = Rng::derive(seed, 0x3A5C);
  MaskedBatch out;
  out.tokens = tokens;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (rng.uniform() >= mask_prob) continue;
    out.rows.push_back(i);
    out.targets.push_back(tokens[i]);
    const double u = rng.uniform();
    if (u < 0.8) {
      out.tokens[i] = kMaskToken;
    } else if (u < 0.9) {
      out.tokens[i] = random_low + static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(random_high - random_low)));
    }
  }
  return out;
}

const DomainSpec& Suite::domain(const std::string& id) const {
  for (const auto& d : domains) {
    if (d.id == id) return d;
  }
  throw SpecError("unknown domain '" + id + "'");
}

const TaskSpec& Suite::task(const std::string& id) const {
  for (const auto& t : tasks) {
    if (t.id == id) return t;
  }
  throw SpecError("unknown task '" + id + "'");
}

Suite make_suite(const SuiteConfig& cfg) {
  const std::size_t n_domains = cfg.overlaps.size();
  if (n_domains < 3) throw SpecError("suite needs at least three continual domains");
  if (cfg.domain_themes < 2) throw SpecError("suite needs at least two themes per continual domain");
  if (cfg.theme_size < 2 || cfg.theme_size % 2 != 0) throw SpecError("theme_size must be even");
  const std::size_t needed = static_cast<std::size_t>(cfg.first_content) + cfg.base_background +
                             cfg.base_themes * cfg.theme_size +
                             n_domains * (cfg.domain_background + cfg.domain_themes * cfg.theme_size);
  if (needed > cfg.vocab_size) throw SpecError("suite needs " + std::to_string(needed) + " tokens, vocabulary has " + std::to_string(cfg.vocab_size));

  std::int32_t next = cfg.first_content;
  auto take = [&](std::size_t n) {
    std::vector<std::int32_t> out(n);
    std::iota(out.begin(), out.end(), next);
    next += static_cast<std::int32_t>(n);
    return out;
  };
  auto take_themes = [&](std::size_t n) {
    std::vector<std::vector<std::int32_t>> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(take(cfg.theme_size));
    return out;
  };

  const auto base_bg = take(cfg.base_background);
  const auto base_themes = take_themes(cfg.base_themes);
  std::vector<std::vector<std::int32_t>> dom_bg;
  std::vector<std::vector<std::vector<std::int32_t>>> dom_themes;
  for (std::size_t d = 0; d < n_domains; ++d) {
    dom_bg.push_back(take(cfg.domain_background));
    dom_themes.push_back(take_themes(cfg.domain_themes));
  }

  // Base themes: its own clusters plus a small share of every continual-domain cluster.
  std::vector<std::vector<std::int32_t>> all_base_themes = base_themes;
  std::vector<Real> base_weights(base_themes.size(), (1 - cfg.base_foreign_theme_mass) / Real(base_themes.size()));
  const Real foreign_each = cfg.base_foreign_theme_mass / Real(n_domains * cfg.domain_themes);
  for (const auto& themes : dom_themes) {
    for (const auto& t : themes) {
      all_base_themes.push_back(t);
      base_weights.push_back(foreign_each);
    }
  }

  Rng rng = Rng::derive(cfg.seed, 0xD0);
  const TokenSource base = make_source(base_bg, all_base_themes, base_weights, cfg, rng);

  Suite suite;
  DomainSpec d0;
  d0.id = "D0";
  d0.overlap = 0;
  d0.own = base;
  d0.base = base;
  suite.domains.push_back(d0);
  for (std::size_t d = 0; d < n_domains; ++d) {
    Rng drng = Rng::derive(cfg.seed, 0xD1, d);
    DomainSpec spec;
    spec.id = "D" + std::to_string(d + 1);
    spec.overlap = cfg.overlaps[d];
    spec.own = make_source(dom_bg[d], dom_themes[d], std::vector<Real>(cfg.domain_themes, Real(1) / Real(cfg.domain_themes)), cfg, drng);
    spec.base = base;
    suite.domains.push_back(std::move(spec));
  }

  const std::size_t half = cfg.theme_size / 2;
  auto half_of = [&](const std::vector<std::int32_t>& cluster, std::size_t h) {
    return std::vector<std::int32_t>(cluster.begin() + static_cast<std::ptrdiff_t>(h * half),
                                     cluster.begin() + static_cast<std::ptrdiff_t>((h + 1) * half));
  };
  struct FamilyPlan {
    TaskFamily family;
    std::size_t domain;
    std::vector<std::int32_t> verbalizer;
    std::size_t clusters;
    const char* prefix;
  };
  const FamilyPlan plans[] = {
      {TaskFamily::sentiment, 0, {4, 5}, 2, "sent"},
      {TaskFamily::emotion, 1, {6, 7}, 1, "emo"},
      {TaskFamily::nli, 2, {8, 9, 10}, 2, "nli"},
  };
  for (const auto& plan : plans) {
    const auto& themes = dom_themes[plan.domain];
    std::vector<std::int32_t> excluded;
    for (std::size_t c = 0; c < plan.clusters; ++c) excluded.insert(excluded.end(), themes[c].begin(), themes[c].end());
    for (std::size_t h = 0; h < 2; ++h) {
      TaskSpec t;
      t.id = std::string(plan.prefix) + (h == 0 ? "-a" : "-b");
      t.domain_id = "D" + std::to_string(plan.domain + 1);
      t.family = plan.family;
      t.verbalizer = plan.verbalizer;
      for (std::size_t c = 0; c < plan.clusters; ++c) t.markers.push_back(half_of(themes[c], h));
      t.excluded = excluded;
      t.seq_len = cfg.task_seq_len;
      t.validate(cfg.vocab_size);
      suite.tasks.push_back(std::move(t));
    }
  }
  return suite;
}

std::map<std::string, std::string> to_config(const DomainSpec& spec, const std::string& prefix) {
  std::map<std::string, std::string> kv;
  kv[prefix + ".id"] = spec.id;
  kv[prefix + ".overlap"] = format_real(spec.overlap);
  kv[prefix + ".switch_prob"] = format_real(spec.switch_prob);
  kv[prefix + ".no_theme_prob"] = format_real(spec.no_theme_prob);
  kv[prefix + ".theme_emit_prob"] = format_real(spec.theme_emit_prob);
  source_to_config(spec.own, prefix + ".own", kv);
  source_to_config(spec.base, prefix + ".base", kv);
  return kv;
}

DomainSpec domain_from_config(const std::map<std::string, std::string>& kv, const std::string& prefix) {
  DomainSpec spec;
  spec.id = require_key(kv, prefix + ".id");
  spec.overlap = parse_real(require_key(kv, prefix + ".overlap"), prefix + ".overlap");
  spec.switch_prob = parse_real(require_key(kv, prefix + ".switch_prob"), prefix + ".switch_prob");
  spec.no_theme_prob = parse_real(require_key(kv, prefix + ".no_theme_prob"), prefix + ".no_theme_prob");
  spec.theme_emit_prob = parse_real(require_key(kv, prefix + ".theme_emit_prob"), prefix + ".theme_emit_prob");
  spec.own = source_from_config(kv, prefix + ".own");
  spec.base = source_from_config(kv, prefix + ".base");
  spec.validate();
  return spec;
}

std::map<std::string, std::string> to_config(const TaskSpec& spec, const std::string& prefix) {
  std::map<std::string, std::string> kv;
  kv[prefix + ".id"] = spec.id;
  kv[prefix + ".domain"] = spec.domain_id;
  kv[prefix + ".family"] = family_name(spec.family);
  kv[prefix + ".verbalizer"] = join_ints(spec.verbalizer);
  kv[prefix + ".n_groups"] = std::to_string(spec.markers.size());
  for (std::size_t g = 0; g < spec.markers.size(); ++g) kv[prefix + ".markers." + std::to_string(g)] = join_ints(spec.markers[g]);
  kv[prefix + ".excluded"] = join_ints(spec.excluded);
  kv[prefix + ".seq_len"] = std::to_string(spec.seq_len);
  return kv;
}

TaskSpec task_from_config(const std::map<std::string, std::string>& kv, const std::string& prefix) {
  TaskSpec spec;
  spec.id = require_key(kv, prefix + ".id");
  spec.domain_id = require_key(kv, prefix + ".domain");
  spec.family = parse_family(require_key(kv, prefix + ".family"));
  spec.verbalizer = parse_ints(require_key(kv, prefix + ".verbalizer"), prefix + ".verbalizer");
  const std::size_t groups = static_cast<std::size_t>(parse_real(require_key(kv, prefix + ".n_groups"), prefix + ".n_groups"));
  for (std::size_t g = 0; g < groups; ++g) {
    const std::string key = prefix + ".markers." + std::to_string(g);
    spec.markers.push_back(parse_ints(require_key(kv, key), key));
  }
  spec.excluded = parse_ints(require_key(kv, prefix + ".excluded"), prefix + ".excluded");
  spec.seq_len = static_cast<std::size_t>(parse_real(require_key(kv, prefix + ".seq_len"), prefix + ".seq_len"));
  return spec;
}

std::string export_dataset(const TaskDataset& data) {
  std::string out;
  auto emit = [&](const char* split, const std::vector<Example>& exs) {
    for (const auto& ex : exs) {
      out += split;
      out += '\t' + std::to_string(ex.label) + '\t' + std::to_string(mask_position(ex)) + '\t';
      for (std::size_t i = 0; i < ex.tokens.size(); ++i) {
        if (i) out += ' ';
        out += std::to_string(ex.tokens[i]);
      }
      out += '\n';
    }
  };
  emit("train", data.train);
  emit("dev", data.dev);
  emit("test", data.test);
  return out;
}

}  // namespace reclab
