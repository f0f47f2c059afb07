#include "reclab/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "reclab/errors.hpp"

namespace reclab {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_real(Real v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", static_cast<double>(v));
  return buf;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value) {
  throw ConfigError("key '" + key + "': bad value '" + value + "'");
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, v);
  return out;
}

Real parse_real(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size()) bad_value(key, v);
  return static_cast<Real>(out);
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

struct Field {
  std::string key;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

class Fields {
 public:
  void size(const std::string& key, std::size_t& ref) {
    list_.push_back({key, [&ref] { return std::to_string(ref); },
                     [&ref, key](const std::string& v) { ref = static_cast<std::size_t>(parse_u64(key, v)); }});
  }
  void u64(const std::string& key, std::uint64_t& ref) {
    list_.push_back({key, [&ref] { return std::to_string(ref); }, [&ref, key](const std::string& v) { ref = parse_u64(key, v); }});
  }
  void real(const std::string& key, Real& ref) {
    list_.push_back({key, [&ref] { return fmt_real(ref); }, [&ref, key](const std::string& v) { ref = parse_real(key, v); }});
  }
  void str(const std::string& key, std::string& ref) {
    list_.push_back({key, [&ref] { return ref; }, [&ref](const std::string& v) { ref = v; }});
  }
  void custom(Field f) { list_.push_back(std::move(f)); }
  const std::vector<Field>& list() const { return list_; }

 private:
  std::vector<Field> list_;
};

void model_fields(Fields& f, ModelConfig& m, const std::string& p) {
  f.size(p + ".n_layers", m.n_layers);
  f.size(p + ".n_heads", m.n_heads);
  f.size(p + ".d_model", m.d_model);
  f.size(p + ".d_ff", m.d_ff);
  f.size(p + ".vocab_size", m.vocab_size);
  f.size(p + ".max_seq_len", m.max_seq_len);
  f.size(p + ".adapter_bottleneck", m.adapter_bottleneck);
  f.real(p + ".dropout_rate", m.dropout_rate);
  f.u64(p + ".seed", m.seed);
}

void optim_fields(Fields& f, OptimConfig& o, const std::string& p) {
  f.real(p + ".lr", o.lr);
  f.real(p + ".beta1", o.beta1);
  f.real(p + ".beta2", o.beta2);
  f.real(p + ".eps", o.eps);
  f.real(p + ".weight_decay", o.weight_decay);
  f.real(p + ".warmup_fraction", o.warmup_fraction);
  f.size(p + ".batch_size", o.batch_size);
  f.u64(p + ".seed", o.seed);
}

Fields experiment_fields(ExperimentConfig& c) {
  Fields f;
  f.custom({"kind", [&c] { return std::string(kind_name(c.kind)); }, [&c](const std::string& v) { c.kind = parse_kind(v); }});
  model_fields(f, c.model, "model");

  SuiteConfig& s = c.suite;
  f.size("suite.vocab_size", s.vocab_size);
  f.custom({"suite.first_content", [&s] { return std::to_string(s.first_content); },
            [&s](const std::string& v) { s.first_content = static_cast<std::int32_t>(parse_u64("suite.first_content", v)); }});
  f.size("suite.base_background", s.base_background);
  f.size("suite.base_themes", s.base_themes);
  f.size("suite.domain_background", s.domain_background);
  f.size("suite.domain_themes", s.domain_themes);
  f.size("suite.theme_size", s.theme_size);
  f.size("suite.bigram_successors", s.bigram_successors);
  f.real("suite.bigram_smoothing", s.bigram_smoothing);
  f.real("suite.base_foreign_theme_mass", s.base_foreign_theme_mass);
  f.custom({"suite.overlaps",
            [&s] {
              std::string out;
              for (std::size_t i = 0; i < s.overlaps.size(); ++i) out += (i ? "," : "") + fmt_real(s.overlaps[i]);
              return out;
            },
            [&s](const std::string& v) {
              s.overlaps.clear();
              for (const auto& item : split_list(v)) s.overlaps.push_back(parse_real("suite.overlaps", item));
            }});
  f.size("suite.task_seq_len", s.task_seq_len);
  f.u64("suite.seed", s.seed);

  LineageConfig& l = c.lineage;
  optim_fields(f, l.optim, "lineage.optim");
  f.size("lineage.base_steps", l.base_steps);
  f.size("lineage.domain_steps", l.domain_steps);
  f.real("lineage.domain_lr", l.domain_lr);
  f.size("lineage.n_domains", l.n_domains);
  f.size("lineage.checkpoint_every", l.checkpoint_every);
  f.size("lineage.seq_len", l.seq_len);
  f.size("lineage.corpus_tokens", l.corpus_tokens);
  f.u64("lineage.init_seed", l.init_seed);
  f.u64("lineage.ind_init_seed", l.ind_init_seed);
  f.u64("lineage.corpus_seed", l.corpus_seed);
  f.u64("lineage.ind_corpus_seed", l.ind_corpus_seed);

  AdaptConfig& a = c.adapt;
  f.real("adapt.fine_tune_lr", a.fine_tune_lr);
  f.real("adapt.adapter_lr", a.adapter_lr);
  f.size("adapt.steps", a.steps);
  f.size("adapt.batch_size", a.batch_size);
  f.size("adapt.eval_every", a.eval_every);
  f.size("adapt.n_per_split", a.n_per_split);
  f.size("adapt.kshot", a.kshot);
  f.size("adapt.dev_size", a.dev_size);
  f.real("adapt.weight_decay", a.weight_decay);
  f.real("adapt.warmup_fraction", a.warmup_fraction);

  f.real("kd.alpha", c.kd.alpha);
  f.real("kd.beta", c.kd.beta);
  f.real("kd.temperature", c.kd.temperature);
  f.custom({"kd.source", [&c] { return std::string(c.kd.source == UnlabeledSource::task_inputs ? "task" : "corpus"); },
            [&c](const std::string& v) {
              if (v == "task") c.kd.source = UnlabeledSource::task_inputs;
              else if (v == "corpus") c.kd.source = UnlabeledSource::generic_corpus;
              else bad_value("kd.source", v);
            }});

  f.custom({"method", [&c] { return std::string(method_name(c.method)); },
            [&c](const std::string& v) {
              if (v == "fine_tune") c.method = Method::fine_tune;
              else if (v == "adapter") c.method = Method::adapter;
              else bad_value("method", v);
            }});
  f.str("task", c.task);
  f.size("n_interior", c.n_interior);
  f.size("attention_inputs", c.attention_inputs);
  f.real("itp.gamma", c.itp_gamma);
  f.size("itp.n_mu", c.itp_n_mu);
  f.size("projection.bottleneck", c.projection_bottleneck);
  f.size("projection.steps", c.projection_steps);
  f.real("projection.lr", c.projection_lr);
  f.size("unlabeled_size", c.unlabeled_size);
  f.size("teacher_kshot", c.teacher_kshot);
  f.custom({"seeds",
            [&c] {
              std::string out;
              for (std::size_t i = 0; i < c.seeds.size(); ++i) out += (i ? "," : "") + std::to_string(c.seeds[i]);
              return out;
            },
            [&c](const std::string& v) {
              c.seeds.clear();
              for (const auto& item : split_list(v)) c.seeds.push_back(parse_u64("seeds", item));
            }});
  f.str("out", c.out);
  f.size("threads", c.threads);
  return f;
}

constexpr ExperimentKind kKinds[] = {
    ExperimentKind::pretrain,     ExperimentKind::adapt,   ExperimentKind::direct_apply, ExperimentKind::connectivity,
    ExperimentKind::attention,    ExperimentKind::init_recycle, ExperimentKind::distill, ExperimentKind::itp,
    ExperimentKind::projection,   ExperimentKind::distance,
};

}  // namespace

KeyValues parse_key_values(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(n) + ": expected key=value");
    const std::string key = trim(t.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(n) + ": empty key");
    if (!kv.emplace(key, trim(t.substr(eq + 1))).second) throw ConfigError("line " + std::to_string(n) + ": repeated key '" + key + "'");
  }
  return kv;
}

std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

const char* kind_name(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::pretrain: return "pretrain";
    case ExperimentKind::adapt: return "adapt";
    case ExperimentKind::direct_apply: return "direct-apply";
    case ExperimentKind::connectivity: return "connectivity";
    case ExperimentKind::attention: return "attention";
    case ExperimentKind::init_recycle: return "init-recycle";
    case ExperimentKind::distill: return "distill";
    case ExperimentKind::itp: return "itp";
    case ExperimentKind::projection: return "projection";
    case ExperimentKind::distance: return "distance";
  }
  return "?";
}

ExperimentKind parse_kind(const std::string& s) {
  for (ExperimentKind k : kKinds) {
    if (s == kind_name(k)) return k;
  }
  throw ConfigError("unknown experiment kind '" + s + "'");
}

const std::vector<ExperimentKind>& all_kinds() {
  static const std::vector<ExperimentKind> kinds(std::begin(kKinds), std::end(kKinds));
  return kinds;
}

void ExperimentConfig::validate() const {
  model.validate();
  lineage.optim.validate();
  kd.validate();
  if (!(lineage.domain_lr > 0)) throw ConfigError("lineage.domain_lr must be positive");
  if (lineage.checkpoint_every == 0) throw ConfigError("lineage.checkpoint_every must be positive");
  if (lineage.n_domains == 0 || lineage.n_domains > suite.overlaps.size()) throw ConfigError("lineage.n_domains must be in [1, number of suite domains]");
  if (lineage.seq_len == 0 || lineage.seq_len > model.max_seq_len) throw ConfigError("lineage.seq_len must be in [1, model.max_seq_len]");
  if (suite.task_seq_len > model.max_seq_len) throw ConfigError("suite.task_seq_len exceeds model.max_seq_len");
  if (suite.vocab_size != model.vocab_size) throw ConfigError("suite.vocab_size must equal model.vocab_size");
  if (!(adapt.fine_tune_lr > 0) || !(adapt.adapter_lr > 0)) throw ConfigError("adaptation learning rates must be positive");
  if (adapt.batch_size == 0 || adapt.eval_every == 0 || adapt.kshot == 0 || adapt.dev_size == 0) {
    throw ConfigError("adapt.batch_size, eval_every, kshot and dev_size must be positive");
  }
  if (adapt.kshot * 3 > adapt.n_per_split) throw ConfigError("adapt.n_per_split must hold kshot examples of every label");
  if (teacher_kshot * 3 > adapt.n_per_split) throw ConfigError("adapt.n_per_split must hold teacher_kshot examples of every label");
  if (adapt.dev_size > adapt.n_per_split) throw ConfigError("adapt.dev_size exceeds adapt.n_per_split");
  if (itp_n_mu < 2) throw ConfigError("itp.n_mu must be at least 2");
  if (projection_bottleneck == 0) throw ConfigError("projection.bottleneck must be positive");
  if (!(projection_lr > 0)) throw ConfigError("projection.lr must be positive");
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  if (threads == 0) throw ConfigError("threads must be positive");
  if (out.empty()) throw ConfigError("out must not be empty");
}

KeyValues to_key_values(const ExperimentConfig& cfg) {
  ExperimentConfig copy = cfg;
  KeyValues kv;
  const Fields fields = experiment_fields(copy);
  for (const auto& f : fields.list()) kv[f.key] = f.get();
  return kv;
}

ExperimentConfig experiment_from_key_values(const KeyValues& kv) {
  ExperimentConfig cfg;
  const Fields fields = experiment_fields(cfg);
  std::map<std::string, const Field*> by_key;
  for (const auto& f : fields.list()) by_key[f.key] = &f;
  for (const auto& [k, v] : kv) {
    const auto it = by_key.find(k);
    if (it == by_key.end()) throw ConfigError("unknown config key '" + k + "'");
    it->second->set(v);
  }
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingInputError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return experiment_from_key_values(parse_key_values(ss.str()));
}

std::string config_hash(const ExperimentConfig& cfg) {
  KeyValues kv = to_key_values(cfg);
  kv.erase("out");
  kv.erase("threads");
  const std::string text = format_key_values(kv);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

OptimConfig adapt_optim(const ExperimentConfig& cfg, Method method, std::uint64_t seed) {
  OptimConfig o;
  o.lr = method == Method::fine_tune ? cfg.adapt.fine_tune_lr : cfg.adapt.adapter_lr;
  o.weight_decay = cfg.adapt.weight_decay;
  o.warmup_fraction = cfg.adapt.warmup_fraction;
  o.batch_size = cfg.adapt.batch_size;
  o.max_steps = cfg.adapt.steps;
  o.seed = seed;
  return o;
}

void write_model_config(const ModelConfig& m, const std::string& prefix, KeyValues& kv) {
  ModelConfig copy = m;
  Fields f;
  model_fields(f, copy, prefix);
  for (const auto& field : f.list()) kv[field.key] = field.get();
}

ModelConfig read_model_config(const KeyValues& kv, const std::string& prefix) {
  ModelConfig m;
  Fields f;
  model_fields(f, m, prefix);
  for (const auto& field : f.list()) {
    const auto it = kv.find(field.key);
    if (it == kv.end()) throw FormatError("missing key '" + field.key + "'");
    field.set(it->second);
  }
  return m;
}

}  // namespace reclab
