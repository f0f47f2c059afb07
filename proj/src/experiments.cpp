#include "reclab/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "reclab/errors.hpp"
#include "reclab/report.hpp"
#include "reclab/rng.hpp"

namespace reclab {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr std::uint64_t kTagCorpus = 0xC0;
constexpr std::uint64_t kTagRunSeed = 0x5EED;
constexpr std::uint64_t kTagDev = 0xDE;
constexpr std::uint64_t kTagTaskData = 0x7A;
constexpr std::uint64_t kTagUnlabeled = 0x0B;
constexpr std::size_t kDevWindows = 64;

std::string num(Real v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", static_cast<double>(v));
  return buf;
}

std::string fnv_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw MissingInputError("cannot write '" + path + "'");
  f << text;
  if (!f) throw MissingInputError("short write to '" + path + "'");
}

std::string read_text(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingInputError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::vector<CurvePoint> parse_curve(const std::string& text) {
  std::vector<CurvePoint> out;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    CurvePoint p;
    char* end = nullptr;
    p.step = std::strtoull(line.c_str(), &end, 10);
    p.train_loss = std::strtod(end + 1, &end);
    p.dev_loss = std::strtod(end + 1, &end);
    p.dev_accuracy = std::strtod(end + 1, &end);
    out.push_back(p);
  }
  return out;
}

Checkpoint strip_optimizer(Checkpoint c) {
  c.optim = OptimizerState{c.optim.step, {}, {}};
  return c;
}

Real mean(const std::vector<Real>& v) {
  Real s = 0;
  for (Real x : v) s += x;
  return v.empty() ? 0 : s / Real(v.size());
}

}  // namespace

// ---------------------------------------------------------------------------
// Summaries

const Metric* RunSummary::find(const std::string& name) const {
  for (const auto& m : metrics) {
    if (m.name == name) return &m;
  }
  for (const auto& m : timings) {
    if (m.name == name) return &m;
  }
  return nullptr;
}

namespace {

json metrics_json(const std::vector<Metric>& ms) {
  json arr = json::array();
  for (const auto& m : ms) arr.push_back({{"name", m.name}, {"values", m.values}});
  return arr;
}

std::vector<Metric> metrics_from(const json& arr) {
  std::vector<Metric> out;
  for (const auto& m : arr) out.push_back(Metric{m.at("name").get<std::string>(), m.at("values").get<std::vector<Real>>()});
  return out;
}

}  // namespace

std::string summary_json(const RunSummary& s) {
  json props = json::array();
  for (const auto& p : s.properties) {
    props.push_back({{"name", p.name},
                     {"lhs", p.lhs},
                     {"relation", p.relation},
                     {"rhs", p.rhs},
                     {"rhs_value", p.rhs_value},
                     {"factor", p.factor},
                     {"gating", p.gating}});
  }
  const json j = {{"kind", s.kind},         {"config_hash", s.config_hash}, {"seeds", s.seeds},
                  {"metrics", metrics_json(s.metrics)}, {"properties", props}};
  return j.dump(2) + "\n";
}

std::string timing_json(const RunSummary& s) {
  const json j = {{"kind", s.kind}, {"config_hash", s.config_hash}, {"timings", metrics_json(s.timings)}};
  return j.dump(2) + "\n";
}

RunSummary parse_summary(const std::string& summary, const std::string& timing) {
  RunSummary s;
  try {
    const json j = json::parse(summary);
    s.kind = j.at("kind").get<std::string>();
    s.config_hash = j.at("config_hash").get<std::string>();
    s.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    s.metrics = metrics_from(j.at("metrics"));
    for (const auto& p : j.at("properties")) {
      s.properties.push_back(Property{p.at("name").get<std::string>(), p.at("lhs").get<std::string>(),
                                      p.at("relation").get<std::string>(), p.at("rhs").get<std::string>(),
                                      p.at("rhs_value").get<Real>(), p.at("factor").get<Real>(),
                                      p.at("gating").get<bool>()});
    }
    if (!timing.empty()) s.timings = metrics_from(json::parse(timing).at("timings"));
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed summary: ") + e.what());
  }
  return s;
}

// ---------------------------------------------------------------------------
// Workspace

Workspace::Workspace(ExperimentConfig cfg, std::ostream* log) : cfg_(std::move(cfg)), log_(log) {
  cfg_.validate();
  suite_ = make_suite(cfg_.suite);
  if (cfg_.lineage.n_domains + 1 > suite_.domains.size()) throw ConfigError("lineage.n_domains exceeds the suite's domains");

  ExperimentConfig norm = cfg_;
  norm.kind = ExperimentKind::adapt;
  norm.task = "sent-a";
  norm.method = Method::fine_tune;
  norm.seeds = {0};
  env_hash_ = config_hash(norm);
  std::string lineage_text;
  for (const auto& [k, v] : to_key_values(cfg_)) {
    if (k.rfind("model.", 0) == 0 || k.rfind("suite.", 0) == 0 || k.rfind("lineage.", 0) == 0) lineage_text += k + "=" + v + "\n";
  }
  lineage_hash_ = fnv_hex(lineage_text);
}

std::string Workspace::store_dir() const { return (fs::path(cfg_.out) / "store").string(); }

void Workspace::log(const std::string& line) const {
  if (log_ != nullptr) *log_ << line << std::endl;
}

std::vector<std::string> Workspace::run_ids() const {
  std::vector<std::string> ids;
  for (std::size_t d = 0; d <= cfg_.lineage.n_domains; ++d) ids.push_back("main-D" + std::to_string(d));
  ids.push_back("ind-D0");
  return ids;
}

std::size_t Workspace::run_steps(const std::string& run_id) const {
  return run_id == "main-D0" || run_id == "ind-D0" ? cfg_.lineage.base_steps : cfg_.lineage.domain_steps;
}

std::string Workspace::run_path(const std::string& run_id, std::size_t step) const {
  char buf[32];
  std::snprintf(buf, sizeof buf, "-%06zu.rclb", step);
  return (fs::path(store_dir()) / ("lineage-" + lineage_hash_) / (run_id + buf)).string();
}

PretrainData Workspace::dev_data(std::size_t domain) const {
  PretrainData d;
  d.tokens = generate_domain_corpus(suite_.domains.at(domain), kDevWindows * cfg_.lineage.seq_len * 4,
                                    Rng::derive(cfg_.lineage.corpus_seed, kTagDev, domain).next_u64());
  d.seq_len = cfg_.lineage.seq_len;
  d.random_low = cfg_.suite.first_content;
  d.random_high = static_cast<std::int32_t>(cfg_.model.vocab_size);
  return d;
}

void Workspace::train_run(const std::string& run_id) {
  const LineageConfig& L = cfg_.lineage;
  const bool ind = run_id.rfind("ind-", 0) == 0;
  const std::size_t domain = ind ? 0 : std::stoul(run_id.substr(6));
  const std::uint64_t corpus_seed = ind ? L.ind_corpus_seed : L.corpus_seed;

  Checkpoint start;
  const std::uint64_t run_seed = Rng::derive(corpus_seed, kTagRunSeed, domain).next_u64();
  const std::string domain_id = suite_.domains[domain].id;
  if (domain == 0) {
    start = start_run(init_params(cfg_.model, ind ? L.ind_init_seed : L.init_seed), ind ? "ind" : "main", domain_id, run_seed);
  } else {
    start = start_run(backbone("M" + std::to_string(domain - 1)), "main", domain_id, run_seed);
  }
  const std::size_t steps = run_steps(run_id);
  std::vector<Checkpoint> emitted;
  if (steps == 0) {
    emitted.push_back(start);
  } else {
    log("pre-training " + run_id + " for " + std::to_string(steps) + " steps");
    PretrainData data;
    data.tokens = generate_domain_corpus(suite_.domains[domain], L.corpus_tokens,
                                         Rng::derive(corpus_seed, kTagCorpus, domain).next_u64());
    data.seq_len = L.seq_len;
    data.random_low = cfg_.suite.first_content;
    data.random_high = static_cast<std::int32_t>(cfg_.model.vocab_size);
    OptimConfig optim = L.optim;
    optim.max_steps = steps;
    if (domain != 0) optim.lr = L.domain_lr;
    emitted = pretrain(cfg_.model, start, data, steps, optim, L.checkpoint_every);
  }
  // The final file is written last and marks the run complete.
  for (std::size_t i = 0; i + 1 < emitted.size(); ++i) {
    save_checkpoint(run_path(run_id, emitted[i].step), cfg_.model, strip_optimizer(emitted[i]));
  }
  save_checkpoint(run_path(run_id, emitted.back().step), cfg_.model, emitted.back());

  std::vector<Checkpoint> all;
  if (steps != 0) all.push_back(strip_optimizer(start));
  for (std::size_t i = 0; i < emitted.size(); ++i) all.push_back(i + 1 < emitted.size() ? strip_optimizer(emitted[i]) : emitted[i]);
  finals_[run_id] = all.back().params;
  runs_[run_id] = std::move(all);
}

const std::vector<Checkpoint>& Workspace::run(const std::string& run_id) {
  const auto ids = run_ids();
  if (std::find(ids.begin(), ids.end(), run_id) == ids.end()) throw ConfigError("unknown pre-training run '" + run_id + "'");
  if (const auto it = runs_.find(run_id); it != runs_.end()) return it->second;

  const std::size_t steps = run_steps(run_id);
  if (!fs::exists(run_path(run_id, steps))) {
    train_run(run_id);
    return runs_.at(run_id);
  }
  std::vector<Checkpoint> all;
  if (steps != 0) {
    const bool ind = run_id.rfind("ind-", 0) == 0;
    const std::size_t domain = ind ? 0 : std::stoul(run_id.substr(6));
    Checkpoint start;
    start.lineage = ind ? "ind" : "main";
    start.domain_id = suite_.domains[domain].id;
    start.params = domain == 0 ? init_params(cfg_.model, ind ? cfg_.lineage.ind_init_seed : cfg_.lineage.init_seed)
                               : backbone("M" + std::to_string(domain - 1));
    all.push_back(std::move(start));
  }
  const std::size_t every = cfg_.lineage.checkpoint_every;
  for (std::size_t s = every; s < steps; s += every) all.push_back(load_checkpoint(run_path(run_id, s)).checkpoint);
  all.push_back(load_checkpoint(run_path(run_id, steps)).checkpoint);
  return runs_[run_id] = std::move(all);
}

const ParamVector& Workspace::backbone(const std::string& id) {
  std::string run_id;
  if (id == "IND") {
    run_id = "ind-D0";
  } else if (id.size() >= 2 && id[0] == 'M' && id.find_first_not_of("0123456789", 1) == std::string::npos) {
    const std::size_t d = std::stoul(id.substr(1));
    if (d > cfg_.lineage.n_domains) throw ConfigError("backbone " + id + " is beyond the lineage");
    run_id = "main-D" + std::to_string(d);
  } else {
    throw ConfigError("unknown backbone '" + id + "'");
  }
  if (const auto it = finals_.find(run_id); it != finals_.end()) return it->second;
  const std::string path = run_path(run_id, run_steps(run_id));
  if (fs::exists(path)) return finals_[run_id] = load_checkpoint(path).checkpoint.params;
  train_run(run_id);
  return finals_.at(run_id);
}

std::size_t Workspace::task_domain(const std::string& task_id) const {
  const TaskSpec& spec = suite_.task(task_id);
  for (std::size_t d = 0; d < suite_.domains.size(); ++d) {
    if (suite_.domains[d].id == spec.domain_id) return d;
  }
  throw SpecError("task " + task_id + " names an unknown domain");
}

TaskDataset Workspace::task(const std::string& task_id, std::uint64_t seed, std::size_t kshot) const {
  std::size_t index = 0;
  while (index < suite_.tasks.size() && suite_.tasks[index].id != task_id) ++index;
  const TaskSpec& spec = suite_.task(task_id);
  TaskDataset full = make_task_dataset(spec, suite_.domain(spec.domain_id), cfg_.adapt.n_per_split,
                                       Rng::derive(cfg_.suite.seed, kTagTaskData, index).next_u64());
  TaskDataset out = kshot == 0 ? std::move(full) : sample_kshot(full, kshot, seed);
  if (out.dev.size() > cfg_.adapt.dev_size) out.dev.resize(cfg_.adapt.dev_size);
  return out;
}

std::vector<Example> Workspace::unlabeled(const std::string& task_id) const {
  std::vector<Example> inputs = task_inputs(task(task_id, 0, 0));
  if (cfg_.kd.source == UnlabeledSource::generic_corpus) {
    const std::size_t d = task_domain(task_id);
    const auto tokens = generate_domain_corpus(suite_.domains[d], cfg_.unlabeled_size * cfg_.suite.task_seq_len * 2,
                                               Rng::derive(cfg_.lineage.corpus_seed, kTagUnlabeled, d).next_u64());
    inputs = corpus_inputs(tokens, cfg_.unlabeled_size, cfg_.suite.task_seq_len, Rng::derive(cfg_.lineage.corpus_seed, kTagUnlabeled).next_u64());
  }
  if (inputs.size() > cfg_.unlabeled_size) inputs.resize(cfg_.unlabeled_size);
  return inputs;
}

const Workspace::Run& Workspace::cached(const std::string& key, const std::function<AdaptResult()>& produce) {
  if (const auto it = memo_.find(key); it != memo_.end()) return it->second;
  const fs::path dir = fs::path(store_dir()) / ("runs-" + env_hash_);
  const std::string base = (dir / key).string();
  Run r;
  if (fs::exists(base + ".rclb") && fs::exists(base + ".csv")) {
    r.delta = load_delta(base + ".rclb").delta;
    r.curve = parse_curve(read_text(base + ".csv"));
  } else {
    log("running " + key);
    AdaptResult res = produce();
    r.delta = std::move(res.delta);
    r.curve = std::move(res.curve);
    fs::create_directories(dir);
    write_text(base + ".csv.tmp", curve_csv(r.curve));
    fs::rename(base + ".csv.tmp", base + ".csv");
    save_delta(base + ".rclb", cfg_.model, r.delta);
  }
  for (const auto& p : r.curve) {
    if (&p == &r.curve.front() || p.dev_accuracy > r.best_dev_accuracy) {
      r.best_dev_accuracy = p.dev_accuracy;
      r.best_step = p.step;
    }
  }
  return memo_[key] = std::move(r);
}

const Workspace::Run& Workspace::adapted(const std::string& backbone_id, const std::string& task_id, Method method,
                                         std::uint64_t seed, std::size_t kshot) {
  if (kshot == 0) kshot = cfg_.adapt.kshot;
  const std::string key = "adapt_" + backbone_id + "_" + task_id + "_" + method_name(method) + "_s" + std::to_string(seed) +
                          "_k" + std::to_string(kshot);
  return cached(key, [&] {
    AdaptResult r = adapt(cfg_.model, backbone(backbone_id), task(task_id, seed, kshot), method, AdaptInit::random(seed),
                          adapt_optim(cfg_, method, seed), AdaptOptions{cfg_.adapt.eval_every});
    r.delta.source_task = task_id;
    r.delta.source_checkpoint = backbone_id;
    return r;
  });
}

// ---------------------------------------------------------------------------
// Recipes

namespace {

struct Output {
  std::string dir;
  RunSummary summary;

  void write(const std::string& name, const std::string& text) const { write_text((fs::path(dir) / name).string(), text); }
  void metric(const std::string& name, std::vector<Real> values) { summary.metrics.push_back(Metric{name, std::move(values)}); }
  void timing(const std::string& name, std::vector<Real> values) { summary.timings.push_back(Metric{name, std::move(values)}); }
  void compare(const std::string& name, const std::string& lhs, const std::string& rel, const std::string& rhs,
               Real factor = 1, bool gating = true) {
    summary.properties.push_back(Property{name, lhs, rel, rhs, 0, factor, gating});
  }
  void threshold(const std::string& name, const std::string& lhs, const std::string& rel, Real value, bool gating = true) {
    summary.properties.push_back(Property{name, lhs, rel, "", value, 1, gating});
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Real test_accuracy(const ModelConfig& cfg, const ParamVector& theta, const AdaptedWeights& delta, const TaskDataset& task) {
  return evaluate(compose(cfg, theta, delta), task.test, task.verbalizer).accuracy;
}

std::string seed_tag(std::uint64_t seed) { return "s" + std::to_string(seed); }

std::string sibling_task(const Suite& suite, const std::string& task_id) {
  const TaskSpec& t = suite.task(task_id);
  for (const auto& s : suite.tasks) {
    if (s.family == t.family && s.id != t.id) return s.id;
  }
  throw SpecError("task " + task_id + " has no sibling in its family");
}

/// First task of the next family: a source from a different domain and rule.
std::string different_task(const Suite& suite, const std::string& task_id) {
  const TaskSpec& t = suite.task(task_id);
  const auto next = static_cast<TaskFamily>((static_cast<int>(t.family) + 1) % 3);
  for (const auto& s : suite.tasks) {
    if (s.family == next) return s.id;
  }
  throw SpecError("suite has no task of family " + std::string(family_name(next)));
}

/// Teacher on M<s>, student on M<s+1>, with the first task drawn from D<s+1>.
struct Setting {
  std::string teacher;
  std::string student;
  std::string task;
};

std::vector<Setting> distill_settings(const Workspace& ws) {
  std::vector<Setting> out;
  for (std::size_t s = 0; s < ws.config().lineage.n_domains; ++s) {
    for (const auto& t : ws.suite().tasks) {
      if (t.domain_id == ws.suite().domains[s + 1].id) {
        out.push_back(Setting{"M" + std::to_string(s), "M" + std::to_string(s + 1), t.id});
        break;
      }
    }
  }
  return out;
}

void recipe_pretrain(Workspace& ws, Output& out) {
  const ExperimentConfig& cfg = ws.config();
  std::string csv = "run,domain,step,dev_loss,base_dev_loss\n";
  std::string files = "run,step,path\n";
  const PretrainData base_dev = ws.dev_data(0);
  for (const auto& id : ws.run_ids()) {
    const bool ind = id.rfind("ind-", 0) == 0;
    const std::size_t domain = ind ? 0 : std::stoul(id.substr(6));
    const PretrainData dev = ws.dev_data(domain);
    const auto& ckpts = ws.run(id);
    std::vector<Real> losses;
    for (const auto& c : ckpts) {
      const Real l = mlm_dev_loss(cfg.model, c.params, dev, kDevWindows, 0);
      const Real b = mlm_dev_loss(cfg.model, c.params, base_dev, kDevWindows, 0);
      losses.push_back(l);
      csv += id + "," + c.domain_id + "," + std::to_string(c.step) + "," + num(l) + "," + num(b) + "\n";
    }
    for (const auto& c : ckpts) {
      if (c.step != 0 || ckpts.size() == 1) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "-%06zu.rclb", c.step);
        files += id + "," + std::to_string(c.step) + "," + id + buf + "\n";
      }
    }
    out.metric("dev_loss_start." + id, {losses.front()});
    out.metric("dev_loss_end." + id, {losses.back()});
    out.metric("checkpoints." + id, {Real(ckpts.size())});
    if (ckpts.size() > 1) out.compare("pre-training lowers dev loss on " + id, "dev_loss_end." + id, "<", "dev_loss_start." + id);
  }
  out.write("lineage.csv", csv);
  out.write("checkpoints.csv", files);
}

void recipe_adapt(Workspace& ws, Output& out) {
  const ExperimentConfig& cfg = ws.config();
  std::string csv = "seed,best_step,best_dev_accuracy,test_accuracy,convergence_step\n";
  std::vector<Real> acc, zs, conv;
  for (std::uint64_t seed : cfg.seeds) {
    const auto& r = ws.adapted("M0", cfg.task, cfg.method, seed);
    const TaskDataset data = ws.task(cfg.task, seed, cfg.adapt.kshot);
    acc.push_back(test_accuracy(cfg.model, ws.backbone("M0"), r.delta, data));
    zs.push_back(zero_shot_eval(cfg.model, ws.backbone("M0"), data));
    conv.push_back(Real(convergence_step(r.curve)));
    csv += std::to_string(seed) + "," + std::to_string(r.best_step) + "," + num(r.best_dev_accuracy) + "," + num(acc.back()) +
           "," + num(conv.back()) + "\n";
    out.write("curve-" + seed_tag(seed) + ".csv", curve_csv(r.curve));
    save_delta((fs::path(out.dir) / ("delta-" + seed_tag(seed) + ".rclb")).string(), cfg.model, r.delta);
  }
  out.write("results.csv", csv);
  out.metric("test_accuracy", acc);
  out.metric("zero_shot", zs);
  out.metric("convergence_step", conv);
  out.compare("adaptation beats zero-shot", "test_accuracy", ">", "zero_shot");
}

void recipe_direct_apply(Workspace& ws, Output& out) {
  const ExperimentConfig& cfg = ws.config();
  const std::size_t domain = ws.task_domain(cfg.task);
  if (domain == 0) throw ConfigError("direct-apply needs a task from a continual domain");
  const std::string run_id = "main-D" + std::to_string(domain);
  std::vector<LineagePoint> lineage;
  for (const auto& c : ws.run(run_id)) lineage.push_back(LineagePoint{c.step, c.params});

  std::string csv = "seed,step,accuracy,zero_shot\n";
  std::vector<Real> min_margin, start_acc, first_acc, plateau;
  for (std::uint64_t seed : cfg.seeds) {
    const std::string src = "M" + std::to_string(domain - 1);
    const auto& r = ws.adapted(src, cfg.task, cfg.method, seed);
    const TaskDataset data = ws.task(cfg.task, seed, cfg.adapt.kshot);
    const auto sweep = direct_apply_sweep(cfg.model, lineage, r.delta, data);
    Real margin = 1;
    for (const auto& p : sweep) {
      csv += std::to_string(seed) + "," + std::to_string(p.step) + "," + num(p.accuracy) + "," + num(p.zero_shot) + "\n";
      margin = std::min(margin, p.accuracy - p.zero_shot);
    }
    std::vector<Real> tail;
    for (std::size_t i = sweep.size() / 2; i < sweep.size(); ++i) tail.push_back(sweep[i].accuracy);
    min_margin.push_back(margin);
    start_acc.push_back(sweep.front().accuracy);
    first_acc.push_back(sweep.size() > 1 ? sweep[1].accuracy : sweep.front().accuracy);
    plateau.push_back(mean(tail));
  }
  out.write("sweep.csv", csv);
  out.metric("checkpoints", {Real(lineage.size() - 1)});
  out.metric("min_margin_over_zero_shot", min_margin);
  out.metric("start_accuracy", start_acc);
  out.metric("first_checkpoint_accuracy", first_acc);
  out.metric("plateau_mean_accuracy", plateau);
  out.threshold("at least 8 checkpoints in the sweep", "checkpoints", ">=", 8);
  out.threshold("outdated weights beat zero-shot at every checkpoint", "min_margin_over_zero_shot", ">", 0);
  out.compare("first checkpoint above the plateau", "first_checkpoint_accuracy", ">", "plateau_mean_accuracy");
}

void recipe_connectivity(Workspace& ws, Output& out) {
  const ExperimentConfig& cfg = ws.config();
  const std::size_t domain = ws.task_domain(cfg.task);
  const std::string next = "M" + std::to_string(std::max<std::size_t>(domain, 1));
  for (Method method : {Method::fine_tune, Method::adapter}) {
    const std::string m = method_name(method);
    std::vector<Real> bc, bi, lc, li;
    for (std::uint64_t seed : cfg.seeds) {
      const TaskDataset data = ws.task(cfg.task, seed, cfg.adapt.kshot);
      const auto& a = ws.adapted("M0", cfg.task, method, seed);
      const EffectiveModel ea = compose(cfg.model, ws.backbone("M0"), a.delta);
      for (const std::string& other : {next, std::string("IND")}) {
        const auto& b = ws.adapted(other, cfg.task, method, seed);
        const EffectiveModel eb = compose(cfg.model, ws.backbone(other), b.delta);
        const auto profile = connectivity_profile(ea, eb, data.test, data.verbalizer, cfg.n_interior, "M0", other);
        std::string csv = "mu,accuracy,loss\n";
        for (const auto& p : profile.points) csv += num(p.mu) + "," + num(p.accuracy) + "," + num(p.loss) + "\n";
        out.write("profile-" + m + "-M0-" + other + "-" + seed_tag(seed) + ".csv", csv);
        const Barrier br = barrier(profile);
        (other == "IND" ? bi : bc).push_back(br.accuracy);
        (other == "IND" ? li : lc).push_back(br.loss);
      }
    }
    out.metric("accuracy_barrier_continual." + m, bc);
    out.metric("accuracy_barrier_independent." + m, bi);
    out.metric("loss_barrier_continual." + m, lc);
    out.metric("loss_barrier_independent." + m, li);
    out.compare("continual barrier below half the independent one (" + m + ")", "accuracy_barrier_continual." + m, "<",
                "accuracy_barrier_independent." + m, Real(0.5));
  }
}

void recipe_attention(Workspace& ws, Output& out) {
  const ExperimentConfig& cfg = ws.config();
  const std::size_t domain = ws.task_domain(cfg.task);
  const std::string next = "M" + std::to_string(std::max<std::size_t>(domain, 1));
  std::string csv = "seed,pair,layer,head,jsd\n";
  std::vector<Real> jc, ji;
  for (std::uint64_t seed : cfg.seeds) {
    const TaskDataset data = ws.task(cfg.task, seed, cfg.adapt.kshot);
    const std::size_t n = std::min(cfg.attention_inputs, data.test.size());
    const std::span<const Example> inputs(data.test.data(), n);
    const EffectiveModel ea = compose(cfg.model, ws.backbone("M0"), ws.adapted("M0", cfg.task, cfg.method, seed).delta);
    for (const std::string& other : {next, std::string("IND")}) {
      const EffectiveModel eb = compose(cfg.model, ws.backbone(other), ws.adapted(other, cfg.task, cfg.method, seed).delta);
      Real total = 0;
      for (std::size_t l = 0; l < cfg.model.n_layers; ++l) {
        for (std::size_t h = 0; h < cfg.model.n_heads; ++h) {
          const Real v = attention_similarity(ea, eb, inputs, l, h);
          total += v;
          csv += std::to_string(seed) + ",M0-" + other + "," + std::to_string(l) + "," + std::to_string(h) + "," + num(v) + "\n";
        }
      }
      (other == "IND" ? ji : jc).push_back(total / Real(cfg.model.n_layers * cfg.model.n_heads));
    }
  }
  out.write("attention.csv", csv);
  out.metric("jsd_continual", jc);
  out.metric("jsd_independent", ji);
  out.compare("continual heads closer than independent ones", "jsd_continual", "<", "jsd_independent");
}

void recipe_init_recycle(Workspace& ws, Output& out) {
  const ExperimentConfig& cfg = ws.config();
  const char* inits[] = {"random", "same", "similar", "different"};
  std::string curves = "task,init,seed,step,train_loss,dev_loss,dev_accuracy\n";
  std::string results = "task,init,seed,convergence_step,best_step,test_accuracy\n";
  std::map<std::string, std::vector<Real>> conv_sum, acc_sum;
  std::size_t n_tasks = 0;
  for (const auto& spec : ws.suite().tasks) {
    const std::size_t d = ws.task_domain(spec.id);
    if (d == 0 || d > cfg.lineage.n_domains) continue;
    ++n_tasks;
    const std::string target = "M" + std::to_string(d);
    const std::string source = "M" + std::to_string(d - 1);
    const std::string sources[] = {"", spec.id, sibling_task(ws.suite(), spec.id), different_task(ws.suite(), spec.id)};
    for (std::size_t i = 0; i < 4; ++i) {
      std::vector<Real> conv, acc;
      for (std::size_t si = 0; si < cfg.seeds.size(); ++si) {
        const std::uint64_t seed = cfg.seeds[si];
        const TaskDataset data = ws.task(spec.id, seed, cfg.adapt.kshot);
        const Workspace::Run* r = nullptr;
        if (i == 0) {
          r = &ws.adapted(target, spec.id, cfg.method, seed);
        } else {
          const AdaptedWeights init = ws.adapted(source, sources[i], cfg.method, seed).delta;
          const std::string key = "init_" + target + "_" + spec.id + "_from_" + source + "_" + sources[i] + "_" +
                                  method_name(cfg.method) + "_" + seed_tag(seed);
          r = &ws.cached(key, [&] {
            return adapt(cfg.model, ws.backbone(target), data, cfg.method, AdaptInit::from(init), adapt_optim(cfg, cfg.method, seed),
                         AdaptOptions{cfg.adapt.eval_every});
          });
        }
        conv.push_back(Real(convergence_step(r->curve)));
        acc.push_back(test_accuracy(cfg.model, ws.backbone(target), r->delta, data));
        for (const auto& p : r->curve) {
          curves += spec.id + "," + inits[i] + "," + std::to_string(seed) + "," + std::to_string(p.step) + "," + num(p.train_loss) +
                    "," + num(p.dev_loss) + "," + num(p.dev_accuracy) + "\n";
        }
        results += spec.id + "," + inits[i] + "," + std::to_string(seed) + "," + num(conv.back()) + "," +
                   std::to_string(r->best_step) + "," + num(acc.back()) + "\n";
        auto& cs = conv_sum[inits[i]];
        auto& as = acc_sum[inits[i]];
        cs.resize(cfg.seeds.size(), 0);
        as.resize(cfg.seeds.size(), 0);
        cs[si] += conv.back();
        as[si] += acc.back();
      }
      out.metric(std::string("convergence_step.") + inits[i] + "." + spec.id, conv);
      out.metric(std::string("test_accuracy.") + inits[i] + "." + spec.id, acc);
    }
  }
  if (n_tasks == 0) throw ConfigError("init-recycle: no task lies in a continual domain of the lineage");
  for (const char* init : inits) {
    for (auto& v : conv_sum[init]) v /= Real(n_tasks);
    for (auto& v : acc_sum[init]) v /= Real(n_tasks);
    out.metric(std::string("mean_convergence_step.") + init, conv_sum[init]);
    out.metric(std::string("mean_test_accuracy.") + init, acc_sum[init]);
  }
  out.write("curves.csv", curves);
  out.write("results.csv", results);
  out.compare("same-task init converges no later than random", "mean_convergence_step.same", "<=", "mean_convergence_step.random");
  out.compare("same-task init accuracy at least random", "mean_test_accuracy.same", ">=", "mean_test_accuracy.random");
  out.compare("same-task init accuracy at least similar-task", "mean_test_accuracy.same", ">=", "mean_test_accuracy.similar", 1,
              false);
  out.compare("similar-task init accuracy at least different-task", "mean_test_accuracy.similar", ">=",
              "mean_test_accuracy.different", 1, false);
}

/// Distillation students of one setting; cached per variant.
struct Students {
  Workspace& ws;
  const Setting& s;
  Method method;
  std::uint64_t seed;

  const ExperimentConfig& cfg() const { return ws.config(); }
  std::string key(const std::string& variant) const {
    return variant + "_" + s.teacher + "-" + s.student + "_" + s.task + "_" + method_name(method) + "_" + seed_tag(seed);
  }
  const Workspace::Run& teacher() const { return ws.adapted(s.teacher, s.task, method, seed, cfg().teacher_kshot); }
  EffectiveModel teacher_model() const { return compose(cfg().model, ws.backbone(s.teacher), teacher().delta); }
  TaskDataset data() const { return ws.task(s.task, seed, cfg().adapt.kshot); }

  const Workspace::Run& plain() const { return ws.adapted(s.student, s.task, method, seed); }

  const Workspace::Run& kd(bool from_teacher, Real beta) const {
    const std::string variant = std::string(from_teacher ? "kdinit" : "kd") + "-b" + num(beta);
    return ws.cached(key(variant), [&] {
      KDConfig kd = cfg().kd;
      kd.beta = beta;
      const AdaptInit init = from_teacher ? AdaptInit::from(teacher().delta) : AdaptInit::random(seed);
      AdaptOptions opts{cfg().adapt.eval_every};
      opts.keep_last = beta == 0;
      return distill_adapt(cfg().model, ws.backbone(s.student), method, init, teacher_model(), data(), ws.unlabeled(s.task), kd,
                           adapt_optim(cfg(), method, seed), opts);
    });
  }

  const Workspace::Run& itp() const {
    return ws.cached(key("itp-g" + num(cfg().itp_gamma) + "-n" + std::to_string(cfg().itp_n_mu)), [&] {
      const ParamVector teacher_full = teacher_model().params;
      return itp_adapt(cfg().model, ws.backbone(s.student), AdaptInit::random(seed), teacher_full, data(), cfg().itp_gamma,
                       cfg().itp_n_mu, adapt_optim(cfg(), Method::fine_tune, seed), AdaptOptions{cfg().adapt.eval_every});
    });
  }

  Real accuracy(const Workspace::Run& r) const { return test_accuracy(cfg().model, ws.backbone(s.student), r.delta, data()); }
};

void recipe_distill(Workspace& ws, Output& out) {
  const ExperimentConfig& cfg = ws.config();
  const auto settings = distill_settings(ws);
  std::string csv = "setting,task,seed,variant,test_accuracy\n";
  const std::size_t n = cfg.seeds.size();
  std::vector<Real> mean_plain(n, 0), mean_kd(n, 0), mean_init(n, 0);
  Real kd_wins = 0, zero_wins = 0;
  double zero_seconds = 0;
  for (const auto& s : settings) {
    const std::string tag = s.teacher + "-" + s.student + "." + s.task;
    std::vector<Real> teacher, plain, kd, kdinit, zero, zs;
    for (std::size_t si = 0; si < n; ++si) {
      const Students st{ws, s, cfg.method, cfg.seeds[si]};
      const TaskDataset data = st.data();
      // The label-free variant goes first so that its timing includes the teacher.
      const auto t0 = std::chrono::steady_clock::now();
      zero.push_back(st.accuracy(st.kd(false, 0)));
      zs.push_back(zero_shot_eval(cfg.model, ws.backbone(s.student), data));
      zero_seconds += seconds_since(t0);
      teacher.push_back(test_accuracy(cfg.model, ws.backbone(s.teacher), st.teacher().delta, data));
      plain.push_back(st.accuracy(st.plain()));
      kd.push_back(st.accuracy(st.kd(false, cfg.kd.beta)));
      kdinit.push_back(st.accuracy(st.kd(true, cfg.kd.beta)));
      const std::pair<const char*, Real> rows[] = {{"teacher", teacher.back()}, {"task_only", plain.back()}, {"kd", kd.back()},
                                                   {"kd_init", kdinit.back()},  {"kd_zero_shot", zero.back()}, {"zero_shot", zs.back()}};
      for (const auto& [variant, v] : rows) {
        csv += s.teacher + "-" + s.student + "," + s.task + "," + std::to_string(cfg.seeds[si]) + "," + variant + "," + num(v) + "\n";
      }
      mean_plain[si] += plain.back() / Real(settings.size());
      mean_kd[si] += kd.back() / Real(settings.size());
      mean_init[si] += kdinit.back() / Real(settings.size());
    }
    kd_wins += median(kd) >= median(plain) ? 1 : 0;
    zero_wins += median(zero) > median(zs) ? 1 : 0;
    out.metric("teacher_accuracy." + tag, teacher);
    out.metric("task_only_accuracy." + tag, plain);
    out.metric("kd_accuracy." + tag, kd);
    out.metric("kd_init_accuracy." + tag, kdinit);
    out.metric("kd_zero_shot_accuracy." + tag, zero);
    out.metric("zero_shot_accuracy." + tag, zs);
    out.compare("label-free distillation beats zero-shot on " + s.task, "kd_zero_shot_accuracy." + tag, ">", "zero_shot_accuracy." + tag);
  }
  out.write("results.csv", csv);
  out.metric("mean_task_only_accuracy", mean_plain);
  out.metric("mean_kd_accuracy", mean_kd);
  out.metric("mean_kd_init_accuracy", mean_init);
  out.metric("settings_kd_at_least_task_only", {kd_wins});
  out.metric("settings", {Real(settings.size())});
  out.metric("settings_zero_shot_kd_wins", {zero_wins});
  out.timing("zero_shot_kd_seconds", {Real(zero_seconds)});
  out.threshold("distillation at least task-only on 2 of 3 settings", "settings_kd_at_least_task_only", ">=",
                std::min<Real>(2, Real(settings.size())));
  out.compare("teacher init adds to distillation", "mean_kd_init_accuracy", ">=", "mean_kd_accuracy");
}

void recipe_itp(Workspace& ws, Output& out) {
  const ExperimentConfig& cfg = ws.config();
  const auto settings = distill_settings(ws);
  std::string csv = "setting,task,seed,variant,test_accuracy\n";
  const std::size_t n = cfg.seeds.size();
  std::vector<Real> mean_itp(n, 0), mean_kd(n, 0);
  for (const auto& s : settings) {
    const std::string tag = s.teacher + "-" + s.student + "." + s.task;
    std::vector<Real> itp, kd;
    for (std::size_t si = 0; si < n; ++si) {
      const Students st{ws, s, Method::fine_tune, cfg.seeds[si]};
      itp.push_back(st.accuracy(st.itp()));
      kd.push_back(st.accuracy(st.kd(false, cfg.kd.beta)));
      csv += s.teacher + "-" + s.student + "," + s.task + "," + std::to_string(cfg.seeds[si]) + ",itp," + num(itp.back()) + "\n";
      csv += s.teacher + "-" + s.student + "," + s.task + "," + std::to_string(cfg.seeds[si]) + ",kd," + num(kd.back()) + "\n";
      mean_itp[si] += itp.back() / Real(settings.size());
      mean_kd[si] += kd.back() / Real(settings.size());
    }
    out.metric("itp_accuracy." + tag, itp);
    out.metric("kd_accuracy." + tag, kd);
  }
  out.write("results.csv", csv);
  out.metric("mean_itp_accuracy", mean_itp);
  out.metric("mean_kd_accuracy", mean_kd);
  out.compare("interpolation distillation at least distillation", "mean_itp_accuracy", ">=", "mean_kd_accuracy");
}

void recipe_projection(Workspace& ws, Output& out) {
  const ExperimentConfig& cfg = ws.config();
  const std::size_t domain = ws.task_domain(cfg.task);
  if (domain == 0) throw ConfigError("projection needs a task from a continual domain");
  const std::string old_id = "M" + std::to_string(domain - 1);
  const std::string new_id = "M" + std::to_string(domain);
  const std::string target_task = sibling_task(ws.suite(), cfg.task);
  KDConfig kd = cfg.kd;
  kd.beta = 0;

  std::vector<Real> projected, direct, zs, retrained, init_loss, final_loss, apply_s;
  std::string csv = "seed,projected,direct,zero_shot,retrained,initial_kd_loss,final_kd_loss\n";
  std::string history = "seed,step,kd_loss\n";
  for (std::uint64_t seed : cfg.seeds) {
    const AdaptedWeights source = ws.adapted(old_id, cfg.task, Method::adapter, seed).delta;
    OptimConfig optim;
    optim.lr = cfg.projection_lr;
    optim.weight_decay = 0;
    optim.warmup_fraction = cfg.adapt.warmup_fraction;
    optim.batch_size = cfg.adapt.batch_size;
    optim.max_steps = cfg.projection_steps;
    optim.seed = seed;
    const TaskDataset src_data = ws.task(cfg.task, seed, cfg.adapt.kshot);
    const ProjectionTraining pt = train_projection(cfg.model, source, ws.backbone(old_id), ws.backbone(new_id), ws.unlabeled(cfg.task),
                                                   src_data.verbalizer, cfg.projection_bottleneck, kd, optim);
    for (std::size_t i = 0; i < pt.loss_history.size(); ++i) {
      history += std::to_string(seed) + "," + std::to_string(i) + "," + num(pt.loss_history[i]) + "\n";
    }
    const TaskDataset data = ws.task(target_task, seed, cfg.adapt.kshot);
    const AdaptedWeights target_old = ws.adapted(old_id, target_task, Method::adapter, seed).delta;
    const ProjectedWeights pw = apply_projection(pt.net, target_old);
    projected.push_back(test_accuracy(cfg.model, ws.backbone(new_id), pw.delta, data));
    direct.push_back(test_accuracy(cfg.model, ws.backbone(new_id), target_old, data));
    zs.push_back(zero_shot_eval(cfg.model, ws.backbone(new_id), data));
    retrained.push_back(test_accuracy(cfg.model, ws.backbone(new_id), ws.adapted(new_id, target_task, Method::adapter, seed).delta, data));
    init_loss.push_back(pt.initial_loss);
    final_loss.push_back(pt.final_loss);
    apply_s.push_back(pw.seconds);
    csv += std::to_string(seed) + "," + num(projected.back()) + "," + num(direct.back()) + "," + num(zs.back()) + "," +
           num(retrained.back()) + "," + num(init_loss.back()) + "," + num(final_loss.back()) + "\n";
  }

  // Wall-clock reference: one uncached adaptation of the target task.
  const std::uint64_t seed = cfg.seeds.front();
  const auto t0 = std::chrono::steady_clock::now();
  adapt(cfg.model, ws.backbone(new_id), ws.task(target_task, seed, cfg.adapt.kshot), Method::adapter, AdaptInit::random(seed),
        adapt_optim(cfg, Method::adapter, seed), AdaptOptions{cfg.adapt.eval_every});
  const double adapt_s = seconds_since(t0);
  const Real apply_median = median(apply_s);

  out.write("results.csv", csv);
  out.write("projection_loss.csv", history);
  out.metric("projected_accuracy", projected);
  out.metric("outdated_direct_accuracy", direct);
  out.metric("zero_shot_accuracy", zs);
  out.metric("retrained_accuracy", retrained);
  out.metric("initial_kd_loss", init_loss);
  out.metric("final_kd_loss", final_loss);
  out.timing("apply_seconds", apply_s);
  out.timing("adapt_seconds", {adapt_s});
  out.timing("speedup", {apply_median > 0 ? Real(adapt_s / apply_median) : Real(0)});
  out.compare("projected weights beat zero-shot", "projected_accuracy", ">", "zero_shot_accuracy");
  out.compare("projection training lowers the held-out KD loss", "final_kd_loss", "<", "initial_kd_loss");
  out.threshold("projection at least 100x faster than adaptation", "speedup", ">=", 100);
}

void recipe_distance(Workspace& ws, Output& out) {
  const ExperimentConfig& cfg = ws.config();
  const std::size_t domain = std::max<std::size_t>(ws.task_domain(cfg.task), 1);
  const std::size_t k = cfg.lineage.checkpoint_every;
  const std::string src = "M" + std::to_string(domain - 1);
  std::string csv = "kind,seed,from_step,to_step,distance\n";
  std::vector<Real> matched, full, adapter;
  for (std::uint64_t seed : cfg.seeds) {
    const auto& r = ws.cached("matched_" + src + "_" + cfg.task + "_fine_tune_k" + std::to_string(k) + "_" + seed_tag(seed), [&] {
      OptimConfig optim = adapt_optim(cfg, Method::fine_tune, seed);
      optim.max_steps = k;
      AdaptOptions opts{cfg.adapt.eval_every};
      opts.keep_last = true;
      return adapt(cfg.model, ws.backbone(src), ws.task(cfg.task, seed, cfg.adapt.kshot), Method::fine_tune, AdaptInit::random(seed),
                   optim, opts);
    });
    matched.push_back(param_distance(r.delta));
    full.push_back(param_distance(ws.adapted(src, cfg.task, Method::fine_tune, seed).delta));
    adapter.push_back(param_distance(ws.adapted(src, cfg.task, Method::adapter, seed).delta));
    csv += "fine_tune_matched," + std::to_string(seed) + ",0," + std::to_string(k) + "," + num(matched.back()) + "\n";
    csv += "fine_tune_full," + std::to_string(seed) + ",0," + std::to_string(cfg.adapt.steps) + "," + num(full.back()) + "\n";
    csv += "adapter_norm," + std::to_string(seed) + ",0," + std::to_string(cfg.adapt.steps) + "," + num(adapter.back()) + "\n";
  }
  const auto& ckpts = ws.run("main-D" + std::to_string(domain));
  std::vector<Real> intervals;
  for (std::size_t i = 0; i + 1 < ckpts.size(); ++i) {
    if (ckpts[i + 1].step - ckpts[i].step != k) continue;
    intervals.push_back(param_distance(ckpts[i + 1].params, ckpts[i].params));
    csv += "pretrain_interval,," + std::to_string(ckpts[i].step) + "," + std::to_string(ckpts[i + 1].step) + "," + num(intervals.back()) + "\n";
  }
  if (intervals.empty()) throw ConfigError("distance: the lineage run has no full checkpoint interval");
  out.write("distances.csv", csv);
  out.metric("delta_norm_matched_steps", matched);
  out.metric("delta_norm_full_run", full);
  out.metric("adapter_norm", adapter);
  out.metric("pretrain_interval_distance", intervals);
  out.metric("pretrain_interval_min", {*std::min_element(intervals.begin(), intervals.end())});
  out.compare("adaptation moves less than one pre-training interval", "delta_norm_matched_steps", "<", "pretrain_interval_min");
}

}  // namespace

RunSummary run_experiment(Workspace& ws, ExperimentKind kind) {
  ExperimentConfig cfg = ws.config();
  cfg.kind = kind;
  const fs::path dir = fs::path(cfg.out) / kind_name(kind);
  const fs::path stage = fs::path(cfg.out) / (std::string(kind_name(kind)) + ".incomplete");
  fs::remove_all(stage);
  fs::create_directories(stage);

  Output out{stage.string(), RunSummary{kind_name(kind), config_hash(cfg), cfg.seeds, {}, {}, {}}};
  out.write("config.txt", format_key_values(to_key_values(cfg)));
  ws.log("experiment " + std::string(kind_name(kind)));
  const auto t0 = std::chrono::steady_clock::now();
  switch (kind) {
    case ExperimentKind::pretrain: recipe_pretrain(ws, out); break;
    case ExperimentKind::adapt: recipe_adapt(ws, out); break;
    case ExperimentKind::direct_apply: recipe_direct_apply(ws, out); break;
    case ExperimentKind::connectivity: recipe_connectivity(ws, out); break;
    case ExperimentKind::attention: recipe_attention(ws, out); break;
    case ExperimentKind::init_recycle: recipe_init_recycle(ws, out); break;
    case ExperimentKind::distill: recipe_distill(ws, out); break;
    case ExperimentKind::itp: recipe_itp(ws, out); break;
    case ExperimentKind::projection: recipe_projection(ws, out); break;
    case ExperimentKind::distance: recipe_distance(ws, out); break;
  }
  out.timing("wall_seconds", {Real(seconds_since(t0))});
  out.write("summary.json", summary_json(out.summary));
  out.write("timing.json", timing_json(out.summary));
  fs::remove_all(dir);
  fs::rename(stage, dir);
  return out.summary;
}

RunSummary run_experiment(const ExperimentConfig& cfg, std::ostream* log) {
  Workspace ws(cfg, log);
  return run_experiment(ws, cfg.kind);
}

}  // namespace reclab
