// Acceptance suite: one PASS/FAIL line per criterion, exit status 0 only when
// every criterion passes.
//
//   acceptance [--out DIR] [--reuse] [--only N,...] [--set key=value ...]
//
// Criteria 1 and 2 are computed in-process on small random instances.
// Criteria 3-11 run the experiment recipes with the default configuration on
// one shared workspace under DIR; the store is wiped first unless --reuse is
// given, so measured runtimes include every training run a criterion needs
// that an earlier criterion has not already produced.
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "reclab/checkpoint_io.hpp"
#include "reclab/errors.hpp"
#include "reclab/experiments.hpp"
#include "reclab/gradcheck.hpp"
#include "reclab/report.hpp"
#include "reclab/rng.hpp"

using namespace reclab;
namespace fs = std::filesystem;

namespace {

constexpr Real kGradTol = 1e-4;
constexpr std::uint64_t kInstances = 10;

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      notes.push_back("failed: " + what);
    }
  }
  void note(const std::string& what) { notes.push_back(what); }
};

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

std::string sci(double v) {
  std::ostringstream os;
  os.setf(std::ios::scientific);
  os.precision(2);
  os << v;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// Small random instances for criteria 1 and 2

ModelConfig tiny_model() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_ff = 16;
  c.vocab_size = 20;
  c.max_seq_len = 8;
  c.adapter_bottleneck = 3;
  c.dropout_rate = 0.1;
  return c;
}

const std::vector<std::int32_t> kVerbalizer = {4, 5};

Tensor random_tensor(Rng& rng, Shape shape) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = Real(rng.normal());
  return t;
}

ParamVector jitter(ParamVector p, std::uint64_t seed, double scale) {
  Rng rng(seed);
  for (std::size_t i = 0; i < p.segment_count(); ++i) {
    for (auto& v : p.tensor(i).values()) v += Real(rng.normal() * scale);
  }
  return p;
}

std::vector<Example> random_examples(std::uint64_t seed, std::size_t n, std::size_t len) {
  Rng rng(seed);
  std::vector<Example> out(n);
  for (auto& ex : out) {
    for (std::size_t i = 0; i < len; ++i) ex.tokens.push_back(static_cast<std::int32_t>(6 + rng.below(14)));
    ex.tokens[rng.below(len)] = kMaskToken;
    ex.label = static_cast<std::int32_t>(rng.below(2));
  }
  return out;
}

std::vector<const Example*> pointers(const std::vector<Example>& v) {
  std::vector<const Example*> out;
  for (const auto& e : v) out.push_back(&e);
  return out;
}

// Attention key biases have an identically zero gradient; checks hold them constant.
void split_key_bias(const ParamVector& all, ParamVector& free, ParamVector& key_bias) {
  for (const auto& [name, t] : all.segments()) (name.ends_with("attn.bk") ? key_bias : free).add(name, t);
}

TaskDataset random_task(std::uint64_t seed) {
  TaskDataset t;
  t.task_id = "rand";
  t.verbalizer = kVerbalizer;
  t.train = random_examples(seed, 8, 6);
  t.dev = random_examples(seed + 1, 8, 6);
  t.test = random_examples(seed + 2, 8, 6);
  return t;
}

// Criterion 1: gradients of every differentiable op and composite loss.
Outcome numerical_core() {
  Outcome o;
  Real worst = 0;
  std::size_t checks = 0;
  auto record = [&](const std::string& name, std::uint64_t seed, Real err) {
    ++checks;
    worst = std::max(worst, err);
    o.require(err < kGradTol, name + " seed " + std::to_string(seed) + " rel err " + std::to_string(err));
  };
  using Op = std::function<Var(Graph&, std::span<const Var>)>;
  for (std::uint64_t seed = 0; seed < kInstances; ++seed) {
    Rng rng(seed);
    const Tensor a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {4, 5}), c = random_tensor(rng, {3, 4});
    const Tensor bt = random_tensor(rng, {5, 4}), row = random_tensor(rng, {4}), bias = random_tensor(rng, {4});
    const Tensor q = random_tensor(rng, {8, 8}), k = random_tensor(rng, {8, 8}), v = random_tensor(rng, {8, 8});
    Tensor teacher({3, 4});
    const auto tv = teacher.values();
    for (std::size_t r = 0; r < 3; ++r) {
      Real total = 0;
      for (std::size_t j = 0; j < 4; ++j) total += tv[r * 4 + j] = Real(rng.uniform() + 0.05);
      for (std::size_t j = 0; j < 4; ++j) tv[r * 4 + j] /= total;
    }
    const std::vector<std::tuple<const char*, std::vector<Tensor>, Op>> ops = {
        {"matmul", {a, b}, [](Graph& g, auto p) { return g.matmul(p[0], p[1]); }},
        {"matmul_nt", {a, bt}, [](Graph& g, auto p) { return g.matmul_nt(p[0], p[1]); }},
        {"add", {a, c}, [](Graph& g, auto p) { return g.add(p[0], p[1]); }},
        {"sub", {a, c}, [](Graph& g, auto p) { return g.sub(p[0], p[1]); }},
        {"mul", {a, c}, [](Graph& g, auto p) { return g.mul(p[0], p[1]); }},
        {"scale", {a}, [](Graph& g, auto p) { return g.scale(p[0], -1.7); }},
        {"weighted_sum", {a, c}, [](Graph& g, auto p) { return g.weighted_sum(p[0], 0.3, p[1], 0.7); }},
        {"add_row", {a, row}, [](Graph& g, auto p) { return g.add_row(p[0], p[1]); }},
        {"gelu", {a}, [](Graph& g, auto p) { return g.gelu(p[0]); }},
        {"layer_norm", {a, row, bias}, [](Graph& g, auto p) { return g.layer_norm(p[0], p[1], p[2]); }},
        {"softmax", {a}, [](Graph& g, auto p) { return g.softmax(p[0]); }},
        {"softmax_axis0", {a}, [](Graph& g, auto p) { return g.softmax(p[0], 0); }},
        {"log_softmax", {a}, [](Graph& g, auto p) { return g.log_softmax(p[0]); }},
        {"embedding", {b}, [](Graph& g, auto p) { return g.embedding(p[0], {3, 0, 3, 1}); }},
        {"gather_rows", {b}, [](Graph& g, auto p) { return g.gather_rows(p[0], {2, 2, 0}); }},
        {"select_columns", {a}, [](Graph& g, auto p) { return g.select_columns(p[0], {3, 1}); }},
        {"row_normalize", {a}, [](Graph& g, auto p) { return g.row_normalize(p[0]); }},
        {"reshape", {a}, [](Graph& g, auto p) { return g.reshape(p[0], {2, 6}); }},
        {"slice", {a}, [](Graph& g, auto p) { return g.slice(p[0], 3, {2, 3}); }},
        {"mean", {a}, [](Graph& g, auto p) { return g.mean(p[0]); }},
        {"dropout", {a}, [seed](Graph& g, auto p) { return g.dropout(p[0], 0.3, seed); }},
        {"attention", {q, k, v}, [](Graph& g, auto p) { return g.attention(p[0], p[1], p[2], 2, 4, 2); }},
        {"cross_entropy", {a}, [](Graph& g, auto p) { return g.cross_entropy(p[0], {0, 3, 2}); }},
        {"kl_divergence", {a}, [&](Graph& g, auto p) { return g.kl_divergence(teacher, g.log_softmax(p[0])); }},
        {"mse", {a, c}, [](Graph& g, auto p) { return g.mse(p[0], p[1]); }},
    };
    for (const auto& [name, params, op] : ops) {
      // A random projection turns any output into a scalar with a non-trivial gradient.
      auto f = [&, op = op](Graph& g, std::span<const Var> p) {
        const Var out = op(g, p);
        Rng proj(seed * 7919 + 1);
        return g.sum(g.mul(out, g.constant(random_tensor(proj, g.value(out).shape()))));
      };
      record(name, seed, finite_diff_check(f, params, 1e-5));
    }

    // Composite losses on the tiny transformer.
    const ModelConfig mc = tiny_model();
    const auto labeled = random_examples(seed + 7, 3, 5);
    const auto unlabeled = random_examples(seed + 8, 2, 5);
    const TokenBatch ub = make_batch(pointers(unlabeled));
    {
      ParamVector free, key_bias;
      split_key_bias(jitter(init_params(mc, seed), seed + 1, 0.3), free, key_bias);
      auto f = [&](Graph& g, const Bindings& p) {
        Bindings all = p;
        bind(g, key_bias, false, all);
        return task_loss(g, mc, all, pointers(labeled), kVerbalizer, ForwardOptions{true, seed});
      };
      record("task_loss", seed, finite_diff_check(f, free));
    }
    {
      const EffectiveModel t = base_model(mc, jitter(init_params(mc, seed + 50), seed, 0.3));
      const TeacherOutputs to = teacher_outputs(t, ub, kVerbalizer);
      ParamVector free, key_bias;
      split_key_bias(jitter(init_params(mc, seed), seed + 1, 0.3), free, key_bias);
      KDConfig kd;
      kd.temperature = 2;
      kd.alpha = 1.5;
      auto f = [&](Graph& g, const Bindings& p) {
        Bindings all = p;
        bind(g, key_bias, false, all);
        return kd_loss(g, mc, to, all, ub, kVerbalizer, kd, ForwardOptions{true, seed});
      };
      record("kd_loss", seed, finite_diff_check(f, free));
    }
    {
      const EffectiveModel t = compose(mc, init_params(mc, seed + 50),
                                       AdaptedWeights{DeltaKind::adapter, jitter(init_adapter(mc, seed).segments, seed + 3, 0.3), "", ""});
      const TeacherOutputs to = teacher_outputs(t, ub, kVerbalizer);
      const ParamVector backbone = init_params(mc, seed);
      const ParamVector adapters = jitter(init_adapter(mc, seed).segments, seed + 4, 0.3);
      const Real beta = KDConfig{}.beta;
      auto f = [&](Graph& g, const Bindings& p) {
        Bindings all = bind(g, backbone, false);
        for (const auto& [name, var] : p.all()) all.set(name, var);
        const Var task = task_loss(g, mc, all, pointers(labeled), kVerbalizer, ForwardOptions{true, seed});
        const Var distill = kd_loss(g, mc, to, all, ub, kVerbalizer, KDConfig{}, ForwardOptions{true, seed + 1});
        return g.weighted_sum(task, beta, distill, 1 - beta);
      };
      record("final_objective", seed, finite_diff_check(f, adapters));
    }
    {
      const ParamVector t = jitter(init_params(mc, seed + 60), seed, 0.3);
      ParamVector free, key_bias;
      split_key_bias(jitter(init_params(mc, seed), seed + 2, 0.3), free, key_bias);
      auto f = [&](Graph& g, const Bindings& p) {
        Bindings all = p;
        bind(g, key_bias, false, all);
        return itp_loss(g, mc, t, all, pointers(labeled), kVerbalizer, 0.7, 3, ForwardOptions{true, seed});
      };
      record("itp_loss", seed, finite_diff_check(f, free));
    }
  }
  o.note(std::to_string(checks) + " checks, max rel err " + sci(worst));
  return o;
}

std::vector<Tensor> logits_of(const EffectiveModel& m, const std::vector<Example>& ex) {
  std::vector<Tensor> out;
  for (const auto& e : ex) {
    const std::vector<const Example*> one{&e};
    out.push_back(forward_mlm(m, make_batch(one)).logits);
  }
  return out;
}

bool same_bits(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].shape() != b[i].shape()) return false;
    if (std::memcmp(a[i].values().data(), b[i].values().data(), a[i].size() * sizeof(Real)) != 0) return false;
  }
  return true;
}

// Criterion 2: exact identities.
Outcome exact_identities(const fs::path& scratch) {
  Outcome o;
  const ModelConfig mc = tiny_model();
  Real worst_self_kd = 0;
  for (std::uint64_t seed = 0; seed < kInstances; ++seed) {
    const ParamVector a = jitter(init_params(mc, seed), seed + 1, 0.3);
    const ParamVector b = jitter(init_params(mc, seed + 100), seed + 2, 0.3);
    o.require(bitwise_equal(interpolate(a, b, 0), a), "interpolate(a, b, 0) == a");
    o.require(bitwise_equal(interpolate(a, b, 1), b), "interpolate(a, b, 1) == b");

    const auto ex = random_examples(seed + 3, 4, 6);
    const EffectiveModel base = base_model(mc, a);
    const auto reference = logits_of(base, ex);
    for (DeltaKind kind : {DeltaKind::full, DeltaKind::adapter}) {
      o.require(same_bits(logits_of(compose(mc, a, zero_delta(mc, kind)), ex), reference),
                std::string("compose with zero ") + (kind == DeltaKind::full ? "full" : "adapter") + " delta");
    }

    const EffectiveModel m = compose(mc, a, AdaptedWeights{DeltaKind::adapter, jitter(init_adapter(mc, seed).segments, seed, 0.3), "", ""});
    const Real self = kd_loss_value(m, m, make_batch(pointers(ex)), kVerbalizer, KDConfig{});
    worst_self_kd = std::max(worst_self_kd, std::fabs(self));
    o.require(std::fabs(self) <= 1e-10, "kd_loss(m, m) = " + sci(self));

    Checkpoint c = start_run(a, "main", "D1", seed);
    c.step = 3;
    c.optim.m = b;
    c.optim.v = jitter(b, seed + 4, 1.0);
    const std::string path = (scratch / ("c" + std::to_string(seed) + ".rclb")).string();
    save_checkpoint(path, mc, c);
    const LoadedCheckpoint back = load_checkpoint(path);
    o.require(bitwise_equal(back.checkpoint.params, c.params) && bitwise_equal(back.checkpoint.optim.m, c.optim.m) &&
                  bitwise_equal(back.checkpoint.optim.v, c.optim.v) && back.config == mc,
              "checkpoint round trip");
  }

  // Same-seed determinism.
  PretrainData data;
  Rng rng(7);
  for (int i = 0; i < 600; ++i) data.tokens.push_back(static_cast<std::int32_t>(6 + rng.below(14)));
  data.seq_len = 8;
  data.random_low = 6;
  data.random_high = 20;
  OptimConfig optim;
  optim.lr = 1e-2;
  optim.batch_size = 4;
  optim.max_steps = 6;
  optim.seed = 3;
  const Checkpoint start = start_run(init_params(mc, 1), "main", "D0", 11);
  const auto p1 = pretrain(mc, start, data, 6, optim, 3);
  const auto p2 = pretrain(mc, start, data, 6, optim, 3);
  bool same = p1.size() == p2.size();
  for (std::size_t i = 0; same && i < p1.size(); ++i) same = bitwise_equal(p1[i].params, p2[i].params);
  o.require(same, "pretrain is deterministic");

  const TaskDataset task = random_task(9);
  for (Method method : {Method::fine_tune, Method::adapter}) {
    OptimConfig ao = optim;
    ao.max_steps = 8;
    const auto r1 = adapt(mc, init_params(mc, 1), task, method, AdaptInit::random(4), ao);
    const auto r2 = adapt(mc, init_params(mc, 1), task, method, AdaptInit::random(4), ao);
    bool curves = r1.curve.size() == r2.curve.size();
    for (std::size_t i = 0; curves && i < r1.curve.size(); ++i) {
      curves = r1.curve[i].train_loss == r2.curve[i].train_loss && r1.curve[i].dev_loss == r2.curve[i].dev_loss;
    }
    o.require(bitwise_equal(r1.delta.segments, r2.delta.segments) && curves, std::string("adapt is deterministic (") + method_name(method) + ")");
  }
  o.note("max |kd_loss(m,m)| " + sci(worst_self_kd));
  return o;
}

// ---------------------------------------------------------------------------
// Recipe-backed criteria

void judge(Outcome& o, const RunSummary& s, const std::function<bool(const Property&)>& select) {
  std::size_t n = 0;
  for (const auto& p : s.properties) {
    if (!select(p)) continue;
    ++n;
    const PropertyResult r = evaluate_property(s, p);
    const std::string line = p.name + ": " + fixed(r.lhs) + " " + p.relation + " " + fixed(r.rhs) + (p.gating ? "" : " (reported)");
    if (!p.gating) {
      o.note(line + (r.pass ? " holds" : " does not hold"));
    } else if (r.pass && r.evaluated) {
      o.note(line);
    } else {
      o.require(false, line);
    }
  }
  o.require(n > 0, "no property selected from " + s.kind);
}

bool all_properties(const Property&) { return true; }

Real metric_median(const RunSummary& s, const std::string& name) {
  const Metric* m = s.find(name);
  if (!m || m->values.empty()) throw DataError("metric '" + name + "' missing from " + s.kind);
  return median(m->values);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string out = "acceptance-runs";
  bool reuse = false;
  std::vector<int> only;
  std::vector<std::string> overrides;
  app.add_option("--out", out, "working directory for experiment runs");
  app.add_flag("--reuse", reuse, "keep the store of a previous run");
  app.add_option("--only", only, "criteria to run")->delimiter(',');
  app.add_option("--set", overrides, "override one config key, key=value");
  CLI11_PARSE(app, argc, argv);

  const std::set<int> wanted(only.begin(), only.end());
  auto want = [&](int id) { return wanted.empty() || wanted.count(id); };

  if (!reuse) fs::remove_all(out);
  fs::create_directories(out);

  KeyValues kv;
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) {
      std::cerr << "--set expects key=value\n";
      return 1;
    }
    kv[o.substr(0, eq)] = o.substr(eq + 1);
  }
  ExperimentConfig cfg = experiment_from_key_values(kv);
  cfg.out = out;
  cfg.validate();

  struct Criterion {
    int id;
    std::string name;
    double limit_minutes;
    std::function<Outcome()> run;
    double seconds = 0;
    bool ran = false;
    Outcome outcome;
  };

  std::optional<Workspace> ws_storage;
  auto ws = [&]() -> Workspace& {
    if (!ws_storage) ws_storage.emplace(cfg, &std::clog);
    return *ws_storage;
  };
  std::map<ExperimentKind, RunSummary> summaries;
  auto summary = [&](ExperimentKind k) -> const RunSummary& {
    if (!summaries.count(k)) summaries[k] = run_experiment(ws(), k);
    return summaries.at(k);
  };
  auto recipe = [&](ExperimentKind k, std::function<bool(const Property&)> select) {
    return [&, k, select] {
      Outcome o;
      judge(o, summary(k), select);
      return o;
    };
  };
  auto named = [](std::initializer_list<const char*> prefixes) {
    std::vector<std::string> p(prefixes.begin(), prefixes.end());
    return [p](const Property& prop) {
      for (const auto& x : p) {
        if (prop.name.rfind(x, 0) == 0) return true;
      }
      return false;
    };
  };

  std::vector<Criterion> criteria;
  const fs::path scratch = fs::path(out) / "identities";
  fs::create_directories(scratch);
  criteria.push_back({1, "numerical core: gradient checks", 1, numerical_core});
  criteria.push_back({2, "exact identities", 2, [&] { return exact_identities(scratch); }});
  // The whole main lineage is charged here; M_IND goes to criterion 4.
  criteria.push_back({3, "compatibility of outdated weights", 15, [&] {
                        for (std::size_t d = 0; d <= cfg.lineage.n_domains; ++d) ws().backbone("M" + std::to_string(d));
                        Outcome o;
                        judge(o, summary(ExperimentKind::direct_apply), all_properties);
                        return o;
                      }});
  criteria.push_back({4, "linear mode connectivity", 20, [&] {
                        Outcome o;
                        o.require(cfg.n_interior == 25, "profiles use 25 interior points");
                        judge(o, summary(ExperimentKind::connectivity), all_properties);
                        return o;
                      }});
  criteria.push_back({5, "attention similarity", 5, recipe(ExperimentKind::attention, all_properties)});
  criteria.push_back({6, "initialization recycling", 20, recipe(ExperimentKind::init_recycle, all_properties)});
  criteria.push_back({7, "distillation", 20,
                      recipe(ExperimentKind::distill, named({"distillation at least", "teacher init adds"}))});
  criteria.push_back({8, "interpolation distillation", 15, recipe(ExperimentKind::itp, all_properties)});
  criteria.push_back({9, "zero-shot distillation", 10,
                      recipe(ExperimentKind::distill, named({"label-free distillation beats zero-shot"}))});
  criteria.push_back({10, "projection upgrade", 15, [&] {
                        Outcome o;
                        const RunSummary& s = summary(ExperimentKind::projection);
                        judge(o, s, named({"projected weights beat", "projection at least"}));
                        judge(o, s, [](const Property& p) { return p.name.rfind("projection training", 0) == 0; });
                        o.note("apply " + fixed(metric_median(s, "apply_seconds"), 6) + " s, adapt " +
                               fixed(metric_median(s, "adapt_seconds"), 2) + " s");
                        return o;
                      }});
  criteria.push_back({11, "distance diagnostics", 5, recipe(ExperimentKind::distance, all_properties)});

  bool all_pass = true;
  for (auto& c : criteria) {
    if (!want(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      c.outcome = c.run();
    } catch (const std::exception& e) {
      c.outcome = Outcome{};
      c.outcome.require(false, std::string("error: ") + e.what());
    }
    c.seconds = seconds_since(t0);
    c.ran = true;
    // Criterion 9 shares the distillation run with 7; its own share is timed inside the recipe.
    double charged = c.seconds;
    if (c.id == 9 && summaries.count(ExperimentKind::distill)) {
      if (const Metric* m = summaries.at(ExperimentKind::distill).find("zero_shot_kd_seconds")) charged = m->values.at(0);
    }
    c.outcome.require(charged < c.limit_minutes * 60,
                      "runtime " + fixed(charged, 1) + " s over the " + fixed(c.limit_minutes, 0) + " min budget");
    c.seconds = charged;
    all_pass = all_pass && c.outcome.pass;
    std::cout << "criterion " << c.id << " [" << c.name << "]: " << (c.outcome.pass ? "PASS" : "FAIL") << " (" << fixed(c.seconds, 1)
              << " s)\n";
    for (const auto& n : c.outcome.notes) std::cout << "    " << n << "\n";
    std::cout.flush();
  }
  std::cout << (all_pass ? "all criteria pass" : "some criteria fail") << "\n";
  return all_pass ? 0 : 1;
}
