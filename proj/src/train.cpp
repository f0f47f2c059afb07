#include "reclab/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "reclab/errors.hpp"
#include "reclab/rng.hpp"

namespace reclab {

namespace {

// Stream tags for Rng::derive.
constexpr std::uint64_t kTagWindows = 0xB7;
constexpr std::uint64_t kTagMask = 0x3A;
constexpr std::uint64_t kTagDropout = 0xD7;
constexpr std::uint64_t kTagEpoch = 0xE9;
constexpr std::size_t kEvalChunk = 64;

ParamVector collect_grads(const Gradients& grads, const Bindings& vars, const ParamVector& like) {
  ParamVector out(like.schema());
  for (std::size_t i = 0; i < like.segment_count(); ++i) {
    if (const Tensor* t = grads.find(vars.at(like.name(i)))) out.tensor(i) = *t;
  }
  return out;
}

TokenBatch window_batch(const PretrainData& data, std::size_t n_windows, Rng& rng) {
  if (data.tokens.size() < data.seq_len) throw DataError("pretrain corpus shorter than one window");
  TokenBatch b;
  b.n_seq = n_windows;
  b.seq_len = data.seq_len;
  b.tokens.reserve(n_windows * data.seq_len);
  const std::size_t span = data.tokens.size() - data.seq_len + 1;
  for (std::size_t i = 0; i < n_windows; ++i) {
    const std::size_t off = rng.below(span);
    b.tokens.insert(b.tokens.end(), data.tokens.begin() + static_cast<std::ptrdiff_t>(off),
                    data.tokens.begin() + static_cast<std::ptrdiff_t>(off + data.seq_len));
  }
  return b;
}

std::string format_real(Real v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", static_cast<double>(v));
  return buf;
}

}  // namespace

void OptimConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("optim.lr must be positive");
  if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("optim.beta1 must be in [0, 1)");
  if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("optim.beta2 must be in [0, 1)");
  if (!(eps > 0)) throw ConfigError("optim.eps must be positive");
  if (!(weight_decay >= 0)) throw ConfigError("optim.weight_decay must be non-negative");
  if (!(warmup_fraction >= 0 && warmup_fraction < 1)) throw ConfigError("optim.warmup_fraction must be in [0, 1)");
  if (batch_size == 0) throw ConfigError("optim.batch_size must be positive");
}

Real lr_at(const OptimConfig& cfg, std::size_t t) {
  if (cfg.max_steps == 0 || t >= cfg.max_steps) return 0;
  const Real total = Real(cfg.max_steps);
  const Real warm = cfg.warmup_fraction * total;
  const Real x = Real(t);
  if (x < warm) return cfg.lr * x / warm;
  return cfg.lr * (total - x) / (total - warm);
}

OptimizerState init_optimizer_state(const ParamVector& like) {
  return OptimizerState{0, ParamVector(like.schema()), ParamVector(like.schema())};
}

void adamw_step(const OptimConfig& cfg, Real lr, ParamVector& params, const ParamVector& grads, OptimizerState& state) {
  if (!params.same_schema(grads)) throw SchemaError("adamw: gradient schema differs at '" + params.first_mismatch(grads) + "'");
  if (state.m.segment_count() == 0) state = init_optimizer_state(params);
  if (!params.same_schema(state.m) || !params.same_schema(state.v)) throw SchemaError("adamw: optimizer state schema differs from parameters");
  ++state.step;
  const Real bias1 = 1 - std::pow(cfg.beta1, Real(state.step));
  const Real bias2_sqrt = std::sqrt(1 - std::pow(cfg.beta2, Real(state.step)));
  const Real decay = 1 - lr * cfg.weight_decay;
  const Real step_size = lr / bias1;
  for (std::size_t s = 0; s < params.segment_count(); ++s) {
    auto p = params.tensor(s).values();
    const auto g = grads.tensor(s).values();
    auto m = state.m.tensor(s).values();
    auto v = state.v.tensor(s).values();
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1 - cfg.beta2) * g[i] * g[i];
      p[i] *= decay;
      p[i] -= step_size * m[i] / (std::sqrt(v[i]) / bias2_sqrt + cfg.eps);
    }
  }
}

Checkpoint start_run(const ParamVector& params, std::string lineage, std::string domain_id, std::uint64_t seed) {
  Checkpoint c;
  c.lineage = std::move(lineage);
  c.domain_id = std::move(domain_id);
  c.seed = seed;
  c.params = params;
  c.optim = init_optimizer_state(params);
  return c;
}

std::vector<Checkpoint> pretrain(const ModelConfig& cfg, const Checkpoint& start, const PretrainData& data,
                                 std::size_t steps, const OptimConfig& optim, std::size_t checkpoint_every) {
  cfg.validate();
  optim.validate();
  check_delta_schema(cfg, AdaptedWeights{DeltaKind::full, start.params, {}, {}});
  if (start.step + steps > optim.max_steps) {
    throw ConfigError("pretrain: step " + std::to_string(start.step + steps) + " beyond schedule length " +
                      std::to_string(optim.max_steps));
  }
  if (steps == 0) return {start};

  std::vector<Checkpoint> out;
  Checkpoint cur = start;
  if (cur.optim.m.segment_count() == 0) cur.optim = init_optimizer_state(cur.params);
  const std::size_t end = start.step + steps;
  for (std::size_t t = start.step; t < end; ++t) {
    Rng windows = Rng::derive(cur.seed, kTagWindows, t);
    const TokenBatch raw = window_batch(data, optim.batch_size, windows);
    const MaskedBatch masked = mlm_mask(raw.tokens, data.mask_prob, Rng::derive(cur.seed, kTagMask, t).next_u64(),
                                        data.random_low, data.random_high);
    ParamVector grads(cur.params.schema());
    if (!masked.rows.empty()) {
      Graph g;
      const Bindings p = bind(g, cur.params, true);
      const TokenBatch batch{masked.tokens, raw.n_seq, raw.seq_len, masked.rows};
      const ForwardOptions fo{true, Rng::derive(cur.seed, kTagDropout, t).next_u64()};
      const GraphForward fw = forward_graph(g, cfg, p, batch, fo);
      const Var loss = g.cross_entropy(mlm_logits(g, p, fw.masked), masked.targets);
      const Real value = g.value(loss).item();
      if (!std::isfinite(value)) {
        throw NumericError("pretrain step " + std::to_string(t) + ": non-finite loss " + format_real(value));
      }
      grads = collect_grads(g.backward(loss), p, cur.params);
    }
    adamw_step(optim, lr_at(optim, t), cur.params, grads, cur.optim);
    cur.step = t + 1;
    if ((checkpoint_every != 0 && cur.step % checkpoint_every == 0) || cur.step == end) out.push_back(cur);
  }
  return out;
}

Real mlm_dev_loss(const ModelConfig& cfg, const ParamVector& params, const PretrainData& data, std::size_t n_windows,
                  std::uint64_t seed) {
  if (n_windows == 0) throw DataError("mlm_dev_loss: no windows");
  Real total = 0;
  std::size_t rows = 0;
  for (std::size_t start = 0; start < n_windows; start += kEvalChunk) {
    const std::size_t n = std::min(kEvalChunk, n_windows - start);
    Rng windows = Rng::derive(seed, kTagWindows, start);
    const TokenBatch raw = window_batch(data, n, windows);
    const MaskedBatch masked = mlm_mask(raw.tokens, data.mask_prob, Rng::derive(seed, kTagMask, start).next_u64(),
                                        data.random_low, data.random_high);
    if (masked.rows.empty()) continue;
    Graph g;
    const Bindings p = bind(g, params, false);
    const GraphForward fw = forward_graph(g, cfg, p, TokenBatch{masked.tokens, raw.n_seq, raw.seq_len, masked.rows});
    const Var loss = g.cross_entropy(mlm_logits(g, p, fw.masked), masked.targets);
    total += g.value(loss).item() * Real(masked.rows.size());
    rows += masked.rows.size();
  }
  if (rows == 0) throw DataError("mlm_dev_loss: no masked positions");
  return total / Real(rows);
}

const char* method_name(Method m) { return m == Method::fine_tune ? "fine_tune" : "adapter"; }

DeltaKind delta_kind(Method m) { return m == Method::fine_tune ? DeltaKind::full : DeltaKind::adapter; }

AdaptedWeights resolve_init(const ModelConfig& cfg, Method method, const AdaptInit& init) {
  if (!init.from_weights) {
    return method == Method::fine_tune ? zero_delta(cfg, DeltaKind::full) : init_adapter(cfg, init.seed);
  }
  if (init.weights.kind != delta_kind(method)) {
    throw InitError(std::string("init weights are ") + delta_kind_name(init.weights.kind) + ", method " +
                    method_name(method) + " needs " + delta_kind_name(delta_kind(method)));
  }
  try {
    check_delta_schema(cfg, init.weights);
  } catch (const CompositionError& e) {
    throw InitError(std::string("init weights do not match the model: ") + e.what());
  }
  return init.weights;
}

BatchSampler::BatchSampler(std::size_t n_examples, std::size_t batch_size, std::uint64_t seed)
    : n_(n_examples), batch_(std::min(batch_size, n_examples)), seed_(seed) {
  if (n_ == 0) throw DataError("batch sampler over an empty set");
  if (batch_ == 0) throw ConfigError("batch size must be positive");
}

std::vector<std::size_t> BatchSampler::batch(std::size_t step) const {
  std::vector<std::size_t> out;
  out.reserve(batch_);
  std::size_t cached_epoch = SIZE_MAX;
  std::vector<std::size_t> perm(n_);
  for (std::size_t i = 0; i < batch_; ++i) {
    const std::size_t pos = step * batch_ + i;
    const std::size_t epoch = pos / n_;
    if (epoch != cached_epoch) {
      std::iota(perm.begin(), perm.end(), 0);
      Rng rng = Rng::derive(seed_, kTagEpoch, epoch);
      rng.shuffle(perm);
      cached_epoch = epoch;
    }
    out.push_back(perm[pos % n_]);
  }
  return out;
}

Var task_loss(Graph& g, const ModelConfig& cfg, const Bindings& model, std::span<const Example* const> batch,
              const std::vector<std::int32_t>& verbalizer, const ForwardOptions& fo) {
  const TokenBatch tb = make_batch(batch);
  const GraphForward fw = forward_graph(g, cfg, model, tb, fo);
  std::vector<std::int32_t> labels;
  for (const Example* ex : batch) {
    if (ex->label < 0 || static_cast<std::size_t>(ex->label) >= verbalizer.size()) {
      throw InputError("task_loss: label " + std::to_string(ex->label) + " outside the verbalizer");
    }
    labels.push_back(ex->label);
  }
  return g.cross_entropy(class_logits(g, model, fw.masked, verbalizer), std::move(labels));
}

AdaptResult optimize_delta(const ModelConfig& cfg, const ParamVector& theta0, Method method, const AdaptInit& init,
                           const TaskDataset& dev_source, const OptimConfig& optim, const AdaptOptions& opts,
                           const StepLoss& loss) {
  cfg.validate();
  optim.validate();
  if (opts.eval_every == 0) throw ConfigError("eval_every must be positive");
  if (dev_source.dev.empty()) throw DataError("task " + dev_source.task_id + " has an empty dev split");
  base_model(cfg, theta0);  // schema check

  AdaptedWeights cur = resolve_init(cfg, method, init);
  OptimizerState state = init_optimizer_state(cur.segments);
  AdaptResult result;
  auto record = [&](std::size_t step, Real train_loss) {
    const EvalResult dev = evaluate(compose(cfg, theta0, cur), dev_source.dev, dev_source.verbalizer);
    result.curve.push_back(CurvePoint{step, train_loss, dev.loss, dev.accuracy});
    if (result.curve.size() == 1 || dev.accuracy > result.best_dev_accuracy) {
      result.best_dev_accuracy = dev.accuracy;
      result.best_step = step;
      result.delta = cur;
    }
  };
  record(0, 0);

  Real loss_sum = 0;
  std::size_t loss_count = 0;
  for (std::size_t t = 0; t < optim.max_steps; ++t) {
    Graph g;
    Bindings model, tunable;
    if (method == Method::fine_tune) {
      for (std::size_t i = 0; i < theta0.segment_count(); ++i) {
        const std::string& name = theta0.name(i);
        const Var d = g.leaf(cur.segments.at(name), true);
        tunable.set(name, d);
        model.set(name, g.add(g.constant(theta0.tensor(i)), d));
      }
    } else {
      bind(g, theta0, false, model);
      bind(g, cur.segments, true, tunable);
      for (const auto& [name, v] : tunable.all()) model.set(name, v);
    }
    const StepContext ctx{g, model, tunable, t, ForwardOptions{true, Rng::derive(optim.seed, kTagDropout, t).next_u64()}};
    const Var l = loss(ctx);
    const Real value = g.value(l).item();
    if (!std::isfinite(value)) throw NumericError("adapt step " + std::to_string(t) + ": non-finite loss " + format_real(value));
    const ParamVector grads = collect_grads(g.backward(l), tunable, cur.segments);
    adamw_step(optim, lr_at(optim, t), cur.segments, grads, state);
    loss_sum += value;
    ++loss_count;
    if ((t + 1) % opts.eval_every == 0 || t + 1 == optim.max_steps) {
      record(t + 1, loss_sum / Real(loss_count));
      loss_sum = 0;
      loss_count = 0;
    }
  }
  if (opts.keep_last) result.delta = std::move(cur);
  return result;
}

AdaptResult adapt(const ModelConfig& cfg, const ParamVector& theta0, const TaskDataset& task, Method method,
                  const AdaptInit& init, const OptimConfig& optim, const AdaptOptions& opts) {
  if (task.train.empty()) throw DataError("task " + task.task_id + " has an empty train split");
  const BatchSampler sampler(task.train.size(), optim.batch_size, optim.seed);
  const StepLoss loss = [&](const StepContext& ctx) {
    std::vector<const Example*> batch;
    for (std::size_t i : sampler.batch(ctx.step)) batch.push_back(&task.train[i]);
    return task_loss(ctx.graph, cfg, ctx.model, batch, task.verbalizer, ctx.forward);
  };
  return optimize_delta(cfg, theta0, method, init, task, optim, opts, loss);
}

EvalResult evaluate(const EffectiveModel& model, std::span<const Example> split, const std::vector<std::int32_t>& verbalizer) {
  if (split.empty()) throw DataError("evaluate: empty split");
  const std::vector<Prediction> preds = classify_batch(model, split, verbalizer);
  std::size_t correct = 0;
  Real loss = 0;
  for (std::size_t i = 0; i < split.size(); ++i) {
    correct += preds[i].label == split[i].label;
    const std::size_t gold = static_cast<std::size_t>(split[i].label);
    if (gold >= preds[i].distribution.size()) throw InputError("evaluate: label outside the verbalizer");
    loss -= std::log(std::max(preds[i].distribution[gold], Real(1e-300)));
  }
  return EvalResult{Real(correct) / Real(split.size()), loss / Real(split.size())};
}

Real zero_shot_eval(const ModelConfig& cfg, const ParamVector& theta0, const TaskDataset& task) {
  return evaluate(compose(cfg, theta0, zero_delta(cfg, DeltaKind::full)), task.test, task.verbalizer).accuracy;
}

std::size_t convergence_step(const std::vector<CurvePoint>& curve) {
  if (curve.empty()) throw DataError("convergence_step: empty curve");
  const Real target = Real(0.9) * curve.back().dev_accuracy;
  for (const auto& p : curve) {
    if (p.dev_accuracy >= target) return p.step;
  }
  return curve.back().step;
}

std::string curve_csv(const std::vector<CurvePoint>& curve) {
  std::string out = "step,train_loss,dev_loss,dev_accuracy\n";
  for (const auto& p : curve) {
    out += std::to_string(p.step) + ',' + format_real(p.train_loss) + ',' + format_real(p.dev_loss) + ',' +
           format_real(p.dev_accuracy) + '\n';
  }
  return out;
}

}  // namespace reclab
