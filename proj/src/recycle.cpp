#include "reclab/recycle.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <optional>

#include "reclab/errors.hpp"
#include "reclab/rng.hpp"

namespace reclab {

namespace {

constexpr std::uint64_t kTagUnlabeled = 0x0B;
constexpr std::uint64_t kTagItpDropout = 0x17;
constexpr std::size_t kEvalChunk = 64;

void require_same_config(const EffectiveModel& a, const EffectiveModel& b, const char* what) {
  if (!(a.config == b.config)) throw InputError(std::string(what) + ": models have different configs");
}

/// Groups inputs into equal-length chunks of at most kEvalChunk.
std::vector<std::vector<const Example*>> chunks_of(std::span<const Example> inputs) {
  std::map<std::size_t, std::vector<const Example*>> by_len;
  for (const auto& ex : inputs) by_len[ex.tokens.size()].push_back(&ex);
  std::vector<std::vector<const Example*>> out;
  for (auto& [len, list] : by_len) {
    for (std::size_t s = 0; s < list.size(); s += kEvalChunk) {
      out.emplace_back(list.begin() + static_cast<std::ptrdiff_t>(s),
                       list.begin() + static_cast<std::ptrdiff_t>(std::min(list.size(), s + kEvalChunk)));
    }
  }
  return out;
}

bool is_adapter_segment(const std::string& name) { return name.find(".adapter_") != std::string::npos; }

}  // namespace

// ---------------------------------------------------------------------------
// Interpolation

ParamVector interpolate(const ParamVector& a, const ParamVector& b, Real mu, bool* extrapolated) {
  if (!a.same_schema(b)) throw InterpolationError("interpolate: schemas differ at '" + a.first_mismatch(b) + "'");
  if (extrapolated) *extrapolated = !(mu >= 0 && mu <= 1);
  if (mu == 0) return a;
  if (mu == 1) return b;
  const Real wa = 1 - mu;
  ParamVector out = a;
  for (std::size_t s = 0; s < out.segment_count(); ++s) {
    auto o = out.tensor(s).values();
    const auto bv = b.tensor(s).values();
    for (std::size_t i = 0; i < o.size(); ++i) {
      if (o[i] != bv[i]) o[i] = wa * o[i] + mu * bv[i];
    }
  }
  return out;
}

ConnectivityProfile connectivity_profile(const EffectiveModel& a, const EffectiveModel& b, std::span<const Example> split,
                                         const std::vector<std::int32_t>& verbalizer, std::size_t n_interior,
                                         std::string a_id, std::string b_id) {
  if (!(a.config == b.config) || a.has_adapters != b.has_adapters) {
    throw InterpolationError("connectivity_profile: endpoints are not the same kind of model");
  }
  ConnectivityProfile profile{std::move(a_id), std::move(b_id), n_interior, {}};
  const std::size_t last = n_interior + 1;
  for (std::size_t k = 0; k <= last; ++k) {
    const Real mu = k == last ? Real(1) : Real(k) / Real(last);
    const EffectiveModel m{a.config, interpolate(a.params, b.params, mu), a.has_adapters};
    const EvalResult r = evaluate(m, split, verbalizer);
    profile.points.push_back(ProfilePoint{mu, r.accuracy, r.loss});
  }
  return profile;
}

Barrier barrier(const ConnectivityProfile& profile) {
  if (profile.points.size() < 2) throw InputError("barrier: profile needs both endpoints");
  const ProfilePoint& first = profile.points.front();
  const ProfilePoint& last = profile.points.back();
  Barrier b;
  for (const auto& p : profile.points) {
    const Real t = (p.mu - first.mu) / (last.mu - first.mu);
    const Real acc_chord = (1 - t) * first.accuracy + t * last.accuracy;
    const Real loss_chord = (1 - t) * first.loss + t * last.loss;
    b.accuracy = std::max(b.accuracy, acc_chord - p.accuracy);
    b.loss = std::max(b.loss, p.loss - loss_chord);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Direct application

std::vector<SweepPoint> direct_apply_sweep(const ModelConfig& cfg, const std::vector<LineagePoint>& lineage,
                                           const AdaptedWeights& delta, const TaskDataset& task) {
  check_delta_schema(cfg, delta);
  std::vector<SweepPoint> out;
  for (const auto& point : lineage) {
    const Real acc = evaluate(compose(cfg, point.params, delta), task.test, task.verbalizer).accuracy;
    out.push_back(SweepPoint{point.step, acc, zero_shot_eval(cfg, point.params, task)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention similarity

std::vector<Tensor> attention_maps(const EffectiveModel& model, std::span<const Example> inputs, std::size_t layer,
                                   std::size_t head) {
  if (layer >= model.config.n_layers) throw InputError("attention: layer " + std::to_string(layer) + " out of range");
  if (head >= model.config.n_heads) throw InputError("attention: head " + std::to_string(head) + " out of range");
  std::vector<Tensor> out(inputs.size());
  std::map<const Example*, std::size_t> index;
  for (std::size_t i = 0; i < inputs.size(); ++i) index[&inputs[i]] = i;
  for (const auto& chunk : chunks_of(inputs)) {
    const MlmOutput fw = forward_mlm(model, make_batch(chunk));
    for (std::size_t s = 0; s < chunk.size(); ++s) out[index[chunk[s]]] = attention_map(fw, s, layer, head);
  }
  return out;
}

Real jensen_shannon(std::span<const Real> p, std::span<const Real> q) {
  if (p.size() != q.size()) throw DimensionError("jensen_shannon: distributions differ in length");
  Real kp = 0, kq = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const Real m = Real(0.5) * (p[i] + q[i]);
    if (p[i] > 0) kp += p[i] * std::log(p[i] / m);
    if (q[i] > 0) kq += q[i] * std::log(q[i] / m);
  }
  return std::clamp(Real(0.5) * (kp + kq), Real(0), Real(std::log(2.0)));
}

namespace {

// Sum of row JSDs and row count for every (layer, head) selected by `want`.
template <typename Want>
void accumulate_jsd(const EffectiveModel& a, const EffectiveModel& b, std::span<const Example> inputs, Want want,
                    std::vector<Real>& sums, std::size_t& rows_per_pair) {
  rows_per_pair = 0;
  for (const auto& chunk : chunks_of(inputs)) {
    const TokenBatch batch = make_batch(chunk);
    const MlmOutput fa = forward_mlm(a, batch);
    const MlmOutput fb = forward_mlm(b, batch);
    const std::size_t s_len = batch.seq_len, heads = a.config.n_heads;
    for (std::size_t l = 0; l < a.config.n_layers; ++l) {
      const auto pa = fa.attention[l].values();
      const auto pb = fb.attention[l].values();
      for (std::size_t h = 0; h < heads; ++h) {
        if (!want(l, h)) continue;
        Real& sum = sums[l * heads + h];
        for (std::size_t s = 0; s < chunk.size(); ++s) {
          for (std::size_t r = 0; r < s_len; ++r) {
            const std::size_t off = ((s * heads + h) * s_len + r) * s_len;
            sum += jensen_shannon(pa.subspan(off, s_len), pb.subspan(off, s_len));
          }
        }
      }
    }
    rows_per_pair += chunk.size() * s_len;
  }
}

}  // namespace

Real attention_similarity(const EffectiveModel& a, const EffectiveModel& b, std::span<const Example> inputs,
                          std::size_t layer, std::size_t head) {
  require_same_config(a, b, "attention_similarity");
  if (layer >= a.config.n_layers) throw InputError("attention: layer " + std::to_string(layer) + " out of range");
  if (head >= a.config.n_heads) throw InputError("attention: head " + std::to_string(head) + " out of range");
  if (inputs.empty()) throw DataError("attention_similarity: no inputs");
  std::vector<Real> sums(a.config.n_layers * a.config.n_heads, 0);
  std::size_t rows = 0;
  accumulate_jsd(a, b, inputs, [&](std::size_t l, std::size_t h) { return l == layer && h == head; }, sums, rows);
  return sums[layer * a.config.n_heads + head] / Real(rows);
}

Real mean_attention_divergence(const EffectiveModel& a, const EffectiveModel& b, std::span<const Example> inputs) {
  require_same_config(a, b, "mean_attention_divergence");
  if (inputs.empty()) throw DataError("mean_attention_divergence: no inputs");
  std::vector<Real> sums(a.config.n_layers * a.config.n_heads, 0);
  std::size_t rows = 0;
  accumulate_jsd(a, b, inputs, [](std::size_t, std::size_t) { return true; }, sums, rows);
  Real total = 0;
  for (Real s : sums) total += s / Real(rows);
  return total / Real(sums.size());
}

// ---------------------------------------------------------------------------
// Distillation

void KDConfig::validate() const {
  if (!(alpha >= 0)) throw ConfigError("kd.alpha must be non-negative");
  if (!(beta >= 0 && beta <= 1)) throw ConfigError("kd.beta must be in [0, 1]");
  if (!(temperature > 0)) throw ConfigError("kd.temperature must be positive");
}

TeacherOutputs teacher_outputs(const EffectiveModel& teacher, const TokenBatch& batch, const std::vector<std::int32_t>& verbalizer) {
  Graph g;
  const Bindings p = bind(g, teacher.params, false);
  const GraphForward fw = forward_graph(g, teacher.config, p, batch);
  if (!fw.masked.valid()) throw InputError("teacher_outputs: batch has no mask rows");
  TeacherOutputs out;
  out.logits = g.value(class_logits(g, p, fw.masked, verbalizer));
  for (const Var h : fw.hidden) out.hidden.push_back(g.value(g.row_normalize(h)));
  return out;
}

Var kd_loss(Graph& g, const ModelConfig& cfg, const TeacherOutputs& teacher, const Bindings& student,
            const TokenBatch& batch, const std::vector<std::int32_t>& verbalizer, const KDConfig& kd,
            const ForwardOptions& fo) {
  kd.validate();
  if (teacher.hidden.size() != cfg.n_layers) throw DistillationError("kd_loss: teacher has a different depth");
  const GraphForward fw = forward_graph(g, cfg, student, batch, fo);
  if (!fw.masked.valid()) throw InputError("kd_loss: batch has no mask rows");
  const Var s_logits = class_logits(g, student, fw.masked, verbalizer);
  if (g.value(s_logits).shape() != teacher.logits.shape()) throw DistillationError("kd_loss: teacher logits do not match the batch");

  const Real inv_t = 1 / kd.temperature;
  Tensor p;
  {
    Graph tg;
    p = tg.value(tg.softmax(tg.scale(tg.constant(teacher.logits), inv_t)));
  }
  Var loss = g.kl_divergence(p, g.log_softmax(g.scale(s_logits, inv_t)));
  if (kd.alpha > 0) {
    Var hidden_term;
    for (std::size_t k = 0; k < cfg.n_layers; ++k) {
      const Var d = g.mse(g.row_normalize(fw.hidden[k]), g.constant(teacher.hidden[k]));
      hidden_term = hidden_term.valid() ? g.add(hidden_term, d) : d;
    }
    loss = g.weighted_sum(loss, 1, hidden_term, kd.alpha);
  }
  return loss;
}

Real kd_loss_value(const EffectiveModel& teacher, const EffectiveModel& student, const TokenBatch& batch,
                   const std::vector<std::int32_t>& verbalizer, const KDConfig& kd) {
  if (!(teacher.config == student.config)) throw DistillationError("kd_loss: teacher and student configs differ");
  const TeacherOutputs t = teacher_outputs(teacher, batch, verbalizer);
  Graph g;
  const Bindings s = bind(g, student.params, false);
  return g.value(kd_loss(g, student.config, t, s, batch, verbalizer, kd)).item();
}

std::vector<Example> corpus_inputs(const std::vector<std::int32_t>& tokens, std::size_t n, std::size_t seq_len, std::uint64_t seed) {
  if (seq_len < 2 || tokens.size() < seq_len - 1) throw DataError("corpus_inputs: corpus shorter than one window");
  Rng rng = Rng::derive(seed, kTagUnlabeled);
  std::vector<Example> out(n);
  const std::size_t span = tokens.size() - (seq_len - 1) + 1;
  for (auto& ex : out) {
    const std::size_t off = rng.below(span);
    ex.tokens.assign(tokens.begin() + static_cast<std::ptrdiff_t>(off),
                     tokens.begin() + static_cast<std::ptrdiff_t>(off + seq_len - 1));
    ex.tokens.push_back(kMaskToken);
  }
  return out;
}

std::vector<Example> task_inputs(const TaskDataset& task) {
  std::vector<Example> out = task.train;
  for (auto& ex : out) ex.label = 0;
  return out;
}

AdaptResult distill_adapt(const ModelConfig& cfg, const ParamVector& theta_new0, Method method, const AdaptInit& init,
                          const EffectiveModel& teacher, const TaskDataset& labeled, const std::vector<Example>& unlabeled,
                          const KDConfig& kd, const OptimConfig& optim, const AdaptOptions& opts) {
  kd.validate();
  if (kd.beta > 0 && labeled.train.empty()) throw ConfigError("distill_adapt: beta > 0 needs labeled examples");
  if (kd.beta < 1 && unlabeled.empty()) throw ConfigError("distill_adapt: beta < 1 needs unlabeled inputs");
  if (!(teacher.config == cfg)) throw DistillationError("distill_adapt: teacher config differs from the student's");
  if (kd.beta == 1) return adapt(cfg, theta_new0, labeled, method, init, optim, opts);

  std::optional<BatchSampler> labeled_sampler;
  if (kd.beta > 0) labeled_sampler.emplace(labeled.train.size(), optim.batch_size, optim.seed);
  const BatchSampler unlabeled_sampler(unlabeled.size(), optim.batch_size, Rng::derive(optim.seed, kTagUnlabeled).next_u64());
  const StepLoss loss = [&](const StepContext& ctx) {
    std::vector<const Example*> ub;
    for (std::size_t i : unlabeled_sampler.batch(ctx.step)) ub.push_back(&unlabeled[i]);
    const TokenBatch batch = make_batch(ub);
    const TeacherOutputs t = teacher_outputs(teacher, batch, labeled.verbalizer);
    ForwardOptions kd_fo = ctx.forward;
    kd_fo.dropout_seed = Rng::derive(ctx.forward.dropout_seed, kTagUnlabeled).next_u64();
    const Var l_kd = kd_loss(ctx.graph, cfg, t, ctx.model, batch, labeled.verbalizer, kd, kd_fo);
    if (kd.beta == 0) return l_kd;
    std::vector<const Example*> lb;
    for (std::size_t i : labeled_sampler->batch(ctx.step)) lb.push_back(&labeled.train[i]);
    const Var l_task = task_loss(ctx.graph, cfg, ctx.model, lb, labeled.verbalizer, ctx.forward);
    return ctx.graph.weighted_sum(l_task, kd.beta, l_kd, 1 - kd.beta);
  };
  return optimize_delta(cfg, theta_new0, method, init, labeled, optim, opts, loss);
}

Var itp_loss(Graph& g, const ModelConfig& cfg, const ParamVector& teacher_full, const Bindings& student,
             std::span<const Example* const> batch, const std::vector<std::int32_t>& verbalizer, Real gamma,
             std::size_t n_mu, const ForwardOptions& fo) {
  if (n_mu < 2) throw ConfigError("itp_loss: n_mu must be at least 2");
  for (const auto& [name, v] : student.all()) {
    if (is_adapter_segment(name)) throw ConfigError("itp_loss: students must be full-parameter models");
  }
  const Var endpoint = task_loss(g, cfg, student, batch, verbalizer, fo);
  if (gamma == 0) return endpoint;
  Var total = endpoint;
  for (std::size_t j = 1; j < n_mu; ++j) {
    const Real mu = Real(j) / Real(n_mu);
    Bindings mixed;
    for (std::size_t s = 0; s < teacher_full.segment_count(); ++s) {
      const std::string& name = teacher_full.name(s);
      mixed.set(name, g.weighted_sum(g.constant(teacher_full.tensor(s)), 1 - mu, student.at(name), mu));
    }
    ForwardOptions mu_fo = fo;
    mu_fo.dropout_seed = Rng::derive(fo.dropout_seed, kTagItpDropout, j).next_u64();
    total = g.weighted_sum(total, 1, task_loss(g, cfg, mixed, batch, verbalizer, mu_fo), gamma);
  }
  return total;
}

AdaptResult itp_adapt(const ModelConfig& cfg, const ParamVector& theta_new0, const AdaptInit& init,
                      const ParamVector& teacher_full, const TaskDataset& task, Real gamma, std::size_t n_mu,
                      const OptimConfig& optim, const AdaptOptions& opts) {
  if (n_mu < 2) throw ConfigError("itp_adapt: n_mu must be at least 2");
  if (task.train.empty()) throw DataError("task " + task.task_id + " has an empty train split");
  base_model(cfg, teacher_full);  // schema check
  const BatchSampler sampler(task.train.size(), optim.batch_size, optim.seed);
  const StepLoss loss = [&](const StepContext& ctx) {
    std::vector<const Example*> batch;
    for (std::size_t i : sampler.batch(ctx.step)) batch.push_back(&task.train[i]);
    return itp_loss(ctx.graph, cfg, teacher_full, ctx.model, batch, task.verbalizer, gamma, n_mu, ctx.forward);
  };
  return optimize_delta(cfg, theta_new0, Method::fine_tune, init, task, optim, opts, loss);
}

// ---------------------------------------------------------------------------
// Projection

ProjectionNet init_projection(const Schema& delta_schema, std::size_t bottleneck, std::uint64_t seed) {
  if (bottleneck == 0) throw ConfigError("projection bottleneck must be positive");
  std::size_t n = 0;
  for (const auto& [name, shape] : delta_schema) n += shape_size(shape);
  if (n == 0) throw ProjectionError("projection over an empty schema");
  const std::size_t h = 4 * bottleneck;
  ProjectionNet net;
  net.bottleneck = bottleneck;
  net.delta_schema = delta_schema;
  Rng rng = Rng::derive(seed, 0x9A);
  auto gaussian = [&](std::size_t rows, std::size_t cols) {
    Tensor t(Shape{rows, cols});
    const double sd = 1.0 / std::sqrt(static_cast<double>(rows));
    for (auto& v : t.values()) v = Real(rng.truncated_normal(sd));
    return t;
  };
  net.params.add("down.w1", gaussian(n, h));
  net.params.add("down.b1", Tensor(Shape{h}));
  net.params.add("down.w2", gaussian(h, bottleneck));
  net.params.add("down.b2", Tensor(Shape{bottleneck}));
  net.params.add("up.w1", gaussian(bottleneck, h));
  net.params.add("up.b1", Tensor(Shape{h}));
  net.params.add("up.w2", Tensor(Shape{h, n}));
  net.params.add("up.b2", Tensor(Shape{n}));
  return net;
}

Var projection_forward(Graph& g, const Bindings& proj, Var flat_delta) {
  Var x = g.gelu(g.add_row(g.matmul(flat_delta, proj.at("down.w1")), proj.at("down.b1")));
  x = g.add_row(g.matmul(x, proj.at("down.w2")), proj.at("down.b2"));
  x = g.gelu(g.add_row(g.matmul(x, proj.at("up.w1")), proj.at("up.b1")));
  return g.add_row(g.matmul(x, proj.at("up.w2")), proj.at("up.b2"));
}

namespace {

// Binds compose(theta, Proj(delta)) into g; the projection output is sliced
// into adapter segments.
void bind_projected_student(Graph& g, const ParamVector& theta, const Schema& schema, Var projected, Bindings& out) {
  bind(g, theta, false, out);
  std::size_t offset = 0;
  for (const auto& [name, shape] : schema) {
    out.set(name, g.slice(projected, offset, shape));
    offset += shape_size(shape);
  }
}

Tensor flat_row(const ParamVector& p) {
  std::vector<Real> flat = p.flatten();
  const std::size_t n = flat.size();
  return Tensor(Shape{1, n}, std::move(flat));
}

}  // namespace

ProjectionTraining train_projection(const ModelConfig& cfg, const AdaptedWeights& source, const ParamVector& theta_old0,
                                    const ParamVector& theta_new0, const std::vector<Example>& unlabeled,
                                    const std::vector<std::int32_t>& verbalizer, std::size_t bottleneck, const KDConfig& kd,
                                    const OptimConfig& optim) {
  if (source.kind != DeltaKind::adapter) throw UnsupportedKindError("projection supports adapter weights only");
  kd.validate();
  if (kd.beta != 0) throw ConfigError("train_projection: the projection trains on the distillation loss alone (beta = 0)");
  optim.validate();
  if (unlabeled.empty()) throw DataError("train_projection: no unlabeled inputs");
  check_delta_schema(cfg, source);

  ProjectionTraining result;
  result.net = init_projection(source.segments.schema(), bottleneck, optim.seed);
  result.net.source_task = source.source_task;
  const Tensor flat = flat_row(source.segments);
  const EffectiveModel teacher = compose(cfg, theta_old0, source);
  base_model(cfg, theta_new0);

  std::vector<const Example*> held;
  for (std::size_t i = 0; i < std::min<std::size_t>(unlabeled.size(), 64); ++i) held.push_back(&unlabeled[i]);
  const TokenBatch held_batch = make_batch(held);
  const TeacherOutputs held_teacher = teacher_outputs(teacher, held_batch, verbalizer);
  auto held_loss = [&]() {
    Graph g;
    const Bindings proj = bind(g, result.net.params, false);
    Bindings student;
    bind_projected_student(g, theta_new0, result.net.delta_schema, projection_forward(g, proj, g.constant(flat)), student);
    return g.value(kd_loss(g, cfg, held_teacher, student, held_batch, verbalizer, kd)).item();
  };
  result.initial_loss = held_loss();

  const BatchSampler sampler(unlabeled.size(), optim.batch_size, optim.seed);
  OptimizerState state = init_optimizer_state(result.net.params);
  for (std::size_t t = 0; t < optim.max_steps; ++t) {
    std::vector<const Example*> ub;
    for (std::size_t i : sampler.batch(t)) ub.push_back(&unlabeled[i]);
    const TokenBatch batch = make_batch(ub);
    const TeacherOutputs tout = teacher_outputs(teacher, batch, verbalizer);
    Graph g;
    const Bindings proj = bind(g, result.net.params, true);
    Bindings student;
    bind_projected_student(g, theta_new0, result.net.delta_schema, projection_forward(g, proj, g.constant(flat)), student);
    const ForwardOptions fo{true, Rng::derive(optim.seed, 0xD7, t).next_u64()};
    const Var l = kd_loss(g, cfg, tout, student, batch, verbalizer, kd, fo);
    const Real value = g.value(l).item();
    if (!std::isfinite(value)) throw NumericError("train_projection step " + std::to_string(t) + ": non-finite loss");
    const Gradients grads = g.backward(l);
    ParamVector gp(result.net.params.schema());
    for (std::size_t i = 0; i < gp.segment_count(); ++i) {
      if (const Tensor* gt = grads.find(proj.at(gp.name(i)))) gp.tensor(i) = *gt;
    }
    adamw_step(optim, lr_at(optim, t), result.net.params, gp, state);
    result.loss_history.push_back(value);
  }
  result.final_loss = held_loss();
  return result;
}

ProjectedWeights apply_projection(const ProjectionNet& net, const AdaptedWeights& target_old) {
  if (target_old.kind != DeltaKind::adapter) throw UnsupportedKindError("projection supports adapter weights only");
  if (target_old.segments.schema() != net.delta_schema) throw ProjectionError("apply_projection: input schema differs from the training schema");
  const auto start = std::chrono::steady_clock::now();
  Graph g;
  const Bindings proj = bind(g, net.params, false);
  const Var out = projection_forward(g, proj, g.constant(flat_row(target_old.segments)));
  ProjectedWeights result;
  result.delta.kind = DeltaKind::adapter;
  result.delta.segments = ParamVector::unflatten(net.delta_schema, g.value(out).values());
  result.delta.source_task = target_old.source_task;
  result.delta.source_checkpoint = net.target_checkpoint;
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

// ---------------------------------------------------------------------------
// Distances

Real param_distance(const ParamVector& a, const ParamVector& b) { return l2_distance(a, b); }

Real param_distance(const AdaptedWeights& delta) { return l2_norm(delta.segments); }

}  // namespace reclab
