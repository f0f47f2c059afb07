#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "reclab/errors.hpp"
#include "reclab/rng.hpp"
#include "reclab/train.hpp"

using namespace reclab;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_ff = 16;
  c.vocab_size = 20;
  c.max_seq_len = 8;
  c.adapter_bottleneck = 3;
  c.dropout_rate = 0.1;
  return c;
}

// Label is carried by the token at position 1: 6 -> 0, 7 -> 1.
Example make_example(std::int32_t cue, std::int32_t filler) {
  return Example{{kClsToken, cue, filler, kMaskToken, filler, kSepToken}, cue == 6 ? 0 : 1};
}

TaskDataset tiny_task(std::size_t per_label) {
  TaskDataset t;
  t.task_id = "tiny";
  t.verbalizer = {4, 5};
  for (std::size_t i = 0; i < per_label; ++i) {
    for (std::int32_t cue : {6, 7}) {
      const auto filler = static_cast<std::int32_t>(8 + i % 12);
      t.train.push_back(make_example(cue, filler));
      t.dev.push_back(make_example(cue, static_cast<std::int32_t>(8 + (i + 5) % 12)));
      t.test.push_back(make_example(cue, static_cast<std::int32_t>(8 + (i + 7) % 12)));
    }
  }
  return t;
}

PretrainData tiny_stream(std::uint64_t seed) {
  Rng rng(seed);
  PretrainData d;
  d.seq_len = 6;
  d.random_low = 4;
  d.random_high = 20;
  // A repeating pattern with noise, so the loss has something to learn.
  for (std::size_t i = 0; i < 3000; ++i) {
    d.tokens.push_back(rng.uniform() < 0.2 ? static_cast<std::int32_t>(4 + rng.below(16)) : static_cast<std::int32_t>(4 + i % 7));
  }
  return d;
}

OptimConfig fast_optim(std::size_t steps, Real lr) {
  OptimConfig o;
  o.lr = lr;
  o.max_steps = steps;
  o.batch_size = 4;
  o.warmup_fraction = 0.1;
  return o;
}

// Scalar AdamW written directly from the update rule with bias-corrected
// moments and decay applied to the pre-update value.
struct ScalarAdamW {
  double m = 0, v = 0;
  int t = 0;
  double step(double p, double g, double lr, double b1, double b2, double eps, double wd) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mhat = m / (1 - std::pow(b1, t));
    const double vhat = v / (1 - std::pow(b2, t));
    p = p - lr * wd * p;
    return p - lr * mhat / (std::sqrt(vhat) + eps);
  }
};

}  // namespace

TEST(OptimConfig, RejectsInvalidFields) {
  OptimConfig o;
  EXPECT_NO_THROW(o.validate());
  auto bad = [](auto mutate) {
    OptimConfig c;
    mutate(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  bad([](OptimConfig& c) { c.lr = 0; });
  bad([](OptimConfig& c) { c.beta1 = 1; });
  bad([](OptimConfig& c) { c.beta2 = -0.1; });
  bad([](OptimConfig& c) { c.eps = 0; });
  bad([](OptimConfig& c) { c.weight_decay = -1; });
  bad([](OptimConfig& c) { c.warmup_fraction = 1; });
  bad([](OptimConfig& c) { c.batch_size = 0; });
}

TEST(LrSchedule, WarmupThenLinearDecay) {
  OptimConfig o;
  o.lr = 2.0;
  o.max_steps = 100;
  o.warmup_fraction = 0.1;
  EXPECT_EQ(lr_at(o, 0), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(o, 5), 1.0);
  EXPECT_DOUBLE_EQ(lr_at(o, 10), 2.0);
  EXPECT_DOUBLE_EQ(lr_at(o, 55), 1.0);
  EXPECT_DOUBLE_EQ(lr_at(o, 99), 2.0 / 90);
  EXPECT_EQ(lr_at(o, 100), 0.0);
  EXPECT_EQ(lr_at(o, 250), 0.0);
}

TEST(LrSchedule, NoWarmupStartsAtPeak) {
  OptimConfig o;
  o.lr = 1.0;
  o.max_steps = 4;
  o.warmup_fraction = 0;
  EXPECT_DOUBLE_EQ(lr_at(o, 0), 1.0);
  EXPECT_DOUBLE_EQ(lr_at(o, 2), 0.5);
}

TEST(AdamW, MatchesScalarReference) {
  OptimConfig o;
  o.beta1 = 0.9;
  o.beta2 = 0.98;
  o.eps = 1e-6;
  o.weight_decay = 0.01;
  Rng rng(3);
  Tensor p0({2, 3});
  for (auto& v : p0.values()) v = rng.normal();
  ParamVector params;
  params.add("w", p0);
  OptimizerState state = init_optimizer_state(params);
  std::vector<ScalarAdamW> ref(6);
  std::vector<double> expect(p0.values().begin(), p0.values().end());
  for (int step = 0; step < 7; ++step) {
    Tensor g({2, 3});
    for (auto& v : g.values()) v = rng.normal() * (step % 2 ? 1e-3 : 1.0);
    ParamVector grads;
    grads.add("w", g);
    const Real lr = 1e-2 * (step + 1);
    adamw_step(o, lr, params, grads, state);
    for (std::size_t i = 0; i < 6; ++i) expect[i] = ref[i].step(expect[i], g.values()[i], lr, 0.9, 0.98, 1e-6, 0.01);
    for (std::size_t i = 0; i < 6; ++i) {
      EXPECT_NEAR(params.at("w").values()[i], expect[i], 1e-12 * std::max(1.0, std::fabs(expect[i])));
    }
  }
  EXPECT_EQ(state.step, 7u);
}

TEST(AdamW, ZeroGradientOnlyDecays) {
  OptimConfig o;
  o.weight_decay = 0.5;
  ParamVector params;
  params.add("w", Tensor({1}, {2.0}));
  ParamVector grads;
  grads.add("w", Tensor({1}, {0.0}));
  OptimizerState state = init_optimizer_state(params);
  adamw_step(o, 0.1, params, grads, state);
  EXPECT_DOUBLE_EQ(params.at("w").values()[0], 2.0 * (1 - 0.1 * 0.5));
}

TEST(BatchSampler, EveryEpochIsAPermutation) {
  const BatchSampler s(10, 5, 7);
  for (std::size_t epoch = 0; epoch < 3; ++epoch) {
    std::multiset<std::size_t> seen;
    for (std::size_t b = 0; b < 2; ++b) {
      for (std::size_t i : s.batch(epoch * 2 + b)) seen.insert(i);
    }
    EXPECT_EQ(seen.size(), 10u);
    EXPECT_EQ(std::set<std::size_t>(seen.begin(), seen.end()).size(), 10u);
  }
  EXPECT_EQ(s.batch(4), BatchSampler(10, 5, 7).batch(4));
}

TEST(Pretrain, ZeroStepsReturnsStart) {
  const ModelConfig c = tiny_config();
  const Checkpoint start = start_run(init_params(c, 1), "main", "D0", 5);
  const auto out = pretrain(c, start, tiny_stream(1), 0, fast_optim(10, 1e-3), 2);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_TRUE(bitwise_equal(out[0].params, start.params));
  EXPECT_EQ(out[0].step, 0u);
}

TEST(Pretrain, ResumingReproducesLaterCheckpointsBitwise) {
  const ModelConfig c = tiny_config();
  const PretrainData data = tiny_stream(2);
  const OptimConfig o = fast_optim(6, 1e-2);
  const Checkpoint start = start_run(init_params(c, 1), "main", "D0", 9);
  const auto full = pretrain(c, start, data, 6, o, 2);
  ASSERT_EQ(full.size(), 3u);
  EXPECT_EQ(full[0].step, 2u);
  EXPECT_EQ(full[2].step, 6u);
  const auto resumed = pretrain(c, full[0], data, 4, o, 2);
  ASSERT_EQ(resumed.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_TRUE(bitwise_equal(resumed[i].params, full[i + 1].params));
    EXPECT_TRUE(bitwise_equal(resumed[i].optim.m, full[i + 1].optim.m));
    EXPECT_TRUE(bitwise_equal(resumed[i].optim.v, full[i + 1].optim.v));
  }
  const auto again = pretrain(c, start, data, 6, o, 2);
  EXPECT_TRUE(bitwise_equal(again.back().params, full.back().params));
}

TEST(Pretrain, RejectsRunsPastTheSchedule) {
  const ModelConfig c = tiny_config();
  const Checkpoint start = start_run(init_params(c, 1), "main", "D0", 9);
  EXPECT_THROW(pretrain(c, start, tiny_stream(2), 11, fast_optim(10, 1e-3), 2), ConfigError);
}

TEST(Pretrain, LowersMaskedLmLoss) {
  const ModelConfig c = tiny_config();
  const PretrainData data = tiny_stream(4);
  const Checkpoint start = start_run(init_params(c, 1), "main", "D0", 3);
  const auto out = pretrain(c, start, data, 150, fast_optim(150, 1e-2), 150);
  const Real before = mlm_dev_loss(c, start.params, data, 32, 1);
  const Real after = mlm_dev_loss(c, out.back().params, data, 32, 1);
  EXPECT_LT(after, before - 0.3);
}

TEST(Adapt, FitsTwoExamples) {
  const ModelConfig c = tiny_config();
  TaskDataset t = tiny_task(1);
  const ParamVector theta = init_params(c, 2);
  AdaptOptions opts{50};
  opts.keep_last = true;
  for (Method m : {Method::fine_tune, Method::adapter}) {
    OptimConfig o = fast_optim(200, m == Method::fine_tune ? 3e-2 : 1e-1);
    o.batch_size = 2;
    const AdaptResult r = adapt(c, theta, t, m, AdaptInit::random(1), o, opts);
    const EvalResult e = evaluate(compose(c, theta, r.delta), t.train, t.verbalizer);
    EXPECT_EQ(e.accuracy, 1.0) << method_name(m);
    // Adapters cannot rescale the tied output embeddings, which caps the
    // verbalizer margin of this 8-wide model.
    const Real initial = evaluate(base_model(c, theta), t.train, t.verbalizer).loss;
    EXPECT_LT(e.loss, m == Method::fine_tune ? Real(0.1) : initial - Real(0.05)) << method_name(m);
    EXPECT_EQ(r.delta.kind, delta_kind(m));
  }
}

TEST(Adapt, CurveRecordsStepZeroEveryIntervalAndTheEnd) {
  const ModelConfig c = tiny_config();
  const AdaptResult r = adapt(c, init_params(c, 2), tiny_task(2), Method::adapter, AdaptInit::random(1), fast_optim(25, 1e-2),
                              AdaptOptions{10});
  std::vector<std::size_t> steps;
  for (const auto& p : r.curve) steps.push_back(p.step);
  EXPECT_EQ(steps, (std::vector<std::size_t>{0, 10, 20, 25}));
  EXPECT_EQ(r.curve.front().train_loss, 0.0);
  Real best = 0;
  std::size_t best_step = 0;
  for (const auto& p : r.curve) {
    if (p.dev_accuracy > best || &p == &r.curve.front()) {
      best = p.dev_accuracy;
      best_step = p.step;
    }
  }
  EXPECT_EQ(r.best_step, best_step);
  EXPECT_EQ(r.best_dev_accuracy, best);
}

TEST(Adapt, SameSeedIsBitwiseDeterministic) {
  const ModelConfig c = tiny_config();
  const ParamVector theta = init_params(c, 2);
  const auto a = adapt(c, theta, tiny_task(3), Method::fine_tune, AdaptInit::random(4), fast_optim(12, 1e-2), AdaptOptions{4});
  const auto b = adapt(c, theta, tiny_task(3), Method::fine_tune, AdaptInit::random(4), fast_optim(12, 1e-2), AdaptOptions{4});
  EXPECT_TRUE(bitwise_equal(a.delta.segments, b.delta.segments));
}

TEST(Adapt, FromWeightsWithZeroStepsReturnsTheInit) {
  const ModelConfig c = tiny_config();
  AdaptedWeights w = init_adapter(c, 8);
  for (auto& v : w.segments.tensor(0).values()) v += 0.25;
  const AdaptResult r = adapt(c, init_params(c, 2), tiny_task(2), Method::adapter, AdaptInit::from(w), fast_optim(0, 1e-2));
  EXPECT_TRUE(bitwise_equal(r.delta.segments, w.segments));
  ASSERT_EQ(r.curve.size(), 1u);
  EXPECT_EQ(r.best_step, 0u);
}

TEST(Adapt, KeepLastReturnsFinalWeights) {
  const ModelConfig c = tiny_config();
  const ParamVector theta = init_params(c, 2);
  AdaptOptions keep{5};
  keep.keep_last = true;
  const OptimConfig o = fast_optim(10, 1e-2);
  const auto last = adapt(c, theta, tiny_task(2), Method::fine_tune, AdaptInit::random(4), o, keep);
  // Continuing from the final weights with zero further updates is the identity.
  const auto same = adapt(c, theta, tiny_task(2), Method::fine_tune, AdaptInit::from(last.delta), fast_optim(0, 1e-2));
  EXPECT_TRUE(bitwise_equal(same.delta.segments, last.delta.segments));
  EXPECT_GT(l2_norm(last.delta.segments), 0.0);
}

TEST(Adapt, RandomFineTuneInitIsZeroDisplacement) {
  const ModelConfig c = tiny_config();
  const AdaptedWeights w = resolve_init(c, Method::fine_tune, AdaptInit::random(3));
  EXPECT_EQ(l2_norm(w.segments), 0.0);
  EXPECT_TRUE(bitwise_equal(resolve_init(c, Method::adapter, AdaptInit::random(3)).segments, init_adapter(c, 3).segments));
}

TEST(Adapt, InitKindOrSchemaMismatchIsInitError) {
  const ModelConfig c = tiny_config();
  const ParamVector theta = init_params(c, 2);
  EXPECT_THROW(adapt(c, theta, tiny_task(1), Method::fine_tune, AdaptInit::from(init_adapter(c, 1)), fast_optim(1, 1e-3)), InitError);
  ModelConfig other = c;
  other.adapter_bottleneck = 4;
  EXPECT_THROW(adapt(c, theta, tiny_task(1), Method::adapter, AdaptInit::from(init_adapter(other, 1)), fast_optim(1, 1e-3)), InitError);
}

TEST(Adapt, EmptySplitsAreDataErrors) {
  const ModelConfig c = tiny_config();
  TaskDataset t = tiny_task(1);
  t.train.clear();
  EXPECT_THROW(adapt(c, init_params(c, 2), t, Method::adapter, AdaptInit::random(1), fast_optim(1, 1e-3)), DataError);
  t = tiny_task(1);
  t.dev.clear();
  EXPECT_THROW(adapt(c, init_params(c, 2), t, Method::adapter, AdaptInit::random(1), fast_optim(1, 1e-3)), DataError);
}

TEST(Adapt, AdapterRunLeavesNoBackboneSegments) {
  const ModelConfig c = tiny_config();
  const auto r = adapt(c, init_params(c, 2), tiny_task(1), Method::adapter, AdaptInit::random(1), fast_optim(3, 1e-2));
  EXPECT_TRUE(r.delta.segments.same_schema(init_adapter(c, 0).segments));
}

TEST(Evaluate, AccuracyAndLossProperties) {
  const ModelConfig c = tiny_config();
  const TaskDataset t = tiny_task(5);
  const EffectiveModel m = base_model(c, init_params(c, 6));
  const EvalResult e = evaluate(m, t.test, t.verbalizer);
  EXPECT_GE(e.accuracy, 0.0);
  EXPECT_LE(e.accuracy, 1.0);
  EXPECT_GT(e.loss, 0.0);
  std::vector<Example> reversed(t.test.rbegin(), t.test.rend());
  const EvalResult r = evaluate(m, reversed, t.verbalizer);
  EXPECT_EQ(r.accuracy, e.accuracy);
  EXPECT_NEAR(r.loss, e.loss, 1e-12);
  EXPECT_THROW(evaluate(m, std::vector<Example>{}, t.verbalizer), DataError);
}

TEST(ZeroShot, UntrainedBackboneIsNearChance) {
  const ModelConfig c;
  const Suite suite = make_suite(SuiteConfig{});
  const TaskDataset data = make_task_dataset(suite.task("sent-a"), suite.domain("D1"), 200, 11);
  const Real acc = zero_shot_eval(c, init_params(c, 5), data);
  const Real sigma = std::sqrt(0.25 / Real(data.test.size()));
  EXPECT_LT(std::fabs(acc - 0.5), 3 * sigma);
}

TEST(Convergence, FirstStepReachingNinetyPercentOfFinal) {
  const std::vector<CurvePoint> curve = {{0, 0, 0, 0.5}, {10, 0, 0, 0.6}, {20, 0, 0, 0.85}, {30, 0, 0, 0.9}};
  EXPECT_EQ(convergence_step(curve), 20u);
  EXPECT_EQ(convergence_step({{0, 0, 0, 0.7}}), 0u);
  EXPECT_THROW(convergence_step({}), DataError);
}

TEST(Convergence, CurveCsvHasHeaderAndOneRowPerPoint) {
  const std::string csv = curve_csv({{0, 0, 1.5, 0.5}, {10, 0.25, 1.0, 0.75}});
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,train_loss,dev_loss,dev_accuracy");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_NE(csv.find("10,0.25,1,0.75"), std::string::npos);
}
