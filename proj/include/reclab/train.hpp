#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "reclab/corpus.hpp"
#include "reclab/model.hpp"

namespace reclab {

struct OptimConfig {
  Real lr = Real(3e-4);
  Real beta1 = Real(0.9);
  Real beta2 = Real(0.98);
  Real eps = Real(1e-6);
  Real weight_decay = Real(0.01);
  Real warmup_fraction = Real(0.06);
  std::size_t batch_size = 16;
  std::size_t max_steps = 2000;  // schedule length
  std::uint64_t seed = 0;

  /// Throws ConfigError on the first violated constraint.
  void validate() const;
  bool operator==(const OptimConfig&) const = default;
};

/// Learning rate for update index t (0-based): linear warmup from 0 over the
/// first warmup_fraction*max_steps updates, then linear decay to 0 at max_steps.
Real lr_at(const OptimConfig& cfg, std::size_t t);

struct OptimizerState {
  std::size_t step = 0;  // updates applied so far
  ParamVector m;
  ParamVector v;
};

OptimizerState init_optimizer_state(const ParamVector& like);

/// Decoupled-weight-decay Adam. Decay pulls each tunable value towards zero.
void adamw_step(const OptimConfig& cfg, Real lr, ParamVector& params, const ParamVector& grads, OptimizerState& state);

// ---------------------------------------------------------------------------
// Pre-training lineages

struct Checkpoint {
  std::string lineage;    // "main" for M0..M4, "ind" for the independent model
  std::string domain_id;  // corpus the run trains on
  std::size_t step = 0;   // updates applied within this domain run
  std::uint64_t seed = 0; // data / dropout stream of the run
  ParamVector params;
  OptimizerState optim;
};

/// Checkpoint at step 0 of a new domain run with a fresh optimizer.
Checkpoint start_run(const ParamVector& params, std::string lineage, std::string domain_id, std::uint64_t seed);

struct PretrainData {
  std::vector<std::int32_t> tokens;  // domain stream windows are drawn from
  std::size_t seq_len = 32;
  Real mask_prob = Real(0.15);
  std::int32_t random_low = 12;      // replacement range of the 10% random corruption
  std::int32_t random_high = 512;
};

/// Runs `steps` MLM updates from `start`. Batches, masks and dropout of update
/// t depend only on (start.seed, t), so resuming from any emitted checkpoint
/// reproduces the later ones bitwise. Emits a checkpoint whenever the step is
/// a multiple of checkpoint_every and at the final step; steps == 0 returns
/// {start}. A non-finite loss raises NumericError naming the step.
std::vector<Checkpoint> pretrain(const ModelConfig& cfg, const Checkpoint& start, const PretrainData& data,
                                 std::size_t steps, const OptimConfig& optim, std::size_t checkpoint_every);

/// Mean MLM loss over n_windows fixed windows (eval mode, deterministic).
Real mlm_dev_loss(const ModelConfig& cfg, const ParamVector& params, const PretrainData& data, std::size_t n_windows,
                  std::uint64_t seed);

// ---------------------------------------------------------------------------
// Downstream adaptation

enum class Method : std::uint8_t { fine_tune, adapter };
const char* method_name(Method m);
DeltaKind delta_kind(Method m);

/// Random: zero displacement for fine-tuning, init_adapter(seed) for adapters.
struct AdaptInit {
  bool from_weights = false;
  AdaptedWeights weights;
  std::uint64_t seed = 0;

  static AdaptInit random(std::uint64_t seed) { return AdaptInit{false, {}, seed}; }
  static AdaptInit from(AdaptedWeights w) { return AdaptInit{true, std::move(w), 0}; }
};

struct CurvePoint {
  std::size_t step = 0;
  Real train_loss = 0;  // mean over updates since the previous point (0 at step 0)
  Real dev_loss = 0;
  Real dev_accuracy = 0;
};

struct AdaptOptions {
  std::size_t eval_every = 10;
  bool keep_last = false;  // return the final weights instead of the best-dev ones
};

struct AdaptResult {
  AdaptedWeights delta;       // best-dev weights, or the final ones with keep_last
  std::vector<CurvePoint> curve;
  std::size_t best_step = 0;
  Real best_dev_accuracy = 0;
};

/// Tunable segments the step loss sees as graph leaves, and the effective
/// model built from them (backbone + displacement, or backbone + adapters).
struct StepContext {
  Graph& graph;
  const Bindings& model;
  const Bindings& tunable;
  std::size_t step;
  ForwardOptions forward;  // training mode with a per-step dropout seed
};

using StepLoss = std::function<Var(const StepContext& ctx)>;

/// Shared optimization loop for every adaptation variant: AdamW over the
/// tunable segments only, dev evaluation every eval_every updates (and at 0
/// and the end), best-dev selection with ties to the earlier step.
AdaptResult optimize_delta(const ModelConfig& cfg, const ParamVector& theta0, Method method, const AdaptInit& init,
                           const TaskDataset& dev_source, const OptimConfig& optim, const AdaptOptions& opts,
                           const StepLoss& loss);

/// Resolves the starting weights; InitError on kind or schema mismatch.
AdaptedWeights resolve_init(const ModelConfig& cfg, Method method, const AdaptInit& init);

/// Deterministic epoch-shuffled minibatches over a list of examples.
class BatchSampler {
 public:
  BatchSampler(std::size_t n_examples, std::size_t batch_size, std::uint64_t seed);
  /// Indices of the batch for update `step`.
  std::vector<std::size_t> batch(std::size_t step) const;

 private:
  std::size_t n_;
  std::size_t batch_;
  std::uint64_t seed_;
};

/// Mean cross-entropy of the verbalizer logits on a labeled batch.
Var task_loss(Graph& g, const ModelConfig& cfg, const Bindings& model, std::span<const Example* const> batch,
              const std::vector<std::int32_t>& verbalizer, const ForwardOptions& fo);

/// Supervised adaptation with the task loss. DataError on an empty train or dev split.
AdaptResult adapt(const ModelConfig& cfg, const ParamVector& theta0, const TaskDataset& task, Method method,
                  const AdaptInit& init, const OptimConfig& optim, const AdaptOptions& opts = {});

struct EvalResult {
  Real accuracy = 0;
  Real loss = 0;  // mean -log p(gold) under the verbalizer distribution
};

EvalResult evaluate(const EffectiveModel& model, std::span<const Example> split, const std::vector<std::int32_t>& verbalizer);

/// Test accuracy of the backbone composed with the identity displacement.
Real zero_shot_eval(const ModelConfig& cfg, const ParamVector& theta0, const TaskDataset& task);

/// First curve step whose dev accuracy reaches 90% of the final point's.
std::size_t convergence_step(const std::vector<CurvePoint>& curve);

/// CSV with header "step,train_loss,dev_loss,dev_accuracy".
std::string curve_csv(const std::vector<CurvePoint>& curve);

}  // namespace reclab
