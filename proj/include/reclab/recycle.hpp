#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "reclab/train.hpp"

namespace reclab {

// ---------------------------------------------------------------------------
// Interpolation and mode connectivity

/// (1-mu)*a + mu*b per element, with weights fl(1-mu) and mu. mu = 0 and
/// mu = 1 return copies of the endpoints and elements equal in both inputs
/// are copied, so interpolate(a, a, mu) == a. Swapping the endpoints with
/// 1-mu gives a bitwise identical result whenever 1-mu is representable.
/// mu outside [0, 1] extrapolates and sets *extrapolated.
/// InterpolationError on schema mismatch.
ParamVector interpolate(const ParamVector& a, const ParamVector& b, Real mu, bool* extrapolated = nullptr);

struct ProfilePoint {
  Real mu = 0;
  Real accuracy = 0;
  Real loss = 0;
};

struct ConnectivityProfile {
  std::string a_id;
  std::string b_id;
  std::size_t n_interior = 0;
  std::vector<ProfilePoint> points;  // mu = k/(n_interior+1), k = 0..n_interior+1
};

/// Evaluates n_interior+2 evenly spaced points on the segment between two
/// composed models (adapter models interpolate their composed parameters).
ConnectivityProfile connectivity_profile(const EffectiveModel& a, const EffectiveModel& b, std::span<const Example> split,
                                         const std::vector<std::int32_t>& verbalizer, std::size_t n_interior = 25,
                                         std::string a_id = "A", std::string b_id = "B");

struct Barrier {
  Real accuracy = 0;  // max shortfall below the endpoint chord, clipped at 0
  Real loss = 0;      // max excess above the endpoint chord, clipped at 0
};

Barrier barrier(const ConnectivityProfile& profile);

// ---------------------------------------------------------------------------
// Direct application of outdated weights

struct SweepPoint {
  std::size_t step = 0;
  Real accuracy = 0;  // compose(theta(t), delta) on the test split
  Real zero_shot = 0; // theta(t) alone
};

struct LineagePoint {
  std::size_t step = 0;
  ParamVector params;
};

std::vector<SweepPoint> direct_apply_sweep(const ModelConfig& cfg, const std::vector<LineagePoint>& lineage,
                                           const AdaptedWeights& delta, const TaskDataset& task);

// ---------------------------------------------------------------------------
// Attention similarity

/// Attention maps [S, S] of one head, one per input.
std::vector<Tensor> attention_maps(const EffectiveModel& model, std::span<const Example> inputs, std::size_t layer,
                                   std::size_t head);

/// Jensen-Shannon divergence (natural log) of two distributions, in [0, ln 2].
Real jensen_shannon(std::span<const Real> p, std::span<const Real> q);

/// Mean JSD over inputs and query positions between the two models' heads.
Real attention_similarity(const EffectiveModel& a, const EffectiveModel& b, std::span<const Example> inputs,
                          std::size_t layer, std::size_t head);

/// attention_similarity averaged over every (layer, head) pair.
Real mean_attention_divergence(const EffectiveModel& a, const EffectiveModel& b, std::span<const Example> inputs);

// ---------------------------------------------------------------------------
// Distillation

enum class UnlabeledSource : std::uint8_t { task_inputs, generic_corpus };

struct KDConfig {
  Real alpha = Real(12.5);  // hidden-state term weight
  Real beta = Real(0.2);    // task-loss share of the final objective
  Real temperature = Real(10);
  UnlabeledSource source = UnlabeledSource::task_inputs;

  /// Throws ConfigError on the first violated constraint.
  void validate() const;
  bool operator==(const KDConfig&) const = default;
};

/// Teacher signals for one batch: verbalizer logits at the mask rows and
/// unit-normalized hidden states of every layer. Eval mode, no tape kept.
struct TeacherOutputs {
  Tensor logits;
  std::vector<Tensor> hidden;
};

TeacherOutputs teacher_outputs(const EffectiveModel& teacher, const TokenBatch& batch, const std::vector<std::int32_t>& verbalizer);

/// KL(softmax(t/T) || softmax(s/T)) + alpha * sum_k mean_rows ||h_k^t - h_k^s||^2
/// over unit-normalized hidden states. Teacher values enter as constants.
Var kd_loss(Graph& g, const ModelConfig& cfg, const TeacherOutputs& teacher, const Bindings& student,
            const TokenBatch& batch, const std::vector<std::int32_t>& verbalizer, const KDConfig& kd,
            const ForwardOptions& fo = {});

/// Eval-mode kd_loss value; DistillationError when the configs differ.
Real kd_loss_value(const EffectiveModel& teacher, const EffectiveModel& student, const TokenBatch& batch,
                   const std::vector<std::int32_t>& verbalizer, const KDConfig& kd);

/// Mask-slot windows of the generic corpus, shaped like task inputs.
std::vector<Example> corpus_inputs(const std::vector<std::int32_t>& tokens, std::size_t n, std::size_t seq_len, std::uint64_t seed);

/// Inputs of a task's train split with labels dropped.
std::vector<Example> task_inputs(const TaskDataset& task);

/// beta * task loss + (1 - beta) * kd_loss over the tunable segments.
/// beta == 1 follows the exact trajectory of adapt(). ConfigError when beta > 0
/// and `labeled.train` is empty, or beta < 1 and `unlabeled` is empty.
AdaptResult distill_adapt(const ModelConfig& cfg, const ParamVector& theta_new0, Method method, const AdaptInit& init,
                          const EffectiveModel& teacher, const TaskDataset& labeled, const std::vector<Example>& unlabeled,
                          const KDConfig& kd, const OptimConfig& optim, const AdaptOptions& opts = {});

/// Task loss at the student plus gamma times the task loss at the interior
/// points mu = j/n_mu, j = 1..n_mu-1, of the segment from the teacher's full
/// parameters to the student's. ConfigError when n_mu < 2.
Var itp_loss(Graph& g, const ModelConfig& cfg, const ParamVector& teacher_full, const Bindings& student,
             std::span<const Example* const> batch, const std::vector<std::int32_t>& verbalizer, Real gamma,
             std::size_t n_mu, const ForwardOptions& fo = {});

/// Fine-tuning of theta_new0 under itp_loss.
AdaptResult itp_adapt(const ModelConfig& cfg, const ParamVector& theta_new0, const AdaptInit& init,
                      const ParamVector& teacher_full, const TaskDataset& task, Real gamma, std::size_t n_mu,
                      const OptimConfig& optim, const AdaptOptions& opts = {});

// ---------------------------------------------------------------------------
// Projection upgrading

/// Two 2-layer MLPs, |delta| -> 4d -> d and d -> 4d -> |delta|, whose output
/// is the new adapter. The last layer starts at zero.
struct ProjectionNet {
  std::size_t bottleneck = 8;
  Schema delta_schema;
  ParamVector params;
  std::string source_task;
  std::string source_checkpoint;
  std::string target_checkpoint;
};

ProjectionNet init_projection(const Schema& delta_schema, std::size_t bottleneck, std::uint64_t seed);

/// Graph form: flat delta [1, n] -> projected delta [1, n].
Var projection_forward(Graph& g, const Bindings& proj, Var flat_delta);

struct ProjectionTraining {
  ProjectionNet net;
  std::vector<Real> loss_history;  // training KD loss per update
  Real initial_loss = 0;           // eval-mode KD loss on the held batch before training
  Real final_loss = 0;             // same batch after training
};

/// Fits the net so that compose(theta_new0, Proj(source)) matches the
/// teacher compose(theta_old0, source) under kd_loss; only the net trains.
/// UnsupportedKindError for full deltas, ConfigError when kd.beta != 0 or
/// bottleneck == 0.
ProjectionTraining train_projection(const ModelConfig& cfg, const AdaptedWeights& source, const ParamVector& theta_old0,
                                    const ParamVector& theta_new0, const std::vector<Example>& unlabeled,
                                    const std::vector<std::int32_t>& verbalizer, std::size_t bottleneck, const KDConfig& kd,
                                    const OptimConfig& optim);

struct ProjectedWeights {
  AdaptedWeights delta;
  double seconds = 0;  // wall-clock of the forward pass
};

/// ProjectionError when the input schema differs from the training schema.
ProjectedWeights apply_projection(const ProjectionNet& net, const AdaptedWeights& target_old);

// ---------------------------------------------------------------------------
// Distances

/// Euclidean norm of the flattened difference; SchemaError on mismatch.
Real param_distance(const ParamVector& a, const ParamVector& b);
Real param_distance(const AdaptedWeights& delta);

}  // namespace reclab
