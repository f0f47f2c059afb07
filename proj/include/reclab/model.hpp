#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "reclab/graph.hpp"
#include "reclab/params.hpp"

namespace reclab {

// Reserved token ids shared by the model and the corpus generator.
inline constexpr std::int32_t kPadToken = 0;
inline constexpr std::int32_t kMaskToken = 1;
inline constexpr std::int32_t kClsToken = 2;
inline constexpr std::int32_t kSepToken = 3;

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_model = 128;
  std::size_t d_ff = 512;
  std::size_t vocab_size = 512;
  std::size_t max_seq_len = 64;
  std::size_t adapter_bottleneck = 16;
  Real dropout_rate = Real(0.1);
  std::uint64_t seed = 0;

  /// Throws ConfigError on the first violated constraint.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

Schema backbone_schema(const ModelConfig& cfg);
Schema adapter_schema(const ModelConfig& cfg);

enum class DeltaKind : std::uint8_t { full = 0, adapter = 1 };
const char* delta_kind_name(DeltaKind kind);

/// Task-specific weights: a full displacement from the backbone or a set of
/// adapter modules.
struct AdaptedWeights {
  DeltaKind kind = DeltaKind::full;
  ParamVector segments;
  std::string source_task;
  std::string source_checkpoint;
};

/// Weights ~ truncated normal(0.02), biases zero, layernorm gains one.
ParamVector init_params(const ModelConfig& cfg, std::uint64_t seed);
/// Down projections ~ truncated normal(0.02), up projections zero.
AdaptedWeights init_adapter(const ModelConfig& cfg, std::uint64_t seed);
AdaptedWeights zero_delta(const ModelConfig& cfg, DeltaKind kind);

/// Checks Δ against the config's schema; CompositionError names the segment.
void check_delta_schema(const ModelConfig& cfg, const AdaptedWeights& delta);

/// Deployable parameters: backbone plus displacement, or backbone plus
/// adapter segments routed through every sublayer.
struct EffectiveModel {
  ModelConfig config;
  ParamVector params;
  bool has_adapters = false;
};

EffectiveModel base_model(const ModelConfig& cfg, const ParamVector& theta0);
EffectiveModel compose(const ModelConfig& cfg, const ParamVector& theta0, const AdaptedWeights& delta);

// ---------------------------------------------------------------------------
// Graph-level forward

/// Segment name -> graph node.
class Bindings {
 public:
  void set(const std::string& name, Var v) { vars_[name] = v; }
  Var at(const std::string& name) const;
  bool contains(const std::string& name) const { return vars_.count(name) != 0; }
  const std::map<std::string, Var>& all() const { return vars_; }

 private:
  std::map<std::string, Var> vars_;
};

/// Adds every segment of `params` to the graph as a leaf.
void bind(Graph& g, const ParamVector& params, bool trainable, Bindings& into);
Bindings bind(Graph& g, const ParamVector& params, bool trainable);

/// n_seq sequences of seq_len tokens, stacked row-major.
struct TokenBatch {
  std::vector<std::int32_t> tokens;
  std::size_t n_seq = 0;
  std::size_t seq_len = 0;
  std::vector<std::size_t> mask_rows;  // rows into the stacked sequences
};

struct ForwardOptions {
  bool training = false;
  std::uint64_t dropout_seed = 0;
};

struct GraphForward {
  Var masked;                 // final-layernormed states at mask rows [n_mask, d]
  std::vector<Var> hidden;    // residual output of each layer [n_seq*seq_len, d]
  std::vector<Var> attention; // attention nodes, probabilities via Graph::attention_probs
};

GraphForward forward_graph(Graph& g, const ModelConfig& cfg, const Bindings& p, const TokenBatch& batch,
                           const ForwardOptions& opts = {});
/// Tied output head over the full vocabulary [n_mask, V].
Var mlm_logits(Graph& g, const Bindings& p, Var masked);
/// Output head restricted to the verbalizer tokens [n_mask, n_labels].
Var class_logits(Graph& g, const Bindings& p, Var masked, const std::vector<std::int32_t>& verbalizer);

// ---------------------------------------------------------------------------
// Pure evaluation

struct MlmOutput {
  Tensor logits;                          // [n_mask, V]
  std::vector<Tensor> hidden;             // raw h_k
  std::vector<Tensor> hidden_normalized;  // h_k scaled to unit L2 norm per position
  std::vector<Tensor> attention;          // [n_seq, H, S, S] per layer
};

MlmOutput forward_mlm(const EffectiveModel& model, const TokenBatch& batch, const ForwardOptions& opts = {});

/// Attention weights of one head for one sequence [S, S].
Tensor attention_map(const MlmOutput& out, std::size_t seq, std::size_t layer, std::size_t head);

struct Example {
  std::vector<std::int32_t> tokens;  // exactly one kMaskToken
  std::int32_t label = 0;
};

struct Prediction {
  std::int32_t label = 0;
  std::vector<Real> distribution;
};

/// Position of the single mask slot; InputError when absent or repeated.
std::size_t mask_position(const Example& ex);
/// Stacks equal-length examples into one batch with one mask row each.
TokenBatch make_batch(std::span<const Example* const> examples);

Prediction classify(const EffectiveModel& model, const Example& ex, const std::vector<std::int32_t>& verbalizer);
std::vector<Prediction> classify_batch(const EffectiveModel& model, std::span<const Example> examples,
                                       const std::vector<std::int32_t>& verbalizer);
/// Argmax with ties to the lowest label.
std::int32_t argmax_label(std::span<const Real> scores);

/// finite_diff_check over the segments of a ParamVector.
Real finite_diff_check(const std::function<Var(Graph&, const Bindings&)>& f, const ParamVector& theta,
                       Real h = Real(1e-5));

}  // namespace reclab
