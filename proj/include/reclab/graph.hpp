#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "reclab/tensor.hpp"

namespace reclab {

/// Handle to a node of a Graph.
struct Var {
  std::int32_t id = -1;
  bool valid() const noexcept { return id >= 0; }
  bool operator==(const Var&) const = default;
};

enum class Op : std::uint8_t {
  leaf,
  matmul,
  matmul_nt,
  add,
  sub,
  mul,
  scale,
  weighted_sum,
  add_row,
  gelu,
  layer_norm,
  softmax,
  log_softmax,
  embedding,
  gather_rows,
  select_columns,
  attention,
  dropout,
  row_normalize,
  reshape,
  slice,
  sum,
  mean,
  cross_entropy,
  kl_divergence,
  mse,
};

const char* op_name(Op op);

struct GraphOptions {
  /// Debug evaluation: every node output is checked and a non-finite value
  /// raises NumericError naming the node.
  bool check_finite = false;
};

/// Result of Graph::backward: one gradient per node that requires grad.
class Gradients {
 public:
  bool has(Var v) const;
  const Tensor* find(Var v) const;
  const Tensor& at(Var v) const;
  std::size_t count() const;

 private:
  friend class Graph;
  std::vector<std::optional<Tensor>> grads_;
};

/// Append-only tape of tensor operations with reverse-mode differentiation.
///
/// Inputs always precede outputs, so the tape is acyclic by construction and
/// backward is a single reverse sweep. A node requires grad when it is a
/// trainable leaf or depends on one; constants and frozen leaves still pass
/// gradients through to whatever else their consumers depend on.
class Graph {
 public:
  explicit Graph(GraphOptions options = {});

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  Op op(Var v) const;
  std::span<const std::int32_t> inputs(Var v) const;
  std::size_t size() const noexcept { return nodes_.size(); }

  Var matmul(Var a, Var b);     // [m,k] x [k,n]
  Var matmul_nt(Var a, Var b);  // [m,k] x [n,k]^T
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, Real s);
  Var weighted_sum(Var a, Real wa, Var b, Real wb);  // wa*a + wb*b
  Var add_row(Var x, Var bias);                      // [m,n] + [n] broadcast over rows
  Var gelu(Var x);
  Var layer_norm(Var x, Var gain, Var bias, Real eps = Real(1e-5));
  Var softmax(Var x, int axis = -1);
  Var log_softmax(Var x);  // over the last axis
  Var embedding(Var table, std::vector<std::int32_t> ids);
  Var gather_rows(Var x, std::vector<std::size_t> rows);
  Var select_columns(Var x, std::vector<std::size_t> cols);
  /// Multi-head self-attention over n_seq sequences stacked along rows.
  Var attention(Var q, Var k, Var v, std::size_t n_seq, std::size_t seq_len, std::size_t n_heads);
  /// Attention weights cached by an attention node: [n_seq, n_heads, seq_len, seq_len].
  const Tensor& attention_probs(Var attention_node) const;
  Var dropout(Var x, Real rate, std::uint64_t seed);
  Var row_normalize(Var x);  // each row scaled to unit L2 norm
  Var reshape(Var x, Shape shape);
  Var slice(Var x, std::size_t offset, Shape shape);  // contiguous range of the flattened input
  Var sum(Var x);
  Var mean(Var x);

  /// Mean over rows of -log softmax(logits)[row, target].
  Var cross_entropy(Var logits, std::vector<std::int32_t> targets);
  /// Mean over rows of KL(p || q) given log q. The teacher distribution is a
  /// constant; probabilities are floored at 1e-12 inside the log.
  Var kl_divergence(const Tensor& p_teacher, Var log_q);
  /// Mean over rows of the squared L2 distance between rows of a and b.
  Var mse(Var a, Var b);

  /// Reverse sweep from a single-element root.
  Gradients backward(Var root) const;

 private:
  struct Node {
    Op op = Op::leaf;
    std::vector<std::int32_t> inputs;
    Tensor value;
    bool requires_grad = false;
    Tensor aux;                        // op-specific cache (softmax output, dropout mask, ...)
    Tensor aux2;
    std::vector<std::int64_t> index;   // ids / rows / columns / targets
    Real a = 0;
    Real b = 0;
    std::size_t d0 = 0, d1 = 0, d2 = 0;
  };

  const Node& node(Var v) const;
  Var push(Node node);
  void backprop(std::size_t id, std::vector<std::optional<Tensor>>& grads) const;

  GraphOptions options_;
  std::vector<Node> nodes_;
};

}  // namespace reclab
