#include "reclab/graph.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "reclab/errors.hpp"
#include "reclab/kernels.hpp"
#include "reclab/rng.hpp"

namespace reclab {

namespace {

constexpr Real kProbFloor = Real(1e-12);
constexpr Real kNormEps = Real(1e-24);

std::size_t leading_rows(const Tensor& t) { return t.rank() >= 2 ? t.dim(0) : 1; }

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got shape " +
                         shape_string(t.shape()));
  }
}

void add_into(Tensor& dst, std::span<const Real> src, Real w = Real(1)) {
  auto d = dst.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += w * src[i];
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::matmul: return "matmul";
    case Op::matmul_nt: return "matmul_nt";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::scale: return "scale";
    case Op::weighted_sum: return "weighted_sum";
    case Op::add_row: return "add_row";
    case Op::gelu: return "gelu";
    case Op::layer_norm: return "layer_norm";
    case Op::softmax: return "softmax";
    case Op::log_softmax: return "log_softmax";
    case Op::embedding: return "embedding";
    case Op::gather_rows: return "gather_rows";
    case Op::select_columns: return "select_columns";
    case Op::attention: return "attention";
    case Op::dropout: return "dropout";
    case Op::row_normalize: return "row_normalize";
    case Op::reshape: return "reshape";
    case Op::slice: return "slice";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::cross_entropy: return "cross_entropy";
    case Op::kl_divergence: return "kl_divergence";
    case Op::mse: return "mse";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Gradients

bool Gradients::has(Var v) const {
  return v.id >= 0 && static_cast<std::size_t>(v.id) < grads_.size() && grads_[v.id].has_value();
}

const Tensor* Gradients::find(Var v) const { return has(v) ? &*grads_[v.id] : nullptr; }

const Tensor& Gradients::at(Var v) const {
  if (!has(v)) throw UsageError("no gradient recorded for node " + std::to_string(v.id));
  return *grads_[v.id];
}

std::size_t Gradients::count() const {
  return static_cast<std::size_t>(std::count_if(grads_.begin(), grads_.end(), [](const auto& g) { return g.has_value(); }));
}

// ---------------------------------------------------------------------------
// Graph construction

Graph::Graph(GraphOptions options) : options_(options) { nodes_.reserve(256); }

const Graph::Node& Graph::node(Var v) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw UsageError("invalid graph node id " + std::to_string(v.id));
  }
  return nodes_[v.id];
}

Var Graph::push(Node n) {
  const auto id = static_cast<std::int32_t>(nodes_.size());
  if (options_.check_finite && !n.value.all_finite()) {
    throw NumericError("node " + std::to_string(id) + " (" + op_name(n.op) + ") produced a non-finite value");
  }
  if (n.op != Op::leaf) {
    n.requires_grad = std::any_of(n.inputs.begin(), n.inputs.end(),
                                  [this](std::int32_t in) { return nodes_[in].requires_grad; });
  }
  nodes_.push_back(std::move(n));
  return Var{id};
}

Var Graph::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.op = Op::leaf;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

const Tensor& Graph::value(Var v) const { return node(v).value; }
bool Graph::requires_grad(Var v) const { return node(v).requires_grad; }
Op Graph::op(Var v) const { return node(v).op; }
std::span<const std::int32_t> Graph::inputs(Var v) const { return node(v).inputs; }

Var Graph::matmul(Var a, Var b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require_rank(A, 2, "matmul", "lhs");
  require_rank(B, 2, "matmul", "rhs");
  if (A.dim(1) != B.dim(0)) {
    throw DimensionError("matmul: inner dimensions differ " + shape_string(A.shape()) + " x " + shape_string(B.shape()));
  }
  Node n;
  n.op = Op::matmul;
  n.inputs = {a.id, b.id};
  n.value = Tensor(Shape{A.dim(0), B.dim(1)});
  kernels::matmul(A.values(), B.values(), n.value.values(), A.dim(0), A.dim(1), B.dim(1));
  return push(std::move(n));
}

Var Graph::matmul_nt(Var a, Var b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require_rank(A, 2, "matmul_nt", "lhs");
  require_rank(B, 2, "matmul_nt", "rhs");
  if (A.dim(1) != B.dim(1)) {
    throw DimensionError("matmul_nt: inner dimensions differ " + shape_string(A.shape()) + " x " +
                         shape_string(B.shape()) + "^T");
  }
  Node n;
  n.op = Op::matmul_nt;
  n.inputs = {a.id, b.id};
  n.value = Tensor(Shape{A.dim(0), B.dim(0)});
  kernels::matmul_nt(A.values(), B.values(), n.value.values(), A.dim(0), A.dim(1), B.dim(0));
  return push(std::move(n));
}

Var Graph::add(Var a, Var b) { return weighted_sum(a, Real(1), b, Real(1)); }
Var Graph::sub(Var a, Var b) { return weighted_sum(a, Real(1), b, Real(-1)); }

Var Graph::weighted_sum(Var a, Real wa, Var b, Real wb) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require_same_shape(A, B, "weighted_sum");
  Node n;
  n.op = (wa == Real(1) && wb == Real(1)) ? Op::add : (wa == Real(1) && wb == Real(-1)) ? Op::sub : Op::weighted_sum;
  n.inputs = {a.id, b.id};
  n.a = wa;
  n.b = wb;
  n.value = Tensor(A.shape());
  auto out = n.value.values();
  auto av = A.values();
  auto bv = B.values();
  if (n.op == Op::add) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  } else if (n.op == Op::sub) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = wa * av[i] + wb * bv[i];
  }
  return push(std::move(n));
}

Var Graph::mul(Var a, Var b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require_same_shape(A, B, "mul");
  Node n;
  n.op = Op::mul;
  n.inputs = {a.id, b.id};
  n.value = Tensor(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) n.value[i] = A[i] * B[i];
  return push(std::move(n));
}

Var Graph::scale(Var a, Real s) {
  const Tensor& A = value(a);
  Node n;
  n.op = Op::scale;
  n.inputs = {a.id};
  n.a = s;
  n.value = Tensor(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) n.value[i] = s * A[i];
  return push(std::move(n));
}

Var Graph::add_row(Var x, Var bias) {
  const Tensor& X = value(x);
  const Tensor& B = value(bias);
  require_rank(X, 2, "add_row", "input");
  require_rank(B, 1, "add_row", "bias");
  if (B.dim(0) != X.dim(1)) {
    throw DimensionError("add_row: bias " + shape_string(B.shape()) + " does not match rows of " + shape_string(X.shape()));
  }
  Node n;
  n.op = Op::add_row;
  n.inputs = {x.id, bias.id};
  n.value = X;
  const std::size_t cols = X.dim(1);
  auto out = n.value.values();
  for (std::size_t r = 0; r < X.dim(0); ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += B[c];
  }
  return push(std::move(n));
}

Var Graph::gelu(Var x) {
  const Tensor& X = value(x);
  Node n;
  n.op = Op::gelu;
  n.inputs = {x.id};
  n.value = Tensor(X.shape());
  kernels::gelu(X.values(), n.value.values());
  return push(std::move(n));
}

Var Graph::layer_norm(Var x, Var gain, Var bias, Real eps) {
  if (eps < 0) throw InputError("layer_norm: eps must be non-negative");
  const Tensor& X = value(x);
  const Tensor& G = value(gain);
  const Tensor& B = value(bias);
  if (X.rank() < 1 || X.rank() > 2) throw DimensionError("layer_norm: input must be rank 1 or 2, got " + shape_string(X.shape()));
  const std::size_t cols = X.cols();
  if (G.shape() != Shape{cols} || B.shape() != Shape{cols}) {
    throw DimensionError("layer_norm: gain " + shape_string(G.shape()) + " / bias " + shape_string(B.shape()) +
                         " do not match input " + shape_string(X.shape()));
  }
  const std::size_t rows = X.rows();
  Node n;
  n.op = Op::layer_norm;
  n.inputs = {x.id, gain.id, bias.id};
  n.value = Tensor(X.shape());
  n.aux = Tensor(Shape{rows});
  n.aux2 = Tensor(Shape{rows});
  kernels::layer_norm(X.values(), G.values(), B.values(), n.value.values(), n.aux.values(), n.aux2.values(), rows,
                      cols, eps);
  return push(std::move(n));
}

Var Graph::softmax(Var x, int axis) {
  const Tensor& X = value(x);
  if (X.rank() == 0) throw DimensionError("softmax: input must have rank >= 1");
  const int rank = static_cast<int>(X.rank());
  const int ax = axis < 0 ? axis + rank : axis;
  if (ax < 0 || ax >= rank) throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for shape " + shape_string(X.shape()));
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= X.dim(i);
  for (int i = ax + 1; i < rank; ++i) inner *= X.dim(i);
  Node n;
  n.op = Op::softmax;
  n.inputs = {x.id};
  n.d0 = outer;
  n.d1 = X.dim(ax);
  n.d2 = inner;
  n.value = Tensor(X.shape());
  kernels::softmax(X.values(), n.value.values(), outer, n.d1, inner);
  return push(std::move(n));
}

Var Graph::log_softmax(Var x) {
  const Tensor& X = value(x);
  if (X.rank() == 0 || X.rank() > 2) throw DimensionError("log_softmax: input must be rank 1 or 2, got " + shape_string(X.shape()));
  const std::size_t rows = X.rows();
  const std::size_t cols = X.cols();
  Node n;
  n.op = Op::log_softmax;
  n.inputs = {x.id};
  n.aux = Tensor(X.shape());
  kernels::softmax(X.values(), n.aux.values(), rows, cols, 1);
  n.value = Tensor(X.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = X.values().data() + r * cols;
    Real mx = xr[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
    Real s = 0;
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(xr[c] - mx);
    const Real lse = mx + std::log(s);
    for (std::size_t c = 0; c < cols; ++c) n.value[r * cols + c] = xr[c] - lse;
  }
  return push(std::move(n));
}

Var Graph::embedding(Var table, std::vector<std::int32_t> ids) {
  const Tensor& T = value(table);
  require_rank(T, 2, "embedding", "table");
  if (ids.empty()) throw InputError("embedding: empty id list");
  const std::size_t d = T.dim(1);
  Node n;
  n.op = Op::embedding;
  n.inputs = {table.id};
  n.value = Tensor(Shape{ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= T.dim(0)) {
      throw InputError("embedding: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(T.dim(0)) + " rows");
    }
    std::copy_n(T.values().data() + static_cast<std::size_t>(ids[i]) * d, d, n.value.values().data() + i * d);
  }
  n.index.assign(ids.begin(), ids.end());
  return push(std::move(n));
}

Var Graph::gather_rows(Var x, std::vector<std::size_t> rows) {
  const Tensor& X = value(x);
  require_rank(X, 2, "gather_rows", "input");
  if (rows.empty()) throw InputError("gather_rows: empty row list");
  const std::size_t d = X.dim(1);
  Node n;
  n.op = Op::gather_rows;
  n.inputs = {x.id};
  n.value = Tensor(Shape{rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= X.dim(0)) throw InputError("gather_rows: row " + std::to_string(rows[i]) + " out of range for " + shape_string(X.shape()));
    std::copy_n(X.values().data() + rows[i] * d, d, n.value.values().data() + i * d);
  }
  n.index.assign(rows.begin(), rows.end());
  return push(std::move(n));
}

Var Graph::select_columns(Var x, std::vector<std::size_t> cols) {
  const Tensor& X = value(x);
  require_rank(X, 2, "select_columns", "input");
  if (cols.empty()) throw InputError("select_columns: empty column list");
  const std::size_t m = X.dim(0);
  const std::size_t w = X.dim(1);
  Node n;
  n.op = Op::select_columns;
  n.inputs = {x.id};
  n.value = Tensor(Shape{m, cols.size()});
  for (std::size_t c = 0; c < cols.size(); ++c) {
    if (cols[c] >= w) throw InputError("select_columns: column " + std::to_string(cols[c]) + " out of range for " + shape_string(X.shape()));
  }
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < cols.size(); ++c) n.value[r * cols.size() + c] = X[r * w + cols[c]];
  }
  n.index.assign(cols.begin(), cols.end());
  return push(std::move(n));
}

Var Graph::attention(Var q, Var k, Var v, std::size_t n_seq, std::size_t seq_len, std::size_t n_heads) {
  const Tensor& Q = value(q);
  const Tensor& K = value(k);
  const Tensor& V = value(v);
  require_rank(Q, 2, "attention", "queries");
  require_same_shape(Q, K, "attention");
  require_same_shape(Q, V, "attention");
  const std::size_t d = Q.dim(1);
  if (n_heads == 0 || d % n_heads != 0) throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(n_heads) + " heads");
  if (n_seq * seq_len != Q.dim(0)) {
    throw DimensionError("attention: " + std::to_string(n_seq) + " x " + std::to_string(seq_len) + " rows expected, input is " + shape_string(Q.shape()));
  }
  Node n;
  n.op = Op::attention;
  n.inputs = {q.id, k.id, v.id};
  n.d0 = n_seq;
  n.d1 = seq_len;
  n.d2 = n_heads;
  n.value = Tensor(Q.shape());
  n.aux = Tensor(Shape{n_seq, n_heads, seq_len, seq_len});
  kernels::attention(Q.values(), K.values(), V.values(), n.value.values(), n.aux.values(), n_seq, seq_len, n_heads, d);
  return push(std::move(n));
}

const Tensor& Graph::attention_probs(Var attention_node) const {
  const Node& n = node(attention_node);
  if (n.op != Op::attention) throw UsageError("attention_probs: node " + std::to_string(attention_node.id) + " is " + op_name(n.op));
  return n.aux;
}

Var Graph::dropout(Var x, Real rate, std::uint64_t seed) {
  if (rate < 0 || rate >= 1) throw InputError("dropout: rate must be in [0, 1)");
  const Tensor& X = value(x);
  Node n;
  n.op = Op::dropout;
  n.inputs = {x.id};
  n.aux = Tensor(X.shape());
  Rng rng(seed);
  const Real keep = Real(1) - rate;
  for (std::size_t i = 0; i < X.size(); ++i) n.aux[i] = rng.uniform() < rate ? Real(0) : Real(1) / keep;
  n.value = Tensor(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) n.value[i] = X[i] * n.aux[i];
  return push(std::move(n));
}

Var Graph::row_normalize(Var x) {
  const Tensor& X = value(x);
  if (X.rank() == 0 || X.rank() > 2) throw DimensionError("row_normalize: input must be rank 1 or 2, got " + shape_string(X.shape()));
  const std::size_t rows = X.rows();
  const std::size_t cols = X.cols();
  Node n;
  n.op = Op::row_normalize;
  n.inputs = {x.id};
  n.aux = Tensor(Shape{rows});  // per-row norm
  n.value = Tensor(X.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    Real s = 0;
    for (std::size_t c = 0; c < cols; ++c) s += X[r * cols + c] * X[r * cols + c];
    const Real norm = std::sqrt(s + kNormEps);
    n.aux[r] = norm;
    for (std::size_t c = 0; c < cols; ++c) n.value[r * cols + c] = X[r * cols + c] / norm;
  }
  return push(std::move(n));
}

Var Graph::reshape(Var x, Shape shape) {
  Node n;
  n.op = Op::reshape;
  n.inputs = {x.id};
  n.value = value(x).reshaped(std::move(shape));
  return push(std::move(n));
}

Var Graph::slice(Var x, std::size_t offset, Shape shape) {
  const Tensor& X = value(x);
  const std::size_t len = shape_size(shape);
  if (offset + len > X.size()) {
    throw DimensionError("slice: range [" + std::to_string(offset) + ", " + std::to_string(offset + len) + ") exceeds " + shape_string(X.shape()));
  }
  Node n;
  n.op = Op::slice;
  n.inputs = {x.id};
  n.d0 = offset;
  std::vector<Real> vals(X.values().begin() + static_cast<std::ptrdiff_t>(offset),
                         X.values().begin() + static_cast<std::ptrdiff_t>(offset + len));
  n.value = Tensor(std::move(shape), std::move(vals));
  return push(std::move(n));
}

Var Graph::sum(Var x) {
  const Tensor& X = value(x);
  Node n;
  n.op = Op::sum;
  n.inputs = {x.id};
  Real s = 0;
  for (Real v : X.values()) s += v;
  n.value = Tensor::scalar(s);
  return push(std::move(n));
}

Var Graph::mean(Var x) {
  const Tensor& X = value(x);
  Node n;
  n.op = Op::mean;
  n.inputs = {x.id};
  Real s = 0;
  for (Real v : X.values()) s += v;
  n.value = Tensor::scalar(s / Real(X.size()));
  return push(std::move(n));
}

Var Graph::cross_entropy(Var logits, std::vector<std::int32_t> targets) {
  const Tensor& X = value(logits);
  if (X.rank() == 0 || X.rank() > 2) throw DimensionError("cross_entropy: logits must be rank 1 or 2, got " + shape_string(X.shape()));
  const std::size_t rows = X.rows();
  const std::size_t cols = X.cols();
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " + shape_string(X.shape()));
  }
  Node n;
  n.op = Op::cross_entropy;
  n.inputs = {logits.id};
  n.aux = Tensor(X.shape());
  kernels::softmax(X.values(), n.aux.values(), rows, cols, 1);
  Real total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= cols) {
      throw InputError("cross_entropy: target " + std::to_string(targets[r]) + " outside " + std::to_string(cols) + " classes");
    }
    const Real* xr = X.values().data() + r * cols;
    Real mx = xr[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
    Real s = 0;
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(xr[c] - mx);
    total += mx + std::log(s) - xr[targets[r]];
  }
  n.value = Tensor::scalar(total / Real(rows));
  n.index.assign(targets.begin(), targets.end());
  return push(std::move(n));
}

Var Graph::kl_divergence(const Tensor& p_teacher, Var log_q) {
  const Tensor& L = value(log_q);
  require_same_shape(p_teacher, L, "kl_divergence");
  if (L.rank() == 0 || L.rank() > 2) throw DimensionError("kl_divergence: inputs must be rank 1 or 2, got " + shape_string(L.shape()));
  const std::size_t rows = L.rows();
  const std::size_t cols = L.cols();
  Real total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    Real mass = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      const Real p = p_teacher[r * cols + c];
      if (!(p >= 0)) throw InputError("kl_divergence: teacher probability " + std::to_string(p) + " is negative or NaN");
      mass += p;
    }
    if (std::fabs(mass - Real(1)) > Real(1e-9)) {
      throw InputError("kl_divergence: teacher row " + std::to_string(r) + " sums to " + std::to_string(mass));
    }
    for (std::size_t c = 0; c < cols; ++c) {
      const Real p = p_teacher[r * cols + c];
      if (p == 0) continue;
      total += p * (std::log(std::max(p, kProbFloor)) - L[r * cols + c]);
    }
  }
  Node n;
  n.op = Op::kl_divergence;
  n.inputs = {log_q.id};
  n.aux = p_teacher;
  n.value = Tensor::scalar(total / Real(rows));
  return push(std::move(n));
}

Var Graph::mse(Var a, Var b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require_same_shape(A, B, "mse");
  const std::size_t rows = leading_rows(A);
  Real s = 0;
  for (std::size_t i = 0; i < A.size(); ++i) s += (A[i] - B[i]) * (A[i] - B[i]);
  Node n;
  n.op = Op::mse;
  n.inputs = {a.id, b.id};
  n.value = Tensor::scalar(s / Real(rows));
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Reverse sweep

Gradients Graph::backward(Var root) const {
  const Node& r = node(root);
  if (r.value.size() != 1) {
    throw UsageError("backward: root node " + std::to_string(root.id) + " has shape " + shape_string(r.value.shape()) +
                     ", expected a scalar");
  }
  Gradients out;
  out.grads_.resize(nodes_.size());
  if (!r.requires_grad) return out;
  out.grads_[root.id] = Tensor::full(r.value.shape(), Real(1));
  for (std::size_t id = static_cast<std::size_t>(root.id) + 1; id-- > 0;) {
    if (!out.grads_[id] || !nodes_[id].requires_grad) continue;
    backprop(id, out.grads_);
  }
  return out;
}

void Graph::backprop(std::size_t id, std::vector<std::optional<Tensor>>& grads) const {
  const Node& n = nodes_[id];
  const Tensor& g = *grads[id];
  auto wants = [&](std::size_t slot) { return nodes_[n.inputs[slot]].requires_grad; };
  auto grad_of = [&](std::size_t slot) -> Tensor& {
    auto& dst = grads[n.inputs[slot]];
    if (!dst) dst = Tensor(nodes_[n.inputs[slot]].value.shape());
    return *dst;
  };
  auto in = [&](std::size_t slot) -> const Tensor& { return nodes_[n.inputs[slot]].value; };

  switch (n.op) {
    case Op::leaf:
      break;
    case Op::matmul: {
      const Tensor& A = in(0);
      const Tensor& B = in(1);
      const std::size_t m = A.dim(0), k = A.dim(1), nn = B.dim(1);
      if (wants(0)) kernels::matmul_nt(g.values(), B.values(), grad_of(0).values(), m, nn, k, true);
      if (wants(1)) kernels::matmul_tn(A.values(), g.values(), grad_of(1).values(), k, m, nn, true);
      break;
    }
    case Op::matmul_nt: {
      const Tensor& A = in(0);
      const Tensor& B = in(1);
      const std::size_t m = A.dim(0), k = A.dim(1), nn = B.dim(0);
      if (wants(0)) kernels::matmul(g.values(), B.values(), grad_of(0).values(), m, nn, k, true);
      if (wants(1)) kernels::matmul_tn(g.values(), A.values(), grad_of(1).values(), nn, m, k, true);
      break;
    }
    case Op::add:
    case Op::sub:
    case Op::weighted_sum:
      if (wants(0)) add_into(grad_of(0), g.values(), n.a);
      if (wants(1)) add_into(grad_of(1), g.values(), n.b);
      break;
    case Op::mul: {
      if (wants(0)) {
        Tensor& d = grad_of(0);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * in(1)[i];
      }
      if (wants(1)) {
        Tensor& d = grad_of(1);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * in(0)[i];
      }
      break;
    }
    case Op::scale:
      if (wants(0)) add_into(grad_of(0), g.values(), n.a);
      break;
    case Op::add_row: {
      if (wants(0)) add_into(grad_of(0), g.values());
      if (wants(1)) {
        Tensor& d = grad_of(1);
        const std::size_t cols = g.dim(1);
        for (std::size_t r = 0; r < g.dim(0); ++r) {
          for (std::size_t c = 0; c < cols; ++c) d[c] += g[r * cols + c];
        }
      }
      break;
    }
    case Op::gelu: {
      if (!wants(0)) break;
      std::vector<Real> dx(g.size());
      kernels::gelu_backward(in(0).values(), g.values(), dx);
      add_into(grad_of(0), dx);
      break;
    }
    case Op::layer_norm: {
      const Tensor& X = in(0);
      const std::size_t rows = X.rows(), cols = X.cols();
      std::vector<Real> dx;
      if (wants(0)) dx.resize(X.size());
      std::span<Real> dgain = wants(1) ? grad_of(1).values() : std::span<Real>{};
      std::span<Real> dbias = wants(2) ? grad_of(2).values() : std::span<Real>{};
      kernels::layer_norm_backward(X.values(), in(1).values(), n.aux.values(), n.aux2.values(), g.values(), dx, dgain,
                                   dbias, rows, cols);
      if (wants(0)) add_into(grad_of(0), dx);
      break;
    }
    case Op::softmax: {
      if (!wants(0)) break;
      std::vector<Real> dx(g.size());
      kernels::softmax_backward(n.value.values(), g.values(), dx, n.d0, n.d1, n.d2);
      add_into(grad_of(0), dx);
      break;
    }
    case Op::log_softmax: {
      if (!wants(0)) break;
      Tensor& d = grad_of(0);
      const std::size_t rows = g.rows(), cols = g.cols();
      for (std::size_t r = 0; r < rows; ++r) {
        Real s = 0;
        for (std::size_t c = 0; c < cols; ++c) s += g[r * cols + c];
        for (std::size_t c = 0; c < cols; ++c) d[r * cols + c] += g[r * cols + c] - n.aux[r * cols + c] * s;
      }
      break;
    }
    case Op::embedding: {
      if (!wants(0)) break;
      Tensor& d = grad_of(0);
      const std::size_t w = g.dim(1);
      for (std::size_t i = 0; i < n.index.size(); ++i) {
        Real* dst = d.values().data() + static_cast<std::size_t>(n.index[i]) * w;
        const Real* src = g.values().data() + i * w;
        for (std::size_t c = 0; c < w; ++c) dst[c] += src[c];
      }
      break;
    }
    case Op::gather_rows: {
      if (!wants(0)) break;
      Tensor& d = grad_of(0);
      const std::size_t w = g.dim(1);
      for (std::size_t i = 0; i < n.index.size(); ++i) {
        Real* dst = d.values().data() + static_cast<std::size_t>(n.index[i]) * w;
        const Real* src = g.values().data() + i * w;
        for (std::size_t c = 0; c < w; ++c) dst[c] += src[c];
      }
      break;
    }
    case Op::select_columns: {
      if (!wants(0)) break;
      Tensor& d = grad_of(0);
      const std::size_t w = in(0).dim(1);
      const std::size_t k = n.index.size();
      for (std::size_t r = 0; r < g.dim(0); ++r) {
        for (std::size_t c = 0; c < k; ++c) d[r * w + static_cast<std::size_t>(n.index[c])] += g[r * k + c];
      }
      break;
    }
    case Op::attention: {
      const Tensor& Q = in(0);
      const std::size_t sz = Q.size();
      std::vector<Real> dq(wants(0) ? sz : 0), dk(wants(1) ? sz : 0), dv(wants(2) ? sz : 0);
      kernels::attention_backward(Q.values(), in(1).values(), in(2).values(), n.aux.values(), g.values(), dq, dk, dv,
                                  n.d0, n.d1, n.d2, Q.dim(1));
      if (wants(0)) add_into(grad_of(0), dq);
      if (wants(1)) add_into(grad_of(1), dk);
      if (wants(2)) add_into(grad_of(2), dv);
      break;
    }
    case Op::dropout: {
      if (!wants(0)) break;
      Tensor& d = grad_of(0);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * n.aux[i];
      break;
    }
    case Op::row_normalize: {
      if (!wants(0)) break;
      Tensor& d = grad_of(0);
      const std::size_t rows = g.rows(), cols = g.cols();
      for (std::size_t r = 0; r < rows; ++r) {
        const Real norm = n.aux[r];
        Real dot = 0;
        for (std::size_t c = 0; c < cols; ++c) dot += n.value[r * cols + c] * g[r * cols + c];
        for (std::size_t c = 0; c < cols; ++c) {
          d[r * cols + c] += (g[r * cols + c] - n.value[r * cols + c] * dot) / norm;
        }
      }
      break;
    }
    case Op::reshape:
      if (wants(0)) add_into(grad_of(0), g.values());
      break;
    case Op::slice: {
      if (!wants(0)) break;
      Tensor& d = grad_of(0);
      for (std::size_t i = 0; i < g.size(); ++i) d[n.d0 + i] += g[i];
      break;
    }
    case Op::sum: {
      if (!wants(0)) break;
      Tensor& d = grad_of(0);
      const Real s = g.item();
      for (auto& v : d.values()) v += s;
      break;
    }
    case Op::mean: {
      if (!wants(0)) break;
      Tensor& d = grad_of(0);
      const Real s = g.item() / Real(d.size());
      for (auto& v : d.values()) v += s;
      break;
    }
    case Op::cross_entropy: {
      if (!wants(0)) break;
      Tensor& d = grad_of(0);
      const std::size_t rows = d.rows(), cols = d.cols();
      const Real s = g.item() / Real(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          const Real onehot = static_cast<std::int64_t>(c) == n.index[r] ? Real(1) : Real(0);
          d[r * cols + c] += s * (n.aux[r * cols + c] - onehot);
        }
      }
      break;
    }
    case Op::kl_divergence: {
      if (!wants(0)) break;
      Tensor& d = grad_of(0);
      const Real s = g.item() / Real(d.rows());
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= s * n.aux[i];
      break;
    }
    case Op::mse: {
      const Tensor& A = in(0);
      const Tensor& B = in(1);
      const Real s = Real(2) * g.item() / Real(leading_rows(A));
      if (wants(0)) {
        Tensor& d = grad_of(0);
        for (std::size_t i = 0; i < A.size(); ++i) d[i] += s * (A[i] - B[i]);
      }
      if (wants(1)) {
        Tensor& d = grad_of(1);
        for (std::size_t i = 0; i < A.size(); ++i) d[i] -= s * (A[i] - B[i]);
      }
      break;
    }
  }
}

}  // namespace reclab
