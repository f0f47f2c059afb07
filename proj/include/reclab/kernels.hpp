#pragma once

#include <cstddef>
#include <span>

#include "reclab/tensor.hpp"

// Dense numerical kernels behind the autodiff graph.
//
// Every kernel exists twice with identical signatures: `kernels::serial` is a
// plain loop-nest reference kept for testing, `kernels` is the production
// version (blocked, vectorizable, OpenMP-parallel over independent rows or
// heads). Parallel kernels never split a reduction across threads, so their
// results do not depend on the thread count.
//
// All matrices are row-major. `accumulate` selects c += ... instead of c = ...
namespace reclab::kernels {

#define RECLAB_KERNEL_DECLS                                                                             \
  /* c[m,n] (+)= a[m,k] * b[k,n] */                                                                     \
  void matmul(std::span<const Real> a, std::span<const Real> b, std::span<Real> c, std::size_t m,       \
              std::size_t k, std::size_t n, bool accumulate = false);                                   \
  /* c[m,n] (+)= a[m,k] * b[n,k]^T */                                                                   \
  void matmul_nt(std::span<const Real> a, std::span<const Real> b, std::span<Real> c, std::size_t m,    \
                 std::size_t k, std::size_t n, bool accumulate = false);                                \
  /* c[m,n] (+)= a[k,m]^T * b[k,n] */                                                                   \
  void matmul_tn(std::span<const Real> a, std::span<const Real> b, std::span<Real> c, std::size_t m,    \
                 std::size_t k, std::size_t n, bool accumulate = false);                                \
  /* softmax over the middle axis of a [outer, n, inner] layout */                                      \
  void softmax(std::span<const Real> x, std::span<Real> y, std::size_t outer, std::size_t n,            \
               std::size_t inner);                                                                      \
  void softmax_backward(std::span<const Real> y, std::span<const Real> dy, std::span<Real> dx,          \
                        std::size_t outer, std::size_t n, std::size_t inner);                           \
  void layer_norm(std::span<const Real> x, std::span<const Real> gain, std::span<const Real> bias,      \
                  std::span<Real> y, std::span<Real> mean, std::span<Real> rstd, std::size_t rows,      \
                  std::size_t n, Real eps);                                                             \
  /* dx is overwritten; dgain/dbias are accumulated (either may be empty) */                            \
  void layer_norm_backward(std::span<const Real> x, std::span<const Real> gain,                         \
                           std::span<const Real> mean, std::span<const Real> rstd,                      \
                           std::span<const Real> dy, std::span<Real> dx, std::span<Real> dgain,         \
                           std::span<Real> dbias, std::size_t rows, std::size_t n);                     \
  void gelu(std::span<const Real> x, std::span<Real> y);                                                \
  void gelu_backward(std::span<const Real> x, std::span<const Real> dy, std::span<Real> dx);            \
  /* Bidirectional multi-head attention over n_seq independent sequences of seq_len rows each.      */  \
  /* q, k, v, out: [n_seq*seq_len, d_model]; probs: [n_seq, n_heads, seq_len, seq_len].             */  \
  void attention(std::span<const Real> q, std::span<const Real> k, std::span<const Real> v,             \
                 std::span<Real> out, std::span<Real> probs, std::size_t n_seq, std::size_t seq_len,    \
                 std::size_t n_heads, std::size_t d_model);                                             \
  /* dq, dk, dv are overwritten; empty spans skip that gradient */                                      \
  void attention_backward(std::span<const Real> q, std::span<const Real> k, std::span<const Real> v,    \
                          std::span<const Real> probs, std::span<const Real> dout, std::span<Real> dq,  \
                          std::span<Real> dk, std::span<Real> dv, std::size_t n_seq,                    \
                          std::size_t seq_len, std::size_t n_heads, std::size_t d_model);

RECLAB_KERNEL_DECLS

namespace serial {
RECLAB_KERNEL_DECLS
}  // namespace serial

#undef RECLAB_KERNEL_DECLS

/// Sets the OpenMP thread count used by the parallel kernels (no-op without OpenMP).
void set_num_threads(int n);
int num_threads();

}  // namespace reclab::kernels
