// Production kernels. Loops are arranged so the innermost loop runs over
// contiguous memory and vectorizes; outer loops over independent rows or
// heads are distributed with OpenMP.

#include <algorithm>
#include <cmath>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "reclab/kernels.hpp"

namespace reclab::kernels {

namespace {

constexpr Real kInvSqrt2 = Real(0.70710678118654752440);
constexpr Real kInvSqrt2Pi = Real(0.39894228040143267794);

// Work below this many multiply-adds stays on the calling thread.
constexpr std::size_t kParallelGrain = 1 << 15;

void transpose(const Real* src, Real* dst, std::size_t rows, std::size_t cols) {
  constexpr std::size_t tile = 32;
  for (std::size_t r0 = 0; r0 < rows; r0 += tile) {
    for (std::size_t c0 = 0; c0 < cols; c0 += tile) {
      const std::size_t r1 = std::min(rows, r0 + tile);
      const std::size_t c1 = std::min(cols, c0 + tile);
      for (std::size_t r = r0; r < r1; ++r) {
        for (std::size_t c = c0; c < c1; ++c) dst[c * rows + r] = src[r * cols + c];
      }
    }
  }
}

// c[m,n] += a[m,k] * b[k,n], four rows of c at a time.
void gemm_acc(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  const std::size_t blocks = (m + 3) / 4;
#pragma omp parallel for schedule(static) if (m * k * n > kParallelGrain)
  for (std::size_t blk = 0; blk < blocks; ++blk) {
    const std::size_t i = blk * 4;
    if (i + 4 <= m) {
      Real* c0 = c + i * n;
      Real* c1 = c0 + n;
      Real* c2 = c1 + n;
      Real* c3 = c2 + n;
      const Real* a0 = a + i * k;
      const Real* a1 = a0 + k;
      const Real* a2 = a1 + k;
      const Real* a3 = a2 + k;
      for (std::size_t p = 0; p < k; ++p) {
        const Real x0 = a0[p], x1 = a1[p], x2 = a2[p], x3 = a3[p];
        const Real* bp = b + p * n;
#pragma omp simd
        for (std::size_t j = 0; j < n; ++j) {
          const Real bj = bp[j];
          c0[j] += x0 * bj;
          c1[j] += x1 * bj;
          c2[j] += x2 * bj;
          c3[j] += x3 * bj;
        }
      }
    } else {
      for (std::size_t r = i; r < m; ++r) {
        Real* cr = c + r * n;
        const Real* ar = a + r * k;
        for (std::size_t p = 0; p < k; ++p) {
          const Real x = ar[p];
          const Real* bp = b + p * n;
#pragma omp simd
          for (std::size_t j = 0; j < n; ++j) cr[j] += x * bp[j];
        }
      }
    }
  }
}

}  // namespace

void set_num_threads(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

int num_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void matmul(std::span<const Real> a, std::span<const Real> b, std::span<Real> c, std::size_t m, std::size_t k,
            std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(m * n), Real(0));
  gemm_acc(a.data(), b.data(), c.data(), m, k, n);
}

void matmul_nt(std::span<const Real> a, std::span<const Real> b, std::span<Real> c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate) {
  std::vector<Real> bt(k * n);
  transpose(b.data(), bt.data(), n, k);
  matmul(a, bt, c, m, k, n, accumulate);
}

void matmul_tn(std::span<const Real> a, std::span<const Real> b, std::span<Real> c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate) {
  std::vector<Real> at(m * k);
  transpose(a.data(), at.data(), k, m);
  matmul(at, b, c, m, k, n, accumulate);
}

void softmax(std::span<const Real> x, std::span<Real> y, std::size_t outer, std::size_t n, std::size_t inner) {
  const std::size_t lanes = outer * inner;
#pragma omp parallel for schedule(static) if (lanes * n > kParallelGrain)
  for (std::size_t lane = 0; lane < lanes; ++lane) {
    const std::size_t o = lane / inner;
    const std::size_t in = lane % inner;
    const Real* xs = x.data() + o * n * inner + in;
    Real* ys = y.data() + o * n * inner + in;
    Real mx = xs[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, xs[i * inner]);
    Real sum = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const Real e = std::exp(xs[i * inner] - mx);
      ys[i * inner] = e;
      sum += e;
    }
    const Real inv = Real(1) / sum;
    for (std::size_t i = 0; i < n; ++i) ys[i * inner] *= inv;
  }
}

void softmax_backward(std::span<const Real> y, std::span<const Real> dy, std::span<Real> dx, std::size_t outer,
                      std::size_t n, std::size_t inner) {
  const std::size_t lanes = outer * inner;
#pragma omp parallel for schedule(static) if (lanes * n > kParallelGrain)
  for (std::size_t lane = 0; lane < lanes; ++lane) {
    const std::size_t base = (lane / inner) * n * inner + lane % inner;
    Real dot = 0;
    for (std::size_t i = 0; i < n; ++i) dot += y[base + i * inner] * dy[base + i * inner];
    for (std::size_t i = 0; i < n; ++i) dx[base + i * inner] = y[base + i * inner] * (dy[base + i * inner] - dot);
  }
}

void layer_norm(std::span<const Real> x, std::span<const Real> gain, std::span<const Real> bias, std::span<Real> y,
                std::span<Real> mean, std::span<Real> rstd, std::size_t rows, std::size_t n, Real eps) {
#pragma omp parallel for schedule(static) if (rows * n > kParallelGrain)
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = x.data() + r * n;
    Real* yr = y.data() + r * n;
    Real mu = 0;
    for (std::size_t i = 0; i < n; ++i) mu += xr[i];
    mu /= Real(n);
    Real var = 0;
    for (std::size_t i = 0; i < n; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= Real(n);
    const Real rs = Real(1) / std::sqrt(var + eps);
    mean[r] = mu;
    rstd[r] = rs;
#pragma omp simd
    for (std::size_t i = 0; i < n; ++i) yr[i] = (xr[i] - mu) * rs * gain[i] + bias[i];
  }
}

void layer_norm_backward(std::span<const Real> x, std::span<const Real> gain, std::span<const Real> mean,
                         std::span<const Real> rstd, std::span<const Real> dy, std::span<Real> dx,
                         std::span<Real> dgain, std::span<Real> dbias, std::size_t rows, std::size_t n) {
  if (!dx.empty()) {
#pragma omp parallel for schedule(static) if (rows * n > kParallelGrain)
    for (std::size_t r = 0; r < rows; ++r) {
      const Real mu = mean[r];
      const Real rs = rstd[r];
      const Real* xr = x.data() + r * n;
      const Real* dyr = dy.data() + r * n;
      Real sum_g = 0;
      Real sum_gx = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const Real g = dyr[i] * gain[i];
        sum_g += g;
        sum_gx += g * (xr[i] - mu) * rs;
      }
      const Real mg = sum_g / Real(n);
      const Real mgx = sum_gx / Real(n);
      Real* dxr = dx.data() + r * n;
#pragma omp simd
      for (std::size_t i = 0; i < n; ++i) dxr[i] = rs * (dyr[i] * gain[i] - mg - (xr[i] - mu) * rs * mgx);
    }
  }
  if (dgain.empty() && dbias.empty()) return;
  // Column reductions: each thread owns a block of columns and sums rows in order.
  constexpr std::size_t block = 16;
  const std::size_t nblocks = (n + block - 1) / block;
#pragma omp parallel for schedule(static) if (rows * n > kParallelGrain)
  for (std::size_t b = 0; b < nblocks; ++b) {
    const std::size_t c0 = b * block;
    const std::size_t c1 = std::min(n, c0 + block);
    for (std::size_t r = 0; r < rows; ++r) {
      const Real mu = mean[r];
      const Real rs = rstd[r];
      for (std::size_t i = c0; i < c1; ++i) {
        const Real d = dy[r * n + i];
        if (!dgain.empty()) dgain[i] += d * ((x[r * n + i] - mu) * rs);
        if (!dbias.empty()) dbias[i] += d;
      }
    }
  }
}

void gelu(std::span<const Real> x, std::span<Real> y) {
  const std::size_t n = x.size();
#pragma omp parallel for simd schedule(static) if (n > kParallelGrain)
  for (std::size_t i = 0; i < n; ++i) y[i] = Real(0.5) * x[i] * (Real(1) + std::erf(x[i] * kInvSqrt2));
}

void gelu_backward(std::span<const Real> x, std::span<const Real> dy, std::span<Real> dx) {
  const std::size_t n = x.size();
#pragma omp parallel for simd schedule(static) if (n > kParallelGrain)
  for (std::size_t i = 0; i < n; ++i) {
    const Real cdf = Real(0.5) * (Real(1) + std::erf(x[i] * kInvSqrt2));
    const Real pdf = kInvSqrt2Pi * std::exp(Real(-0.5) * x[i] * x[i]);
    dx[i] = dy[i] * (cdf + x[i] * pdf);
  }
}

void attention(std::span<const Real> q, std::span<const Real> k, std::span<const Real> v, std::span<Real> out,
               std::span<Real> probs, std::size_t n_seq, std::size_t seq_len, std::size_t n_heads,
               std::size_t d_model) {
  const std::size_t dh = d_model / n_heads;
  const Real scale = Real(1) / std::sqrt(Real(dh));
  const std::size_t pairs = n_seq * n_heads;
#pragma omp parallel for schedule(static) if (pairs * seq_len * seq_len * dh > kParallelGrain)
  for (std::size_t sh = 0; sh < pairs; ++sh) {
    const std::size_t s = sh / n_heads;
    const std::size_t h = sh % n_heads;
    Real* p = probs.data() + sh * seq_len * seq_len;
    const std::size_t row0 = s * seq_len;
    for (std::size_t i = 0; i < seq_len; ++i) {
      const Real* qi = q.data() + (row0 + i) * d_model + h * dh;
      Real* pi = p + i * seq_len;
      Real mx = -INFINITY;
      for (std::size_t j = 0; j < seq_len; ++j) {
        const Real* kj = k.data() + (row0 + j) * d_model + h * dh;
        Real dot = 0;
#pragma omp simd reduction(+ : dot)
        for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
        pi[j] = dot * scale;
        mx = std::max(mx, pi[j]);
      }
      Real sum = 0;
      for (std::size_t j = 0; j < seq_len; ++j) {
        pi[j] = std::exp(pi[j] - mx);
        sum += pi[j];
      }
      const Real inv = Real(1) / sum;
      for (std::size_t j = 0; j < seq_len; ++j) pi[j] *= inv;
      Real* oi = out.data() + (row0 + i) * d_model + h * dh;
      for (std::size_t c = 0; c < dh; ++c) oi[c] = 0;
      for (std::size_t j = 0; j < seq_len; ++j) {
        const Real w = pi[j];
        const Real* vj = v.data() + (row0 + j) * d_model + h * dh;
#pragma omp simd
        for (std::size_t c = 0; c < dh; ++c) oi[c] += w * vj[c];
      }
    }
  }
}

void attention_backward(std::span<const Real> q, std::span<const Real> k, std::span<const Real> v,
                        std::span<const Real> probs, std::span<const Real> dout, std::span<Real> dq,
                        std::span<Real> dk, std::span<Real> dv, std::size_t n_seq, std::size_t seq_len,
                        std::size_t n_heads, std::size_t d_model) {
  const std::size_t dh = d_model / n_heads;
  const Real scale = Real(1) / std::sqrt(Real(dh));
  const std::size_t pairs = n_seq * n_heads;
#pragma omp parallel for schedule(static) if (pairs * seq_len * seq_len * dh > kParallelGrain)
  for (std::size_t sh = 0; sh < pairs; ++sh) {
    const std::size_t s = sh / n_heads;
    const std::size_t h = sh % n_heads;
    const Real* p = probs.data() + sh * seq_len * seq_len;
    const std::size_t row0 = s * seq_len;
    std::vector<Real> ds(seq_len * seq_len);
    for (std::size_t i = 0; i < seq_len; ++i) {
      const Real* doi = dout.data() + (row0 + i) * d_model + h * dh;
      const Real* pi = p + i * seq_len;
      Real* dsi = ds.data() + i * seq_len;
      Real dot_pd = 0;
      for (std::size_t j = 0; j < seq_len; ++j) {
        const Real* vj = v.data() + (row0 + j) * d_model + h * dh;
        Real dot = 0;
#pragma omp simd reduction(+ : dot)
        for (std::size_t c = 0; c < dh; ++c) dot += doi[c] * vj[c];
        dsi[j] = dot;
        dot_pd += pi[j] * dot;
      }
      for (std::size_t j = 0; j < seq_len; ++j) dsi[j] = pi[j] * (dsi[j] - dot_pd) * scale;
    }
    if (!dv.empty()) {
      for (std::size_t j = 0; j < seq_len; ++j) {
        Real* dvj = dv.data() + (row0 + j) * d_model + h * dh;
        for (std::size_t c = 0; c < dh; ++c) dvj[c] = 0;
      }
      for (std::size_t i = 0; i < seq_len; ++i) {
        const Real* doi = dout.data() + (row0 + i) * d_model + h * dh;
        for (std::size_t j = 0; j < seq_len; ++j) {
          const Real w = p[i * seq_len + j];
          Real* dvj = dv.data() + (row0 + j) * d_model + h * dh;
#pragma omp simd
          for (std::size_t c = 0; c < dh; ++c) dvj[c] += w * doi[c];
        }
      }
    }
    if (!dq.empty()) {
      for (std::size_t i = 0; i < seq_len; ++i) {
        Real* dqi = dq.data() + (row0 + i) * d_model + h * dh;
        for (std::size_t c = 0; c < dh; ++c) dqi[c] = 0;
        for (std::size_t j = 0; j < seq_len; ++j) {
          const Real w = ds[i * seq_len + j];
          const Real* kj = k.data() + (row0 + j) * d_model + h * dh;
#pragma omp simd
          for (std::size_t c = 0; c < dh; ++c) dqi[c] += w * kj[c];
        }
      }
    }
    if (!dk.empty()) {
      for (std::size_t j = 0; j < seq_len; ++j) {
        Real* dkj = dk.data() + (row0 + j) * d_model + h * dh;
        for (std::size_t c = 0; c < dh; ++c) dkj[c] = 0;
      }
      for (std::size_t i = 0; i < seq_len; ++i) {
        const Real* qi = q.data() + (row0 + i) * d_model + h * dh;
        for (std::size_t j = 0; j < seq_len; ++j) {
          const Real w = ds[i * seq_len + j];
          Real* dkj = dk.data() + (row0 + j) * d_model + h * dh;
#pragma omp simd
          for (std::size_t c = 0; c < dh; ++c) dkj[c] += w * qi[c];
        }
      }
    }
  }
}

}  // namespace reclab::kernels
