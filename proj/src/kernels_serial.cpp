// Reference kernels: straightforward loop nests, one output element at a time.

#include <algorithm>
#include <cmath>
#include <vector>

#include "reclab/kernels.hpp"

namespace reclab::kernels::serial {

namespace {
constexpr Real kInvSqrt2 = Real(0.70710678118654752440);
constexpr Real kInvSqrt2Pi = Real(0.39894228040143267794);
}  // namespace

void matmul(std::span<const Real> a, std::span<const Real> b, std::span<Real> c, std::size_t m, std::size_t k,
            std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      Real s = 0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
  }
}

void matmul_nt(std::span<const Real> a, std::span<const Real> b, std::span<Real> c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      Real s = 0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[j * k + p];
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
  }
}

void matmul_tn(std::span<const Real> a, std::span<const Real> b, std::span<Real> c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      Real s = 0;
      for (std::size_t p = 0; p < k; ++p) s += a[p * m + i] * b[p * n + j];
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
  }
}

void softmax(std::span<const Real> x, std::span<Real> y, std::size_t outer, std::size_t n, std::size_t inner) {
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      Real mx = x[base];
      for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[base + i * inner]);
      Real sum = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const Real e = std::exp(x[base + i * inner] - mx);
        y[base + i * inner] = e;
        sum += e;
      }
      for (std::size_t i = 0; i < n; ++i) y[base + i * inner] /= sum;
    }
  }
}

void softmax_backward(std::span<const Real> y, std::span<const Real> dy, std::span<Real> dx, std::size_t outer,
                      std::size_t n, std::size_t inner) {
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      Real dot = 0;
      for (std::size_t i = 0; i < n; ++i) dot += y[base + i * inner] * dy[base + i * inner];
      for (std::size_t i = 0; i < n; ++i) {
        dx[base + i * inner] = y[base + i * inner] * (dy[base + i * inner] - dot);
      }
    }
  }
}

void layer_norm(std::span<const Real> x, std::span<const Real> gain, std::span<const Real> bias, std::span<Real> y,
                std::span<Real> mean, std::span<Real> rstd, std::size_t rows, std::size_t n, Real eps) {
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = x.data() + r * n;
    Real mu = 0;
    for (std::size_t i = 0; i < n; ++i) mu += xr[i];
    mu /= Real(n);
    Real var = 0;
    for (std::size_t i = 0; i < n; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= Real(n);
    const Real rs = Real(1) / std::sqrt(var + eps);
    mean[r] = mu;
    rstd[r] = rs;
    for (std::size_t i = 0; i < n; ++i) y[r * n + i] = (xr[i] - mu) * rs * gain[i] + bias[i];
  }
}

void layer_norm_backward(std::span<const Real> x, std::span<const Real> gain, std::span<const Real> mean,
                         std::span<const Real> rstd, std::span<const Real> dy, std::span<Real> dx,
                         std::span<Real> dgain, std::span<Real> dbias, std::size_t rows, std::size_t n) {
  for (std::size_t r = 0; r < rows; ++r) {
    const Real mu = mean[r];
    const Real rs = rstd[r];
    Real sum_g = 0;
    Real sum_gx = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const Real xhat = (x[r * n + i] - mu) * rs;
      const Real g = dy[r * n + i] * gain[i];
      sum_g += g;
      sum_gx += g * xhat;
      if (!dgain.empty()) dgain[i] += dy[r * n + i] * xhat;
      if (!dbias.empty()) dbias[i] += dy[r * n + i];
    }
    if (dx.empty()) continue;
    for (std::size_t i = 0; i < n; ++i) {
      const Real xhat = (x[r * n + i] - mu) * rs;
      const Real g = dy[r * n + i] * gain[i];
      dx[r * n + i] = rs * (g - sum_g / Real(n) - xhat * sum_gx / Real(n));
    }
  }
}

void gelu(std::span<const Real> x, std::span<Real> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = Real(0.5) * x[i] * (Real(1) + std::erf(x[i] * kInvSqrt2));
}

void gelu_backward(std::span<const Real> x, std::span<const Real> dy, std::span<Real> dx) {
  for (std::size_t i = 0; i < x.size(); ++i) {
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
  for (std::size_t s = 0; s < n_seq; ++s) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      Real* p = probs.data() + (s * n_heads + h) * seq_len * seq_len;
      for (std::size_t i = 0; i < seq_len; ++i) {
        const std::size_t qi = (s * seq_len + i) * d_model + h * dh;
        for (std::size_t j = 0; j < seq_len; ++j) {
          const std::size_t kj = (s * seq_len + j) * d_model + h * dh;
          Real dot = 0;
          for (std::size_t c = 0; c < dh; ++c) dot += q[qi + c] * k[kj + c];
          p[i * seq_len + j] = dot * scale;
        }
      }
      std::vector<Real> row(seq_len);
      for (std::size_t i = 0; i < seq_len; ++i) {
        softmax(std::span<const Real>(p + i * seq_len, seq_len), row, 1, seq_len, 1);
        std::copy(row.begin(), row.end(), p + i * seq_len);
      }
      for (std::size_t i = 0; i < seq_len; ++i) {
        for (std::size_t c = 0; c < dh; ++c) {
          Real acc = 0;
          for (std::size_t j = 0; j < seq_len; ++j) acc += p[i * seq_len + j] * v[(s * seq_len + j) * d_model + h * dh + c];
          out[(s * seq_len + i) * d_model + h * dh + c] = acc;
        }
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
  std::vector<Real> dp(seq_len * seq_len);
  std::vector<Real> ds(seq_len * seq_len);
  for (std::size_t s = 0; s < n_seq; ++s) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      const Real* p = probs.data() + (s * n_heads + h) * seq_len * seq_len;
      auto row = [&](std::size_t t) { return (s * seq_len + t) * d_model + h * dh; };
      for (std::size_t i = 0; i < seq_len; ++i) {
        for (std::size_t j = 0; j < seq_len; ++j) {
          Real dot = 0;
          for (std::size_t c = 0; c < dh; ++c) dot += dout[row(i) + c] * v[row(j) + c];
          dp[i * seq_len + j] = dot;
        }
      }
      softmax_backward(std::span<const Real>(p, seq_len * seq_len), dp, ds, seq_len, seq_len, 1);
      if (!dv.empty()) {
        for (std::size_t j = 0; j < seq_len; ++j) {
          for (std::size_t c = 0; c < dh; ++c) {
            Real acc = 0;
            for (std::size_t i = 0; i < seq_len; ++i) acc += p[i * seq_len + j] * dout[row(i) + c];
            dv[row(j) + c] = acc;
          }
        }
      }
      if (!dq.empty()) {
        for (std::size_t i = 0; i < seq_len; ++i) {
          for (std::size_t c = 0; c < dh; ++c) {
            Real acc = 0;
            for (std::size_t j = 0; j < seq_len; ++j) acc += ds[i * seq_len + j] * k[row(j) + c];
            dq[row(i) + c] = acc * scale;
          }
        }
      }
      if (!dk.empty()) {
        for (std::size_t j = 0; j < seq_len; ++j) {
          for (std::size_t c = 0; c < dh; ++c) {
            Real acc = 0;
            for (std::size_t i = 0; i < seq_len; ++i) acc += ds[i * seq_len + j] * q[row(i) + c];
            dk[row(j) + c] = acc * scale;
          }
        }
      }
    }
  }
}

}  // namespace reclab::kernels::serial
