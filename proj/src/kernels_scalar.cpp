#include <cmath>
#include <vector>

#include "kernels_common.hpp"

namespace mhfilm::kernels::scalar_impl {

void add(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void sub(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

void mul(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scale_shift(const double* x, double gamma, double beta, double* out,
                 std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = gamma * x[i] + beta;
}

namespace {

// Lane-blocked dot: the schedule every backend must reproduce bitwise.
double dot_lanes(const double* a, const double* b, std::size_t n) {
  double l0 = 0.0, l1 = 0.0, l2 = 0.0, l3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    l0 += a[i] * b[i];
    l1 += a[i + 1] * b[i + 1];
    l2 += a[i + 2] * b[i + 2];
    l3 += a[i + 3] * b[i + 3];
  }
  double r = (l0 + l2) + (l1 + l3);
  for (; i < n; ++i) r += a[i] * b[i];
  return r;
}

}  // namespace

void matmul(const double* a, const double* b, double* c, std::size_t m,
            std::size_t k, std::size_t n, int accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    if (!accumulate) {
      for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
    }
    const double* arow = a + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = arow[kk];
      const double* brow = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
}

void matvec(const double* a, const double* x, double* y, std::size_t m,
            std::size_t k, int accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double r = dot_lanes(a + i * k, x, k);
    y[i] = accumulate ? y[i] + r : r;
  }
}

void matvec_t(const double* a, const double* x, double* y, std::size_t m,
              std::size_t k, int accumulate) {
  if (!accumulate) {
    for (std::size_t j = 0; j < k; ++j) y[j] = 0.0;
  }
  for (std::size_t i = 0; i < m; ++i) axpy(x[i], a + i * k, y, k);
}

void conv2d(const double* in, const double* w, double* out,
            const ConvDims& d) {
  for (std::size_t co = 0; co < d.cout; ++co) {
    for (std::size_t ci = 0; ci < d.cin; ++ci) {
      for (std::size_t dy = 0; dy < d.kh; ++dy) {
        std::size_t y0, y1;
        valid_range(d.h, d.oh, d.stride, d.pad, dy, y0, y1);
        for (std::size_t dx = 0; dx < d.kw; ++dx) {
          const double wv = w[((co * d.cin + ci) * d.kh + dy) * d.kw + dx];
          std::size_t x0, x1;
          valid_range(d.w, d.ow, d.stride, d.pad, dx, x0, x1);
          for (std::size_t y = y0; y < y1; ++y) {
            const std::size_t iy = y * d.stride + dy - d.pad;
            const double* inrow = in + (ci * d.h + iy) * d.w;
            double* outrow = out + (co * d.oh + y) * d.ow;
            for (std::size_t x = x0; x < x1; ++x) {
              outrow[x] += wv * inrow[x * d.stride + dx - d.pad];
            }
          }
        }
      }
    }
  }
}

void conv2d_grad_input(const double* gout, const double* w, double* gin,
                       const ConvDims& d) {
  for (std::size_t ci = 0; ci < d.cin; ++ci) {
    for (std::size_t co = 0; co < d.cout; ++co) {
      for (std::size_t dy = 0; dy < d.kh; ++dy) {
        std::size_t y0, y1;
        valid_range(d.h, d.oh, d.stride, d.pad, dy, y0, y1);
        for (std::size_t dx = 0; dx < d.kw; ++dx) {
          const double wv = w[((co * d.cin + ci) * d.kh + dy) * d.kw + dx];
          std::size_t x0, x1;
          valid_range(d.w, d.ow, d.stride, d.pad, dx, x0, x1);
          for (std::size_t y = y0; y < y1; ++y) {
            const std::size_t iy = y * d.stride + dy - d.pad;
            double* ginrow = gin + (ci * d.h + iy) * d.w;
            const double* goutrow = gout + (co * d.oh + y) * d.ow;
            for (std::size_t x = x0; x < x1; ++x) {
              ginrow[x * d.stride + dx - d.pad] += wv * goutrow[x];
            }
          }
        }
      }
    }
  }
}

void conv2d_grad_weight(const double* gout, const double* in, double* gw,
                        const ConvDims& d) {
  if (d.stride == 1) {
    const std::size_t taps = d.cin * d.kh * d.kw;
    const std::size_t p = d.oh * d.ow;
    std::vector<double> pt(p * taps);
    build_patch_matrix(in, d, pt.data());
    matmul(gout, pt.data(), gw, d.cout, p, taps, 1);
    return;
  }
  for (std::size_t co = 0; co < d.cout; ++co) {
    for (std::size_t ci = 0; ci < d.cin; ++ci) {
      for (std::size_t dy = 0; dy < d.kh; ++dy) {
        std::size_t y0, y1;
        valid_range(d.h, d.oh, d.stride, d.pad, dy, y0, y1);
        for (std::size_t dx = 0; dx < d.kw; ++dx) {
          std::size_t x0, x1;
          valid_range(d.w, d.ow, d.stride, d.pad, dx, x0, x1);
          double total = 0.0;
          for (std::size_t y = y0; y < y1; ++y) {
            const std::size_t iy = y * d.stride + dy - d.pad;
            const double* goutrow = gout + (co * d.oh + y) * d.ow;
            const double* inrow = in + (ci * d.h + iy) * d.w;
            double r = 0.0;
            for (std::size_t x = x0; x < x1; ++x) {
              r += goutrow[x] * inrow[x * d.stride + dx - d.pad];
            }
            total += r;
          }
          gw[((co * d.cin + ci) * d.kh + dy) * d.kw + dx] += total;
        }
      }
    }
  }
}

void adam_update(double* p, double* m, double* v, const double* g,
                 const AdamScalars& s, std::size_t n) {
  const double omb1 = 1.0 - s.beta1;
  const double omb2 = 1.0 - s.beta2;
  for (std::size_t i = 0; i < n; ++i) {
    const double gi = g[i];
    m[i] = s.beta1 * m[i] + omb1 * gi;
    v[i] = s.beta2 * v[i] + omb2 * (gi * gi);
    const double num = m[i] * s.bias1;
    const double den = std::sqrt(v[i] * s.bias2) + s.eps;
    p[i] = p[i] - (s.lr * num) / den;
  }
}

}  // namespace mhfilm::kernels::scalar_impl
