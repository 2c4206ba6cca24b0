// AVX2 kernel variants. Compiled with -mavx2 only (no FMA: fused multiply-add
// would round differently from the scalar reference and break the bitwise
// contract). Vector loops touch independent output elements; remainders reuse
// the scalar expressions verbatim.

#include "kernels_common.hpp"

#if defined(__AVX2__)

#include <immintrin.h>

#include <cmath>
#include <vector>

namespace mhfilm::kernels {
namespace {

void add_v(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i),
                                            _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void sub_v(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_sub_pd(_mm256_loadu_pd(a + i),
                                            _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] - b[i];
}

void mul_v(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i),
                                            _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void axpy_v(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d av = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d t = _mm256_mul_pd(av, _mm256_loadu_pd(x + i));
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), t));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale_shift_v(const double* x, double gamma, double beta, double* out,
                   std::size_t n) {
  const __m256d gv = _mm256_set1_pd(gamma);
  const __m256d bv = _mm256_set1_pd(beta);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d t = _mm256_mul_pd(gv, _mm256_loadu_pd(x + i));
    _mm256_storeu_pd(out + i, _mm256_add_pd(t, bv));
  }
  for (; i < n; ++i) out[i] = gamma * x[i] + beta;
}

// (l0+l2)+(l1+l3) reduction, same schedule as the scalar reference.
double dot_lanes_v(const double* a, const double* b, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc = _mm256_add_pd(
        acc, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  const __m128d lo = _mm256_castpd256_pd128(acc);
  const __m128d hi = _mm256_extractf128_pd(acc, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  double r = _mm_cvtsd_f64(s) + _mm_cvtsd_f64(_mm_unpackhi_pd(s, s));
  for (; i < n; ++i) r += a[i] * b[i];
  return r;
}

void matmul_v(const double* a, const double* b, double* c, std::size_t m,
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
      axpy_v(aik, brow, crow, n);
    }
  }
}

void matvec_v(const double* a, const double* x, double* y, std::size_t m,
              std::size_t k, int accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double r = dot_lanes_v(a + i * k, x, k);
    y[i] = accumulate ? y[i] + r : r;
  }
}

void matvec_t_v(const double* a, const double* x, double* y, std::size_t m,
                std::size_t k, int accumulate) {
  if (!accumulate) {
    for (std::size_t j = 0; j < k; ++j) y[j] = 0.0;
  }
  for (std::size_t i = 0; i < m; ++i) axpy_v(x[i], a + i * k, y, k);
}

// Fused 9-tap path for the 3x3 / stride 1 / pad 1 case. Taps are applied in
// (dy, dx) ascending order per output element, matching the scalar loop nest.
void conv3x3_s1_p1_v(const double* in, const double* w, double* out,
                     const ConvDims& d) {
  const std::size_t h = d.h, wd = d.w;
  for (std::size_t co = 0; co < d.cout; ++co) {
    for (std::size_t ci = 0; ci < d.cin; ++ci) {
      const double* wk = w + ((co * d.cin + ci) * 3) * 3;
      const double* inc = in + ci * h * wd;
      double* outc = out + co * h * wd;
      for (std::size_t y = 0; y < h; ++y) {
        double* orow = outc + y * wd;
        const std::size_t dy0 = y == 0 ? 1 : 0;
        const std::size_t dy1 = y == h - 1 ? 2 : 3;
        // interior columns where all three dx taps are valid
        const std::size_t x_lo = 1, x_hi = wd >= 1 ? wd - 1 : 0;
        std::size_t x = x_lo;
        for (; x + 4 <= x_hi; x += 4) {
          __m256d acc = _mm256_loadu_pd(orow + x);
          for (std::size_t dy = dy0; dy < dy1; ++dy) {
            const double* irow = inc + (y + dy - 1) * wd + x - 1;
            acc = _mm256_add_pd(acc, _mm256_mul_pd(_mm256_set1_pd(wk[dy * 3]),
                                                   _mm256_loadu_pd(irow)));
            acc = _mm256_add_pd(
                acc, _mm256_mul_pd(_mm256_set1_pd(wk[dy * 3 + 1]),
                                   _mm256_loadu_pd(irow + 1)));
            acc = _mm256_add_pd(
                acc, _mm256_mul_pd(_mm256_set1_pd(wk[dy * 3 + 2]),
                                   _mm256_loadu_pd(irow + 2)));
          }
          _mm256_storeu_pd(orow + x, acc);
        }
        for (; x < x_hi; ++x) {
          double acc = orow[x];
          for (std::size_t dy = dy0; dy < dy1; ++dy) {
            const double* irow = inc + (y + dy - 1) * wd + x - 1;
            acc += wk[dy * 3] * irow[0];
            acc += wk[dy * 3 + 1] * irow[1];
            acc += wk[dy * 3 + 2] * irow[2];
          }
          orow[x] = acc;
        }
        // boundary columns with partial dx coverage
        for (std::size_t bi = 0; bi < (wd == 1 ? 1u : 2u); ++bi) {
          const std::size_t bx = bi == 0 ? 0 : wd - 1;
          double acc = orow[bx];
          for (std::size_t dy = dy0; dy < dy1; ++dy) {
            const double* irow = inc + (y + dy - 1) * wd;
            for (std::size_t dx = 0; dx < 3; ++dx) {
              const long long ix = static_cast<long long>(bx) +
                                   static_cast<long long>(dx) - 1;
              if (ix < 0 || ix >= static_cast<long long>(wd)) continue;
              acc += wk[dy * 3 + dx] * irow[ix];
            }
          }
          orow[bx] = acc;
        }
      }
    }
  }
}

void conv2d_v(const double* in, const double* w, double* out,
              const ConvDims& d) {
  if (d.stride != 1) {
    scalar_impl::conv2d(in, w, out, d);
    return;
  }
  if (d.kh == 3 && d.kw == 3 && d.pad == 1) {
    conv3x3_s1_p1_v(in, w, out, d);
    return;
  }
  for (std::size_t co = 0; co < d.cout; ++co) {
    for (std::size_t ci = 0; ci < d.cin; ++ci) {
      for (std::size_t dy = 0; dy < d.kh; ++dy) {
        std::size_t y0, y1;
        valid_range(d.h, d.oh, 1, d.pad, dy, y0, y1);
        for (std::size_t dx = 0; dx < d.kw; ++dx) {
          const double wv = w[((co * d.cin + ci) * d.kh + dy) * d.kw + dx];
          std::size_t x0, x1;
          valid_range(d.w, d.ow, 1, d.pad, dx, x0, x1);
          if (x1 <= x0) continue;
          for (std::size_t y = y0; y < y1; ++y) {
            const std::size_t iy = y + dy - d.pad;
            const double* inrow = in + (ci * d.h + iy) * d.w + x0 + dx - d.pad;
            double* outrow = out + (co * d.oh + y) * d.ow + x0;
            axpy_v(wv, inrow, outrow, x1 - x0);
          }
        }
      }
    }
  }
}

// Fused gather for the 3x3 / stride 1 / pad 1 gradient w.r.t. the input:
// gin[iy,ix] += sum_{dy,dx} wk[dy,dx] * gout[iy+1-dy, ix+1-dx], taps in
// (dy, dx) ascending order per element like the scalar reference.
void conv3x3_grad_input_v(const double* gout, const double* w, double* gin,
                          const ConvDims& d) {
  const std::size_t h = d.h, wd = d.w;
  for (std::size_t ci = 0; ci < d.cin; ++ci) {
    for (std::size_t co = 0; co < d.cout; ++co) {
      const double* wk = w + ((co * d.cin + ci) * 3) * 3;
      const double* goutc = gout + co * h * wd;
      double* ginc = gin + ci * h * wd;
      for (std::size_t iy = 0; iy < h; ++iy) {
        double* grow = ginc + iy * wd;
        const std::size_t dy_lo =
            iy + 2 > h ? iy + 2 - h : 0;               // oy <= h-1
        const std::size_t dy_hi = iy + 1 < 2 ? iy + 1 : 2;  // oy >= 0
        const std::size_t x_lo = 1, x_hi = wd >= 1 ? wd - 1 : 0;
        std::size_t ix = x_lo;
        for (; ix + 4 <= x_hi; ix += 4) {
          __m256d acc = _mm256_loadu_pd(grow + ix);
          for (std::size_t dy = dy_lo; dy <= dy_hi; ++dy) {
            const double* orow = goutc + (iy + 1 - dy) * wd;
            acc = _mm256_add_pd(acc, _mm256_mul_pd(_mm256_set1_pd(wk[dy * 3]),
                                                   _mm256_loadu_pd(orow + ix + 1)));
            acc = _mm256_add_pd(acc,
                                _mm256_mul_pd(_mm256_set1_pd(wk[dy * 3 + 1]),
                                              _mm256_loadu_pd(orow + ix)));
            acc = _mm256_add_pd(acc,
                                _mm256_mul_pd(_mm256_set1_pd(wk[dy * 3 + 2]),
                                              _mm256_loadu_pd(orow + ix - 1)));
          }
          _mm256_storeu_pd(grow + ix, acc);
        }
        for (; ix < x_hi; ++ix) {
          double acc = grow[ix];
          for (std::size_t dy = dy_lo; dy <= dy_hi; ++dy) {
            const double* orow = goutc + (iy + 1 - dy) * wd;
            acc += wk[dy * 3] * orow[ix + 1];
            acc += wk[dy * 3 + 1] * orow[ix];
            acc += wk[dy * 3 + 2] * orow[ix - 1];
          }
          grow[ix] = acc;
        }
        for (std::size_t bi = 0; bi < (wd == 1 ? 1u : 2u); ++bi) {
          const std::size_t bx = bi == 0 ? 0 : wd - 1;
          double acc = grow[bx];
          for (std::size_t dy = dy_lo; dy <= dy_hi; ++dy) {
            const double* orow = goutc + (iy + 1 - dy) * wd;
            for (std::size_t dx = 0; dx < 3; ++dx) {
              const long long ox = static_cast<long long>(bx) + 1 -
                                   static_cast<long long>(dx);
              if (ox < 0 || ox >= static_cast<long long>(wd)) continue;
              acc += wk[dy * 3 + dx] * orow[ox];
            }
          }
          grow[bx] = acc;
        }
      }
    }
  }
}

void conv2d_grad_input_v(const double* gout, const double* w, double* gin,
                         const ConvDims& d) {
  if (d.stride != 1) {
    scalar_impl::conv2d_grad_input(gout, w, gin, d);
    return;
  }
  if (d.kh == 3 && d.kw == 3 && d.pad == 1) {
    conv3x3_grad_input_v(gout, w, gin, d);
    return;
  }
  for (std::size_t ci = 0; ci < d.cin; ++ci) {
    for (std::size_t co = 0; co < d.cout; ++co) {
      for (std::size_t dy = 0; dy < d.kh; ++dy) {
        std::size_t y0, y1;
        valid_range(d.h, d.oh, 1, d.pad, dy, y0, y1);
        for (std::size_t dx = 0; dx < d.kw; ++dx) {
          const double wv = w[((co * d.cin + ci) * d.kh + dy) * d.kw + dx];
          std::size_t x0, x1;
          valid_range(d.w, d.ow, 1, d.pad, dx, x0, x1);
          if (x1 <= x0) continue;
          for (std::size_t y = y0; y < y1; ++y) {
            const std::size_t iy = y + dy - d.pad;
            double* ginrow = gin + (ci * d.h + iy) * d.w + x0 + dx - d.pad;
            const double* goutrow = gout + (co * d.oh + y) * d.ow + x0;
            axpy_v(wv, goutrow, ginrow, x1 - x0);
          }
        }
      }
    }
  }
}

void conv2d_grad_weight_v(const double* gout, const double* in, double* gw,
                          const ConvDims& d) {
  if (d.stride != 1) {
    scalar_impl::conv2d_grad_weight(gout, in, gw, d);
    return;
  }
  const std::size_t taps = d.cin * d.kh * d.kw;
  const std::size_t p = d.oh * d.ow;
  std::vector<double> pt(p * taps);
  scalar_impl::build_patch_matrix(in, d, pt.data());
  matmul_v(gout, pt.data(), gw, d.cout, p, taps, 1);
}

void adam_update_v(double* p, double* m, double* v, const double* g,
                   const AdamScalars& s, std::size_t n) {
  const double omb1 = 1.0 - s.beta1;
  const double omb2 = 1.0 - s.beta2;
  const __m256d b1v = _mm256_set1_pd(s.beta1);
  const __m256d b2v = _mm256_set1_pd(s.beta2);
  const __m256d omb1v = _mm256_set1_pd(omb1);
  const __m256d omb2v = _mm256_set1_pd(omb2);
  const __m256d bias1v = _mm256_set1_pd(s.bias1);
  const __m256d bias2v = _mm256_set1_pd(s.bias2);
  const __m256d epsv = _mm256_set1_pd(s.eps);
  const __m256d lrv = _mm256_set1_pd(s.lr);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d gv = _mm256_loadu_pd(g + i);
    __m256d mv = _mm256_loadu_pd(m + i);
    __m256d vv = _mm256_loadu_pd(v + i);
    mv = _mm256_add_pd(_mm256_mul_pd(b1v, mv), _mm256_mul_pd(omb1v, gv));
    vv = _mm256_add_pd(_mm256_mul_pd(b2v, vv),
                       _mm256_mul_pd(omb2v, _mm256_mul_pd(gv, gv)));
    _mm256_storeu_pd(m + i, mv);
    _mm256_storeu_pd(v + i, vv);
    const __m256d num = _mm256_mul_pd(mv, bias1v);
    const __m256d den =
        _mm256_add_pd(_mm256_sqrt_pd(_mm256_mul_pd(vv, bias2v)), epsv);
    const __m256d upd = _mm256_div_pd(_mm256_mul_pd(lrv, num), den);
    _mm256_storeu_pd(p + i, _mm256_sub_pd(_mm256_loadu_pd(p + i), upd));
  }
  for (; i < n; ++i) {
    const double gi = g[i];
    m[i] = s.beta1 * m[i] + omb1 * gi;
    v[i] = s.beta2 * v[i] + omb2 * (gi * gi);
    const double num = m[i] * s.bias1;
    const double den = std::sqrt(v[i] * s.bias2) + s.eps;
    p[i] = p[i] - (s.lr * num) / den;
  }
}

}  // namespace

const Ops& avx2_ops() {
  static const Ops table = {
      add_v,    sub_v,      mul_v,
      axpy_v,   scale_shift_v,
      matmul_v, matvec_v,   matvec_t_v,
      conv2d_v, conv2d_grad_input_v, conv2d_grad_weight_v,
      adam_update_v,
  };
  return table;
}

}  // namespace mhfilm::kernels

#endif  // __AVX2__
