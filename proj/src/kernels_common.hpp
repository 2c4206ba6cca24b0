#pragma once

#include <algorithm>
#include <cstddef>

#include "mhfilm/kernels.hpp"

namespace mhfilm::kernels {

// Valid output range along one spatial axis: 0 <= o*stride + k - pad < extent.
inline void valid_range(std::size_t extent, std::size_t out_extent,
                        std::size_t stride, std::size_t pad, std::size_t k,
                        std::size_t& o0, std::size_t& o1) {
  const long long s = static_cast<long long>(stride);
  const long long lo = static_cast<long long>(pad) - static_cast<long long>(k);
  const long long hi = static_cast<long long>(extent) - 1 + lo;
  long long first = lo <= 0 ? 0 : (lo + s - 1) / s;
  long long last = hi < 0 ? -1 : hi / s;
  first = std::max(first, 0ll);
  last = std::min(last, static_cast<long long>(out_extent) - 1);
  if (last < first) {
    o0 = o1 = 0;
    return;
  }
  o0 = static_cast<std::size_t>(first);
  o1 = static_cast<std::size_t>(last) + 1;
}

// Scalar reference implementations, also the shared fallback path for cases
// the SIMD variants do not cover (strided convolutions).
namespace scalar_impl {

void add(const double* a, const double* b, double* out, std::size_t n);
void sub(const double* a, const double* b, double* out, std::size_t n);
void mul(const double* a, const double* b, double* out, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
void scale_shift(const double* x, double gamma, double beta, double* out,
                 std::size_t n);
void matmul(const double* a, const double* b, double* c, std::size_t m,
            std::size_t k, std::size_t n, int accumulate);
void matvec(const double* a, const double* x, double* y, std::size_t m,
            std::size_t k, int accumulate);
void matvec_t(const double* a, const double* x, double* y, std::size_t m,
              std::size_t k, int accumulate);
void conv2d(const double* in, const double* w, double* out, const ConvDims& d);
void conv2d_grad_input(const double* gout, const double* w, double* gin,
                       const ConvDims& d);
void conv2d_grad_weight(const double* gout, const double* in, double* gw,
                        const ConvDims& d);
void adam_update(double* p, double* m, double* v, const double* g,
                 const AdamScalars& s, std::size_t n);

// Stride-1 patch matrix for the grad-weight kernels: pt is [oh*ow rows x
// cin*kh*kw columns] with pt[p, tap] = in[ci, y+dy-pad, x+dx-pad] (zero where
// the tap falls outside). Both backends compute dw = gout * pt through their
// matmul, which fixes the accumulation order to raster order over output
// positions.
inline void build_patch_matrix(const double* in, const ConvDims& d,
                               double* pt) {
  const std::size_t taps = d.cin * d.kh * d.kw;
  for (std::size_t y = 0; y < d.oh; ++y) {
    for (std::size_t x = 0; x < d.ow; ++x) {
      double* row = pt + (y * d.ow + x) * taps;
      std::size_t tap = 0;
      for (std::size_t ci = 0; ci < d.cin; ++ci) {
        for (std::size_t dy = 0; dy < d.kh; ++dy) {
          const long long iy = static_cast<long long>(y + dy) -
                               static_cast<long long>(d.pad);
          for (std::size_t dx = 0; dx < d.kw; ++dx, ++tap) {
            const long long ix = static_cast<long long>(x + dx) -
                                 static_cast<long long>(d.pad);
            row[tap] = (iy < 0 || iy >= static_cast<long long>(d.h) ||
                        ix < 0 || ix >= static_cast<long long>(d.w))
                           ? 0.0
                           : in[(ci * d.h + static_cast<std::size_t>(iy)) *
                                    d.w +
                                static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

}  // namespace scalar_impl

const Ops& scalar_ops();
const Ops& avx2_ops();  // defined only when the AVX2 unit is in the build

}  // namespace mhfilm::kernels
