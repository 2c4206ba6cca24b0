#pragma once

// Data-parallel inner-loop kernels behind the tensor ops. Every kernel has a
// scalar reference implementation and may have SIMD variants; the active
// variant is chosen once at runtime (CPU detection, overridable via the
// MHFILM_KERNELS environment variable or select_backend()).
//
// Bitwise contract: for identical inputs, every backend produces bitwise
// identical outputs. Vectorized kernels only parallelize across independent
// output elements, keeping each element's accumulation order equal to the
// scalar reference. matvec accumulates in four interleaved lanes over the
// input index, reduces as (l0+l2)+(l1+l3), then folds the remainder
// sequentially; the scalar reference follows the same schedule. The stride-1
// conv2d_grad_weight goes through a shared patch matrix and the matmul
// schedule, accumulating over output positions in raster order.

#include <cstddef>

namespace mhfilm::kernels {

struct ConvDims {
  // input [cin, h, w], kernel [cout, cin, kh, kw], output [cout, oh, ow]
  std::size_t cin = 0, h = 0, w = 0;
  std::size_t cout = 0, kh = 0, kw = 0;
  std::size_t stride = 1, pad = 0;
  std::size_t oh = 0, ow = 0;
};

struct AdamScalars {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double lr = 3e-4;
  double eps = 1e-8;
  double bias1 = 1.0;  // 1 / (1 - beta1^t)
  double bias2 = 1.0;  // 1 / (1 - beta2^t)
};

struct Ops {
  // elementwise; aliasing out with a or b is allowed
  void (*add)(const double* a, const double* b, double* out, std::size_t n);
  void (*sub)(const double* a, const double* b, double* out, std::size_t n);
  void (*mul)(const double* a, const double* b, double* out, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // out = gamma * x + beta
  void (*scale_shift)(const double* x, double gamma, double beta, double* out,
                      std::size_t n);
  // c = a[m,k] * b[k,n]; accumulate!=0 adds into c instead of overwriting
  void (*matmul)(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n, int accumulate);
  // y = a[m,k] * x[k]  (lane-blocked dots)
  void (*matvec)(const double* a, const double* x, double* y, std::size_t m,
                 std::size_t k, int accumulate);
  // y = a[m,k]^T * x[m]  (row-axpy form, y has length k)
  void (*matvec_t)(const double* a, const double* x, double* y, std::size_t m,
                   std::size_t k, int accumulate);
  // all conv kernels accumulate into their destination
  void (*conv2d)(const double* in, const double* w, double* out,
                 const ConvDims& d);
  void (*conv2d_grad_input)(const double* gout, const double* w, double* gin,
                            const ConvDims& d);
  void (*conv2d_grad_weight)(const double* gout, const double* in, double* gw,
                             const ConvDims& d);
  // fused in-place update of p/m/v from gradient g
  void (*adam_update)(double* p, double* m, double* v, const double* g,
                      const AdamScalars& s, std::size_t n);
};

enum class Backend { scalar, avx2 };

bool supports(Backend b);
const Ops& ops(Backend b);  // table for one backend (equivalence tests)
const Ops& active();
Backend active_backend();
void select_backend(Backend b);  // throws std::invalid_argument if unsupported
const char* to_string(Backend b);

}  // namespace mhfilm::kernels
