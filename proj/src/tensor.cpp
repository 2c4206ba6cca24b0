#include "mhfilm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "mhfilm/kernels.hpp"

namespace mhfilm {

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

namespace {

thread_local Tape* g_current_tape = nullptr;

void check_finite(const Tensor& t) {
#ifndef NDEBUG
  for (double v : t.values()) {
    if (!std::isfinite(v)) {
      throw std::domain_error("non-finite value in tensor of shape " +
                              shape_str(t.shape()));
    }
  }
#else
  (void)t;
#endif
}

using ImplPtr = std::shared_ptr<TensorImpl>;

bool recording(std::initializer_list<const Tensor*> operands) {
  if (!g_current_tape) return false;
  for (const Tensor* t : operands) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Marks the result differentiable and records the closure.
void record(Tensor& out, std::function<void()> fn) {
  out.set_requires_grad(true);
  g_current_tape->record(std::move(fn));
}

std::size_t prod(const Shape& s, std::size_t from, std::size_t to) {
  std::size_t n = 1;
  for (std::size_t i = from; i < to; ++i) n *= s[i];
  return n;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape) : impl_(std::make_shared<TensorImpl>()) {
  impl_->shape = std::move(shape);
  impl_->value.assign(shape_numel(impl_->shape), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : impl_(std::make_shared<TensorImpl>()) {
  if (shape_numel(shape) != data.size()) {
    throw std::invalid_argument("tensor data length " +
                                std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  }
  impl_->shape = std::move(shape);
  impl_->value = std::move(data);
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, {v}); }

Tensor Tensor::full(Shape shape, double v) {
  Tensor t(std::move(shape));
  std::fill(t.values().begin(), t.values().end(), v);
  return t;
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

Tensor Tensor::normal(Shape shape, Rng& rng, double mean, double stddev) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.normal(mean, stddev);
  return t;
}

double Tensor::value() const {
  if (numel() != 1) {
    throw std::invalid_argument("scalar read on tensor of shape " +
                                shape_str(shape()));
  }
  return impl_->value[0];
}

namespace {
std::size_t flat_index(const Shape& shape,
                       std::initializer_list<std::size_t> idx) {
  if (idx.size() != shape.size()) {
    throw std::out_of_range("index rank mismatch for shape " +
                            shape_str(shape));
  }
  std::size_t flat = 0, k = 0;
  for (std::size_t i : idx) {
    if (i >= shape[k]) {
      throw std::out_of_range("index out of range for shape " +
                              shape_str(shape));
    }
    flat = flat * shape[k] + i;
    ++k;
  }
  return flat;
}
}  // namespace

double Tensor::at(std::initializer_list<std::size_t> idx) const {
  return impl_->value[flat_index(impl_->shape, idx)];
}

double& Tensor::at(std::initializer_list<std::size_t> idx) {
  return impl_->value[flat_index(impl_->shape, idx)];
}

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) {
    throw std::logic_error("tensor has no gradient; run backward first");
  }
  return impl_->grad;
}

Tensor Tensor::clone() const { return Tensor(impl_->shape, impl_->value); }

// ---------------------------------------------------------------------------
// Tape

Tape* Tape::current() { return g_current_tape; }

Tape::Scope::Scope(Tape& t) : prev_(g_current_tape) { g_current_tape = &t; }
Tape::Scope::~Scope() { g_current_tape = prev_; }

void Tape::backward(const Tensor& loss) {
  if (consumed_) {
    throw std::logic_error(
        "tape already consumed by backward; call reset() first");
  }
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                shape_str(loss.shape()));
  }
  loss.impl()->ensure_grad();
  loss.impl()->grad[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  consumed_ = true;
}

void Tape::reset() {
  nodes_.clear();
  consumed_ = false;
}

// ---------------------------------------------------------------------------
// matmul / transpose

Tensor transpose2d(const Tensor& a) {
  if (a.rank() != 2) {
    throw std::invalid_argument("transpose2d expects rank 2, got " +
                                shape_str(a.shape()));
  }
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out(Shape{n, m});
  const double* src = a.data();
  double* dst = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
  }
  if (recording({&a})) {
    record(out, [ai = a.impl(), oi = out.impl(), m, n] {
      if (oi->grad.empty() || !ai->requires_grad) return;
      ai->ensure_grad();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          ai->grad[i * n + j] += oi->grad[j * m + i];
        }
      }
    });
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul shape mismatch: " +
                                shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out(Shape{m, n});
  const auto& K = kernels::active();
  if (n == 1) {
    K.matvec(a.data(), b.data(), out.data(), m, k, 0);
  } else {
    K.matmul(a.data(), b.data(), out.data(), m, k, n, 0);
  }
  if (recording({&a, &b})) {
    record(out, [ai = a.impl(), bi = b.impl(), oi = out.impl(), m, k, n] {
      if (oi->grad.empty()) return;
      const auto& KK = kernels::active();
      const double* g = oi->grad.data();
      if (ai->requires_grad) {
        ai->ensure_grad();
        if (n == 1) {
          // outer product: ga[m,k] += g[m,1] * b^T[1,k]
          KK.matmul(g, bi->value.data(), ai->grad.data(), m, 1, k, 1);
        } else {
          std::vector<double> bt(k * n);
          for (std::size_t r = 0; r < k; ++r) {
            for (std::size_t c = 0; c < n; ++c) {
              bt[c * k + r] = bi->value[r * n + c];
            }
          }
          KK.matmul(g, bt.data(), ai->grad.data(), m, n, k, 1);
        }
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        if (n == 1) {
          KK.matvec_t(ai->value.data(), g, bi->grad.data(), m, k, 1);
        } else {
          std::vector<double> at(k * m);
          for (std::size_t r = 0; r < m; ++r) {
            for (std::size_t c = 0; c < k; ++c) {
              at[c * m + r] = ai->value[r * k + c];
            }
          }
          KK.matmul(at.data(), g, bi->grad.data(), k, m, n, 1);
        }
      }
    });
  }
  check_finite(out);
  return out;
}

Tensor linear_vec(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 1 || w.rank() != 2 || x.dim(0) != w.dim(0) ||
      (b.defined() && (b.rank() != 1 || b.dim(0) != w.dim(1)))) {
    throw std::invalid_argument(
        "linear_vec shape mismatch: x " + shape_str(x.shape()) + " w " +
        shape_str(w.shape()) +
        (b.defined() ? " b " + shape_str(b.shape()) : ""));
  }
  const std::size_t in = w.dim(0), out_dim = w.dim(1);
  Tensor out(Shape{out_dim});
  const auto& K = kernels::active();
  if (b.defined()) {
    std::copy(b.data(), b.data() + out_dim, out.data());
    K.matvec_t(w.data(), x.data(), out.data(), in, out_dim, 1);
  } else {
    K.matvec_t(w.data(), x.data(), out.data(), in, out_dim, 0);
  }
  const bool has_bias = b.defined();
  if (recording(has_bias ? std::initializer_list<const Tensor*>{&x, &w, &b}
                         : std::initializer_list<const Tensor*>{&x, &w})) {
    auto bi = has_bias ? b.impl() : nullptr;
    record(out, [xi = x.impl(), wi = w.impl(), bi, oi = out.impl(), in,
                 out_dim] {
      if (oi->grad.empty()) return;
      const auto& KK = kernels::active();
      const double* g = oi->grad.data();
      if (xi->requires_grad) {
        xi->ensure_grad();
        KK.matvec(wi->value.data(), g, xi->grad.data(), in, out_dim, 1);
      }
      if (wi->requires_grad) {
        wi->ensure_grad();
        for (std::size_t i = 0; i < in; ++i) {
          KK.axpy(xi->value[i], g, wi->grad.data() + i * out_dim, out_dim);
        }
      }
      if (bi && bi->requires_grad) {
        bi->ensure_grad();
        KK.axpy(1.0, g, bi->grad.data(), out_dim);
      }
    });
  }
  check_finite(out);
  return out;
}

// ---------------------------------------------------------------------------
// conv2d

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride,
              int padding) {
  if (input.rank() != 3 || kernel.rank() != 4) {
    throw std::invalid_argument("conv2d expects input [C,H,W] and kernel "
                                "[Cout,Cin,kh,kw], got " +
                                shape_str(input.shape()) + " and " +
                                shape_str(kernel.shape()));
  }
  if (kernel.dim(1) != input.dim(0)) {
    throw std::invalid_argument("conv2d channel mismatch: input " +
                                shape_str(input.shape()) + " vs kernel " +
                                shape_str(kernel.shape()));
  }
  const std::size_t kh = kernel.dim(2), kw = kernel.dim(3);
  if ((kh != 1 && kh != 3) || (kw != 1 && kw != 3)) {
    throw std::invalid_argument("conv2d kernel extents must be 1 or 3, got " +
                                shape_str(kernel.shape()));
  }
  if (stride < 1) throw std::invalid_argument("conv2d stride must be >= 1");
  if (padding < 0 || padding > 1 ||
      (kh == 1 && kw == 1 && padding != 0)) {
    throw std::invalid_argument("conv2d padding must be 0 (1x1) or <= 1 (3x3)");
  }
  const long long h = static_cast<long long>(input.dim(1));
  const long long w = static_cast<long long>(input.dim(2));
  const long long ohl = (h + 2 * padding - static_cast<long long>(kh)) / stride + 1;
  const long long owl = (w + 2 * padding - static_cast<long long>(kw)) / stride + 1;
  if (ohl < 1 || owl < 1) {
    throw std::invalid_argument(
        "conv2d non-positive output extent for input " +
        shape_str(input.shape()) + " kernel " + shape_str(kernel.shape()));
  }
  kernels::ConvDims d;
  d.cin = input.dim(0);
  d.h = input.dim(1);
  d.w = input.dim(2);
  d.cout = kernel.dim(0);
  d.kh = kh;
  d.kw = kw;
  d.stride = static_cast<std::size_t>(stride);
  d.pad = static_cast<std::size_t>(padding);
  d.oh = static_cast<std::size_t>(ohl);
  d.ow = static_cast<std::size_t>(owl);

  Tensor out(Shape{d.cout, d.oh, d.ow});
  kernels::active().conv2d(input.data(), kernel.data(), out.data(), d);

  if (recording({&input, &kernel})) {
    record(out, [ii = input.impl(), ki = kernel.impl(), oi = out.impl(), d] {
      if (oi->grad.empty()) return;
      const auto& K = kernels::active();
      if (ii->requires_grad) {
        ii->ensure_grad();
        K.conv2d_grad_input(oi->grad.data(), ki->value.data(),
                            ii->grad.data(), d);
      }
      if (ki->requires_grad) {
        ki->ensure_grad();
        K.conv2d_grad_weight(oi->grad.data(), ii->value.data(),
                             ki->grad.data(), d);
      }
    });
  }
  check_finite(out);
  return out;
}

// ---------------------------------------------------------------------------
// elementwise unary

namespace {

Tensor unary_impl(const Tensor& x, Unary f) {
  const std::size_t n = x.numel();
  if (f == Unary::log_fn) {
    for (std::size_t i = 0; i < n; ++i) {
      if (!(x.data()[i] > 0.0)) {
        throw std::domain_error("log of non-positive entry at index " +
                                std::to_string(i));
      }
    }
  }
  Tensor out(x.shape());
  const double* xv = x.data();
  double* ov = out.data();
  switch (f) {
    case Unary::relu:
      for (std::size_t i = 0; i < n; ++i) ov[i] = xv[i] > 0.0 ? xv[i] : 0.0;
      break;
    case Unary::tanh_fn:
      for (std::size_t i = 0; i < n; ++i) ov[i] = std::tanh(xv[i]);
      break;
    case Unary::sigmoid:
      for (std::size_t i = 0; i < n; ++i) ov[i] = 1.0 / (1.0 + std::exp(-xv[i]));
      break;
    case Unary::log_fn:
      for (std::size_t i = 0; i < n; ++i) ov[i] = std::log(xv[i]);
      break;
    case Unary::neg:
      for (std::size_t i = 0; i < n; ++i) ov[i] = -xv[i];
      break;
  }
  if (recording({&x})) {
    record(out, [xi = x.impl(), oi = out.impl(), f, n] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      xi->ensure_grad();
      const double* g = oi->grad.data();
      const double* xv2 = xi->value.data();
      const double* yv = oi->value.data();
      double* gx = xi->grad.data();
      switch (f) {
        case Unary::relu:
          for (std::size_t i = 0; i < n; ++i)
            if (xv2[i] > 0.0) gx[i] += g[i];
          break;
        case Unary::tanh_fn:
          for (std::size_t i = 0; i < n; ++i)
            gx[i] += g[i] * (1.0 - yv[i] * yv[i]);
          break;
        case Unary::sigmoid:
          for (std::size_t i = 0; i < n; ++i)
            gx[i] += g[i] * yv[i] * (1.0 - yv[i]);
          break;
        case Unary::log_fn:
          for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] / xv2[i];
          break;
        case Unary::neg:
          for (std::size_t i = 0; i < n; ++i) gx[i] -= g[i];
          break;
      }
    });
  }
  check_finite(out);
  return out;
}

}  // namespace

Tensor unary_map(const Tensor& x, Unary f) { return unary_impl(x, f); }
Tensor relu(const Tensor& x) { return unary_impl(x, Unary::relu); }
Tensor tanh(const Tensor& x) { return unary_impl(x, Unary::tanh_fn); }
Tensor sigmoid(const Tensor& x) { return unary_impl(x, Unary::sigmoid); }
Tensor log(const Tensor& x) { return unary_impl(x, Unary::log_fn); }
Tensor neg(const Tensor& x) { return unary_impl(x, Unary::neg); }

// ---------------------------------------------------------------------------
// elementwise binary with limited broadcast

namespace {

enum class Bcast { none, channel, row };

Bcast bcast_kind(const Shape& a, const Shape& b) {
  if (a == b) return Bcast::none;
  if (b.size() == 1 && a.size() == 3 && b[0] == a[0]) return Bcast::channel;
  if (b.size() == 1 && a.size() == 2 && b[0] == a[1]) return Bcast::row;
  throw std::invalid_argument("incompatible shapes: " + shape_str(a) + " vs " +
                              shape_str(b));
}

enum class Bin { add_op, sub_op, mul_op };

Tensor binary_impl(const Tensor& a, const Tensor& b, Bin op) {
  const Bcast kind = bcast_kind(a.shape(), b.shape());
  Tensor out(a.shape());
  const auto& K = kernels::active();
  const std::size_t n = a.numel();
  const double* av = a.data();
  const double* bv = b.data();
  double* ov = out.data();

  if (kind == Bcast::none) {
    switch (op) {
      case Bin::add_op: K.add(av, bv, ov, n); break;
      case Bin::sub_op: K.sub(av, bv, ov, n); break;
      case Bin::mul_op: K.mul(av, bv, ov, n); break;
    }
  } else {
    // group = one broadcast slot of b; channel: contiguous rows, row: tiled
    const std::size_t groups = b.numel();
    const std::size_t span = kind == Bcast::channel ? n / groups : b.numel();
    if (kind == Bcast::channel) {
      for (std::size_t c = 0; c < groups; ++c) {
        const double bc = bv[c];
        const double* ar = av + c * span;
        double* orow = ov + c * span;
        switch (op) {
          case Bin::add_op:
            K.scale_shift(ar, 1.0, bc, orow, span);
            break;
          case Bin::sub_op:
            K.scale_shift(ar, 1.0, -bc, orow, span);
            break;
          case Bin::mul_op:
            K.scale_shift(ar, bc, 0.0, orow, span);
            break;
        }
      }
    } else {  // row: a [N,d], b [d]
      const std::size_t rows = a.dim(0), d = a.dim(1);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* ar = av + r * d;
        double* orow = ov + r * d;
        switch (op) {
          case Bin::add_op: K.add(ar, bv, orow, d); break;
          case Bin::sub_op: K.sub(ar, bv, orow, d); break;
          case Bin::mul_op: K.mul(ar, bv, orow, d); break;
        }
      }
      (void)span;
    }
  }

  if (recording({&a, &b})) {
    record(out, [ai = a.impl(), bi = b.impl(), oi = out.impl(), op, kind] {
      if (oi->grad.empty()) return;
      const auto& KK = kernels::active();
      const std::size_t nn = oi->value.size();
      const double* g = oi->grad.data();
      if (ai->requires_grad) {
        ai->ensure_grad();
        double* ga = ai->grad.data();
        if (op == Bin::mul_op) {
          // ga += g * b (broadcast-aware)
          if (kind == Bcast::none) {
            for (std::size_t i = 0; i < nn; ++i) ga[i] += g[i] * bi->value[i];
          } else if (kind == Bcast::channel) {
            const std::size_t groups = bi->value.size();
            const std::size_t span = nn / groups;
            for (std::size_t c = 0; c < groups; ++c) {
              KK.axpy(bi->value[c], g + c * span, ga + c * span, span);
            }
          } else {
            const std::size_t d = bi->value.size();
            for (std::size_t i = 0; i < nn; ++i) ga[i] += g[i] * bi->value[i % d];
          }
        } else {
          KK.axpy(1.0, g, ga, nn);
        }
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        double* gb = bi->grad.data();
        const double sign = op == Bin::sub_op ? -1.0 : 1.0;
        if (kind == Bcast::none) {
          if (op == Bin::mul_op) {
            for (std::size_t i = 0; i < nn; ++i) gb[i] += g[i] * ai->value[i];
          } else {
            KK.axpy(sign, g, gb, nn);
          }
        } else if (kind == Bcast::channel) {
          const std::size_t groups = bi->value.size();
          const std::size_t span = nn / groups;
          for (std::size_t c = 0; c < groups; ++c) {
            double acc = 0.0;
            const double* gr = g + c * span;
            if (op == Bin::mul_op) {
              const double* ar = ai->value.data() + c * span;
              for (std::size_t i = 0; i < span; ++i) acc += gr[i] * ar[i];
            } else {
              for (std::size_t i = 0; i < span; ++i) acc += gr[i];
            }
            gb[c] += sign * acc;
          }
        } else {
          const std::size_t d = bi->value.size();
          const std::size_t rows = nn / d;
          for (std::size_t r = 0; r < rows; ++r) {
            const double* gr = g + r * d;
            if (op == Bin::mul_op) {
              const double* ar = ai->value.data() + r * d;
              for (std::size_t j = 0; j < d; ++j) gb[j] += gr[j] * ar[j];
            } else {
              for (std::size_t j = 0; j < d; ++j) gb[j] += sign * gr[j];
            }
          }
        }
      }
    });
  }
  check_finite(out);
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_impl(a, b, Bin::add_op);
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_impl(a, b, Bin::sub_op);
}
Tensor hadamard(const Tensor& a, const Tensor& b) {
  return binary_impl(a, b, Bin::mul_op);
}

Tensor affine(const Tensor& x, double mul, double shift) {
  Tensor out(x.shape());
  kernels::active().scale_shift(x.data(), mul, shift, out.data(), x.numel());
  if (recording({&x})) {
    record(out, [xi = x.impl(), oi = out.impl(), mul] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      xi->ensure_grad();
      kernels::active().axpy(mul, oi->grad.data(), xi->grad.data(),
                             oi->grad.size());
    });
  }
  check_finite(out);
  return out;
}

// ---------------------------------------------------------------------------
// softmax

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw std::invalid_argument("softmax axis " + std::to_string(axis) +
                                " out of range for " + shape_str(x.shape()));
  }
  const std::size_t len = x.dim(axis);
  const std::size_t outer = prod(x.shape(), 0, axis);
  const std::size_t inner = prod(x.shape(), axis + 1, x.rank());
  Tensor out(x.shape());
  const double* xv = x.data();
  double* ov = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = xv[base];
      for (std::size_t i = 1; i < len; ++i) {
        mx = std::max(mx, xv[base + i * inner]);
      }
      double sum = 0.0;
      for (std::size_t i = 0; i < len; ++i) {
        const double e = std::exp(xv[base + i * inner] - mx);
        ov[base + i * inner] = e;
        sum += e;
      }
      for (std::size_t i = 0; i < len; ++i) ov[base + i * inner] /= sum;
    }
  }
  if (recording({&x})) {
    record(out, [xi = x.impl(), oi = out.impl(), len, outer, inner] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      xi->ensure_grad();
      const double* g = oi->grad.data();
      const double* y = oi->value.data();
      double* gx = xi->grad.data();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          double dot = 0.0;
          for (std::size_t i = 0; i < len; ++i) {
            dot += g[base + i * inner] * y[base + i * inner];
          }
          for (std::size_t i = 0; i < len; ++i) {
            const std::size_t p = base + i * inner;
            gx[p] += y[p] * (g[p] - dot);
          }
        }
      }
    });
  }
  check_finite(out);
  return out;
}

// ---------------------------------------------------------------------------
// layer norm

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  if (x.rank() < 1) {
    throw std::invalid_argument("layer_norm expects rank >= 1");
  }
  const std::size_t d = x.dim(x.rank() - 1);
  if (gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != d ||
      bias.dim(0) != d) {
    throw std::invalid_argument(
        "layer_norm gain/bias must match the last axis: x " +
        shape_str(x.shape()) + " gain " + shape_str(gain.shape()) + " bias " +
        shape_str(bias.shape()));
  }
  const std::size_t rows = x.numel() / d;
  Tensor out(x.shape());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  const double* xv = x.data();
  double* ov = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xr[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (xr[j] - mean) * is;
      xhat[r * d + j] = xh;
      ov[r * d + j] = gain.data()[j] * xh + bias.data()[j];
    }
  }
  if (recording({&x, &gain, &bias})) {
    record(out, [xi = x.impl(), gi = gain.impl(), bi = bias.impl(),
                 oi = out.impl(), xh = std::move(xhat),
                 is = std::move(inv_std), rows, d] {
      if (oi->grad.empty()) return;
      const double* g = oi->grad.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gr = g + r * d;
        const double* xhr = xh.data() + r * d;
        if (gi->requires_grad) {
          gi->ensure_grad();
          for (std::size_t j = 0; j < d; ++j) gi->grad[j] += gr[j] * xhr[j];
        }
        if (bi->requires_grad) {
          bi->ensure_grad();
          for (std::size_t j = 0; j < d; ++j) bi->grad[j] += gr[j];
        }
        if (xi->requires_grad) {
          xi->ensure_grad();
          double m1 = 0.0, m2 = 0.0;  // mean(gy*gain), mean(gy*gain*xhat)
          for (std::size_t j = 0; j < d; ++j) {
            const double gy = gr[j] * gi->value[j];
            m1 += gy;
            m2 += gy * xhr[j];
          }
          m1 /= static_cast<double>(d);
          m2 /= static_cast<double>(d);
          double* gx = xi->grad.data() + r * d;
          for (std::size_t j = 0; j < d; ++j) {
            const double gy = gr[j] * gi->value[j];
            gx[j] += is[r] * (gy - m1 - xhr[j] * m2);
          }
        }
      }
    });
  }
  check_finite(out);
  return out;
}

// ---------------------------------------------------------------------------
// frozen batch norm

Tensor frozen_batch_norm(const Tensor& x, BatchNormState& state, Mode mode,
                         double eps) {
  if (x.rank() != 3) {
    throw std::invalid_argument("frozen_batch_norm expects [C,H,W], got " +
                                shape_str(x.shape()));
  }
  const std::size_t c = x.dim(0);
  if (state.running_mean.size() != c || state.running_var.size() != c) {
    throw std::invalid_argument("frozen_batch_norm statistics length " +
                                std::to_string(state.running_mean.size()) +
                                " does not match channels " +
                                std::to_string(c));
  }
  const std::size_t span = x.dim(1) * x.dim(2);
  Tensor out(x.shape());
  const double* xv = x.data();
  double* ov = out.data();
  std::vector<double> inv_std(c);
  std::vector<double> xhat;  // train mode only

  if (mode == Mode::train) {
    xhat.resize(x.numel());
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* xr = xv + ch * span;
      double mean = 0.0;
      for (std::size_t i = 0; i < span; ++i) mean += xr[i];
      mean /= static_cast<double>(span);
      double var = 0.0;
      for (std::size_t i = 0; i < span; ++i) {
        const double d2 = xr[i] - mean;
        var += d2 * d2;
      }
      var /= static_cast<double>(span);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[ch] = is;
      for (std::size_t i = 0; i < span; ++i) {
        const double xh = (xr[i] - mean) * is;
        xhat[ch * span + i] = xh;
        ov[ch * span + i] = xh;
      }
      const double m = state.momentum;
      state.running_mean[ch] = m * state.running_mean[ch] + (1.0 - m) * mean;
      state.running_var[ch] = m * state.running_var[ch] + (1.0 - m) * var;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double is = 1.0 / std::sqrt(state.running_var[ch] + eps);
      inv_std[ch] = is;
      kernels::active().scale_shift(xv + ch * span, is,
                                    -state.running_mean[ch] * is,
                                    ov + ch * span, span);
    }
  }

  if (recording({&x})) {
    const bool train = mode == Mode::train;
    record(out, [xi = x.impl(), oi = out.impl(), is = std::move(inv_std),
                 xh = std::move(xhat), c, span, train] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      xi->ensure_grad();
      const double* g = oi->grad.data();
      double* gx = xi->grad.data();
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* gr = g + ch * span;
        if (!train) {
          kernels::active().axpy(is[ch], gr, gx + ch * span, span);
          continue;
        }
        const double* xhr = xh.data() + ch * span;
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t i = 0; i < span; ++i) {
          m1 += gr[i];
          m2 += gr[i] * xhr[i];
        }
        m1 /= static_cast<double>(span);
        m2 /= static_cast<double>(span);
        double* gxr = gx + ch * span;
        for (std::size_t i = 0; i < span; ++i) {
          gxr[i] += is[ch] * (gr[i] - m1 - xhr[i] * m2);
        }
      }
    });
  }
  check_finite(out);
  return out;
}

// ---------------------------------------------------------------------------
// reductions

Tensor reduce(const Tensor& x, Reduce op,
              const std::vector<std::size_t>& axes) {
  std::vector<bool> reduced(x.rank(), false);
  for (std::size_t a : axes) {
    if (a >= x.rank()) {
      throw std::invalid_argument("reduce axis " + std::to_string(a) +
                                  " out of range for " + shape_str(x.shape()));
    }
    if (reduced[a]) {
      throw std::invalid_argument("reduce axes must be distinct");
    }
    reduced[a] = true;
  }
  Shape out_shape;
  std::size_t count = 1;
  for (std::size_t i = 0; i < x.rank(); ++i) {
    if (reduced[i]) {
      count *= x.dim(i);
    } else {
      out_shape.push_back(x.dim(i));
    }
  }
  Tensor out(out_shape);

  // out strides aligned to kept axes of x
  std::vector<std::size_t> out_stride_for_axis(x.rank(), 0);
  {
    std::size_t stride = 1;
    for (std::size_t i = x.rank(); i-- > 0;) {
      if (!reduced[i]) {
        out_stride_for_axis[i] = stride;
        stride *= x.dim(i);
      }
    }
  }
  const double scale =
      op == Reduce::mean ? 1.0 / static_cast<double>(count) : 1.0;

  const double* xv = x.data();
  double* ov = out.data();
  std::vector<std::size_t> idx(x.rank(), 0);
  for (std::size_t flat = 0; flat < x.numel(); ++flat) {
    std::size_t oflat = 0;
    for (std::size_t i = 0; i < x.rank(); ++i) {
      oflat += idx[i] * out_stride_for_axis[i];
    }
    ov[oflat] += xv[flat] * scale;
    for (std::size_t i = x.rank(); i-- > 0;) {
      if (++idx[i] < x.dim(i)) break;
      idx[i] = 0;
    }
  }

  if (recording({&x})) {
    record(out, [xi = x.impl(), oi = out.impl(),
                 strides = out_stride_for_axis, scale] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      xi->ensure_grad();
      const double* g = oi->grad.data();
      double* gx = xi->grad.data();
      const Shape& xs = xi->shape;
      std::vector<std::size_t> idx2(xs.size(), 0);
      for (std::size_t flat = 0; flat < xi->value.size(); ++flat) {
        std::size_t oflat = 0;
        for (std::size_t i = 0; i < xs.size(); ++i) {
          oflat += idx2[i] * strides[i];
        }
        gx[flat] += g[oflat] * scale;
        for (std::size_t i = xs.size(); i-- > 0;) {
          if (++idx2[i] < xs[i]) break;
          idx2[i] = 0;
        }
      }
    });
  }
  check_finite(out);
  return out;
}

Tensor reduce_all(const Tensor& x, Reduce op) {
  std::vector<std::size_t> axes(x.rank());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  return reduce(x, op, axes);
}

// ---------------------------------------------------------------------------
// concat / slice

Tensor concat(const std::vector<Tensor>& xs, std::size_t axis) {
  if (xs.empty()) throw std::invalid_argument("concat of zero tensors");
  const std::size_t rank = xs[0].rank();
  if (axis >= rank) {
    throw std::invalid_argument("concat axis " + std::to_string(axis) +
                                " out of range for rank " +
                                std::to_string(rank));
  }
  std::size_t total = 0;
  for (const Tensor& t : xs) {
    if (t.rank() != rank) {
      throw std::invalid_argument("concat rank mismatch: " +
                                  shape_str(xs[0].shape()) + " vs " +
                                  shape_str(t.shape()));
    }
    for (std::size_t i = 0; i < rank; ++i) {
      if (i != axis && t.dim(i) != xs[0].dim(i)) {
        throw std::invalid_argument("concat off-axis extent mismatch: " +
                                    shape_str(xs[0].shape()) + " vs " +
                                    shape_str(t.shape()));
      }
    }
    total += t.dim(axis);
  }
  Shape out_shape = xs[0].shape();
  out_shape[axis] = total;
  Tensor out(out_shape);

  const std::size_t outer = prod(out_shape, 0, axis);
  const std::size_t inner = prod(out_shape, axis + 1, rank);
  double* ov = out.data();
  std::size_t offset = 0;
  for (const Tensor& t : xs) {
    const std::size_t e = t.dim(axis);
    const double* tv = t.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy(tv + o * e * inner, tv + (o + 1) * e * inner,
                ov + (o * total + offset) * inner);
    }
    offset += e;
  }

  bool any_grad = false;
  for (const Tensor& t : xs) any_grad = any_grad || t.requires_grad();
  if (g_current_tape && any_grad) {
    std::vector<ImplPtr> impls;
    impls.reserve(xs.size());
    for (const Tensor& t : xs) impls.push_back(t.impl());
    record(out, [impls, oi = out.impl(), outer, inner, total, axis] {
      if (oi->grad.empty()) return;
      const double* g = oi->grad.data();
      std::size_t off = 0;
      for (const ImplPtr& ti : impls) {
        const std::size_t e = ti->shape[axis];
        if (ti->requires_grad) {
          ti->ensure_grad();
          for (std::size_t o = 0; o < outer; ++o) {
            const double* gsrc = g + (o * total + off) * inner;
            double* gdst = ti->grad.data() + o * e * inner;
            for (std::size_t i = 0; i < e * inner; ++i) gdst[i] += gsrc[i];
          }
        }
        off += e;
      }
    });
  }
  check_finite(out);
  return out;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start,
             std::size_t len) {
  if (axis >= x.rank() || start + len > x.dim(axis)) {
    throw std::invalid_argument("slice out of range: axis " +
                                std::to_string(axis) + " start " +
                                std::to_string(start) + " len " +
                                std::to_string(len) + " on " +
                                shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = len;
  Tensor out(out_shape);
  const std::size_t outer = prod(x.shape(), 0, axis);
  const std::size_t inner = prod(x.shape(), axis + 1, x.rank());
  const std::size_t e = x.dim(axis);
  const double* xv = x.data();
  double* ov = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy(xv + (o * e + start) * inner, xv + (o * e + start + len) * inner,
              ov + o * len * inner);
  }
  if (recording({&x})) {
    record(out,
           [xi = x.impl(), oi = out.impl(), outer, inner, e, start, len] {
             if (oi->grad.empty() || !xi->requires_grad) return;
             xi->ensure_grad();
             const double* g = oi->grad.data();
             for (std::size_t o = 0; o < outer; ++o) {
               double* gdst = xi->grad.data() + (o * e + start) * inner;
               const double* gsrc = g + o * len * inner;
               for (std::size_t i = 0; i < len * inner; ++i) {
                 gdst[i] += gsrc[i];
               }
             }
           });
  }
  return out;
}

// ---------------------------------------------------------------------------
// embedding, dropout, reshape

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& indices) {
  if (table.rank() != 2) {
    throw std::invalid_argument("embedding table must be rank 2, got " +
                                shape_str(table.shape()));
  }
  const std::size_t v = table.dim(0), d = table.dim(1);
  for (std::size_t t = 0; t < indices.size(); ++t) {
    if (indices[t] < 0 || static_cast<std::size_t>(indices[t]) >= v) {
      throw std::out_of_range("embedding id " + std::to_string(indices[t]) +
                              " at token position " + std::to_string(t) +
                              " outside table of " + std::to_string(v) +
                              " rows");
    }
  }
  Tensor out(Shape{indices.size(), d});
  for (std::size_t t = 0; t < indices.size(); ++t) {
    const double* row = table.data() + static_cast<std::size_t>(indices[t]) * d;
    std::copy(row, row + d, out.data() + t * d);
  }
  if (recording({&table})) {
    record(out, [ti = table.impl(), oi = out.impl(), indices, d] {
      if (oi->grad.empty() || !ti->requires_grad) return;
      ti->ensure_grad();
      for (std::size_t t = 0; t < indices.size(); ++t) {
        kernels::active().axpy(
            1.0, oi->grad.data() + t * d,
            ti->grad.data() + static_cast<std::size_t>(indices[t]) * d, d);
      }
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, double p, Mode mode, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw std::invalid_argument("dropout probability must be in [0,1), got " +
                                std::to_string(p));
  }
  if (mode == Mode::eval || p == 0.0) return x;  // identity, no rng draws
  const std::size_t n = x.numel();
  std::vector<double> mask(n);
  const double keep_scale = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < n; ++i) {
    mask[i] = rng.uniform() < p ? 0.0 : keep_scale;
  }
  Tensor out(x.shape());
  const double* xv = x.data();
  double* ov = out.data();
  for (std::size_t i = 0; i < n; ++i) ov[i] = xv[i] * mask[i];
  if (recording({&x})) {
    record(out, [xi = x.impl(), oi = out.impl(), m = std::move(mask), n] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      xi->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        xi->grad[i] += oi->grad[i] * m[i];
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw std::invalid_argument("reshape from " + shape_str(x.shape()) +
                                " to " + shape_str(shape) +
                                " changes element count");
  }
  Tensor out(std::move(shape), x.values());
  if (recording({&x})) {
    record(out, [xi = x.impl(), oi = out.impl()] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      xi->ensure_grad();
      kernels::active().axpy(1.0, oi->grad.data(), xi->grad.data(),
                             oi->grad.size());
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// FiLM scale/shift, spatial flatten

Tensor film_scale_shift(const Tensor& x, const Tensor& gamma,
                        const Tensor& beta) {
  if (x.rank() != 3 || gamma.rank() != 1 || beta.rank() != 1 ||
      gamma.dim(0) != x.dim(0) || beta.dim(0) != x.dim(0)) {
    throw std::invalid_argument("film_scale_shift expects x [C,H,W] with "
                                "gamma/beta [C]: got x " +
                                shape_str(x.shape()) + " gamma " +
                                shape_str(gamma.shape()) + " beta " +
                                shape_str(beta.shape()));
  }
  const std::size_t c = x.dim(0), span = x.dim(1) * x.dim(2);
  Tensor out(x.shape());
  const auto& K = kernels::active();
  for (std::size_t ch = 0; ch < c; ++ch) {
    K.scale_shift(x.data() + ch * span, gamma.data()[ch], beta.data()[ch],
                  out.data() + ch * span, span);
  }
  if (recording({&x, &gamma, &beta})) {
    record(out, [xi = x.impl(), gi = gamma.impl(), bi = beta.impl(),
                 oi = out.impl(), c, span] {
      if (oi->grad.empty()) return;
      const auto& KK = kernels::active();
      const double* g = oi->grad.data();
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* gr = g + ch * span;
        if (xi->requires_grad) {
          xi->ensure_grad();
          KK.axpy(gi->value[ch], gr, xi->grad.data() + ch * span, span);
        }
        if (gi->requires_grad) {
          gi->ensure_grad();
          double acc = 0.0;
          const double* xr = xi->value.data() + ch * span;
          for (std::size_t i = 0; i < span; ++i) acc += gr[i] * xr[i];
          gi->grad[ch] += acc;
        }
        if (bi->requires_grad) {
          bi->ensure_grad();
          double acc = 0.0;
          for (std::size_t i = 0; i < span; ++i) acc += gr[i];
          bi->grad[ch] += acc;
        }
      }
    });
  }
  check_finite(out);
  return out;
}

Tensor spatial_flatten(const Tensor& x) {
  if (x.rank() != 3) {
    throw std::invalid_argument("spatial_flatten expects [C,H,W], got " +
                                shape_str(x.shape()));
  }
  const std::size_t c = x.dim(0), p = x.dim(1) * x.dim(2);
  Tensor out(Shape{p, c});
  const double* xv = x.data();
  double* ov = out.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < p; ++i) ov[i * c + ch] = xv[ch * p + i];
  }
  if (recording({&x})) {
    record(out, [xi = x.impl(), oi = out.impl(), c, p] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      xi->ensure_grad();
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < p; ++i) {
          xi->grad[ch * p + i] += oi->grad[i * c + ch];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// clamp, smooth L1

Tensor clamp(const Tensor& x, double lo, double hi) {
  Tensor out(x.shape());
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) {
    out.data()[i] = std::min(std::max(x.data()[i], lo), hi);
  }
  if (recording({&x})) {
    record(out, [xi = x.impl(), oi = out.impl(), lo, hi, n] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      xi->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        const double v = xi->value[i];
        if (v > lo && v < hi) xi->grad[i] += oi->grad[i];
      }
    });
  }
  return out;
}

Tensor smooth_l1(const Tensor& x) {
  Tensor out(x.shape());
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const double v = x.data()[i];
    const double a = std::abs(v);
    out.data()[i] = a <= 1.0 ? 0.5 * v * v : a - 0.5;
  }
  if (recording({&x})) {
    record(out, [xi = x.impl(), oi = out.impl(), n] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      xi->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        const double v = xi->value[i];
        const double d = std::abs(v) <= 1.0 ? v : (v > 0.0 ? 1.0 : -1.0);
        xi->grad[i] += oi->grad[i] * d;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// finite differences

double max_rel_error(const std::vector<double>& analytic,
                     const std::vector<double>& numeric) {
  if (analytic.size() != numeric.size()) {
    throw std::invalid_argument("max_rel_error length mismatch");
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom =
        std::max({std::abs(analytic[i]), std::abs(numeric[i]), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         const Tensor& x, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_check: h must be > 0");
  Tensor probe = x.clone();
  probe.set_requires_grad(true);
  std::vector<double> analytic;
  {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor y = f(probe);
    tape.backward(y);
    analytic = probe.has_grad() ? probe.grad()
                                : std::vector<double>(probe.numel(), 0.0);
  }
  Tensor wiggled = x.clone();
  std::vector<double> numeric(x.numel());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double saved = wiggled.data()[i];
    wiggled.data()[i] = saved + h;
    const double fp = f(wiggled).value();
    wiggled.data()[i] = saved - h;
    const double fm = f(wiggled).value();
    wiggled.data()[i] = saved;
    numeric[i] = (fp - fm) / (2.0 * h);
  }
  return max_rel_error(analytic, numeric);
}

double param_finite_diff_check(const Tensor& param,
                               const std::function<Tensor()>& loss_fn,
                               const std::vector<std::size_t>& coords,
                               double h) {
  if (!(h > 0.0)) {
    throw std::invalid_argument("param_finite_diff_check: h must be > 0");
  }
  Tensor p = param;  // shared storage
  p.clear_grad();
  std::vector<double> analytic;
  {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = loss_fn();
    tape.backward(loss);
    analytic = p.has_grad() ? p.grad()
                            : std::vector<double>(p.numel(), 0.0);
  }
  std::vector<std::size_t> idx = coords;
  if (idx.empty()) {
    idx.resize(p.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  }
  std::vector<double> a_sel, n_sel;
  a_sel.reserve(idx.size());
  n_sel.reserve(idx.size());
  for (std::size_t i : idx) {
    const double saved = p.data()[i];
    p.data()[i] = saved + h;
    const double fp = loss_fn().value();
    p.data()[i] = saved - h;
    const double fm = loss_fn().value();
    p.data()[i] = saved;
    a_sel.push_back(analytic[i]);
    n_sel.push_back((fp - fm) / (2.0 * h));
  }
  return max_rel_error(a_sel, n_sel);
}

}  // namespace mhfilm
