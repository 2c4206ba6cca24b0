#pragma once

// Dense double-precision tensors with reverse-mode automatic differentiation.
// Ops record backward closures onto the thread's active Tape; without an
// active tape they are plain value computations. Layout is row-major, images
// are channel-first [C,H,W].

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "mhfilm/rng.hpp"

namespace mhfilm {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

enum class Mode { train, eval };

struct TensorImpl {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until the backward pass reaches it
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);  // zero-filled
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double v);
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);
  static Tensor normal(Shape shape, Rng& rng, double mean, double stddev);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->value.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape[i]; }

  double* data() { return impl_->value.data(); }
  const double* data() const { return impl_->value.data(); }
  std::vector<double>& values() { return impl_->value; }
  const std::vector<double>& values() const { return impl_->value; }

  double value() const;  // scalar read; requires numel() == 1
  double at(std::initializer_list<std::size_t> idx) const;
  double& at(std::initializer_list<std::size_t> idx);

  Tensor& set_requires_grad(bool b) {
    impl_->requires_grad = b;
    return *this;
  }
  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  const std::vector<double>& grad() const;
  void clear_grad() { impl_->grad.clear(); }

  Tensor clone() const;  // deep copy of values, no grad, no flag

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Ordered record of executed ops. Execution order is already topological, so
// backward is a single reverse sweep. One tape per logical thread.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  class Scope {
   public:
    explicit Scope(Tape& t);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  static Tape* current();

  void record(std::function<void()> backward_fn) {
    nodes_.push_back(std::move(backward_fn));
  }
  std::size_t size() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and sweeps the record once in reverse. A second
  // call without reset() is an error.
  void backward(const Tensor& loss);
  void reset();

 private:
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// ops

enum class Unary { relu, tanh_fn, sigmoid, log_fn, neg };
enum class Reduce { sum, mean };

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& a);  // value-only helper, differentiable

// y = W^T x (+ b): x [in], w [in,out], optional b [out]. Single graph node;
// the hot path for the recurrent cells and small projection heads.
Tensor linear_vec(const Tensor& x, const Tensor& w, const Tensor& b = Tensor());

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride,
              int padding);

Tensor unary_map(const Tensor& x, Unary f);
Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log(const Tensor& x);
Tensor neg(const Tensor& x);

// b may broadcast onto a: [C] onto [C,H,W] per channel, or [d] onto [N,d]
// per row.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);

Tensor affine(const Tensor& x, double mul, double shift);  // mul*x + shift

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.9;
  explicit BatchNormState(std::size_t channels)
      : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

// Normalization without learnable affine. Train mode standardizes with the
// per-channel spatial statistics of x and folds them into the running
// averages; eval mode uses the running statistics as constants.
Tensor frozen_batch_norm(const Tensor& x, BatchNormState& state, Mode mode,
                         double eps = 1e-5);

Tensor reduce(const Tensor& x, Reduce op, const std::vector<std::size_t>& axes);
Tensor reduce_all(const Tensor& x, Reduce op);

Tensor concat(const std::vector<Tensor>& xs, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start,
             std::size_t len);

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& indices);

Tensor dropout(const Tensor& x, double p, Mode mode, Rng& rng);

Tensor reshape(const Tensor& x, Shape shape);

// x [C,H,W], gamma/beta [C]: out[c,h,w] = gamma[c]*x[c,h,w] + beta[c]
Tensor film_scale_shift(const Tensor& x, const Tensor& gamma,
                        const Tensor& beta);

Tensor spatial_flatten(const Tensor& x);  // [C,H,W] -> [H*W, C]

Tensor clamp(const Tensor& x, double lo, double hi);
Tensor smooth_l1(const Tensor& x);  // elementwise huber, delta = 1

// ---------------------------------------------------------------------------
// gradient verification

// Max relative error with denominator max(|a|,|b|,1e-8).
double max_rel_error(const std::vector<double>& analytic,
                     const std::vector<double>& numeric);

// Compares the analytic gradient of f at x against central differences with
// step h, per coordinate. f must return a scalar tensor.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         const Tensor& x, double h = 1e-4);

// Same comparison for a parameter that is captured inside loss_fn's graph:
// runs backward once for the analytic gradient, then re-evaluates loss_fn
// with the parameter perturbed in place. Checks only the given coordinates
// (all when empty). loss_fn must be deterministic across calls.
double param_finite_diff_check(const Tensor& param,
                               const std::function<Tensor()>& loss_fn,
                               const std::vector<std::size_t>& coords = {},
                               double h = 1e-4);

}  // namespace mhfilm
