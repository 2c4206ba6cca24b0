#include <cstdlib>
#include <stdexcept>
#include <string>

#include "kernels_common.hpp"

namespace mhfilm::kernels {

const Ops& scalar_ops() {
  static const Ops table = {
      scalar_impl::add,
      scalar_impl::sub,
      scalar_impl::mul,
      scalar_impl::axpy,
      scalar_impl::scale_shift,
      scalar_impl::matmul,
      scalar_impl::matvec,
      scalar_impl::matvec_t,
      scalar_impl::conv2d,
      scalar_impl::conv2d_grad_input,
      scalar_impl::conv2d_grad_weight,
      scalar_impl::adam_update,
  };
  return table;
}

bool supports(Backend b) {
  switch (b) {
    case Backend::scalar:
      return true;
    case Backend::avx2:
#if defined(MHFILM_HAVE_AVX2) && (defined(__x86_64__) || defined(__i386__))
      return __builtin_cpu_supports("avx2") != 0;
#else
      return false;
#endif
  }
  return false;
}

const char* to_string(Backend b) {
  return b == Backend::avx2 ? "avx2" : "scalar";
}

const Ops& ops(Backend b) {
#if defined(MHFILM_HAVE_AVX2)
  if (b == Backend::avx2) return avx2_ops();
#endif
  if (b == Backend::avx2) {
    throw std::invalid_argument("kernel backend avx2 not built");
  }
  return scalar_ops();
}

namespace {

Backend initial_backend() {
  if (const char* env = std::getenv("MHFILM_KERNELS")) {
    const std::string name(env);
    if (name == "scalar") return Backend::scalar;
    if (name == "avx2" && supports(Backend::avx2)) return Backend::avx2;
    // Unknown or unsupported request falls through to detection.
  }
  return supports(Backend::avx2) ? Backend::avx2 : Backend::scalar;
}

Backend& current_backend() {
  static Backend b = initial_backend();
  return b;
}

}  // namespace

Backend active_backend() { return current_backend(); }

void select_backend(Backend b) {
  if (!supports(b)) {
    throw std::invalid_argument(std::string("kernel backend not supported: ") +
                                to_string(b));
  }
  current_backend() = b;
}

const Ops& active() { return ops(current_backend()); }

}  // namespace mhfilm::kernels
