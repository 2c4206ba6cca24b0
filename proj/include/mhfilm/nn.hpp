#pragma once

// Reusable building blocks: parameter registry, linear/layer-norm layers, a
// layer-normalized GRU with its bidirectional encoder, object embeddings, and
// coordinate feature maps.

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "mhfilm/tensor.hpp"

namespace mhfilm::nn {

// Ordered registry of named trainable tensors. Order is construction order,
// which makes initialization, optimizer sweeps, and checkpoints deterministic.
struct ParamStore {
  struct Entry {
    std::string name;
    Tensor tensor;
    bool conv_kernel = false;  // weight-decay scope
  };
  std::vector<Entry> entries;

  Tensor add(const std::string& name, Tensor t, bool conv_kernel = false);
  Tensor* find(const std::string& name);
  const Tensor* find(const std::string& name) const;
  void zero_grads();
};

Tensor glorot(Shape shape, Rng& rng);
Tensor table_init(Shape shape, Rng& rng);  // normal(0, 0.01)

// y = x*W + b with the weight stored input-major [in, out].
struct Linear {
  Tensor w, b;
  Linear() = default;
  Linear(ParamStore& params, const std::string& name, std::size_t in,
         std::size_t out, Rng& rng, bool zero_init = false, bool bias = true);
  Tensor apply_vec(const Tensor& x) const;   // [in] -> [out]
  Tensor apply_rows(const Tensor& x) const;  // [N,in] -> [N,out]
};

struct LayerNormParams {
  Tensor gain, bias;
  LayerNormParams() = default;
  LayerNormParams(ParamStore& params, const std::string& name, std::size_t d);
  Tensor apply(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

// GRU with one layer norm per gate pre-activation.
struct GruCell {
  Tensor wr, ur, wz, uz, wh, uh;
  LayerNormParams ln_r, ln_z, ln_h;
  std::size_t d_in = 0, d_h = 0;
  GruCell() = default;
  GruCell(ParamStore& params, const std::string& name, std::size_t d_in,
          std::size_t d_h, Rng& rng);
  struct StepTrace {
    Tensor reset, update, candidate, next;
  };
  StepTrace step_trace(const Tensor& state, const Tensor& input) const;
  Tensor step(const Tensor& state, const Tensor& input) const;
};

struct LanguageEncoding {
  Tensor states;       // [T, 2*d_rnn], row t = [fwd state t ; bwd state t]
  Tensor final_state;  // row T-1
  std::vector<int> token_ids;
};

struct BiGruEncoder {
  Tensor embedding;  // [V, d_wemb]
  GruCell fwd, bwd;
  double dropout_p = 0.0;
  std::size_t d_rnn = 0;
  BiGruEncoder() = default;
  BiGruEncoder(ParamStore& params, const std::string& name, std::size_t vocab,
               std::size_t d_wemb, std::size_t d_rnn, double dropout_p,
               Rng& rng);
  LanguageEncoding encode(const std::vector<int>& tokens, Mode mode,
                          Rng& rng) const;
};

// [x_min, y_min, x_max, y_max, x_center, y_center, w_box, h_box] with
// positions scaled so the image spans [-1,1] and extents in the same units
// (full image = 2). Box given in pixels as (x, y, w, h).
std::array<double, 8> spatial_vector(double x, double y, double w, double h,
                                     double img_w, double img_h);

struct SpatialEmbed {
  Linear proj;  // 8 -> d_spat, ReLU
  SpatialEmbed() = default;
  SpatialEmbed(ParamStore& params, const std::string& name, std::size_t d_spat,
               Rng& rng);
  Tensor apply(const std::array<double, 8>& x) const;
};

struct CategoryEmbed {
  Tensor table;  // [n_categories, d_cat]
  CategoryEmbed() = default;
  CategoryEmbed(ParamStore& params, const std::string& name,
                std::size_t n_categories, std::size_t d_cat, Rng& rng);
  Tensor apply(int category) const;
};

// [2,h,w]: map 0 ramps -1..1 along x, map 1 along y; a degenerate axis
// (extent 1) yields the zero map.
Tensor coord_maps(std::size_t h, std::size_t w);

}  // namespace mhfilm::nn
