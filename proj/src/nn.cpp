#include "mhfilm/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace mhfilm::nn {

Tensor ParamStore::add(const std::string& name, Tensor t, bool conv_kernel) {
  if (find(name)) {
    throw std::invalid_argument("duplicate parameter name: " + name);
  }
  t.set_requires_grad(true);
  entries.push_back({name, t, conv_kernel});
  return t;
}

Tensor* ParamStore::find(const std::string& name) {
  for (auto& e : entries) {
    if (e.name == name) return &e.tensor;
  }
  return nullptr;
}

const Tensor* ParamStore::find(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return &e.tensor;
  }
  return nullptr;
}

void ParamStore::zero_grads() {
  for (auto& e : entries) e.tensor.clear_grad();
}

Tensor glorot(Shape shape, Rng& rng) {
  std::size_t fan_in = 0, fan_out = 0;
  if (shape.size() == 2) {  // [in, out]
    fan_in = shape[0];
    fan_out = shape[1];
  } else if (shape.size() == 4) {  // [cout, cin, kh, kw]
    fan_in = shape[1] * shape[2] * shape[3];
    fan_out = shape[0] * shape[2] * shape[3];
  } else {
    throw std::invalid_argument("glorot init expects rank 2 or 4, got " +
                                shape_str(shape));
  }
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return Tensor::uniform(std::move(shape), rng, -bound, bound);
}

Tensor table_init(Shape shape, Rng& rng) {
  return Tensor::normal(std::move(shape), rng, 0.0, 0.01);
}

Linear::Linear(ParamStore& params, const std::string& name, std::size_t in,
               std::size_t out, Rng& rng, bool zero_init, bool bias) {
  Tensor weight =
      zero_init ? Tensor::zeros({in, out}) : glorot({in, out}, rng);
  w = params.add(name + ".w", weight);
  if (bias) b = params.add(name + ".b", Tensor::zeros({out}));
}

Tensor Linear::apply_vec(const Tensor& x) const {
  return linear_vec(x, w, b);
}

Tensor Linear::apply_rows(const Tensor& x) const {
  Tensor y = matmul(x, w);
  if (b.defined()) y = add(y, b);
  return y;
}

LayerNormParams::LayerNormParams(ParamStore& params, const std::string& name,
                                 std::size_t d) {
  gain = params.add(name + ".gain", Tensor::full({d}, 1.0));
  bias = params.add(name + ".bias", Tensor::zeros({d}));
}

GruCell::GruCell(ParamStore& params, const std::string& name, std::size_t din,
                 std::size_t dh, Rng& rng)
    : ln_r(params, name + ".ln_r", dh),
      ln_z(params, name + ".ln_z", dh),
      ln_h(params, name + ".ln_h", dh),
      d_in(din),
      d_h(dh) {
  wr = params.add(name + ".wr", glorot({din, dh}, rng));
  ur = params.add(name + ".ur", glorot({dh, dh}, rng));
  wz = params.add(name + ".wz", glorot({din, dh}, rng));
  uz = params.add(name + ".uz", glorot({dh, dh}, rng));
  wh = params.add(name + ".wh", glorot({din, dh}, rng));
  uh = params.add(name + ".uh", glorot({dh, dh}, rng));
}

namespace {
Tensor vec_times(const Tensor& x, const Tensor& w) {
  return linear_vec(x, w);
}
}  // namespace

GruCell::StepTrace GruCell::step_trace(const Tensor& state,
                                       const Tensor& input) const {
  if (state.numel() != d_h || input.numel() != d_in) {
    throw std::invalid_argument(
        "gru_step dimension mismatch: state " + shape_str(state.shape()) +
        " input " + shape_str(input.shape()) + " expects state [" +
        std::to_string(d_h) + "] input [" + std::to_string(d_in) + "]");
  }
  StepTrace tr;
  tr.reset =
      sigmoid(ln_r.apply(add(vec_times(input, wr), vec_times(state, ur))));
  tr.update =
      sigmoid(ln_z.apply(add(vec_times(input, wz), vec_times(state, uz))));
  tr.candidate = tanh(ln_h.apply(
      add(vec_times(input, wh), vec_times(hadamard(tr.reset, state), uh))));
  // s' = (1-z)*s + z*cand
  tr.next = add(hadamard(affine(tr.update, -1.0, 1.0), state),
                hadamard(tr.update, tr.candidate));
  return tr;
}

Tensor GruCell::step(const Tensor& state, const Tensor& input) const {
  return step_trace(state, input).next;
}

BiGruEncoder::BiGruEncoder(ParamStore& params, const std::string& name,
                           std::size_t vocab, std::size_t d_wemb,
                           std::size_t drnn, double dropout_prob, Rng& rng)
    : fwd(params, name + ".fwd", d_wemb, drnn, rng),
      bwd(params, name + ".bwd", d_wemb, drnn, rng),
      dropout_p(dropout_prob),
      d_rnn(drnn) {
  embedding = params.add(name + ".embed", table_init({vocab, d_wemb}, rng));
}

LanguageEncoding BiGruEncoder::encode(const std::vector<int>& tokens,
                                      Mode mode, Rng& rng) const {
  if (tokens.empty()) {
    throw std::invalid_argument("bigru_encode: empty token sequence");
  }
  const std::size_t t_len = tokens.size();
  const std::size_t d_wemb = embedding.dim(1);
  Tensor emb = embedding_lookup(embedding, tokens);
  emb = dropout(emb, dropout_p, mode, rng);

  std::vector<Tensor> inputs(t_len);
  for (std::size_t t = 0; t < t_len; ++t) {
    inputs[t] = reshape(slice(emb, 0, t, 1), {d_wemb});
  }

  std::vector<Tensor> fwd_states(t_len), bwd_states(t_len);
  Tensor s = Tensor::zeros({d_rnn});
  for (std::size_t t = 0; t < t_len; ++t) {
    s = fwd.step(s, inputs[t]);
    fwd_states[t] = s;
  }
  s = Tensor::zeros({d_rnn});
  for (std::size_t t = t_len; t-- > 0;) {
    s = bwd.step(s, inputs[t]);
    bwd_states[t] = s;
  }

  std::vector<Tensor> rows(t_len);
  for (std::size_t t = 0; t < t_len; ++t) {
    rows[t] = concat({fwd_states[t], bwd_states[t]}, 0);
  }
  std::vector<Tensor> row_mats(t_len);
  for (std::size_t t = 0; t < t_len; ++t) {
    row_mats[t] = reshape(rows[t], {1u, 2 * d_rnn});
  }
  LanguageEncoding enc;
  enc.states = concat(row_mats, 0);
  enc.final_state = rows[t_len - 1];
  enc.token_ids = tokens;
  return enc;
}

std::array<double, 8> spatial_vector(double x, double y, double w, double h,
                                     double img_w, double img_h) {
  const auto sx = [img_w](double v) { return 2.0 * v / img_w - 1.0; };
  const auto sy = [img_h](double v) { return 2.0 * v / img_h - 1.0; };
  return {sx(x),          sy(y),          sx(x + w),       sy(y + h),
          sx(x + w / 2),  sy(y + h / 2),  2.0 * w / img_w, 2.0 * h / img_h};
}

SpatialEmbed::SpatialEmbed(ParamStore& params, const std::string& name,
                           std::size_t d_spat, Rng& rng)
    : proj(params, name, 8, d_spat, rng) {}

Tensor SpatialEmbed::apply(const std::array<double, 8>& x) const {
  Tensor in(Shape{8}, std::vector<double>(x.begin(), x.end()));
  return relu(proj.apply_vec(in));
}

CategoryEmbed::CategoryEmbed(ParamStore& params, const std::string& name,
                             std::size_t n_categories, std::size_t d_cat,
                             Rng& rng) {
  table = params.add(name + ".table", table_init({n_categories, d_cat}, rng));
}

Tensor CategoryEmbed::apply(int category) const {
  return reshape(embedding_lookup(table, {category}), {table.dim(1)});
}

Tensor coord_maps(std::size_t h, std::size_t w) {
  Tensor maps(Shape{2, h, w});
  double* m = maps.data();
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const double xv =
          w == 1 ? 0.0 : -1.0 + 2.0 * static_cast<double>(j) / (w - 1);
      const double yv =
          h == 1 ? 0.0 : -1.0 + 2.0 * static_cast<double>(i) / (h - 1);
      m[i * w + j] = xv;
      m[h * w + i * w + j] = yv;
    }
  }
  return maps;
}

}  // namespace mhfilm::nn
