#include "mhfilm/film.hpp"

#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace mhfilm::film {

const char* to_string(GeneratorMode m) {
  switch (m) {
    case GeneratorMode::baseline_nn: return "baseline_nn";
    case GeneratorMode::baseline_nn_mlb: return "baseline_nn_mlb";
    case GeneratorMode::single_hop: return "single_hop";
    case GeneratorMode::multi_hop: return "multi_hop";
    case GeneratorMode::multi_hop_img: return "multi_hop_img";
  }
  return "multi_hop";
}

const char* to_string(Task t) {
  switch (t) {
    case Task::oracle: return "oracle";
    case Task::guesser: return "guesser";
    case Task::pointer: return "pointer";
  }
  return "guesser";
}

GeneratorMode generator_mode_from(const std::string& s) {
  if (s == "baseline_nn") return GeneratorMode::baseline_nn;
  if (s == "baseline_nn_mlb") return GeneratorMode::baseline_nn_mlb;
  if (s == "single_hop") return GeneratorMode::single_hop;
  if (s == "multi_hop") return GeneratorMode::multi_hop;
  if (s == "multi_hop_img") return GeneratorMode::multi_hop_img;
  throw std::invalid_argument("unknown generator mode: " + s);
}

Task task_from(const std::string& s) {
  if (s == "oracle") return Task::oracle;
  if (s == "guesser") return Task::guesser;
  if (s == "pointer") return Task::pointer;
  throw std::invalid_argument("unknown task: " + s);
}

void ModelConfig::validate() const {
  if (!use_crop && !use_image) {
    throw std::invalid_argument("at least one of use_crop/use_image required");
  }
  if (blocks < 1) throw std::invalid_argument("blocks must be >= 1");
  if (glimpses < 1 || glimpses > 2) {
    throw std::invalid_argument("glimpses must be 1 or 2");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) {
    throw std::invalid_argument("dropout must be in [0,1)");
  }
  if (stem_channels < 1 || block_channels < 1 || head_channels < 1 ||
      d_wemb < 1 || d_rnn < 1 || d_mlb < 1 || d_spat < 1 || d_cat < 1 ||
      final_hidden < 1 || n_categories < 1) {
    throw std::invalid_argument("all model dimensions must be positive");
  }
}

ModelConfig ModelConfig::micro() {
  ModelConfig c;
  c.blocks = 2;
  c.stem_channels = 4;
  c.block_channels = 6;
  c.head_channels = 8;
  c.d_wemb = 5;
  c.d_rnn = 7;
  c.d_mlb = 6;
  c.d_spat = 5;
  c.d_cat = 4;
  c.final_hidden = 8;
  c.dropout = 0.0;
  return c;
}

// ---------------------------------------------------------------------------

Tensor mlb_fuse(const Tensor& f_column, const Tensor& e_l, const Tensor& u,
                const Tensor& v) {
  if (f_column.numel() != u.dim(0) || e_l.numel() != v.dim(0) ||
      u.dim(1) != v.dim(1)) {
    throw std::invalid_argument(
        "mlb_fuse projection mismatch: F " + shape_str(f_column.shape()) +
        " U " + shape_str(u.shape()) + " e_l " + shape_str(e_l.shape()) +
        " V " + shape_str(v.shape()));
  }
  Tensor fu = tanh(linear_vec(f_column, u));
  Tensor lv = tanh(linear_vec(e_l, v));
  return hadamard(fu, lv);
}

MlbAttention::MlbAttention(nn::ParamStore& params, const std::string& name,
                           std::size_t channels, std::size_t d_l,
                           std::size_t d_mlb, int glimpses_count, Rng& rng)
    : score_hidden(params, name + ".score1", d_mlb, d_mlb, rng),
      score_out(params, name + ".score2", d_mlb,
                static_cast<std::size_t>(glimpses_count), rng,
                /*zero_init=*/true),
      glimpses(glimpses_count) {
  u = params.add(name + ".u", nn::glorot({channels, d_mlb}, rng));
  v = params.add(name + ".v", nn::glorot({d_l, d_mlb}, rng));
}

AttentionResult MlbAttention::apply(const Tensor& features,
                                    const Tensor& e_l) const {
  if (features.rank() != 3 || features.dim(0) != u.dim(0)) {
    throw std::invalid_argument("attention expects [C,H,W] with C = " +
                                std::to_string(u.dim(0)) + ", got " +
                                shape_str(features.shape()));
  }
  const std::size_t c = features.dim(0);
  Tensor fm = spatial_flatten(features);            // [P, C]
  Tensor fu = tanh(matmul(fm, u));                  // [P, d_mlb]
  Tensor lv = tanh(linear_vec(e_l, v));
  Tensor fused = hadamard(fu, lv);                  // row broadcast
  Tensor hidden = relu(score_hidden.apply_rows(fused));
  Tensor scores = score_out.apply_rows(hidden);     // [P, glimpses]
  Tensor alpha = softmax(scores, 0);                // per glimpse column
  Tensor pooled = matmul(transpose2d(alpha), fm);   // [glimpses, C]
  AttentionResult out;
  out.e_v = reshape(pooled, {static_cast<std::size_t>(glimpses) * c});
  out.alpha = alpha;
  out.scores = scores;
  return out;
}

// ---------------------------------------------------------------------------

ContextChain::ContextChain(nn::ParamStore& params, const std::string& name,
                           std::size_t d_rnn, int hops, bool ln_enabled,
                           Rng& rng)
    : attn_hidden(params, name + ".attn1", 2 * d_rnn, d_rnn, rng),
      attn_out(params, name + ".attn2", d_rnn, 1, rng, /*zero_init=*/true),
      ln(params, name + ".ln", 2 * d_rnn),
      use_ln(ln_enabled),
      max_hops(hops) {}

ContextState ContextChain::init(const nn::LanguageEncoding& enc) const {
  ContextState s;
  s.hop = 0;
  s.c = enc.final_state;
  return s;
}

ContextState ContextChain::hop(const ContextState& prev,
                               const nn::LanguageEncoding& enc) const {
  if (prev.hop >= max_hops) {
    throw std::logic_error("context hop overflow: already at hop " +
                           std::to_string(prev.hop) + " of " +
                           std::to_string(max_hops));
  }
  const std::size_t t_len = enc.states.dim(0);
  Tensor fused = hadamard(enc.states, prev.c);  // c o s_t per row
  Tensor hidden = relu(attn_hidden.apply_rows(fused));
  Tensor chi = attn_out.apply_rows(hidden);  // [T,1]
  Tensor kappa = softmax(chi, 0);
  Tensor c_raw =
      reshape(matmul(transpose2d(kappa), enc.states), {enc.states.dim(1)});
  ContextState next;
  next.hop = prev.hop + 1;
  next.c = use_ln ? ln.apply(c_raw) : c_raw;
  next.kappa = reshape(kappa, {t_len});
  next.chi = reshape(chi, {t_len});
  return next;
}

std::vector<ContextState> ContextChain::run(
    const nn::LanguageEncoding& enc) const {
  std::vector<ContextState> chain;
  chain.reserve(static_cast<std::size_t>(max_hops));
  ContextState state = init(enc);
  for (int k = 0; k < max_hops; ++k) {
    state = hop(state, enc);
    chain.push_back(state);
  }
  return chain;
}

// ---------------------------------------------------------------------------

FilmGenerator::FilmGenerator(nn::ParamStore& params, const std::string& name,
                             int blocks, std::size_t input_dim,
                             std::size_t channels_count, Rng& rng)
    : channels(channels_count) {
  for (int k = 0; k < blocks; ++k) {
    block_proj.emplace_back(params, name + ".block" + std::to_string(k),
                            input_dim, 2 * channels_count, rng,
                            /*zero_init=*/true);
  }
}

FilmParams FilmGenerator::generate(const std::vector<Tensor>& context_parts,
                                   int block) const {
  if (block < 0 || static_cast<std::size_t>(block) >= block_proj.size()) {
    throw std::invalid_argument("film generator: block " +
                                std::to_string(block) + " out of range");
  }
  if (context_parts.empty()) {
    throw std::invalid_argument("film generator: empty context");
  }
  Tensor input = context_parts.size() == 1 ? context_parts[0]
                                           : concat(context_parts, 0);
  const auto& proj = block_proj[static_cast<std::size_t>(block)];
  if (input.numel() != proj.w.dim(0)) {
    throw std::invalid_argument(
        "film generator input dimension " + std::to_string(input.numel()) +
        " does not match projection " + shape_str(proj.w.shape()));
  }
  Tensor out = proj.apply_vec(input);
  FilmParams fp;
  fp.gamma = affine(slice(out, 0, 0, channels), 1.0, 1.0);  // 1 + delta
  fp.beta = slice(out, 0, channels, channels);
  return fp;
}

// ---------------------------------------------------------------------------

Tensor modulated_res_block(const Tensor& f_in, const Tensor& conv1,
                           const Tensor& conv3, BatchNormState& bn,
                           const Tensor& gamma, const Tensor& beta,
                           Mode mode) {
  Tensor a = relu(conv2d(f_in, conv1, 1, 0));
  Tensor fk = frozen_batch_norm(conv2d(a, conv3, 1, 1), bn, mode);
  return add(a, relu(film_scale_shift(fk, gamma, beta)));
}

PipelineResult VisualPipeline::forward(const Tensor& input,
                                       const nn::LanguageEncoding& enc,
                                       const SideInfo& side,
                                       GeneratorMode gen_mode, Mode mode,
                                       const std::vector<ContextState>* chain) {
  const std::size_t s = input.dim(1);
  Tensor x = concat({input, nn::coord_maps(s, s)}, 0);
  x = relu(frozen_batch_norm(conv2d(x, stem_kernel, 2, 1), stem_bn, mode));

  PipelineResult res;
  res.trace.pipeline = name;

  if (gen_mode == GeneratorMode::baseline_nn) {
    res.e_v = reduce(x, Reduce::mean, {1, 2});
    return res;
  }
  if (gen_mode == GeneratorMode::baseline_nn_mlb) {
    AttentionResult ar = attention.apply(x, enc.final_state);
    res.e_v = ar.e_v;
    res.trace.alphas.push_back(ar.alpha);
    return res;
  }

  std::vector<ContextState> local_chain;
  if (gen_mode != GeneratorMode::single_hop && !chain) {
    local_chain = context.run(enc);
    chain = &local_chain;
  }

  Tensor f = x;
  const int k_blocks = static_cast<int>(blocks.size());
  for (int k = 0; k < k_blocks; ++k) {
    Tensor ctx;
    if (gen_mode == GeneratorMode::single_hop) {
      ctx = enc.final_state;
    } else {
      const ContextState& state = (*chain)[static_cast<std::size_t>(k)];
      res.trace.hops.push_back(state);
      ctx = state.c;
    }
    ResBlock& blk = blocks[static_cast<std::size_t>(k)];
    const std::size_t h = f.dim(1), w = f.dim(2);
    Tensor pre = concat({f, nn::coord_maps(h, w)}, 0);
    Tensor a = relu(conv2d(pre, blk.conv1, 1, 0));
    Tensor fk = frozen_batch_norm(conv2d(a, blk.conv3, 1, 1), blk.bn, mode);

    std::vector<Tensor> ctx_parts = {ctx};
    if (side.e_spat) ctx_parts.push_back(*side.e_spat);
    if (side.e_cat) ctx_parts.push_back(*side.e_cat);
    if (gen_mode == GeneratorMode::multi_hop_img) {
      // pooled features taken immediately before modulation
      ctx_parts.push_back(reduce(fk, Reduce::mean, {1, 2}));
    }
    FilmParams fp = generator.generate(ctx_parts, k);
    f = add(a, relu(film_scale_shift(fk, fp.gamma, fp.beta)));
  }

  const std::size_t h = f.dim(1), w = f.dim(2);
  Tensor pre_head = concat({f, nn::coord_maps(h, w)}, 0);
  Tensor head =
      relu(frozen_batch_norm(conv2d(pre_head, head_kernel, 1, 0), head_bn,
                             mode));
  AttentionResult ar = attention.apply(head, enc.final_state);
  res.e_v = ar.e_v;
  res.trace.alphas.push_back(ar.alpha);
  return res;
}

// ---------------------------------------------------------------------------

namespace {

bool is_baseline(GeneratorMode m) {
  return m == GeneratorMode::baseline_nn || m == GeneratorMode::baseline_nn_mlb;
}

bool is_multi(GeneratorMode m) {
  return m == GeneratorMode::multi_hop || m == GeneratorMode::multi_hop_img;
}

}  // namespace

int answer_class(games::Answer a) {
  switch (a) {
    case games::Answer::yes: return 0;
    case games::Answer::no: return 1;
    case games::Answer::na: return 2;
  }
  return 2;
}


Model::Model(const ModelConfig& cfg, const games::Vocabulary& vocab,
             Rng& init_rng)
    : cfg_(cfg), vocab_(vocab) {
  if (cfg_.task == Task::pointer) {
    // no crop and no object side information for the pointing task
    cfg_.use_crop = false;
    cfg_.use_image = true;
    cfg_.use_category = false;
  }
  cfg_.validate();

  const std::size_t d_state = 2 * static_cast<std::size_t>(cfg_.d_rnn);
  encoder_ = nn::BiGruEncoder(params_, "lang", vocab_.size(),
                              static_cast<std::size_t>(cfg_.d_wemb),
                              static_cast<std::size_t>(cfg_.d_rnn),
                              cfg_.dropout, init_rng);
  const bool side_info = cfg_.task != Task::pointer;
  if (side_info) {
    spatial_ = nn::SpatialEmbed(params_, "obj.spat",
                                static_cast<std::size_t>(cfg_.d_spat),
                                init_rng);
    if (cfg_.use_category) {
      category_ = nn::CategoryEmbed(
          params_, "obj.cat", static_cast<std::size_t>(cfg_.n_categories),
          static_cast<std::size_t>(cfg_.d_cat), init_rng);
    }
  }
  std::size_t side_dim = 0;
  if (side_info) {
    side_dim = static_cast<std::size_t>(cfg_.d_spat) +
               (cfg_.use_category ? static_cast<std::size_t>(cfg_.d_cat) : 0);
  }

  const auto build_pipeline = [&](VisualPipeline& p, const std::string& name,
                                  bool with_mask) {
    p.name = name;
    const std::size_t in_ch = 3 + (with_mask ? 1 : 0) + 2;  // + coord maps
    const std::size_t stem_c = static_cast<std::size_t>(cfg_.stem_channels);
    const std::size_t blk_c = static_cast<std::size_t>(cfg_.block_channels);
    const std::size_t head_c = static_cast<std::size_t>(cfg_.head_channels);
    p.stem_kernel = params_.add(name + ".stem.w",
                                nn::glorot({stem_c, in_ch, 3, 3}, init_rng),
                                /*conv_kernel=*/true);
    p.stem_bn = BatchNormState(stem_c);
    if (is_baseline(cfg_.mode)) {
      if (cfg_.mode == GeneratorMode::baseline_nn_mlb) {
        p.attention = MlbAttention(params_, name + ".attn", stem_c, d_state,
                                   static_cast<std::size_t>(cfg_.d_mlb),
                                   cfg_.glimpses, init_rng);
      }
      return;
    }
    std::size_t prev = stem_c;
    for (int k = 0; k < cfg_.blocks; ++k) {
      ResBlock blk;
      const std::string bname = name + ".block" + std::to_string(k);
      blk.conv1 = params_.add(bname + ".conv1.w",
                              nn::glorot({blk_c, prev + 2, 1, 1}, init_rng),
                              true);
      blk.conv3 = params_.add(bname + ".conv3.w",
                              nn::glorot({blk_c, blk_c, 3, 3}, init_rng),
                              true);
      blk.bn = BatchNormState(blk_c);
      p.blocks.push_back(std::move(blk));
      prev = blk_c;
    }
    p.head_kernel = params_.add(name + ".head.w",
                                nn::glorot({head_c, prev + 2, 1, 1}, init_rng),
                                true);
    p.head_bn = BatchNormState(head_c);
    p.attention = MlbAttention(params_, name + ".attn", head_c, d_state,
                               static_cast<std::size_t>(cfg_.d_mlb),
                               cfg_.glimpses, init_rng);
    if (is_multi(cfg_.mode)) {
      p.context = ContextChain(params_, name + ".ctx",
                               static_cast<std::size_t>(cfg_.d_rnn),
                               cfg_.blocks, cfg_.context_layer_norm, init_rng);
      std::size_t gen_in = d_state + side_dim;
      if (cfg_.mode == GeneratorMode::multi_hop_img) gen_in += blk_c;
      p.generator = FilmGenerator(params_, name + ".film", cfg_.blocks,
                                  gen_in, blk_c, init_rng);
    } else {  // single_hop
      p.generator = FilmGenerator(params_, name + ".film", cfg_.blocks,
                                  d_state + side_dim, blk_c, init_rng);
    }
  };

  if (cfg_.use_image) build_pipeline(img_, "img", side_info);
  if (cfg_.use_crop) build_pipeline(crop_, "crop", true);
  if (cfg_.share_attn_mlp && cfg_.use_image && cfg_.use_crop &&
      is_multi(cfg_.mode)) {
    crop_.context.attn_hidden = img_.context.attn_hidden;
    crop_.context.attn_out = img_.context.attn_out;
  }

  std::size_t e_v_dim;
  if (is_baseline(cfg_.mode)) {
    const std::size_t per =
        cfg_.mode == GeneratorMode::baseline_nn
            ? static_cast<std::size_t>(cfg_.stem_channels)
            : static_cast<std::size_t>(cfg_.stem_channels) * cfg_.glimpses;
    e_v_dim = per * ((cfg_.use_image ? 1 : 0) + (cfg_.use_crop ? 1 : 0)) +
              d_state + side_dim;
  } else {
    const std::size_t per =
        static_cast<std::size_t>(cfg_.head_channels) * cfg_.glimpses;
    e_v_dim = per * ((cfg_.use_image ? 1 : 0) + (cfg_.use_crop ? 1 : 0));
  }
  final_proj_ = nn::Linear(params_, "final.proj", e_v_dim,
                           static_cast<std::size_t>(cfg_.final_hidden),
                           init_rng);
  const std::size_t head_out =
      cfg_.task == Task::oracle ? 3 : cfg_.task == Task::guesser ? 1 : 4;
  task_head_ = nn::Linear(params_, "final.head",
                          static_cast<std::size_t>(cfg_.final_hidden),
                          head_out, init_rng);
}

std::vector<std::pair<std::string, std::vector<double>*>>
Model::state_vectors() {
  std::vector<std::pair<std::string, std::vector<double>*>> out;
  const auto add_pipe = [&](VisualPipeline& p) {
    if (p.name.empty()) return;
    out.push_back({p.name + ".stem.bn.mean", &p.stem_bn.running_mean});
    out.push_back({p.name + ".stem.bn.var", &p.stem_bn.running_var});
    for (std::size_t k = 0; k < p.blocks.size(); ++k) {
      const std::string b = p.name + ".block" + std::to_string(k) + ".bn";
      out.push_back({b + ".mean", &p.blocks[k].bn.running_mean});
      out.push_back({b + ".var", &p.blocks[k].bn.running_var});
    }
    if (p.head_kernel.defined()) {
      out.push_back({p.name + ".head.bn.mean", &p.head_bn.running_mean});
      out.push_back({p.name + ".head.bn.var", &p.head_bn.running_var});
    }
  };
  add_pipe(img_);
  add_pipe(crop_);
  return out;
}

Tensor Model::pipeline_input(const games::Game& game, std::size_t object,
                             bool crop) const {
  if (crop) {
    return concat({games::render_crop(game, object),
                   games::crop_mask_channel(game, object)},
                  0);
  }
  if (!render_cache_.defined() || render_cache_id_ != game.id) {
    render_cache_ = games::render_image(game);
    render_cache_id_ = game.id;
  }
  if (cfg_.task == Task::pointer) return render_cache_;
  return concat({render_cache_, games::mask_channel(game, object)}, 0);
}

TaskOutput Model::forward(const games::Game& game, Mode mode, Rng& rng) {
  if (game.objects.empty() || game.dialogue.empty()) {
    throw std::invalid_argument("model_forward: game lacks objects/dialogue");
  }
  const games::DialogueView view =
      cfg_.task == Task::oracle
          ? (cfg_.oracle_full_dialogue ? games::DialogueView::oracle_context
                                       : games::DialogueView::last_question)
          : games::DialogueView::full_with_answers;
  TaskOutput out;
  out.task = cfg_.task;
  out.tokens = games::tokenize_dialogue(game, vocab_, view);
  nn::LanguageEncoding enc = encoder_.encode(out.tokens.ids, mode, rng);

  HopTrace img_trace, crop_trace;
  img_trace.pipeline = "img";
  crop_trace.pipeline = "crop";
  bool traces_taken = false;

  // the hop chain depends only on the language, so it is shared across the
  // per-object passes of a game
  const bool multi = is_multi(cfg_.mode);
  std::vector<ContextState> img_chain, crop_chain;
  if (multi && cfg_.use_image) img_chain = img_.context.run(enc);
  if (multi && cfg_.use_crop) crop_chain = crop_.context.run(enc);

  const auto run_object = [&](std::size_t obj) -> Tensor {
    SideInfo side;
    if (cfg_.task != Task::pointer) {
      const games::GameObject& o = game.objects[obj];
      const double s = static_cast<double>(game.image_size());
      side.e_spat = spatial_.apply(
          nn::spatial_vector(o.bbox.x, o.bbox.y, o.bbox.w, o.bbox.h, s, s));
      if (cfg_.use_category) side.e_cat = category_.apply(o.category);
    }
    std::vector<Tensor> parts;
    if (cfg_.use_image) {
      PipelineResult r = img_.forward(pipeline_input(game, obj, false), enc,
                                      side, cfg_.mode, mode,
                                      multi ? &img_chain : nullptr);
      parts.push_back(r.e_v);
      if (!traces_taken) img_trace.hops = r.trace.hops;
      for (Tensor& a : r.trace.alphas) img_trace.alphas.push_back(a);
    }
    if (cfg_.use_crop) {
      PipelineResult r = crop_.forward(pipeline_input(game, obj, true), enc,
                                       side, cfg_.mode, mode,
                                       multi ? &crop_chain : nullptr);
      parts.push_back(r.e_v);
      if (!traces_taken) crop_trace.hops = r.trace.hops;
      for (Tensor& a : r.trace.alphas) crop_trace.alphas.push_back(a);
    }
    traces_taken = true;
    if (is_baseline(cfg_.mode)) {
      parts.push_back(enc.final_state);
      if (side.e_spat) parts.push_back(*side.e_spat);
      if (side.e_cat) parts.push_back(*side.e_cat);
    }
    Tensor e_final = parts.size() == 1 ? parts[0] : concat(parts, 0);
    return relu(final_proj_.apply_vec(e_final));
  };

  switch (cfg_.task) {
    case Task::oracle: {
      Tensor h = run_object(static_cast<std::size_t>(game.target));
      out.oracle_probs = softmax(task_head_.apply_vec(h), 0);
      break;
    }
    case Task::guesser: {
      for (std::size_t obj = 0; obj < game.objects.size(); ++obj) {
        Tensor h = run_object(obj);
        Tensor logit = task_head_.apply_vec(h);
        out.guesser_logits.push_back(logit);
        out.guesser_sigma.push_back(sigmoid(logit));
      }
      break;
    }
    case Task::pointer: {
      Tensor h = run_object(static_cast<std::size_t>(game.target));
      out.pointer_box = task_head_.apply_vec(h);
      break;
    }
  }
  if (cfg_.use_image) out.traces.push_back(std::move(img_trace));
  if (cfg_.use_crop) out.traces.push_back(std::move(crop_trace));
  return out;
}

Tensor Model::loss(const TaskOutput& out, const games::Game& game) const {
  switch (cfg_.task) {
    case Task::oracle: {
      const int truth = answer_class(game.dialogue.back().answer);
      Tensor p = clamp(out.oracle_probs, 1e-12, 1.0);
      return neg(reduce_all(
          log(slice(p, 0, static_cast<std::size_t>(truth), 1)), Reduce::sum));
    }
    case Task::guesser: {
      const std::size_t phi = out.guesser_sigma.size();
      if (cfg_.guesser_softmax_loss) {
        std::vector<Tensor> logits;
        for (const Tensor& l : out.guesser_logits) logits.push_back(l);
        Tensor probs = softmax(concat(logits, 0), 0);
        Tensor p = clamp(probs, 1e-12, 1.0);
        return neg(reduce_all(
            log(slice(p, 0, static_cast<std::size_t>(game.target), 1)),
            Reduce::sum));
      }
      std::vector<Tensor> terms;
      for (std::size_t obj = 0; obj < phi; ++obj) {
        Tensor sig = clamp(out.guesser_sigma[obj], 1e-7, 1.0 - 1e-7);
        Tensor p_correct = obj == static_cast<std::size_t>(game.target)
                               ? sig
                               : affine(sig, -1.0, 1.0);
        terms.push_back(log(p_correct));
      }
      Tensor total = reduce_all(concat(terms, 0), Reduce::sum);
      return affine(total, -1.0 / static_cast<double>(phi), 0.0);
    }
    case Task::pointer: {
      const games::GameObject& o =
          game.objects[static_cast<std::size_t>(game.target)];
      const double s = static_cast<double>(game.image_size());
      const auto sv =
          nn::spatial_vector(o.bbox.x, o.bbox.y, o.bbox.w, o.bbox.h, s, s);
      Tensor truth(Shape{4}, {sv[0], sv[1], sv[6], sv[7]});
      return reduce_all(smooth_l1(sub(out.pointer_box, truth)), Reduce::mean);
    }
  }
  throw std::logic_error("unreachable task");
}

std::string format_hop_trace(std::uint64_t game_id, const HopTrace& trace) {
  std::ostringstream os;
  os << std::setprecision(17);
  const std::size_t k = trace.hops.size();
  const std::size_t t_len = k == 0 ? 0 : trace.hops[0].kappa.numel();
  os << game_id << ' ' << trace.pipeline << ' ' << k << ' ' << t_len << '\n';
  for (const ContextState& s : trace.hops) {
    for (std::size_t t = 0; t < s.kappa.numel(); ++t) {
      if (t) os << '\t';
      os << s.kappa.values()[t];
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace mhfilm::film
