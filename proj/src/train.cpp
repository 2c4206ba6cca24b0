#include "mhfilm/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "mhfilm/kernels.hpp"

namespace mhfilm::train {

namespace {

double clamp01(double v, double lo, double hi) {
  return std::min(std::max(v, lo), hi);
}

std::size_t argmax_lowest(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

}  // namespace

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(nn::ParamStore& params, AdamConfig cfg)
    : params_(&params), cfg_(cfg) {
  for (const auto& e : params.entries) {
    m_.emplace_back(e.tensor.numel(), 0.0);
    v_.emplace_back(e.tensor.numel(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  kernels::AdamScalars sc;
  sc.beta1 = cfg_.beta1;
  sc.beta2 = cfg_.beta2;
  sc.lr = cfg_.lr;
  sc.eps = cfg_.eps;
  sc.bias1 = 1.0 / (1.0 - std::pow(cfg_.beta1, static_cast<double>(t_)));
  sc.bias2 = 1.0 / (1.0 - std::pow(cfg_.beta2, static_cast<double>(t_)));
  const auto& K = kernels::active();
  std::vector<double> zero;
  for (std::size_t i = 0; i < params_->entries.size(); ++i) {
    auto& e = params_->entries[i];
    const std::size_t n = e.tensor.numel();
    const double* g;
    if (e.tensor.has_grad()) {
      g = e.tensor.grad().data();
      for (std::size_t j = 0; j < n; ++j) {
        if (!std::isfinite(g[j])) {
          throw DivergenceError("non-finite gradient in parameter " + e.name);
        }
      }
    } else {
      if (zero.size() < n) zero.assign(n, 0.0);
      g = zero.data();
    }
    double* p = e.tensor.data();
    if (e.conv_kernel && cfg_.weight_decay > 0.0) {
      K.scale_shift(p, 1.0 - cfg_.lr * cfg_.weight_decay, 0.0, p, n);
    }
    K.adam_update(p, m_[i].data(), v_[i].data(), g, sc, n);
  }
}

std::vector<std::pair<std::string, std::vector<double>*>>
Adam::state_vectors() {
  std::vector<std::pair<std::string, std::vector<double>*>> out;
  for (std::size_t i = 0; i < params_->entries.size(); ++i) {
    out.push_back({"opt.m." + params_->entries[i].name, &m_[i]});
    out.push_back({"opt.v." + params_->entries[i].name, &v_[i]});
  }
  return out;
}

// ---------------------------------------------------------------------------
// losses and metrics

Tensor guesser_loss(const std::vector<std::vector<Tensor>>& sigma_per_game,
                    const std::vector<int>& targets) {
  if (sigma_per_game.empty() || sigma_per_game.size() != targets.size()) {
    throw std::invalid_argument("guesser_loss: games/targets mismatch");
  }
  std::vector<Tensor> per_game;
  for (std::size_t n = 0; n < sigma_per_game.size(); ++n) {
    const auto& sigmas = sigma_per_game[n];
    const std::size_t phi = sigmas.size();
    std::vector<Tensor> terms;
    for (std::size_t obj = 0; obj < phi; ++obj) {
      Tensor sig = clamp(sigmas[obj], 1e-7, 1.0 - 1e-7);
      Tensor p_correct = obj == static_cast<std::size_t>(targets[n])
                             ? sig
                             : affine(sig, -1.0, 1.0);
      terms.push_back(reshape(log(p_correct), {1u}));
    }
    Tensor game_sum = reduce_all(concat(terms, 0), Reduce::sum);
    per_game.push_back(reshape(
        affine(game_sum, -1.0 / static_cast<double>(phi), 0.0), {1u}));
  }
  return reduce_all(concat(per_game, 0), Reduce::mean);
}

double guesser_error(const std::vector<std::vector<double>>& sigma_per_game,
                     const std::vector<int>& targets) {
  if (sigma_per_game.empty() || sigma_per_game.size() != targets.size()) {
    throw std::invalid_argument("guesser_error: games/targets mismatch");
  }
  std::size_t wrong = 0;
  for (std::size_t n = 0; n < sigma_per_game.size(); ++n) {
    if (argmax_lowest(sigma_per_game[n]) !=
        static_cast<std::size_t>(targets[n])) {
      ++wrong;
    }
  }
  return static_cast<double>(wrong) /
         static_cast<double>(sigma_per_game.size());
}

Tensor oracle_loss(const std::vector<Tensor>& distributions,
                   const std::vector<int>& truth_classes) {
  if (distributions.empty() || distributions.size() != truth_classes.size()) {
    throw std::invalid_argument("oracle_loss: games/labels mismatch");
  }
  std::vector<Tensor> per_game;
  for (std::size_t n = 0; n < distributions.size(); ++n) {
    Tensor p = clamp(distributions[n], 1e-12, 1.0);
    per_game.push_back(neg(
        log(slice(p, 0, static_cast<std::size_t>(truth_classes[n]), 1))));
  }
  return reduce_all(concat(per_game, 0), Reduce::mean);
}

PointerErrors pointer_metrics(const games::BBox& predicted,
                              const games::BBox& truth) {
  games::BBox p = predicted;
  p.w = std::max(p.w, 1e-9);
  p.h = std::max(p.h, 1e-9);
  const double v = games::iou(p, truth);
  PointerErrors e;
  e.at30 = v < 0.3 ? 1.0 : 0.0;
  e.at50 = v < 0.5 ? 1.0 : 0.0;
  e.at70 = v < 0.7 ? 1.0 : 0.0;
  return e;
}

// ---------------------------------------------------------------------------
// attention analysis

AttentionStats attention_analysis(
    const std::vector<film::HopTrace>& traces,
    const std::vector<games::TokenizedDialogue>& dialogues) {
  if (traces.size() != dialogues.size()) {
    throw std::invalid_argument("attention_analysis: trace/dialogue mismatch");
  }
  AttentionStats stats;
  stats.games_count = traces.size();
  if (traces.empty()) return stats;
  const std::size_t hops = traces[0].hops.size();
  stats.per_hop_last_q.assign(hops, 0.0);
  stats.per_hop_answer.assign(hops, 0.0);
  std::size_t top1_hits = 0, answer_hits = 0;
  for (std::size_t n = 0; n < traces.size(); ++n) {
    const auto& trace = traces[n];
    const auto& dlg = dialogues[n];
    if (trace.hops.size() != hops) {
      throw std::invalid_argument("attention_analysis: ragged hop counts");
    }
    const std::set<std::size_t> answers(dlg.answer_positions.begin(),
                                        dlg.answer_positions.end());
    for (std::size_t k = 0; k < hops; ++k) {
      const auto& kappa = trace.hops[k].kappa.values();
      if (kappa.size() != dlg.ids.size()) {
        throw std::invalid_argument(
            "attention_analysis: trace length " +
            std::to_string(kappa.size()) + " does not match dialogue length " +
            std::to_string(dlg.ids.size()));
      }
      const std::size_t top1 = argmax_lowest(kappa);
      if (top1 >= dlg.last_q_begin && top1 < dlg.last_q_end) {
        ++top1_hits;
        stats.per_hop_last_q[k] += 1.0;
      }
      // top-3 by weight, ties toward the lowest index
      std::vector<std::size_t> order(kappa.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) {
                         return kappa[a] > kappa[b];
                       });
      bool hit = false;
      for (std::size_t r = 0; r < std::min<std::size_t>(3, order.size());
           ++r) {
        if (answers.count(order[r])) hit = true;
      }
      if (hit) {
        ++answer_hits;
        stats.per_hop_answer[k] += 1.0;
      }
    }
  }
  const double denom = static_cast<double>(traces.size() * std::max<std::size_t>(hops, 1));
  stats.last_q_rate = static_cast<double>(top1_hits) / denom;
  stats.answer_rate = static_cast<double>(answer_hits) / denom;
  for (double& v : stats.per_hop_last_q) v /= static_cast<double>(traces.size());
  for (double& v : stats.per_hop_answer) v /= static_cast<double>(traces.size());
  return stats;
}

// ---------------------------------------------------------------------------
// evaluation

namespace {

bool is_multi_mode(const film::ModelConfig& cfg) {
  return cfg.mode == film::GeneratorMode::multi_hop ||
         cfg.mode == film::GeneratorMode::multi_hop_img;
}

// crop attention when available, image otherwise
const film::HopTrace* analysis_trace(const film::TaskOutput& out) {
  const film::HopTrace* pick = nullptr;
  for (const auto& tr : out.traces) {
    if (tr.hops.empty()) continue;
    if (tr.pipeline == "crop") return &tr;
    pick = &tr;
  }
  return pick;
}

}  // namespace

EvalResult evaluate(film::Model& model, const std::vector<games::Game>& games_list,
                    bool with_attention) {
  if (games_list.empty()) {
    throw std::invalid_argument("evaluate: empty game list");
  }
  const film::Task task = model.config().task;
  EvalResult res;
  Rng rng(0);  // eval mode draws nothing
  double loss_sum = 0, err_sum = 0, e30 = 0, e50 = 0, e70 = 0;
  std::vector<film::HopTrace> traces;
  std::vector<games::TokenizedDialogue> dialogues;
  for (const games::Game& g : games_list) {
    film::TaskOutput out = model.forward(g, Mode::eval, rng);
    switch (task) {
      case film::Task::oracle: {
        const int truth = film::answer_class(g.dialogue.back().answer);
        const auto& p = out.oracle_probs.values();
        loss_sum -= std::log(clamp01(p[static_cast<std::size_t>(truth)],
                                     1e-12, 1.0));
        err_sum += argmax_lowest(p) == static_cast<std::size_t>(truth) ? 0 : 1;
        break;
      }
      case film::Task::guesser: {
        std::vector<double> sigma;
        for (const Tensor& s : out.guesser_sigma) sigma.push_back(s.value());
        double game_sum = 0;
        for (std::size_t obj = 0; obj < sigma.size(); ++obj) {
          const double s = clamp01(sigma[obj], 1e-7, 1.0 - 1e-7);
          game_sum += std::log(
              obj == static_cast<std::size_t>(g.target) ? s : 1.0 - s);
        }
        loss_sum += -game_sum / static_cast<double>(sigma.size());
        err_sum +=
            argmax_lowest(sigma) == static_cast<std::size_t>(g.target) ? 0 : 1;
        break;
      }
      case film::Task::pointer: {
        loss_sum += model.loss(out, g).value();
        const auto& b = out.pointer_box.values();
        const games::GameObject& o =
            g.objects[static_cast<std::size_t>(g.target)];
        const double s = static_cast<double>(g.image_size());
        const auto sv =
            nn::spatial_vector(o.bbox.x, o.bbox.y, o.bbox.w, o.bbox.h, s, s);
        const PointerErrors pe = pointer_metrics(
            {b[0], b[1], b[2], b[3]}, {sv[0], sv[1], sv[6], sv[7]});
        e30 += pe.at30;
        e50 += pe.at50;
        e70 += pe.at70;
        err_sum += pe.at50;  // headline error: IoU < 0.5
        break;
      }
    }
    if (with_attention && is_multi_mode(model.config())) {
      if (const film::HopTrace* tr = analysis_trace(out)) {
        traces.push_back(*tr);
        dialogues.push_back(out.tokens);
      }
    }
  }
  const double n = static_cast<double>(games_list.size());
  res.loss = loss_sum / n;
  res.error = err_sum / n;
  if (task == film::Task::pointer) {
    res.err30 = e30 / n;
    res.err50 = e50 / n;
    res.err70 = e70 / n;
  }
  if (!traces.empty()) {
    const AttentionStats stats = attention_analysis(traces, dialogues);
    res.attn_last_q_rate = stats.last_q_rate;
    res.attn_answer_rate = stats.answer_rate;
  }
  return res;
}

// ---------------------------------------------------------------------------
// training loop

namespace {

struct Snapshot {
  std::vector<std::vector<double>> params;
  std::vector<std::vector<double>> states;
};

Snapshot take_snapshot(film::Model& model) {
  Snapshot s;
  for (const auto& e : model.params().entries) s.params.push_back(e.tensor.values());
  for (const auto& [name, vec] : model.state_vectors()) s.states.push_back(*vec);
  return s;
}

void restore_snapshot(film::Model& model, const Snapshot& s) {
  auto& entries = model.params().entries;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    entries[i].tensor.values() = s.params[i];
  }
  auto states = model.state_vectors();
  for (std::size_t i = 0; i < states.size(); ++i) {
    *states[i].second = s.states[i];
  }
}

}  // namespace

TrainResult train(film::Model& model, Adam& adam,
                  const std::vector<games::Game>& dataset,
                  const TrainConfig& cfg, const MetricsSink& sink) {
  std::vector<games::Game> train_games, valid_games, test_games;
  for (const games::Game& g : dataset) {
    switch (g.split) {
      case games::Split::train: train_games.push_back(g); break;
      case games::Split::valid: valid_games.push_back(g); break;
      case games::Split::test: test_games.push_back(g); break;
    }
  }
  if (train_games.empty() || valid_games.empty()) {
    throw std::invalid_argument("train: dataset needs train and valid splits");
  }
  const film::Task task = model.config().task;
  Rng rng(cfg.seed);
  TrainResult result;
  result.best_valid_error = 2.0;  // any real error beats this
  Snapshot best = take_snapshot(model);

  const auto emit = [&](MetricsRecord rec) {
    rec.task = film::to_string(task);
    rec.mode = film::to_string(model.config().mode);
    result.history.push_back(rec);
    if (sink) sink(rec);
  };

  try {
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
      std::vector<std::size_t> order(train_games.size());
      std::iota(order.begin(), order.end(), 0);
      rng.shuffle(order);

      double loss_sum = 0, err_sum = 0;
      std::size_t seen = 0;
      for (std::size_t start = 0; start < order.size();
           start += static_cast<std::size_t>(cfg.batch)) {
        const std::size_t stop = std::min(
            order.size(), start + static_cast<std::size_t>(cfg.batch));
        const double inv_batch = 1.0 / static_cast<double>(stop - start);
        model.params().zero_grads();
        for (std::size_t i = start; i < stop; ++i) {
          const games::Game& g = train_games[order[i]];
          Tape tape;
          Tape::Scope scope(tape);
          film::TaskOutput out = model.forward(g, Mode::train, rng);
          Tensor loss = model.loss(out, g);
          const double lv = loss.value();
          if (!std::isfinite(lv)) {
            throw DivergenceError("training loss diverged at epoch " +
                                  std::to_string(epoch));
          }
          loss_sum += lv;
          switch (task) {
            case film::Task::oracle:
              err_sum += argmax_lowest(out.oracle_probs.values()) ==
                                 static_cast<std::size_t>(film::answer_class(
                                     g.dialogue.back().answer))
                             ? 0
                             : 1;
              break;
            case film::Task::guesser: {
              std::vector<double> sigma;
              for (const Tensor& s : out.guesser_sigma) {
                sigma.push_back(s.value());
              }
              err_sum += argmax_lowest(sigma) ==
                                 static_cast<std::size_t>(g.target)
                             ? 0
                             : 1;
              break;
            }
            case film::Task::pointer: {
              const auto& b = out.pointer_box.values();
              const games::GameObject& o =
                  g.objects[static_cast<std::size_t>(g.target)];
              const double s = static_cast<double>(g.image_size());
              const auto sv = nn::spatial_vector(o.bbox.x, o.bbox.y, o.bbox.w,
                                                 o.bbox.h, s, s);
              err_sum += pointer_metrics({b[0], b[1], b[2], b[3]},
                                         {sv[0], sv[1], sv[6], sv[7]})
                             .at50;
              break;
            }
          }
          ++seen;
          tape.backward(affine(loss, inv_batch, 0.0));
        }
        adam.step();
      }
      model.params().zero_grads();

      MetricsRecord train_rec;
      train_rec.epoch = epoch;
      train_rec.split = "train";
      train_rec.loss = loss_sum / static_cast<double>(seen);
      train_rec.error = err_sum / static_cast<double>(seen);
      emit(train_rec);

      const EvalResult val =
          evaluate(model, valid_games, cfg.attention_metrics);
      MetricsRecord valid_rec;
      valid_rec.epoch = epoch;
      valid_rec.split = "valid";
      valid_rec.loss = val.loss;
      valid_rec.error = val.error;
      valid_rec.attn_last_q_rate = val.attn_last_q_rate;
      valid_rec.attn_answer_rate = val.attn_answer_rate;
      valid_rec.err30 = val.err30;
      valid_rec.err50 = val.err50;
      valid_rec.err70 = val.err70;
      emit(valid_rec);

      if (val.error < result.best_valid_error) {
        result.best_valid_error = val.error;
        result.best_epoch = epoch;
        best = take_snapshot(model);
      }
      if (cfg.stop_at_zero_train_error && train_rec.error == 0.0) break;
    }
  } catch (...) {
    restore_snapshot(model, best);
    throw;
  }

  restore_snapshot(model, best);
  if (!test_games.empty()) {
    const EvalResult test = evaluate(model, test_games, cfg.attention_metrics);
    MetricsRecord test_rec;
    test_rec.epoch = result.best_epoch;
    test_rec.split = "test";
    test_rec.loss = test.loss;
    test_rec.error = test.error;
    test_rec.attn_last_q_rate = test.attn_last_q_rate;
    test_rec.attn_answer_rate = test.attn_answer_rate;
    test_rec.err30 = test.err30;
    test_rec.err50 = test.err50;
    test_rec.err70 = test.err70;
    emit(test_rec);
    result.final_test_error = test.error;
    result.final_test_loss = test.loss;
  }
  return result;
}

// ---------------------------------------------------------------------------
// model-wide gradient check

GradcheckReport gradcheck_model(const film::ModelConfig& cfg_in,
                                double tolerance,
                                const std::string& corrupt_param) {
  film::ModelConfig cfg = cfg_in;
  {
    const film::ModelConfig micro = film::ModelConfig::micro();
    cfg.blocks = micro.blocks;
    cfg.stem_channels = micro.stem_channels;
    cfg.block_channels = micro.block_channels;
    cfg.head_channels = micro.head_channels;
    cfg.d_wemb = micro.d_wemb;
    cfg.d_rnn = micro.d_rnn;
    cfg.d_mlb = micro.d_mlb;
    cfg.d_spat = micro.d_spat;
    cfg.d_cat = micro.d_cat;
    cfg.final_hidden = micro.final_hidden;
    cfg.dropout = 0.0;
  }
  games::GenConfig gen;
  gen.grid = 3;
  gen.cell_px = 2;
  gen.phi_min = gen.phi_max = 2;
  gen.dlg_min = 1;
  gen.dlg_max = 2;
  const auto corpus = games::generate_dataset(cfg.seed + 100, 12, gen);
  const games::Vocabulary vocab = games::vocabulary_from_games(corpus);
  const games::Game game = corpus[0];

  Rng init(cfg.seed);
  film::Model model(cfg, vocab, init);
  Rng noise(Rng::derive(cfg.seed, 0xA11));
  for (auto& e : model.params().entries) {
    for (double& v : e.tensor.values()) v += noise.normal(0.0, 0.2);
  }

  const auto loss_fn = [&]() {
    Rng fwd(1);
    film::TaskOutput out = model.forward(game, Mode::train, fwd);
    return model.loss(out, game);
  };

  model.params().zero_grads();
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = loss_fn();
    tape.backward(loss);
  }
  for (const auto& e : model.params().entries) {
    analytic.push_back(e.tensor.has_grad()
                           ? e.tensor.grad()
                           : std::vector<double>(e.tensor.numel(), 0.0));
  }
  model.params().zero_grads();

  GradcheckReport report;
  report.tolerance = tolerance;
  bool corrupted_found = corrupt_param.empty();
  Rng coord_rng(Rng::derive(cfg.seed, 0xC0));
  const double h = 1e-4;  // cancellation noise at 1e-5 crowds the tolerance
  for (std::size_t i = 0; i < model.params().entries.size(); ++i) {
    auto& e = model.params().entries[i];
    std::vector<double>& grad = analytic[i];
    if (!corrupt_param.empty() && e.name == corrupt_param) {
      for (double& g : grad) g = -g;
      corrupted_found = true;
    }
    std::vector<std::size_t> coords;
    const std::size_t n = e.tensor.numel();
    if (n <= 6) {
      coords.resize(n);
      std::iota(coords.begin(), coords.end(), 0);
    } else {
      std::set<std::size_t> picked;
      while (picked.size() < 6) {
        picked.insert(static_cast<std::size_t>(coord_rng.below(n)));
      }
      coords.assign(picked.begin(), picked.end());
    }
    std::vector<double> a_sel, n_sel;
    for (std::size_t c : coords) {
      double* p = e.tensor.data();
      const double saved = p[c];
      p[c] = saved + h;
      const double fp = loss_fn().value();
      p[c] = saved - h;
      const double fm = loss_fn().value();
      p[c] = saved;
      a_sel.push_back(grad[c]);
      n_sel.push_back((fp - fm) / (2.0 * h));
    }
    GradcheckEntry entry;
    entry.name = e.name;
    entry.coords = coords.size();
    entry.max_rel_error = max_rel_error(a_sel, n_sel);
    if (entry.max_rel_error > report.worst_error) {
      report.worst_error = entry.max_rel_error;
      report.worst_name = entry.name;
    }
    report.entries.push_back(std::move(entry));
  }
  if (!corrupted_found) {
    throw std::invalid_argument("gradcheck: no parameter named " +
                                corrupt_param);
  }
  report.pass = true;
  for (const auto& e : report.entries) {
    if (e.max_rel_error > tolerance) report.pass = false;
  }
  return report;
}

}  // namespace mhfilm::train
