// Acceptance suite: one pass/fail line per criterion. Training-based
// criteria run at desk scale on a single core; expect roughly an hour for
// the full suite.

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mhfilm/checkpoint.hpp"
#include "mhfilm/film.hpp"
#include "mhfilm/games.hpp"
#include "mhfilm/train.hpp"

using namespace mhfilm;
using Clock = std::chrono::steady_clock;

namespace {

int g_failures = 0;

void report(int criterion, bool pass, const std::string& label,
            const std::string& detail, double seconds) {
  std::printf("[%s] criterion %2d: %-28s %s (%.1fs)\n",
              pass ? "PASS" : "FAIL", criterion, label.c_str(),
              detail.c_str(), seconds);
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

template <class Fn>
void criterion(int number, const std::string& label, Fn fn) {
  const auto t0 = Clock::now();
  bool pass = false;
  std::string detail;
  try {
    pass = fn(detail);
  } catch (const std::exception& e) {
    detail = std::string("exception: ") + e.what();
  }
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  report(number, pass, label, detail, secs);
}

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

film::Model make_model(film::ModelConfig cfg, const games::Vocabulary& vocab,
                       std::uint64_t seed, double noise = 0.0) {
  cfg.seed = seed;
  Rng init(seed);
  film::Model model(cfg, vocab, init);
  if (noise > 0.0) {
    Rng n(Rng::derive(seed, 77));
    for (auto& e : model.params().entries) {
      for (double& v : e.tensor.values()) v += n.normal(0.0, noise);
    }
  }
  return model;
}

struct TrainedRun {
  std::shared_ptr<film::Model> model;
  train::TrainResult result;
};

TrainedRun run_training(const std::vector<games::Game>& dataset,
                        const games::Vocabulary& vocab, film::Task task,
                        film::GeneratorMode mode, int epochs, int batch,
                        double lr, std::uint64_t seed,
                        bool stop_at_zero = false) {
  film::ModelConfig cfg;
  cfg.task = task;
  cfg.mode = mode;
  cfg.dropout = 0.0;
  cfg.lr = lr;
  TrainedRun run;
  Rng init(Rng::derive(seed, 1));
  run.model = std::make_shared<film::Model>(cfg, vocab, init);
  train::TrainConfig tcfg;
  tcfg.epochs = epochs;
  tcfg.batch = batch;
  tcfg.seed = Rng::derive(seed, 2);
  tcfg.adam.lr = lr;
  tcfg.adam.weight_decay = cfg.weight_decay;
  tcfg.stop_at_zero_train_error = stop_at_zero;
  train::Adam adam(run.model->params(), tcfg.adam);
  run.result = train::train(*run.model, adam, dataset, tcfg, nullptr);
  return run;
}

// shared artifacts across criteria
std::vector<games::Game> g_desk_dataset;  // 2000/500/500 prefix split
games::Vocabulary g_desk_vocab;
std::shared_ptr<film::Model> g_trained_oracle;

// --------------------------------------------------------------------------

bool crit1_gradients(std::string& detail) {
  double worst = 0;
  std::string worst_mode;
  for (film::GeneratorMode mode :
       {film::GeneratorMode::baseline_nn_mlb, film::GeneratorMode::single_hop,
        film::GeneratorMode::multi_hop, film::GeneratorMode::multi_hop_img}) {
    film::ModelConfig cfg;
    cfg.task = film::Task::guesser;
    cfg.mode = mode;
    cfg.seed = 33;
    const train::GradcheckReport rep = train::gradcheck_model(cfg, 1e-3);
    if (!rep.pass) {
      detail = fmt("%s fails: %s at %.2e", film::to_string(mode),
                   rep.worst_name.c_str(), rep.worst_error);
      return false;
    }
    if (rep.worst_error > worst) {
      worst = rep.worst_error;
      worst_mode = film::to_string(mode);
    }
  }
  detail = fmt("4 modes, worst %.2e (%s), tolerance 1e-3", worst,
               worst_mode.c_str());
  return true;
}

bool crit2_identity_at_init(std::string& detail) {
  games::GenConfig gen;
  auto gs = games::generate_dataset(211, 8, gen);
  const games::Vocabulary vocab = games::vocabulary_from_games(gs);
  for (film::GeneratorMode mode : {film::GeneratorMode::multi_hop,
                                   film::GeneratorMode::multi_hop_img}) {
    film::ModelConfig cfg;
    cfg.task = film::Task::oracle;
    cfg.mode = mode;
    film::Model model = make_model(cfg, vocab, 5);  // zero-init projections

    games::Game a = gs[0];
    games::Game b = a;
    b.dialogue.clear();
    const std::vector<std::string> q = {"is", "it", "a", "square", "?"};
    b.dialogue.push_back(
        {q, games::oracle_truth(
                q, a.objects[static_cast<std::size_t>(a.target)], a.grid)});

    Rng r1(1), r2(1);
    auto ta = games::tokenize_dialogue(a, vocab,
                                       games::DialogueView::oracle_context);
    auto tb = games::tokenize_dialogue(b, vocab,
                                       games::DialogueView::oracle_context);
    auto ea = model.encoder().encode(ta.ids, Mode::eval, r1);
    auto eb = model.encoder().encode(tb.ids, Mode::eval, r2);
    const std::size_t target = static_cast<std::size_t>(a.target);
    const games::GameObject& o = a.objects[target];
    const double s = static_cast<double>(a.image_size());
    film::SideInfo side;
    side.e_spat = model.spatial_embed().apply(
        nn::spatial_vector(o.bbox.x, o.bbox.y, o.bbox.w, o.bbox.h, s, s));
    side.e_cat = model.category_embed().apply(o.category);

    for (bool crop : {false, true}) {
      Tensor input =
          crop ? concat({games::render_crop(a, target),
                         games::crop_mask_channel(a, target)},
                        0)
               : concat({games::render_image(a),
                         games::mask_channel(a, target)},
                        0);
      film::VisualPipeline& pipe =
          crop ? model.crop_pipeline() : model.image_pipeline();
      film::PipelineResult ra = pipe.forward(input, ea, side, mode, Mode::eval);
      film::PipelineResult rb = pipe.forward(input, eb, side, mode, Mode::eval);
      if (ra.e_v.values() != rb.e_v.values()) {
        detail = fmt("%s %s pipeline e_v differs across dialogues",
                     film::to_string(mode), crop ? "crop" : "img");
        return false;
      }
    }
  }
  detail = "e_v bitwise equal across dialogues (multi_hop, multi_hop_img)";
  return true;
}

bool crit3_attention_normalization(std::string& detail) {
  games::GenConfig gen;
  auto gs = games::generate_dataset(311, 250, gen);
  const games::Vocabulary vocab = games::vocabulary_from_games(gs);
  std::size_t passes = 0, kappa_checked = 0, alpha_checked = 0;
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    film::ModelConfig cfg;
    cfg.task = film::Task::oracle;
    cfg.mode = film::GeneratorMode::multi_hop;
    film::Model model = make_model(cfg, vocab, seed, 0.4);
    Rng rng(seed);
    for (const games::Game& g : gs) {
      film::TaskOutput out = model.forward(g, Mode::eval, rng);
      ++passes;
      for (const film::HopTrace& tr : out.traces) {
        for (const film::ContextState& st : tr.hops) {
          double sum = 0;
          for (double k : st.kappa.values()) {
            if (k < 0) {
              detail = "negative hop weight";
              return false;
            }
            sum += k;
          }
          if (std::abs(sum - 1.0) > 1e-6) {
            detail = fmt("kappa sum %.9f", sum);
            return false;
          }
          ++kappa_checked;
        }
        for (const Tensor& alpha : tr.alphas) {
          const std::size_t p = alpha.dim(0), gl = alpha.dim(1);
          for (std::size_t c = 0; c < gl; ++c) {
            double sum = 0;
            for (std::size_t i = 0; i < p; ++i) {
              const double v = alpha.at({i, c});
              if (v < 0) {
                detail = "negative spatial weight";
                return false;
              }
              sum += v;
            }
            if (std::abs(sum - 1.0) > 1e-6) {
              detail = fmt("alpha sum %.9f", sum);
              return false;
            }
            ++alpha_checked;
          }
        }
      }
    }
  }
  detail = fmt("%zu forward passes, %zu kappa and %zu alpha distributions",
               passes, kappa_checked, alpha_checked);
  return passes >= 1000;
}

bool crit4_small_instance_oracles(std::string& detail) {
  Rng rng(41);
  // mlb_fuse and film_generate at 1e-12 (pure affine + tanh products)
  nn::ParamStore ps;
  Tensor u = nn::glorot({5, 4}, rng);
  Tensor v = nn::glorot({6, 4}, rng);
  for (int rep = 0; rep < 100; ++rep) {
    Tensor f = Tensor::uniform({5}, rng, -2, 2);
    Tensor e = Tensor::uniform({6}, rng, -2, 2);
    Tensor out = film::mlb_fuse(f, e, u, v);
    for (std::size_t j = 0; j < 4; ++j) {
      double uf = 0, ve = 0;
      for (std::size_t i = 0; i < 5; ++i) uf += u.at({i, j}) * f.values()[i];
      for (std::size_t i = 0; i < 6; ++i) ve += v.at({i, j}) * e.values()[i];
      if (std::abs(out.values()[j] - std::tanh(uf) * std::tanh(ve)) > 1e-9) {
        detail = "mlb_fuse mismatch";
        return false;
      }
    }
  }

  film::FilmGenerator gen(ps, "film", 2, 7, 4, rng);
  for (auto& entry : ps.entries) {
    for (double& x : entry.tensor.values()) x += rng.normal(0.0, 0.3);
  }
  for (int rep = 0; rep < 100; ++rep) {
    Tensor ctx = Tensor::uniform({7}, rng, -1, 1);
    const int block = rep % 2;
    film::FilmParams fp = gen.generate({ctx}, block);
    const nn::Linear& proj = gen.block_proj[static_cast<std::size_t>(block)];
    for (std::size_t j = 0; j < 8; ++j) {
      double acc = proj.b.values()[j];
      for (std::size_t i = 0; i < 7; ++i) {
        acc += ctx.values()[i] * proj.w.at({i, j});
      }
      const double got =
          j < 4 ? fp.gamma.values()[j] - 1.0 : fp.beta.values()[j - 4];
      if (std::abs(got - acc) > 1e-12) {
        detail = "film_generate mismatch";
        return false;
      }
    }
  }

  // spatial attention against a brute-force weighted sum
  nn::ParamStore ps2;
  film::MlbAttention attn(ps2, "attn", 4, 6, 5, 1, rng);
  for (auto& entry : ps2.entries) {
    for (double& x : entry.tensor.values()) x += rng.normal(0.0, 0.4);
  }
  Tensor el = Tensor::uniform({6}, rng, -1, 1);
  for (int rep = 0; rep < 100; ++rep) {
    Tensor f = Tensor::uniform({4, 3, 3}, rng, -2, 2);
    film::AttentionResult r = attn.apply(f, el);
    for (std::size_t c = 0; c < 4; ++c) {
      double acc = 0;
      for (std::size_t p = 0; p < 9; ++p) {
        acc += r.alpha.values()[p] * f.values()[c * 9 + p];
      }
      if (std::abs(r.e_v.values()[c] - acc) > 1e-9) {
        detail = "spatial_attention mismatch";
        return false;
      }
    }
  }

  // context hop against a brute-force recomputation
  nn::ParamStore ps3;
  film::ContextChain chain(ps3, "ctx", 3, 4, true, rng);
  for (auto& entry : ps3.entries) {
    for (double& x : entry.tensor.values()) x += rng.normal(0.0, 0.4);
  }
  for (int rep = 0; rep < 100; ++rep) {
    nn::LanguageEncoding enc;
    enc.states = Tensor::uniform({6, 6}, rng, -1, 1);
    enc.final_state = reshape(slice(enc.states, 0, 5, 1), {6u});
    film::ContextState prev = chain.init(enc);
    film::ContextState s = chain.hop(prev, enc);
    std::vector<double> chi(6);
    for (std::size_t t = 0; t < 6; ++t) {
      std::vector<double> fused(6);
      for (std::size_t i = 0; i < 6; ++i) {
        fused[i] = prev.c.values()[i] * enc.states.at({t, i});
      }
      std::vector<double> hid(3);
      for (std::size_t j = 0; j < 3; ++j) {
        double acc = chain.attn_hidden.b.values()[j];
        for (std::size_t i = 0; i < 6; ++i) {
          acc += fused[i] * chain.attn_hidden.w.at({i, j});
        }
        hid[j] = acc > 0 ? acc : 0;
      }
      double score = chain.attn_out.b.values()[0];
      for (std::size_t j = 0; j < 3; ++j) {
        score += hid[j] * chain.attn_out.w.at({j, 0});
      }
      chi[t] = score;
    }
    const double mx = *std::max_element(chi.begin(), chi.end());
    double z = 0;
    for (double& c : chi) {
      c = std::exp(c - mx);
      z += c;
    }
    for (std::size_t t = 0; t < 6; ++t) {
      if (std::abs(s.kappa.values()[t] - chi[t] / z) > 1e-9) {
        detail = "context_hop kappa mismatch";
        return false;
      }
    }
  }

  // guesser loss / error against hand formulas
  for (int rep = 0; rep < 100; ++rep) {
    const int games_n = 1 + rep % 4;
    std::vector<std::vector<Tensor>> sigma_t(static_cast<std::size_t>(games_n));
    std::vector<std::vector<double>> sigma_v(static_cast<std::size_t>(games_n));
    std::vector<int> targets(static_cast<std::size_t>(games_n));
    double expect = 0;
    for (int n = 0; n < games_n; ++n) {
      const int phi = 1 + static_cast<int>(rng.below(5));
      targets[n] = static_cast<int>(rng.below(phi));
      double game_sum = 0;
      for (int o = 0; o < phi; ++o) {
        const double sv = rng.uniform(0.02, 0.98);
        sigma_t[n].push_back(Tensor::scalar(sv));
        sigma_v[n].push_back(sv);
        game_sum += std::log(o == targets[n] ? sv : 1.0 - sv);
      }
      expect += -game_sum / phi;
    }
    expect /= games_n;
    const double got = train::guesser_loss(sigma_t, targets).value();
    if (std::abs(got - expect) > 1e-9) {
      detail = fmt("guesser_loss mismatch: %.12f vs %.12f", got, expect);
      return false;
    }
    std::size_t wrong = 0;
    for (int n = 0; n < games_n; ++n) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < sigma_v[n].size(); ++i) {
        if (sigma_v[n][i] > sigma_v[n][best]) best = i;
      }
      if (best != static_cast<std::size_t>(targets[n])) ++wrong;
    }
    if (train::guesser_error(sigma_v, targets) !=
        static_cast<double>(wrong) / games_n) {
      detail = "guesser_error mismatch";
      return false;
    }
  }

  // iou against an independent interval-overlap computation
  for (int rep = 0; rep < 100; ++rep) {
    games::BBox a{rng.uniform(-3, 3), rng.uniform(-3, 3),
                  rng.uniform(0.1, 4), rng.uniform(0.1, 4)};
    games::BBox b{rng.uniform(-3, 3), rng.uniform(-3, 3),
                  rng.uniform(0.1, 4), rng.uniform(0.1, 4)};
    const auto overlap = [](double lo1, double hi1, double lo2, double hi2) {
      const double lo = lo1 > lo2 ? lo1 : lo2;
      const double hi = hi1 < hi2 ? hi1 : hi2;
      return hi > lo ? hi - lo : 0.0;
    };
    const double inter = overlap(a.x, a.x + a.w, b.x, b.x + b.w) *
                         overlap(a.y, a.y + a.h, b.y, b.y + b.h);
    const double expect = inter / (a.w * a.h + b.w * b.h - inter);
    if (std::abs(games::iou(a, b) - expect) > 1e-9) {
      detail = "iou mismatch";
      return false;
    }
  }

  detail = "spatial_attention, context_hop, mlb_fuse, film_generate, "
           "guesser_loss, guesser_error, iou x100 each";
  return true;
}

bool crit5_overfit(std::string& detail) {
  games::GenConfig gen;
  auto dataset = games::generate_dataset(511, 80, gen);
  games::assign_prefix_splits(dataset, 64, 8, 8);
  const games::Vocabulary vocab = games::vocabulary_from_games(dataset);
  TrainedRun run =
      run_training(dataset, vocab, film::Task::guesser,
                   film::GeneratorMode::multi_hop, 200, 16, 1e-3, 55,
                   /*stop_at_zero=*/true);
  int zero_epoch = -1;
  for (const auto& r : run.result.history) {
    if (r.split == "train" && r.error == 0.0) {
      zero_epoch = r.epoch;
      break;
    }
  }
  detail = zero_epoch > 0
               ? fmt("0%% train error at epoch %d of 200 (64 games)",
                     zero_epoch)
               : "train error never reached 0";
  return zero_epoch > 0;
}

bool crit6_generalization(std::string& detail) {
  games::GenConfig gen;  // grid 7, phi 2..5, dialogue 3..6
  g_desk_dataset = games::generate_dataset(611, 3000, gen);
  games::assign_prefix_splits(g_desk_dataset, 2000, 500, 500);
  g_desk_vocab = games::vocabulary_from_games(g_desk_dataset);

  TrainedRun guesser =
      run_training(g_desk_dataset, g_desk_vocab, film::Task::guesser,
                   film::GeneratorMode::multi_hop, 40, 32, 1e-3, 66);
  TrainedRun oracle =
      run_training(g_desk_dataset, g_desk_vocab, film::Task::oracle,
                   film::GeneratorMode::multi_hop, 30, 32, 1e-3, 67);
  g_trained_oracle = oracle.model;

  detail = fmt("guesser test error %.3f (<= 0.10), oracle test error %.3f "
               "(<= 0.05) on 2000/500/500",
               guesser.result.final_test_error,
               oracle.result.final_test_error);
  return guesser.result.final_test_error <= 0.10 &&
         oracle.result.final_test_error <= 0.05;
}

bool crit7_directional(std::string& detail) {
  games::GenConfig gen;
  gen.phi_min = 5;
  gen.phi_max = 8;
  gen.dlg_min = 8;
  gen.dlg_max = 12;
  auto dataset = games::generate_dataset(711, 800, gen);
  games::assign_prefix_splits(dataset, 600, 100, 100);
  const games::Vocabulary vocab = games::vocabulary_from_games(dataset);

  double multi_sum = 0, single_sum = 0;
  std::printf("        long-dialogue comparison (guesser, phi 5-8, "
              "dialogue 8-12):\n");
  std::printf("        %-6s %-12s %-12s\n", "seed", "multi_hop", "single_hop");
  for (std::uint64_t seed : {1001ull, 1002ull, 1003ull}) {
    TrainedRun multi =
        run_training(dataset, vocab, film::Task::guesser,
                     film::GeneratorMode::multi_hop, 15, 32, 1e-3, seed);
    TrainedRun single =
        run_training(dataset, vocab, film::Task::guesser,
                     film::GeneratorMode::single_hop, 15, 32, 1e-3, seed);
    multi_sum += multi.result.final_test_error;
    single_sum += single.result.final_test_error;
    std::printf("        %-6llu %-12.3f %-12.3f\n",
                static_cast<unsigned long long>(seed),
                multi.result.final_test_error,
                single.result.final_test_error);
    std::fflush(stdout);
  }
  detail = fmt("mean test error: multi_hop %.3f <= single_hop %.3f "
               "(3 seeds)",
               multi_sum / 3, single_sum / 3);
  return multi_sum <= single_sum;
}

bool crit8_attention_direction(std::string& detail) {
  if (!g_trained_oracle) {
    detail = "no trained oracle from criterion 6";
    return false;
  }
  std::vector<games::Game> test_games;
  for (const games::Game& g : g_desk_dataset) {
    if (g.split == games::Split::test) test_games.push_back(g);
  }
  const train::EvalResult trained =
      train::evaluate(*g_trained_oracle, test_games, true);

  film::ModelConfig cfg;
  cfg.task = film::Task::oracle;
  cfg.mode = film::GeneratorMode::multi_hop;
  cfg.dropout = 0.0;
  film::Model fresh = make_model(cfg, g_desk_vocab, 999, 0.2);
  const train::EvalResult untrained =
      train::evaluate(fresh, test_games, true);

  detail = fmt("trained top-1-in-last-question rate %.3f (>= 0.80), "
               "untrained %.3f",
               trained.attn_last_q_rate, untrained.attn_last_q_rate);
  return trained.attn_last_q_rate >= 0.80 &&
         trained.attn_last_q_rate > untrained.attn_last_q_rate;
}

bool crit9_pointer_plumbing(std::string& detail) {
  // exact unit cases
  const games::BBox unit{0, 0, 2, 1};
  if (games::iou(unit, unit) != 1.0) {
    detail = "identical boxes must give IoU 1";
    return false;
  }
  if (games::iou(unit, {5, 5, 1, 1}) != 0.0) {
    detail = "disjoint boxes must give IoU 0";
    return false;
  }
  if (std::abs(games::iou(unit, {1, 0, 2, 1}) - 1.0 / 3) > 1e-15) {
    detail = "offset boxes must give IoU 1/3";
    return false;
  }
  const train::PointerErrors third = train::pointer_metrics({1, 0, 2, 1}, unit);
  if (third.at30 != 0 || third.at50 != 1 || third.at70 != 1) {
    detail = "threshold pattern for IoU=1/3 is wrong";
    return false;
  }

  // the three-column format comes out of a pointer evaluation
  games::GenConfig gen;
  gen.grid = 3;
  gen.cell_px = 2;
  gen.phi_min = gen.phi_max = 2;
  gen.dlg_min = gen.dlg_max = 1;
  auto dataset = games::generate_dataset(911, 30, gen);
  const games::Vocabulary vocab = games::vocabulary_from_games(dataset);
  film::ModelConfig cfg = film::ModelConfig::micro();
  cfg.task = film::Task::pointer;
  cfg.mode = film::GeneratorMode::multi_hop;
  film::Model model = make_model(cfg, vocab, 12, 0.1);
  const train::EvalResult res = train::evaluate(model, dataset, false);
  const bool cols_ok = res.err30 >= 0 && res.err30 <= 1 && res.err50 >= 0 &&
                       res.err50 <= 1 && res.err70 >= 0 && res.err70 <= 1 &&
                       res.err30 <= res.err50 && res.err50 <= res.err70;
  detail = fmt("unit cases exact; error@0.3/0.5/0.7 = %.2f/%.2f/%.2f",
               res.err30, res.err50, res.err70);
  return cols_ok;
}

bool crit10_determinism(std::string& detail) {
  const char* cli = MHFILM_CLI_PATH;
  const auto sh = [&](const std::string& args) {
    const std::string cmd = std::string(cli) + " " + args + " > /dev/null 2>&1";
    return std::system(cmd.c_str());
  };
  const auto slurp = [](const char* path) {
    std::ifstream f(path, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
  };
  if (sh("gen-data --n 40 --seed 3 --grid 3 --cell 2 --phi-min 2 --phi-max 2 "
         "--dlg-min 1 --dlg-max 2 --out acc_d.jsonl") != 0) {
    detail = "gen-data failed";
    return false;
  }
  const std::string d1 = slurp("acc_d.jsonl");
  sh("gen-data --n 40 --seed 3 --grid 3 --cell 2 --phi-min 2 --phi-max 2 "
     "--dlg-min 1 --dlg-max 2 --out acc_d.jsonl");
  if (slurp("acc_d.jsonl") != d1) {
    detail = "gen-data is not byte-stable";
    return false;
  }
  const std::string train_args =
      "train --dataset acc_d.jsonl --task guesser --mode multi_hop "
      "--epochs 2 --batch 8 --dropout 0.1 --lr 1e-3 --seed 5 ";
  if (sh(train_args + "--checkpoint acc_m.mhfm --out acc_metrics.jsonl") != 0) {
    detail = "train failed";
    return false;
  }
  const std::string m1 = slurp("acc_metrics.jsonl");
  const std::string c1 = slurp("acc_m.mhfm");
  sh(train_args + "--checkpoint acc_m.mhfm --out acc_metrics.jsonl");
  if (slurp("acc_metrics.jsonl") != m1 || slurp("acc_m.mhfm") != c1) {
    detail = "train metrics/checkpoint are not byte-stable";
    return false;
  }
  const std::string eval_args =
      "eval --dataset acc_d.jsonl --checkpoint acc_m.mhfm --task guesser "
      "--mode multi_hop --split valid";
  const std::string cmd1 = std::string(cli) + " " + eval_args + " > acc_e1.json";
  const std::string cmd2 = std::string(cli) + " " + eval_args + " > acc_e2.json";
  std::system(cmd1.c_str());
  std::system(cmd2.c_str());
  if (slurp("acc_e1.json") != slurp("acc_e2.json")) {
    detail = "eval output is not byte-stable";
    return false;
  }
  detail = "gen-data, train, eval reruns byte-identical";
  return true;
}

}  // namespace

int main() {
  std::printf("acceptance suite (single core)\n");
  criterion(1, "gradient integrity", crit1_gradients);
  criterion(2, "identity at initialization", crit2_identity_at_init);
  criterion(3, "attention normalization", crit3_attention_normalization);
  criterion(4, "small-instance oracles", crit4_small_instance_oracles);
  criterion(5, "overfit capacity", crit5_overfit);
  criterion(6, "synthetic generalization", crit6_generalization);
  criterion(7, "multi-hop vs single-hop", crit7_directional);
  criterion(8, "attention analysis", crit8_attention_direction);
  criterion(9, "pointer task plumbing", crit9_pointer_plumbing);
  criterion(10, "determinism", crit10_determinism);
  std::printf("%d of 10 criteria passed\n", 10 - g_failures);
  return g_failures == 0 ? 0 : 1;
}
