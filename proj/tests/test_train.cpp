#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "mhfilm/train.hpp"

using namespace mhfilm;
using namespace mhfilm::train;

namespace {

games::GenConfig micro_gen() {
  games::GenConfig g;
  g.grid = 3;
  g.cell_px = 2;
  g.phi_min = g.phi_max = 2;
  g.dlg_min = 1;
  g.dlg_max = 2;
  return g;
}

film::Model micro_model(film::Task task, film::GeneratorMode mode,
                        const games::Vocabulary& vocab, std::uint64_t seed,
                        double noise = 0.15) {
  film::ModelConfig cfg = film::ModelConfig::micro();
  cfg.task = task;
  cfg.mode = mode;
  cfg.seed = seed;
  Rng init(seed);
  film::Model model(cfg, vocab, init);
  Rng n(seed + 1);
  for (auto& e : model.params().entries) {
    for (double& v : e.tensor.values()) v += n.normal(0.0, noise);
  }
  return model;
}

}  // namespace

TEST_CASE("adam basics") {
  nn::ParamStore ps;
  Rng rng(1);
  Tensor w = ps.add("w", Tensor::uniform({4}, rng, -1, 1));
  AdamConfig cfg;
  cfg.lr = 1e-3;
  cfg.weight_decay = 0.0;
  Adam adam(ps, cfg);

  SUBCASE("zero gradient leaves parameters unchanged") {
    const auto before = w.values();
    w.impl()->ensure_grad();  // all-zero gradient
    adam.step();
    CHECK(w.values() == before);
  }

  SUBCASE("unit gradient at t=1 moves each coordinate by about -lr") {
    const auto before = w.values();
    w.impl()->ensure_grad();
    for (double& g : w.impl()->grad) g = 1.0;
    adam.step();
    for (std::size_t i = 0; i < 4; ++i) {
      const double update = w.values()[i] - before[i];
      CHECK(update == doctest::Approx(-1e-3).epsilon(1e-6));
    }
  }

  SUBCASE("NaN gradient aborts naming the parameter") {
    w.impl()->ensure_grad();
    w.impl()->grad[2] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_WITH_AS(adam.step(), doctest::Contains("w"),
                         DivergenceError);
  }
}

TEST_CASE("weight decay touches only convolutional kernels") {
  nn::ParamStore ps;
  Rng rng(2);
  Tensor conv = ps.add("conv.w", Tensor::uniform({8}, rng, 0.5, 1.0), true);
  Tensor fc = ps.add("fc.w", Tensor::uniform({8}, rng, 0.5, 1.0), false);
  const auto conv0 = conv.values();
  const auto fc0 = fc.values();

  AdamConfig with_decay;
  with_decay.lr = 1e-3;
  with_decay.weight_decay = 1.0;  // exaggerated so the effect is visible
  Adam a1(ps, with_decay);
  conv.impl()->ensure_grad();
  fc.impl()->ensure_grad();
  a1.step();
  const auto conv_decayed = conv.values();
  const auto fc_after = fc.values();
  CHECK(fc_after == fc0);  // zero grad, no decay
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(conv_decayed[i] == doctest::Approx(conv0[i] * (1.0 - 1e-3)));
  }
}

TEST_CASE("guesser_loss") {
  SUBCASE("single object at sigma 0.5") {
    Tensor s = Tensor::scalar(0.5);
    Tensor l = guesser_loss({{s}}, {0});
    CHECK(l.value() == doctest::Approx(std::log(2.0)).epsilon(1e-9));
  }
  SUBCASE("perfect scores drive the loss to zero") {
    Tensor hi = Tensor::scalar(1.0 - 1e-9);
    Tensor lo = Tensor::scalar(1e-9);
    Tensor l = guesser_loss({{hi, lo}}, {0});
    CHECK(l.value() < 1e-6);
  }
  SUBCASE("two-game batch matches the hand computation") {
    Tensor a0 = Tensor::scalar(0.8), a1 = Tensor::scalar(0.3);
    Tensor b0 = Tensor::scalar(0.1), b1 = Tensor::scalar(0.6),
           b2 = Tensor::scalar(0.9);
    Tensor l = guesser_loss({{a0, a1}, {b0, b1, b2}}, {0, 2});
    const double g1 = -(std::log(0.8) + std::log(1 - 0.3)) / 2.0;
    const double g2 = -(std::log(1 - 0.1) + std::log(1 - 0.6) + std::log(0.9)) / 3.0;
    CHECK(l.value() == doctest::Approx((g1 + g2) / 2.0).epsilon(1e-12));
  }
  SUBCASE("loss decreases as the target score rises") {
    double prev = 1e18;
    for (double s : {0.2, 0.4, 0.6, 0.8, 0.95}) {
      Tensor l = guesser_loss({{Tensor::scalar(s), Tensor::scalar(0.5)}}, {0});
      CHECK(l.value() < prev);
      prev = l.value();
    }
  }
  SUBCASE("gradient flows to the scores") {
    Tensor s = Tensor::scalar(0.6);
    s.set_requires_grad(true);
    Tape tape;
    Tape::Scope scope(tape);
    Tensor l = guesser_loss({{s, Tensor::scalar(0.5)}}, {0});
    tape.backward(l);
    CHECK(s.grad()[0] == doctest::Approx(-1.0 / (2 * 0.6)).epsilon(1e-9));
  }
}

TEST_CASE("guesser_error") {
  CHECK(guesser_error({{0.2, 0.9, 0.4}}, {1}) == 0.0);
  CHECK(guesser_error({{0.5, 0.5}}, {1}) == 1.0);  // tie goes to index 0
  CHECK(guesser_error({{0.5, 0.5}}, {0}) == 0.0);

  SUBCASE("matches a brute-force argmax over 1000 games") {
    Rng rng(3);
    std::vector<std::vector<double>> sigma;
    std::vector<int> targets;
    std::size_t wrong = 0;
    for (int n = 0; n < 1000; ++n) {
      const int phi = rng.range_int(1, 6);
      std::vector<double> s(static_cast<std::size_t>(phi));
      for (double& v : s) v = rng.uniform();
      const int target = rng.range_int(0, phi - 1);
      std::size_t best = 0;
      for (std::size_t i = 1; i < s.size(); ++i) {
        if (s[i] > s[best]) best = i;
      }
      if (best != static_cast<std::size_t>(target)) ++wrong;
      sigma.push_back(std::move(s));
      targets.push_back(target);
    }
    CHECK(guesser_error(sigma, targets) ==
          doctest::Approx(wrong / 1000.0).epsilon(1e-15));
  }

  SUBCASE("invariant under strictly monotone transforms") {
    Rng rng(4);
    for (int rep = 0; rep < 50; ++rep) {
      std::vector<double> s(4);
      for (double& v : s) v = rng.uniform(0.05, 0.95);
      std::vector<double> t(4);
      for (std::size_t i = 0; i < 4; ++i) t[i] = std::exp(3.0 * s[i]) + 1.0;
      const int target = rng.range_int(0, 3);
      CHECK(guesser_error({s}, {target}) == guesser_error({t}, {target}));
    }
  }
}

TEST_CASE("oracle_loss") {
  Tensor uniform(Shape{3}, {1.0 / 3, 1.0 / 3, 1.0 / 3});
  CHECK(oracle_loss({uniform}, {1}).value() ==
        doctest::Approx(std::log(3.0)).epsilon(1e-12));
  Tensor sure(Shape{3}, {0, 1, 0});
  CHECK(oracle_loss({sure}, {1}).value() == doctest::Approx(0.0));
  Tensor other(Shape{3}, {0.7, 0.2, 0.1});
  const double expect =
      (std::log(3.0) - std::log(0.2) - std::log(0.1)) / 3.0;
  CHECK(oracle_loss({uniform, other, other}, {0, 1, 2}).value() ==
        doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("pointer_metrics") {
  games::BBox truth{0, 0, 2, 1};
  PointerErrors same = pointer_metrics(truth, truth);
  CHECK(same.at30 == 0);
  CHECK(same.at50 == 0);
  CHECK(same.at70 == 0);

  PointerErrors third = pointer_metrics({1, 0, 2, 1}, truth);  // IoU = 1/3
  CHECK(third.at30 == 0);
  CHECK(third.at50 == 1);
  CHECK(third.at70 == 1);

  // degenerate prediction is clamped, not an error
  PointerErrors degen = pointer_metrics({0, 0, -1, 0}, truth);
  CHECK(degen.at30 == 1);

  SUBCASE("sweep agrees with direct iou comparisons") {
    Rng rng(5);
    for (int rep = 0; rep < 300; ++rep) {
      games::BBox p{rng.uniform(-1, 1), rng.uniform(-1, 1),
                    rng.uniform(0.05, 1.5), rng.uniform(0.05, 1.5)};
      games::BBox t{rng.uniform(-1, 1), rng.uniform(-1, 1),
                    rng.uniform(0.05, 1.5), rng.uniform(0.05, 1.5)};
      const double v = games::iou(p, t);
      const PointerErrors e = pointer_metrics(p, t);
      CHECK(e.at30 == (v < 0.3 ? 1 : 0));
      CHECK(e.at50 == (v < 0.5 ? 1 : 0));
      CHECK(e.at70 == (v < 0.7 ? 1 : 0));
    }
  }
}

TEST_CASE("attention_analysis") {
  const auto make_trace = [](const std::vector<std::vector<double>>& weights) {
    film::HopTrace tr;
    tr.pipeline = "crop";
    for (const auto& w : weights) {
      film::ContextState s;
      s.hop = static_cast<int>(tr.hops.size()) + 1;
      s.kappa = Tensor(Shape{w.size()}, std::vector<double>(w));
      tr.hops.push_back(std::move(s));
    }
    return tr;
  };
  games::TokenizedDialogue dlg;
  dlg.ids.assign(10, 7);
  dlg.last_q_begin = 6;
  dlg.last_q_end = 10;
  dlg.answer_positions = {2, 5};

  SUBCASE("uniform weights break ties toward index 0") {
    auto tr = make_trace({std::vector<double>(10, 0.1)});
    AttentionStats st = attention_analysis({tr}, {dlg});
    CHECK(st.last_q_rate == 0.0);  // index 0 is outside the span [6,10)
    // top-3 under ties = indices 0,1,2; position 2 is an answer token
    CHECK(st.answer_rate == 1.0);
  }
  SUBCASE("mass on an answer token scores a hit") {
    std::vector<double> w(10, 0.01);
    w[5] = 0.91;
    auto tr = make_trace({w});
    AttentionStats st = attention_analysis({tr}, {dlg});
    CHECK(st.answer_rate == 1.0);
    CHECK(st.last_q_rate == 0.0);
  }
  SUBCASE("mass in the last question scores the span") {
    std::vector<double> w(10, 0.01);
    w[8] = 0.91;
    auto tr = make_trace({w});
    AttentionStats st = attention_analysis({tr}, {dlg});
    CHECK(st.last_q_rate == 1.0);
  }
  SUBCASE("statistics over 100 synthetic traces match a recount") {
    Rng rng(6);
    std::vector<film::HopTrace> traces;
    std::vector<games::TokenizedDialogue> dialogues;
    std::size_t span_hits = 0, ans_hits = 0;
    const std::size_t hops = 3, t_len = 12;
    for (int n = 0; n < 100; ++n) {
      games::TokenizedDialogue d;
      d.ids.assign(t_len, 1);
      d.last_q_begin = 8;
      d.last_q_end = 12;
      d.answer_positions = {3, 7};
      std::vector<std::vector<double>> weights;
      for (std::size_t k = 0; k < hops; ++k) {
        std::vector<double> w(t_len);
        double z = 0;
        for (double& v : w) {
          v = rng.uniform(0.0, 1.0);
          z += v;
        }
        for (double& v : w) v /= z;
        // recount by hand
        std::size_t top1 = 0;
        for (std::size_t i = 1; i < t_len; ++i) {
          if (w[i] > w[top1]) top1 = i;
        }
        if (top1 >= 8) ++span_hits;
        std::vector<std::size_t> idx(t_len);
        for (std::size_t i = 0; i < t_len; ++i) idx[i] = i;
        std::stable_sort(idx.begin(), idx.end(),
                         [&](std::size_t a, std::size_t b) {
                           return w[a] > w[b];
                         });
        if (idx[0] == 3 || idx[0] == 7 || idx[1] == 3 || idx[1] == 7 ||
            idx[2] == 3 || idx[2] == 7) {
          ++ans_hits;
        }
        weights.push_back(std::move(w));
      }
      traces.push_back(make_trace(weights));
      dialogues.push_back(std::move(d));
    }
    AttentionStats st = attention_analysis(traces, dialogues);
    CHECK(st.last_q_rate ==
          doctest::Approx(span_hits / 300.0).epsilon(1e-15));
    CHECK(st.answer_rate == doctest::Approx(ans_hits / 300.0).epsilon(1e-15));
  }
  SUBCASE("length mismatch is an input error") {
    auto tr = make_trace({std::vector<double>(9, 1.0 / 9)});
    CHECK_THROWS_AS(attention_analysis({tr}, {dlg}), std::invalid_argument);
  }
}

TEST_CASE("training smoke: loss drops, early stopping, determinism") {
  games::GenConfig gcfg = micro_gen();
  auto dataset = games::generate_dataset(70, 40, gcfg);
  games::assign_prefix_splits(dataset, 28, 6, 6);
  games::Vocabulary vocab = games::vocabulary_from_games(dataset);

  const auto run = [&](std::uint64_t seed) {
    film::Model model = micro_model(film::Task::guesser,
                                    film::GeneratorMode::multi_hop, vocab,
                                    seed);
    TrainConfig tcfg;
    tcfg.epochs = 6;
    tcfg.batch = 8;
    tcfg.seed = seed;
    tcfg.adam.lr = 3e-3;
    Adam adam(model.params(), tcfg.adam);
    return mhfilm::train::train(model, adam, dataset, tcfg, nullptr);
  };

  TrainResult a = run(9);
  double first_loss = -1, last_loss = -1;
  double best_err = 2.0;
  int best_epoch_recount = 0;
  for (const MetricsRecord& r : a.history) {
    if (r.split == "train") {
      if (first_loss < 0) first_loss = r.loss;
      last_loss = r.loss;
    }
    if (r.split == "valid" && r.error < best_err) {
      best_err = r.error;
      best_epoch_recount = r.epoch;
    }
  }
  CHECK(last_loss < first_loss);
  CHECK(a.best_epoch == best_epoch_recount);
  CHECK(a.best_valid_error == best_err);
  CHECK(a.history.back().split == "test");

  SUBCASE("bitwise reproducible metrics") {
    TrainResult b = run(9);
    REQUIRE(a.history.size() == b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) {
      CHECK(a.history[i].loss == b.history[i].loss);
      CHECK(a.history[i].error == b.history[i].error);
      CHECK(a.history[i].split == b.history[i].split);
    }
  }
}

TEST_CASE("gradcheck_model") {
  film::ModelConfig cfg;
  cfg.task = film::Task::guesser;
  cfg.mode = film::GeneratorMode::multi_hop;
  cfg.seed = 21;

  SUBCASE("fresh multi-hop guesser passes at 1e-3") {
    GradcheckReport rep = gradcheck_model(cfg, 1e-3);
    CHECK(rep.pass);
    CHECK(rep.entries.size() == 0 + [&] {
      Rng init(cfg.seed);
      games::GenConfig gen = micro_gen();
      auto corpus = games::generate_dataset(cfg.seed + 100, 12, gen);
      film::ModelConfig mc = film::ModelConfig::micro();
      mc.task = cfg.task;
      mc.mode = cfg.mode;
      film::Model m(mc, games::vocabulary_from_games(corpus), init);
      return m.params().entries.size();
    }());
    // every tensor reported exactly once
    std::set<std::string> names;
    for (const auto& e : rep.entries) CHECK(names.insert(e.name).second);
  }

  SUBCASE("an injected sign flip is reported as a named failure") {
    GradcheckReport rep = gradcheck_model(cfg, 1e-3, "img.film.block0.w");
    CHECK_FALSE(rep.pass);
    CHECK(rep.worst_name == "img.film.block0.w");
    CHECK(rep.worst_error > 1e-2);
  }

  SUBCASE("unknown corruption target is rejected") {
    CHECK_THROWS_AS(gradcheck_model(cfg, 1e-3, "no.such.param"),
                    std::invalid_argument);
  }
}
