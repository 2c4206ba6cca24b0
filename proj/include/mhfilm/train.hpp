#pragma once

// Optimization loop, task losses and error metrics, early stopping on the
// validation split, attention-activation statistics, and the model-wide
// gradient-check harness.

#include <functional>
#include <string>
#include <vector>

#include "mhfilm/film.hpp"

namespace mhfilm::train {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-6;  // convolutional kernels only
};

// Thrown when a loss or gradient goes non-finite; the model is left holding
// the best parameters seen so far.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Adam {
 public:
  Adam(nn::ParamStore& params, AdamConfig cfg);
  // Bias-corrected update; decoupled weight decay on conv kernels first.
  // Missing gradients are treated as zero. NaN gradients abort, naming the
  // parameter.
  void step();
  std::uint64_t steps() const { return t_; }
  void set_steps(std::uint64_t t) { t_ = t; }
  std::vector<std::pair<std::string, std::vector<double>*>> state_vectors();

 private:
  nn::ParamStore* params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t t_ = 0;
};

// Batch losses over raw scores (graph-building; used directly in tests and
// by the acceptance oracles).
Tensor guesser_loss(const std::vector<std::vector<Tensor>>& sigma_per_game,
                    const std::vector<int>& targets);
double guesser_error(const std::vector<std::vector<double>>& sigma_per_game,
                     const std::vector<int>& targets);
Tensor oracle_loss(const std::vector<Tensor>& distributions,
                   const std::vector<int>& truth_classes);

struct PointerErrors {
  double at30 = 0, at50 = 0, at70 = 0;
};
// error@tau = 1 iff IoU < tau; predicted extents are clamped to a tiny
// positive size so raw regression outputs always score
PointerErrors pointer_metrics(const games::BBox& predicted,
                              const games::BBox& truth);

struct MetricsRecord {
  int epoch = 0;
  std::string split;
  std::string task;
  std::string mode;
  double loss = 0;
  double error = 0;
  double attn_last_q_rate = -1;  // -1 when not applicable
  double attn_answer_rate = -1;
  double err30 = -1, err50 = -1, err70 = -1;  // pointer only
};

struct AttentionStats {
  double last_q_rate = 0;  // top-1 weight inside the final question span
  double answer_rate = 0;  // any top-3 weight on an answer token
  std::vector<double> per_hop_last_q;
  std::vector<double> per_hop_answer;
  std::size_t games_count = 0;
};

// One trace per game (a single pipeline), aligned with its tokenization.
// Ties break toward the lowest index.
AttentionStats attention_analysis(
    const std::vector<film::HopTrace>& traces,
    const std::vector<games::TokenizedDialogue>& dialogues);

struct EvalResult {
  double loss = 0;
  double error = 0;
  double attn_last_q_rate = -1;
  double attn_answer_rate = -1;
  double err30 = -1, err50 = -1, err70 = -1;
};

EvalResult evaluate(film::Model& model, const std::vector<games::Game>& games,
                    bool with_attention);

struct TrainConfig {
  int epochs = 15;
  int batch = 32;
  AdamConfig adam;
  std::uint64_t seed = 1;
  bool attention_metrics = true;
  bool stop_at_zero_train_error = false;  // capacity / overfit probes
};

using MetricsSink = std::function<void(const MetricsRecord&)>;

struct TrainResult {
  std::vector<MetricsRecord> history;
  int best_epoch = 0;
  double best_valid_error = 1.0;
  double final_test_error = -1;
  double final_test_loss = -1;
};

// Epoch loop with shuffled mini-batches and early stopping: trains for up to
// cfg.epochs epochs, tracks the best validation error, and leaves the model
// holding the best parameters. Emits one record per split per epoch plus a
// final test record.
TrainResult train(film::Model& model, Adam& adam,
                  const std::vector<games::Game>& dataset,
                  const TrainConfig& cfg, const MetricsSink& sink);

struct GradcheckEntry {
  std::string name;
  double max_rel_error = 0;
  std::size_t coords = 0;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double tolerance = 1e-3;
  bool pass = false;
  std::string worst_name;
  double worst_error = 0;
};

// Finite-difference check of the task loss on a micro game against every
// parameter tensor (a stratified sample of coordinates per tensor). All
// parameters are noise-initialized so zero-initialized projections carry
// gradient. corrupt_param flips the analytic sign of one tensor to verify
// the harness detects injected bugs.
GradcheckReport gradcheck_model(const film::ModelConfig& cfg,
                                double tolerance = 1e-3,
                                const std::string& corrupt_param = "");

}  // namespace mhfilm::train
