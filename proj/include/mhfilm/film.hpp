#pragma once

// Language-conditioned visual pipeline: MLB spatial attention, the context
// controller with attention hops over RNN states, per-block FiLM parameter
// generation, modulated residual blocks, and assembly into the Oracle /
// Guesser / Pointer models with their baselines.

#include <optional>
#include <string>
#include <vector>

#include "mhfilm/games.hpp"
#include "mhfilm/nn.hpp"
#include "mhfilm/tensor.hpp"

namespace mhfilm::film {

enum class GeneratorMode {
  baseline_nn,
  baseline_nn_mlb,
  single_hop,
  multi_hop,
  multi_hop_img,
};

enum class Task { oracle, guesser, pointer };

const char* to_string(GeneratorMode m);
const char* to_string(Task t);
int answer_class(games::Answer a);  // head class order: yes, no, n/a
GeneratorMode generator_mode_from(const std::string& s);
Task task_from(const std::string& s);

struct ModelConfig {
  GeneratorMode mode = GeneratorMode::multi_hop;
  Task task = Task::guesser;
  bool use_category = true;
  bool use_crop = true;
  bool use_image = true;
  bool oracle_full_dialogue = true;   // previous pairs + current question
  bool share_attn_mlp = false;        // share MLP_Attn between pipelines
  bool context_layer_norm = true;     // pass-through when false (test hook)
  bool guesser_softmax_loss = false;  // softmax-over-objects loss variant
  int blocks = 4;
  int stem_channels = 8;
  int block_channels = 16;
  int head_channels = 32;
  int d_wemb = 32;
  int d_rnn = 64;
  int d_mlb = 32;
  int d_spat = 16;
  int d_cat = 16;
  int glimpses = 1;
  int final_hidden = 64;
  double dropout = 0.5;
  double lr = 3e-4;
  double weight_decay = 5e-6;
  int n_categories = games::kNumShapes;
  std::uint64_t seed = 1;

  void validate() const;
  static ModelConfig micro();  // gradcheck-sized dimensions
};

struct AttentionResult {
  Tensor e_v;     // [C * glimpses]
  Tensor alpha;   // [H*W, glimpses], each column sums to 1
  Tensor scores;  // [H*W, glimpses]
};

struct ContextState {
  int hop = 0;
  Tensor c;      // [2*d_rnn]
  Tensor kappa;  // [T], empty at hop 0
  Tensor chi;    // [T], raw scores
};

struct HopTrace {
  std::string pipeline;            // "img" or "crop"
  std::vector<ContextState> hops;  // hops 1..K (multi-hop modes only)
  std::vector<Tensor> alphas;      // spatial attention, one per pass
};

// g(F_column, e_l) = tanh(U^T F) o tanh(V^T e_l); u [C,d_mlb], v [d_l,d_mlb]
Tensor mlb_fuse(const Tensor& f_column, const Tensor& e_l, const Tensor& u,
                const Tensor& v);

struct MlbAttention {
  Tensor u, v;
  nn::Linear score_hidden;  // d_mlb -> d_mlb, ReLU
  nn::Linear score_out;     // d_mlb -> glimpses, zero-init
  int glimpses = 1;

  MlbAttention() = default;
  MlbAttention(nn::ParamStore& params, const std::string& name,
               std::size_t channels, std::size_t d_l, std::size_t d_mlb,
               int glimpses, Rng& rng);
  AttentionResult apply(const Tensor& features, const Tensor& e_l) const;
};

// One shared scoring network across hops; scores chi_t = MLP(c o s_t),
// kappa = softmax_t, c_k = layer_norm(sum_t kappa_t s_t).
struct ContextChain {
  nn::Linear attn_hidden;  // 2*d_rnn -> d_rnn, ReLU
  nn::Linear attn_out;     // d_rnn -> 1, zero-init
  nn::LayerNormParams ln;
  bool use_ln = true;
  int max_hops = 0;

  ContextChain() = default;
  ContextChain(nn::ParamStore& params, const std::string& name,
               std::size_t d_rnn, int max_hops, bool use_ln, Rng& rng);
  ContextState init(const nn::LanguageEncoding& enc) const;
  ContextState hop(const ContextState& prev,
                   const nn::LanguageEncoding& enc) const;
  std::vector<ContextState> run(const nn::LanguageEncoding& enc) const;
};

struct FilmParams {
  Tensor gamma, beta;  // [C_block]
};

// One zero-initialized linear projection per block; gamma = 1 + delta.
struct FilmGenerator {
  std::vector<nn::Linear> block_proj;
  std::size_t channels = 0;

  FilmGenerator() = default;
  FilmGenerator(nn::ParamStore& params, const std::string& name, int blocks,
                std::size_t input_dim, std::size_t channels, Rng& rng);
  FilmParams generate(const std::vector<Tensor>& context_parts,
                      int block) const;
};

// a = ReLU(conv1x1(F_in)); F_k = BN(conv3x3(a));
// out = a + ReLU(gamma*F_k + beta)  — the residual sums both ReLU outputs.
// Coordinate-map concatenation happens in the pipeline, before the 1x1 conv.
Tensor modulated_res_block(const Tensor& f_in, const Tensor& conv1,
                           const Tensor& conv3, BatchNormState& bn,
                           const Tensor& gamma, const Tensor& beta, Mode mode);

struct ResBlock {
  Tensor conv1, conv3;
  BatchNormState bn;
  ResBlock() : bn(0) {}
};

struct SideInfo {
  std::optional<Tensor> e_spat;
  std::optional<Tensor> e_cat;
};

struct PipelineResult {
  Tensor e_v;
  HopTrace trace;
};

struct VisualPipeline {
  std::string name;
  Tensor stem_kernel;
  BatchNormState stem_bn;
  std::vector<ResBlock> blocks;
  Tensor head_kernel;
  BatchNormState head_bn;
  MlbAttention attention;
  ContextChain context;
  FilmGenerator generator;

  VisualPipeline() : stem_bn(0), head_bn(0) {}

  // input: [3(+1 mask),S,S]; coordinate maps are concatenated internally.
  // For multi-hop modes a precomputed chain may be passed in so that several
  // passes over one game share the hop computation.
  PipelineResult forward(const Tensor& input,
                         const nn::LanguageEncoding& enc,
                         const SideInfo& side, GeneratorMode gen_mode,
                         Mode mode,
                         const std::vector<ContextState>* chain = nullptr);
};

struct TaskOutput {
  Task task = Task::guesser;
  Tensor oracle_probs;                // [3] (yes,no,n/a), sums to 1
  std::vector<Tensor> guesser_sigma;  // per object, scalars in (0,1)
  std::vector<Tensor> guesser_logits;
  Tensor pointer_box;  // [4] in the [-1,1] convention
  std::vector<HopTrace> traces;
  games::TokenizedDialogue tokens;
};

class Model {
 public:
  Model(const ModelConfig& cfg, const games::Vocabulary& vocab, Rng& init_rng);

  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  const ModelConfig& config() const { return cfg_; }
  const games::Vocabulary& vocab() const { return vocab_; }

  // named batch-norm running statistics, for checkpointing
  std::vector<std::pair<std::string, std::vector<double>*>> state_vectors();

  TaskOutput forward(const games::Game& game, Mode mode, Rng& rng);
  Tensor loss(const TaskOutput& out, const games::Game& game) const;

  nn::BiGruEncoder& encoder() { return encoder_; }
  VisualPipeline& image_pipeline() { return img_; }
  VisualPipeline& crop_pipeline() { return crop_; }
  const nn::Linear& final_proj() const { return final_proj_; }
  const nn::Linear& task_head() const { return task_head_; }
  const nn::SpatialEmbed& spatial_embed() const { return spatial_; }
  const nn::CategoryEmbed& category_embed() const { return category_; }

 private:
  Tensor pipeline_input(const games::Game& game, std::size_t object,
                        bool crop) const;
  ModelConfig cfg_;
  games::Vocabulary vocab_;
  nn::ParamStore params_;
  nn::BiGruEncoder encoder_;
  nn::SpatialEmbed spatial_;
  nn::CategoryEmbed category_;
  VisualPipeline img_, crop_;
  nn::Linear final_proj_, task_head_;
  mutable Tensor render_cache_;  // scene render shared by per-object passes
  mutable std::uint64_t render_cache_id_ = ~0ull;
};

// Exported trace format: per (game, pipeline) a header line
// "game_id pipeline K T" followed by K tab-separated rows of T weights.
std::string format_hop_trace(std::uint64_t game_id, const HopTrace& trace);

}  // namespace mhfilm::film
