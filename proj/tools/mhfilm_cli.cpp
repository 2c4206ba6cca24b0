// Command-line front end: data generation, training, evaluation, gradient
// checking, and attention dumping.
//
// Exit codes: 0 success, 64 usage/config, 2 I/O, 3 divergence,
// 4 checkpoint mismatch. gradcheck returns 1 when a tensor fails.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mhfilm/checkpoint.hpp"
#include "mhfilm/film.hpp"
#include "mhfilm/games.hpp"
#include "mhfilm/train.hpp"

using json = nlohmann::ordered_json;
using namespace mhfilm;

namespace {

// Flat key=value config support: the file's pairs are injected as
// --key=value tokens right after the subcommand, so explicit flags (which
// come later) always win. CLI11's own config handling does not cover
// subcommand-local files.
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  std::string path;
  std::size_t at = 0;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
      at = i;
      args.erase(args.begin() + static_cast<long>(i),
                 args.begin() + static_cast<long>(i) + 2);
      break;
    }
    if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
      at = i;
      args.erase(args.begin() + static_cast<long>(i));
      break;
    }
  }
  if (path.empty()) return args;
  if (at < 2) return args;  // --config before any subcommand; let CLI11 complain
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file: " + path);
  std::vector<std::string> injected;
  std::string line;
  while (std::getline(f, line)) {
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    while (!line.empty() && (line.back() == ' ' || line.back() == '\r' ||
                             line.back() == '\t')) {
      line.pop_back();
    }
    std::size_t start = line.find_first_not_of(" \t");
    if (start == std::string::npos) continue;
    line.erase(0, start);
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line is not key=value: " + line);
    }
    injected.push_back("--" + line.substr(0, eq) + "=" + line.substr(eq + 1));
  }
  // keep tokens in file order, inserted just after the subcommand name
  args.insert(args.begin() + 2, injected.begin(), injected.end());
  return args;
}

struct ModelOpts {
  std::string mode = "multi_hop";
  std::string task = "guesser";
  bool use_category = true;
  bool use_crop = true;
  bool use_image = true;
  bool oracle_question_only = false;
  bool guesser_softmax = false;
  double dropout = 0.5;
  double lr = 3e-4;
  double weight_decay = 5e-6;
  std::uint64_t seed = 1;
};

void add_model_flags(CLI::App* cmd, ModelOpts& o) {
  cmd->add_option("--mode", o.mode,
                  "generator mode: baseline_nn, baseline_nn_mlb, single_hop, "
                  "multi_hop, multi_hop_img")
      ->capture_default_str();
  cmd->add_option("--task", o.task, "task: oracle, guesser, pointer")
      ->capture_default_str();
  cmd->add_flag("--use-category,!--no-category", o.use_category,
                "feed the object category embedding")
      ->capture_default_str();
  cmd->add_flag("--use-crop,!--no-crop", o.use_crop,
                "run the crop pipeline")
      ->capture_default_str();
  cmd->add_flag("--use-image,!--no-image", o.use_image,
                "run the image pipeline")
      ->capture_default_str();
  cmd->add_flag("--oracle-question-only", o.oracle_question_only,
                "oracle sees only the current question")
      ->capture_default_str();
  cmd->add_flag("--guesser-softmax", o.guesser_softmax,
                "softmax-over-objects guesser loss variant")
      ->capture_default_str();
  cmd->add_option("--dropout", o.dropout, "word-embedding dropout")
      ->capture_default_str();
  cmd->add_option("--lr", o.lr, "Adam learning rate")->capture_default_str();
  cmd->add_option("--weight-decay", o.weight_decay,
                  "decay for convolutional kernels")
      ->capture_default_str();
  cmd->add_option("--seed", o.seed, "master seed")->capture_default_str();
}

film::ModelConfig to_model_config(const ModelOpts& o) {
  film::ModelConfig cfg;
  cfg.mode = film::generator_mode_from(o.mode);
  cfg.task = film::task_from(o.task);
  cfg.use_category = o.use_category;
  cfg.use_crop = o.use_crop;
  cfg.use_image = o.use_image;
  cfg.oracle_full_dialogue = !o.oracle_question_only;
  cfg.guesser_softmax_loss = o.guesser_softmax;
  cfg.dropout = o.dropout;
  cfg.lr = o.lr;
  cfg.weight_decay = o.weight_decay;
  cfg.seed = o.seed;
  return cfg;
}

json metrics_json(const train::MetricsRecord& r) {
  json j;
  j["epoch"] = r.epoch;
  j["split"] = r.split;
  j["task"] = r.task;
  j["mode"] = r.mode;
  j["loss"] = r.loss;
  j["error"] = r.error;
  j["attn_last_q_rate"] =
      r.attn_last_q_rate < 0 ? json() : json(r.attn_last_q_rate);
  j["attn_answer_rate"] =
      r.attn_answer_rate < 0 ? json() : json(r.attn_answer_rate);
  if (r.err30 >= 0) {
    j["error@0.3"] = r.err30;
    j["error@0.5"] = r.err50;
    j["error@0.7"] = r.err70;
  }
  return j;
}

std::vector<games::Game> load_split(const std::string& path,
                                    const std::string& split,
                                    games::Vocabulary* vocab_out) {
  const std::vector<games::Game> all = games::load_games(path);
  if (vocab_out) *vocab_out = games::vocabulary_from_games(all);
  if (split == "all") return all;
  std::vector<games::Game> picked;
  for (const games::Game& g : all) {
    if (std::string(games::to_string(g.split)) == split) picked.push_back(g);
  }
  if (picked.empty()) {
    throw std::invalid_argument("no games in split '" + split + "' of " +
                                path);
  }
  return picked;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(std::uint64_t seed, int n, const std::string& out,
                 const games::GenConfig& gcfg) {
  const std::vector<games::Game> all =
      games::generate_dataset(seed, static_cast<std::size_t>(n), gcfg);
  games::save_games(out, all);
  std::size_t train_n = 0, valid_n = 0, test_n = 0;
  for (const games::Game& g : all) {
    if (g.split == games::Split::train) ++train_n;
    if (g.split == games::Split::valid) ++valid_n;
    if (g.split == games::Split::test) ++test_n;
  }
  const games::Vocabulary vocab = games::vocabulary_from_games(all);
  json j;
  j["games"] = all.size();
  j["train"] = train_n;
  j["valid"] = valid_n;
  j["test"] = test_n;
  j["vocab_size"] = vocab.size();
  j["out"] = out;
  std::cout << j.dump() << '\n';
  return 0;
}

int cmd_train(const ModelOpts& opts, const std::string& dataset_path,
              const std::string& checkpoint_path,
              const std::string& metrics_path, int epochs, int batch,
              bool resume) {
  games::Vocabulary vocab;
  const std::vector<games::Game> dataset =
      load_split(dataset_path, "all", &vocab);
  film::ModelConfig mcfg = to_model_config(opts);
  Rng init(Rng::derive(opts.seed, 1));
  film::Model model(mcfg, vocab, init);

  train::TrainConfig tcfg;
  tcfg.epochs = epochs;
  tcfg.batch = batch;
  tcfg.seed = Rng::derive(opts.seed, 2);
  tcfg.adam.lr = opts.lr;
  tcfg.adam.weight_decay = opts.weight_decay;
  train::Adam adam(model.params(), tcfg.adam);
  if (resume) checkpoint::load_model(checkpoint_path, model, &adam);

  std::ofstream metrics(metrics_path, std::ios::binary);
  if (!metrics) {
    throw std::runtime_error("cannot open metrics file: " + metrics_path);
  }
  const train::MetricsSink sink = [&](const train::MetricsRecord& r) {
    metrics << metrics_json(r).dump() << '\n';
    metrics.flush();
  };

  try {
    const train::TrainResult result =
        train::train(model, adam, dataset, tcfg, sink);
    checkpoint::save_model(checkpoint_path, model, &adam);
    json j;
    j["best_epoch"] = result.best_epoch;
    j["best_valid_error"] = result.best_valid_error;
    if (result.final_test_error >= 0) {
      j["test_error"] = result.final_test_error;
      j["test_loss"] = result.final_test_loss;
    }
    j["checkpoint"] = checkpoint_path;
    j["metrics"] = metrics_path;
    std::cout << j.dump() << '\n';
    return 0;
  } catch (const train::DivergenceError& e) {
    // the model holds the best parameters seen before the divergence
    checkpoint::save_model(checkpoint_path, model, &adam);
    std::cerr << "error: " << e.what() << " (checkpoint saved to "
              << checkpoint_path << ")\n";
    return 3;
  }
}

int cmd_eval(const ModelOpts& opts, const std::string& dataset_path,
             const std::string& checkpoint_path, const std::string& split) {
  games::Vocabulary vocab;
  const std::vector<games::Game> picked =
      load_split(dataset_path, split, &vocab);
  film::ModelConfig mcfg = to_model_config(opts);
  Rng init(Rng::derive(opts.seed, 1));
  film::Model model(mcfg, vocab, init);
  checkpoint::load_model(checkpoint_path, model, nullptr);
  const train::EvalResult res = train::evaluate(model, picked, true);
  json j;
  j["split"] = split;
  j["task"] = opts.task;
  j["mode"] = opts.mode;
  j["games"] = picked.size();
  j["loss"] = res.loss;
  j["error"] = res.error;
  j["attn_last_q_rate"] =
      res.attn_last_q_rate < 0 ? json() : json(res.attn_last_q_rate);
  j["attn_answer_rate"] =
      res.attn_answer_rate < 0 ? json() : json(res.attn_answer_rate);
  if (res.err30 >= 0) {
    j["error@0.3"] = res.err30;
    j["error@0.5"] = res.err50;
    j["error@0.7"] = res.err70;
  }
  std::cout << j.dump() << '\n';
  return 0;
}

int cmd_gradcheck(const ModelOpts& opts, double tolerance,
                  bool mode_given) {
  std::vector<std::string> modes;
  if (mode_given) {
    modes.push_back(opts.mode);
  } else {
    modes = {"baseline_nn_mlb", "single_hop", "multi_hop", "multi_hop_img"};
  }
  bool all_pass = true;
  for (const std::string& mode : modes) {
    ModelOpts o = opts;
    o.mode = mode;
    film::ModelConfig cfg = to_model_config(o);
    const train::GradcheckReport rep =
        train::gradcheck_model(cfg, tolerance);
    for (const train::GradcheckEntry& e : rep.entries) {
      std::printf("TENSOR %-16s %-28s %10.3e %s\n", mode.c_str(),
                  e.name.c_str(), e.max_rel_error,
                  e.max_rel_error <= tolerance ? "ok" : "FAIL");
    }
    std::printf("MODE %-16s tensors=%zu worst=%s max_rel_error=%.3e "
                "tolerance=%.1e %s\n",
                mode.c_str(), rep.entries.size(), rep.worst_name.c_str(),
                rep.worst_error, tolerance, rep.pass ? "PASS" : "FAIL");
    all_pass = all_pass && rep.pass;
  }
  return all_pass ? 0 : 1;
}

int cmd_dump_attention(const ModelOpts& opts, const std::string& dataset_path,
                       const std::string& checkpoint_path,
                       const std::string& split, const std::string& out) {
  const film::GeneratorMode gm = film::generator_mode_from(opts.mode);
  if (gm != film::GeneratorMode::multi_hop &&
      gm != film::GeneratorMode::multi_hop_img) {
    throw std::invalid_argument(
        "dump-attention needs a multi-hop mode (got " + opts.mode + ")");
  }
  games::Vocabulary vocab;
  const std::vector<games::Game> picked =
      load_split(dataset_path, split, &vocab);
  film::ModelConfig mcfg = to_model_config(opts);
  Rng init(Rng::derive(opts.seed, 1));
  film::Model model(mcfg, vocab, init);
  checkpoint::load_model(checkpoint_path, model, nullptr);

  std::ofstream trace_file(out, std::ios::binary);
  if (!trace_file) throw std::runtime_error("cannot open for writing: " + out);
  std::vector<film::HopTrace> analysis_traces;
  std::vector<games::TokenizedDialogue> dialogues;
  Rng fwd(0);
  for (const games::Game& g : picked) {
    film::TaskOutput res = model.forward(g, Mode::eval, fwd);
    const film::HopTrace* chosen = nullptr;
    for (const film::HopTrace& tr : res.traces) {
      trace_file << film::format_hop_trace(g.id, tr);
      if (tr.hops.empty()) continue;
      if (!chosen || tr.pipeline == "crop") chosen = &tr;
    }
    if (chosen) {
      analysis_traces.push_back(*chosen);
      dialogues.push_back(res.tokens);
    }
  }
  if (!trace_file) throw std::runtime_error("write failed: " + out);

  const train::AttentionStats stats =
      train::attention_analysis(analysis_traces, dialogues);
  json j;
  j["games"] = stats.games_count;
  j["hops"] = stats.per_hop_last_q.size();
  j["attn_last_q_rate"] = stats.last_q_rate;
  j["attn_answer_rate"] = stats.answer_rate;
  j["per_hop_last_q"] = stats.per_hop_last_q;
  j["per_hop_answer"] = stats.per_hop_answer;
  j["traces"] = out;
  std::cout << j.dump() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-hop feature modulation on synthetic referring games"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  std::string cfg_path_unused;
  gen->add_option("--config", cfg_path_unused,
                  "key=value config file; flags override");
  int gen_n = 3000;
  std::uint64_t gen_seed = 1;
  std::string gen_out = "games.jsonl";
  games::GenConfig gcfg;
  gen->add_option("--n", gen_n, "number of games")
      ->check(CLI::Range(1, 100000000))
      ->capture_default_str();
  gen->add_option("--seed", gen_seed, "master seed")->capture_default_str();
  gen->add_option("--out", gen_out, "output path")->capture_default_str();
  gen->add_option("--grid", gcfg.grid, "grid cells per side")
      ->capture_default_str();
  gen->add_option("--cell", gcfg.cell_px, "pixels per cell")
      ->capture_default_str();
  gen->add_option("--phi-min", gcfg.phi_min, "min objects")
      ->capture_default_str();
  gen->add_option("--phi-max", gcfg.phi_max, "max objects")
      ->capture_default_str();
  gen->add_option("--dlg-min", gcfg.dlg_min, "min dialogue pairs")
      ->capture_default_str();
  gen->add_option("--dlg-max", gcfg.dlg_max,
                  "max dialogue pairs (0 = one referring expression)")
      ->capture_default_str();

  // train
  auto* tr = app.add_subcommand("train", "train a model");
  tr->add_option("--config", cfg_path_unused,
                 "key=value config file; flags override");
  ModelOpts tr_opts;
  std::string tr_dataset, tr_checkpoint = "model.mhfm",
                          tr_metrics = "metrics.jsonl";
  int tr_epochs = 15, tr_batch = 32;
  bool tr_resume = false;
  tr->add_option("--dataset", tr_dataset, "dataset path")->required();
  tr->add_option("--checkpoint", tr_checkpoint, "checkpoint output path")
      ->capture_default_str();
  tr->add_option("--out", tr_metrics, "metrics stream path")
      ->capture_default_str();
  tr->add_option("--epochs", tr_epochs, "max epochs")->capture_default_str();
  tr->add_option("--batch", tr_batch, "mini-batch size")
      ->check(CLI::Range(1, 1 << 20))
      ->capture_default_str();
  tr->add_flag("--resume", tr_resume, "continue from the checkpoint");
  add_model_flags(tr, tr_opts);

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--config", cfg_path_unused,
                 "key=value config file; flags override");
  ModelOpts ev_opts;
  std::string ev_dataset, ev_checkpoint = "model.mhfm", ev_split = "test";
  ev->add_option("--dataset", ev_dataset, "dataset path")->required();
  ev->add_option("--checkpoint", ev_checkpoint, "checkpoint path")
      ->capture_default_str();
  ev->add_option("--split", ev_split, "train, valid, test or all")
      ->capture_default_str();
  add_model_flags(ev, ev_opts);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck",
                                "finite-difference gradient verification");
  gc->add_option("--config", cfg_path_unused,
                 "key=value config file; flags override");
  ModelOpts gc_opts;
  double gc_tolerance = 1e-3;
  gc->add_option("--tolerance", gc_tolerance, "max relative error")
      ->capture_default_str();
  add_model_flags(gc, gc_opts);

  // dump-attention
  auto* da = app.add_subcommand("dump-attention",
                                "export hop traces and attention statistics");
  da->add_option("--config", cfg_path_unused,
                 "key=value config file; flags override");
  ModelOpts da_opts;
  da_opts.task = "oracle";
  std::string da_dataset, da_checkpoint = "model.mhfm", da_split = "test",
                          da_out = "attention.tsv";
  da->add_option("--dataset", da_dataset, "dataset path")->required();
  da->add_option("--checkpoint", da_checkpoint, "checkpoint path")
      ->capture_default_str();
  da->add_option("--split", da_split, "split to trace")->capture_default_str();
  da->add_option("--out", da_out, "trace output path")->capture_default_str();
  add_model_flags(da, da_opts);

  // config-injected tokens may repeat a flag; the explicit one (last) wins
  for (CLI::App* cmd : {gen, tr, ev, gc, da}) {
    for (CLI::Option* opt : cmd->get_options()) {
      opt->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    }
  }

  std::vector<std::string> args;
  try {
    args = expand_config(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 64;
  }
  std::vector<const char*> cargs;
  for (const std::string& a : args) cargs.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(cargs.size()), cargs.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 64;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_seed, gen_n, gen_out, gcfg);
    if (tr->parsed()) {
      return cmd_train(tr_opts, tr_dataset, tr_checkpoint, tr_metrics,
                       tr_epochs, tr_batch, tr_resume);
    }
    if (ev->parsed()) {
      return cmd_eval(ev_opts, ev_dataset, ev_checkpoint, ev_split);
    }
    if (gc->parsed()) {
      return cmd_gradcheck(gc_opts, gc_tolerance,
                           gc->count("--mode") > 0);
    }
    if (da->parsed()) {
      return cmd_dump_attention(da_opts, da_dataset, da_checkpoint, da_split,
                                da_out);
    }
  } catch (const checkpoint::CheckpointError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 4;
  } catch (const train::DivergenceError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 64;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
