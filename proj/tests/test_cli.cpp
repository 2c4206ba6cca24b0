#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "mhfilm/checkpoint.hpp"

using json = nlohmann::json;

namespace {

const char* cli = MHFILM_CLI_PATH;

struct Result {
  int exit_code;
  std::string out;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(cli) + " " + args + " > cli_out.txt 2>&1";
  const int rc = std::system(cmd.c_str());
  std::ifstream f("cli_out.txt");
  std::stringstream ss;
  ss << f.rdbuf();
  return {WEXITSTATUS(rc), ss.str()};
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

json last_json_line(const std::string& text) {
  std::istringstream is(text);
  std::string line, last;
  while (std::getline(is, line)) {
    if (!line.empty() && line[0] == '{') last = line;
  }
  return json::parse(last);
}

}  // namespace

TEST_CASE("gen-data determinism and validation") {
  Result a = run("gen-data --n 50 --seed 7 --out cli_a.jsonl");
  REQUIRE(a.exit_code == 0);
  const std::string first = slurp("cli_a.jsonl");
  Result b = run("gen-data --n 50 --seed 7 --out cli_a.jsonl");
  REQUIRE(b.exit_code == 0);
  CHECK(first == slurp("cli_a.jsonl"));
  CHECK(a.out == b.out);

  const json summary = last_json_line(a.out);
  CHECK(summary["games"] == 50);
  CHECK(summary["vocab_size"].get<int>() > 6);

  CHECK(run("gen-data --n 0 --out cli_zero.jsonl").exit_code == 64);
  CHECK(run("gen-data --n 10 --out /no/such/dir/x.jsonl").exit_code == 2);
}

TEST_CASE("help lists every flag with its default") {
  Result h = run("train --help");
  CHECK(h.exit_code == 0);
  for (const char* flag :
       {"--dataset", "--checkpoint", "--out", "--epochs", "--batch", "--lr",
        "--dropout", "--weight-decay", "--mode", "--task", "--seed",
        "--use-category", "--use-crop", "--use-image", "--config",
        "--resume"}) {
    CAPTURE(flag);
    CHECK(h.out.find(flag) != std::string::npos);
  }
  const bool lr_shown = h.out.find("3e-04") != std::string::npos ||
                        h.out.find("0.0003") != std::string::npos;
  CHECK(lr_shown);  // lr default shown
  Result g = run("gen-data --help");
  for (const char* flag : {"--n", "--grid", "--phi-min", "--phi-max",
                           "--dlg-min", "--dlg-max", "--seed", "--out"}) {
    CAPTURE(flag);
    CHECK(g.out.find(flag) != std::string::npos);
  }
  Result e = run("eval --help");
  CHECK(e.out.find("--split") != std::string::npos);
  Result gc = run("gradcheck --help");
  CHECK(gc.out.find("--tolerance") != std::string::npos);
}

TEST_CASE("train, eval, resume, dump-attention round trip") {
  REQUIRE(run("gen-data --n 60 --seed 13 --grid 3 --cell 2 --phi-min 2 "
              "--phi-max 2 --dlg-min 1 --dlg-max 2 --out cli_d.jsonl")
              .exit_code == 0);

  Result tr = run(
      "train --dataset cli_d.jsonl --task guesser --mode multi_hop "
      "--epochs 2 --batch 8 --dropout 0.1 --lr 1e-3 --seed 5 "
      "--checkpoint cli_m.mhfm --out cli_metrics.jsonl");
  REQUIRE(tr.exit_code == 0);

  SUBCASE("metrics stream ends with the test split") {
    std::ifstream f("cli_metrics.jsonl");
    std::string line, last;
    while (std::getline(f, line)) last = line;
    CHECK(json::parse(last)["split"] == "test");
  }

  SUBCASE("training twice with the same seed is bitwise reproducible") {
    Result tr2 = run(
        "train --dataset cli_d.jsonl --task guesser --mode multi_hop "
        "--epochs 2 --batch 8 --dropout 0.1 --lr 1e-3 --seed 5 "
        "--checkpoint cli_m2.mhfm --out cli_metrics2.jsonl");
    REQUIRE(tr2.exit_code == 0);
    CHECK(slurp("cli_metrics.jsonl") == slurp("cli_metrics2.jsonl"));
    CHECK(slurp("cli_m.mhfm") == slurp("cli_m2.mhfm"));
  }

  SUBCASE("eval matches the recorded best validation error") {
    const json summary = last_json_line(tr.out);
    Result ev = run(
        "eval --dataset cli_d.jsonl --checkpoint cli_m.mhfm --task guesser "
        "--mode multi_hop --split valid --seed 5");
    REQUIRE(ev.exit_code == 0);
    const json j = last_json_line(ev.out);
    CHECK(j["error"].get<double>() ==
          doctest::Approx(summary["best_valid_error"].get<double>())
              .epsilon(1e-12));
    // rerunning eval reproduces metrics bitwise
    Result ev2 = run(
        "eval --dataset cli_d.jsonl --checkpoint cli_m.mhfm --task guesser "
        "--mode multi_hop --split valid --seed 5");
    CHECK(ev.out == ev2.out);
  }

  SUBCASE("architecture mismatch names the differing tensor") {
    Result bad = run(
        "eval --dataset cli_d.jsonl --checkpoint cli_m.mhfm --task guesser "
        "--mode single_hop --split valid");
    CHECK(bad.exit_code == 4);
  }

  SUBCASE("corrupted magic is a checkpoint error") {
    std::string bytes = slurp("cli_m.mhfm");
    bytes[0] = 'X';
    std::ofstream("cli_bad.mhfm", std::ios::binary) << bytes;
    Result bad = run(
        "eval --dataset cli_d.jsonl --checkpoint cli_bad.mhfm --task guesser "
        "--mode multi_hop --split valid");
    CHECK(bad.exit_code == 4);
  }

  SUBCASE("resume restores the optimizer step count") {
    Result rs = run(
        "train --dataset cli_d.jsonl --task guesser --mode multi_hop "
        "--epochs 1 --batch 8 --dropout 0.1 --lr 1e-3 --seed 5 --resume "
        "--checkpoint cli_m.mhfm --out cli_metrics3.jsonl");
    CHECK(rs.exit_code == 0);
    // the saved step count grew past a fresh 1-epoch run
    const auto tensors = mhfilm::checkpoint::load("cli_m.mhfm");
    double steps = 0;
    for (const auto& t : tensors) {
      if (t.name == "opt.t") steps = t.data[0];
    }
    CHECK(steps > 7);  // 2 epochs (14 steps) + 1 resumed epoch
  }

  SUBCASE("dump-attention writes K-row traces and a summary") {
    Result da = run(
        "dump-attention --dataset cli_d.jsonl --checkpoint cli_m.mhfm "
        "--task guesser --mode multi_hop --split valid --out cli_tr.tsv");
    REQUIRE(da.exit_code == 0);
    const json j = last_json_line(da.out);
    CHECK(j["hops"] == 4);
    CHECK(j["attn_last_q_rate"].get<double>() >= 0.0);
    CHECK(j["attn_last_q_rate"].get<double>() <= 1.0);
    CHECK(j["attn_answer_rate"].get<double>() >= 0.0);
    CHECK(j["attn_answer_rate"].get<double>() <= 1.0);
    // header: game_id pipeline K T, then K tab-separated rows
    std::ifstream f("cli_tr.tsv");
    std::string header;
    REQUIRE(std::getline(f, header));
    std::istringstream hs(header);
    std::uint64_t gid;
    std::string pipe;
    std::size_t k, t;
    hs >> gid >> pipe >> k >> t;
    CHECK((pipe == "img" || pipe == "crop"));
    CHECK(k == 4);
    for (std::size_t row = 0; row < k; ++row) {
      std::string line;
      REQUIRE(std::getline(f, line));
      std::istringstream ls(line);
      double v, sum = 0;
      std::size_t count = 0;
      while (ls >> v) {
        sum += v;
        ++count;
      }
      CHECK(count == t);
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
  }

  SUBCASE("dump-attention rejects non-hop modes") {
    Result bad = run(
        "dump-attention --dataset cli_d.jsonl --checkpoint cli_m.mhfm "
        "--task guesser --mode baseline_nn --split valid --out cli_x.tsv");
    CHECK(bad.exit_code == 64);
  }
}

TEST_CASE("config file merges with flags winning") {
  std::ofstream cfg("cli_cfg.ini");
  cfg << "n=25\nseed=9\nout=cli_cfg_out.jsonl\n";
  cfg.close();
  Result a = run("gen-data --config cli_cfg.ini");
  REQUIRE(a.exit_code == 0);
  CHECK(last_json_line(a.out)["games"] == 25);
  Result b = run("gen-data --config cli_cfg.ini --n 30");
  REQUIRE(b.exit_code == 0);
  CHECK(last_json_line(b.out)["games"] == 30);  // flag wins
}

TEST_CASE("gradcheck single mode exits cleanly") {
  Result gc = run("gradcheck --mode multi_hop --task guesser --seed 4");
  CHECK(gc.exit_code == 0);
  CHECK(gc.out.find("PASS") != std::string::npos);
  CHECK(gc.out.find("TENSOR") != std::string::npos);

  // an unreachable tolerance demonstrates the threshold semantics
  Result tight = run(
      "gradcheck --mode multi_hop --task guesser --seed 4 --tolerance 1e-12");
  CHECK(tight.exit_code == 1);
  CHECK(tight.out.find("FAIL") != std::string::npos);
}

TEST_CASE("pointer eval reports the three IoU thresholds") {
  REQUIRE(run("gen-data --n 40 --seed 17 --grid 3 --cell 2 --phi-min 2 "
              "--phi-max 2 --dlg-min 1 --dlg-max 1 --out cli_p.jsonl")
              .exit_code == 0);
  Result tr = run(
      "train --dataset cli_p.jsonl --task pointer --mode multi_hop "
      "--epochs 1 --batch 8 --dropout 0 --lr 1e-3 --seed 5 "
      "--checkpoint cli_pm.mhfm --out cli_pmetrics.jsonl");
  REQUIRE(tr.exit_code == 0);
  Result ev = run(
      "eval --dataset cli_p.jsonl --checkpoint cli_pm.mhfm --task pointer "
      "--mode multi_hop --split valid");
  REQUIRE(ev.exit_code == 0);
  const json j = last_json_line(ev.out);
  CHECK(j.contains("error@0.3"));
  CHECK(j.contains("error@0.5"));
  CHECK(j.contains("error@0.7"));
}
