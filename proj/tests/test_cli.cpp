#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>
#include <vector>

#include "mcls/checkpoint.hpp"
#include "mcls/errors.hpp"
#include "mcls/finetune.hpp"
#include "mcls/records.hpp"
#include "mcls/rng.hpp"

#ifndef MCLS_BIN
#error "MCLS_BIN must point at the mcls binary"
#endif

using namespace mcls;

namespace {

namespace fs = std::filesystem;

fs::path scratch_dir() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() /
                 ("mcls_cli_test_" + std::to_string(::getpid()));
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string at(const std::string& name) {
  return (scratch_dir() / name).string();
}

struct RunResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return {};
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

// Runs the binary with stdout/stderr captured to scratch files.
RunResult run_cli(const std::string& args) {
  static int counter = 0;
  const std::string out_path = at("stdout." + std::to_string(counter));
  const std::string err_path = at("stderr." + std::to_string(counter));
  ++counter;
  const std::string cmd = std::string(MCLS_BIN) + " " + args + " > " +
                          out_path + " 2> " + err_path;
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = read_file(out_path);
  r.err = read_file(err_path);
  return r;
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  REQUIRE(bool(out));
  out << text;
}

// Deterministic word soup: documents of eight sentences each.
void write_corpus(const fs::path& dir, int n_docs, std::uint64_t seed) {
  fs::create_directories(dir);
  Rng rng(seed);
  std::ostringstream a, b;
  for (int d = 0; d < n_docs; ++d) {
    std::ostringstream& target = d % 2 == 0 ? a : b;
    if (d >= 2) target << "\n";
    for (int s = 0; s < 8; ++s) {
      const int len = 4 + int(rng.below(4));
      for (int t = 0; t < len; ++t) {
        if (t > 0) target << ' ';
        target << "w" << rng.below(30);
      }
      target << "\n";
    }
  }
  write_file((dir / "part_a.txt").string(), a.str());
  write_file((dir / "part_b.txt").string(), b.str());
}

std::string base_config(int pretrain_steps, const std::string& pretrain_extra,
                        int finetune_steps) {
  std::ostringstream cfg;
  cfg << R"({
  "model": {"k": 2, "d_model": 16, "n_layers": 2, "n_heads": 2, "d_ff": 32,
            "insert_layers": [1], "vocab_size": 64, "max_len": 24,
            "dropout_p": 0.1},
  "pretrain": {"steps": )"
      << pretrain_steps << R"(, "batch_size": 6, "mode": "three_part")"
      << pretrain_extra << R"(},
  "finetune": {"steps": )"
      << finetune_steps << R"(, "batch_size": 8, "lr": 0.001},
  "seeds": {"pretrain": 41, "finetune": 42}
})";
  return cfg.str();
}

// Two easily separable classes drawing from disjoint token pools.
void write_task(const std::string& path, int n_train, int n_dev,
                std::uint64_t seed) {
  Rng rng(seed);
  std::ostringstream j;
  auto emit_example = [&](int label) {
    const int lo = label == 0 ? 10 : 25;
    const int len = 3 + int(rng.below(3));
    j << "{\"a\": [";
    for (int t = 0; t < len; ++t) {
      if (t > 0) j << ", ";
      j << lo + int(rng.below(8));
    }
    j << "], \"label\": " << label << "}";
  };
  j << "{\"kind\": \"classification\", \"n_classes\": 2, "
       "\"metric\": \"accuracy\", \"train\": [";
  for (int i = 0; i < n_train; ++i) {
    if (i > 0) j << ", ";
    emit_example(i % 2);
  }
  j << "], \"dev\": [";
  for (int i = 0; i < n_dev; ++i) {
    if (i > 0) j << ", ";
    emit_example(i % 2);
  }
  j << "]}";
  write_file(path, j.str());
}

}  // namespace

TEST_CASE("cli: usage errors and help") {
  CHECK(run_cli("").exit_code == 2);
  CHECK(run_cli("frobnicate").exit_code == 2);
  const RunResult help = run_cli("--help");
  CHECK(help.exit_code == 0);
  CHECK(help.out.find("pretrain") != std::string::npos);
  CHECK(help.out.find("analyze") != std::string::npos);
  CHECK(run_cli("pretrain").exit_code == 2);  // missing required --config
  CHECK(run_cli("analyze").exit_code == 2);   // missing sub-subcommand
}

TEST_CASE("cli: pretraining smoke run, determinism, and error paths") {
  write_corpus(scratch_dir() / "corpus", 6, 99);
  write_file(at("cfg.json"), base_config(50, "", 60));

  const RunResult first = run_cli("pretrain --config " + at("cfg.json") +
                                  " --corpus " + at("corpus") + " --out " +
                                  at("a.ckpt"));
  INFO(first.err);
  CHECK(first.exit_code == 0);
  CHECK(first.out.find("pretrain: wrote") != std::string::npos);
  CHECK(first.out.find("config_hash=") != std::string::npos);

  // The checkpoint loads and matches the resolved configuration.
  const ckpt::Checkpoint loaded = ckpt::load_checkpoint(at("a.ckpt"));
  CHECK(loaded.config.k == 2);
  CHECK(loaded.config.d_model == 16);
  CHECK(loaded.config.vocab_size > 8);
  CHECK(loaded.extra.at("phase") == "pretrain");
  CHECK(loaded.extra.at("seed") == "41");
  const encoder::EncoderParams params = ckpt::to_encoder(loaded);
  CHECK(params.layers.size() == 2);

  // The run log carries the config hash and one line per step.
  const std::string log = read_file(at("a.ckpt.log"));
  CHECK(log.find("# config_hash ") != std::string::npos);
  CHECK(log.find("# seed 41") != std::string::npos);
  int step_lines = 0;
  std::istringstream stream(log);
  std::string line;
  while (std::getline(stream, line)) {
    if (!line.empty() && line[0] != '#') ++step_lines;
  }
  CHECK(step_lines == 50);

  // Same config and seed: byte-identical checkpoint and log.
  const RunResult second = run_cli("pretrain --config " + at("cfg.json") +
                                   " --corpus " + at("corpus") + " --out " +
                                   at("b.ckpt"));
  CHECK(second.exit_code == 0);
  CHECK((read_file(at("a.ckpt")) == read_file(at("b.ckpt"))));
  CHECK((read_file(at("a.ckpt.log")) == read_file(at("b.ckpt.log"))));

  // A different seed changes the artifact.
  std::string other = base_config(50, "", 60);
  other.replace(other.find("\"pretrain\": 41"), 14, "\"pretrain\": 43");
  write_file(at("cfg_seed.json"), other);
  const RunResult third = run_cli("pretrain --config " + at("cfg_seed.json") +
                                  " --corpus " + at("corpus") + " --out " +
                                  at("c.ckpt"));
  CHECK(third.exit_code == 0);
  CHECK((read_file(at("a.ckpt")) != read_file(at("c.ckpt"))));

  // Error paths: missing corpus, malformed config, unknown key.
  CHECK(run_cli("pretrain --config " + at("cfg.json") + " --corpus " +
                at("no_such_dir") + " --out " + at("x.ckpt"))
            .exit_code == 2);
  write_file(at("bad.json"), "{\"pretrain\": {\"stepz\": 5}}");
  const RunResult bad = run_cli("pretrain --config " + at("bad.json") +
                                " --corpus " + at("corpus") + " --out " +
                                at("x.ckpt"));
  CHECK(bad.exit_code == 2);
  CHECK(bad.err.find("stepz") != std::string::npos);
  CHECK(run_cli("pretrain --config " + at("nope.json") + " --corpus " +
                at("corpus") + " --out " + at("x.ckpt"))
            .exit_code == 2);

  // Runaway learning rate: parameters blow up, loss goes non-finite.
  write_file(at("cfg_lr.json"), base_config(5, ", \"lr\": 1e300", 60));
  const RunResult numeric = run_cli("pretrain --config " + at("cfg_lr.json") +
                                    " --corpus " + at("corpus") + " --out " +
                                    at("x.ckpt"));
  CHECK(numeric.exit_code == 3);
}

TEST_CASE("cli: fine-tuning pipeline and aggregation guard") {
  // Reuses the pretrained checkpoint from the smoke test when present;
  // otherwise builds it.
  if (!fs::exists(at("a.ckpt"))) {
    write_corpus(scratch_dir() / "corpus", 6, 99);
    write_file(at("cfg.json"), base_config(50, "", 60));
    REQUIRE(run_cli("pretrain --config " + at("cfg.json") + " --corpus " +
                    at("corpus") + " --out " + at("a.ckpt"))
                .exit_code == 0);
  }
  write_task(at("task.json"), 24, 16, 7);

  const std::string cmd = "finetune --config " + at("cfg.json") + " --ckpt " +
                          at("a.ckpt") + " --task " + at("task.json") +
                          " --out " + at("m.ckpt") + " --aggregation reparam";
  const RunResult r = run_cli(cmd);
  INFO(r.err);
  CHECK(r.exit_code == 0);
  CHECK(r.out.find("finetune: best dev accuracy=") != std::string::npos);

  // Model checkpoint loads as a fine-tuned model.
  const finetune::FinetunedModel model =
      ckpt::to_finetuned(ckpt::load_checkpoint(at("m.ckpt")));
  CHECK(model.aggregation == finetune::Aggregation::reparam);
  CHECK(model.n_classes == 2);

  // Metric log: header, step/metric rows, best line.
  const std::string log = read_file(at("m.ckpt.log"));
  CHECK(log.find("# config_hash ") != std::string::npos);
  CHECK(log.find("# aggregation reparam") != std::string::npos);
  CHECK(log.find("# metric accuracy") != std::string::npos);
  CHECK(log.find("# best_step ") != std::string::npos);
  CHECK(log.find("0\t") != std::string::npos);

  // Prediction file: one record per dev example, with per-facet fields.
  const auto preds = records::load_records(at("m.ckpt.preds.jsonl"));
  REQUIRE(preds.size() == 16);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    CHECK(preds[i].id == int(i));
    CHECK(preds[i].probs.size() == 2);
    CHECK(preds[i].cls_probs.size() == 2);  // K = 2 facets
    CHECK(preds[i].cls_emb.size() == 2);
  }

  // Reruns are byte-identical across the board.
  REQUIRE(run_cli("finetune --config " + at("cfg.json") + " --ckpt " +
                  at("a.ckpt") + " --task " + at("task.json") + " --out " +
                  at("m2.ckpt") + " --aggregation reparam")
              .exit_code == 0);
  CHECK((read_file(at("m.ckpt")) == read_file(at("m2.ckpt"))));
  CHECK((read_file(at("m.ckpt.log")) == read_file(at("m2.ckpt.log"))));
  CHECK((read_file(at("m.ckpt.preds.jsonl")) ==
         read_file(at("m2.ckpt.preds.jsonl"))));

  // k1 aggregation on a K=2 checkpoint is a configuration error.
  const RunResult k1 = run_cli("finetune --config " + at("cfg.json") +
                               " --ckpt " + at("a.ckpt") + " --task " +
                               at("task.json") + " --out " + at("k1.ckpt") +
                               " --aggregation k1");
  CHECK(k1.exit_code == 2);
  // Unknown aggregation name is rejected by the flag validator.
  CHECK(run_cli("finetune --config " + at("cfg.json") + " --ckpt " +
                at("a.ckpt") + " --task " + at("task.json") + " --out " +
                at("x.ckpt") + " --aggregation mean")
            .exit_code == 2);
  // Missing task file.
  CHECK(run_cli("finetune --config " + at("cfg.json") + " --ckpt " +
                at("a.ckpt") + " --task " + at("nope.json") + " --out " +
                at("x.ckpt"))
            .exit_code == 2);
  // A fine-tuned model is not a valid pretraining checkpoint.
  CHECK(run_cli("finetune --config " + at("cfg.json") + " --ckpt " +
                at("m.ckpt") + " --task " + at("task.json") + " --out " +
                at("x.ckpt"))
            .exit_code == 2);
}

TEST_CASE("cli: analyze subcommands") {
  // Calibration fixture with a hand-computable result: twelve records at
  // confidence 0.9 (nine correct), eight at 0.6 (four correct) -> 0.37.
  std::vector<records::PredictionRecord> fixture;
  int id = 0;
  for (int i = 0; i < 12; ++i) {
    records::PredictionRecord r;
    r.id = id++;
    r.gold = i < 9 ? 0.0 : 1.0;
    r.probs = {0.9, 0.1};
    fixture.push_back(r);
  }
  for (int i = 0; i < 8; ++i) {
    records::PredictionRecord r;
    r.id = id++;
    r.gold = i < 4 ? 0.0 : 1.0;
    r.probs = {0.6, 0.4};
    fixture.push_back(r);
  }
  records::save_records(at("fixture.jsonl"), fixture);

  const RunResult ece = run_cli("analyze ece --records " + at("fixture.jsonl"));
  CHECK(ece.exit_code == 0);
  REQUIRE(ece.out.rfind("ece ", 0) == 0);
  const double value = std::stod(ece.out.substr(4));
  CHECK(value == doctest::Approx(0.37).epsilon(1e-9));

  // Malformed record file: error names the line.
  write_file(at("broken.jsonl"),
             "{\"id\": 0, \"gold\": 0, \"probs\": [0.5, 0.5]}\n"
             "{\"id\": 1, \"gold\": 0, \"probs\": [0.5, oops]}\n");
  const RunResult broken =
      run_cli("analyze ece --records " + at("broken.jsonl"));
  CHECK(broken.exit_code == 2);
  CHECK(broken.err.find("line 2") != std::string::npos);

  // Overlap: one file needs two distinct methods.
  CHECK(run_cli("analyze overlap --records " + at("fixture.jsonl"))
            .exit_code == 2);
  CHECK(run_cli("analyze overlap --records " + at("fixture.jsonl") +
                " --method-a least_confidence --method-b least_confidence")
            .exit_code == 2);

  // Identical files overlap completely.
  const RunResult full =
      run_cli("analyze overlap --records " + at("fixture.jsonl") +
              " --records " + at("fixture.jsonl"));
  CHECK(full.exit_code == 0);
  CHECK(full.out.find("ratio 1") != std::string::npos);

  // Four pairs add the agreement bound; identical rankings give a tiny p.
  std::string eight;
  for (int i = 0; i < 8; ++i) eight += " --records " + at("fixture.jsonl");
  const RunResult four_pairs = run_cli("analyze overlap" + eight);
  CHECK(four_pairs.exit_code == 0);
  REQUIRE(four_pairs.out.find("chernoff_p ") != std::string::npos);
  const double p = std::stod(
      four_pairs.out.substr(four_pairs.out.find("chernoff_p ") + 11));
  CHECK(p < 1e-3);

  // Odd file count.
  CHECK(run_cli("analyze overlap --records " + at("fixture.jsonl") +
                " --records " + at("fixture.jsonl") + " --records " +
                at("fixture.jsonl"))
            .exit_code == 2);

  // Ensemble: averaging a file with itself reproduces it.
  REQUIRE(run_cli("analyze ensemble --records " + at("fixture.jsonl") +
                  " --records " + at("fixture.jsonl") + " --out " +
                  at("ens.jsonl"))
              .exit_code == 0);
  CHECK((read_file(at("ens.jsonl")) == read_file(at("fixture.jsonl"))));

  // Diversity and neighbors need facet embeddings; reuse prediction files
  // from the fine-tuning pipeline when present, else craft a small file.
  std::string emb_file = at("m.ckpt.preds.jsonl");
  if (!fs::exists(emb_file)) {
    std::vector<records::PredictionRecord> recs;
    Rng rng(4);
    for (int i = 0; i < 6; ++i) {
      records::PredictionRecord r;
      r.id = i;
      r.gold = 0.0;
      r.probs = {0.5, 0.5};
      r.cls_emb = {{rng.next_normal(), rng.next_normal()},
                   {rng.next_normal(), rng.next_normal()}};
      recs.push_back(r);
    }
    emb_file = at("emb.jsonl");
    records::save_records(emb_file, recs);
  }
  const RunResult diversity =
      run_cli("analyze diversity --records " + emb_file);
  INFO(diversity.err);
  CHECK(diversity.exit_code == 0);
  CHECK(diversity.out.find("facets 2") != std::string::npos);
  CHECK(diversity.out.find("mean_offdiag ") != std::string::npos);
  CHECK(diversity.out.find("1.000000") != std::string::npos);  // diagonal

  const RunResult nn = run_cli("analyze neighbors --records " + emb_file +
                               " --id 0 --facet 1 --top 3");
  CHECK(nn.exit_code == 0);
  CHECK(nn.out.find("id\tsimilarity") != std::string::npos);

  // Collapsed embeddings: zero variance in pairwise dots is numeric failure.
  std::vector<records::PredictionRecord> collapsed;
  for (int i = 0; i < 4; ++i) {
    records::PredictionRecord r;
    r.id = i;
    r.gold = 0.0;
    r.probs = {0.5, 0.5};
    r.cls_emb = {{1.0, 2.0}, {double(i), 1.0}};
    collapsed.push_back(r);
  }
  records::save_records(at("collapsed.jsonl"), collapsed);
  CHECK(run_cli("analyze diversity --records " + at("collapsed.jsonl"))
            .exit_code == 3);

  // swa over two pretraining checkpoints averages every array.
  if (fs::exists(at("a.ckpt")) && fs::exists(at("c.ckpt"))) {
    REQUIRE(run_cli("analyze swa --ckpt " + at("a.ckpt") + " --ckpt " +
                    at("c.ckpt") + " --out " + at("avg.ckpt"))
                .exit_code == 0);
    const ckpt::Checkpoint a = ckpt::load_checkpoint(at("a.ckpt"));
    const ckpt::Checkpoint c = ckpt::load_checkpoint(at("c.ckpt"));
    const ckpt::Checkpoint avg = ckpt::load_checkpoint(at("avg.ckpt"));
    REQUIRE(avg.arrays.size() == a.arrays.size());
    bool all_match = true;
    for (std::size_t i = 0; i < avg.arrays.size(); ++i) {
      const auto& va = *a.arrays[i].second.data;
      const auto& vc = *c.arrays[i].second.data;
      const auto& vm = *avg.arrays[i].second.data;
      for (std::size_t t = 0; t < vm.size(); ++t) {
        all_match = all_match && vm[t] == (va[t] + vc[t]) / 2.0;
      }
    }
    CHECK(all_match);
    CHECK(avg.extra.at("phase") == "swa");
  }
}
