#include "mcls/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "config_json.hpp"
#include "mcls/analysis.hpp"
#include "mcls/checkpoint.hpp"
#include "mcls/errors.hpp"
#include "mcls/finetune.hpp"
#include "mcls/log.hpp"
#include "mcls/pretrain.hpp"
#include "mcls/records.hpp"
#include "mcls/runconfig.hpp"
#include "mcls/textpipe.hpp"

namespace mcls::cli {

namespace {

namespace fs = std::filesystem;

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Flag value if given, config fallback otherwise; never empty.
std::string resolve_path(const std::string& flag, const std::string& fallback,
                         const char* what, const char* hint) {
  if (!flag.empty()) return flag;
  if (!fallback.empty()) return fallback;
  throw InputError(std::string("no ") + what + " path: pass " + hint +
                   " or set it under 'paths' in the run config");
}

std::vector<std::string> corpus_files(const std::string& path) {
  if (!fs::exists(path)) {
    throw InputError("corpus path '" + path + "' does not exist");
  }
  if (!fs::is_directory(path)) {
    return {path};
  }
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(path)) {
    if (entry.is_regular_file() && entry.path().extension() == ".txt") {
      files.push_back(entry.path().string());
    }
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) {
    throw InputError("corpus directory '" + path + "' contains no .txt files");
  }
  return files;
}

std::ofstream open_log_file(const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw IoError("cannot open '" + path + "' for writing");
  }
  return out;
}

// ---------------------------------------------------------------------------
// pretrain

struct PretrainArgs {
  std::string config, corpus, out;
};

void cmd_pretrain(const PretrainArgs& args) {
  const RunConfig cfg = RunConfig::load(args.config);
  const std::string corpus =
      resolve_path(args.corpus, cfg.paths.corpus, "corpus", "--corpus");
  const std::string out =
      resolve_path(args.out, cfg.paths.out, "output", "--out");
  const std::string hash = cfg.content_hash();
  log::info("pretrain: config " + args.config + " (hash " + hash + ")");

  if (cfg.model.vocab_size <= 0) {
    throw InputError(
        "model.vocab_size must be positive: it caps the vocabulary built "
        "from the corpus");
  }
  const std::vector<std::string> files = corpus_files(corpus);
  const textpipe::Vocabulary vocab =
      textpipe::build_vocab_from_files(files, cfg.model.vocab_size,
                                       cfg.model.k);
  const std::vector<textpipe::Document> docs =
      vocab.encode(textpipe::load_corpus(files));
  encoder::ModelConfig model = cfg.model;
  model.vocab_size = vocab.size();
  model.validate();
  log::info("pretrain: " + std::to_string(docs.size()) +
            " documents, vocabulary size " + std::to_string(vocab.size()));

  std::ofstream runlog = open_log_file(out + ".log");
  runlog << "# config_hash " << hash << "\n";
  runlog << "# seed " << cfg.seeds.pretrain << "\n";
  runlog << "# vocab_size " << vocab.size() << "\n";
  runlog << "# documents " << docs.size() << "\n";
  const pretrain::PretrainRunResult result = pretrain::run_pretraining(
      docs, vocab, model, cfg.pretrain, cfg.seeds.pretrain, &runlog);
  runlog.flush();
  if (!runlog) {
    throw IoError("failed writing '" + out + ".log'");
  }

  ckpt::Checkpoint checkpoint = ckpt::from_encoder(model, result.params);
  checkpoint.extra["config_hash"] = hash;
  checkpoint.extra["seed"] = std::to_string(cfg.seeds.pretrain);
  ckpt::save_checkpoint(out, checkpoint);

  const double final_loss =
      result.history.empty() ? 0.0 : result.history.back().total;
  std::cout << "pretrain: wrote " << out << " (steps=" << result.state.step
            << ", final_loss=" << g17(final_loss) << ", config_hash=" << hash
            << ")\n";
}

// ---------------------------------------------------------------------------
// finetune

struct FinetuneArgs {
  std::string config, ckpt, task, out;
  std::string aggregation = "reparam";
};

void cmd_finetune(const FinetuneArgs& args) {
  const RunConfig cfg = RunConfig::load(args.config);
  const std::string ckpt_path = resolve_path(args.ckpt, cfg.paths.checkpoint,
                                             "checkpoint", "--ckpt");
  const std::string task_path =
      resolve_path(args.task, cfg.paths.task, "task", "--task");
  const std::string out =
      resolve_path(args.out, cfg.paths.out, "output", "--out");
  const std::string hash = cfg.content_hash();
  const finetune::Aggregation agg =
      finetune::parse_aggregation(args.aggregation);
  log::info("finetune: checkpoint " + ckpt_path + ", task " + task_path +
            ", aggregation " + args.aggregation);

  const ckpt::Checkpoint pretrained = ckpt::load_checkpoint(ckpt_path);
  const encoder::EncoderParams params = ckpt::to_encoder(pretrained);
  const finetune::TaskSpec task = finetune::TaskSpec::load(task_path);

  const finetune::FinetuneResult result = finetune::finetune(
      params, pretrained.config, task, cfg.finetune, agg, cfg.seeds.finetune);

  ckpt::Checkpoint model_ckpt = ckpt::from_finetuned(result.model);
  model_ckpt.extra["config_hash"] = hash;
  model_ckpt.extra["seed"] = std::to_string(cfg.seeds.finetune);
  ckpt::save_checkpoint(out, model_ckpt);

  std::ofstream runlog = open_log_file(out + ".log");
  runlog << "# config_hash " << hash << "\n";
  runlog << "# seed " << cfg.seeds.finetune << "\n";
  runlog << "# aggregation " << args.aggregation << "\n";
  runlog << "# metric " << finetune::metric_name(task.metric) << "\n";
  for (const auto& point : result.history) {
    runlog << point.step << '\t' << g17(point.metric) << '\n';
  }
  runlog << "# best_step " << result.best_step << "\n";
  runlog << "# best_metric " << g17(result.best_metric) << "\n";
  runlog.flush();
  if (!runlog) {
    throw IoError("failed writing '" + out + ".log'");
  }

  std::vector<records::PredictionRecord> preds =
      finetune::predict(result.model, task.dev);
  if (task.kind == finetune::TaskKind::classification) {
    const std::vector<finetune::PerClsProbs> per_cls =
        finetune::per_cls_probabilities(result.model, task.train, task.dev);
    finetune::attach_per_cls(preds, per_cls);
  }
  records::save_records(out + ".preds.jsonl", preds);

  std::cout << "finetune: best dev " << finetune::metric_name(task.metric)
            << "=" << g17(result.best_metric) << " at step "
            << result.best_step << "; wrote " << out << ", " << out
            << ".log, " << out << ".preds.jsonl\n";
}

// ---------------------------------------------------------------------------
// analyze helpers

Tensor embedding_tensor(const std::vector<records::PredictionRecord>& recs,
                        const std::string& path) {
  if (recs.empty()) {
    throw InputError("record file '" + path + "' is empty");
  }
  const std::size_t k = recs[0].cls_emb.size();
  if (k == 0) {
    throw InputError("records in '" + path +
                     "' carry no facet embeddings (cls_emb)");
  }
  const std::size_t d = recs[0].cls_emb[0].size();
  std::vector<double> flat;
  flat.reserve(recs.size() * k * d);
  for (const auto& r : recs) {
    if (r.cls_emb.size() != k) {
      throw InputError("record id " + std::to_string(r.id) + " in '" + path +
                       "' has a mismatched facet count");
    }
    for (const auto& row : r.cls_emb) {
      if (row.size() != d) {
        throw InputError("record id " + std::to_string(r.id) + " in '" + path +
                         "' has a mismatched embedding width");
      }
      flat.insert(flat.end(), row.begin(), row.end());
    }
  }
  return Tensor::from({static_cast<int>(recs.size()), static_cast<int>(k),
                       static_cast<int>(d)},
                      std::move(flat));
}

// ---------------------------------------------------------------------------
// analyze subcommands

void cmd_analyze_ece(const std::string& records_path) {
  const auto recs = records::load_records(records_path);
  const analysis::EceResult result = analysis::ece(recs);
  std::cout << "ece " << g17(result.ece) << "\n";
  std::cout << "bin\tcount\tconfidence\taccuracy\n";
  for (std::size_t j = 0; j < result.bins.size(); ++j) {
    const auto& b = result.bins[j];
    char line[96];
    std::snprintf(line, sizeof line, "%zu\t%d\t%.6f\t%.6f\n", j + 1, b.count,
                  b.confidence, b.accuracy);
    std::cout << line;
  }
}

struct OverlapArgs {
  std::vector<std::string> files;
  std::string method = "least_confidence";
  std::string method_a, method_b;
};

void cmd_analyze_overlap(const OverlapArgs& args) {
  using analysis::top20_overlap;
  using analysis::uncertainty_rank;
  if (args.files.size() == 1) {
    if (args.method_a.empty() || args.method_b.empty()) {
      throw InputError(
          "overlap over a single record file needs --method-a and "
          "--method-b; pass two or more --records files to compare runs");
    }
    if (args.method_a == args.method_b) {
      throw InputError(
          "overlap within one record file needs two distinct methods");
    }
    const auto recs = records::load_records(args.files[0]);
    const auto rank_a =
        uncertainty_rank(recs, analysis::parse_uncertainty_method(args.method_a));
    const auto rank_b =
        uncertainty_rank(recs, analysis::parse_uncertainty_method(args.method_b));
    analysis::OverlapReport report = top20_overlap(rank_a, rank_b);
    report.method_a = args.method_a;
    report.method_b = args.method_b;
    std::cout << "overlap " << report.method_a << " vs " << report.method_b
              << ": count " << report.overlap_count << " ratio "
              << g17(report.ratio) << "\n";
    return;
  }
  if (args.files.size() % 2 != 0) {
    throw InputError(
        "overlap compares record files in pairs; got an odd number");
  }
  const analysis::UncertaintyMethod method =
      analysis::parse_uncertainty_method(args.method);
  std::vector<long long> counts;
  std::size_t ranking_size = 0;
  bool sizes_match = true;
  for (std::size_t i = 0; i < args.files.size(); i += 2) {
    const auto recs_a = records::load_records(args.files[i]);
    const auto recs_b = records::load_records(args.files[i + 1]);
    const auto rank_a = uncertainty_rank(recs_a, method);
    const auto rank_b = uncertainty_rank(recs_b, method);
    analysis::OverlapReport report = top20_overlap(rank_a, rank_b);
    report.method_a = report.method_b = args.method;
    if (i == 0) {
      ranking_size = rank_a.size();
    } else if (rank_a.size() != ranking_size) {
      sizes_match = false;
    }
    counts.push_back(report.overlap_count);
    std::cout << "pair " << (i / 2 + 1) << ": count " << report.overlap_count
              << " ratio " << g17(report.ratio) << "\n";
  }
  if (counts.size() == 4) {
    if (!sizes_match) {
      throw InputError(
          "the agreement bound needs all four ranking pairs to share one "
          "record count");
    }
    const double p =
        analysis::chernoff_p(counts, static_cast<long long>(ranking_size));
    std::cout << "chernoff_p " << g17(p) << "\n";
  }
}

struct DiversityArgs {
  std::vector<std::string> files;
};

void cmd_analyze_diversity(const DiversityArgs& args) {
  if (args.files.empty() || args.files.size() > 2) {
    throw InputError("diversity takes one record file (self-comparison) or "
                     "two (cross-run)");
  }
  const auto recs_a = records::load_records(args.files[0]);
  const auto recs_b = args.files.size() == 2
                          ? records::load_records(args.files[1])
                          : recs_a;
  if (recs_a.size() != recs_b.size()) {
    throw InputError("diversity record files differ in length");
  }
  for (std::size_t i = 0; i < recs_a.size(); ++i) {
    if (recs_a[i].id != recs_b[i].id) {
      throw InputError("diversity record files disagree on ids at position " +
                       std::to_string(i));
    }
  }
  const Tensor a = embedding_tensor(recs_a, args.files[0]);
  const Tensor b = embedding_tensor(
      recs_b, args.files.size() == 2 ? args.files[1] : args.files[0]);
  const int k = a.shape[1];
  std::cout << "facets " << k << " examples " << a.shape[0] << "\n";
  double off_sum = 0.0;
  int off_count = 0;
  for (int k1 = 0; k1 < k; ++k1) {
    std::string row;
    for (int k2 = 0; k2 < k; ++k2) {
      const double corr = analysis::diversity_corr(a, b, k1, k2);
      char cell[32];
      std::snprintf(cell, sizeof cell, "%s%.6f", k2 == 0 ? "" : "\t", corr);
      row += cell;
      if (k1 != k2) {
        off_sum += corr;
        ++off_count;
      }
    }
    std::cout << row << "\n";
  }
  if (off_count > 0) {
    std::cout << "mean_offdiag " << g17(off_sum / off_count) << "\n";
  }
}

struct NeighborsArgs {
  std::string records_path;
  int id = 0;
  int facet = 0;
  int top = 5;
};

void cmd_analyze_neighbors(const NeighborsArgs& args) {
  const auto recs = records::load_records(args.records_path);
  const auto neighbors =
      analysis::nearest_neighbors(recs, args.id, args.facet, args.top);
  std::cout << "id\tsimilarity\n";
  for (const auto& n : neighbors) {
    std::cout << n.id << '\t' << g17(n.similarity) << "\n";
  }
}

struct EnsembleArgs {
  std::vector<std::string> files;
  std::string out;
};

void cmd_analyze_ensemble(const EnsembleArgs& args) {
  std::vector<std::vector<records::PredictionRecord>> files;
  files.reserve(args.files.size());
  for (const auto& path : args.files) {
    files.push_back(records::load_records(path));
  }
  const auto averaged = analysis::ensemble_average(files);
  records::save_records(args.out, averaged);
  std::cout << "ensemble: wrote " << averaged.size() << " records to "
            << args.out << "\n";
}

struct SwaArgs {
  std::vector<std::string> ckpts;
  std::string out;
};

void cmd_analyze_swa(const SwaArgs& args) {
  std::vector<ckpt::Checkpoint> models;
  models.reserve(args.ckpts.size());
  for (const auto& path : args.ckpts) {
    models.push_back(ckpt::load_checkpoint(path));
  }
  const nlohmann::json base_config =
      detail::model_config_to_json(models[0].config);
  for (std::size_t m = 1; m < models.size(); ++m) {
    if (detail::model_config_to_json(models[m].config) != base_config) {
      throw ConfigError("checkpoint '" + args.ckpts[m] +
                        "' has a different model configuration");
    }
    if (models[m].arrays.size() != models[0].arrays.size()) {
      throw ShapeError("checkpoint '" + args.ckpts[m] +
                       "' carries a different array set");
    }
    for (std::size_t i = 0; i < models[0].arrays.size(); ++i) {
      if (models[m].arrays[i].first != models[0].arrays[i].first ||
          models[m].arrays[i].second.shape != models[0].arrays[i].second.shape) {
        throw ShapeError("checkpoint '" + args.ckpts[m] +
                         "' disagrees on array '" +
                         models[0].arrays[i].first + "'");
      }
    }
  }
  ckpt::Checkpoint averaged;
  averaged.config = models[0].config;
  const double inv = 1.0 / static_cast<double>(models.size());
  for (std::size_t i = 0; i < models[0].arrays.size(); ++i) {
    std::vector<double> values(models[0].arrays[i].second.data->size(), 0.0);
    for (const auto& model : models) {
      const auto& src = *model.arrays[i].second.data;
      for (std::size_t t = 0; t < values.size(); ++t) values[t] += src[t];
    }
    for (double& v : values) v *= inv;
    averaged.arrays.emplace_back(
        models[0].arrays[i].first,
        Tensor::from(models[0].arrays[i].second.shape, std::move(values)));
  }
  averaged.extra["phase"] = "swa";
  averaged.extra["n_models"] = std::to_string(models.size());
  ckpt::save_checkpoint(args.out, averaged);
  std::cout << "swa: averaged " << models.size() << " checkpoints into "
            << args.out << "\n";
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Multi-CLS sentence encoder: pretraining, fine-tuning, and "
               "calibration/diversity analysis"};
  app.require_subcommand(1);

  PretrainArgs pretrain_args;
  CLI::App* pre = app.add_subcommand(
      "pretrain", "Pretrain an encoder on a corpus of documents");
  pre->add_option("--config", pretrain_args.config, "Run config JSON")
      ->required();
  pre->add_option("--corpus", pretrain_args.corpus,
                  "Corpus directory of .txt files (or a single file)");
  pre->add_option("--out", pretrain_args.out, "Output checkpoint path");
  pre->callback([&pretrain_args] { cmd_pretrain(pretrain_args); });

  FinetuneArgs finetune_args;
  CLI::App* fin = app.add_subcommand(
      "finetune", "Fine-tune a pretrained checkpoint on a task");
  fin->add_option("--config", finetune_args.config, "Run config JSON")
      ->required();
  fin->add_option("--ckpt", finetune_args.ckpt, "Pretrained checkpoint");
  fin->add_option("--task", finetune_args.task, "Task JSON file");
  fin->add_option("--out", finetune_args.out, "Output model path");
  fin->add_option("--aggregation", finetune_args.aggregation,
                  "Facet aggregation: reparam, sum, or k1")
      ->check(CLI::IsMember({"reparam", "sum", "k1"}));
  fin->callback([&finetune_args] { cmd_finetune(finetune_args); });

  CLI::App* analyze =
      app.add_subcommand("analyze", "Calibration and diversity analysis");
  analyze->require_subcommand(1);

  std::string ece_records;
  CLI::App* ece_cmd = analyze->add_subcommand(
      "ece", "Expected calibration error with ten equal-size bins");
  ece_cmd->add_option("--records", ece_records, "Prediction record file")
      ->required();
  ece_cmd->callback([&ece_records] { cmd_analyze_ece(ece_records); });

  OverlapArgs overlap_args;
  CLI::App* overlap_cmd = analyze->add_subcommand(
      "overlap", "Top-20% overlap of uncertainty rankings");
  overlap_cmd
      ->add_option("--records", overlap_args.files,
                   "Record files (pairs; or one file with two methods)")
      ->required();
  overlap_cmd->add_option("--method", overlap_args.method,
                          "Ranking method for file pairs");
  overlap_cmd->add_option("--method-a", overlap_args.method_a,
                          "First method (single-file mode)");
  overlap_cmd->add_option("--method-b", overlap_args.method_b,
                          "Second method (single-file mode)");
  overlap_cmd->callback([&overlap_args] { cmd_analyze_overlap(overlap_args); });

  DiversityArgs diversity_args;
  CLI::App* diversity_cmd = analyze->add_subcommand(
      "diversity", "Pairwise-similarity correlation between facets");
  diversity_cmd
      ->add_option("--records", diversity_args.files,
                   "One or two record files with facet embeddings")
      ->required();
  diversity_cmd->callback(
      [&diversity_args] { cmd_analyze_diversity(diversity_args); });

  NeighborsArgs neighbors_args;
  CLI::App* neighbors_cmd = analyze->add_subcommand(
      "neighbors", "Nearest neighbors by facet cosine similarity");
  neighbors_cmd
      ->add_option("--records", neighbors_args.records_path, "Record file")
      ->required();
  neighbors_cmd->add_option("--id", neighbors_args.id, "Query record id")
      ->required();
  neighbors_cmd->add_option("--facet", neighbors_args.facet,
                            "Facet index (default 0)");
  neighbors_cmd->add_option("--top", neighbors_args.top,
                            "Number of neighbors (default 5)");
  neighbors_cmd->callback(
      [&neighbors_args] { cmd_analyze_neighbors(neighbors_args); });

  EnsembleArgs ensemble_args;
  CLI::App* ensemble_cmd = analyze->add_subcommand(
      "ensemble", "Average prediction probabilities across runs");
  ensemble_cmd
      ->add_option("--records", ensemble_args.files, "Record files to average")
      ->required();
  ensemble_cmd->add_option("--out", ensemble_args.out, "Output record file")
      ->required();
  ensemble_cmd->callback(
      [&ensemble_args] { cmd_analyze_ensemble(ensemble_args); });

  SwaArgs swa_args;
  CLI::App* swa_cmd = analyze->add_subcommand(
      "swa", "Average checkpoint weights (stochastic weight averaging)");
  swa_cmd->add_option("--ckpt", swa_args.ckpts, "Checkpoints to average")
      ->required();
  swa_cmd->add_option("--out", swa_args.out, "Output checkpoint")->required();
  swa_cmd->callback([&swa_args] { cmd_analyze_swa(swa_args); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const NumericError& e) {
    log::error(e.what());
    return 3;
  } catch (const std::exception& e) {
    log::error(e.what());
    return 2;
  }
  return 0;
}

}  // namespace mcls::cli
