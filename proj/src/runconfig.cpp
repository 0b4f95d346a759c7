#include "mcls/runconfig.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "config_json.hpp"
#include "mcls/errors.hpp"
#include "mcls/textpipe.hpp"

namespace mcls::cli {

namespace {

using nlohmann::json;

void check_positive(int v, const char* what) {
  if (v <= 0) {
    throw InputError(std::string(what) + " must be positive");
  }
}

void check_rate(double v, const char* what) {
  if (!std::isfinite(v) || v <= 0.0) {
    throw InputError(std::string(what) + " must be a positive finite number");
  }
}

void check_probability(double v, const char* what) {
  if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
    throw InputError(std::string(what) + " must lie in [0, 1]");
  }
}

void parse_pretrain_section(const json& j, pretrain::PretrainConfig& out) {
  detail::reject_unknown_keys(
      j, {"steps", "batch_size", "lr", "warmup_ratio", "mask_prob",
          "swap_prob", "mode"},
      "pretrain");
  detail::read_int(j, "steps", out.steps, "pretrain");
  detail::read_int(j, "batch_size", out.batch_rows, "pretrain");
  detail::read_double(j, "lr", out.lr, "pretrain");
  detail::read_double(j, "warmup_ratio", out.warmup_ratio, "pretrain");
  detail::read_double(j, "mask_prob", out.mask_prob, "pretrain");
  detail::read_double(j, "swap_prob", out.swap_prob, "pretrain");
  std::string mode;
  detail::read_string(j, "mode", mode, "pretrain");
  if (!mode.empty()) {
    try {
      out.mode = textpipe::parse_batch_mode(mode);
    } catch (const std::exception&) {
      throw InputError("pretrain.mode must be 'two_part' or 'three_part', got '" +
                       mode + "'");
    }
  }
  if (out.steps < 0) {
    throw InputError("pretrain.steps must be non-negative");
  }
  check_positive(out.batch_rows, "pretrain.batch_size");
  check_rate(out.lr, "pretrain.lr");
  check_probability(out.warmup_ratio, "pretrain.warmup_ratio");
  check_probability(out.mask_prob, "pretrain.mask_prob");
  check_probability(out.swap_prob, "pretrain.swap_prob");
}

void parse_finetune_section(const json& j, finetune::FinetuneConfig& out) {
  detail::reject_unknown_keys(j, {"steps", "batch_size", "lr", "patience"},
                              "finetune");
  detail::read_int(j, "steps", out.steps, "finetune");
  detail::read_int(j, "batch_size", out.batch_size, "finetune");
  detail::read_double(j, "lr", out.lr, "finetune");
  detail::read_int(j, "patience", out.patience, "finetune");
  if (out.steps < 0) {
    throw InputError("finetune.steps must be non-negative");
  }
  check_positive(out.batch_size, "finetune.batch_size");
  check_rate(out.lr, "finetune.lr");
  check_positive(out.patience, "finetune.patience");
}

void parse_seeds_section(const json& j, Seeds& out) {
  detail::reject_unknown_keys(j, {"pretrain", "finetune"}, "seeds");
  detail::read_u64(j, "pretrain", out.pretrain, "seeds");
  detail::read_u64(j, "finetune", out.finetune, "seeds");
}

void parse_paths_section(const json& j, Paths& out) {
  detail::reject_unknown_keys(j, {"corpus", "checkpoint", "task", "out"},
                              "paths");
  detail::read_string(j, "corpus", out.corpus, "paths");
  detail::read_string(j, "checkpoint", out.checkpoint, "paths");
  detail::read_string(j, "task", out.task, "paths");
  detail::read_string(j, "out", out.out, "paths");
}

}  // namespace

RunConfig RunConfig::parse(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw InputError(std::string("run config: invalid JSON: ") + e.what());
  }
  detail::reject_unknown_keys(
      j, {"model", "pretrain", "finetune", "seeds", "paths"}, "run config");
  RunConfig cfg;
  if (j.contains("model")) {
    cfg.model = detail::model_config_from_json(j["model"], "model");
  }
  if (j.contains("pretrain")) {
    parse_pretrain_section(j["pretrain"], cfg.pretrain);
  }
  if (j.contains("finetune")) {
    parse_finetune_section(j["finetune"], cfg.finetune);
  }
  if (j.contains("seeds")) {
    parse_seeds_section(j["seeds"], cfg.seeds);
  }
  if (j.contains("paths")) {
    parse_paths_section(j["paths"], cfg.paths);
  }
  return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("run config: cannot open '" + path + "'");
  }
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse(buf.str());
  } catch (const InputError& e) {
    throw InputError(std::string(e.what()) + " (in '" + path + "')");
  }
}

void RunConfig::save(const std::string& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw IoError("run config: cannot open '" + path + "' for writing");
  }
  out << to_json_text() << '\n';
  out.flush();
  if (!out) {
    throw IoError("run config: failed writing '" + path + "'");
  }
}

std::string RunConfig::to_json_text() const {
  json j;
  j["model"] = detail::model_config_to_json(model);
  j["pretrain"] = {{"steps", pretrain.steps},
                   {"batch_size", pretrain.batch_rows},
                   {"lr", pretrain.lr},
                   {"warmup_ratio", pretrain.warmup_ratio},
                   {"mask_prob", pretrain.mask_prob},
                   {"swap_prob", pretrain.swap_prob},
                   {"mode", textpipe::batch_mode_name(pretrain.mode)}};
  j["finetune"] = {{"steps", finetune.steps},
                   {"batch_size", finetune.batch_size},
                   {"lr", finetune.lr},
                   {"patience", finetune.patience}};
  j["seeds"] = {{"pretrain", seeds.pretrain}, {"finetune", seeds.finetune}};
  j["paths"] = {{"corpus", paths.corpus},
                {"checkpoint", paths.checkpoint},
                {"task", paths.task},
                {"out", paths.out}};
  return j.dump(2);
}

std::string RunConfig::content_hash() const {
  const std::string text = to_json_text();
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a offset basis
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;  // FNV prime
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace mcls::cli
