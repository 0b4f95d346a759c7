#pragma once

// JSON run configuration: model, pretraining, fine-tuning, seed, and path
// sections.  Parsing is strict (unknown keys rejected, every value
// schema-checked); omitted keys keep their defaults.  The canonical dump is
// hashed so run logs can record exactly which configuration produced them.

#include <cstdint>
#include <string>

#include "mcls/encoder.hpp"
#include "mcls/finetune.hpp"
#include "mcls/pretrain.hpp"

namespace mcls::cli {

struct Seeds {
  std::uint64_t pretrain = 1;
  std::uint64_t finetune = 2;
};

// Default input/output locations; command-line flags override them.
struct Paths {
  std::string corpus;
  std::string checkpoint;
  std::string task;
  std::string out;
};

struct RunConfig {
  encoder::ModelConfig model;  // vocab_size is the vocabulary cap at pretrain
  pretrain::PretrainConfig pretrain;
  finetune::FinetuneConfig finetune;
  Seeds seeds;
  Paths paths;

  static RunConfig parse(const std::string& text);  // InputError on violation
  static RunConfig load(const std::string& path);
  void save(const std::string& path) const;

  // Canonical JSON with every field resolved, keys sorted.
  std::string to_json_text() const;
  // FNV-1a 64-bit hash of the canonical JSON, as 16 hex digits.
  std::string content_hash() const;
};

}  // namespace mcls::cli
