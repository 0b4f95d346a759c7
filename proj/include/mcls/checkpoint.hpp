#pragma once

// Binary checkpoint container: "MCLS" magic, a little-endian format version,
// a UTF-8 JSON header carrying the model configuration plus a named-array
// manifest (name, dtype, shape, byte offset), and a payload of concatenated
// little-endian float64 arrays.  Saving is atomic (write-temp-then-rename)
// and byte-deterministic; loading verifies that manifest offsets are
// non-overlapping and in-bounds, and round-trips bit-identically.

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mcls/encoder.hpp"
#include "mcls/finetune.hpp"
#include "mcls/tensor.hpp"

namespace mcls::ckpt {

inline constexpr std::uint32_t kFormatVersion = 1;

struct Checkpoint {
  encoder::ModelConfig config;
  // Arrays in a stable order; tensors hold deep copies of the values.
  std::vector<std::pair<std::string, Tensor>> arrays;
  // Free-form string metadata (training phase, aggregation, seeds, ...).
  std::map<std::string, std::string> extra;

  const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Model <-> checkpoint binding.  The to_* functions require the checkpoint
// to carry exactly the arrays implied by its configuration, with matching
// shapes, and copy the values bit-exactly.
Checkpoint from_encoder(const encoder::ModelConfig& config,
                        const encoder::EncoderParams& params);
encoder::EncoderParams to_encoder(const Checkpoint& ckpt);

Checkpoint from_finetuned(const finetune::FinetunedModel& model);
finetune::FinetunedModel to_finetuned(const Checkpoint& ckpt);

}  // namespace mcls::ckpt
