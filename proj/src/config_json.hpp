#pragma once

// Internal JSON (de)serialization of ModelConfig, shared by the checkpoint
// header and the run configuration.  Parsing is strict: every present key
// must be known and well-typed, absent keys keep their defaults.

#include <json.hpp>

#include "mcls/encoder.hpp"

namespace mcls::detail {

nlohmann::json model_config_to_json(const encoder::ModelConfig& config);
encoder::ModelConfig model_config_from_json(const nlohmann::json& j,
                                            const std::string& context);

// Throws InputError naming the first key of `j` not present in `known`.
void reject_unknown_keys(const nlohmann::json& j,
                         const std::vector<std::string>& known,
                         const std::string& context);

// Typed field readers; each throws InputError (naming context.key) on a type
// mismatch and leaves `out` untouched when the key is absent.
void read_int(const nlohmann::json& j, const std::string& key, int& out,
              const std::string& context);
void read_u64(const nlohmann::json& j, const std::string& key,
              std::uint64_t& out, const std::string& context);
void read_double(const nlohmann::json& j, const std::string& key, double& out,
                 const std::string& context);
void read_bool(const nlohmann::json& j, const std::string& key, bool& out,
               const std::string& context);
void read_string(const nlohmann::json& j, const std::string& key,
                 std::string& out, const std::string& context);
void read_int_vector(const nlohmann::json& j, const std::string& key,
                     std::vector<int>& out, const std::string& context);

}  // namespace mcls::detail
