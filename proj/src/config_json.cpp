#include "config_json.hpp"

#include "mcls/errors.hpp"

namespace mcls::detail {

using nlohmann::json;

void reject_unknown_keys(const json& j, const std::vector<std::string>& known,
                         const std::string& context) {
  if (!j.is_object()) {
    throw InputError(context + ": expected a JSON object");
  }
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const auto& k : known) {
      if (item.key() == k) {
        ok = true;
        break;
      }
    }
    if (!ok) {
      throw InputError(context + ": unknown key '" + item.key() + "'");
    }
  }
}

void read_int(const json& j, const std::string& key, int& out,
              const std::string& context) {
  if (!j.contains(key)) return;
  if (!j[key].is_number_integer()) {
    throw InputError(context + "." + key + " must be an integer");
  }
  out = j[key].get<int>();
}

void read_u64(const json& j, const std::string& key, std::uint64_t& out,
              const std::string& context) {
  if (!j.contains(key)) return;
  const auto& v = j[key];
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() &&
                                 v.get<long long>() < 0)) {
    throw InputError(context + "." + key + " must be a non-negative integer");
  }
  out = v.get<std::uint64_t>();
}

void read_double(const json& j, const std::string& key, double& out,
                 const std::string& context) {
  if (!j.contains(key)) return;
  if (!j[key].is_number()) {
    throw InputError(context + "." + key + " must be a number");
  }
  out = j[key].get<double>();
}

void read_bool(const json& j, const std::string& key, bool& out,
               const std::string& context) {
  if (!j.contains(key)) return;
  if (!j[key].is_boolean()) {
    throw InputError(context + "." + key + " must be a boolean");
  }
  out = j[key].get<bool>();
}

void read_string(const json& j, const std::string& key, std::string& out,
                 const std::string& context) {
  if (!j.contains(key)) return;
  if (!j[key].is_string()) {
    throw InputError(context + "." + key + " must be a string");
  }
  out = j[key].get<std::string>();
}

void read_int_vector(const json& j, const std::string& key,
                     std::vector<int>& out, const std::string& context) {
  if (!j.contains(key)) return;
  if (!j[key].is_array()) {
    throw InputError(context + "." + key + " must be an array of integers");
  }
  std::vector<int> parsed;
  for (const auto& v : j[key]) {
    if (!v.is_number_integer()) {
      throw InputError(context + "." + key + " must be an array of integers");
    }
    parsed.push_back(v.get<int>());
  }
  out = std::move(parsed);
}

json model_config_to_json(const encoder::ModelConfig& c) {
  json j;
  j["k"] = c.k;
  j["lambda"] = c.lambda;
  j["d_model"] = c.d_model;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["d_ff"] = c.d_ff;
  j["insert_layers"] = c.insert_layers;
  j["insert_enabled"] = c.insert_enabled;
  j["vocab_size"] = c.vocab_size;
  j["max_len"] = c.max_len;
  j["dropout_p"] = c.dropout_p;
  j["loss_weights"] = {{"mcqt", c.loss_weights.mcqt},
                       {"mlm", c.loss_weights.mlm},
                       {"so", c.loss_weights.so},
                       {"tfidf", c.loss_weights.tfidf}};
  return j;
}

encoder::ModelConfig model_config_from_json(const json& j,
                                            const std::string& context) {
  reject_unknown_keys(j,
                      {"k", "lambda", "d_model", "n_layers", "n_heads", "d_ff",
                       "insert_layers", "insert_enabled", "vocab_size",
                       "max_len", "dropout_p", "loss_weights"},
                      context);
  encoder::ModelConfig c;
  read_int(j, "k", c.k, context);
  read_double(j, "lambda", c.lambda, context);
  read_int(j, "d_model", c.d_model, context);
  read_int(j, "n_layers", c.n_layers, context);
  read_int(j, "n_heads", c.n_heads, context);
  read_int(j, "d_ff", c.d_ff, context);
  read_int_vector(j, "insert_layers", c.insert_layers, context);
  read_bool(j, "insert_enabled", c.insert_enabled, context);
  read_int(j, "vocab_size", c.vocab_size, context);
  read_int(j, "max_len", c.max_len, context);
  read_double(j, "dropout_p", c.dropout_p, context);
  if (j.contains("loss_weights")) {
    const std::string lw = context + ".loss_weights";
    reject_unknown_keys(j["loss_weights"], {"mcqt", "mlm", "so", "tfidf"}, lw);
    read_double(j["loss_weights"], "mcqt", c.loss_weights.mcqt, lw);
    read_double(j["loss_weights"], "mlm", c.loss_weights.mlm, lw);
    read_double(j["loss_weights"], "so", c.loss_weights.so, lw);
    read_double(j["loss_weights"], "tfidf", c.loss_weights.tfidf, lw);
  }
  return c;
}

}  // namespace mcls::detail
