#include "mcls/records.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mcls/errors.hpp"

namespace mcls::records {

namespace {

using nlohmann::json;

json record_to_json(const PredictionRecord& r) {
  json j;
  j["id"] = r.id;
  j["gold"] = r.gold;
  j["probs"] = r.probs;
  j["cls_probs"] = r.cls_probs;
  j["uncertainty"] = r.uncertainty;
  j["cls_emb"] = r.cls_emb;
  return j;
}

std::vector<double> as_double_vector(const json& j, const char* key) {
  if (!j.is_array()) {
    throw InputError(std::string("field '") + key + "' must be an array");
  }
  std::vector<double> out;
  out.reserve(j.size());
  for (const auto& v : j) {
    if (!v.is_number()) {
      throw InputError(std::string("field '") + key +
                       "' must contain only numbers");
    }
    out.push_back(v.get<double>());
  }
  return out;
}

std::vector<std::vector<double>> as_double_matrix(const json& j,
                                                  const char* key) {
  if (!j.is_array()) {
    throw InputError(std::string("field '") + key +
                     "' must be an array of arrays");
  }
  std::vector<std::vector<double>> out;
  out.reserve(j.size());
  for (const auto& row : j) {
    out.push_back(as_double_vector(row, key));
  }
  return out;
}

PredictionRecord record_from_json(const json& j) {
  if (!j.is_object()) {
    throw InputError("record must be a JSON object");
  }
  static const char* known[] = {"id",       "gold",        "probs",
                                "cls_probs", "uncertainty", "cls_emb"};
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : known) {
      if (item.key() == k) {
        ok = true;
        break;
      }
    }
    if (!ok) {
      throw InputError("unknown field '" + item.key() + "'");
    }
  }
  for (const char* k : {"id", "gold", "probs"}) {
    if (!j.contains(k)) {
      throw InputError(std::string("missing field '") + k + "'");
    }
  }
  PredictionRecord r;
  if (!j["id"].is_number_integer()) {
    throw InputError("field 'id' must be an integer");
  }
  r.id = j["id"].get<int>();
  if (!j["gold"].is_number()) {
    throw InputError("field 'gold' must be a number");
  }
  r.gold = j["gold"].get<double>();
  r.probs = as_double_vector(j["probs"], "probs");
  if (j.contains("cls_probs")) {
    r.cls_probs = as_double_matrix(j["cls_probs"], "cls_probs");
  }
  if (j.contains("uncertainty")) {
    if (!j["uncertainty"].is_number()) {
      throw InputError("field 'uncertainty' must be a number");
    }
    r.uncertainty = j["uncertainty"].get<double>();
  }
  if (j.contains("cls_emb")) {
    r.cls_emb = as_double_matrix(j["cls_emb"], "cls_emb");
  }
  return r;
}

}  // namespace

void save_records(const std::string& path,
                  const std::vector<PredictionRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw IoError("save_records: cannot open '" + path + "' for writing");
  }
  for (const auto& r : records) {
    out << record_to_json(r).dump() << '\n';
  }
  out.flush();
  if (!out) {
    throw IoError("save_records: failed writing '" + path + "'");
  }
}

std::vector<PredictionRecord> load_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("load_records: cannot open '" + path + "'");
  }
  std::vector<PredictionRecord> out;
  std::string line;
  long long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      continue;
    }
    try {
      out.push_back(record_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw InputError("load_records: " + path + ": line " +
                       std::to_string(line_no) + ": " + e.what());
    } catch (const InputError& e) {
      throw InputError("load_records: " + path + ": line " +
                       std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace mcls::records
