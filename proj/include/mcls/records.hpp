#pragma once

// Per-example prediction records and their JSON-lines serialization; written
// by fine-tuned models and consumed by the analysis tools.

#include <string>
#include <vector>

namespace mcls::records {

struct PredictionRecord {
  int id = 0;
  double gold = 0.0;
  std::vector<double> probs;                   // C class probabilities
                                               // (regression: the raw value)
  std::vector<std::vector<double>> cls_probs;  // [K][C] per-facet probabilities
  double uncertainty = 0.0;                    // mean-over-classes facet variance
  std::vector<std::vector<double>> cls_emb;    // [K][D] facet transform outputs
};

// One compact JSON object per line.  Doubles round-trip exactly.
void save_records(const std::string& path,
                  const std::vector<PredictionRecord>& records);

// Malformed lines raise InputError naming the 1-based line number.
std::vector<PredictionRecord> load_records(const std::string& path);

}  // namespace mcls::records
