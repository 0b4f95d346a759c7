#pragma once

// Calibration, ensemble-agreement, and diversity analytics over prediction
// records and facet embeddings.

#include <string>
#include <vector>

#include "mcls/records.hpp"
#include "mcls/tensor.hpp"

namespace mcls::analysis {

using records::PredictionRecord;

// ---------------------------------------------------------------------------
// Calibration

struct ReliabilityBin {
  int count = 0;
  double accuracy = 0.0;
  double confidence = 0.0;  // mean of the highest class probability
};

struct EceResult {
  double ece = 0.0;
  std::vector<ReliabilityBin> bins;  // 10 bins, ascending confidence
};

// Expected calibration error over 10 equal-size bins formed by confidence
// rank; when N is not divisible by 10 the remainder goes to the
// lowest-confidence bins, largest first.  ECE = sum_j (|B_j|/N)|acc_j-conf_j|.
// Classification records only; InputError when records is empty.
EceResult ece(const std::vector<PredictionRecord>& records);

// ---------------------------------------------------------------------------
// Uncertainty rankings

enum class UncertaintyMethod { multi_cls_var, ensemble_var, least_confidence };

std::string uncertainty_method_name(UncertaintyMethod m);
UncertaintyMethod parse_uncertainty_method(const std::string& name);

// Ids ordered by descending uncertainty (ties by ascending id).
//   multi_cls_var:    the stored per-facet variance of one record file
//   least_confidence: 1 - max class probability of one record file
//   ensemble_var:     mean-over-classes variance of the class probabilities
//                     across k >= 2 record files (ids must align)
std::vector<int> uncertainty_rank(
    const std::vector<std::vector<PredictionRecord>>& files,
    UncertaintyMethod method);

// Single-file convenience for multi_cls_var / least_confidence.
std::vector<int> uncertainty_rank(const std::vector<PredictionRecord>& records,
                                  UncertaintyMethod method);

// ---------------------------------------------------------------------------
// Ranking agreement

struct OverlapReport {
  std::string method_a;
  std::string method_b;
  int overlap_count = 0;  // |top_m(a) intersect top_m(b)|
  double ratio = 0.0;     // overlap_count / m
  double p_value = 1.0;   // Chernoff bound, filled when trials are aggregated
};

// Overlap of the top m = floor(0.2 N) entries of two rankings over the same
// id set.  InputError when the id sets differ or m would be zero.
OverlapReport top20_overlap(const std::vector<int>& rank_a,
                            const std::vector<int>& rank_b);

// Chernoff upper bound on seeing the observed total top-20% overlap across
// exactly 4 independent trials of N examples each under chance agreement:
// mu = (0.2)^2 * 4N, delta = sum(S)/mu - 1, bound = (e^d/(1+d)^(1+d))^mu,
// clipped to [0, 1]; delta < 0 returns 1 (the bound is vacuous).
double chernoff_p(const std::vector<long long>& overlap_sums, long long n);

// ---------------------------------------------------------------------------
// Facet diversity

// Pearson correlation between the n^2 pairwise unnormalized dot products
// <cls_p1[i, k1], cls_p2[j, k1]> and the same sequence for k2.  Inputs are
// facet embeddings [n, K, D] from two part-pair streams.  Requires n >= 2;
// a zero-variance dot-product sequence (the collapse signal) raises
// NumericError.
double diversity_corr(const Tensor& cls_p1, const Tensor& cls_p2, int k1,
                      int k2);

// ---------------------------------------------------------------------------
// Ensembling and retrieval

// Per-id arithmetic mean of class probabilities across record files; ids and
// golds must align.  All other fields are taken from the first file.
std::vector<PredictionRecord> ensemble_average(
    const std::vector<std::vector<PredictionRecord>>& files);

struct Neighbor {
  int id = 0;
  double similarity = 0.0;
};

// Neighbors of query_id by cosine similarity of the k_index-th facet
// embedding, descending (ties by ascending id), query excluded, at most
// top_n entries.
std::vector<Neighbor> nearest_neighbors(
    const std::vector<PredictionRecord>& records, int query_id, int k_index,
    int top_n);

}  // namespace mcls::analysis
