#include "mcls/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "mcls/errors.hpp"

namespace mcls::analysis {

namespace {

int argmax_index(const std::vector<double>& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

double max_prob(const PredictionRecord& r) {
  if (r.probs.size() < 2) {
    throw InputError("analysis: record " + std::to_string(r.id) +
                     " is not a classification record (needs >= 2 class "
                     "probabilities)");
  }
  return *std::max_element(r.probs.begin(), r.probs.end());
}

bool is_correct(const PredictionRecord& r) {
  return argmax_index(r.probs) ==
         static_cast<int>(std::llround(r.gold));
}

void check_alignment(const std::vector<std::vector<PredictionRecord>>& files,
                     const char* op) {
  for (std::size_t f = 1; f < files.size(); ++f) {
    if (files[f].size() != files[0].size()) {
      throw InputError(std::string(op) + ": file 0 has " +
                       std::to_string(files[0].size()) + " records, file " +
                       std::to_string(f) + " has " +
                       std::to_string(files[f].size()));
    }
    for (std::size_t i = 0; i < files[f].size(); ++i) {
      if (files[f][i].id != files[0][i].id) {
        throw InputError(std::string(op) + ": record " + std::to_string(i) +
                         " has id " + std::to_string(files[f][i].id) +
                         " in file " + std::to_string(f) + " but id " +
                         std::to_string(files[0][i].id) + " in file 0");
      }
      if (files[f][i].gold != files[0][i].gold) {
        throw InputError(std::string(op) + ": gold labels for id " +
                         std::to_string(files[f][i].id) +
                         " differ between files");
      }
      if (files[f][i].probs.size() != files[0][i].probs.size()) {
        throw InputError(std::string(op) + ": class counts for id " +
                         std::to_string(files[f][i].id) +
                         " differ between files");
      }
    }
  }
}

std::vector<int> rank_by(const std::vector<int>& ids,
                         const std::vector<double>& uncertainty) {
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (uncertainty[a] != uncertainty[b]) {
      return uncertainty[a] > uncertainty[b];
    }
    return ids[a] < ids[b];
  });
  std::vector<int> out;
  out.reserve(ids.size());
  for (std::size_t i : order) out.push_back(ids[i]);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Calibration

EceResult ece(const std::vector<PredictionRecord>& records) {
  const std::size_t n = records.size();
  if (n == 0) {
    throw InputError("ece: no records given");
  }
  std::vector<double> conf(n);
  std::vector<double> correct(n);
  for (std::size_t i = 0; i < n; ++i) {
    conf[i] = max_prob(records[i]);
    correct[i] = is_correct(records[i]) ? 1.0 : 0.0;
  }
  // Ascending confidence rank; ties keep input order so the result depends
  // only on the records, never on their ids.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) {
                     return conf[a] < conf[b];
                   });

  constexpr std::size_t kBins = 10;
  const std::size_t base = n / kBins;
  const std::size_t rem = n % kBins;

  EceResult result;
  result.bins.resize(kBins);
  std::size_t pos = 0;
  for (std::size_t j = 0; j < kBins; ++j) {
    const std::size_t size = base + (j < rem ? 1 : 0);
    ReliabilityBin& bin = result.bins[j];
    bin.count = static_cast<int>(size);
    double acc = 0.0, c = 0.0;
    for (std::size_t t = 0; t < size; ++t) {
      const std::size_t idx = order[pos + t];
      acc += correct[idx];
      c += conf[idx];
    }
    pos += size;
    if (size > 0) {
      bin.accuracy = acc / static_cast<double>(size);
      bin.confidence = c / static_cast<double>(size);
      result.ece += (static_cast<double>(size) / static_cast<double>(n)) *
                    std::abs(bin.accuracy - bin.confidence);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Uncertainty rankings

std::string uncertainty_method_name(UncertaintyMethod m) {
  switch (m) {
    case UncertaintyMethod::multi_cls_var:
      return "multi_cls_var";
    case UncertaintyMethod::ensemble_var:
      return "ensemble_var";
    case UncertaintyMethod::least_confidence:
      return "least_confidence";
  }
  return "?";
}

UncertaintyMethod parse_uncertainty_method(const std::string& name) {
  if (name == "multi_cls_var") return UncertaintyMethod::multi_cls_var;
  if (name == "ensemble_var") return UncertaintyMethod::ensemble_var;
  if (name == "least_confidence") return UncertaintyMethod::least_confidence;
  throw InputError("unknown uncertainty method '" + name + "'");
}

std::vector<int> uncertainty_rank(
    const std::vector<std::vector<PredictionRecord>>& files,
    UncertaintyMethod method) {
  if (files.empty() || files[0].empty()) {
    throw InputError("uncertainty_rank: no records given");
  }
  if (method == UncertaintyMethod::ensemble_var) {
    if (files.size() < 2) {
      throw InputError("uncertainty_rank: ensemble variance needs at least "
                       "2 record files, got " +
                       std::to_string(files.size()));
    }
    check_alignment(files, "uncertainty_rank");
    const std::size_t n = files[0].size();
    const double k = static_cast<double>(files.size());
    std::vector<int> ids(n);
    std::vector<double> unc(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      ids[i] = files[0][i].id;
      const std::size_t c = files[0][i].probs.size();
      if (c < 2) {
        throw InputError("uncertainty_rank: record " + std::to_string(ids[i]) +
                         " is not a classification record");
      }
      double total = 0.0;
      for (std::size_t l = 0; l < c; ++l) {
        double mean = 0.0;
        for (const auto& file : files) mean += file[i].probs[l];
        mean /= k;
        double var = 0.0;
        for (const auto& file : files) {
          const double d = file[i].probs[l] - mean;
          var += d * d;
        }
        total += var / k;
      }
      unc[i] = total / static_cast<double>(c);
    }
    return rank_by(ids, unc);
  }

  if (files.size() != 1) {
    throw InputError("uncertainty_rank: " + uncertainty_method_name(method) +
                     " reads exactly one record file, got " +
                     std::to_string(files.size()));
  }
  const std::vector<PredictionRecord>& records = files[0];
  std::vector<int> ids(records.size());
  std::vector<double> unc(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    ids[i] = records[i].id;
    if (method == UncertaintyMethod::multi_cls_var) {
      unc[i] = records[i].uncertainty;
    } else {
      unc[i] = 1.0 - max_prob(records[i]);
    }
  }
  return rank_by(ids, unc);
}

std::vector<int> uncertainty_rank(const std::vector<PredictionRecord>& records,
                                  UncertaintyMethod method) {
  return uncertainty_rank(
      std::vector<std::vector<PredictionRecord>>{records}, method);
}

// ---------------------------------------------------------------------------
// Ranking agreement

OverlapReport top20_overlap(const std::vector<int>& rank_a,
                            const std::vector<int>& rank_b) {
  if (rank_a.size() != rank_b.size()) {
    throw InputError("top20_overlap: rankings have different lengths (" +
                     std::to_string(rank_a.size()) + " vs " +
                     std::to_string(rank_b.size()) + ")");
  }
  const std::set<int> sa(rank_a.begin(), rank_a.end());
  const std::set<int> sb(rank_b.begin(), rank_b.end());
  if (sa.size() != rank_a.size() || sa != sb) {
    throw InputError("top20_overlap: rankings must permute the same id set");
  }
  const std::size_t m = rank_a.size() / 5;
  if (m == 0) {
    throw InputError("top20_overlap: need at least 5 examples for a top-20% "
                     "slice, got " +
                     std::to_string(rank_a.size()));
  }
  const std::set<int> top_a(rank_a.begin(),
                            rank_a.begin() + static_cast<std::ptrdiff_t>(m));
  OverlapReport report;
  for (std::size_t i = 0; i < m; ++i) {
    if (top_a.count(rank_b[i]) > 0) {
      ++report.overlap_count;
    }
  }
  report.ratio =
      static_cast<double>(report.overlap_count) / static_cast<double>(m);
  return report;
}

double chernoff_p(const std::vector<long long>& overlap_sums, long long n) {
  if (overlap_sums.size() != 4) {
    throw InputError("chernoff_p: the bound aggregates exactly 4 trials, got " +
                     std::to_string(overlap_sums.size()));
  }
  if (n <= 0) {
    throw InputError("chernoff_p: trial size must be positive");
  }
  long long total = 0;
  for (long long s : overlap_sums) {
    if (s < 0) {
      throw InputError("chernoff_p: overlap counts cannot be negative");
    }
    total += s;
  }
  // Under chance agreement each trial contributes 0.2 * (0.2 N) expected
  // overlaps, so four trials give mu = 0.04 * 4N.
  const double mu = 0.04 * 4.0 * static_cast<double>(n);
  const double delta = static_cast<double>(total) / mu - 1.0;
  if (delta < 0.0) {
    return 1.0;
  }
  const double log_bound =
      mu * (delta - (1.0 + delta) * std::log1p(delta));
  return std::min(1.0, std::exp(log_bound));
}

// ---------------------------------------------------------------------------
// Facet diversity

namespace {

std::vector<double> pairwise_dots(const Tensor& a, const Tensor& b, int k) {
  const int n = a.extent(0);
  const int d = a.extent(2);
  const int stride_k = d;
  const int stride_n = a.extent(1) * d;
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(n) * static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double* va = a.data->data() + i * stride_n + k * stride_k;
    for (int j = 0; j < n; ++j) {
      const double* vb = b.data->data() + j * stride_n + k * stride_k;
      double dot = 0.0;
      for (int t = 0; t < d; ++t) dot += va[t] * vb[t];
      out.push_back(dot);
    }
  }
  return out;
}

}  // namespace

double diversity_corr(const Tensor& cls_p1, const Tensor& cls_p2, int k1,
                      int k2) {
  if (cls_p1.rank() != 3 || cls_p2.rank() != 3 ||
      cls_p1.shape != cls_p2.shape) {
    throw ShapeError("diversity_corr: embedding streams must share a "
                     "[n, K, D] shape, got " +
                     cls_p1.shape_str() + " and " + cls_p2.shape_str());
  }
  const int n = cls_p1.extent(0);
  const int k = cls_p1.extent(1);
  if (n < 2) {
    throw InputError("diversity_corr: need at least 2 examples per stream");
  }
  if (k1 < 0 || k1 >= k || k2 < 0 || k2 >= k) {
    throw IndexError("diversity_corr: facet indices " + std::to_string(k1) +
                     ", " + std::to_string(k2) + " outside [0, " +
                     std::to_string(k) + ")");
  }
  const std::vector<double> s1 = pairwise_dots(cls_p1, cls_p2, k1);
  const std::vector<double> s2 = pairwise_dots(cls_p1, cls_p2, k2);
  const double len = static_cast<double>(s1.size());
  double m1 = 0.0, m2 = 0.0;
  for (std::size_t i = 0; i < s1.size(); ++i) {
    m1 += s1[i];
    m2 += s2[i];
  }
  m1 /= len;
  m2 /= len;
  double cov = 0.0, v1 = 0.0, v2 = 0.0;
  for (std::size_t i = 0; i < s1.size(); ++i) {
    const double d1 = s1[i] - m1;
    const double d2 = s2[i] - m2;
    cov += d1 * d2;
    v1 += d1 * d1;
    v2 += d2 * d2;
  }
  if (v1 == 0.0 || v2 == 0.0) {
    throw NumericError("diversity_corr: a dot-product sequence has zero "
                       "variance (collapsed facet embeddings)");
  }
  return cov / std::sqrt(v1 * v2);
}

// ---------------------------------------------------------------------------
// Ensembling and retrieval

std::vector<PredictionRecord> ensemble_average(
    const std::vector<std::vector<PredictionRecord>>& files) {
  if (files.empty() || files[0].empty()) {
    throw InputError("ensemble_average: no records given");
  }
  check_alignment(files, "ensemble_average");
  std::vector<PredictionRecord> out = files[0];
  if (files.size() == 1) {
    return out;
  }
  const double inv = 1.0 / static_cast<double>(files.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (std::size_t l = 0; l < out[i].probs.size(); ++l) {
      double sum = 0.0;
      for (const auto& file : files) sum += file[i].probs[l];
      out[i].probs[l] = sum * inv;
    }
  }
  return out;
}

std::vector<Neighbor> nearest_neighbors(
    const std::vector<PredictionRecord>& records, int query_id, int k_index,
    int top_n) {
  if (records.empty()) {
    throw InputError("nearest_neighbors: no records given");
  }
  if (top_n < 1) {
    throw InputError("nearest_neighbors: top_n must be >= 1");
  }
  const PredictionRecord* query = nullptr;
  for (const auto& r : records) {
    if (r.id == query_id) {
      query = &r;
      break;
    }
  }
  if (query == nullptr) {
    throw InputError("nearest_neighbors: no record with id " +
                     std::to_string(query_id));
  }
  auto facet = [&](const PredictionRecord& r) -> const std::vector<double>& {
    if (k_index < 0 ||
        static_cast<std::size_t>(k_index) >= r.cls_emb.size()) {
      throw IndexError("nearest_neighbors: record " + std::to_string(r.id) +
                       " has no facet embedding " + std::to_string(k_index));
    }
    return r.cls_emb[static_cast<std::size_t>(k_index)];
  };
  auto norm = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  };
  const std::vector<double>& q = facet(*query);
  const double qn = norm(q);
  if (qn < 1e-12) {
    throw NumericError("nearest_neighbors: query embedding has zero norm");
  }
  std::vector<Neighbor> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    if (r.id == query_id) continue;
    const std::vector<double>& e = facet(r);
    if (e.size() != q.size()) {
      throw ShapeError("nearest_neighbors: embedding sizes differ between "
                       "records " +
                       std::to_string(query_id) + " and " +
                       std::to_string(r.id));
    }
    const double en = norm(e);
    if (en < 1e-12) {
      throw NumericError("nearest_neighbors: record " + std::to_string(r.id) +
                         " has a zero-norm embedding");
    }
    double dot = 0.0;
    for (std::size_t t = 0; t < q.size(); ++t) dot += q[t] * e[t];
    out.push_back({r.id, dot / (qn * en)});
  }
  std::sort(out.begin(), out.end(), [](const Neighbor& a, const Neighbor& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    return a.id < b.id;
  });
  if (out.size() > static_cast<std::size_t>(top_n)) {
    out.resize(static_cast<std::size_t>(top_n));
  }
  return out;
}

}  // namespace mcls::analysis
