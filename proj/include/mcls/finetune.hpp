#pragma once

// Fine-tuning of a multi-CLS encoder on sentence-level tasks: mean-centered
// aggregation of the facet output heads, classifier training with early
// stopping, per-facet probability estimates, weight averaging, and dropout
// ensembling.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mcls/encoder.hpp"
#include "mcls/records.hpp"
#include "mcls/rng.hpp"
#include "mcls/tensor.hpp"

namespace mcls::finetune {

using encoder::EncoderParams;
using encoder::ModelConfig;
using records::PredictionRecord;

// ---------------------------------------------------------------------------
// Tasks

enum class TaskKind { classification, regression };
enum class Metric { accuracy, mcc, f1, spearman };

std::string metric_name(Metric m);
Metric parse_metric(const std::string& name);  // InputError on unknown name

struct Example {
  std::vector<int> sentence_a;  // token ids, no special tokens
  std::vector<int> sentence_b;  // empty for single-sentence tasks
  double label = 0.0;           // class index or regression target
};

struct TaskSpec {
  TaskKind kind = TaskKind::classification;
  int n_classes = 2;  // ignored for regression
  Metric metric = Metric::accuracy;
  std::vector<Example> train;
  std::vector<Example> dev;

  // Throws InputError when labels are out of range, the metric does not fit
  // the task kind, or the dev set is empty.
  void validate() const;

  static TaskSpec load(const std::string& path);  // strict JSON schema
  void save(const std::string& path) const;
};

// ---------------------------------------------------------------------------
// Aggregation of facet hidden states (the fine-tuning read-out)

enum class Aggregation { reparam, sum, k1 };

std::string aggregation_name(Aggregation a);
Aggregation parse_aggregation(const std::string& name);  // InputError

// Per-facet transform outputs [B, K, D] from final facet hidden states
// cls_hidden [B, K, D] and stacked head matrices w [K, D, D]:
//   reparam: t_k = h_k (W_k - mean_k' W_k')
//   sum/k1:  t_k = h_k W_k
Tensor facet_transforms(const Tensor& cls_hidden, const Tensor& w,
                        Aggregation aggregation, Graph* graph = nullptr);

// Mean-centered aggregation: sum_k h_k (W_k - mean_k' W_k').  Accepts
// cls_hidden of shape [B, K, D] (returns [B, D]) or [K, D] (returns [D]).
// Requires K >= 2; ConfigError otherwise.
Tensor reparam_aggregate(const Tensor& cls_hidden, const Tensor& w,
                         Graph* graph = nullptr);

// Plain aggregation sum_k h_k W_k; with K = 1 this is the single-facet
// transform.  Same shape contract as reparam_aggregate.
Tensor plain_aggregate(const Tensor& cls_hidden, const Tensor& w,
                       Graph* graph = nullptr);

// ---------------------------------------------------------------------------
// Fine-tuned model

struct FinetunedModel {
  ModelConfig config;
  EncoderParams encoder;
  Aggregation aggregation = Aggregation::reparam;
  Tensor agg_w;  // [K, D, D]: facet heads, initialized from pretraining
  Tensor cls_w;  // [D, C] (classification) or [D, 1] (regression)
  Tensor cls_b;  // [C] or [1]
  TaskKind kind = TaskKind::classification;
  int n_classes = 2;  // C; 1 for regression

  std::vector<std::pair<std::string, Tensor*>> named_params();
  std::vector<std::pair<std::string, const Tensor*>> named_params() const;
  void set_requires_grad(bool on);
  void zero_grad();
  FinetunedModel clone() const;
};

// Encodes examples[begin .. begin+count) as rows
//   [CLS0][C1..CK] a [SEP] b     (b empty for single-sentence tasks)
// padded to config.max_len; the longer sentence loses its last token first
// when a row would not fit.
encoder::TokenBatch make_task_batch(const std::vector<Example>& examples,
                                    std::size_t begin, std::size_t count,
                                    const ModelConfig& config);

struct TaskForward {
  Tensor logits;      // [B, C]
  Tensor transforms;  // [B, K, D] per-facet transform outputs
};

TaskForward task_forward(const FinetunedModel& model,
                         const encoder::TokenBatch& batch,
                         Graph* graph = nullptr, Rng* dropout = nullptr);

// ---------------------------------------------------------------------------
// Metrics (all higher-is-better)

double accuracy(const std::vector<int>& pred, const std::vector<int>& gold);
// Multiclass Matthews correlation; 0 when the denominator degenerates.
double matthews_corr(const std::vector<int>& pred, const std::vector<int>& gold,
                     int n_classes);
// Positive-class (label 1) F1 for two classes, macro-averaged otherwise.
double f1_score(const std::vector<int>& pred, const std::vector<int>& gold,
                int n_classes);
// Spearman rank correlation with average ranks on ties; 0 when either side
// has zero rank variance.
double spearman_corr(const std::vector<double>& pred,
                     const std::vector<double>& gold);

// Dev-set value of task.metric for the model's current parameters.
double evaluate_metric(const FinetunedModel& model, const TaskSpec& task);

// ---------------------------------------------------------------------------
// Training

struct FinetuneConfig {
  int steps = 300;
  int batch_size = 16;
  double lr = 1e-3;
  double warmup_ratio = 0.1;
  int eval_every = 20;  // steps between dev evaluations
  int patience = 10;    // evaluations without improvement before stopping
};

struct EvalPoint {
  int step = 0;
  double metric = 0.0;
};

struct FinetuneResult {
  FinetunedModel model;  // parameters of the best dev evaluation
  std::vector<EvalPoint> history;
  double best_metric = 0.0;
  int best_step = 0;
};

// Trains classifier, facet heads, and encoder jointly with Adam (linear
// warmup over warmup_ratio of the steps, gradient-norm clipping at 1.0).
// The classifier is freshly initialized from the seed; the facet heads start
// from the pretrained W_{O,k}.  Evaluates the dev metric every eval_every
// steps (and at step 0) and returns the best snapshot.
FinetuneResult finetune(const EncoderParams& pretrained,
                        const ModelConfig& config, const TaskSpec& task,
                        const FinetuneConfig& fcfg, Aggregation aggregation,
                        std::uint64_t seed);

// ---------------------------------------------------------------------------
// Prediction and per-facet analysis

// Deterministic forward pass.  Classification fills probs with the softmax
// distribution; regression stores the raw prediction as probs = {value}.
// cls_emb holds the per-facet transform outputs.  cls_probs / uncertainty
// stay empty until attach_per_cls.
std::vector<PredictionRecord> predict(const FinetunedModel& model,
                                      const std::vector<Example>& examples);

// Single stochastic pass with dropout driven by dropout_rng.
std::vector<PredictionRecord> predict_stochastic(
    const FinetunedModel& model, const std::vector<Example>& examples,
    const Rng& dropout_rng);

// Mean of n_seeds stochastic passes; pass i (1-based) uses base.substream(i).
std::vector<PredictionRecord> dropout_ensemble_predict(
    const FinetunedModel& model, const std::vector<Example>& examples,
    int n_seeds, const Rng& base);

struct PerClsProbs {
  std::vector<std::vector<double>> probs;  // [K][C]
  double uncertainty = 0.0;                // mean over classes of the
                                           // population variance across facets
};

// Class prototypes q_{l,k} = mean facet-k transform over class-l training
// examples; P(y=l | x, k) = softmax_l(q_{l,k} . t_k(x)).  Classification
// only; a class with no training examples raises EstimationError naming it.
std::vector<PerClsProbs> per_cls_probabilities(
    const FinetunedModel& model, const std::vector<Example>& train,
    const std::vector<Example>& eval);

// Copies per-facet probabilities and uncertainties into matching records.
void attach_per_cls(std::vector<PredictionRecord>& records,
                    const std::vector<PerClsProbs>& per_cls);

// ---------------------------------------------------------------------------
// Weight averaging

// Arithmetic mean of every parameter array; all models must enumerate the
// same names with the same shapes (ShapeError otherwise; ConfigError when
// the list is empty).
EncoderParams swa_average(const std::vector<EncoderParams>& models);

}  // namespace mcls::finetune
