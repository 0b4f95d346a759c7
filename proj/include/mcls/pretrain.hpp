#pragma once

// Pretraining objectives and loop: quick-thoughts contrastive losses over
// CLS embeddings (single- and multi-facet, with hard negatives), masked-token
// prediction tied to the token embeddings, sentence-order and token-importance
// heads, and the Adam trainer that sums them with per-objective weights.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "mcls/encoder.hpp"
#include "mcls/optim.hpp"
#include "mcls/rng.hpp"
#include "mcls/tensor.hpp"
#include "mcls/textpipe.hpp"

namespace mcls::pretrain {

using encoder::EncoderParams;
using encoder::ModelConfig;
using textpipe::ContrastiveBatch;

// Cosine similarity of two vectors; NumericError when either norm < 1e-8.
double qt_logit(const Tensor& c_a, const Tensor& c_b);

// lambda * max_{i,j} cos(a_i, b_j) + (1 - lambda) * cos(sum_i a_i, sum_j b_j)
// over two K x D facet sets; the sums are formed before normalization.
double mc_logit(const Tensor& cls_a, const Tensor& cls_b, double lambda);

// All-pairs mc_logit between row sets a [n,K,D] and b [m,K,D] -> [n,m],
// recorded on the tape.  The max term routes gradient to the argmax facet
// pair only, lowest (i,j) on ties.
Tensor mc_logit_matrix(const Tensor& a, const Tensor& b, double lambda,
                       Graph* g = nullptr);

// One-sided in-batch contrastive loss between part1 [n,D] anchors and
// part2 [n,D] candidates with positive j == i: mean cross-entropy over
// cosine logits.
Tensor qt_loss(const Tensor& part1, const Tensor& part2, Graph* g = nullptr);

// Two-term hard-negative loss over three equal parts [n,K,D]: part-1 anchors
// score against parts 2+3, part-3 anchors against parts 1+2, each with the
// anchor's own part-2 row as the positive; returns the sum of the two mean
// cross-entropies.  All pairwise scores are mc_logit values.
Tensor mcqt_loss(const Tensor& part1, const Tensor& part2, const Tensor& part3,
                 double lambda, Graph* g = nullptr);

struct MlmResult {
  Tensor loss;  // scalar; zero and off-tape when has_targets is false
  bool has_targets = false;
};

// Mean cross-entropy of hidden-state logits (hidden . embedding_table^T) at
// the masked positions against the original ids.
MlmResult mlm_loss(const Tensor& token_hidden,
                   const std::vector<textpipe::MlmTarget>& targets,
                   const Tensor& embedding_table, Graph* g = nullptr);

// Binary cross-entropy of the swapped-order classifier on h^SO.
Tensor so_loss(const Tensor& so_embedding, const std::vector<int>& so_labels,
               const Tensor& so_cls_w, const Tensor& so_cls_b,
               Graph* g = nullptr);

// Mean squared error between the sigmoid-squashed importance head and the
// batch's tf-idf targets, over non-special positions only (judged on the
// pre-masking token ids).
Tensor tfidf_loss(const Tensor& token_hidden, const ContrastiveBatch& batch,
                  const Tensor& tfidf_w, const Tensor& tfidf_b,
                  Graph* g = nullptr);

struct PretrainConfig {
  int steps = 1000;
  int batch_rows = 12;
  double lr = 2e-4;
  double warmup_ratio = 0.001;
  double mask_prob = 0.15;
  double swap_prob = 0.5;
  textpipe::BatchMode mode = textpipe::BatchMode::three_part;
};

struct LossBreakdown {
  Tensor total;         // weighted sum; on the tape iff on_tape
  bool on_tape = false;
  double mcqt = 0.0, mlm = 0.0, so = 0.0, tfidf = 0.0;
};

// Forward pass plus every objective whose weight is positive.  Throws
// ConfigError when the batch cannot serve a requested objective and
// NumericError (naming the objective) when a loss comes out non-finite.
LossBreakdown compute_losses(const EncoderParams& params,
                             const ModelConfig& config,
                             const ContrastiveBatch& batch, Graph* g,
                             Rng* dropout_rng);

struct StepStats {
  long long step = 0;
  double total = 0.0;
  double mcqt = 0.0, mlm = 0.0, so = 0.0, tfidf = 0.0;
  double grad_norm = 0.0;  // pre-clip global norm
};

struct PretrainState {
  long long step = 0;  // completed optimizer steps
  std::uint64_t seed = 0;
  optim::Adam adam;
  // Cumulative per-objective averages over the run.
  StepStats sums;
};

PretrainState init_pretrain_state(const PretrainConfig& config,
                                  std::uint64_t seed);

// One forward/backward/clip/Adam update.  All loss weights zero leaves the
// parameters bit-identical.
StepStats pretrain_step(EncoderParams& params, PretrainState& state,
                        const ContrastiveBatch& batch,
                        const ModelConfig& model_config,
                        const PretrainConfig& config);

struct PretrainRunResult {
  EncoderParams params;
  PretrainState state;
  std::vector<StepStats> history;
};

// Initializes parameters from the seed and runs config.steps updates, one
// fresh batch per step.  When `log` is non-null, emits one tab-separated
// line per step: step, total, mcqt, mlm, so, tfidf, grad_norm.
PretrainRunResult run_pretraining(const std::vector<textpipe::Document>& docs,
                                  const textpipe::Vocabulary& vocab,
                                  const ModelConfig& model_config,
                                  const PretrainConfig& config,
                                  std::uint64_t seed,
                                  std::ostream* log = nullptr);

}  // namespace mcls::pretrain
