#pragma once

// Small pre-norm transformer encoder with K+1 CLS tokens: [CLS0] plus K
// facet tokens [C1..CK].  Per-facet linear layers are inserted at configured
// depths (plain replacement of the facet position's hidden state), and each
// facet has its own bias-free output head.  The sentence-order head consumes
// the concatenation of all facet hidden states.

#include <string>
#include <utility>
#include <vector>

#include "mcls/rng.hpp"
#include "mcls/tensor.hpp"
#include "mcls/textpipe.hpp"

namespace mcls::encoder {

struct LossWeights {
  double mcqt = 1.0;
  double mlm = 1.0;
  double so = 1.0;
  double tfidf = 1.0;
};

struct ModelConfig {
  int k = 5;
  double lambda = 0.1;
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 256;
  std::vector<int> insert_layers = {1, 3};  // 1-based; transform after layer l
  bool insert_enabled = true;
  int vocab_size = 0;
  int max_len = 64;
  double dropout_p = 0.1;
  LossWeights loss_weights;

  void validate() const;  // throws ConfigError on any violated invariant
};

// All trainable arrays, addressable by stable names for checkpointing,
// optimizer state, and weight averaging.
struct EncoderParams {
  Tensor tok_emb;  // [V, D]
  Tensor pos_emb;  // [max_len, D]

  struct Layer {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor w1, b1, w2, b2;
  };
  std::vector<Layer> layers;

  Tensor ln_f_g, ln_f_b;

  // inserted[i][k-1]: transform applied at insert_layers[i] to facet k.
  struct InsertTransform {
    Tensor w, b;
  };
  std::vector<std::vector<InsertTransform>> inserted;

  std::vector<Tensor> wo_k;  // K facet output heads, [D, D], bias-free

  Tensor so_w, so_b;          // [K*D, D], [D]
  Tensor so_cls_w, so_cls_b;  // [D, 2], [2]: swapped-order classifier
  Tensor tfidf_w, tfidf_b;    // [D, 1], [1]

  static EncoderParams init(const ModelConfig& config, const Rng& rng);

  // Stable (name, tensor) enumeration; order is fixed across runs.
  std::vector<std::pair<std::string, Tensor*>> named_params();
  std::vector<std::pair<std::string, const Tensor*>> named_params() const;

  void set_requires_grad(bool on);
  void zero_grad();
  EncoderParams clone() const;  // deep copy of data (no grads)
};

// Minimal batch view the encoder consumes; finetune builds these directly,
// pretraining converts its contrastive batches.
struct TokenBatch {
  int rows = 0;
  int cols = 0;
  int n_cls = 0;  // K
  std::vector<int> token_ids;
  std::vector<double> attention_mask;  // 1.0 at non-[PAD] positions
};

TokenBatch to_token_batch(const textpipe::ContrastiveBatch& batch);

struct EncoderOutput {
  Tensor cls_hidden;      // [B, K, D]: final hidden state at each [Ck]
  Tensor cls_embeddings;  // [B, K, D]: W_{O,k} applied per facet
  Tensor token_hidden;    // [B, L, D]
  Tensor so_embedding;    // [B, D]
};

struct ForwardOptions {
  Graph* graph = nullptr;  // non-null: record for backward
  Rng* dropout = nullptr;  // non-null: training mode with dropout
  bool apply_insert = true;
};

EncoderOutput forward(const EncoderParams& params, const ModelConfig& config,
                      const TokenBatch& batch,
                      const ForwardOptions& options = {});

// Ablation: skip the inserted per-facet transforms; heads still apply.
EncoderOutput forward_no_insert(const EncoderParams& params,
                                const ModelConfig& config,
                                const TokenBatch& batch,
                                ForwardOptions options = {});

}  // namespace mcls::encoder
