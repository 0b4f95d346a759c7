#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "mcls/encoder.hpp"
#include "mcls/errors.hpp"
#include "mcls/textpipe.hpp"
#include "mcls/rng.hpp"
#include "mcls/tensor.hpp"
#include "reference_encoder.hpp"
#include "testutil.hpp"

using namespace mcls::encoder;
using mcls::Graph;
using mcls::textpipe::Vocabulary;
using mcls::Rng;
using mcls::Tensor;

namespace {

ModelConfig tiny_config(int k = 2) {
  ModelConfig cfg;
  cfg.k = k;
  cfg.lambda = 0.1;
  cfg.d_model = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.insert_layers = {1};
  cfg.vocab_size = 30;
  cfg.max_len = 12;
  cfg.dropout_p = 0.1;
  return cfg;
}

// CLS block + a few text tokens + [SEP] + text + [PAD] tail.
TokenBatch tiny_batch(const ModelConfig& cfg, int rows, std::uint64_t seed) {
  TokenBatch b;
  b.rows = rows;
  b.cols = cfg.max_len;
  b.n_cls = cfg.k;
  b.token_ids.assign(static_cast<std::size_t>(rows) * b.cols, 0);
  b.attention_mask.assign(b.token_ids.size(), 0.0);
  Rng rng(seed);
  const int n_reserved = cfg.k + 5;
  for (int r = 0; r < rows; ++r) {
    const std::size_t o = static_cast<std::size_t>(r) * b.cols;
    std::vector<int> row;
    row.push_back(3);
    for (int j = 1; j <= cfg.k; ++j) row.push_back(3 + j);
    const int text = 3 + static_cast<int>(rng.below(4));
    for (int t = 0; t < text; ++t) {
      row.push_back(n_reserved +
                    static_cast<int>(rng.below(cfg.vocab_size - n_reserved)));
    }
    row.push_back(2);
    const int text2 = 1 + static_cast<int>(rng.below(3));
    for (int t = 0; t < text2; ++t) {
      row.push_back(n_reserved +
                    static_cast<int>(rng.below(cfg.vocab_size - n_reserved)));
    }
    for (std::size_t c = 0; c < row.size(); ++c) {
      b.token_ids[o + c] = row[c];
      b.attention_mask[o + c] = 1.0;
    }
  }
  return b;
}

}  // namespace

TEST_CASE("config validation rejects bad settings") {
  ModelConfig cfg = tiny_config();
  CHECK_NOTHROW(cfg.validate());
  ModelConfig bad = cfg;
  bad.d_model = 9;  // not divisible by heads
  CHECK_THROWS_AS(bad.validate(), mcls::ConfigError);
  bad = cfg;
  bad.insert_layers = {2};  // == n_layers, outside [1, n_layers-1]
  CHECK_THROWS_AS(bad.validate(), mcls::ConfigError);
  bad = cfg;
  bad.insert_layers = {0};
  CHECK_THROWS_AS(bad.validate(), mcls::ConfigError);
  bad = cfg;
  bad.lambda = 1.5;
  CHECK_THROWS_AS(bad.validate(), mcls::ConfigError);
  bad = cfg;
  bad.vocab_size = cfg.k + 4;
  CHECK_THROWS_AS(bad.validate(), mcls::ConfigError);
}

TEST_CASE("output shapes match the contract") {
  ModelConfig cfg = tiny_config();
  EncoderParams params = EncoderParams::init(cfg, Rng(1));
  TokenBatch batch = tiny_batch(cfg, 3, 5);
  EncoderOutput out = forward(params, cfg, batch);
  CHECK(out.cls_hidden.shape == std::vector<int>{3, 2, 8});
  CHECK(out.cls_embeddings.shape == std::vector<int>{3, 2, 8});
  CHECK(out.token_hidden.shape == std::vector<int>{3, 12, 8});
  CHECK(out.so_embedding.shape == std::vector<int>{3, 8});
}

TEST_CASE("identity output heads copy the facet hidden states") {
  ModelConfig cfg = tiny_config();
  EncoderParams params = EncoderParams::init(cfg, Rng(2));
  for (Tensor& w : params.wo_k) w = Tensor::identity(cfg.d_model);
  TokenBatch batch = tiny_batch(cfg, 2, 9);
  EncoderOutput out = forward(params, cfg, batch);
  for (std::size_t i = 0; i < out.cls_hidden.numel(); ++i) {
    CHECK((*out.cls_embeddings.data)[i] ==
          doctest::Approx((*out.cls_hidden.data)[i]).epsilon(1e-14));
  }
}

TEST_CASE("forward matches the straight-line reference implementation") {
  ModelConfig cfg = tiny_config();
  EncoderParams params = EncoderParams::init(cfg, Rng(3));
  TokenBatch batch = tiny_batch(cfg, 3, 11);

  for (const bool apply_insert : {true, false}) {
    EncoderOutput got = apply_insert
                            ? forward(params, cfg, batch)
                            : forward_no_insert(params, cfg, batch);
    reference::Output want = reference::run(params, cfg, batch, apply_insert);
    REQUIRE(got.cls_embeddings.numel() == want.cls_embeddings.size());
    for (std::size_t i = 0; i < want.cls_embeddings.size(); ++i) {
      CHECK((*got.cls_embeddings.data)[i] ==
            doctest::Approx(want.cls_embeddings[i]).epsilon(1e-10));
    }
    for (std::size_t i = 0; i < want.cls_hidden.size(); ++i) {
      CHECK((*got.cls_hidden.data)[i] ==
            doctest::Approx(want.cls_hidden[i]).epsilon(1e-10));
    }
    for (std::size_t i = 0; i < want.so_embedding.size(); ++i) {
      CHECK((*got.so_embedding.data)[i] ==
            doctest::Approx(want.so_embedding[i]).epsilon(1e-10));
    }
    for (std::size_t i = 0; i < want.token_hidden.size(); ++i) {
      CHECK((*got.token_hidden.data)[i] ==
            doctest::Approx(want.token_hidden[i]).epsilon(1e-10));
    }
  }

  // larger config, K=3, both insert layers active
  ModelConfig big = tiny_config(3);
  big.n_layers = 3;
  big.insert_layers = {1, 2};
  big.max_len = 14;
  EncoderParams params3 = EncoderParams::init(big, Rng(17));
  TokenBatch batch3 = tiny_batch(big, 2, 21);
  EncoderOutput got = forward(params3, big, batch3);
  reference::Output want = reference::run(params3, big, batch3, true);
  for (std::size_t i = 0; i < want.cls_embeddings.size(); ++i) {
    CHECK((*got.cls_embeddings.data)[i] ==
          doctest::Approx(want.cls_embeddings[i]).epsilon(1e-10));
  }
}

TEST_CASE("no-insert ablation: identity inserts equal skipping them") {
  ModelConfig cfg = tiny_config(1);
  EncoderParams params = EncoderParams::init(cfg, Rng(4));
  for (auto& per_layer : params.inserted) {
    for (auto& tr : per_layer) {
      tr.w = Tensor::identity(cfg.d_model);
      tr.b = Tensor::zeros({cfg.d_model});
    }
  }
  TokenBatch batch = tiny_batch(cfg, 2, 13);
  EncoderOutput with = forward(params, cfg, batch);
  EncoderOutput without = forward_no_insert(params, cfg, batch);
  for (std::size_t i = 0; i < with.cls_embeddings.numel(); ++i) {
    CHECK((*with.cls_embeddings.data)[i] ==
          doctest::Approx((*without.cls_embeddings.data)[i]).epsilon(1e-12));
  }

  // config-level ablation flag behaves like forward_no_insert
  EncoderParams params2 = EncoderParams::init(cfg, Rng(5));
  ModelConfig disabled = cfg;
  disabled.insert_enabled = false;
  EncoderOutput a = forward(params2, disabled, batch);
  EncoderOutput b2 = forward_no_insert(params2, cfg, batch);
  for (std::size_t i = 0; i < a.cls_embeddings.numel(); ++i) {
    CHECK((*a.cls_embeddings.data)[i] == (*b2.cls_embeddings.data)[i]);
  }
}

TEST_CASE("facet permutation with matching parameter permutation") {
  ModelConfig cfg = tiny_config(3);
  cfg.max_len = 14;
  EncoderParams params = EncoderParams::init(cfg, Rng(6));
  TokenBatch batch = tiny_batch(cfg, 2, 15);

  // Relabel facets 1 and 3: swap their token-embedding rows and every
  // facet-indexed parameter, keeping the batch fixed.  Because all facet
  // tokens share one position id, facet identity is carried entirely by the
  // embedding row and the per-facet parameters, so outputs must permute.
  EncoderParams swapped = params.clone();
  const int id_c1 = Vocabulary::kCls0 + 1;
  const int id_c3 = Vocabulary::kCls0 + 3;
  for (int col = 0; col < cfg.d_model; ++col) {
    std::swap((*swapped.tok_emb.data)[static_cast<std::size_t>(id_c1) * cfg.d_model + col],
              (*swapped.tok_emb.data)[static_cast<std::size_t>(id_c3) * cfg.d_model + col]);
  }
  for (auto& per_layer : swapped.inserted) std::swap(per_layer[0], per_layer[2]);
  std::swap(swapped.wo_k[0], swapped.wo_k[2]);
  // so_w consumes the concatenation in facet order: swap its row blocks
  for (int j = 0; j < cfg.d_model; ++j) {
    for (int col = 0; col < cfg.d_model; ++col) {
      std::swap((*swapped.so_w.data)[(0 * cfg.d_model + j) * cfg.d_model + col],
                (*swapped.so_w.data)[(2 * cfg.d_model + j) * cfg.d_model + col]);
    }
  }

  EncoderOutput base = forward(params, cfg, batch);
  EncoderOutput perm = forward(swapped, cfg, batch);
  const int d = cfg.d_model;
  for (int r = 0; r < batch.rows; ++r) {
    for (int facet = 0; facet < 3; ++facet) {
      const int other = facet == 0 ? 2 : (facet == 2 ? 0 : 1);
      for (int j = 0; j < d; ++j) {
        const double got =
            (*perm.cls_embeddings.data)[(static_cast<std::size_t>(r) * 3 + other) * d + j];
        const double want =
            (*base.cls_embeddings.data)[(static_cast<std::size_t>(r) * 3 + facet) * d + j];
        CHECK(got == doctest::Approx(want).epsilon(1e-10));
      }
    }
    for (int j = 0; j < d; ++j) {
      CHECK((*perm.so_embedding.data)[static_cast<std::size_t>(r) * d + j] ==
            doctest::Approx(
                (*base.so_embedding.data)[static_cast<std::size_t>(r) * d + j])
                .epsilon(1e-10));
    }
  }
}

TEST_CASE("facet heads have no bias parameters") {
  ModelConfig cfg = tiny_config();
  EncoderParams params = EncoderParams::init(cfg, Rng(7));
  for (const auto& [name, t] : params.named_params()) {
    const bool facet_head_is_matrix =
        name.find("wo_k") == std::string::npos || t->rank() == 2;
    CHECK(facet_head_is_matrix);
  }
  // exactly K facet head arrays, all D x D
  int heads = 0;
  for (const auto& [name, t] : params.named_params()) {
    if (name.rfind("wo_k", 0) == 0) {
      ++heads;
      CHECK(t->shape == std::vector<int>{8, 8});
    }
  }
  CHECK(heads == cfg.k);
}

TEST_CASE("training-mode dropout is seeded and eval mode is deterministic") {
  ModelConfig cfg = tiny_config();
  EncoderParams params = EncoderParams::init(cfg, Rng(8));
  TokenBatch batch = tiny_batch(cfg, 2, 19);

  EncoderOutput e1 = forward(params, cfg, batch);
  EncoderOutput e2 = forward(params, cfg, batch);
  CHECK((*e1.cls_embeddings.data == *e2.cls_embeddings.data));

  ForwardOptions t1, t2;
  Rng r1(99), r2(99), r3(100);
  t1.dropout = &r1;
  t2.dropout = &r2;
  EncoderOutput d1 = forward(params, cfg, batch, t1);
  EncoderOutput d2 = forward(params, cfg, batch, t2);
  CHECK((*d1.cls_embeddings.data == *d2.cls_embeddings.data));
  ForwardOptions t3;
  t3.dropout = &r3;
  EncoderOutput d3 = forward(params, cfg, batch, t3);
  CHECK((*d1.cls_embeddings.data != *d3.cls_embeddings.data));
  // dropout changes activations relative to eval mode
  CHECK((*d1.cls_embeddings.data != *e1.cls_embeddings.data));
}

TEST_CASE("malformed batches are rejected") {
  ModelConfig cfg = tiny_config();
  EncoderParams params = EncoderParams::init(cfg, Rng(9));
  TokenBatch batch = tiny_batch(cfg, 2, 23);

  TokenBatch wrong_k = batch;
  wrong_k.n_cls = 3;
  CHECK_THROWS_AS(forward(params, cfg, wrong_k), mcls::ConfigError);

  TokenBatch no_facet = batch;
  no_facet.token_ids[1] = 9;  // overwrite [C1]
  CHECK_THROWS_AS(forward(params, cfg, no_facet), mcls::InputError);

  TokenBatch too_long = batch;
  too_long.cols = cfg.max_len + 2;
  too_long.token_ids.assign(
      static_cast<std::size_t>(too_long.rows) * too_long.cols, 0);
  too_long.attention_mask.assign(too_long.token_ids.size(), 1.0);
  CHECK_THROWS_AS(forward(params, cfg, too_long), mcls::ShapeError);

  TokenBatch big_id = batch;
  big_id.token_ids[5] = cfg.vocab_size;
  CHECK_THROWS_AS(forward(params, cfg, big_id), mcls::IndexError);
}

TEST_CASE("encoder gradients agree with finite differences") {
  ModelConfig cfg = tiny_config();
  cfg.dropout_p = 0.0;
  EncoderParams params = EncoderParams::init(cfg, Rng(10));
  TokenBatch batch = tiny_batch(cfg, 2, 29);

  auto build = [&](Graph* g) {
    EncoderOutput out = forward(params, cfg, batch, {g, nullptr, true});
    Tensor c = testutil::project(out.cls_embeddings, 101, g);
    Tensor s = testutil::project(out.so_embedding, 102, g);
    Tensor t = testutil::project(out.token_hidden, 103, g);
    return mcls::add(mcls::add(c, s, g), t, g);
  };
  // spot-check a representative parameter from every group
  std::vector<mcls::Tensor*> leaves = {
      &params.tok_emb,
      &params.pos_emb,
      &params.layers[0].wq,
      &params.layers[0].ln1_g,
      &params.layers[1].w2,
      &params.inserted[0][0].w,
      &params.inserted[0][1].b,
      &params.wo_k[0],
      &params.wo_k[1],
      &params.so_w,
      &params.ln_f_g,
  };
  auto res = testutil::check_gradients(build, leaves);
  INFO("worst: " << res.worst);
  CHECK(res.max_rel_err <= 1e-5);
}
