#include "mcls/encoder.hpp"

#include <algorithm>
#include <cmath>

#include "mcls/errors.hpp"

namespace mcls::encoder {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kMaskBias = -1e9;

}  // namespace

void ModelConfig::validate() const {
  if (k < 1) throw ConfigError("model: K must be >= 1");
  if (lambda < 0.0 || lambda > 1.0) {
    throw ConfigError("model: lambda must lie in [0, 1]");
  }
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0) {
    throw ConfigError("model: dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("model: d_model " + std::to_string(d_model) +
                      " not divisible by n_heads " + std::to_string(n_heads));
  }
  for (std::size_t i = 0; i < insert_layers.size(); ++i) {
    const int l = insert_layers[i];
    if (l < 1 || l > n_layers - 1) {
      throw ConfigError("model: insert layer " + std::to_string(l) +
                        " outside [1, " + std::to_string(n_layers - 1) + "]");
    }
    if (i > 0 && insert_layers[i] <= insert_layers[i - 1]) {
      throw ConfigError("model: insert_layers must be strictly increasing");
    }
  }
  if (vocab_size < k + 5) {
    throw ConfigError("model: vocab_size smaller than the reserved block");
  }
  if (max_len < k + 4) {
    throw ConfigError("model: max_len too small for the CLS block");
  }
  if (dropout_p < 0.0 || dropout_p >= 1.0) {
    throw ConfigError("model: dropout_p must be in [0, 1)");
  }
  if (loss_weights.mcqt < 0 || loss_weights.mlm < 0 || loss_weights.so < 0 ||
      loss_weights.tfidf < 0) {
    throw ConfigError("model: loss weights must be non-negative");
  }
}

EncoderParams EncoderParams::init(const ModelConfig& config, const Rng& rng) {
  config.validate();
  const int d = config.d_model;
  Rng r = rng.substream("encoder_init");
  const double sigma = 0.02;
  auto noisy_identity = [&](Rng& stream) {
    Tensor t = Tensor::identity(d);
    for (double& v : *t.data) v += stream.next_normal() * sigma;
    return t;
  };

  EncoderParams p;
  p.tok_emb = Tensor::randn({config.vocab_size, d}, r, sigma);
  p.pos_emb = Tensor::randn({config.max_len, d}, r, sigma);
  p.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (Layer& layer : p.layers) {
    layer.ln1_g = Tensor::full({d}, 1.0);
    layer.ln1_b = Tensor::zeros({d});
    layer.wq = Tensor::randn({d, d}, r, sigma);
    layer.bq = Tensor::zeros({d});
    layer.wk = Tensor::randn({d, d}, r, sigma);
    layer.bk = Tensor::zeros({d});
    layer.wv = Tensor::randn({d, d}, r, sigma);
    layer.bv = Tensor::zeros({d});
    layer.wo = Tensor::randn({d, d}, r, sigma);
    layer.bo = Tensor::zeros({d});
    layer.ln2_g = Tensor::full({d}, 1.0);
    layer.ln2_b = Tensor::zeros({d});
    layer.w1 = Tensor::randn({d, config.d_ff}, r, sigma);
    layer.b1 = Tensor::zeros({config.d_ff});
    layer.w2 = Tensor::randn({config.d_ff, d}, r, sigma);
    layer.b2 = Tensor::zeros({d});
  }
  p.ln_f_g = Tensor::full({d}, 1.0);
  p.ln_f_b = Tensor::zeros({d});
  // Inserted transforms start near identity so training begins close to the
  // shared-encoder behavior.
  p.inserted.resize(config.insert_layers.size());
  for (auto& per_layer : p.inserted) {
    per_layer.resize(static_cast<std::size_t>(config.k));
    for (auto& t : per_layer) {
      t.w = noisy_identity(r);
      t.b = Tensor::zeros({d});
    }
  }
  for (int k = 0; k < config.k; ++k) p.wo_k.push_back(noisy_identity(r));
  p.so_w = Tensor::randn({config.k * d, d}, r, sigma);
  p.so_b = Tensor::zeros({d});
  p.so_cls_w = Tensor::randn({d, 2}, r, sigma);
  p.so_cls_b = Tensor::zeros({2});
  p.tfidf_w = Tensor::randn({d, 1}, r, sigma);
  p.tfidf_b = Tensor::zeros({1});
  return p;
}

namespace {

template <typename Params, typename TensorPtr>
std::vector<std::pair<std::string, TensorPtr>> enumerate_params(Params& p) {
  std::vector<std::pair<std::string, TensorPtr>> out;
  out.emplace_back("tok_emb", &p.tok_emb);
  out.emplace_back("pos_emb", &p.pos_emb);
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    auto& l = p.layers[i];
    const std::string pre = "layer" + std::to_string(i) + ".";
    out.emplace_back(pre + "ln1_g", &l.ln1_g);
    out.emplace_back(pre + "ln1_b", &l.ln1_b);
    out.emplace_back(pre + "wq", &l.wq);
    out.emplace_back(pre + "bq", &l.bq);
    out.emplace_back(pre + "wk", &l.wk);
    out.emplace_back(pre + "bk", &l.bk);
    out.emplace_back(pre + "wv", &l.wv);
    out.emplace_back(pre + "bv", &l.bv);
    out.emplace_back(pre + "wo", &l.wo);
    out.emplace_back(pre + "bo", &l.bo);
    out.emplace_back(pre + "ln2_g", &l.ln2_g);
    out.emplace_back(pre + "ln2_b", &l.ln2_b);
    out.emplace_back(pre + "w1", &l.w1);
    out.emplace_back(pre + "b1", &l.b1);
    out.emplace_back(pre + "w2", &l.w2);
    out.emplace_back(pre + "b2", &l.b2);
  }
  out.emplace_back("ln_f_g", &p.ln_f_g);
  out.emplace_back("ln_f_b", &p.ln_f_b);
  for (std::size_t i = 0; i < p.inserted.size(); ++i) {
    for (std::size_t k = 0; k < p.inserted[i].size(); ++k) {
      const std::string pre =
          "insert" + std::to_string(i) + ".k" + std::to_string(k + 1) + ".";
      out.emplace_back(pre + "w", &p.inserted[i][k].w);
      out.emplace_back(pre + "b", &p.inserted[i][k].b);
    }
  }
  for (std::size_t k = 0; k < p.wo_k.size(); ++k) {
    out.emplace_back("wo_k" + std::to_string(k + 1), &p.wo_k[k]);
  }
  out.emplace_back("so_w", &p.so_w);
  out.emplace_back("so_b", &p.so_b);
  out.emplace_back("so_cls_w", &p.so_cls_w);
  out.emplace_back("so_cls_b", &p.so_cls_b);
  out.emplace_back("tfidf_w", &p.tfidf_w);
  out.emplace_back("tfidf_b", &p.tfidf_b);
  return out;
}

}  // namespace

std::vector<std::pair<std::string, Tensor*>> EncoderParams::named_params() {
  return enumerate_params<EncoderParams, Tensor*>(*this);
}

std::vector<std::pair<std::string, const Tensor*>> EncoderParams::named_params()
    const {
  return enumerate_params<const EncoderParams, const Tensor*>(*this);
}

void EncoderParams::set_requires_grad(bool on) {
  for (auto& [name, t] : named_params()) t->set_requires_grad(on);
}

void EncoderParams::zero_grad() {
  for (auto& [name, t] : named_params()) t->zero_grad();
}

EncoderParams EncoderParams::clone() const {
  EncoderParams copy = *this;  // copies shared_ptrs
  for (auto& [name, t] : copy.named_params()) {
    t->data = std::make_shared<std::vector<double>>(*t->data);
    t->grad.reset();
    t->requires_grad = false;
  }
  return copy;
}

TokenBatch to_token_batch(const textpipe::ContrastiveBatch& batch) {
  TokenBatch tb;
  tb.rows = batch.rows;
  tb.cols = batch.cols;
  tb.n_cls = batch.n_cls;
  tb.token_ids = batch.token_ids;
  tb.attention_mask = batch.attention_mask;
  return tb;
}

namespace {

// Facet token [Ck] located by identity within the first K+1 positions, so a
// permuted CLS block keeps each facet attached to its own parameters.
std::vector<int> facet_positions(const TokenBatch& batch, int k) {
  const int cls_id = 3 + k;
  std::vector<int> pos(static_cast<std::size_t>(batch.rows), -1);
  for (int r = 0; r < batch.rows; ++r) {
    for (int c = 0; c <= batch.n_cls && c < batch.cols; ++c) {
      if (batch.token_ids[static_cast<std::size_t>(r) * batch.cols + c] ==
          cls_id) {
        if (pos[static_cast<std::size_t>(r)] != -1) {
          throw InputError("row " + std::to_string(r) + " repeats [C" +
                           std::to_string(k) + "]");
        }
        pos[static_cast<std::size_t>(r)] = c;
      }
    }
    if (pos[static_cast<std::size_t>(r)] == -1) {
      throw InputError("row " + std::to_string(r) + " lacks [C" +
                       std::to_string(k) + "] in its CLS block");
    }
  }
  return pos;
}

Tensor maybe_dropout(const Tensor& x, const ModelConfig& cfg,
                     const ForwardOptions& opts) {
  if (opts.dropout == nullptr || cfg.dropout_p == 0.0) return x;
  return dropout(x, cfg.dropout_p, *opts.dropout, opts.graph);
}

}  // namespace

EncoderOutput forward(const EncoderParams& params, const ModelConfig& config,
                      const TokenBatch& batch, const ForwardOptions& options) {
  config.validate();
  const int b = batch.rows, l = batch.cols, d = config.d_model;
  const int k = config.k, heads = config.n_heads, dh = d / heads;
  if (b <= 0 || l <= 0) throw ShapeError("forward: empty batch");
  if (l > config.max_len) {
    throw ShapeError("forward: batch length " + std::to_string(l) +
                     " exceeds max_len " + std::to_string(config.max_len));
  }
  if (batch.n_cls != k) {
    throw ConfigError("forward: batch built for K=" + std::to_string(batch.n_cls) +
                      ", model has K=" + std::to_string(k));
  }
  if (static_cast<int>(batch.token_ids.size()) != b * l ||
      static_cast<int>(batch.attention_mask.size()) != b * l) {
    throw ShapeError("forward: batch buffers do not match rows x cols");
  }
  Graph* g = options.graph;

  // Shared position ids inside the CLS block keep the encoder equivariant
  // under facet permutation: pos 0 -> 0, pos 1..K -> 1, pos t>K -> t-K+1.
  std::vector<int> pos_ids(batch.token_ids.size());
  for (int r = 0; r < b; ++r) {
    for (int c = 0; c < l; ++c) {
      const int pid = c == 0 ? 0 : (c <= k ? 1 : c - k + 1);
      pos_ids[static_cast<std::size_t>(r) * l + c] = pid;
    }
  }

  Tensor x = add(embedding(params.tok_emb, batch.token_ids, g),
                 embedding(params.pos_emb, pos_ids, g), g);
  x = maybe_dropout(x, config, options);  // x: [B*L, D]

  // Additive attention bias, -1e9 at padded keys, shared across layers.
  Tensor mask_bias = Tensor::zeros({b * heads, l, l});
  for (int r = 0; r < b; ++r) {
    for (int key = 0; key < l; ++key) {
      if (batch.attention_mask[static_cast<std::size_t>(r) * l + key] != 0.0) {
        continue;
      }
      for (int h = 0; h < heads; ++h) {
        const std::size_t plane =
            (static_cast<std::size_t>(r) * heads + h) * l;
        for (int q = 0; q < l; ++q) {
          (*mask_bias.data)[(plane + q) * l + key] = kMaskBias;
        }
      }
    }
  }

  auto split_heads = [&](const Tensor& t) {
    return reshape(permute(reshape(t, {b, l, heads, dh}), {0, 2, 1, 3}, g),
                   {b * heads, l, dh});
  };

  std::size_t insert_idx = 0;
  for (int layer_no = 0; layer_no < config.n_layers; ++layer_no) {
    const EncoderParams::Layer& lay =
        params.layers[static_cast<std::size_t>(layer_no)];

    Tensor a = layer_norm(x, lay.ln1_g, lay.ln1_b, kLnEps, g);
    Tensor q = split_heads(add_bias(matmul(a, lay.wq, g), lay.bq, g));
    Tensor key = split_heads(add_bias(matmul(a, lay.wk, g), lay.bk, g));
    Tensor v = split_heads(add_bias(matmul(a, lay.wv, g), lay.bv, g));

    Tensor scores =
        add(scale(bmm(q, key, true, g), 1.0 / std::sqrt(dh), g), mask_bias, g);
    Tensor probs = maybe_dropout(softmax_lastaxis(scores, g), config, options);
    Tensor ctx = reshape(
        permute(reshape(bmm(probs, v, false, g), {b, heads, l, dh}),
                {0, 2, 1, 3}, g),
        {b * l, d});
    Tensor attn_out =
        maybe_dropout(add_bias(matmul(ctx, lay.wo, g), lay.bo, g), config,
                      options);
    x = add(x, attn_out, g);

    Tensor f = layer_norm(x, lay.ln2_g, lay.ln2_b, kLnEps, g);
    f = gelu(add_bias(matmul(f, lay.w1, g), lay.b1, g), g);
    f = add_bias(matmul(f, lay.w2, g), lay.b2, g);
    x = add(x, maybe_dropout(f, config, options), g);

    const bool insert_here =
        insert_idx < config.insert_layers.size() &&
        config.insert_layers[insert_idx] == layer_no + 1;
    if (insert_here) {
      if (config.insert_enabled && options.apply_insert) {
        for (int facet = 1; facet <= k; ++facet) {
          const std::vector<int> pos = facet_positions(batch, facet);
          std::vector<int> flat(static_cast<std::size_t>(b));
          for (int r = 0; r < b; ++r) {
            flat[static_cast<std::size_t>(r)] =
                r * l + pos[static_cast<std::size_t>(r)];
          }
          const EncoderParams::InsertTransform& tr =
              params.inserted[insert_idx][static_cast<std::size_t>(facet - 1)];
          Tensor rows = embedding(x, flat, g);
          Tensor replaced = add_bias(matmul(rows, tr.w, g), tr.b, g);
          x = scatter_rows_replace(x, flat, replaced, g);
        }
      }
      ++insert_idx;
    }
  }

  x = layer_norm(x, params.ln_f_g, params.ln_f_b, kLnEps, g);

  EncoderOutput out;
  std::vector<Tensor> hidden_parts, embed_parts, concat_parts;
  for (int facet = 1; facet <= k; ++facet) {
    const std::vector<int> pos = facet_positions(batch, facet);
    std::vector<int> flat(static_cast<std::size_t>(b));
    for (int r = 0; r < b; ++r) {
      flat[static_cast<std::size_t>(r)] = r * l + pos[static_cast<std::size_t>(r)];
    }
    Tensor h_k = embedding(x, flat, g);  // [B, D]
    Tensor e_k =
        matmul(h_k, params.wo_k[static_cast<std::size_t>(facet - 1)], g);
    hidden_parts.push_back(reshape(h_k, {b, 1, d}));
    embed_parts.push_back(reshape(e_k, {b, 1, d}));
    concat_parts.push_back(h_k);
  }
  out.cls_hidden = k == 1 ? hidden_parts[0] : concat(hidden_parts, 1, g);
  out.cls_embeddings = k == 1 ? embed_parts[0] : concat(embed_parts, 1, g);
  Tensor joined = k == 1 ? concat_parts[0] : concat(concat_parts, 1, g);
  out.so_embedding = add_bias(matmul(joined, params.so_w, g), params.so_b, g);
  out.token_hidden = reshape(x, {b, l, d});
  return out;
}

EncoderOutput forward_no_insert(const EncoderParams& params,
                                const ModelConfig& config,
                                const TokenBatch& batch,
                                ForwardOptions options) {
  options.apply_insert = false;
  return forward(params, config, batch, options);
}

}  // namespace mcls::encoder
