#pragma once

// Independent straight-line re-implementation of the encoder forward pass:
// plain scalar loops, no linear-algebra library, no tape.  Exists purely as
// an oracle for the production implementation.

#include <cmath>
#include <stdexcept>
#include <vector>

#include "mcls/encoder.hpp"

namespace reference {

using Vec = std::vector<double>;

struct Output {
  Vec cls_hidden;      // B*K*D
  Vec cls_embeddings;  // B*K*D
  Vec token_hidden;    // B*L*D
  Vec so_embedding;    // B*D
};

namespace detail {

inline void layer_norm_row(const double* x, const double* gain,
                           const double* bias, double* out, int d) {
  double mean = 0.0;
  for (int j = 0; j < d; ++j) mean += x[j];
  mean /= d;
  double var = 0.0;
  for (int j = 0; j < d; ++j) var += (x[j] - mean) * (x[j] - mean);
  var /= d;
  const double inv = 1.0 / std::sqrt(var + 1e-5);
  for (int j = 0; j < d; ++j) out[j] = (x[j] - mean) * inv * gain[j] + bias[j];
}

// y = x . W + b with W stored row-major [in, out]
inline void affine(const double* x, const double* w, const double* b,
                   double* y, int in, int out) {
  for (int j = 0; j < out; ++j) y[j] = b == nullptr ? 0.0 : b[j];
  for (int i = 0; i < in; ++i) {
    const double xi = x[i];
    for (int j = 0; j < out; ++j) y[j] += xi * w[i * out + j];
  }
}

inline int find_facet(const mcls::encoder::TokenBatch& batch, int row,
                      int facet) {
  for (int c = 0; c <= batch.n_cls; ++c) {
    if (batch.token_ids[static_cast<std::size_t>(row) * batch.cols + c] ==
        3 + facet) {
      return c;
    }
  }
  throw std::runtime_error("reference: facet token missing");
}

}  // namespace detail

inline Output run(const mcls::encoder::EncoderParams& p,
                  const mcls::encoder::ModelConfig& cfg,
                  const mcls::encoder::TokenBatch& batch, bool apply_insert) {
  using detail::affine;
  using detail::layer_norm_row;
  const int b = batch.rows, l = batch.cols, d = cfg.d_model;
  const int k = cfg.k, heads = cfg.n_heads, dh = d / heads;
  const auto& tok = *p.tok_emb.data;
  const auto& pos = *p.pos_emb.data;

  Vec h(static_cast<std::size_t>(b) * l * d);
  for (int r = 0; r < b; ++r) {
    for (int c = 0; c < l; ++c) {
      const int id = batch.token_ids[static_cast<std::size_t>(r) * l + c];
      const int pid = c == 0 ? 0 : (c <= k ? 1 : c - k + 1);
      for (int j = 0; j < d; ++j) {
        h[(static_cast<std::size_t>(r) * l + c) * d + j] =
            tok[static_cast<std::size_t>(id) * d + j] +
            pos[static_cast<std::size_t>(pid) * d + j];
      }
    }
  }

  Vec a(h.size()), q(h.size()), key(h.size()), v(h.size()), ctx(h.size());
  Vec f1(static_cast<std::size_t>(b) * l * cfg.d_ff);
  std::size_t ins = 0;
  for (int layer_no = 0; layer_no < cfg.n_layers; ++layer_no) {
    const auto& lay = p.layers[static_cast<std::size_t>(layer_no)];
    for (std::size_t rc = 0; rc < static_cast<std::size_t>(b) * l; ++rc) {
      layer_norm_row(&h[rc * d], lay.ln1_g.data->data(), lay.ln1_b.data->data(),
                     &a[rc * d], d);
    }
    for (std::size_t rc = 0; rc < static_cast<std::size_t>(b) * l; ++rc) {
      affine(&a[rc * d], lay.wq.data->data(), lay.bq.data->data(), &q[rc * d], d, d);
      affine(&a[rc * d], lay.wk.data->data(), lay.bk.data->data(), &key[rc * d], d, d);
      affine(&a[rc * d], lay.wv.data->data(), lay.bv.data->data(), &v[rc * d], d, d);
    }
    Vec scores(static_cast<std::size_t>(l));
    for (int r = 0; r < b; ++r) {
      for (int hd = 0; hd < heads; ++hd) {
        for (int qc = 0; qc < l; ++qc) {
          for (int kc = 0; kc < l; ++kc) {
            double s = 0.0;
            for (int t = 0; t < dh; ++t) {
              s += q[(static_cast<std::size_t>(r) * l + qc) * d + hd * dh + t] *
                   key[(static_cast<std::size_t>(r) * l + kc) * d + hd * dh + t];
            }
            s /= std::sqrt(static_cast<double>(dh));
            if (batch.attention_mask[static_cast<std::size_t>(r) * l + kc] ==
                0.0) {
              s += -1e9;
            }
            scores[static_cast<std::size_t>(kc)] = s;
          }
          double mx = scores[0];
          for (int kc = 1; kc < l; ++kc) mx = std::max(mx, scores[kc]);
          double sum = 0.0;
          for (int kc = 0; kc < l; ++kc) {
            scores[static_cast<std::size_t>(kc)] =
                std::exp(scores[static_cast<std::size_t>(kc)] - mx);
            sum += scores[static_cast<std::size_t>(kc)];
          }
          for (int t = 0; t < dh; ++t) {
            double acc = 0.0;
            for (int kc = 0; kc < l; ++kc) {
              acc += scores[static_cast<std::size_t>(kc)] / sum *
                     v[(static_cast<std::size_t>(r) * l + kc) * d + hd * dh + t];
            }
            ctx[(static_cast<std::size_t>(r) * l + qc) * d + hd * dh + t] = acc;
          }
        }
      }
    }
    Vec attn(static_cast<std::size_t>(d));
    for (std::size_t rc = 0; rc < static_cast<std::size_t>(b) * l; ++rc) {
      affine(&ctx[rc * d], lay.wo.data->data(), lay.bo.data->data(), attn.data(),
             d, d);
      for (int j = 0; j < d; ++j) h[rc * d + j] += attn[static_cast<std::size_t>(j)];
    }
    Vec f2(static_cast<std::size_t>(d));
    for (std::size_t rc = 0; rc < static_cast<std::size_t>(b) * l; ++rc) {
      Vec normed(static_cast<std::size_t>(d));
      layer_norm_row(&h[rc * d], lay.ln2_g.data->data(), lay.ln2_b.data->data(),
                     normed.data(), d);
      affine(normed.data(), lay.w1.data->data(), lay.b1.data->data(),
             &f1[rc * cfg.d_ff], d, cfg.d_ff);
      for (int j = 0; j < cfg.d_ff; ++j) {
        const double x = f1[rc * cfg.d_ff + j];
        f1[rc * cfg.d_ff + j] =
            0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244));
      }
      affine(&f1[rc * cfg.d_ff], lay.w2.data->data(), lay.b2.data->data(),
             f2.data(), cfg.d_ff, d);
      for (int j = 0; j < d; ++j) h[rc * d + j] += f2[static_cast<std::size_t>(j)];
    }
    if (ins < cfg.insert_layers.size() &&
        cfg.insert_layers[ins] == layer_no + 1) {
      if (cfg.insert_enabled && apply_insert) {
        Vec y(static_cast<std::size_t>(d));
        for (int facet = 1; facet <= k; ++facet) {
          const auto& tr = p.inserted[ins][static_cast<std::size_t>(facet - 1)];
          for (int r = 0; r < b; ++r) {
            const int c = detail::find_facet(batch, r, facet);
            const std::size_t at = (static_cast<std::size_t>(r) * l + c) * d;
            affine(&h[at], tr.w.data->data(), tr.b.data->data(), y.data(), d, d);
            for (int j = 0; j < d; ++j) h[at + j] = y[static_cast<std::size_t>(j)];
          }
        }
      }
      ++ins;
    }
  }

  Vec final_h(h.size());
  for (std::size_t rc = 0; rc < static_cast<std::size_t>(b) * l; ++rc) {
    layer_norm_row(&h[rc * d], p.ln_f_g.data->data(), p.ln_f_b.data->data(),
                   &final_h[rc * d], d);
  }

  Output out;
  out.token_hidden = final_h;
  out.cls_hidden.assign(static_cast<std::size_t>(b) * k * d, 0.0);
  out.cls_embeddings.assign(static_cast<std::size_t>(b) * k * d, 0.0);
  out.so_embedding.assign(static_cast<std::size_t>(b) * d, 0.0);
  Vec joined(static_cast<std::size_t>(k) * d);
  for (int r = 0; r < b; ++r) {
    for (int facet = 1; facet <= k; ++facet) {
      const int c = detail::find_facet(batch, r, facet);
      const double* hk = &final_h[(static_cast<std::size_t>(r) * l + c) * d];
      double* dst =
          &out.cls_hidden[(static_cast<std::size_t>(r) * k + facet - 1) * d];
      for (int j = 0; j < d; ++j) {
        dst[j] = hk[j];
        joined[static_cast<std::size_t>(facet - 1) * d + j] = hk[j];
      }
      affine(hk, p.wo_k[static_cast<std::size_t>(facet - 1)].data->data(),
             nullptr,
             &out.cls_embeddings[(static_cast<std::size_t>(r) * k + facet - 1) * d],
             d, d);
    }
    affine(joined.data(), p.so_w.data->data(), p.so_b.data->data(),
           &out.so_embedding[static_cast<std::size_t>(r) * d], k * d, d);
  }
  return out;
}

}  // namespace reference
