#include "mcls/pretrain.hpp"

#include <cmath>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "mcls/errors.hpp"

namespace mcls::pretrain {

namespace {

constexpr double kMinNorm = 1e-8;

double row_norm(const std::vector<double>& v, std::size_t base, int d) {
  double sq = 0.0;
  for (int i = 0; i < d; ++i) sq += v[base + i] * v[base + i];
  return std::sqrt(sq);
}

double row_dot(const std::vector<double>& a, std::size_t ba,
               const std::vector<double>& b, std::size_t bb, int d) {
  double s = 0.0;
  for (int i = 0; i < d; ++i) s += a[ba + i] * b[bb + i];
  return s;
}

}  // namespace

double qt_logit(const Tensor& c_a, const Tensor& c_b) {
  if (c_a.rank() != 1 || c_b.rank() != 1 || c_a.shape != c_b.shape) {
    throw ShapeError("qt_logit: expects two vectors of equal length, got " +
                     c_a.shape_str() + " and " + c_b.shape_str());
  }
  const int d = c_a.extent(0);
  const double na = row_norm(*c_a.data, 0, d);
  const double nb = row_norm(*c_b.data, 0, d);
  if (na < kMinNorm || nb < kMinNorm) {
    throw NumericError("qt_logit: degenerate vector norm");
  }
  return row_dot(*c_a.data, 0, *c_b.data, 0, d) / (na * nb);
}

double mc_logit(const Tensor& cls_a, const Tensor& cls_b, double lambda) {
  if (cls_a.rank() != 2 || cls_b.rank() != 2 || cls_a.shape != cls_b.shape) {
    throw ShapeError("mc_logit: expects two K x D sets of equal shape, got " +
                     cls_a.shape_str() + " and " + cls_b.shape_str());
  }
  const int k = cls_a.extent(0);
  const int d = cls_a.extent(1);
  if (k < 1) throw ConfigError("mc_logit: K must be >= 1");

  const std::vector<double>& a = *cls_a.data;
  const std::vector<double>& b = *cls_b.data;
  std::vector<double> na(static_cast<std::size_t>(k));
  std::vector<double> nb(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    na[static_cast<std::size_t>(i)] = row_norm(a, static_cast<std::size_t>(i) * d, d);
    nb[static_cast<std::size_t>(i)] = row_norm(b, static_cast<std::size_t>(i) * d, d);
    if (na[static_cast<std::size_t>(i)] < kMinNorm ||
        nb[static_cast<std::size_t>(i)] < kMinNorm) {
      throw NumericError("mc_logit: degenerate CLS row norm");
    }
  }

  double max_cos = 0.0;
  bool first = true;
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k; ++j) {
      const double c = row_dot(a, static_cast<std::size_t>(i) * d, b,
                               static_cast<std::size_t>(j) * d, d) /
                       (na[static_cast<std::size_t>(i)] * nb[static_cast<std::size_t>(j)]);
      if (first || c > max_cos) max_cos = c;
      first = false;
    }
  }

  std::vector<double> sa(static_cast<std::size_t>(d), 0.0);
  std::vector<double> sb(static_cast<std::size_t>(d), 0.0);
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < d; ++j) {
      sa[static_cast<std::size_t>(j)] += a[static_cast<std::size_t>(i) * d + j];
      sb[static_cast<std::size_t>(j)] += b[static_cast<std::size_t>(i) * d + j];
    }
  }
  const double nsa = row_norm(sa, 0, d);
  const double nsb = row_norm(sb, 0, d);
  if (nsa < kMinNorm || nsb < kMinNorm) {
    throw NumericError("mc_logit: degenerate CLS sum norm");
  }
  const double sum_cos = row_dot(sa, 0, sb, 0, d) / (nsa * nsb);
  return lambda * max_cos + (1.0 - lambda) * sum_cos;
}

Tensor mc_logit_matrix(const Tensor& a, const Tensor& b, double lambda,
                       Graph* g) {
  if (a.rank() != 3 || b.rank() != 3 || a.extent(1) != b.extent(1) ||
      a.extent(2) != b.extent(2)) {
    throw ShapeError("mc_logit_matrix: expects [n,K,D] and [m,K,D], got " +
                     a.shape_str() + " and " + b.shape_str());
  }
  const int n = a.extent(0);
  const int m = b.extent(0);
  const int k = a.extent(1);
  const int d = a.extent(2);

  // Facet-pair cosines, then the per-(anchor, candidate) maximum.
  Tensor an = l2_normalize(reshape(a, {n * k, d}), g, kMinNorm);
  Tensor bn = l2_normalize(reshape(b, {m * k, d}), g, kMinNorm);
  Tensor max_term = block_max(matmul_t(an, bn, g), k, k, g);  // [n, m]

  // Cosine of the facet sums, formed before normalization.
  Tensor sa = l2_normalize(sum_axis(a, 1, g), g, kMinNorm);
  Tensor sb = l2_normalize(sum_axis(b, 1, g), g, kMinNorm);
  Tensor sum_term = matmul_t(sa, sb, g);  // [n, m]

  return add(scale(max_term, lambda, g), scale(sum_term, 1.0 - lambda, g), g);
}

Tensor qt_loss(const Tensor& part1, const Tensor& part2, Graph* g) {
  if (part1.rank() != 2 || part2.rank() != 2 || part1.shape != part2.shape) {
    throw ShapeError("qt_loss: expects matched [n,D] parts, got " +
                     part1.shape_str() + " and " + part2.shape_str());
  }
  const int n = part1.extent(0);
  if (n < 1) throw ConfigError("qt_loss: parts must be non-empty");
  Tensor logits = matmul_t(l2_normalize(part1, g, kMinNorm),
                           l2_normalize(part2, g, kMinNorm), g);
  std::vector<int> targets(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) targets[static_cast<std::size_t>(i)] = i;
  return softmax_cross_entropy(logits, targets, g);
}

Tensor mcqt_loss(const Tensor& part1, const Tensor& part2, const Tensor& part3,
                 double lambda, Graph* g) {
  if (part1.rank() != 3 || part1.shape != part2.shape ||
      part1.shape != part3.shape) {
    throw ShapeError("mcqt_loss: expects three equal [n,K,D] parts, got " +
                     part1.shape_str() + ", " + part2.shape_str() + ", " +
                     part3.shape_str());
  }
  const int n = part1.extent(0);
  if (n < 1) throw ConfigError("mcqt_loss: parts must be non-empty");

  // Anchors in part 1 score against parts 2+3; the positive is the anchor's
  // own part-2 row (its hard negative is the aligned part-3 row).
  Tensor cands1 = concat({part2, part3}, 0, g);
  Tensor logits1 = mc_logit_matrix(part1, cands1, lambda, g);
  std::vector<int> targets1(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) targets1[static_cast<std::size_t>(i)] = i;
  Tensor ce1 = softmax_cross_entropy(logits1, targets1, g);

  // Anchors in part 3 score against parts 1+2; the positive is again the
  // anchor's part-2 row, which sits at offset n in the candidate stack.
  Tensor cands2 = concat({part1, part2}, 0, g);
  Tensor logits2 = mc_logit_matrix(part3, cands2, lambda, g);
  std::vector<int> targets2(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) targets2[static_cast<std::size_t>(i)] = n + i;
  Tensor ce2 = softmax_cross_entropy(logits2, targets2, g);

  return add(ce1, ce2, g);
}

MlmResult mlm_loss(const Tensor& token_hidden,
                   const std::vector<textpipe::MlmTarget>& targets,
                   const Tensor& embedding_table, Graph* g) {
  if (token_hidden.rank() != 3 || embedding_table.rank() != 2 ||
      token_hidden.extent(2) != embedding_table.extent(1)) {
    throw ShapeError("mlm_loss: expects token_hidden [B,L,D] and table [V,D]");
  }
  if (targets.empty()) return {Tensor::scalar(0.0), false};

  const int rows = token_hidden.extent(0);
  const int cols = token_hidden.extent(1);
  const int vocab = embedding_table.extent(0);
  std::vector<int> flat(targets.size());
  std::vector<int> gold(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const textpipe::MlmTarget& t = targets[i];
    if (t.row < 0 || t.row >= rows || t.pos < 0 || t.pos >= cols) {
      throw IndexError("mlm_loss: target position out of range");
    }
    if (t.original_id < 0 || t.original_id >= vocab) {
      throw IndexError("mlm_loss: target id out of vocabulary");
    }
    flat[i] = t.row * cols + t.pos;
    gold[i] = t.original_id;
  }
  Tensor hidden = embedding(
      reshape(token_hidden, {rows * cols, token_hidden.extent(2)}), flat, g);
  Tensor logits = matmul_t(hidden, embedding_table, g);  // [T, V]
  return {softmax_cross_entropy(logits, gold, g), true};
}

Tensor so_loss(const Tensor& so_embedding, const std::vector<int>& so_labels,
               const Tensor& so_cls_w, const Tensor& so_cls_b, Graph* g) {
  if (so_embedding.rank() != 2 ||
      so_embedding.extent(0) != static_cast<int>(so_labels.size())) {
    throw ShapeError("so_loss: one label per embedding row required");
  }
  Tensor logits = add_bias(matmul(so_embedding, so_cls_w, g), so_cls_b, g);
  return softmax_cross_entropy(logits, so_labels, g);
}

Tensor tfidf_loss(const Tensor& token_hidden, const ContrastiveBatch& batch,
                  const Tensor& tfidf_w, const Tensor& tfidf_b, Graph* g) {
  if (!batch.has_tfidf) {
    throw ConfigError("tfidf_loss: batch carries no tf-idf targets");
  }
  if (token_hidden.rank() != 3 || token_hidden.extent(0) != batch.rows ||
      token_hidden.extent(1) != batch.cols) {
    throw ShapeError("tfidf_loss: token_hidden does not match the batch");
  }
  const int d = token_hidden.extent(2);
  const std::size_t total = static_cast<std::size_t>(batch.rows) * batch.cols;

  // Special positions carry no importance signal; judge on pre-masking ids
  // so that [MASK] noise does not erase supervised positions.
  const std::vector<int> original = textpipe::original_token_ids(batch);
  const int unk = batch.n_cls + 4;
  Tensor mask = Tensor::zeros({batch.rows * batch.cols, 1});
  double count = 0.0;
  for (std::size_t i = 0; i < total; ++i) {
    if (original[i] >= unk) {
      (*mask.data)[i] = 1.0;
      count += 1.0;
    }
  }
  if (count == 0.0) {
    throw InputError("tfidf_loss: batch has no non-special positions");
  }

  Tensor targets = Tensor::from({batch.rows * batch.cols, 1},
                                batch.tfidf_targets);
  Tensor flat = reshape(token_hidden, {batch.rows * batch.cols, d});
  Tensor pred = sigmoid(add_bias(matmul(flat, tfidf_w, g), tfidf_b, g), g);
  Tensor masked = mul(sub(pred, targets, g), mask, g);
  return scale(reduce_sum(mul(masked, masked, g), g), 1.0 / count, g);
}

LossBreakdown compute_losses(const EncoderParams& params,
                             const ModelConfig& config,
                             const ContrastiveBatch& batch, Graph* g,
                             Rng* dropout_rng) {
  const encoder::LossWeights& w = config.loss_weights;
  if (w.mcqt > 0.0 && batch.mode != textpipe::BatchMode::three_part) {
    throw ConfigError(
        "compute_losses: the mcqt objective needs a three-part batch");
  }
  if (w.tfidf > 0.0 && !batch.has_tfidf) {
    throw ConfigError(
        "compute_losses: tfidf weight is positive but the batch has no "
        "tf-idf targets");
  }

  encoder::ForwardOptions opts;
  opts.graph = g;
  opts.dropout = dropout_rng;
  encoder::EncoderOutput out =
      encoder::forward(params, config, encoder::to_token_batch(batch), opts);

  LossBreakdown result;
  Tensor total;
  bool have_total = false;
  // Numeric failures inside an objective (or a non-finite value it produces)
  // surface with the objective's name so training aborts with a usable
  // diagnostic.
  auto accumulate = [&](const char* name, double weight, double& slot,
                        auto&& make) {
    Tensor loss;
    try {
      loss = make();
    } catch (const NumericError& e) {
      throw NumericError(std::string("compute_losses: ") + name +
                         " objective failed: " + e.what());
    }
    const double value = loss.value();
    if (!std::isfinite(value)) {
      throw NumericError(std::string("compute_losses: non-finite ") + name +
                         " loss");
    }
    slot = value;
    Tensor contribution = scale(loss, weight, g);
    total = have_total ? add(total, contribution, g) : contribution;
    have_total = true;
  };

  if (w.mcqt > 0.0) {
    accumulate("mcqt", w.mcqt, result.mcqt, [&] {
      const int n = batch.rows / 3;
      Tensor p1 = slice_axis(out.cls_embeddings, 0, 0, n, g);
      Tensor p2 = slice_axis(out.cls_embeddings, 0, n, n, g);
      Tensor p3 = slice_axis(out.cls_embeddings, 0, 2 * n, n, g);
      return mcqt_loss(p1, p2, p3, config.lambda, g);
    });
  }
  if (w.mlm > 0.0) {
    MlmResult mlm = mlm_loss(out.token_hidden, batch.mlm_targets,
                             params.tok_emb, g);
    if (mlm.has_targets) {
      accumulate("mlm", w.mlm, result.mlm, [&] { return mlm.loss; });
    }
  }
  if (w.so > 0.0) {
    accumulate("so", w.so, result.so, [&] {
      return so_loss(out.so_embedding, batch.so_labels, params.so_cls_w,
                     params.so_cls_b, g);
    });
  }
  if (w.tfidf > 0.0) {
    accumulate("tfidf", w.tfidf, result.tfidf, [&] {
      return tfidf_loss(out.token_hidden, batch, params.tfidf_w,
                        params.tfidf_b, g);
    });
  }

  if (have_total) {
    result.total = total;
    result.on_tape = true;
  } else {
    result.total = Tensor::scalar(0.0);
    result.on_tape = false;
  }
  return result;
}

PretrainState init_pretrain_state(const PretrainConfig& config,
                                  std::uint64_t seed) {
  optim::AdamConfig adam;
  adam.lr = config.lr;
  adam.warmup_steps = optim::warmup_steps_for(config.warmup_ratio, config.steps);
  adam.clip_norm = 1.0;
  PretrainState state;
  state.seed = seed;
  state.adam = optim::Adam(adam);
  return state;
}

StepStats pretrain_step(EncoderParams& params, PretrainState& state,
                        const ContrastiveBatch& batch,
                        const ModelConfig& model_config,
                        const PretrainConfig& config) {
  (void)config;  // schedule lives in the Adam state; kept for call symmetry
  params.set_requires_grad(true);
  params.zero_grad();

  Graph g;
  Rng dropout_rng = Rng(state.seed)
                        .substream("pretrain/dropout")
                        .substream(static_cast<std::uint64_t>(state.step + 1));
  Rng* dr = model_config.dropout_p > 0.0 ? &dropout_rng : nullptr;
  LossBreakdown losses = compute_losses(params, model_config, batch, &g, dr);

  StepStats stats;
  stats.step = state.step + 1;
  stats.total = losses.total.value();
  stats.mcqt = losses.mcqt;
  stats.mlm = losses.mlm;
  stats.so = losses.so;
  stats.tfidf = losses.tfidf;

  if (losses.on_tape) {
    g.backward(losses.total);
    auto named = params.named_params();
    stats.grad_norm =
        optim::clip_gradients(named, state.adam.config().clip_norm);
    state.adam.step(named);
    params.zero_grad();
  }

  state.step += 1;
  state.sums.total += stats.total;
  state.sums.mcqt += stats.mcqt;
  state.sums.mlm += stats.mlm;
  state.sums.so += stats.so;
  state.sums.tfidf += stats.tfidf;
  state.sums.grad_norm += stats.grad_norm;
  return stats;
}

PretrainRunResult run_pretraining(const std::vector<textpipe::Document>& docs,
                                  const textpipe::Vocabulary& vocab,
                                  const ModelConfig& model_config,
                                  const PretrainConfig& config,
                                  std::uint64_t seed, std::ostream* log) {
  model_config.validate();
  if (config.steps < 1) throw ConfigError("run_pretraining: steps must be >= 1");

  const Rng root(seed);
  PretrainRunResult result{
      EncoderParams::init(model_config, root.substream("pretrain/init")),
      init_pretrain_state(config, seed),
      {}};
  result.history.reserve(static_cast<std::size_t>(config.steps));

  textpipe::TfidfTable tfidf;
  textpipe::BatchOptions batch_options;
  batch_options.swap_prob = config.swap_prob;
  batch_options.mask_prob = config.mask_prob;
  if (model_config.loss_weights.tfidf > 0.0) {
    tfidf = textpipe::build_tfidf_table(vocab, docs);
    batch_options.tfidf = &tfidf;
  }

  const Rng batch_root = root.substream("pretrain/batch");
  for (int step = 1; step <= config.steps; ++step) {
    ContrastiveBatch batch = textpipe::make_training_batch(
        docs, vocab, config.batch_rows, model_config.max_len, config.mode,
        batch_options, batch_root.substream(static_cast<std::uint64_t>(step)));
    StepStats stats = pretrain_step(result.params, result.state, batch,
                                    model_config, config);
    if (log != nullptr) {
      *log << stats.step << '\t' << std::setprecision(17) << stats.total
           << '\t' << stats.mcqt << '\t' << stats.mlm << '\t' << stats.so
           << '\t' << stats.tfidf << '\t' << stats.grad_norm << '\n';
    }
    result.history.push_back(stats);
  }
  return result;
}

}  // namespace mcls::pretrain
