#include "mcls/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "mcls/errors.hpp"
#include "mcls/optim.hpp"
#include "mcls/textpipe.hpp"

namespace mcls::finetune {

namespace {

using nlohmann::json;

Tensor copy_tensor(const Tensor& t) { return Tensor::from(t.shape, *t.data); }

int argmax_index(const std::vector<double>& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

// ---------------------------------------------------------------------------
// Tasks

std::string metric_name(Metric m) {
  switch (m) {
    case Metric::accuracy:
      return "accuracy";
    case Metric::mcc:
      return "mcc";
    case Metric::f1:
      return "f1";
    case Metric::spearman:
      return "spearman";
  }
  return "?";
}

Metric parse_metric(const std::string& name) {
  if (name == "accuracy") return Metric::accuracy;
  if (name == "mcc") return Metric::mcc;
  if (name == "f1") return Metric::f1;
  if (name == "spearman") return Metric::spearman;
  throw InputError("unknown metric '" + name + "'");
}

namespace {

std::string kind_name(TaskKind k) {
  return k == TaskKind::classification ? "classification" : "regression";
}

TaskKind parse_kind(const std::string& name) {
  if (name == "classification") return TaskKind::classification;
  if (name == "regression") return TaskKind::regression;
  throw InputError("unknown task kind '" + name + "'");
}

void reject_unknown_keys(const json& j,
                         std::initializer_list<const char*> allowed,
                         const std::string& context) {
  for (const auto& item : j.items()) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* k) {
          return item.key() == k;
        }) == allowed.end()) {
      throw InputError(context + ": unknown key '" + item.key() + "'");
    }
  }
}

std::vector<int> parse_id_list(const json& j, const std::string& context) {
  if (!j.is_array()) {
    throw InputError(context + " must be an array of token ids");
  }
  std::vector<int> out;
  out.reserve(j.size());
  for (const auto& v : j) {
    if (!v.is_number_integer()) {
      throw InputError(context + " must contain only integers");
    }
    out.push_back(v.get<int>());
  }
  return out;
}

Example parse_example(const json& j, const std::string& context) {
  if (!j.is_object()) {
    throw InputError(context + " must be a JSON object");
  }
  reject_unknown_keys(j, {"a", "b", "label"}, context);
  for (const char* k : {"a", "label"}) {
    if (!j.contains(k)) {
      throw InputError(context + ": missing key '" + std::string(k) + "'");
    }
  }
  Example ex;
  ex.sentence_a = parse_id_list(j["a"], context + ".a");
  if (j.contains("b")) {
    ex.sentence_b = parse_id_list(j["b"], context + ".b");
  }
  if (!j["label"].is_number()) {
    throw InputError(context + ".label must be a number");
  }
  ex.label = j["label"].get<double>();
  return ex;
}

std::vector<Example> parse_examples(const json& j, const std::string& context) {
  if (!j.is_array()) {
    throw InputError(context + " must be an array of examples");
  }
  std::vector<Example> out;
  out.reserve(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) {
    out.push_back(parse_example(j[i], context + "[" + std::to_string(i) + "]"));
  }
  return out;
}

json example_to_json(const Example& ex) {
  json j;
  j["a"] = ex.sentence_a;
  if (!ex.sentence_b.empty()) {
    j["b"] = ex.sentence_b;
  }
  j["label"] = ex.label;
  return j;
}

}  // namespace

void TaskSpec::validate() const {
  if (dev.empty()) {
    throw InputError("task: dev set must contain at least one example");
  }
  if (kind == TaskKind::classification) {
    if (n_classes < 2) {
      throw InputError("task: classification needs n_classes >= 2, got " +
                       std::to_string(n_classes));
    }
    if (metric == Metric::spearman) {
      throw InputError("task: spearman is a regression metric");
    }
  } else {
    if (metric != Metric::spearman) {
      throw InputError("task: regression supports only the spearman metric");
    }
  }
  auto check_split = [&](const std::vector<Example>& split, const char* name) {
    for (std::size_t i = 0; i < split.size(); ++i) {
      const Example& ex = split[i];
      const std::string where =
          std::string(name) + "[" + std::to_string(i) + "]";
      if (ex.sentence_a.empty()) {
        throw InputError("task: " + where + " has an empty first sentence");
      }
      if (kind == TaskKind::classification) {
        if (ex.label != std::floor(ex.label) || ex.label < 0.0 ||
            ex.label >= static_cast<double>(n_classes)) {
          throw InputError("task: " + where + " label " +
                           std::to_string(ex.label) + " is not a class in [0, " +
                           std::to_string(n_classes) + ")");
        }
      } else if (!std::isfinite(ex.label)) {
        throw InputError("task: " + where + " has a non-finite label");
      }
    }
  };
  check_split(train, "train");
  check_split(dev, "dev");
}

TaskSpec TaskSpec::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("task: cannot open '" + path + "'");
  }
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw InputError("task: " + path + ": " + e.what());
  }
  if (!j.is_object()) {
    throw InputError("task: " + path + ": top level must be a JSON object");
  }
  reject_unknown_keys(j, {"kind", "n_classes", "metric", "train", "dev"},
                      "task");
  for (const char* k : {"kind", "metric", "train", "dev"}) {
    if (!j.contains(k)) {
      throw InputError("task: missing key '" + std::string(k) + "'");
    }
  }
  TaskSpec spec;
  if (!j["kind"].is_string()) {
    throw InputError("task: 'kind' must be a string");
  }
  spec.kind = parse_kind(j["kind"].get<std::string>());
  if (j.contains("n_classes")) {
    if (!j["n_classes"].is_number_integer()) {
      throw InputError("task: 'n_classes' must be an integer");
    }
    spec.n_classes = j["n_classes"].get<int>();
  }
  if (spec.kind == TaskKind::regression) {
    spec.n_classes = 1;
  }
  if (!j["metric"].is_string()) {
    throw InputError("task: 'metric' must be a string");
  }
  spec.metric = parse_metric(j["metric"].get<std::string>());
  spec.train = parse_examples(j["train"], "train");
  spec.dev = parse_examples(j["dev"], "dev");
  spec.validate();
  return spec;
}

void TaskSpec::save(const std::string& path) const {
  json j;
  j["kind"] = kind_name(kind);
  if (kind == TaskKind::classification) {
    j["n_classes"] = n_classes;
  }
  j["metric"] = metric_name(metric);
  j["train"] = json::array();
  for (const Example& ex : train) j["train"].push_back(example_to_json(ex));
  j["dev"] = json::array();
  for (const Example& ex : dev) j["dev"].push_back(example_to_json(ex));
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw IoError("task: cannot open '" + path + "' for writing");
  }
  out << j.dump(2) << '\n';
  if (!out.flush()) {
    throw IoError("task: failed writing '" + path + "'");
  }
}

// ---------------------------------------------------------------------------
// Aggregation

std::string aggregation_name(Aggregation a) {
  switch (a) {
    case Aggregation::reparam:
      return "reparam";
    case Aggregation::sum:
      return "sum";
    case Aggregation::k1:
      return "k1";
  }
  return "?";
}

Aggregation parse_aggregation(const std::string& name) {
  if (name == "reparam") return Aggregation::reparam;
  if (name == "sum") return Aggregation::sum;
  if (name == "k1") return Aggregation::k1;
  throw InputError("unknown aggregation '" + name + "'");
}

Tensor facet_transforms(const Tensor& cls_hidden, const Tensor& w,
                        Aggregation aggregation, Graph* graph) {
  if (w.rank() != 3 || w.extent(1) != w.extent(2)) {
    throw ShapeError("facet_transforms: head stack must be [K, D, D], got " +
                     w.shape_str());
  }
  if (cls_hidden.rank() != 3) {
    throw ShapeError("facet_transforms: hidden states must be [B, K, D], got " +
                     cls_hidden.shape_str());
  }
  const int k = w.extent(0);
  const int d = w.extent(1);
  const int b = cls_hidden.extent(0);
  if (cls_hidden.extent(1) != k || cls_hidden.extent(2) != d) {
    throw ShapeError("facet_transforms: hidden states " +
                     cls_hidden.shape_str() + " do not match heads " +
                     w.shape_str());
  }

  std::vector<Tensor> heads;
  heads.reserve(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    heads.push_back(reshape(slice_axis(w, 0, i, 1, graph), {d, d}));
  }

  std::vector<Tensor> effective;
  effective.reserve(static_cast<std::size_t>(k));
  if (aggregation == Aggregation::reparam) {
    // W_k - mean_j W_j computed as (1/K) sum_j (W_k - W_j): pairwise
    // differences keep identical heads at exactly zero.
    for (int i = 0; i < k; ++i) {
      Tensor acc = sub(heads[static_cast<std::size_t>(i)], heads[0], graph);
      for (int j = 1; j < k; ++j) {
        acc = add(acc,
                  sub(heads[static_cast<std::size_t>(i)],
                      heads[static_cast<std::size_t>(j)], graph),
                  graph);
      }
      effective.push_back(scale(acc, 1.0 / static_cast<double>(k), graph));
    }
  } else {
    effective = heads;
  }

  std::vector<Tensor> outputs;
  outputs.reserve(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    const Tensor hk = reshape(slice_axis(cls_hidden, 1, i, 1, graph), {b, d});
    outputs.push_back(reshape(
        matmul(hk, effective[static_cast<std::size_t>(i)], graph), {b, 1, d}));
  }
  return concat(outputs, 1, graph);
}

namespace {

Tensor aggregate_impl(const Tensor& cls_hidden, const Tensor& w,
                      Aggregation aggregation, Graph* graph,
                      const char* op_name) {
  if (cls_hidden.rank() == 2) {
    const Tensor batched = reshape(
        cls_hidden, {1, cls_hidden.extent(0), cls_hidden.extent(1)});
    Tensor out = aggregate_impl(batched, w, aggregation, graph, op_name);
    return reshape(out, {out.extent(1)});
  }
  if (aggregation == Aggregation::reparam && w.rank() == 3 && w.extent(0) < 2) {
    throw ConfigError(std::string(op_name) +
                      ": mean-centered aggregation needs at least 2 facets, "
                      "got K=" +
                      std::to_string(w.extent(0)));
  }
  return sum_axis(facet_transforms(cls_hidden, w, aggregation, graph), 1,
                  graph);
}

}  // namespace

Tensor reparam_aggregate(const Tensor& cls_hidden, const Tensor& w,
                         Graph* graph) {
  return aggregate_impl(cls_hidden, w, Aggregation::reparam, graph,
                        "reparam_aggregate");
}

Tensor plain_aggregate(const Tensor& cls_hidden, const Tensor& w,
                       Graph* graph) {
  return aggregate_impl(cls_hidden, w, Aggregation::sum, graph,
                        "plain_aggregate");
}

// ---------------------------------------------------------------------------
// Model

std::vector<std::pair<std::string, Tensor*>> FinetunedModel::named_params() {
  auto named = encoder.named_params();
  named.emplace_back("agg_w", &agg_w);
  named.emplace_back("cls_w", &cls_w);
  named.emplace_back("cls_b", &cls_b);
  return named;
}

std::vector<std::pair<std::string, const Tensor*>> FinetunedModel::named_params()
    const {
  auto named = encoder.named_params();
  named.emplace_back("agg_w", &agg_w);
  named.emplace_back("cls_w", &cls_w);
  named.emplace_back("cls_b", &cls_b);
  return named;
}

void FinetunedModel::set_requires_grad(bool on) {
  for (auto& [name, t] : named_params()) {
    (void)name;
    t->set_requires_grad(on);
  }
}

void FinetunedModel::zero_grad() {
  for (auto& [name, t] : named_params()) {
    (void)name;
    t->zero_grad();
  }
}

FinetunedModel FinetunedModel::clone() const {
  FinetunedModel out;
  out.config = config;
  out.encoder = encoder.clone();
  out.aggregation = aggregation;
  out.agg_w = copy_tensor(agg_w);
  out.cls_w = copy_tensor(cls_w);
  out.cls_b = copy_tensor(cls_b);
  out.kind = kind;
  out.n_classes = n_classes;
  return out;
}

encoder::TokenBatch make_task_batch(const std::vector<Example>& examples,
                                    std::size_t begin, std::size_t count,
                                    const ModelConfig& config) {
  using textpipe::Vocabulary;
  if (begin + count > examples.size() || count == 0) {
    throw IndexError("make_task_batch: range [" + std::to_string(begin) +
                     ", " + std::to_string(begin + count) + ") out of bounds");
  }
  const int k = config.k;
  if (config.max_len < k + 3) {
    throw ConfigError("make_task_batch: max_len " +
                      std::to_string(config.max_len) +
                      " cannot fit the CLS block, one token, and [SEP]");
  }
  encoder::TokenBatch batch;
  batch.rows = static_cast<int>(count);
  batch.cols = config.max_len;
  batch.n_cls = k;
  batch.token_ids.reserve(count * static_cast<std::size_t>(config.max_len));
  batch.attention_mask.reserve(batch.token_ids.capacity());

  const std::size_t avail =
      static_cast<std::size_t>(config.max_len - (k + 1) - 1);
  for (std::size_t i = begin; i < begin + count; ++i) {
    std::vector<int> a = examples[i].sentence_a;
    std::vector<int> b = examples[i].sentence_b;
    for (const std::vector<int>* s : {&a, &b}) {
      for (int id : *s) {
        if (id < 0 || id >= config.vocab_size) {
          throw IndexError("make_task_batch: token id " + std::to_string(id) +
                           " outside vocabulary of size " +
                           std::to_string(config.vocab_size));
        }
      }
    }
    while (a.size() + b.size() > avail) {
      if (a.size() > b.size()) {
        a.pop_back();
      } else {
        b.pop_back();
      }
    }
    std::vector<int> row;
    row.reserve(static_cast<std::size_t>(config.max_len));
    row.push_back(Vocabulary::kCls0);
    for (int j = 1; j <= k; ++j) row.push_back(Vocabulary::kCls0 + j);
    row.insert(row.end(), a.begin(), a.end());
    row.push_back(Vocabulary::kSep);
    row.insert(row.end(), b.begin(), b.end());
    row.resize(static_cast<std::size_t>(config.max_len), Vocabulary::kPad);
    for (int id : row) {
      batch.token_ids.push_back(id);
      batch.attention_mask.push_back(id == Vocabulary::kPad ? 0.0 : 1.0);
    }
  }
  return batch;
}

TaskForward task_forward(const FinetunedModel& model,
                         const encoder::TokenBatch& batch, Graph* graph,
                         Rng* dropout) {
  if (batch.n_cls != model.config.k) {
    throw ShapeError("task_forward: batch has " + std::to_string(batch.n_cls) +
                     " facets, model expects " + std::to_string(model.config.k));
  }
  encoder::ForwardOptions options;
  options.graph = graph;
  options.dropout = dropout;
  const encoder::EncoderOutput out =
      encoder::forward(model.encoder, model.config, batch, options);
  TaskForward tf;
  tf.transforms =
      facet_transforms(out.cls_hidden, model.agg_w, model.aggregation, graph);
  const Tensor c = sum_axis(tf.transforms, 1, graph);
  tf.logits = add_bias(matmul(c, model.cls_w, graph), model.cls_b, graph);
  return tf;
}

// ---------------------------------------------------------------------------
// Metrics

double accuracy(const std::vector<int>& pred, const std::vector<int>& gold) {
  if (pred.size() != gold.size() || pred.empty()) {
    throw InputError("accuracy: prediction and gold lists must match and be "
                     "non-empty");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == gold[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

double matthews_corr(const std::vector<int>& pred, const std::vector<int>& gold,
                     int n_classes) {
  if (pred.size() != gold.size() || pred.empty()) {
    throw InputError("matthews_corr: prediction and gold lists must match and "
                     "be non-empty");
  }
  const std::size_t c = static_cast<std::size_t>(n_classes);
  std::vector<double> pred_count(c, 0.0), gold_count(c, 0.0);
  double correct = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] < 0 || pred[i] >= n_classes || gold[i] < 0 ||
        gold[i] >= n_classes) {
      throw InputError("matthews_corr: label outside [0, " +
                       std::to_string(n_classes) + ")");
    }
    pred_count[static_cast<std::size_t>(pred[i])] += 1.0;
    gold_count[static_cast<std::size_t>(gold[i])] += 1.0;
    if (pred[i] == gold[i]) correct += 1.0;
  }
  const double s = static_cast<double>(pred.size());
  double dot = 0.0, p2 = 0.0, t2 = 0.0;
  for (std::size_t l = 0; l < c; ++l) {
    dot += pred_count[l] * gold_count[l];
    p2 += pred_count[l] * pred_count[l];
    t2 += gold_count[l] * gold_count[l];
  }
  const double denom = std::sqrt(s * s - p2) * std::sqrt(s * s - t2);
  if (denom == 0.0) return 0.0;
  return (correct * s - dot) / denom;
}

namespace {

double binary_f1(const std::vector<int>& pred, const std::vector<int>& gold,
                 int positive) {
  double tp = 0.0, fp = 0.0, fn = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == positive;
    const bool g = gold[i] == positive;
    if (p && g) tp += 1.0;
    if (p && !g) fp += 1.0;
    if (!p && g) fn += 1.0;
  }
  const double precision = tp + fp > 0.0 ? tp / (tp + fp) : 0.0;
  const double recall = tp + fn > 0.0 ? tp / (tp + fn) : 0.0;
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

}  // namespace

double f1_score(const std::vector<int>& pred, const std::vector<int>& gold,
                int n_classes) {
  if (pred.size() != gold.size() || pred.empty()) {
    throw InputError("f1_score: prediction and gold lists must match and be "
                     "non-empty");
  }
  if (n_classes == 2) {
    return binary_f1(pred, gold, 1);
  }
  double total = 0.0;
  for (int l = 0; l < n_classes; ++l) {
    total += binary_f1(pred, gold, l);
  }
  return total / static_cast<double>(n_classes);
}

namespace {

// Ranks starting at 1; ties share the average of their rank range.
std::vector<double> average_ranks(const std::vector<double>& values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return values[a] < values[b];
  });
  std::vector<double> ranks(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 +
                       1.0;
    for (std::size_t p = i; p <= j; ++p) ranks[order[p]] = avg;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman_corr(const std::vector<double>& pred,
                     const std::vector<double>& gold) {
  if (pred.size() != gold.size() || pred.size() < 2) {
    throw InputError("spearman_corr: need two equally sized lists with at "
                     "least 2 entries");
  }
  const std::vector<double> ra = average_ranks(pred);
  const std::vector<double> rb = average_ranks(gold);
  const double n = static_cast<double>(pred.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double da = ra[i] - ma;
    const double db = rb[i] - mb;
    cov += da * db;
    va += da * da;
    vb += db * db;
  }
  if (va == 0.0 || vb == 0.0) return 0.0;
  return cov / std::sqrt(va * vb);
}

double evaluate_metric(const FinetunedModel& model, const TaskSpec& task) {
  const std::vector<PredictionRecord> preds = predict(model, task.dev);
  if (task.kind == TaskKind::regression) {
    std::vector<double> p, g;
    p.reserve(preds.size());
    g.reserve(preds.size());
    for (const auto& r : preds) {
      p.push_back(r.probs.at(0));
      g.push_back(r.gold);
    }
    return spearman_corr(p, g);
  }
  std::vector<int> p, g;
  p.reserve(preds.size());
  g.reserve(preds.size());
  for (const auto& r : preds) {
    p.push_back(argmax_index(r.probs));
    g.push_back(static_cast<int>(std::llround(r.gold)));
  }
  switch (task.metric) {
    case Metric::accuracy:
      return accuracy(p, g);
    case Metric::mcc:
      return matthews_corr(p, g, task.n_classes);
    case Metric::f1:
      return f1_score(p, g, task.n_classes);
    case Metric::spearman:
      break;
  }
  throw ConfigError("evaluate_metric: metric does not fit the task kind");
}

// ---------------------------------------------------------------------------
// Training

namespace {

Tensor stack_heads(const EncoderParams& params, int k, int d) {
  std::vector<double> buf;
  buf.reserve(static_cast<std::size_t>(k) * static_cast<std::size_t>(d) *
              static_cast<std::size_t>(d));
  for (int i = 0; i < k; ++i) {
    const Tensor& w = params.wo_k[static_cast<std::size_t>(i)];
    buf.insert(buf.end(), w.data->begin(), w.data->end());
  }
  return Tensor::from({k, d, d}, std::move(buf));
}

void check_finetune_config(const FinetuneConfig& fcfg) {
  if (fcfg.steps < 0) {
    throw ConfigError("finetune: steps must be >= 0");
  }
  if (fcfg.batch_size < 1) {
    throw ConfigError("finetune: batch_size must be >= 1");
  }
  if (!(fcfg.lr > 0.0) || !std::isfinite(fcfg.lr)) {
    throw ConfigError("finetune: lr must be positive and finite");
  }
  if (fcfg.warmup_ratio < 0.0 || fcfg.warmup_ratio > 1.0) {
    throw ConfigError("finetune: warmup_ratio must lie in [0, 1]");
  }
  if (fcfg.eval_every < 1) {
    throw ConfigError("finetune: eval_every must be >= 1");
  }
  if (fcfg.patience < 1) {
    throw ConfigError("finetune: patience must be >= 1");
  }
}

void check_aggregation_fit(Aggregation aggregation, int k) {
  if (aggregation == Aggregation::reparam && k < 2) {
    throw ConfigError(
        "finetune: mean-centered aggregation needs at least 2 facets, got K=" +
        std::to_string(k));
  }
  if (aggregation == Aggregation::k1 && k != 1) {
    throw ConfigError("finetune: k1 aggregation needs a single-facet model, "
                      "got K=" +
                      std::to_string(k));
  }
}

std::vector<int> class_labels(const std::vector<Example>& examples) {
  std::vector<int> out;
  out.reserve(examples.size());
  for (const Example& ex : examples) {
    out.push_back(static_cast<int>(std::llround(ex.label)));
  }
  return out;
}

}  // namespace

FinetuneResult finetune(const EncoderParams& pretrained,
                        const ModelConfig& config, const TaskSpec& task,
                        const FinetuneConfig& fcfg, Aggregation aggregation,
                        std::uint64_t seed) {
  config.validate();
  task.validate();
  check_finetune_config(fcfg);
  check_aggregation_fit(aggregation, config.k);
  if (task.train.empty()) {
    throw ConfigError("finetune: training set is empty");
  }

  const int d = config.d_model;
  const int n_out =
      task.kind == TaskKind::classification ? task.n_classes : 1;

  FinetunedModel model;
  model.config = config;
  model.encoder = pretrained.clone();
  model.aggregation = aggregation;
  model.agg_w = stack_heads(model.encoder, config.k, d);
  model.kind = task.kind;
  model.n_classes = n_out;

  const Rng root(seed);
  Rng init_rng = root.substream("finetune/init");
  model.cls_w = Tensor::randn({d, n_out}, init_rng, 0.02);
  model.cls_b = Tensor::zeros({n_out});

  optim::AdamConfig acfg;
  acfg.lr = fcfg.lr;
  acfg.warmup_steps = optim::warmup_steps_for(
      fcfg.warmup_ratio, static_cast<long long>(std::max(fcfg.steps, 1)));
  acfg.clip_norm = 1.0;
  optim::Adam adam(acfg);

  FinetuneResult result;
  const double base_metric = evaluate_metric(model, task);
  result.history.push_back({0, base_metric});
  result.best_metric = base_metric;
  result.best_step = 0;
  FinetunedModel best = model.clone();

  model.set_requires_grad(true);
  const Rng batch_root = root.substream("finetune/batch");
  const Rng dropout_root = root.substream("finetune/dropout");

  const std::size_t n_train = task.train.size();
  const std::size_t take = std::min<std::size_t>(
      static_cast<std::size_t>(fcfg.batch_size), n_train);
  int stall = 0;
  for (int step = 1; step <= fcfg.steps; ++step) {
    Rng draw = batch_root.substream(static_cast<std::uint64_t>(step));
    std::vector<std::size_t> order(n_train);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = 0; i < take; ++i) {
      const std::size_t j =
          i + static_cast<std::size_t>(draw.below(n_train - i));
      std::swap(order[i], order[j]);
    }
    std::vector<Example> sampled;
    sampled.reserve(take);
    for (std::size_t i = 0; i < take; ++i) {
      sampled.push_back(task.train[order[i]]);
    }

    const encoder::TokenBatch batch =
        make_task_batch(sampled, 0, sampled.size(), config);
    Graph graph;
    Rng dropout = dropout_root.substream(static_cast<std::uint64_t>(step));
    const TaskForward tf = task_forward(model, batch, &graph, &dropout);

    Tensor loss;
    if (task.kind == TaskKind::classification) {
      loss = softmax_cross_entropy(tf.logits, class_labels(sampled), &graph);
    } else {
      std::vector<double> targets;
      targets.reserve(sampled.size());
      for (const Example& ex : sampled) targets.push_back(ex.label);
      const Tensor gold =
          Tensor::from({static_cast<int>(sampled.size()), 1}, targets);
      const Tensor diff = sub(tf.logits, gold, &graph);
      loss = reduce_mean(mul(diff, diff, &graph), &graph);
    }
    if (!std::isfinite(loss.value())) {
      throw NumericError("finetune: non-finite task loss at step " +
                         std::to_string(step));
    }
    graph.backward(loss);
    const auto named = model.named_params();
    optim::clip_gradients(named, acfg.clip_norm);
    adam.step(named);
    model.zero_grad();

    if (step % fcfg.eval_every == 0 || step == fcfg.steps) {
      const double metric = evaluate_metric(model, task);
      result.history.push_back({step, metric});
      if (metric > result.best_metric) {
        result.best_metric = metric;
        result.best_step = step;
        best = model.clone();
        stall = 0;
      } else {
        ++stall;
        if (stall >= fcfg.patience) {
          break;
        }
      }
    }
  }

  result.model = std::move(best);
  return result;
}

// ---------------------------------------------------------------------------
// Prediction

namespace {

constexpr std::size_t kPredictBatch = 64;

std::vector<PredictionRecord> predict_impl(const FinetunedModel& model,
                                           const std::vector<Example>& examples,
                                           Rng* dropout) {
  if (examples.empty()) {
    throw InputError("predict: no examples given");
  }
  const int k = model.config.k;
  const int d = model.config.d_model;
  std::vector<PredictionRecord> out;
  out.reserve(examples.size());
  for (std::size_t begin = 0; begin < examples.size();
       begin += kPredictBatch) {
    const std::size_t count =
        std::min(kPredictBatch, examples.size() - begin);
    const encoder::TokenBatch batch =
        make_task_batch(examples, begin, count, model.config);
    const TaskForward tf = task_forward(model, batch, nullptr, dropout);
    const Tensor probs = model.kind == TaskKind::classification
                             ? softmax_lastaxis(tf.logits)
                             : tf.logits;
    const int n_out = probs.extent(1);
    for (std::size_t r = 0; r < count; ++r) {
      PredictionRecord rec;
      rec.id = static_cast<int>(begin + r);
      rec.gold = examples[begin + r].label;
      const std::size_t p_base = r * static_cast<std::size_t>(n_out);
      rec.probs.assign(probs.data->begin() + static_cast<std::ptrdiff_t>(p_base),
                       probs.data->begin() +
                           static_cast<std::ptrdiff_t>(p_base + n_out));
      rec.cls_emb.resize(static_cast<std::size_t>(k));
      for (int f = 0; f < k; ++f) {
        const std::size_t t_base =
            (r * static_cast<std::size_t>(k) + static_cast<std::size_t>(f)) *
            static_cast<std::size_t>(d);
        rec.cls_emb[static_cast<std::size_t>(f)].assign(
            tf.transforms.data->begin() + static_cast<std::ptrdiff_t>(t_base),
            tf.transforms.data->begin() +
                static_cast<std::ptrdiff_t>(t_base + d));
      }
      out.push_back(std::move(rec));
    }
  }
  return out;
}

}  // namespace

std::vector<PredictionRecord> predict(const FinetunedModel& model,
                                      const std::vector<Example>& examples) {
  return predict_impl(model, examples, nullptr);
}

std::vector<PredictionRecord> predict_stochastic(
    const FinetunedModel& model, const std::vector<Example>& examples,
    const Rng& dropout_rng) {
  Rng stream = dropout_rng;
  return predict_impl(model, examples, &stream);
}

std::vector<PredictionRecord> dropout_ensemble_predict(
    const FinetunedModel& model, const std::vector<Example>& examples,
    int n_seeds, const Rng& base) {
  if (n_seeds < 1) {
    throw ConfigError("dropout_ensemble_predict: n_seeds must be >= 1");
  }
  std::vector<PredictionRecord> out = predict(model, examples);
  for (auto& rec : out) {
    std::fill(rec.probs.begin(), rec.probs.end(), 0.0);
  }
  for (int i = 1; i <= n_seeds; ++i) {
    const std::vector<PredictionRecord> pass = predict_stochastic(
        model, examples, base.substream(static_cast<std::uint64_t>(i)));
    for (std::size_t r = 0; r < out.size(); ++r) {
      for (std::size_t c = 0; c < out[r].probs.size(); ++c) {
        out[r].probs[c] += pass[r].probs[c];
      }
    }
  }
  for (auto& rec : out) {
    for (double& p : rec.probs) {
      p /= static_cast<double>(n_seeds);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-facet probabilities

namespace {

// Per-facet transform outputs for a set of examples as flat doubles
// [n, K, D], computed without a tape.
std::vector<double> transforms_flat(const FinetunedModel& model,
                                    const std::vector<Example>& examples) {
  const std::size_t k = static_cast<std::size_t>(model.config.k);
  const std::size_t d = static_cast<std::size_t>(model.config.d_model);
  std::vector<double> out;
  out.reserve(examples.size() * k * d);
  for (std::size_t begin = 0; begin < examples.size();
       begin += kPredictBatch) {
    const std::size_t count =
        std::min(kPredictBatch, examples.size() - begin);
    const encoder::TokenBatch batch =
        make_task_batch(examples, begin, count, model.config);
    const TaskForward tf = task_forward(model, batch);
    out.insert(out.end(), tf.transforms.data->begin(),
               tf.transforms.data->end());
  }
  return out;
}

std::vector<double> stable_softmax(const std::vector<double>& logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

}  // namespace

std::vector<PerClsProbs> per_cls_probabilities(
    const FinetunedModel& model, const std::vector<Example>& train,
    const std::vector<Example>& eval) {
  if (model.kind != TaskKind::classification) {
    throw ConfigError("per_cls_probabilities: classification models only");
  }
  if (train.empty() || eval.empty()) {
    throw InputError("per_cls_probabilities: train and eval sets must be "
                     "non-empty");
  }
  const std::size_t k = static_cast<std::size_t>(model.config.k);
  const std::size_t d = static_cast<std::size_t>(model.config.d_model);
  const std::size_t c = static_cast<std::size_t>(model.n_classes);

  // Class prototypes: mean facet transform per (class, facet).
  const std::vector<double> train_t = transforms_flat(model, train);
  std::vector<double> proto(c * k * d, 0.0);
  std::vector<std::size_t> counts(c, 0);
  for (std::size_t i = 0; i < train.size(); ++i) {
    const double label = train[i].label;
    const std::size_t l = static_cast<std::size_t>(std::llround(label));
    if (label != std::floor(label) || l >= c) {
      throw InputError("per_cls_probabilities: train label " +
                       std::to_string(label) + " is not a class in [0, " +
                       std::to_string(c) + ")");
    }
    ++counts[l];
    const std::size_t src = i * k * d;
    const std::size_t dst = l * k * d;
    for (std::size_t j = 0; j < k * d; ++j) {
      proto[dst + j] += train_t[src + j];
    }
  }
  for (std::size_t l = 0; l < c; ++l) {
    if (counts[l] == 0) {
      throw EstimationError("per_cls_probabilities: class " +
                            std::to_string(l) +
                            " has no training examples to estimate a "
                            "prototype from");
    }
    const double inv = 1.0 / static_cast<double>(counts[l]);
    for (std::size_t j = 0; j < k * d; ++j) {
      proto[l * k * d + j] *= inv;
    }
  }

  const std::vector<double> eval_t = transforms_flat(model, eval);
  std::vector<PerClsProbs> out;
  out.reserve(eval.size());
  for (std::size_t i = 0; i < eval.size(); ++i) {
    PerClsProbs rec;
    rec.probs.resize(k);
    for (std::size_t f = 0; f < k; ++f) {
      std::vector<double> logits(c, 0.0);
      const std::size_t t_base = (i * k + f) * d;
      for (std::size_t l = 0; l < c; ++l) {
        const std::size_t q_base = (l * k + f) * d;
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          dot += proto[q_base + j] * eval_t[t_base + j];
        }
        logits[l] = dot;
      }
      rec.probs[f] = stable_softmax(logits);
    }
    double unc = 0.0;
    for (std::size_t l = 0; l < c; ++l) {
      double mean = 0.0;
      for (std::size_t f = 0; f < k; ++f) mean += rec.probs[f][l];
      mean /= static_cast<double>(k);
      double var = 0.0;
      for (std::size_t f = 0; f < k; ++f) {
        const double diff = rec.probs[f][l] - mean;
        var += diff * diff;
      }
      unc += var / static_cast<double>(k);
    }
    rec.uncertainty = unc / static_cast<double>(c);
    out.push_back(std::move(rec));
  }
  return out;
}

void attach_per_cls(std::vector<PredictionRecord>& records,
                    const std::vector<PerClsProbs>& per_cls) {
  if (records.size() != per_cls.size()) {
    throw ShapeError("attach_per_cls: " + std::to_string(records.size()) +
                     " records vs " + std::to_string(per_cls.size()) +
                     " per-facet results");
  }
  for (std::size_t i = 0; i < records.size(); ++i) {
    records[i].cls_probs = per_cls[i].probs;
    records[i].uncertainty = per_cls[i].uncertainty;
  }
}

// ---------------------------------------------------------------------------
// Weight averaging

EncoderParams swa_average(const std::vector<EncoderParams>& models) {
  if (models.empty()) {
    throw ConfigError("swa_average: no models given");
  }
  EncoderParams avg = models[0].clone();
  const auto names = avg.named_params();
  for (std::size_t m = 1; m < models.size(); ++m) {
    const auto other = models[m].named_params();
    if (other.size() != names.size()) {
      throw ShapeError("swa_average: model " + std::to_string(m) +
                       " has a different parameter list");
    }
    for (std::size_t p = 0; p < names.size(); ++p) {
      if (other[p].first != names[p].first ||
          other[p].second->shape != names[p].second->shape) {
        throw ShapeError("swa_average: parameter '" + other[p].first +
                         "' of model " + std::to_string(m) +
                         " does not match '" + names[p].first + "' " +
                         names[p].second->shape_str());
      }
      std::vector<double>& dst = *names[p].second->data;
      const std::vector<double>& src = *other[p].second->data;
      for (std::size_t i = 0; i < dst.size(); ++i) {
        dst[i] += src[i];
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(models.size());
  for (const auto& [name, t] : names) {
    (void)name;
    for (double& v : *t->data) {
      v *= inv;
    }
  }
  return avg;
}

}  // namespace mcls::finetune
