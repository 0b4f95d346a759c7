#include "mcls/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "mcls/errors.hpp"

namespace mcls {

namespace {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

std::size_t product(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (const int e : shape) n *= static_cast<std::size_t>(e);
  return n;
}

void check_positive_extents(const std::vector<int>& shape) {
  for (const int e : shape) {
    if (e <= 0) throw ShapeError("tensor extents must be positive");
  }
}

bool recording(const Graph* g, std::initializer_list<const Tensor*> inputs) {
  if (g == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad) return true;
  }
  return false;
}

Tensor make_output(std::vector<int> shape, bool requires_grad) {
  return Tensor::zeros(std::move(shape), requires_grad);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() +
                     " vs " + b.shape_str());
  }
}

int last_extent(const Tensor& t, const char* op) {
  if (t.rank() < 1) throw ShapeError(std::string(op) + ": rank-0 tensor");
  return t.shape.back();
}

// outer x axis x inner decomposition around one axis.
struct AxisSplit {
  std::size_t outer;
  std::size_t n;
  std::size_t inner;
};

AxisSplit split_at(const Tensor& t, int axis, const char* op) {
  if (axis < 0 || axis >= t.rank()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for " + t.shape_str());
  }
  AxisSplit s{1, static_cast<std::size_t>(t.shape[axis]), 1};
  for (int i = 0; i < axis; ++i) s.outer *= static_cast<std::size_t>(t.shape[i]);
  for (int i = axis + 1; i < t.rank(); ++i) {
    s.inner *= static_cast<std::size_t>(t.shape[i]);
  }
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  check_positive_extents(shape);
  Tensor t;
  t.shape = std::move(shape);
  t.data = std::make_shared<std::vector<double>>(product(t.shape), 0.0);
  if (requires_grad) t.set_requires_grad(true);
  return t;
}

Tensor Tensor::full(std::vector<int> shape, double value) {
  Tensor t = zeros(std::move(shape));
  std::fill(t.data->begin(), t.data->end(), value);
  return t;
}

Tensor Tensor::scalar(double value) { return full({1}, value); }

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values) {
  check_positive_extents(shape);
  if (product(shape) != values.size()) {
    throw ShapeError("Tensor::from: " + std::to_string(values.size()) +
                     " values do not fill shape");
  }
  Tensor t;
  t.shape = std::move(shape);
  t.data = std::make_shared<std::vector<double>>(std::move(values));
  return t;
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double stddev) {
  Tensor t = zeros(std::move(shape));
  for (double& v : *t.data) v = rng.next_normal() * stddev;
  return t;
}

Tensor Tensor::identity(int n) {
  Tensor t = zeros({n, n});
  for (int i = 0; i < n; ++i) (*t.data)[static_cast<std::size_t>(i) * n + i] = 1.0;
  return t;
}

std::size_t Tensor::numel() const { return data ? data->size() : 0; }

int Tensor::extent(int axis) const {
  if (axis < 0 || axis >= rank()) {
    throw ShapeError("extent: axis out of range for " + shape_str());
  }
  return shape[axis];
}

double Tensor::value() const {
  if (numel() != 1) throw ShapeError("value: tensor " + shape_str() + " is not scalar");
  return (*data)[0];
}

void Tensor::set_requires_grad(bool on) {
  requires_grad = on;
  if (on && !grad) {
    grad = std::make_shared<std::vector<double>>(numel(), 0.0);
  }
}

void Tensor::zero_grad() {
  if (grad) std::fill(grad->begin(), grad->end(), 0.0);
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << " x ";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

void Graph::backward(const Tensor& root) {
  if (root.numel() != 1) {
    throw ShapeError("backward: root must be scalar, got " + root.shape_str());
  }
  if (!root.requires_grad || !root.grad) {
    throw ConfigError("backward: root was not recorded on this graph");
  }
  (*root.grad)[0] += 1.0;
  for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b, Graph* g) {
  check_same_shape(a, b, "add");
  const bool rec = recording(g, {&a, &b});
  Tensor out = make_output(a.shape, rec);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] + (*b.data)[i];
  if (rec) {
    g->record([a, b, out]() {
      const std::size_t m = out.numel();
      if (a.requires_grad) {
        for (std::size_t i = 0; i < m; ++i) (*a.grad)[i] += (*out.grad)[i];
      }
      if (b.requires_grad) {
        for (std::size_t i = 0; i < m; ++i) (*b.grad)[i] += (*out.grad)[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b, Graph* g) {
  check_same_shape(a, b, "sub");
  const bool rec = recording(g, {&a, &b});
  Tensor out = make_output(a.shape, rec);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] - (*b.data)[i];
  if (rec) {
    g->record([a, b, out]() {
      const std::size_t m = out.numel();
      if (a.requires_grad) {
        for (std::size_t i = 0; i < m; ++i) (*a.grad)[i] += (*out.grad)[i];
      }
      if (b.requires_grad) {
        for (std::size_t i = 0; i < m; ++i) (*b.grad)[i] -= (*out.grad)[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b, Graph* g) {
  check_same_shape(a, b, "mul");
  const bool rec = recording(g, {&a, &b});
  Tensor out = make_output(a.shape, rec);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * (*b.data)[i];
  if (rec) {
    g->record([a, b, out]() {
      const std::size_t m = out.numel();
      if (a.requires_grad) {
        for (std::size_t i = 0; i < m; ++i) (*a.grad)[i] += (*out.grad)[i] * (*b.data)[i];
      }
      if (b.requires_grad) {
        for (std::size_t i = 0; i < m; ++i) (*b.grad)[i] += (*out.grad)[i] * (*a.data)[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double s, Graph* g) {
  const bool rec = recording(g, {&a});
  Tensor out = make_output(a.shape, rec);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * s;
  if (rec) {
    g->record([a, out, s]() {
      const std::size_t m = out.numel();
      for (std::size_t i = 0; i < m; ++i) (*a.grad)[i] += (*out.grad)[i] * s;
    });
  }
  return out;
}

Tensor add_scalar(const Tensor& a, double s, Graph* g) {
  const bool rec = recording(g, {&a});
  Tensor out = make_output(a.shape, rec);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] + s;
  if (rec) {
    g->record([a, out]() {
      const std::size_t m = out.numel();
      for (std::size_t i = 0; i < m; ++i) (*a.grad)[i] += (*out.grad)[i];
    });
  }
  return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias, Graph* g) {
  const int d = last_extent(x, "add_bias");
  if (bias.rank() != 1 || bias.shape[0] != d) {
    throw ShapeError("add_bias: bias " + bias.shape_str() +
                     " does not match last axis of " + x.shape_str());
  }
  const bool rec = recording(g, {&x, &bias});
  Tensor out = make_output(x.shape, rec);
  const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * static_cast<std::size_t>(d);
    for (int j = 0; j < d; ++j) {
      (*out.data)[base + j] = (*x.data)[base + j] + (*bias.data)[j];
    }
  }
  if (rec) {
    g->record([x, bias, out, d, rows]() {
      if (x.requires_grad) {
        const std::size_t m = out.numel();
        for (std::size_t i = 0; i < m; ++i) (*x.grad)[i] += (*out.grad)[i];
      }
      if (bias.requires_grad) {
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t base = r * static_cast<std::size_t>(d);
          for (int j = 0; j < d; ++j) (*bias.grad)[j] += (*out.grad)[base + j];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products (Eigen-backed)
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, Graph* g) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul: expects rank-2 operands, got " + a.shape_str() +
                     " and " + b.shape_str());
  }
  if (a.shape[1] != b.shape[0]) {
    throw ShapeError("matmul: inner extents differ: " + a.shape_str() + " vs " +
                     b.shape_str());
  }
  const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
  const bool rec = recording(g, {&a, &b});
  Tensor out = make_output({m, n}, rec);
  ConstMapMat ma(a.data->data(), m, k);
  ConstMapMat mb(b.data->data(), k, n);
  MapMat mo(out.data->data(), m, n);
  mo.noalias() = ma * mb;
  if (rec) {
    g->record([a, b, out, m, k, n]() {
      ConstMapMat ma2(a.data->data(), m, k);
      ConstMapMat mb2(b.data->data(), k, n);
      ConstMapMat mdo(out.grad->data(), m, n);
      if (a.requires_grad) {
        MapMat mda(a.grad->data(), m, k);
        mda.noalias() += mdo * mb2.transpose();
      }
      if (b.requires_grad) {
        MapMat mdb(b.grad->data(), k, n);
        mdb.noalias() += ma2.transpose() * mdo;
      }
    });
  }
  return out;
}

Tensor matmul_t(const Tensor& a, const Tensor& b, Graph* g) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul_t: expects rank-2 operands, got " + a.shape_str() +
                     " and " + b.shape_str());
  }
  if (a.shape[1] != b.shape[1]) {
    throw ShapeError("matmul_t: inner extents differ: " + a.shape_str() +
                     " vs " + b.shape_str());
  }
  const int m = a.shape[0], k = a.shape[1], n = b.shape[0];
  const bool rec = recording(g, {&a, &b});
  Tensor out = make_output({m, n}, rec);
  ConstMapMat ma(a.data->data(), m, k);
  ConstMapMat mb(b.data->data(), n, k);
  MapMat mo(out.data->data(), m, n);
  mo.noalias() = ma * mb.transpose();
  if (rec) {
    g->record([a, b, out, m, k, n]() {
      ConstMapMat ma2(a.data->data(), m, k);
      ConstMapMat mb2(b.data->data(), n, k);
      ConstMapMat mdo(out.grad->data(), m, n);
      if (a.requires_grad) {
        MapMat mda(a.grad->data(), m, k);
        mda.noalias() += mdo * mb2;
      }
      if (b.requires_grad) {
        MapMat mdb(b.grad->data(), n, k);
        mdb.noalias() += mdo.transpose() * ma2;
      }
    });
  }
  return out;
}

Tensor bmm(const Tensor& a, const Tensor& b, bool trans_b, Graph* g) {
  if (a.rank() != 3 || b.rank() != 3) {
    throw ShapeError("bmm: expects rank-3 operands, got " + a.shape_str() +
                     " and " + b.shape_str());
  }
  const int batches = a.shape[0], m = a.shape[1], k = a.shape[2];
  const int bk = trans_b ? b.shape[2] : b.shape[1];
  const int n = trans_b ? b.shape[1] : b.shape[2];
  if (b.shape[0] != batches || bk != k) {
    throw ShapeError("bmm: incompatible operands " + a.shape_str() + " vs " +
                     b.shape_str());
  }
  const bool rec = recording(g, {&a, &b});
  Tensor out = make_output({batches, m, n}, rec);
  const std::size_t sa = static_cast<std::size_t>(m) * k;
  const std::size_t sb = static_cast<std::size_t>(k) * n;
  const std::size_t so = static_cast<std::size_t>(m) * n;
  for (int i = 0; i < batches; ++i) {
    ConstMapMat ma(a.data->data() + i * sa, m, k);
    MapMat mo(out.data->data() + i * so, m, n);
    if (trans_b) {
      ConstMapMat mb(b.data->data() + i * sb, n, k);
      mo.noalias() = ma * mb.transpose();
    } else {
      ConstMapMat mb(b.data->data() + i * sb, k, n);
      mo.noalias() = ma * mb;
    }
  }
  if (rec) {
    g->record([a, b, out, trans_b, batches, m, k, n, sa, sb, so]() {
      for (int i = 0; i < batches; ++i) {
        ConstMapMat ma(a.data->data() + i * sa, m, k);
        ConstMapMat mdo(out.grad->data() + i * so, m, n);
        if (trans_b) {
          ConstMapMat mb(b.data->data() + i * sb, n, k);
          if (a.requires_grad) {
            MapMat mda(a.grad->data() + i * sa, m, k);
            mda.noalias() += mdo * mb;
          }
          if (b.requires_grad) {
            MapMat mdb(b.grad->data() + i * sb, n, k);
            mdb.noalias() += mdo.transpose() * ma;
          }
        } else {
          ConstMapMat mb(b.data->data() + i * sb, k, n);
          if (a.requires_grad) {
            MapMat mda(a.grad->data() + i * sa, m, k);
            mda.noalias() += mdo * mb.transpose();
          }
          if (b.requires_grad) {
            MapMat mdb(b.grad->data() + i * sb, k, n);
            mdb.noalias() += ma.transpose() * mdo;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization and activations
// ---------------------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps, Graph* g) {
  const int d = last_extent(x, "layer_norm");
  if (eps <= 0.0) throw ConfigError("layer_norm: eps must be positive");
  if (gain.rank() != 1 || gain.shape[0] != d || bias.rank() != 1 ||
      bias.shape[0] != d) {
    throw ShapeError("layer_norm: gain/bias must be length " + std::to_string(d));
  }
  const bool rec = recording(g, {&x, &gain, &bias});
  Tensor out = make_output(x.shape, rec);
  const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
  // Saved for backward: normalized activations and per-row 1/sigma.
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_sigma = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * static_cast<std::size_t>(d);
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += (*x.data)[base + j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = (*x.data)[base + j] - mean;
      var += c * c;
    }
    var /= d;
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_sigma)[r] = inv;
    for (int j = 0; j < d; ++j) {
      const double h = ((*x.data)[base + j] - mean) * inv;
      (*xhat)[base + j] = h;
      (*out.data)[base + j] = h * (*gain.data)[j] + (*bias.data)[j];
    }
  }
  if (rec) {
    g->record([x, gain, bias, out, xhat, inv_sigma, d, rows]() {
      std::vector<double> h(static_cast<std::size_t>(d));
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * static_cast<std::size_t>(d);
        double mean_h = 0.0, mean_hx = 0.0;
        for (int j = 0; j < d; ++j) {
          const double gy = (*out.grad)[base + j];
          h[j] = gy * (*gain.data)[j];
          mean_h += h[j];
          mean_hx += h[j] * (*xhat)[base + j];
          if (gain.requires_grad) (*gain.grad)[j] += gy * (*xhat)[base + j];
          if (bias.requires_grad) (*bias.grad)[j] += gy;
        }
        mean_h /= d;
        mean_hx /= d;
        if (x.requires_grad) {
          const double inv = (*inv_sigma)[r];
          for (int j = 0; j < d; ++j) {
            (*x.grad)[base + j] +=
                inv * (h[j] - mean_h - (*xhat)[base + j] * mean_hx);
          }
        }
      }
    });
  }
  return out;
}

Tensor softmax_cross_entropy(const Tensor& logits,
                             const std::vector<int>& targets, Graph* g) {
  if (logits.rank() != 2) {
    throw ShapeError("softmax_cross_entropy: logits must be rank 2, got " +
                     logits.shape_str());
  }
  const int n = logits.shape[0], c = logits.shape[1];
  if (static_cast<int>(targets.size()) != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(n) + " rows");
  }
  for (int i = 0; i < n; ++i) {
    if (targets[i] < 0 || targets[i] >= c) {
      throw IndexError("softmax_cross_entropy: target " +
                       std::to_string(targets[i]) + " out of range [0, " +
                       std::to_string(c) + ") at row " + std::to_string(i));
    }
  }
  const bool rec = recording(g, {&logits});
  // Stable log-sum-exp: exponent arguments are <= 0, so probs stay in [0, 1]
  // and the loss is finite for any finite logits.
  auto probs = std::make_shared<std::vector<double>>(logits.numel());
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    const std::size_t base = static_cast<std::size_t>(i) * c;
    double mx = (*logits.data)[base];
    for (int j = 1; j < c; ++j) mx = std::max(mx, (*logits.data)[base + j]);
    double sum = 0.0;
    for (int j = 0; j < c; ++j) {
      const double e = std::exp((*logits.data)[base + j] - mx);
      (*probs)[base + j] = e;
      sum += e;
    }
    for (int j = 0; j < c; ++j) (*probs)[base + j] /= sum;
    loss += mx + std::log(sum) - (*logits.data)[base + targets[i]];
  }
  loss /= n;
  Tensor out = make_output({1}, rec);
  (*out.data)[0] = loss;
  if (rec) {
    g->record([logits, out, probs, targets, n, c]() {
      const double go = (*out.grad)[0] / n;
      for (int i = 0; i < n; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * c;
        for (int j = 0; j < c; ++j) {
          const double onehot = (j == targets[i]) ? 1.0 : 0.0;
          (*logits.grad)[base + j] += go * ((*probs)[base + j] - onehot);
        }
      }
    });
  }
  return out;
}

Tensor softmax_lastaxis(const Tensor& x, Graph* g) {
  const int d = last_extent(x, "softmax_lastaxis");
  const bool rec = recording(g, {&x});
  Tensor out = make_output(x.shape, rec);
  const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * static_cast<std::size_t>(d);
    double mx = (*x.data)[base];
    for (int j = 1; j < d; ++j) mx = std::max(mx, (*x.data)[base + j]);
    double sum = 0.0;
    for (int j = 0; j < d; ++j) {
      const double e = std::exp((*x.data)[base + j] - mx);
      (*out.data)[base + j] = e;
      sum += e;
    }
    for (int j = 0; j < d; ++j) (*out.data)[base + j] /= sum;
  }
  if (rec) {
    g->record([x, out, d, rows]() {
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * static_cast<std::size_t>(d);
        double dot = 0.0;
        for (int j = 0; j < d; ++j) {
          dot += (*out.grad)[base + j] * (*out.data)[base + j];
        }
        for (int j = 0; j < d; ++j) {
          (*x.grad)[base + j] +=
              (*out.data)[base + j] * ((*out.grad)[base + j] - dot);
        }
      }
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& x, Graph* g) {
  const bool rec = recording(g, {&x});
  Tensor out = make_output(x.shape, rec);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const double v = (*x.data)[i];
    // Split by sign keeps exp arguments <= 0; output in (0, 1).
    (*out.data)[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                              : std::exp(v) / (1.0 + std::exp(v));
  }
  if (rec) {
    g->record([x, out]() {
      const std::size_t m = out.numel();
      for (std::size_t i = 0; i < m; ++i) {
        const double s = (*out.data)[i];
        (*x.grad)[i] += (*out.grad)[i] * s * (1.0 - s);
      }
    });
  }
  return out;
}

Tensor gelu(const Tensor& x, Graph* g) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  const bool rec = recording(g, {&x});
  Tensor out = make_output(x.shape, rec);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const double v = (*x.data)[i];
    (*out.data)[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  }
  if (rec) {
    g->record([x, out]() {
      const std::size_t m = out.numel();
      for (std::size_t i = 0; i < m; ++i) {
        const double v = (*x.data)[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
        (*x.grad)[i] += (*out.grad)[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gather / scatter
// ---------------------------------------------------------------------------

Tensor embedding(const Tensor& table, const std::vector<int>& ids, Graph* g) {
  if (table.rank() != 2) {
    throw ShapeError("embedding: table must be rank 2, got " + table.shape_str());
  }
  const int v = table.shape[0], d = table.shape[1];
  for (const int id : ids) {
    if (id < 0 || id >= v) {
      throw IndexError("embedding: id " + std::to_string(id) +
                       " out of range [0, " + std::to_string(v) + ")");
    }
  }
  const int n = static_cast<int>(ids.size());
  if (n == 0) throw ShapeError("embedding: empty id list");
  const bool rec = recording(g, {&table});
  Tensor out = make_output({n, d}, rec);
  for (int i = 0; i < n; ++i) {
    const std::size_t src = static_cast<std::size_t>(ids[i]) * d;
    const std::size_t dst = static_cast<std::size_t>(i) * d;
    for (int j = 0; j < d; ++j) (*out.data)[dst + j] = (*table.data)[src + j];
  }
  if (rec) {
    g->record([table, out, ids, n, d]() {
      for (int i = 0; i < n; ++i) {
        const std::size_t src = static_cast<std::size_t>(i) * d;
        const std::size_t dst = static_cast<std::size_t>(ids[i]) * d;
        for (int j = 0; j < d; ++j) (*table.grad)[dst + j] += (*out.grad)[src + j];
      }
    });
  }
  return out;
}

Tensor scatter_rows_replace(const Tensor& x, const std::vector<int>& indices,
                            const Tensor& values, Graph* g) {
  if (x.rank() != 2 || values.rank() != 2 || x.shape[1] != values.shape[1]) {
    throw ShapeError("scatter_rows_replace: incompatible " + x.shape_str() +
                     " and " + values.shape_str());
  }
  if (static_cast<int>(indices.size()) != values.shape[0]) {
    throw ShapeError("scatter_rows_replace: index count does not match values");
  }
  std::unordered_set<int> seen;
  for (const int idx : indices) {
    if (idx < 0 || idx >= x.shape[0]) {
      throw IndexError("scatter_rows_replace: row " + std::to_string(idx) +
                       " out of range");
    }
    if (!seen.insert(idx).second) {
      throw IndexError("scatter_rows_replace: duplicate row " + std::to_string(idx));
    }
  }
  const int d = x.shape[1];
  const bool rec = recording(g, {&x, &values});
  Tensor out = make_output(x.shape, rec);
  *out.data = *x.data;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t dst = static_cast<std::size_t>(indices[i]) * d;
    const std::size_t src = i * static_cast<std::size_t>(d);
    for (int j = 0; j < d; ++j) (*out.data)[dst + j] = (*values.data)[src + j];
  }
  if (rec) {
    g->record([x, values, out, indices, d]() {
      if (values.requires_grad) {
        for (std::size_t i = 0; i < indices.size(); ++i) {
          const std::size_t src = static_cast<std::size_t>(indices[i]) * d;
          const std::size_t dst = i * static_cast<std::size_t>(d);
          for (int j = 0; j < d; ++j) (*values.grad)[dst + j] += (*out.grad)[src + j];
        }
      }
      if (x.requires_grad) {
        std::vector<bool> replaced(static_cast<std::size_t>(x.shape[0]), false);
        for (const int idx : indices) replaced[static_cast<std::size_t>(idx)] = true;
        for (int r = 0; r < x.shape[0]; ++r) {
          if (replaced[static_cast<std::size_t>(r)]) continue;
          const std::size_t base = static_cast<std::size_t>(r) * d;
          for (int j = 0; j < d; ++j) (*x.grad)[base + j] += (*out.grad)[base + j];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Norms, structure, reductions
// ---------------------------------------------------------------------------

Tensor l2_normalize(const Tensor& x, Graph* g, double min_norm) {
  const int d = last_extent(x, "l2_normalize");
  const bool rec = recording(g, {&x});
  Tensor out = make_output(x.shape, rec);
  const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
  auto inv_norm = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * static_cast<std::size_t>(d);
    double sq = 0.0;
    for (int j = 0; j < d; ++j) sq += (*x.data)[base + j] * (*x.data)[base + j];
    const double norm = std::sqrt(sq);
    if (!(norm >= min_norm)) {
      throw NumericError("l2_normalize: degenerate norm " + std::to_string(norm) +
                         " at row " + std::to_string(r));
    }
    const double inv = 1.0 / norm;
    (*inv_norm)[r] = inv;
    for (int j = 0; j < d; ++j) (*out.data)[base + j] = (*x.data)[base + j] * inv;
  }
  if (rec) {
    g->record([x, out, inv_norm, d, rows]() {
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * static_cast<std::size_t>(d);
        double dot = 0.0;
        for (int j = 0; j < d; ++j) dot += (*out.grad)[base + j] * (*out.data)[base + j];
        const double inv = (*inv_norm)[r];
        for (int j = 0; j < d; ++j) {
          (*x.grad)[base + j] +=
              inv * ((*out.grad)[base + j] - (*out.data)[base + j] * dot);
        }
      }
    });
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis, Graph* g) {
  if (parts.empty()) throw ShapeError("concat: no parts");
  const Tensor& first = parts.front();
  if (axis < 0 || axis >= first.rank()) {
    throw ShapeError("concat: axis out of range");
  }
  int total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != first.rank()) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < first.rank(); ++i) {
      if (i != axis && p.shape[i] != first.shape[i]) {
        throw ShapeError("concat: shape mismatch " + p.shape_str() + " vs " +
                         first.shape_str());
      }
    }
    total += p.shape[axis];
  }
  bool rec = false;
  if (g != nullptr) {
    for (const Tensor& p : parts) rec = rec || p.requires_grad;
  }
  std::vector<int> out_shape = first.shape;
  out_shape[axis] = total;
  Tensor out = make_output(out_shape, rec);
  const AxisSplit so = split_at(out, axis, "concat");
  std::size_t offset = 0;  // running start within the axis
  for (const Tensor& p : parts) {
    const AxisSplit sp = split_at(p, axis, "concat");
    for (std::size_t o = 0; o < sp.outer; ++o) {
      const std::size_t src = o * sp.n * sp.inner;
      const std::size_t dst = (o * so.n + offset) * so.inner;
      std::copy_n(p.data->data() + src, sp.n * sp.inner, out.data->data() + dst);
    }
    offset += sp.n;
  }
  if (rec) {
    g->record([parts, out, axis]() {
      const AxisSplit so2 = split_at(out, axis, "concat");
      std::size_t off = 0;
      for (const Tensor& p : parts) {
        const AxisSplit sp = split_at(p, axis, "concat");
        if (p.requires_grad) {
          for (std::size_t o = 0; o < sp.outer; ++o) {
            const std::size_t dst = o * sp.n * sp.inner;
            const std::size_t src = (o * so2.n + off) * so2.inner;
            for (std::size_t i = 0; i < sp.n * sp.inner; ++i) {
              (*p.grad)[dst + i] += (*out.grad)[src + i];
            }
          }
        }
        off += sp.n;
      }
    });
  }
  return out;
}

Tensor slice_axis(const Tensor& x, int axis, int start, int len, Graph* g) {
  const AxisSplit s = split_at(x, axis, "slice_axis");
  if (start < 0 || len <= 0 || start + len > static_cast<int>(s.n)) {
    throw ShapeError("slice_axis: range [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") invalid for axis extent " +
                     std::to_string(s.n));
  }
  const bool rec = recording(g, {&x});
  std::vector<int> out_shape = x.shape;
  out_shape[axis] = len;
  Tensor out = make_output(out_shape, rec);
  for (std::size_t o = 0; o < s.outer; ++o) {
    const std::size_t src = (o * s.n + start) * s.inner;
    const std::size_t dst = o * static_cast<std::size_t>(len) * s.inner;
    std::copy_n(x.data->data() + src, static_cast<std::size_t>(len) * s.inner,
                out.data->data() + dst);
  }
  if (rec) {
    g->record([x, out, s, start, len]() {
      for (std::size_t o = 0; o < s.outer; ++o) {
        const std::size_t dst = (o * s.n + start) * s.inner;
        const std::size_t src = o * static_cast<std::size_t>(len) * s.inner;
        for (std::size_t i = 0; i < static_cast<std::size_t>(len) * s.inner; ++i) {
          (*x.grad)[dst + i] += (*out.grad)[src + i];
        }
      }
    });
  }
  return out;
}

namespace {

std::vector<std::size_t> strides_of(const std::vector<int>& shape) {
  std::vector<std::size_t> st(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
    st[i] = st[i + 1] * static_cast<std::size_t>(shape[i + 1]);
  }
  return st;
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<int>& perm, Graph* g) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r) {
    throw ShapeError("permute: perm size does not match rank");
  }
  std::vector<bool> used(static_cast<std::size_t>(r), false);
  for (const int p : perm) {
    if (p < 0 || p >= r || used[static_cast<std::size_t>(p)]) {
      throw ShapeError("permute: invalid permutation");
    }
    used[static_cast<std::size_t>(p)] = true;
  }
  const bool rec = recording(g, {&x});
  std::vector<int> out_shape(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) out_shape[i] = x.shape[perm[i]];
  Tensor out = make_output(out_shape, rec);
  const std::vector<std::size_t> in_strides = strides_of(x.shape);
  const std::vector<std::size_t> out_strides = strides_of(out_shape);
  const std::size_t n = out.numel();
  // Precomputed out-index -> in-index map, shared with the backward closure.
  auto src_of = std::make_shared<std::vector<std::size_t>>(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t rem = i, src = 0;
    for (int a = 0; a < r; ++a) {
      const std::size_t coord = rem / out_strides[a];
      rem -= coord * out_strides[a];
      src += coord * in_strides[perm[a]];
    }
    (*src_of)[i] = src;
  }
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*x.data)[(*src_of)[i]];
  if (rec) {
    g->record([x, out, src_of, n]() {
      for (std::size_t i = 0; i < n; ++i) {
        (*x.grad)[(*src_of)[i]] += (*out.grad)[i];
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, std::vector<int> new_shape) {
  check_positive_extents(new_shape);
  if (product(new_shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + x.shape_str() + " as requested");
  }
  Tensor out = x;  // shares data and grad
  out.shape = std::move(new_shape);
  return out;
}

Tensor sum_axis(const Tensor& x, int axis, Graph* g) {
  if (x.rank() < 2) throw ShapeError("sum_axis: rank must be >= 2");
  const AxisSplit s = split_at(x, axis, "sum_axis");
  const bool rec = recording(g, {&x});
  std::vector<int> out_shape;
  for (int i = 0; i < x.rank(); ++i) {
    if (i != axis) out_shape.push_back(x.shape[i]);
  }
  Tensor out = make_output(out_shape, rec);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < s.n; ++j) {
      const std::size_t src = (o * s.n + j) * s.inner;
      const std::size_t dst = o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) (*out.data)[dst + i] += (*x.data)[src + i];
    }
  }
  if (rec) {
    g->record([x, out, s]() {
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t j = 0; j < s.n; ++j) {
          const std::size_t dst = (o * s.n + j) * s.inner;
          const std::size_t src = o * s.inner;
          for (std::size_t i = 0; i < s.inner; ++i) {
            (*x.grad)[dst + i] += (*out.grad)[src + i];
          }
        }
      }
    });
  }
  return out;
}

Tensor reduce_sum(const Tensor& x, Graph* g) {
  const bool rec = recording(g, {&x});
  Tensor out = make_output({1}, rec);
  double acc = 0.0;
  for (const double v : *x.data) acc += v;
  (*out.data)[0] = acc;
  if (rec) {
    g->record([x, out]() {
      const double go = (*out.grad)[0];
      for (double& gv : *x.grad) gv += go;
    });
  }
  return out;
}

Tensor reduce_mean(const Tensor& x, Graph* g) {
  const bool rec = recording(g, {&x});
  Tensor out = make_output({1}, rec);
  const double n = static_cast<double>(x.numel());
  double acc = 0.0;
  for (const double v : *x.data) acc += v;
  (*out.data)[0] = acc / n;
  if (rec) {
    g->record([x, out, n]() {
      const double go = (*out.grad)[0] / n;
      for (double& gv : *x.grad) gv += go;
    });
  }
  return out;
}

Tensor reduce_variance(const Tensor& x, Graph* g) {
  const bool rec = recording(g, {&x});
  Tensor out = make_output({1}, rec);
  const double n = static_cast<double>(x.numel());
  double mean = 0.0;
  for (const double v : *x.data) mean += v;
  mean /= n;
  double var = 0.0;
  for (const double v : *x.data) var += (v - mean) * (v - mean);
  var /= n;
  (*out.data)[0] = var;
  if (rec) {
    g->record([x, out, mean, n]() {
      const double go = (*out.grad)[0] * 2.0 / n;
      const std::size_t m = x.numel();
      for (std::size_t i = 0; i < m; ++i) {
        (*x.grad)[i] += go * ((*x.data)[i] - mean);
      }
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, double p, Rng& rng, Graph* g) {
  if (p < 0.0 || p >= 1.0) {
    throw ConfigError("dropout: p must be in [0, 1), got " + std::to_string(p));
  }
  if (p == 0.0) return x;
  const bool rec = recording(g, {&x});
  Tensor out = make_output(x.shape, rec);
  const double keep_scale = 1.0 / (1.0 - p);
  auto mask = std::make_shared<std::vector<double>>(x.numel());
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const double m = rng.next_double() < p ? 0.0 : keep_scale;
    (*mask)[i] = m;
    (*out.data)[i] = (*x.data)[i] * m;
  }
  if (rec) {
    g->record([x, out, mask]() {
      const std::size_t m = out.numel();
      for (std::size_t i = 0; i < m; ++i) (*x.grad)[i] += (*out.grad)[i] * (*mask)[i];
    });
  }
  return out;
}

Tensor block_max(const Tensor& x, int bm, int bn, Graph* g) {
  if (x.rank() != 2) throw ShapeError("block_max: expects rank 2, got " + x.shape_str());
  const int rows = x.shape[0], cols = x.shape[1];
  if (bm <= 0 || bn <= 0 || rows % bm != 0 || cols % bn != 0) {
    throw ShapeError("block_max: " + x.shape_str() + " not divisible into " +
                     std::to_string(bm) + " x " + std::to_string(bn) + " blocks");
  }
  const int out_rows = rows / bm, out_cols = cols / bn;
  const bool rec = recording(g, {&x});
  Tensor out = make_output({out_rows, out_cols}, rec);
  auto argmax = std::make_shared<std::vector<std::size_t>>(
      static_cast<std::size_t>(out_rows) * out_cols);
  for (int br = 0; br < out_rows; ++br) {
    for (int bc = 0; bc < out_cols; ++bc) {
      // Strict > keeps the first maximum in row-major block order, i.e. the
      // lowest (i, j) pair on ties.
      double best = -std::numeric_limits<double>::infinity();
      std::size_t best_idx = 0;
      for (int i = 0; i < bm; ++i) {
        const std::size_t row = static_cast<std::size_t>(br) * bm + i;
        for (int j = 0; j < bn; ++j) {
          const std::size_t idx = row * cols + static_cast<std::size_t>(bc) * bn + j;
          if ((*x.data)[idx] > best) {
            best = (*x.data)[idx];
            best_idx = idx;
          }
        }
      }
      const std::size_t o = static_cast<std::size_t>(br) * out_cols + bc;
      (*out.data)[o] = best;
      (*argmax)[o] = best_idx;
    }
  }
  if (rec) {
    g->record([x, out, argmax]() {
      const std::size_t m = out.numel();
      for (std::size_t i = 0; i < m; ++i) (*x.grad)[(*argmax)[i]] += (*out.grad)[i];
    });
  }
  return out;
}

}  // namespace mcls
