#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mcls/rng.hpp"

namespace mcls {

class Graph;

// Dense row-major tensor of 64-bit floats, the sole numeric currency.
// Data and gradient buffers are shared_ptr so views (reshape) and recorded
// backward rules alias the same storage. Invariant: product(shape) equals
// data->size(), and whenever requires_grad is set a grad buffer of the same
// length is allocated.
struct Tensor {
  std::vector<int> shape;
  std::shared_ptr<std::vector<double>> data;
  std::shared_ptr<std::vector<double>> grad;
  bool requires_grad = false;

  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value);
  static Tensor scalar(double value);
  static Tensor from(std::vector<int> shape, std::vector<double> values);
  static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0);
  static Tensor identity(int n);

  std::size_t numel() const;
  int rank() const { return static_cast<int>(shape.size()); }
  int extent(int axis) const;

  double value() const;  // scalar tensors only

  void set_requires_grad(bool on);
  void zero_grad();

  std::string shape_str() const;
};

// Tape of recorded backward rules. Replaying the tape in reverse order is a
// valid reverse topological traversal because rules are appended in forward
// execution order. A graph is confined to one thread; independent graphs may
// run concurrently.
class Graph {
 public:
  void record(std::function<void()> backward_rule) {
    tape_.push_back(std::move(backward_rule));
  }

  // Seeds root's gradient with 1 and replays the tape in reverse. Leaf
  // gradients accumulate; callers zero them between backward passes.
  void backward(const Tensor& root);

  std::size_t size() const { return tape_.size(); }
  void clear() { tape_.clear(); }

 private:
  std::vector<std::function<void()>> tape_;
};

// ---------------------------------------------------------------------------
// Kernel operations. Each op takes an optional Graph*; passing nullptr (or a
// graph when no input requires grad) skips recording and runs inference-only.
// All ops are pure: inputs are never mutated.
// ---------------------------------------------------------------------------

// Elementwise; shapes must match exactly (no broadcasting).
Tensor add(const Tensor& a, const Tensor& b, Graph* g = nullptr);
Tensor sub(const Tensor& a, const Tensor& b, Graph* g = nullptr);
Tensor mul(const Tensor& a, const Tensor& b, Graph* g = nullptr);
Tensor scale(const Tensor& a, double s, Graph* g = nullptr);
Tensor add_scalar(const Tensor& a, double s, Graph* g = nullptr);

// x[..., D] + b[D].
Tensor add_bias(const Tensor& x, const Tensor& bias, Graph* g = nullptr);

// a[m x k] * b[k x n]. Backward: dA = dC * B^T, dB = A^T * dC.
Tensor matmul(const Tensor& a, const Tensor& b, Graph* g = nullptr);
// a[m x k] * b[n x k]^T -> [m x n].
Tensor matmul_t(const Tensor& a, const Tensor& b, Graph* g = nullptr);
// Batched: a[G x m x k] * b[G x k x n] (or b[G x n x k] with trans_b).
Tensor bmm(const Tensor& a, const Tensor& b, bool trans_b = false,
           Graph* g = nullptr);

// Normalizes the last axis to mean 0 / variance 1, then applies gain and
// bias (both of length D).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps, Graph* g = nullptr);

// Mean over rows of -log softmax(logits)[i, target_i]; logits are [N x C].
Tensor softmax_cross_entropy(const Tensor& logits,
                             const std::vector<int>& targets,
                             Graph* g = nullptr);

Tensor softmax_lastaxis(const Tensor& x, Graph* g = nullptr);
Tensor sigmoid(const Tensor& x, Graph* g = nullptr);
Tensor gelu(const Tensor& x, Graph* g = nullptr);  // exact erf form

// Gathers rows of table[V x D] at ids -> [ids.size() x D]. Backward
// scatter-adds into the table's gradient, so the table may be a parameter or
// any interior tensor.
Tensor embedding(const Tensor& table, const std::vector<int>& ids,
                 Graph* g = nullptr);

// Copy of x[N x D] with row indices[i] replaced by values[i]; indices must be
// distinct. Backward routes the replaced rows' gradient to `values` and the
// rest to `x`.
Tensor scatter_rows_replace(const Tensor& x, const std::vector<int>& indices,
                            const Tensor& values, Graph* g = nullptr);

// Scales every last-axis vector to unit L2 norm. A vector with norm below
// `min_norm` raises NumericError; the encoder guarantees non-degenerate
// inputs via layer norm.
Tensor l2_normalize(const Tensor& x, Graph* g = nullptr,
                    double min_norm = 1e-8);

Tensor concat(const std::vector<Tensor>& parts, int axis, Graph* g = nullptr);
Tensor slice_axis(const Tensor& x, int axis, int start, int len,
                  Graph* g = nullptr);
Tensor permute(const Tensor& x, const std::vector<int>& perm,
               Graph* g = nullptr);

// View sharing data and grad buffers; no tape entry needed.
Tensor reshape(const Tensor& x, std::vector<int> new_shape);

Tensor sum_axis(const Tensor& x, int axis, Graph* g = nullptr);
Tensor reduce_sum(const Tensor& x, Graph* g = nullptr);
Tensor reduce_mean(const Tensor& x, Graph* g = nullptr);
// Population variance over all elements.
Tensor reduce_variance(const Tensor& x, Graph* g = nullptr);

// Inverted-dropout: keeps each element with probability 1-p and scales by
// 1/(1-p). The mask is drawn from the caller's stream, so identical streams
// reproduce identical masks. p = 0 is the identity.
Tensor dropout(const Tensor& x, double p, Rng& rng, Graph* g = nullptr);

// Partitions x[M x N] into (M/bm) x (N/bn) blocks and takes the maximum of
// each. Gradient flows only to the argmax entry of each block; ties keep the
// first entry in row-major block order (lowest (i, j)).
Tensor block_max(const Tensor& x, int bm, int bn, Graph* g = nullptr);

}  // namespace mcls
