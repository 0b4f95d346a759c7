#pragma once

// Adam with bias correction, linear learning-rate warmup, and global
// gradient-norm clipping.  Shared by the pretraining and fine-tuning loops.

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mcls/tensor.hpp"

namespace mcls::optim {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long long warmup_steps = 1;  // linear ramp over this many steps, then flat
  double clip_norm = 1.0;      // <= 0 disables clipping
};

// round(ratio * total_steps), at least 1.
long long warmup_steps_for(double ratio, long long total_steps);

using NamedParams = std::vector<std::pair<std::string, Tensor*>>;

// L2 norm over the concatenation of every present gradient.
double global_grad_norm(const NamedParams& params);

// Scales gradients in place so their global norm is at most max_norm;
// returns the pre-clip norm.  max_norm <= 0 leaves gradients untouched.
double clip_gradients(const NamedParams& params, double max_norm);

class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig config) : config_(config) {}

  // One update over every parameter that has a gradient; first and second
  // moments are keyed by parameter name.  Returns the learning rate used.
  double step(const NamedParams& params);

  long long steps_taken() const { return t_; }
  double lr_at(long long t) const;  // t counts from 1
  const AdamConfig& config() const { return config_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };

  AdamConfig config_;
  long long t_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace mcls::optim
