#include "mcls/optim.hpp"

#include <algorithm>
#include <cmath>

#include "mcls/errors.hpp"

namespace mcls::optim {

long long warmup_steps_for(double ratio, long long total_steps) {
  if (ratio < 0.0 || total_steps < 0) {
    throw ConfigError("warmup_steps_for: ratio and total_steps must be >= 0");
  }
  return std::max(1LL, std::llround(ratio * static_cast<double>(total_steps)));
}

double global_grad_norm(const NamedParams& params) {
  double sq = 0.0;
  for (const auto& [name, t] : params) {
    if (t == nullptr || !t->grad) continue;
    for (double gi : *t->grad) sq += gi * gi;
  }
  return std::sqrt(sq);
}

double clip_gradients(const NamedParams& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (max_norm <= 0.0 || norm <= max_norm) return norm;
  const double s = max_norm / norm;
  for (const auto& [name, t] : params) {
    if (t == nullptr || !t->grad) continue;
    for (double& gi : *t->grad) gi *= s;
  }
  return norm;
}

double Adam::lr_at(long long t) const {
  const double ramp =
      std::min(1.0, static_cast<double>(t) /
                        static_cast<double>(std::max(1LL, config_.warmup_steps)));
  return config_.lr * ramp;
}

double Adam::step(const NamedParams& params) {
  ++t_;
  const double lr = lr_at(t_);
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (const auto& [name, t] : params) {
    if (t == nullptr || !t->grad) continue;
    Moments& mo = moments_[name];
    const std::size_t n = t->data->size();
    if (mo.m.empty()) {
      mo.m.assign(n, 0.0);
      mo.v.assign(n, 0.0);
    } else if (mo.m.size() != n) {
      throw ShapeError("Adam: stored moments for '" + name +
                       "' do not match the parameter size");
    }
    const std::vector<double>& grad = *t->grad;
    std::vector<double>& value = *t->data;
    for (std::size_t i = 0; i < n; ++i) {
      mo.m[i] = config_.beta1 * mo.m[i] + (1.0 - config_.beta1) * grad[i];
      mo.v[i] = config_.beta2 * mo.v[i] + (1.0 - config_.beta2) * grad[i] * grad[i];
      const double mhat = mo.m[i] / bc1;
      const double vhat = mo.v[i] / bc2;
      value[i] -= lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
  return lr;
}

}  // namespace mcls::optim
