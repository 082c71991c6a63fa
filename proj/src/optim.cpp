#include "corgcn/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace corgcn {

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  if (cfg_.lr <= 0.0) throw std::invalid_argument("adam: lr must be positive");
  for (const auto& p : params_) {
    if (!p.defined() || !p.requires_grad()) {
      throw std::invalid_argument("adam: every registered parameter needs a gradient buffer");
    }
    first_moment_.emplace_back(p.size(), 0.0);
    second_moment_.emplace_back(p.size(), 0.0);
  }
}

void Adam::step() {
  ++step_count_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
  for (std::size_t pi = 0; pi < params_.size(); ++pi) {
    auto values = params_[pi].raw();
    auto grads = params_[pi].grad_raw();
    auto& m = first_moment_[pi];
    auto& v = second_moment_[pi];
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = grads[i];
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      values[i] -= cfg_.lr * m_hat / (std::sqrt(v_hat) + cfg_.epsilon);
    }
    params_[pi].zero_grad();
  }
}

}  // namespace corgcn
