#pragma once

#include <cstdint>
#include <vector>

#include "corgcn/tensor.hpp"

namespace corgcn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Bias-corrected Adam over a fixed set of parameters. step() consumes the
// accumulated grads and zeroes them afterwards.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig cfg = {});

  void step();

  const AdamConfig& config() const { return cfg_; }
  std::int64_t step_count() const { return step_count_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> first_moment_;
  std::vector<std::vector<double>> second_moment_;
  std::int64_t step_count_ = 0;
  AdamConfig cfg_;
};

}  // namespace corgcn
