#pragma once

#include <cstdint>
#include <vector>

#include "spade/tensor.hpp"

namespace spade {

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Bias-corrected Adam. Moment buffers are allocated per parameter at
/// construction and stay shape-congruent with them.
class Adam {
  public:
    Adam(std::vector<Tensor> params, AdamConfig config = {});

    /// Applies one update from the accumulated gradients, then releases them.
    /// Throws if any parameter has no gradient buffer.
    void step();

    void set_learning_rate(double lr) { config_.learning_rate = lr; }
    double learning_rate() const { return config_.learning_rate; }
    std::uint64_t step_count() const { return step_; }
    const std::vector<std::vector<double>>& first_moments() const { return m_; }
    const std::vector<std::vector<double>>& second_moments() const { return v_; }

  private:
    std::vector<Tensor> params_;
    AdamConfig config_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::uint64_t step_ = 0;
};

/// Rescales all gradients so their joint L2 norm is at most max_norm.
/// Returns the norm before rescaling.
double clip_grad_norm(std::vector<Tensor>& params, double max_norm);

}  // namespace spade
