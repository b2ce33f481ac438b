#pragma once

// Adam with per-group learning rates and L2 weight decay folded into the
// gradient.

#include <cmath>
#include <string>
#include <vector>

#include "tqn/nn.hpp"
#include "tqn/tensor.hpp"

namespace tqn {

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

class Adam {
 public:
  struct Group {
    std::vector<Tensor> params;
    double lr = 1e-3;
  };

  explicit Adam(AdamSettings settings = {}) : settings_(settings) {}

  void add_group(std::vector<Tensor> params, double lr) {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("adam: learning rate must be positive");
    for (const auto& p : params) {
      first_.emplace_back(p.size(), 0.0);
      second_.emplace_back(p.size(), 0.0);
    }
    groups_.push_back({std::move(params), lr});
  }

  const std::vector<Group>& groups() const { return groups_; }
  std::vector<Group>& groups() { return groups_; }
  std::size_t steps() const { return steps_; }

  // Applies one update from the accumulated grads. Parameters that received
  // no gradient this step are left untouched, moments included.
  void step() {
    ++steps_;
    const double c1 = 1.0 - std::pow(settings_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(settings_.beta2, static_cast<double>(steps_));
    std::size_t slot = 0;
    for (auto& g : groups_) {
      for (auto& p : g.params) {
        if (!p.has_grad()) {
          ++slot;
          continue;
        }
        auto values = p.mutable_values();
        const auto grad = p.grad();
        auto& m = first_[slot];
        auto& v = second_[slot];
        for (std::size_t i = 0; i < values.size(); ++i) {
          double gi = grad[i];
          gi += settings_.weight_decay * values[i];
          m[i] = settings_.beta1 * m[i] + (1.0 - settings_.beta1) * gi;
          v[i] = settings_.beta2 * v[i] + (1.0 - settings_.beta2) * gi * gi;
          values[i] -= g.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + settings_.eps);
        }
        require_finite(values, "adam");
        ++slot;
      }
    }
  }

  void zero_grad() {
    for (auto& g : groups_) {
      for (auto& p : g.params) p.zero_grad();
    }
  }

  // Moment buffers in parameter registration order, for checkpoints.
  std::vector<std::vector<double>>& first_moments() { return first_; }
  std::vector<std::vector<double>>& second_moments() { return second_; }
  const std::vector<std::vector<double>>& first_moments() const { return first_; }
  const std::vector<std::vector<double>>& second_moments() const { return second_; }
  void set_steps(std::size_t s) { steps_ = s; }

 private:
  AdamSettings settings_;
  std::vector<Group> groups_;
  std::vector<std::vector<double>> first_, second_;
  std::size_t steps_ = 0;
};

}  // namespace tqn
