#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "oacnet/tensor.hpp"

namespace oacnet {

struct AdamOptions {
  double learning_rate = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// ADAM with bias correction. Moments are stored positionally, so step() must
/// always receive the same parameter list in the same order.
class Adam {
 public:
  explicit Adam(AdamOptions options = {}) : options_(options) {}

  const AdamOptions& options() const { return options_; }
  std::uint64_t step_count() const { return step_; }

  void step(const std::vector<Parameter*>& params) {
    if (first_.empty()) {
      for (const Parameter* p : params) {
        first_.emplace_back(p->value.shape());
        second_.emplace_back(p->value.shape());
      }
    }
    if (first_.size() != params.size()) throw ShapeError("adam: parameter list changed between steps");
    ++step_;
    const double t = static_cast<double>(step_);
    const double c1 = 1.0 - std::pow(options_.beta1, t);
    const double c2 = 1.0 - std::pow(options_.beta2, t);
    const double b1 = options_.beta1, b2 = options_.beta2, lr = options_.learning_rate, eps = options_.epsilon;
    for (std::size_t k = 0; k < params.size(); ++k) {
      Parameter& p = *params[k];
      p.value.require_same_shape(first_[k], "adam moments");
      double* m = first_[k].data().data();
      double* v = second_[k].data().data();
      double* w = p.value.data().data();
      double* g = p.grad.data().data();
      const std::size_t size = p.value.size();
      for (std::size_t i = 0; i < size; ++i) {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        const double m_hat = m[i] / c1;
        const double v_hat = v[i] / c2;
        w[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
        g[i] = 0.0;
      }
    }
  }

 private:
  AdamOptions options_;
  std::uint64_t step_ = 0;
  std::vector<Tensor> first_;
  std::vector<Tensor> second_;
};

}  // namespace oacnet
