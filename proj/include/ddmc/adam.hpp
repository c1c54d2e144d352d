#pragma once

#include <cmath>
#include <cstdint>

#include "ddmc/params.hpp"

namespace ddmc {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment buffers for one ParamSet, aligned with its trainable entries.
template <typename T>
class AdamState {
 public:
  AdamState() = default;
  AdamState(const ParamSet<T>& params, AdamConfig cfg) : cfg_(cfg) {
    if (!(cfg.lr > 0)) throw ValueError("adam: learning rate must be positive");
    for (const auto& e : params.entries()) {
      m_.emplace_back(e.var.value().shape());
      v_.emplace_back(e.var.value().shape());
    }
  }

  const AdamConfig& config() const noexcept { return cfg_; }
  std::uint64_t step_count() const noexcept { return step_; }
  /// Changes the step size; moment estimates are kept.
  void set_lr(double lr) {
    if (!(lr > 0)) throw ValueError("adam: learning rate must be positive");
    cfg_.lr = lr;
  }

  /// One bias-corrected Adam update using the gradients held by `params`.
  void step(ParamSet<T>& params) {
    if (!(cfg_.lr > 0)) throw ValueError("adam: learning rate must be positive");
    if (params.size() != m_.size()) throw IntegrityError("adam: state does not match parameter set");
    for (const auto& e : params.entries())
      if (e.trainable && !e.var.has_grad())
        throw ValueError("adam: missing gradient for trainable parameter '" + e.name + "'");
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    auto& entries = params.entries();
    for (std::size_t k = 0; k < entries.size(); ++k) {
      auto& e = entries[k];
      if (!e.trainable) continue;
      auto& w = e.var.mutable_value();
      const auto& g = e.var.grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i];
        const double mi = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        const double vi = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        w[i] -= static_cast<T>(cfg_.lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps));
      }
    }
    params.bump_version();
  }

 private:
  AdamConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  std::uint64_t step_ = 0;
};

}  // namespace ddmc
