#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <string_view>

#include "detailclip/autograd.hpp"
#include "detailclip/config.hpp"

namespace detailclip {

/// Normalisation gains/offsets, biases and the CLIP logit scale are exempt
/// from weight decay.
inline bool decays(std::string_view name) {
  auto ends_with = [&](std::string_view s) {
    return name.size() >= s.size() && name.substr(name.size() - s.size()) == s;
  };
  return !(ends_with(".bias") || ends_with(".gamma") || ends_with(".beta") || ends_with(".logit_scale"));
}

/// Linear warmup, then cosine decay to zero at total_steps.
inline double lr_at(const TrainConfig& cfg, long step) {
  if (step < cfg.warmup_steps) return cfg.lr * static_cast<double>(step + 1) / cfg.warmup_steps;
  const double span = std::max(1, cfg.total_steps - cfg.warmup_steps);
  const double t = std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / span);
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

/// Adam with decoupled weight decay over every array whose name starts with
/// `prefix`. Moments live in two stores keyed by parameter name.
template <class T>
class AdamW {
 public:
  AdamW(double beta1, double beta2, double eps, double weight_decay)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  void step(ParamStore<T>& params, const std::string& prefix, double lr, ParamStore<T>& m, ParamStore<T>& v,
            long t) const {
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t));
    for (const auto& name : params.names()) {
      if (name.rfind(prefix, 0) != 0) continue;
      auto& w = params.value(name);
      if (!m.contains(name)) m.add(name, Mat<T>::Zero(w.rows(), w.cols()));
      if (!v.contains(name)) v.add(name, Mat<T>::Zero(w.rows(), w.cols()));
      auto& mm = m.value(name);
      auto& vv = v.value(name);
      const Mat<T>& g = params.grad(name);
      mm = T(beta1_) * mm + T(1 - beta1_) * g;
      vv = T(beta2_) * vv + T(1 - beta2_) * g.cwiseProduct(g);
      if (decays(name)) w *= T(1.0 - lr * weight_decay_);
      w.array() -= T(lr) * (mm.array() / T(bc1)) / ((vv.array() / T(bc2)).sqrt() + T(eps_));
    }
  }

 private:
  double beta1_;
  double beta2_;
  double eps_;
  double weight_decay_;
};

}  // namespace detailclip
