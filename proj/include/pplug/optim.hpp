#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "pplug/transformer.hpp"

namespace pplug {

// Decoupled-weight-decay adaptive-moment optimizer. Parameters and moments
// are rounded to float32 after every step so checkpoints are lossless and
// resumed runs replay bit-exactly.
class AdamW {
 public:
  AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.0)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  void step(const std::vector<ParamView>& params, const std::vector<ParamView>& grads,
            double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      const auto& pv = params[k];
      const auto& gv = grads[k];
      auto& m = m_[pv.name];
      auto& v = v_[pv.name];
      if (m.size() != pv.size) m.assign(pv.size, 0.0);
      if (v.size() != pv.size) v.assign(pv.size, 0.0);
      for (std::size_t i = 0; i < pv.size; ++i) {
        double g = gv.data[i];
        m[i] = round_f32(beta1_ * m[i] + (1.0 - beta1_) * g);
        v[i] = round_f32(beta2_ * v[i] + (1.0 - beta2_) * g * g);
        double mhat = m[i] / bc1;
        double vhat = v[i] / bc2;
        double x = pv.data[i];
        x -= lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * x);
        pv.data[i] = round_f32(x);
      }
    }
  }

  long step_count() const { return t_; }
  void set_step_count(long t) { t_ = t; }
  std::map<std::string, std::vector<double>>& moments_m() { return m_; }
  std::map<std::string, std::vector<double>>& moments_v() { return v_; }

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  long t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

// Scales grads in place so the global L2 norm is at most max_norm.
inline double clip_global_norm(const std::vector<ParamView>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (std::size_t i = 0; i < g.size; ++i) sq += g.data[i] * g.data[i];
  double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    double s = max_norm / norm;
    for (const auto& g : grads)
      for (std::size_t i = 0; i < g.size; ++i) g.data[i] *= s;
  }
  return norm;
}

enum class DecayMode { linear, constant };

// Linear warmup over ceil(warmup_ratio * total) steps, then linear decay to
// zero (or constant). Step is 0-based; the rate applied at step s.
inline double lr_at(long step, long total, double base_lr, double warmup_ratio,
                    DecayMode decay = DecayMode::linear) {
  if (total <= 0) return base_lr;
  long warmup = static_cast<long>(std::ceil(warmup_ratio * static_cast<double>(total)));
  if (warmup > 0 && step < warmup)
    return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (decay == DecayMode::constant) return base_lr;
  if (total == warmup) return base_lr;
  double frac = static_cast<double>(total - 1 - step) / static_cast<double>(total - warmup);
  if (frac < 0.0) frac = 0.0;
  return base_lr * frac;
}

}  // namespace pplug
