// Gradient-descent update rules. State is keyed by parameter order, which is
// stable for a given net architecture.
#pragma once

#include "kxr/nn.hpp"
#include "kxr/train_config.hpp"

namespace kxr::nn {

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(const std::vector<Param*>& params, double lr) = 0;
};

class SgdMomentum : public Optimizer {
 public:
  explicit SgdMomentum(double momentum) : mu_(momentum) {
    if (momentum < 0.0 || momentum >= 1.0) throw UsageError("sgd: momentum outside [0,1)");
  }
  void step(const std::vector<Param*>& params, double lr) override {
    ensure_state(params);
    for (size_t i = 0; i < params.size(); ++i) {
      Param& p = *params[i];
      auto& vel = velocity_[i];
      for (size_t j = 0; j < p.value.size(); ++j) {
        vel[j] = static_cast<float>(mu_ * vel[j] - lr * p.grad[j]);
        p.value[j] += vel[j];
      }
    }
  }

 private:
  void ensure_state(const std::vector<Param*>& params) {
    if (velocity_.size() == params.size()) return;
    velocity_.clear();
    for (Param* p : params) velocity_.emplace_back(p->value.size(), 0.0f);
  }
  double mu_;
  std::vector<std::vector<float>> velocity_;
};

class Adam : public Optimizer {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
       double decoupled_weight_decay = 0.0)
      : b1_(beta1), b2_(beta2), eps_(eps), wd_(decoupled_weight_decay) {}

  void step(const std::vector<Param*>& params, double lr) override {
    ensure_state(params);
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, t_);
    const double bc2 = 1.0 - std::pow(b2_, t_);
    for (size_t i = 0; i < params.size(); ++i) {
      Param& p = *params[i];
      auto& m = m_[i];
      auto& v = v_[i];
      for (size_t j = 0; j < p.value.size(); ++j) {
        const double g = p.grad[j];
        m[j] = b1_ * m[j] + (1.0 - b1_) * g;
        v[j] = b2_ * v[j] + (1.0 - b2_) * g * g;
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        double upd = lr * mhat / (std::sqrt(vhat) + eps_);
        if (wd_ > 0.0) upd += lr * wd_ * p.value[j];
        p.value[j] -= static_cast<float>(upd);
      }
    }
  }

 private:
  void ensure_state(const std::vector<Param*>& params) {
    if (m_.size() == params.size()) return;
    m_.clear();
    v_.clear();
    for (Param* p : params) {
      m_.emplace_back(p->value.size(), 0.0);
      v_.emplace_back(p->value.size(), 0.0);
    }
  }
  double b1_, b2_, eps_, wd_;
  int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

inline std::unique_ptr<Optimizer> make_optimizer(const OptimizerConfig& c) {
  if (c.kind == "adam") return std::make_unique<Adam>();
  if (c.kind == "adamw") return std::make_unique<Adam>(0.9, 0.999, 1e-8, c.weight_decay);
  if (c.kind == "sgd_momentum") return std::make_unique<SgdMomentum>(c.momentum);
  throw UsageError("config: unknown optimizer \"" + c.kind + "\"");
}

}  // namespace kxr::nn
