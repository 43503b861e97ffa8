#pragma once

#include <cmath>
#include <vector>

#include "voxdiff/tensor.hpp"

namespace voxdiff {

// Adaptive moments with decoupled weight decay. Parameters are separated
// into two buckets: tensors tagged decay=true (weight matrices) get the
// decay term, everything else (biases, norm gains, embeddings) does not.
class AdamW {
 public:
  struct Options {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  AdamW(std::vector<Tensor> params, Options opt) : params_(std::move(params)), opt_(opt) {
    for (auto& p : params_) {
      m_.emplace_back(p.numel(), real(0));
      v_.emplace_back(p.numel(), real(0));
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, t_);
    const double bc2 = 1.0 - std::pow(opt_.beta2, t_);
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& val = params_[i].value();
      auto& g = params_[i].grad();
      const bool decay = params_[i].decay() && opt_.weight_decay > 0.0;
      for (int64_t j = 0; j < params_[i].numel(); ++j) {
        const double gj = static_cast<double>(g[j]);
        m_[i][j] = opt_.beta1 * m_[i][j] + (1.0 - opt_.beta1) * gj;
        v_[i][j] = opt_.beta2 * v_[i][j] + (1.0 - opt_.beta2) * gj * gj;
        const double mhat = m_[i][j] / bc1;
        const double vhat = v_[i][j] / bc2;
        double upd = opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps);
        if (decay) upd += opt_.lr * opt_.weight_decay * static_cast<double>(val[j]);
        val[j] -= static_cast<real>(upd);
      }
    }
  }

  void set_lr(double lr) { opt_.lr = lr; }
  double lr() const { return opt_.lr; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  Options opt_;
  std::vector<std::vector<double>> m_, v_;
  int64_t t_ = 0;
};

}  // namespace voxdiff
