#include "hyperrec/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace hyperrec {

AdamOptimizer::AdamOptimizer(double lr, double weight_decay, double beta1, double beta2,
                             double eps)
    : lr_(lr), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

int AdamOptimizer::add_param(std::string name, Tensor* param) {
  Slot s;
  s.name = std::move(name);
  s.param = param;
  s.m = Tensor(param->shape());
  s.v = Tensor(param->shape());
  slots_.push_back(std::move(s));
  return static_cast<int>(slots_.size()) - 1;
}

void AdamOptimizer::step(const std::vector<std::pair<int, const Tensor*>>& grads) {
  for (const auto& [id, grad] : grads) {
    Slot& s = slots_.at(static_cast<size_t>(id));
    if (!grad->same_shape(*s.param)) {
      throw std::invalid_argument("adam_step: gradient shape " + grad->shape_string() +
                                  " does not match parameter '" + s.name + "' " +
                                  s.param->shape_string());
    }
    for (int64_t i = 0; i < grad->numel(); ++i) {
      if (!std::isfinite(grad->at(i))) {
        throw std::runtime_error("adam_step: non-finite gradient for parameter '" + s.name +
                                 "' at element " + std::to_string(i));
      }
    }
    ++s.steps;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(s.steps));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(s.steps));
    double* p = s.param->data();
    double* m = s.m.data();
    double* v = s.v.data();
    const double* g = grad->data();
    int64_t n = grad->numel();
    for (int64_t i = 0; i < n; ++i) {
      double gi = g[i] + weight_decay_ * p[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
      double mh = m[i] / bc1;
      double vh = v[i] / bc2;
      p[i] -= lr_ * mh / (std::sqrt(vh) + eps_);
    }
  }
}

double PlateauScheduler::observe(double value) {
  bool improved = !has_best_ || (maximize_ ? value > best_ : value < best_);
  if (improved) {
    has_best_ = true;
    best_ = value;
    stale_ = 0;
  } else {
    ++stale_;
    if (stale_ >= patience_) {
      lr_ = std::max(floor_, lr_ * factor_);
      stale_ = 0;
    }
  }
  return lr_;
}

double plateau_lr(double initial_lr, const std::vector<double>& history, int patience,
                  double factor, double floor, bool maximize) {
  if (history.empty()) {
    throw std::invalid_argument("plateau_lr: history must be non-empty");
  }
  PlateauScheduler sched(initial_lr, patience, factor, floor, maximize);
  for (double v : history) sched.observe(v);
  return sched.lr();
}

}  // namespace hyperrec
