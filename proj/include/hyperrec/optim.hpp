#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hyperrec/tensor.hpp"

namespace hyperrec {

// Adam with bias correction and coupled L2 weight decay (the decay coefficient
// is added to the gradient, realizing a lambda * ||param||^2 regularizer).
// Parameters are registered once; a step may update any subset of them, and
// bias correction counts steps per parameter.
class AdamOptimizer {
 public:
  struct Slot {
    std::string name;
    Tensor* param = nullptr;
    Tensor m;
    Tensor v;
    int64_t steps = 0;
  };

  AdamOptimizer(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);

  int add_param(std::string name, Tensor* param);

  // grads[i] pairs a parameter id with its gradient; parameters absent from
  // the list are untouched. Throws if a gradient is non-finite, naming the
  // parameter.
  void step(const std::vector<std::pair<int, const Tensor*>>& grads);

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  double weight_decay() const { return weight_decay_; }

  size_t param_count() const { return slots_.size(); }
  Slot& slot(int id) { return slots_.at(static_cast<size_t>(id)); }
  const Slot& slot(int id) const { return slots_.at(static_cast<size_t>(id)); }

 private:
  double lr_;
  double weight_decay_;
  double beta1_, beta2_, eps_;
  std::vector<Slot> slots_;
};

// Halves the learning rate after `patience` consecutive observations without
// strict improvement; never goes below `floor`.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, int patience = 20, double factor = 0.5, double floor = 1e-5,
                   bool maximize = false)
      : lr_(lr), patience_(patience), factor_(factor), floor_(floor), maximize_(maximize) {}

  double observe(double value);
  double lr() const { return lr_; }

 private:
  double lr_;
  int patience_;
  double factor_;
  double floor_;
  bool maximize_;
  bool has_best_ = false;
  double best_ = 0.0;
  int stale_ = 0;
};

// One-shot form: fold a whole history of epoch values through the scheduler.
double plateau_lr(double initial_lr, const std::vector<double>& history, int patience = 20,
                  double factor = 0.5, double floor = 1e-5, bool maximize = false);

}  // namespace hyperrec
