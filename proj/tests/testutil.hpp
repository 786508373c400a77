#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "hyperrec/tape.hpp"
#include "hyperrec/tensor.hpp"

namespace testutil {

inline std::mt19937_64 make_rng(uint64_t seed) { return std::mt19937_64(seed); }

inline double urand(std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline hyperrec::Tensor random_tensor(std::vector<int64_t> shape, std::mt19937_64& rng,
                                      double lo = -1.0, double hi = 1.0) {
  hyperrec::Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t.at(i) = urand(rng, lo, hi);
  return t;
}

// Builds a scalar loss from leaf vars (one per parameter tensor).
using LossBuilder =
    std::function<hyperrec::Var(hyperrec::Tape&, const std::vector<hyperrec::Var>&)>;

struct FdReport {
  double max_rel_err = 0.0;
  int64_t checked = 0;
  std::string worst;
};

// Central finite differences against reverse-mode adjoints for every element
// of every parameter. Relative error uses a small floor so near-zero adjoints
// compare sensibly against finite-difference noise.
inline FdReport fd_check(const std::vector<hyperrec::Tensor>& params, const LossBuilder& build,
                         double h = 1e-5) {
  using hyperrec::Tape;
  using hyperrec::Tensor;
  using hyperrec::Var;

  auto eval = [&](const std::vector<Tensor>& ps) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(ps.size());
    for (const Tensor& p : ps) vars.push_back(tape.leaf(p));
    return tape.value(build(tape, vars)).item();
  };

  Tape tape;
  std::vector<Var> vars;
  for (const hyperrec::Tensor& p : params) vars.push_back(tape.leaf(p));
  Var loss = build(tape, vars);
  tape.backward(loss);

  FdReport rep;
  std::vector<Tensor> work = params;
  for (size_t p = 0; p < params.size(); ++p) {
    const Tensor& ad = tape.grad(vars[p]);
    for (int64_t i = 0; i < params[p].numel(); ++i) {
      double orig = work[p].at(i);
      work[p].at(i) = orig + h;
      double fp = eval(work);
      work[p].at(i) = orig - h;
      double fm = eval(work);
      work[p].at(i) = orig;
      double fd = (fp - fm) / (2.0 * h);
      double a = ad.at(i);
      double rel = std::fabs(a - fd) / std::max({std::fabs(a), std::fabs(fd), 1e-2});
      ++rep.checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst = "param " + std::to_string(p) + " elem " + std::to_string(i) + ": ad=" +
                    std::to_string(a) + " fd=" + std::to_string(fd);
      }
    }
  }
  return rep;
}

}  // namespace testutil
