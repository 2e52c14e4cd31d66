#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "transgop/tensor.hpp"

namespace transgop {

struct GradcheckEntry {
  std::size_t input = 0;
  std::size_t element = 0;
  double analytic = 0;
  double numeric = 0;
  double error = 0;  // relative to max(|analytic|, |numeric|, floor)
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double max_error = 0;
  double value = 0;  // function value at the base point
  bool passed = true;
  std::string diagnostic;

  const GradcheckEntry* worst() const {
    if (entries.empty()) return nullptr;
    return &*std::max_element(entries.begin(), entries.end(),
                              [](auto& a, auto& b) { return a.error < b.error; });
  }
};

using GradFn = std::function<Tensor<double>(Tape<double>&, std::span<Tensor<double>>)>;

struct GradcheckOptions {
  double tol = 1e-4;
  double step = 1e-5;
  // Errors are relative to max(|g|, floor). The floor is raised to
  // 4 eps |f| / (step * tol), the gradient size at which rounding in f alone
  // would exceed the tolerance.
  double abs_floor = 1e-8;
};

/// Compares reverse-mode gradients of a scalar function with central finite
/// differences, element by element. Inputs with requires_grad() unset are held
/// fixed. Parameters captured inside `fn` are not perturbed; pass them as inputs
/// to have them checked.
inline GradcheckReport gradcheck(const GradFn& fn, std::vector<Tensor<double>> inputs,
                                 GradcheckOptions opt = {}) {
  GradcheckReport rep;
  for (auto& t : inputs) t.zero_grad();
  {
    Tape<double> tape;
    auto out = fn(tape, inputs);
    if (out.numel() != 1) throw ContractError("gradcheck: function must return a scalar");
    if (!std::isfinite(out.item())) {
      rep.passed = false;
      rep.diagnostic = "non-finite function value at the base point";
      return rep;
    }
    tape.backward(out);
    rep.value = out.item();
  }
  const double floor = std::max(opt.abs_floor, 4 * std::numeric_limits<double>::epsilon() *
                                                   std::max(1.0, std::abs(rep.value)) /
                                                   (opt.step * opt.tol));
  auto eval = [&]() {
    Tape<double> tape;
    return fn(tape, inputs).item();
  };
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& t = inputs[ti];
    if (!t.requires_grad()) continue;
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad_view().begin(), t.grad_view().end(), analytic.begin());
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double orig = data[i];
      data[i] = orig + opt.step;
      const double fp = eval();
      data[i] = orig - opt.step;
      const double fm = eval();
      data[i] = orig;
      GradcheckEntry e{ti, i, analytic[i], (fp - fm) / (2 * opt.step), 0};
      if (!std::isfinite(fp) || !std::isfinite(fm) || !std::isfinite(e.analytic)) {
        std::ostringstream os;
        os << "non-finite value at input " << ti << " element " << i;
        rep.diagnostic = os.str();
        rep.passed = false;
        e.error = INFINITY;
      } else {
        const double mag = std::max(std::abs(e.analytic), std::abs(e.numeric));
        const double diff = std::abs(e.analytic - e.numeric);
        e.error = diff / std::max(mag, floor);
      }
      rep.max_error = std::max(rep.max_error, e.error);
      rep.entries.push_back(e);
    }
  }
  if (rep.max_error >= opt.tol) {
    rep.passed = false;
    if (rep.diagnostic.empty()) {
      auto* w = rep.worst();
      std::ostringstream os;
      os << "max error " << rep.max_error << " at input " << w->input << " element "
         << w->element << " (analytic " << w->analytic << ", numeric " << w->numeric << ")";
      rep.diagnostic = os.str();
    }
  }
  return rep;
}

}  // namespace transgop
