#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "l2v/error.hpp"
#include "l2v/rng.hpp"
#include "l2v/tensor.hpp"

namespace l2v {

enum class CoordinateSelection {
  Random,   // uniform without replacement
  Largest,  // largest |analytic gradient| first
};

enum class Stencil {
  Central3,  // (f(x+h) - f(x-h)) / 2h
  Central5,  // fourth-order: lets f32 checks use a larger h
};

struct GradCheckOptions {
  double step = 1e-3;
  Stencil stencil = Stencil::Central3;
  double tolerance = 1e-3;
  std::size_t coords_per_tensor = 5;
  CoordinateSelection selection = CoordinateSelection::Random;
  std::uint64_t seed = 0;
};

struct CoordinateCheck {
  std::string tensor;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
  // Set when the one-sided slopes disagree: a kink such as relu at 0.
  bool non_differentiable = false;
};

struct CheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  std::vector<CoordinateCheck> coords;
  std::size_t flagged = 0;

  const CoordinateCheck* worst() const {
    const CoordinateCheck* best = nullptr;
    for (const auto& c : coords) {
      if (!c.non_differentiable && (!best || c.rel_err > best->rel_err)) best = &c;
    }
    return best;
  }
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

/// Compares reverse-mode gradients of the scalar `f` with central finite
/// differences on sampled coordinates of each named tensor. `f` must be
/// deterministic: it is evaluated twice up front and a mismatch raises
/// DeterminismError. The tensors are perturbed in place and restored.
template <class T>
CheckReport grad_check(const std::function<Tensor<T>()>& f,
                       std::vector<std::pair<std::string, Tensor<T>>> tensors,
                       const GradCheckOptions& opts = {}) {
  if (!(opts.step > 0.0)) throw ConfigError("grad_check step must be positive");
  for (auto& [name, t] : tensors) {
    if (!t.requires_grad()) throw ConfigError("grad_check: tensor '" + name + "' does not require grad");
    t.zero_grad();
  }

  const double f0 = static_cast<double>(f().item());
  const double f0_again = static_cast<double>(f().item());
  if (f0 != f0_again) {
    throw DeterminismError("grad_check: two evaluations disagree (" + std::to_string(f0) + " vs " +
                           std::to_string(f0_again) + ")");
  }

  {
    Tape<T> tape;
    Tensor<T> loss;
    {
      auto scope = tape.activate();
      loss = f();
    }
    tape.backward(loss);
  }

  CheckReport report;
  CounterRng rng(opts.seed, 0x6763);
  for (auto& [name, t] : tensors) {
    const std::size_t n = t.numel();
    std::vector<double> analytic(n, 0.0);
    if (t.has_grad()) {
      for (std::size_t i = 0; i < n; ++i) analytic[i] = static_cast<double>(t.grad()[i]);
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (opts.selection == CoordinateSelection::Largest) {
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return std::abs(analytic[a]) > std::abs(analytic[b]);
      });
    } else {
      for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    }
    const std::size_t k = std::min(opts.coords_per_tensor, n);
    auto values = t.mutable_data();
    for (std::size_t s = 0; s < k; ++s) {
      const std::size_t idx = order[s];
      const T orig = values[idx];
      auto shifted = [&](double k) { return static_cast<T>(static_cast<double>(orig) + k * opts.step); };
      auto eval_at = [&](T v) {
        values[idx] = v;
        return static_cast<double>(f().item());
      };
      const T up = shifted(1.0);
      const T down = shifted(-1.0);
      const double fp = eval_at(up);
      const double fm = eval_at(down);

      CoordinateCheck c;
      c.tensor = name;
      c.index = idx;
      c.analytic = analytic[idx];
      if (opts.stencil == Stencil::Central5) {
        const T up2 = shifted(2.0);
        const T down2 = shifted(-2.0);
        const double fp2 = eval_at(up2);
        const double fm2 = eval_at(down2);
        // exact offsets after rounding to T
        const double h = (static_cast<double>(up2) - static_cast<double>(down2)) / 4.0;
        c.numeric = (8.0 * (fp - fm) - (fp2 - fm2)) / (12.0 * h);
      } else {
        c.numeric = (fp - fm) / (static_cast<double>(up) - static_cast<double>(down));
      }
      values[idx] = orig;
      c.rel_err = relative_error(c.analytic, c.numeric);
      if (c.rel_err >= opts.tolerance) {
        const double fwd = (fp - f0) / (static_cast<double>(up) - static_cast<double>(orig));
        const double bwd = (f0 - fm) / (static_cast<double>(orig) - static_cast<double>(down));
        const double lo = std::min(fwd, bwd), hi = std::max(fwd, bwd);
        const bool kink = std::abs(fwd - bwd) > 0.5 * std::max(std::abs(fwd), std::abs(bwd));
        const double slack = opts.tolerance * std::max(std::abs(hi), std::abs(lo));
        if (kink && c.analytic >= lo - slack && c.analytic <= hi + slack) {
          c.non_differentiable = true;
          ++report.flagged;
        }
      }
      if (!c.non_differentiable) report.max_rel_err = std::max(report.max_rel_err, c.rel_err);
      report.coords.push_back(std::move(c));
    }
    t.clear_grad();
  }
  report.pass = report.max_rel_err < opts.tolerance;
  return report;
}

/// Single-tensor convenience form.
template <class T>
CheckReport grad_check(const std::function<Tensor<T>()>& f, Tensor<T> x, double step,
                       double tolerance, std::size_t coords = 100) {
  GradCheckOptions opts;
  opts.step = step;
  opts.tolerance = tolerance;
  opts.coords_per_tensor = coords;
  return grad_check<T>(f, {{"x", std::move(x)}}, opts);
}

}  // namespace l2v
