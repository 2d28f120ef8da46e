#pragma once

#include "ptcode/autodiff.hpp"
#include "ptcode/random.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace ptcode {

struct TensorCheck {
  std::string name;
  std::size_t checked = 0;
  // Coordinates whose ±ε perturbation flips a max-pool argmax.
  std::size_t excluded = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradCheckReport {
  std::vector<TensorCheck> tensors;
  double epsilon = 0.0;
  double tolerance = 0.0;
  bool passed = true;

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& t : tensors) m = std::max(m, t.max_rel_error);
    return m;
  }
};

inline void to_json(nlohmann::json& j, const TensorCheck& t) {
  j = {{"tensor", t.name},
       {"checked", t.checked},
       {"excluded", t.excluded},
       {"max_rel_error", t.max_rel_error},
       {"max_abs_error", t.max_abs_error}};
}

inline void to_json(nlohmann::json& j, const GradCheckReport& r) {
  j = {{"epsilon", r.epsilon}, {"tolerance", r.tolerance}, {"passed", r.passed}, {"tensors", r.tensors}};
}

struct GradCheckOptions {
  double epsilon = 1e-5;
  double tolerance = 1e-4;
  // Per tensor; tensors with fewer coordinates are checked exhaustively.
  std::size_t min_coordinates = 50;
  std::uint64_t seed = 0;
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

// Records a scalar loss on the given tape from the store's current values.
using LossBuilder = std::function<Var(Tape<double>&)>;

/// Compares the tape's analytic gradient against central differences
/// (L(θ+ε) − L(θ−ε)) / 2ε for every trainable tensor of `store`.
inline GradCheckReport finite_difference_check(ParameterStore<double>& store, const LossBuilder& build,
                                               const GradCheckOptions& opts = {}) {
  GradCheckReport report;
  report.epsilon = opts.epsilon;
  report.tolerance = opts.tolerance;

  store.zero_grad();
  {
    Tape<double> tape(store);
    tape.backward(build(tape));
  }

  auto evaluate = [&](std::vector<int>& trace) {
    Tape<double> tape(store);
    Var loss = build(tape);
    trace = tape.argmax_trace();
    return tape.scalar(loss);
  };

  Rng rng(opts.seed, "gradcheck");
  for (auto& p : store.all()) {
    if (!p.trainable) continue;
    TensorCheck tc;
    tc.name = p.name;
    const std::size_t n = p.size();
    std::vector<std::size_t> coords(n);
    for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    if (n > opts.min_coordinates) {
      rng.shuffle(coords.begin(), coords.end());
      coords.resize(opts.min_coordinates);
      std::sort(coords.begin(), coords.end());
    }
    double* data = p.value.data();
    for (std::size_t c : coords) {
      const double saved = data[c];
      std::vector<int> trace_plus, trace_minus;
      data[c] = saved + opts.epsilon;
      const double plus = evaluate(trace_plus);
      data[c] = saved - opts.epsilon;
      const double minus = evaluate(trace_minus);
      data[c] = saved;
      if (trace_plus != trace_minus) {
        ++tc.excluded;
        continue;
      }
      const double numeric = (plus - minus) / (2.0 * opts.epsilon);
      const double analytic = p.grad.data()[c];
      tc.max_abs_error = std::max(tc.max_abs_error, std::abs(analytic - numeric));
      tc.max_rel_error = std::max(tc.max_rel_error, relative_error(analytic, numeric));
      ++tc.checked;
    }
    if (tc.max_rel_error > opts.tolerance) report.passed = false;
    report.tensors.push_back(std::move(tc));
  }
  store.zero_grad();
  return report;
}

}  // namespace ptcode
