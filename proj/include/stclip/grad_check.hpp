#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "stclip/param_store.hpp"

namespace stclip {

struct ParamGradError {
  std::string name;
  // max_i |analytic_i - numeric_i| over this parameter's probes, divided by
  // the largest |analytic| or |numeric| entry over every checked parameter.
  // Float32 activations leave central differences with an absolute noise
  // floor near 1e-4, so each error is measured against the scale of the
  // whole gradient rather than the parameter's own (possibly tiny) one.
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  // Largest |analytic| or |numeric| entry of this parameter alone.
  double scale = 0.0;
  std::size_t probes = 0;
};

struct GradCheckReport {
  std::vector<ParamGradError> params;  // trainable parameters only
  double max_rel_error() const;
  bool passed(double tolerance) const { return max_rel_error() < tolerance; }
};

using ScalarFn = std::function<Tensor(const ParamStore&)>;

// Compares reverse-mode gradients of f against central differences. Each
// probe perturbs one element by ±step and differences the two losses in
// double precision, dividing by the perturbation actually representable in
// float32. Frozen entries are skipped. max_probes_per_param = 0 probes every
// element; otherwise evenly spaced elements are probed.
GradCheckReport grad_check(const ScalarFn& f, const ParamStore& params, double step = 1e-3,
                           std::size_t max_probes_per_param = 0);

}  // namespace stclip
