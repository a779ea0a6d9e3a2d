#include "stclip/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "stclip/errors.hpp"

namespace stclip {

double GradCheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& p : params) m = std::max(m, p.max_rel_error);
  return m;
}

namespace {

double eval_loss(const ScalarFn& f, const ParamStore& store) {
  const Tensor loss = f(store);
  if (loss.numel() != 1) throw DimensionError("grad_check: loss must be a scalar");
  const double v = loss.data()[0];
  if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss");
  return v;
}

}  // namespace

GradCheckReport grad_check(const ScalarFn& f, const ParamStore& params, double step,
                           std::size_t max_probes_per_param) {
  if (!(step > 0.0)) throw ConfigError("grad_check: step must be positive");

  const ParamStore bound = params.with_grad();
  const Tensor loss = f(bound);
  if (loss.numel() != 1) throw DimensionError("grad_check: loss must be a scalar");
  if (!loss.all_finite()) throw NumericError("grad_check: non-finite loss");
  loss.backward();

  GradCheckReport report;
  for (const auto& entry : bound.entries()) {
    if (entry.frozen) continue;
    const Tensor& leaf = entry.value;
    const std::size_t n = leaf.numel();
    std::vector<float> analytic(n, 0.0f);
    if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());

    std::vector<std::size_t> probes;
    if (max_probes_per_param == 0 || max_probes_per_param >= n) {
      probes.resize(n);
      for (std::size_t i = 0; i < n; ++i) probes[i] = i;
    } else {
      for (std::size_t p = 0; p < max_probes_per_param; ++p)
        probes.push_back(p * n / max_probes_per_param);
    }

    const std::vector<float> base(leaf.data().begin(), leaf.data().end());
    double max_abs = 0.0, scale = 0.0;
    ParamStore probe_store = params;
    for (std::size_t i : probes) {
      std::vector<float> plus = base, minus = base;
      plus[i] = static_cast<float>(base[i] + step);
      minus[i] = static_cast<float>(base[i] - step);
      probe_store.set(entry.name, Tensor(leaf.shape(), plus));
      const double fp = eval_loss(f, probe_store);
      probe_store.set(entry.name, Tensor(leaf.shape(), minus));
      const double fm = eval_loss(f, probe_store);
      const double h = static_cast<double>(plus[i]) - static_cast<double>(minus[i]);
      const double numeric = (fp - fm) / h;
      max_abs = std::max(max_abs, std::abs(numeric - analytic[i]));
      scale = std::max({scale, std::abs(numeric), std::abs(static_cast<double>(analytic[i]))});
    }
    probe_store.set(entry.name, Tensor(leaf.shape(), base));
    ParamGradError err;
    err.name = entry.name;
    err.probes = probes.size();
    err.max_abs_error = max_abs;
    err.scale = scale;
    report.params.push_back(std::move(err));
  }
  double global = 0.0;
  for (const auto& p : report.params) global = std::max(global, p.scale);
  for (auto& p : report.params) p.max_rel_error = global > 0.0 ? p.max_abs_error / global : 0.0;
  return report;
}

}  // namespace stclip
