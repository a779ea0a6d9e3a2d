#include "stclip/optim.hpp"

#include <cmath>

#include "stclip/errors.hpp"

namespace stclip {

GradSet GradSet::zeros_like(const ParamStore& store) {
  GradSet g;
  g.values.reserve(store.size());
  for (const auto& e : store.entries())
    g.values.emplace_back(e.frozen ? 0 : e.value.numel(), 0.0);
  return g;
}

GradSet GradSet::collect(const ParamStore& graded) {
  GradSet g = zeros_like(graded);
  std::size_t i = 0;
  for (const auto& e : graded.entries()) {
    if (!e.frozen && e.value.has_grad()) {
      const auto src = e.value.grad();
      std::copy(src.begin(), src.end(), g.values[i].begin());
    }
    ++i;
  }
  return g;
}

void GradSet::add(const GradSet& other) {
  if (other.values.size() != values.size()) throw DimensionError("GradSet::add: entry count differs");
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (other.values[i].size() != values[i].size())
      throw DimensionError("GradSet::add: entry size differs");
    for (std::size_t j = 0; j < values[i].size(); ++j) values[i][j] += other.values[i][j];
  }
}

void GradSet::scale(double factor) {
  for (auto& v : values)
    for (auto& x : v) x *= factor;
}

double GradSet::l2_norm() const {
  double s = 0.0;
  for (const auto& v : values)
    for (double x : v) s += x * x;
  return std::sqrt(s);
}

namespace {

void check_alignment(const ParamStore& store, const GradSet& grads) {
  if (grads.values.size() != store.size())
    throw DimensionError("optimizer: gradient set does not match the store");
}

}  // namespace

void Sgd::step(ParamStore& store, const GradSet& grads, double lr) {
  check_alignment(store, grads);
  std::size_t i = 0;
  for (const auto& e : std::vector<ParamEntry>(store.entries().begin(), store.entries().end())) {
    const auto& g = grads.values[i++];
    if (e.frozen) continue;
    const auto cur = e.value.data();
    std::vector<float> next(cur.size());
    if (momentum_ != 0.0) {
      auto& v = velocity_[e.name];
      v.resize(cur.size(), 0.0);
      for (std::size_t j = 0; j < cur.size(); ++j) {
        v[j] = momentum_ * v[j] + g[j];
        next[j] = static_cast<float>(cur[j] - lr * v[j]);
      }
    } else {
      for (std::size_t j = 0; j < cur.size(); ++j) next[j] = static_cast<float>(cur[j] - lr * g[j]);
    }
    store.set(e.name, Tensor(e.value.shape(), std::move(next)));
  }
}

void Adam::step(ParamStore& store, const GradSet& grads, double lr) {
  check_alignment(store, grads);
  ++step_count_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
  std::size_t i = 0;
  for (const auto& e : std::vector<ParamEntry>(store.entries().begin(), store.entries().end())) {
    const auto& g = grads.values[i++];
    if (e.frozen) continue;
    auto& [m, v] = moments_[e.name];
    const auto cur = e.value.data();
    m.resize(cur.size(), 0.0);
    v.resize(cur.size(), 0.0);
    std::vector<float> next(cur.size());
    for (std::size_t j = 0; j < cur.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      next[j] = static_cast<float>(cur[j] - lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_));
    }
    store.set(e.name, Tensor(e.value.shape(), std::move(next)));
  }
}

}  // namespace stclip
