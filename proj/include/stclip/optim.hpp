#pragma once

#include <map>
#include <string>
#include <vector>

#include "stclip/param_store.hpp"

namespace stclip {

// Gradients aligned with a store's entry order. Frozen entries hold an empty
// vector; trainable ones hold one double per element.
struct GradSet {
  std::vector<std::vector<double>> values;

  static GradSet zeros_like(const ParamStore& store);
  // Reads the grad buffers of a store produced by ParamStore::with_grad().
  // Entries that received no gradient contribute zeros.
  static GradSet collect(const ParamStore& graded);

  void add(const GradSet& other);
  void scale(double factor);
  double l2_norm() const;
};

class Sgd {
 public:
  explicit Sgd(double momentum = 0.0) : momentum_(momentum) {}
  void step(ParamStore& store, const GradSet& grads, double lr);

 private:
  double momentum_;
  std::map<std::string, std::vector<double>> velocity_;
};

class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void step(ParamStore& store, const GradSet& grads, double lr);

 private:
  double beta1_, beta2_, eps_;
  long step_count_ = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

}  // namespace stclip
