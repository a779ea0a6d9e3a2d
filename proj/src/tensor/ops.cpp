#include <algorithm>
#include <cmath>
#include <numeric>

#include "stclip/errors.hpp"
#include "stclip/tensor.hpp"
#include "tensor_internal.hpp"

namespace stclip {

namespace detail {

void gemm_nn(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  thread_local std::vector<double> acc;
  acc.resize(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const float* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const float* brow = b + p * n;
      double* accp = acc.data();
      for (std::size_t j = 0; j < n; ++j) accp[j] += av * static_cast<double>(brow[j]);
    }
    float* crow = c + i * n;
    if (accumulate) {
      for (std::size_t j = 0; j < n; ++j)
        crow[j] = static_cast<float>(static_cast<double>(crow[j]) + acc[j]);
    } else {
      for (std::size_t j = 0; j < n; ++j) crow[j] = static_cast<float>(acc[j]);
    }
  }
}

namespace {
std::vector<float> transposed(const float* src, std::size_t r, std::size_t c) {
  std::vector<float> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = src[i * c + j];
  return out;
}
}  // namespace

void gemm_nt(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  const auto bt = transposed(b, n, k);
  gemm_nn(a, bt.data(), c, m, k, n, accumulate);
}

void gemm_tn(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  const auto at = transposed(a, k, m);
  gemm_nn(at.data(), b, c, m, k, n, accumulate);
}

}  // namespace detail

using detail::make_result;
using detail::Node;

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

void require_rank(const Tensor& a, std::size_t r, const char* op) {
  if (a.rank() != r)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                         shape_str(a.shape()));
}

template <typename Fwd, typename Bwd>
Tensor unary_map(const Tensor& a, Fwd fwd, Bwd bwd) {
  const auto x = a.data();
  std::vector<float> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
  return make_result(a.shape(), std::move(y), {&a}, [bwd](Node& self) {
    float* gx = self.input_grad(0);
    if (!gx) return;
    const float* xv = self.input_value(0);
    for (std::size_t i = 0; i < self.value.size(); ++i)
      gx[i] += bwd(xv[i], self.value[i], self.grad[i]);
  });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (b.rank() != 2 || a.rank() < 1 || a.cols() != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.dim(1);
  Shape out_shape = a.shape();
  out_shape.back() = n;
  std::vector<float> c(m * n);
  detail::gemm_nn(a.data().data(), b.data().data(), c.data(), m, k, n, false);
  return make_result(std::move(out_shape), std::move(c), {&a, &b}, [m, k, n](Node& self) {
    const float* dc = self.grad.data();
    if (float* ga = self.input_grad(0)) detail::gemm_nt(dc, self.input_value(1), ga, m, n, k, true);
    if (float* gb = self.input_grad(1)) detail::gemm_tn(self.input_value(0), dc, gb, k, m, n, true);
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<float> y(r * c);
  const auto x = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[j * r + i] = x[i * c + j];
  return make_result({c, r}, std::move(y), {&a}, [r, c](Node& self) {
    float* g = self.input_grad(0);
    if (!g) return;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  for (auto d : shape)
    if (d == 0) throw DimensionError("reshape: zero dimension in " + shape_str(shape));
  std::vector<float> y(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(y), {&a}, [](Node& self) {
    float* g = self.input_grad(0);
    if (!g) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto x = a.data(), z = b.data();
  std::vector<float> y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] + z[i];
  return make_result(a.shape(), std::move(y), {&a, &b}, [](Node& self) {
    for (std::size_t in = 0; in < 2; ++in)
      if (float* g = self.input_grad(in))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto x = a.data(), z = b.data();
  std::vector<float> y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] - z[i];
  return make_result(a.shape(), std::move(y), {&a, &b}, [](Node& self) {
    if (float* g = self.input_grad(0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (float* g = self.input_grad(1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto x = a.data(), z = b.data();
  std::vector<float> y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * z[i];
  return make_result(a.shape(), std::move(y), {&a, &b}, [](Node& self) {
    const float* xa = self.input_value(0);
    const float* xb = self.input_value(1);
    if (float* g = self.input_grad(0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * xb[i];
    if (float* g = self.input_grad(1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * xa[i];
  });
}

Tensor scale(const Tensor& a, float factor) {
  return unary_map(
      a, [factor](float v) { return v * factor; },
      [factor](float, float, float dy) { return dy * factor; });
}

Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1)
    throw DimensionError("mul_scalar: factor must hold one element, got " + shape_str(s.shape()));
  const float f = s.data()[0];
  const auto x = a.data();
  std::vector<float> y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * f;
  return make_result(a.shape(), std::move(y), {&a, &s}, [](Node& self) {
    const float* xa = self.input_value(0);
    const float fv = self.input_value(1)[0];
    if (float* g = self.input_grad(0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * fv;
    if (float* g = self.input_grad(1)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        acc += static_cast<double>(self.grad[i]) * xa[i];
      g[0] += static_cast<float>(acc);
    }
  });
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  if (v.rank() != 1 || v.dim(0) != a.cols())
    throw DimensionError("add_rowvec: vector " + shape_str(v.shape()) + " does not match rows of " +
                         shape_str(a.shape()));
  const std::size_t r = a.rows(), c = a.cols();
  const auto x = a.data(), b = v.data();
  std::vector<float> y(x.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = x[i * c + j] + b[j];
  return make_result(a.shape(), std::move(y), {&a, &v}, [r, c](Node& self) {
    if (float* g = self.input_grad(0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (float* g = self.input_grad(1)) {
      for (std::size_t j = 0; j < c; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < r; ++i) acc += self.grad[i * c + j];
        g[j] += static_cast<float>(acc);
      }
    }
  });
}

Tensor mul_rowvec(const Tensor& a, const Tensor& v) {
  if (v.rank() != 1 || v.dim(0) != a.cols())
    throw DimensionError("mul_rowvec: vector " + shape_str(v.shape()) + " does not match rows of " +
                         shape_str(a.shape()));
  const std::size_t r = a.rows(), c = a.cols();
  const auto x = a.data(), b = v.data();
  std::vector<float> y(x.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = x[i * c + j] * b[j];
  return make_result(a.shape(), std::move(y), {&a, &v}, [r, c](Node& self) {
    const float* xa = self.input_value(0);
    const float* vb = self.input_value(1);
    if (float* g = self.input_grad(0))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[i * c + j] * vb[j];
    if (float* g = self.input_grad(1)) {
      for (std::size_t j = 0; j < c; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < r; ++i)
          acc += static_cast<double>(self.grad[i * c + j]) * xa[i * c + j];
        g[j] += static_cast<float>(acc);
      }
    }
  });
}

Tensor exp(const Tensor& a) {
  return unary_map(
      a, [](float v) { return std::exp(v); }, [](float, float y, float dy) { return dy * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_map(
      a,
      [](float v) {
        return static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(v))));
      },
      [](float, float y, float dy) { return dy * y * (1.0f - y); });
}

Tensor gelu(const Tensor& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary_map(
      a,
      [](float v) {
        const double x = v;
        return static_cast<float>(0.5 * x * (1.0 + std::erf(x * kInvSqrt2)));
      },
      [](float v, float, float dy) {
        const double x = v;
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        return static_cast<float>(dy * (cdf + x * pdf));
      });
}

Tensor softmax_rows(const Tensor& a) {
  if (a.rank() == 0 || a.cols() == 0) throw DimensionError("softmax_rows: empty row dimension");
  const std::size_t r = a.rows(), c = a.cols();
  const auto x = a.data();
  std::vector<float> y(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    const float* xr = x.data() + i * c;
    const float mx = *std::max_element(xr, xr + c);
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) total += std::exp(static_cast<double>(xr[j]) - mx);
    for (std::size_t j = 0; j < c; ++j)
      y[i * c + j] = static_cast<float>(std::exp(static_cast<double>(xr[j]) - mx) / total);
  }
  return make_result(a.shape(), std::move(y), {&a}, [r, c](Node& self) {
    float* g = self.input_grad(0);
    if (!g) return;
    for (std::size_t i = 0; i < r; ++i) {
      const float* yr = self.value.data() + i * c;
      const float* dy = self.grad.data() + i * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += static_cast<double>(dy[j]) * yr[j];
      for (std::size_t j = 0; j < c; ++j)
        g[i * c + j] += static_cast<float>(yr[j] * (dy[j] - dot));
    }
  });
}

Tensor log_softmax_rows(const Tensor& a) {
  if (a.rank() == 0 || a.cols() == 0) throw DimensionError("log_softmax_rows: empty row dimension");
  const std::size_t r = a.rows(), c = a.cols();
  const auto x = a.data();
  std::vector<float> y(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    const float* xr = x.data() + i * c;
    const float mx = *std::max_element(xr, xr + c);
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) total += std::exp(static_cast<double>(xr[j]) - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = static_cast<float>(xr[j] - lse);
  }
  return make_result(a.shape(), std::move(y), {&a}, [r, c](Node& self) {
    float* g = self.input_grad(0);
    if (!g) return;
    for (std::size_t i = 0; i < r; ++i) {
      const float* yr = self.value.data() + i * c;
      const float* dy = self.grad.data() + i * c;
      double total = 0.0;
      for (std::size_t j = 0; j < c; ++j) total += dy[j];
      for (std::size_t j = 0; j < c; ++j)
        g[i * c + j] += static_cast<float>(dy[j] - std::exp(static_cast<double>(yr[j])) * total);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  const std::size_t d = x.cols();
  if (gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != d || beta.dim(0) != d)
    throw DimensionError("layer_norm: input " + shape_str(x.shape()) + " vs gamma " +
                         shape_str(gamma.shape()) + ", beta " + shape_str(beta.shape()));
  const std::size_t r = x.rows();
  const auto xv = x.data(), gv = gamma.data(), bv = beta.data();
  std::vector<float> y(xv.size());
  // Normalized values and inverse std are kept for the backward pass.
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto rstd = std::make_shared<std::vector<double>>(r);
  for (std::size_t i = 0; i < r; ++i) {
    const float* row = xv.data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[i] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * rs;
      (*xhat)[i * d + j] = h;
      y[i * d + j] = static_cast<float>(h * gv[j] + bv[j]);
    }
  }
  return make_result(x.shape(), std::move(y), {&x, &gamma, &beta},
                     [r, d, xhat, rstd](Node& self) {
                       const float* gv = self.input_value(1);
                       const float* dy = self.grad.data();
                       if (float* gx = self.input_grad(0)) {
                         for (std::size_t i = 0; i < r; ++i) {
                           double m1 = 0.0, m2 = 0.0;
                           for (std::size_t j = 0; j < d; ++j) {
                             const double dh = static_cast<double>(dy[i * d + j]) * gv[j];
                             m1 += dh;
                             m2 += dh * (*xhat)[i * d + j];
                           }
                           m1 /= static_cast<double>(d);
                           m2 /= static_cast<double>(d);
                           for (std::size_t j = 0; j < d; ++j) {
                             const double dh = static_cast<double>(dy[i * d + j]) * gv[j];
                             gx[i * d + j] += static_cast<float>(
                                 (*rstd)[i] * (dh - m1 - (*xhat)[i * d + j] * m2));
                           }
                         }
                       }
                       float* gg = self.input_grad(1);
                       float* gb = self.input_grad(2);
                       if (gg || gb) {
                         for (std::size_t j = 0; j < d; ++j) {
                           double sg = 0.0, sb = 0.0;
                           for (std::size_t i = 0; i < r; ++i) {
                             sg += static_cast<double>(dy[i * d + j]) * (*xhat)[i * d + j];
                             sb += dy[i * d + j];
                           }
                           if (gg) gg[j] += static_cast<float>(sg);
                           if (gb) gb[j] += static_cast<float>(sb);
                         }
                       }
                     });
}

Tensor l2_normalize_rows(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  const auto x = a.data();
  std::vector<float> y(x.size());
  auto norms = std::make_shared<std::vector<double>>(r);
  for (std::size_t i = 0; i < r; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < c; ++j) ss += static_cast<double>(x[i * c + j]) * x[i * c + j];
    const double n = std::max(std::sqrt(ss), 1e-12);
    (*norms)[i] = n;
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = static_cast<float>(x[i * c + j] / n);
  }
  return make_result(a.shape(), std::move(y), {&a}, [r, c, norms](Node& self) {
    float* g = self.input_grad(0);
    if (!g) return;
    const float* xv = self.input_value(0);
    for (std::size_t i = 0; i < r; ++i) {
      const double n = (*norms)[i];
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j)
        dot += static_cast<double>(self.grad[i * c + j]) * xv[i * c + j];
      for (std::size_t j = 0; j < c; ++j) {
        const double u = xv[i * c + j] / n;
        g[i * c + j] += static_cast<float>((self.grad[i * c + j] - u * dot / n) / n);
      }
    }
  });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  return make_result(Shape{}, {static_cast<float>(acc)}, {&a}, [](Node& self) {
    float* g = self.input_grad(0);
    if (!g) return;
    const float dy = self.grad[0];
    const std::size_t n = self.inputs[0]->value.size();
    for (std::size_t i = 0; i < n; ++i) g[i] += dy;
  });
}

Tensor mean(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  const double n = static_cast<double>(a.numel());
  return make_result(Shape{}, {static_cast<float>(acc / n)}, {&a}, [n](Node& self) {
    float* g = self.input_grad(0);
    if (!g) return;
    const float dy = static_cast<float>(self.grad[0] / n);
    const std::size_t count = self.inputs[0]->value.size();
    for (std::size_t i = 0; i < count; ++i) g[i] += dy;
  });
}

Tensor group_mean(const Tensor& a, std::size_t group) {
  const std::size_t r = a.rows(), c = a.cols();
  if (group == 0 || r % group != 0)
    throw DimensionError("group_mean: " + std::to_string(r) + " rows not divisible into groups of " +
                         std::to_string(group));
  const std::size_t g_count = r / group;
  const auto x = a.data();
  std::vector<float> y(g_count * c);
  for (std::size_t g = 0; g < g_count; ++g)
    for (std::size_t j = 0; j < c; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < group; ++t) acc += x[(g * group + t) * c + j];
      y[g * c + j] = static_cast<float>(acc / static_cast<double>(group));
    }
  return make_result({g_count, c}, std::move(y), {&a}, [g_count, group, c](Node& self) {
    float* gx = self.input_grad(0);
    if (!gx) return;
    const float inv = 1.0f / static_cast<float>(group);
    for (std::size_t g = 0; g < g_count; ++g)
      for (std::size_t t = 0; t < group; ++t)
        for (std::size_t j = 0; j < c; ++j)
          gx[(g * group + t) * c + j] += self.grad[g * c + j] * inv;
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.cols() != c)
      throw DimensionError("concat_rows: part " + shape_str(p.shape()) + " incompatible with " +
                           std::to_string(c) + " columns");
    total += p.dim(0);
  }
  std::vector<float> y;
  y.reserve(total * c);
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(y.size());
    y.insert(y.end(), p.data().begin(), p.data().end());
  }
  return make_result({total, c}, std::move(y), parts, [offsets](Node& self) {
    for (std::size_t i = 0; i < self.inputs.size(); ++i) {
      float* g = self.input_grad(i);
      if (!g) continue;
      const std::size_t n = self.inputs[i]->value.size();
      for (std::size_t e = 0; e < n; ++e) g[e] += self.grad[offsets[i] + e];
    }
  });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank(a, 2, "slice_rows");
  if (begin >= end || end > a.dim(0))
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") invalid for " + shape_str(a.shape()));
  const std::size_t c = a.dim(1);
  std::vector<float> y(a.data().begin() + begin * c, a.data().begin() + end * c);
  return make_result({end - begin, c}, std::move(y), {&a}, [begin, c](Node& self) {
    float* g = self.input_grad(0);
    if (!g) return;
    for (std::size_t e = 0; e < self.grad.size(); ++e) g[begin * c + e] += self.grad[e];
  });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index) {
  require_rank(a, 2, "gather_rows");
  if (index.empty()) throw DimensionError("gather_rows: empty index");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<std::size_t> idx(index.begin(), index.end());
  std::vector<float> y(idx.size() * c);
  const auto x = a.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= r)
      throw DimensionError("gather_rows: index " + std::to_string(idx[i]) + " out of range for " +
                           shape_str(a.shape()));
    std::copy_n(x.data() + idx[i] * c, c, y.data() + i * c);
  }
  return make_result({idx.size(), c}, std::move(y), {&a}, [idx, c](Node& self) {
    float* g = self.input_grad(0);
    if (!g) return;
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) g[idx[i] * c + j] += self.grad[i * c + j];
  });
}

Tensor select_elements(const Tensor& a,
                       std::span<const std::pair<std::size_t, std::size_t>> at) {
  require_rank(a, 2, "select_elements");
  if (at.empty()) throw DimensionError("select_elements: no positions");
  const std::size_t c = a.dim(1);
  std::vector<std::size_t> flat;
  flat.reserve(at.size());
  for (auto [i, j] : at) {
    if (i >= a.dim(0) || j >= c)
      throw DimensionError("select_elements: position out of range for " + shape_str(a.shape()));
    flat.push_back(i * c + j);
  }
  std::vector<float> y(flat.size());
  for (std::size_t e = 0; e < flat.size(); ++e) y[e] = a.data()[flat[e]];
  return make_result({flat.size()}, std::move(y), {&a}, [flat](Node& self) {
    float* g = self.input_grad(0);
    if (!g) return;
    for (std::size_t e = 0; e < flat.size(); ++e) g[flat[e]] += self.grad[e];
  });
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  require_same_shape(logits, targets, "bce_with_logits");
  const auto x = logits.data(), t = targets.data();
  std::vector<float> y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double xv = x[i];
    y[i] = static_cast<float>(std::max(xv, 0.0) - xv * t[i] + std::log1p(std::exp(-std::abs(xv))));
  }
  return make_result(logits.shape(), std::move(y), {&logits}, [targets](Node& self) {
    float* g = self.input_grad(0);
    if (!g) return;
    const float* xv = self.input_value(0);
    const auto t = targets.data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(xv[i])));
      g[i] += static_cast<float>(self.grad[i] * (s - t[i]));
    }
  });
}

AttentionOutput attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                          std::size_t groups, bool causal) {
  require_rank(q, 2, "attention(q)");
  require_rank(k, 2, "attention(k)");
  require_rank(v, 2, "attention(v)");
  const std::size_t d = q.dim(1);
  if (k.dim(1) != d || v.dim(1) != d || k.dim(0) != v.dim(0))
    throw DimensionError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                         ", v " + shape_str(v.shape()) + " are inconsistent");
  if (heads == 0 || d % heads != 0)
    throw ConfigError("attention: width " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  if (groups == 0 || q.dim(0) % groups != 0 || k.dim(0) % groups != 0)
    throw DimensionError("attention: rows not divisible into " + std::to_string(groups) + " groups");
  const std::size_t cq = q.dim(0) / groups, ck = k.dim(0) / groups, hd = d / heads;
  if (causal && cq != ck) throw DimensionError("attention: causal mask needs square blocks");
  const double sc = 1.0 / std::sqrt(static_cast<double>(hd));

  // probs[g][h][i][j]
  auto probs = std::make_shared<std::vector<float>>(groups * heads * cq * ck, 0.0f);
  std::vector<float> out(q.dim(0) * d, 0.0f);
  std::vector<float> head_mean(groups * cq * ck, 0.0f);
  const float* qv = q.data().data();
  const float* kv = k.data().data();
  const float* vv = v.data().data();
  std::vector<double> logits(ck);
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < cq; ++i) {
        const float* qi = qv + (g * cq + i) * d + h * hd;
        const std::size_t visible = causal ? i + 1 : ck;
        double mx = -1e300;
        for (std::size_t j = 0; j < visible; ++j) {
          const float* kj = kv + (g * ck + j) * d + h * hd;
          double s = 0.0;
          for (std::size_t e = 0; e < hd; ++e) s += static_cast<double>(qi[e]) * kj[e];
          logits[j] = s * sc;
          mx = std::max(mx, logits[j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < visible; ++j) {
          logits[j] = std::exp(logits[j] - mx);
          total += logits[j];
        }
        float* pr = probs->data() + ((g * heads + h) * cq + i) * ck;
        for (std::size_t j = 0; j < visible; ++j) pr[j] = static_cast<float>(logits[j] / total);
        float* oi = out.data() + (g * cq + i) * d + h * hd;
        for (std::size_t e = 0; e < hd; ++e) {
          double acc = 0.0;
          for (std::size_t j = 0; j < visible; ++j)
            acc += static_cast<double>(pr[j]) * vv[(g * ck + j) * d + h * hd + e];
          oi[e] = static_cast<float>(acc);
        }
      }
    }
    for (std::size_t i = 0; i < cq; ++i)
      for (std::size_t j = 0; j < ck; ++j) {
        double acc = 0.0;
        for (std::size_t h = 0; h < heads; ++h) acc += (*probs)[((g * heads + h) * cq + i) * ck + j];
        head_mean[(g * cq + i) * ck + j] = static_cast<float>(acc / static_cast<double>(heads));
      }
  }

  AttentionOutput result;
  result.head_mean = Tensor({groups * cq, ck}, std::move(head_mean));
  result.out = make_result(
      q.shape(), std::move(out), {&q, &k, &v},
      [probs, groups, heads, cq, ck, hd, d, sc, causal](Node& self) {
        const float* qv = self.input_value(0);
        const float* kv = self.input_value(1);
        const float* vv = self.input_value(2);
        float* gq = self.input_grad(0);
        float* gk = self.input_grad(1);
        float* gv = self.input_grad(2);
        const float* dout = self.grad.data();
        std::vector<double> dp(ck), ds(ck);
        for (std::size_t g = 0; g < groups; ++g)
          for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < cq; ++i) {
              const std::size_t visible = causal ? i + 1 : ck;
              const float* pr = probs->data() + ((g * heads + h) * cq + i) * ck;
              const float* doi = dout + (g * cq + i) * d + h * hd;
              double dot = 0.0;
              for (std::size_t j = 0; j < visible; ++j) {
                const float* vj = vv + (g * ck + j) * d + h * hd;
                double s = 0.0;
                for (std::size_t e = 0; e < hd; ++e) s += static_cast<double>(doi[e]) * vj[e];
                dp[j] = s;
                dot += s * pr[j];
                if (gv) {
                  float* gvj = gv + (g * ck + j) * d + h * hd;
                  for (std::size_t e = 0; e < hd; ++e) gvj[e] += pr[j] * doi[e];
                }
              }
              for (std::size_t j = 0; j < visible; ++j) ds[j] = pr[j] * (dp[j] - dot) * sc;
              const float* qi = qv + (g * cq + i) * d + h * hd;
              if (gq) {
                float* gqi = gq + (g * cq + i) * d + h * hd;
                for (std::size_t e = 0; e < hd; ++e) {
                  double acc = 0.0;
                  for (std::size_t j = 0; j < visible; ++j)
                    acc += ds[j] * kv[(g * ck + j) * d + h * hd + e];
                  gqi[e] += static_cast<float>(acc);
                }
              }
              if (gk) {
                for (std::size_t j = 0; j < visible; ++j) {
                  float* gkj = gk + (g * ck + j) * d + h * hd;
                  for (std::size_t e = 0; e < hd; ++e) gkj[e] += static_cast<float>(ds[j] * qi[e]);
                }
              }
            }
      });
  return result;
}

}  // namespace stclip
