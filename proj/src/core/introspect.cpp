#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "stclip/detector.hpp"
#include "stclip/errors.hpp"

namespace stclip {

std::vector<std::uint8_t> importance_grid(std::span<const float> context_row, std::size_t grid) {
  if (context_row.size() != grid * grid)
    throw DimensionError("importance row has " + std::to_string(context_row.size()) +
                         " entries, grid needs " + std::to_string(grid * grid));
  const float top = context_row.empty() ? 0.0f : *std::max_element(context_row.begin(), context_row.end());
  std::vector<std::uint8_t> out(context_row.size(), 0);
  if (!(top > 0.0f)) return out;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = std::clamp(static_cast<double>(context_row[i]) / top, 0.0, 1.0);
    out[i] = static_cast<std::uint8_t>(std::lround(255.0 * v));
  }
  return out;
}

std::vector<std::array<double, 2>> pca_2d(const Tensor& rows) {
  if (!rows.defined() || rows.rank() != 2) throw InputError("PCA needs at least one row");
  const auto n = static_cast<Eigen::Index>(rows.dim(0));
  const auto d = static_cast<Eigen::Index>(rows.dim(1));
  Eigen::MatrixXd x(n, d);
  const auto data = rows.data();
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = data[static_cast<std::size_t>(i * d + j)];
  x.rowwise() -= x.colwise().mean();
  const Eigen::MatrixXd cov = x.transpose() * x / static_cast<double>(std::max<Eigen::Index>(n - 1, 1));
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  // Eigenvalues come in ascending order; the last columns are the top axes.
  Eigen::MatrixXd axes = Eigen::MatrixXd::Zero(d, 2);
  for (Eigen::Index a = 0; a < std::min<Eigen::Index>(2, d); ++a) {
    Eigen::VectorXd v = eig.eigenvectors().col(d - 1 - a);
    for (Eigen::Index j = 0; j < d; ++j)
      if (std::abs(v(j)) > 1e-12) {
        if (v(j) < 0) v = -v;
        break;
      }
    axes.col(a) = v;
  }
  const Eigen::MatrixXd proj = x * axes;
  std::vector<std::array<double, 2>> out(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = {proj(i, 0), proj(i, 1)};
  return out;
}

}  // namespace stclip
