#include "mldg/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mldg/error.hpp"

namespace mldg {

namespace {

// Requires rows >= cols.
SvdResult jacobi_tall(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  // Column-major working copies make the column rotations contiguous.
  std::vector<double> u(m * n), v(n * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) u[j * m + i] = a.at(i, j);
  for (std::size_t j = 0; j < n; ++j) v[j * n + j] = 1.0;

  constexpr double eps = std::numeric_limits<double>::epsilon();
  constexpr int max_sweeps = 60;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double* up = &u[p * m];
        double* uq = &u[q * m];
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += up[i] * up[i];
          beta += uq[i] * uq[i];
          gamma += up[i] * uq[i];
        }
        if (gamma == 0.0 || std::abs(gamma) <= eps * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double x = up[i], y = uq[i];
          up[i] = c * x - s * y;
          uq[i] = s * x + c * y;
        }
        double* vp = &v[p * n];
        double* vq = &v[q * n];
        for (std::size_t i = 0; i < n; ++i) {
          const double x = vp[i], y = vq[i];
          vp[i] = c * x - s * y;
          vq[i] = s * x + c * y;
        }
      }
    }
    if (!rotated) break;
  }

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += u[j * m + i] * u[j * m + i];
    sigma[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

  SvdResult out{Tensor({m, n}), std::vector<double>(n), Tensor({n, n})};
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    out.S[k] = sigma[j];
    const double inv = sigma[j] > 0.0 ? 1.0 / sigma[j] : 0.0;
    for (std::size_t i = 0; i < m; ++i) out.U.at(i, k) = u[j * m + i] * inv;
    for (std::size_t i = 0; i < n; ++i) out.V.at(i, k) = v[j * n + i];
  }
  return out;
}

}  // namespace

SvdResult svd(const Tensor& m) {
  if (!m.is_matrix()) fail(ErrorKind::shape, "svd: expected a matrix, got " + m.shape_string());
  Tensor a = m.shape().size() == 1 ? Tensor({1, m.size()}, m.values()) : m;
  if (!a.all_finite()) fail(ErrorKind::numeric, "svd: non-finite input");
  if (a.rows() >= a.cols()) return jacobi_tall(a);
  SvdResult t = jacobi_tall(transpose(a));
  return {std::move(t.V), std::move(t.S), std::move(t.U)};
}

Tensor reconstruct(const SvdResult& r) {
  Tensor us = r.U;
  const std::size_t k = r.S.size();
  for (std::size_t i = 0; i < us.rows(); ++i)
    for (std::size_t j = 0; j < k; ++j) us.at(i, j) *= r.S[j];
  return matmul(us, transpose(r.V));
}

}  // namespace mldg
