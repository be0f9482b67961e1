#pragma once

#include <vector>

#include "mldg/tensor.hpp"

namespace mldg {

// Thin SVD M = U diag(S) V^T with k = min(rows, cols) singular values in
// descending order. U is rows x k, V is cols x k.
struct SvdResult {
  Tensor U;
  std::vector<double> S;
  Tensor V;
};

// One-sided (Hestenes) Jacobi. Accurate to working precision for the small
// dense matrices met here.
SvdResult svd(const Tensor& m);

Tensor reconstruct(const SvdResult& svd);

}  // namespace mldg
