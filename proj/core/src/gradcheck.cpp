// SPDX-License-Identifier: Apache-2.0
#include "vitft/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace vitft {

namespace {

double checked(double v, std::size_t coord) {
  if (!std::isfinite(v)) {
    throw std::domain_error("finite_diff: non-finite function value at coordinate " +
                            std::to_string(coord));
  }
  return v;
}

Tensor<double> central(const ScalarFn& f, const Tensor<double>& x, double h0, bool scaled) {
  if (!(h0 > 0.0)) throw std::invalid_argument("finite_diff: step must be positive");
  Tensor<double> probe = x;
  Tensor<double> grad(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    const double h = scaled ? h0 * (1.0 + std::abs(xi)) : h0;
    probe[i] = xi + h;
    const double fp = checked(f(probe), i);
    probe[i] = xi - h;
    const double fm = checked(f(probe), i);
    probe[i] = xi;
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

}  // namespace

Tensor<double> finite_diff_grad(const ScalarFn& f, const Tensor<double>& x, double h) {
  return central(f, x, h, false);
}

Tensor<double> finite_diff_grad_scaled(const ScalarFn& f, const Tensor<double>& x, double h0) {
  return central(f, x, h0, true);
}

std::vector<double> finite_diff_at(const std::function<double()>& f, Tensor<double>& x,
                                   std::span<const std::size_t> coords, double h0) {
  std::vector<double> out;
  out.reserve(coords.size());
  for (std::size_t c : coords) {
    const double xi = x[c];
    const double h = h0 * (1.0 + std::abs(xi));
    x[c] = xi + h;
    const double fp = checked(f(), c);
    x[c] = xi - h;
    const double fm = checked(f(), c);
    x[c] = xi;
    out.push_back((fp - fm) / (2.0 * h));
  }
  return out;
}

double relative_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("relative_error: size mismatch");
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

}  // namespace vitft
