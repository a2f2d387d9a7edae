// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vitft/tensor.hpp"

namespace vitft {

using ScalarFn = std::function<double(const Tensor<double>&)>;

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
/// Throws std::domain_error if f returns a non-finite value.
Tensor<double> finite_diff_grad(const ScalarFn& f, const Tensor<double>& x, double h);

/// Same, with a per-coordinate step h_i = h0 * (1 + |x_i|).
Tensor<double> finite_diff_grad_scaled(const ScalarFn& f, const Tensor<double>& x, double h0);

/// Scaled-step central differences at selected coordinates only. `x` is
/// perturbed in place and restored before returning.
std::vector<double> finite_diff_at(const std::function<double()>& f, Tensor<double>& x,
                                   std::span<const std::size_t> coords, double h0);

/// ||a - b|| / max(||a||, ||b||), 0 when both vanish.
double relative_error(std::span<const double> a, std::span<const double> b);

}  // namespace vitft

namespace vitft {

struct GradCheckReport {
  std::string name;
  std::uint64_t seed = 0;
  double rel_error = 0;
  std::size_t coords = 0;  // coordinates compared
};

/// Backward vs central differences (h = 1e-4 (1 + |x|)) for every kernel in
/// float64 at shapes drawn from `seed`. Each case differentiates
/// sum(R * op(inputs)) for a random weighting R, over all coordinates of
/// every differentiable input.
std::vector<GradCheckReport> check_kernels(std::uint64_t seed);

/// Full loss of a depth-2, dim-32 ViT with relative position bias,
/// LayerScale and drop path enabled, in train mode on random images and
/// smoothed targets. One report per parameter tensor, comparing
/// `coords_per_param` randomly chosen coordinates.
std::vector<GradCheckReport> check_vit_gradients(std::uint64_t seed, int coords_per_param = 6);

}  // namespace vitft
