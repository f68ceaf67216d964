#pragma once

#include "scn/nn.hpp"

#include <functional>
#include <string>
#include <vector>

namespace scn {

struct GradCheckResult {
  std::string label;
  /// Worst ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-6) over
  /// the parameter blocks and the input gradient. The floor covers blocks whose
  /// exact gradient vanishes (a conv bias feeding batchnorm).
  double max_rel_error = 0.0;
  std::string worst_block;
  std::size_t checked = 0;
};

/// Scalar objective over a flat parameter vector and its analytic gradient.
/// `eval` returns the loss; with a non-null gradient it also fills it.
using Objective = std::function<double(const Vec<double>& theta, Vec<double>* grad)>;

/// Central differences with step h on every coordinate, compared per block
/// (blocks given as (name, offset, size)).
GradCheckResult check_objective(const std::string& label, const Objective& f, const Vec<double>& theta,
                                const std::vector<ParamBlock>& blocks, double h = 1e-5);

/// Mean cross-entropy of `net` on (x, labels) in train mode, dropout reseeded
/// for every evaluation; checks all parameters and the input.
GradCheckResult gradient_check(Network<double>& net, const Tensor<double>& x, const std::vector<int>& labels,
                               double h = 1e-5);

/// One check per layer kind (and stride/padding variant) on random small
/// shapes.
std::vector<GradCheckResult> layer_gradient_suite(std::uint64_t seed);

}  // namespace scn
