#pragma once

#include "lmm/common.hpp"

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace lmm {

/// One parameter block to check: its live value (perturbed in place and
/// restored) and the analytic gradient computed beforehand.
struct GradientBlock {
  std::string name;
  Matrix<double>* value;
  Matrix<double> analytic;
};

struct BlockError {
  std::string name;
  Index entries_checked = 0;
  // max_i |analytic_i - numeric_i| / max(max_i |analytic_i|, max_i |numeric_i|, floor)
  double max_rel_error = 0;
  Index worst_entry = -1;
  double analytic_at_worst = 0;
  double numeric_at_worst = 0;
};

struct GradientCheckReport {
  std::vector<BlockError> blocks;

  const BlockError* worst() const;
  bool passed(double tol) const;
  std::string to_string() const;
};

struct GradientCheckOptions {
  double step = 1e-5;
  // Caps the entries checked per block (evenly strided); empty = all.
  std::optional<Index> max_entries_per_block;
  // Blocks whose gradients are all below this are compared against it, so
  // finite-difference round-off on an exactly-zero gradient is not amplified.
  double absolute_floor = 1e-7;
};

/// Central finite differences of the scalar `f` against analytic gradients.
/// Only double precision is supported. Throws ContractError when two
/// evaluations at the same point differ (f not deterministic).
GradientCheckReport gradient_check(const std::function<double()>& f, std::span<GradientBlock> blocks,
                                   const GradientCheckOptions& options = {});

}  // namespace lmm
