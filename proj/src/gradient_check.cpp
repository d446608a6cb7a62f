#include "lmm/gradient_check.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace lmm {

const BlockError* GradientCheckReport::worst() const {
  const BlockError* out = nullptr;
  for (const auto& b : blocks) {
    if (out == nullptr || b.max_rel_error > out->max_rel_error) out = &b;
  }
  return out;
}

bool GradientCheckReport::passed(double tol) const {
  return std::all_of(blocks.begin(), blocks.end(),
                     [tol](const BlockError& b) { return b.max_rel_error < tol; });
}

std::string GradientCheckReport::to_string() const {
  std::ostringstream os;
  os.precision(3);
  for (const auto& b : blocks) {
    os << b.name << ": max_rel_error=" << std::scientific << b.max_rel_error << " (" << b.entries_checked
       << " entries)\n";
  }
  if (const auto* w = worst()) {
    os << "worst: " << w->name << " entry " << w->worst_entry << " analytic=" << w->analytic_at_worst
       << " numeric=" << w->numeric_at_worst << " rel=" << w->max_rel_error << "\n";
  }
  return os.str();
}

GradientCheckReport gradient_check(const std::function<double()>& f, std::span<GradientBlock> blocks,
                                   const GradientCheckOptions& options) {
  if (!(options.step > 0)) throw std::invalid_argument("gradient_check: step must be positive");
  const double f0 = f();
  const double f1 = f();
  if (!(f0 == f1) || !std::isfinite(f0)) {
    throw ContractError("gradient_check: function is not deterministic (two evaluations differ)");
  }

  GradientCheckReport report;
  for (auto& block : blocks) {
    Matrix<double>& value = *block.value;
    if (block.analytic.rows() != value.rows() || block.analytic.cols() != value.cols()) {
      throw ShapeError("gradient_check: analytic gradient " + dims(block.analytic) + " for block '" +
                       block.name + "' of shape " + dims(value));
    }
    const Index n = value.size();
    Index stride = 1;
    if (options.max_entries_per_block && *options.max_entries_per_block > 0 &&
        n > *options.max_entries_per_block) {
      stride = (n + *options.max_entries_per_block - 1) / *options.max_entries_per_block;
    }

    BlockError err;
    err.name = block.name;
    std::vector<std::pair<Index, double>> numeric;
    double scale = 0;
    for (Index i = 0; i < n; i += stride) {
      double& x = value.data()[i];
      const double saved = x;
      x = saved + options.step;
      const double up = f();
      x = saved - options.step;
      const double down = f();
      x = saved;
      const double g = (up - down) / (2 * options.step);
      numeric.emplace_back(i, g);
      scale = std::max({scale, std::abs(g), std::abs(block.analytic.data()[i])});
    }
    scale = std::max(scale, options.absolute_floor);
    err.entries_checked = static_cast<Index>(numeric.size());
    for (const auto& [i, g] : numeric) {
      const double a = block.analytic.data()[i];
      const double rel = scale > 0 ? std::abs(a - g) / scale : 0.0;
      if (err.worst_entry < 0 || !std::isfinite(rel) || rel > err.max_rel_error) {
        err.max_rel_error = std::isfinite(rel) ? rel : std::numeric_limits<double>::infinity();
        err.worst_entry = i;
        err.analytic_at_worst = a;
        err.numeric_at_worst = g;
      }
    }
    report.blocks.push_back(std::move(err));
  }
  return report;
}

}  // namespace lmm
