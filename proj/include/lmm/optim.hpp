#pragma once

#include "lmm/common.hpp"
#include "lmm/model.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>

namespace lmm {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
  bool operator==(const AdamConfig&) const = default;
};

/// One bias-corrected Adam update of a single tensor; `step` is the 1-based
/// count after incrementing.
template <typename Scalar>
void adam_update(Matrix<Scalar>& param, const Matrix<Scalar>& grad, Matrix<Scalar>& m, Matrix<Scalar>& v,
                 std::int64_t step, const AdamConfig& cfg) {
  if (grad.rows() != param.rows() || grad.cols() != param.cols() || m.rows() != param.rows() ||
      m.cols() != param.cols() || v.rows() != param.rows() || v.cols() != param.cols()) {
    throw ShapeError("adam_update: param " + dims(param) + ", grad " + dims(grad) + ", moments " + dims(m) +
                     " / " + dims(v));
  }
  const auto b1 = static_cast<Scalar>(cfg.beta1);
  const auto b2 = static_cast<Scalar>(cfg.beta2);
  const auto c1 = static_cast<Scalar>(1.0 - std::pow(cfg.beta1, static_cast<double>(step)));
  const auto c2 = static_cast<Scalar>(1.0 - std::pow(cfg.beta2, static_cast<double>(step)));
  const auto lr = static_cast<Scalar>(cfg.lr);
  const auto eps = static_cast<Scalar>(cfg.eps);
  m = b1 * m + (Scalar(1) - b1) * grad;
  v = b2 * v + (Scalar(1) - b2) * grad.cwiseProduct(grad);
  param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
}

template <typename Scalar>
struct AdamState {
  ModelParams<Scalar> m, v;
  std::int64_t step = 0;

  static AdamState zeros(const ModelParams<Scalar>& like) { return {zeros_like(like), zeros_like(like), 0}; }
};

/// Advances the step counter and updates every leaf whose group passes
/// `groups`.
template <typename Scalar>
void adam_step(ModelParams<Scalar>& params, const ModelParams<Scalar>& grads, AdamState<Scalar>& state,
               const AdamConfig& cfg, const std::function<bool(ParamGroup)>& groups) {
  ++state.step;
  visit_params(
      [&](const ParamInfo& info, Matrix<Scalar>& p, const Matrix<Scalar>& g, Matrix<Scalar>& m, Matrix<Scalar>& v) {
        if (groups(info.group)) adam_update(p, g, m, v, state.step, cfg);
      },
      params, grads, state.m, state.v);
}

/// Scales all tensors by max_norm / g when their joint L2 norm g exceeds
/// max_norm. Returns g.
template <typename Scalar>
double clip_global_norm(std::span<Matrix<Scalar>* const> grads, double max_norm) {
  if (!(max_norm > 0)) throw ValidationError("clip_global_norm: max_norm must be positive");
  double sq = 0;
  for (const auto* g : grads) sq += g->template cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const auto s = static_cast<Scalar>(max_norm / norm);
    for (auto* g : grads) *g *= s;
  }
  return norm;
}

/// Joint clipping of every recurrent-cell gradient in `groups`.
template <typename Scalar>
double clip_recurrent(ModelParams<Scalar>& grads, double max_norm, const std::function<bool(ParamGroup)>& groups) {
  std::vector<Matrix<Scalar>*> recurrent;
  visit_params(
      [&](const ParamInfo& info, Matrix<Scalar>& g) {
        if (info.recurrent && groups(info.group)) recurrent.push_back(&g);
      },
      grads);
  return clip_global_norm<Scalar>(recurrent, max_norm);
}

}  // namespace lmm
