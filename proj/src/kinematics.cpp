#include "lmm/kinematics.hpp"

#include <Eigen/LU>

#include <cmath>
#include <limits>
#include <numbers>

namespace lmm {
namespace {

template <typename Scalar>
void require_finite(const Vector3<Scalar>& v, const char* op) {
  if (!v.allFinite()) {
    throw std::invalid_argument(std::string(op) + ": non-finite exponential coordinates");
  }
}

// R = I + a K + b K^2 with K = skew(v).
template <typename Scalar>
struct RodriguesCoefficients {
  Scalar a;
  Scalar b;
};

template <typename Scalar>
RodriguesCoefficients<Scalar> rodrigues_coefficients(Scalar theta) {
  using std::sin;
  if (theta < Scalar(1e-8)) {
    const Scalar t2 = theta * theta;
    return {Scalar(1) - t2 / 6, Scalar(0.5) - t2 / 24};
  }
  const Scalar s = sin(theta / 2);
  return {sin(theta) / theta, 2 * s * s / (theta * theta)};
}

// Derivatives of a(theta), b(theta) divided by theta. The closed forms cancel
// catastrophically for small theta, so below a precision-dependent crossover
// the Taylor series is used.
template <typename Scalar>
RodriguesCoefficients<Scalar> rodrigues_derivative_coefficients(Scalar theta) {
  using std::cos;
  using std::sin;
  static const Scalar crossover =
      std::pow(Scalar(45360) * std::numeric_limits<Scalar>::epsilon(), Scalar(0.125));
  const Scalar t2 = theta * theta;
  if (theta < crossover) {
    return {Scalar(-1) / 3 + t2 / 30 - t2 * t2 / 840,
            Scalar(-1) / 12 + t2 / 180 - t2 * t2 / 6720};
  }
  const Scalar s = sin(theta);
  const Scalar c = cos(theta);
  const Scalar h = sin(theta / 2);
  return {(theta * c - s) / (t2 * theta), (theta * s - 4 * h * h) / (t2 * t2)};
}

}  // namespace

template <typename Scalar>
Matrix3<Scalar> exp_to_rotmat(const Vector3<Scalar>& v) {
  require_finite(v, "exp_to_rotmat");
  const auto [a, b] = rodrigues_coefficients(v.norm());
  const Matrix3<Scalar> K = skew(v);
  return Matrix3<Scalar>::Identity() + a * K + b * K * K;
}

template <typename Scalar>
std::array<Matrix3<Scalar>, 3> exp_to_rotmat_derivatives(const Vector3<Scalar>& v) {
  require_finite(v, "exp_to_rotmat_derivatives");
  const Scalar theta = v.norm();
  const auto [a, b] = rodrigues_coefficients(theta);
  const auto [da, db] = rodrigues_derivative_coefficients(theta);
  const Matrix3<Scalar> K = skew(v);
  const Matrix3<Scalar> K2 = K * K;
  std::array<Matrix3<Scalar>, 3> out;
  for (int k = 0; k < 3; ++k) {
    const Matrix3<Scalar> E = skew<Scalar>(Vector3<Scalar>::Unit(k));
    out[static_cast<std::size_t>(k)] =
        a * E + b * (E * K + K * E) + (da * v[k]) * K + (db * v[k]) * K2;
  }
  return out;
}

template <typename Scalar>
Vector3<Scalar> rotmat_to_exp(const Matrix3<Scalar>& R) {
  using std::atan2;
  using std::sqrt;
  const Scalar tol = std::max(Scalar(1e-6), 64 * std::numeric_limits<Scalar>::epsilon());
  if (!R.allFinite() || (R.transpose() * R - Matrix3<Scalar>::Identity()).norm() > tol ||
      std::abs(R.determinant() - 1) > tol) {
    throw std::invalid_argument("rotmat_to_exp: matrix is not a rotation");
  }
  const Vector3<Scalar> w(R(2, 1) - R(1, 2), R(0, 2) - R(2, 0), R(1, 0) - R(0, 1));
  const Scalar sin_theta = w.norm() / 2;
  const Scalar cos_theta = (R.trace() - 1) / 2;
  const Scalar theta = atan2(sin_theta, cos_theta);

  if (cos_theta > Scalar(-0.9)) {
    // theta / sin(theta) -> 1 + theta^2 / 6 as theta -> 0
    const Scalar scale =
        theta < Scalar(1e-8) ? Scalar(0.5) * (1 + theta * theta / 6) : theta / (2 * sin_theta);
    return scale * w;
  }

  // Near pi the antisymmetric part vanishes; recover the axis from the
  // symmetric part (a a^T = (S - cos I) / (1 - cos)) via its largest diagonal.
  const Matrix3<Scalar> outer =
      ((R + R.transpose()) / 2 - cos_theta * Matrix3<Scalar>::Identity()) / (1 - cos_theta);
  Index k = 0;
  outer.diagonal().maxCoeff(&k);
  Vector3<Scalar> axis = outer.col(k) / sqrt(outer(k, k));
  axis.normalize();
  if (axis.dot(w) < 0) axis = -axis;
  return theta * axis;
}

template <typename Scalar>
Vector3<Scalar> canonicalize(const Vector3<Scalar>& v) {
  require_finite(v, "canonicalize");
  constexpr Scalar pi = std::numbers::pi_v<Scalar>;
  const Scalar theta = v.norm();
  if (theta <= pi) return v;
  Vector3<Scalar> axis = v / theta;
  Scalar reduced = std::fmod(theta, 2 * pi);
  if (reduced > pi) {
    reduced = 2 * pi - reduced;
    axis = -axis;
  }
  return axis * reduced;
}

Skeleton::Skeleton(std::vector<std::string> names, std::vector<int> parents,
                   Eigen::Matrix3Xd offsets)
    : names_(std::move(names)), parents_(std::move(parents)), offsets_(std::move(offsets)) {
  const auto n = parents_.size();
  if (n == 0) throw ValidationError("skeleton: no joints");
  if (names_.size() != n || static_cast<std::size_t>(offsets_.cols()) != n) {
    throw ValidationError("skeleton: names/parents/offsets sizes differ (" +
                          std::to_string(names_.size()) + "/" + std::to_string(n) + "/" +
                          std::to_string(offsets_.cols()) + ")");
  }
  if (parents_[0] != -1) throw ValidationError("skeleton: joint 0 must be the root");
  for (std::size_t j = 1; j < n; ++j) {
    const int p = parents_[j];
    if (p < 0) throw ValidationError("skeleton: more than one root (joint " + std::to_string(j) + ")");
    if (static_cast<std::size_t>(p) >= j) {
      throw ValidationError("skeleton: parents[" + std::to_string(j) + "]=" + std::to_string(p) +
                            " is not topologically ordered");
    }
    if (!(offsets_.col(static_cast<Index>(j)).norm() > 0)) {
      throw ValidationError("skeleton: zero-length bone at joint " + std::to_string(j));
    }
  }
  if (!offsets_.allFinite()) throw ValidationError("skeleton: non-finite offsets");
}

Skeleton Skeleton::h36m17() {
  std::vector<std::string> names = {"Hip",    "RHip",      "RKnee",  "RFoot",  "LHip",  "LKnee",
                                    "LFoot",  "Spine",     "Thorax", "Neck",   "Head",  "LShoulder",
                                    "LElbow", "LWrist",    "RShoulder", "RElbow", "RWrist"};
  std::vector<int> parents = {-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15};
  Eigen::Matrix3Xd offsets(3, 17);
  offsets.col(0) << 0, 0, 0;
  offsets.col(1) << -0.13, 0, 0;
  offsets.col(2) << 0, -0.44, 0;
  offsets.col(3) << 0, -0.44, 0;
  offsets.col(4) << 0.13, 0, 0;
  offsets.col(5) << 0, -0.44, 0;
  offsets.col(6) << 0, -0.44, 0;
  offsets.col(7) << 0, 0.23, 0;
  offsets.col(8) << 0, 0.25, 0;
  offsets.col(9) << 0, 0.12, 0;
  offsets.col(10) << 0, 0.11, 0;
  offsets.col(11) << 0.15, 0, 0;
  offsets.col(12) << 0.28, 0, 0;
  offsets.col(13) << 0.25, 0, 0;
  offsets.col(14) << -0.15, 0, 0;
  offsets.col(15) << -0.28, 0, 0;
  offsets.col(16) << -0.25, 0, 0;
  return Skeleton(std::move(names), std::move(parents), std::move(offsets));
}

Skeleton Skeleton::h36m_prefix(Index n) {
  const Skeleton full = h36m17();
  if (n < 1 || n > full.n_joint()) {
    throw std::invalid_argument("h36m_prefix: joint count must be in [1, 17]");
  }
  const auto count = static_cast<std::size_t>(n);
  return Skeleton({full.names_.begin(), full.names_.begin() + static_cast<std::ptrdiff_t>(count)},
                  {full.parents_.begin(), full.parents_.begin() + static_cast<std::ptrdiff_t>(count)},
                  full.offsets_.leftCols(n));
}

namespace {

template <typename Scalar>
void check_pose(const Skeleton& skel, Index size, const char* op) {
  if (size != skel.pose_dim()) {
    throw std::invalid_argument(std::string(op) + ": pose has " + std::to_string(size) +
                                " values, skeleton needs " + std::to_string(skel.pose_dim()));
  }
}

}  // namespace

template <typename Scalar>
Vector<Scalar> fk_forward(const Skeleton& skel, const Eigen::Ref<const Vector<Scalar>>& pose) {
  check_pose<Scalar>(skel, pose.size(), "fk_forward");
  const Index n = skel.n_joint();
  std::vector<Matrix3<Scalar>> global(static_cast<std::size_t>(n));
  Vector<Scalar> points = Vector<Scalar>::Zero(3 * n);
  global[0] = exp_to_rotmat<Scalar>(pose.template segment<3>(0));
  for (Index j = 1; j < n; ++j) {
    const auto p = static_cast<std::size_t>(skel.parent(j));
    const auto ju = static_cast<std::size_t>(j);
    points.template segment<3>(3 * j) =
        points.template segment<3>(3 * static_cast<Index>(p)) +
        global[p] * skel.offsets().col(j).template cast<Scalar>();
    global[ju] = global[p] * exp_to_rotmat<Scalar>(pose.template segment<3>(3 * j));
  }
  return points;
}

template <typename Scalar>
Vector<Scalar> fk_backward(const Skeleton& skel, const Eigen::Ref<const Vector<Scalar>>& pose,
                           const Eigen::Ref<const Vector<Scalar>>& upstream) {
  check_pose<Scalar>(skel, pose.size(), "fk_backward");
  check_pose<Scalar>(skel, upstream.size(), "fk_backward");
  const auto n = static_cast<std::size_t>(skel.n_joint());

  std::vector<Matrix3<Scalar>> local(n);
  std::vector<Matrix3<Scalar>> global(n);
  for (std::size_t j = 0; j < n; ++j) {
    local[j] = exp_to_rotmat<Scalar>(pose.template segment<3>(3 * static_cast<Index>(j)));
    global[j] = j == 0 ? local[0] : global[static_cast<std::size_t>(skel.parent(static_cast<Index>(j)))] * local[j];
  }

  // Reverse sweep: children have larger indices, so each joint's point and
  // frame gradients are complete before it is visited.
  Eigen::Matrix<Scalar, 3, Eigen::Dynamic> grad_point = upstream.reshaped(3, static_cast<Index>(n));
  std::vector<Matrix3<Scalar>> grad_global(n, Matrix3<Scalar>::Zero());
  Vector<Scalar> grad_pose(3 * static_cast<Index>(n));
  for (std::size_t j = n; j-- > 0;) {
    const auto jj = static_cast<Index>(j);
    Matrix3<Scalar> grad_local;
    if (j == 0) {
      grad_local = grad_global[0];
    } else {
      const auto p = static_cast<std::size_t>(skel.parent(jj));
      const Vector3<Scalar> offset = skel.offsets().col(jj).template cast<Scalar>();
      grad_point.col(static_cast<Index>(p)) += grad_point.col(jj);
      grad_global[p] += grad_point.col(jj) * offset.transpose();
      grad_global[p] += grad_global[j] * local[j].transpose();
      grad_local = global[p].transpose() * grad_global[j];
    }
    const auto dR = exp_to_rotmat_derivatives<Scalar>(pose.template segment<3>(3 * jj));
    for (int k = 0; k < 3; ++k) {
      grad_pose[3 * jj + k] = grad_local.cwiseProduct(dR[static_cast<std::size_t>(k)]).sum();
    }
  }
  return grad_pose;
}

template <typename Scalar>
Matrix<Scalar> fk_motion(const Skeleton& skel, const Matrix<Scalar>& motion) {
  Matrix<Scalar> out(motion.rows(), motion.cols());
  for (Index t = 0; t < motion.cols(); ++t) out.col(t) = fk_forward<Scalar>(skel, motion.col(t));
  return out;
}

#define LMM_INSTANTIATE_KINEMATICS(S)                                                          \
  template Matrix3<S> exp_to_rotmat<S>(const Vector3<S>&);                                     \
  template Vector3<S> rotmat_to_exp<S>(const Matrix3<S>&);                                     \
  template Vector3<S> canonicalize<S>(const Vector3<S>&);                                      \
  template std::array<Matrix3<S>, 3> exp_to_rotmat_derivatives<S>(const Vector3<S>&);          \
  template Vector<S> fk_forward<S>(const Skeleton&, const Eigen::Ref<const Vector<S>>&);       \
  template Vector<S> fk_backward<S>(const Skeleton&, const Eigen::Ref<const Vector<S>>&,       \
                                    const Eigen::Ref<const Vector<S>>&);                       \
  template Matrix<S> fk_motion<S>(const Skeleton&, const Matrix<S>&);

LMM_INSTANTIATE_KINEMATICS(float)
LMM_INSTANTIATE_KINEMATICS(double)

}  // namespace lmm
