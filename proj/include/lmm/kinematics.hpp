#pragma once

#include "lmm/common.hpp"

#include <array>
#include <string>
#include <vector>

namespace lmm {

// Rotation algebra on exponential coordinates v = axis * angle.

/// Rodrigues map. Non-finite input throws std::invalid_argument.
template <typename Scalar>
Matrix3<Scalar> exp_to_rotmat(const Vector3<Scalar>& v);

/// Inverse of exp_to_rotmat with the angle in [0, pi]. Throws
/// std::invalid_argument unless R is orthonormal with det +1 (to 1e-6).
template <typename Scalar>
Vector3<Scalar> rotmat_to_exp(const Matrix3<Scalar>& R);

/// Equivalent coordinates with angle reduced to [0, pi].
template <typename Scalar>
Vector3<Scalar> canonicalize(const Vector3<Scalar>& v);

/// Partial derivatives dR/dv_k, k = 0..2, of the Rodrigues map.
template <typename Scalar>
std::array<Matrix3<Scalar>, 3> exp_to_rotmat_derivatives(const Vector3<Scalar>& v);

template <typename Scalar>
Matrix3<Scalar> skew(const Vector3<Scalar>& v) {
  Matrix3<Scalar> S;
  S << 0, -v.z(), v.y(),
       v.z(), 0, -v.x(),
       -v.y(), v.x(), 0;
  return S;
}

/// Joint hierarchy in topological order (parent[j] < j, single root at 0).
/// Offsets are in meters, y-up.
class Skeleton {
 public:
  Skeleton() = default;
  Skeleton(std::vector<std::string> names, std::vector<int> parents,
           Eigen::Matrix3Xd offsets);

  Index n_joint() const { return static_cast<Index>(parents_.size()); }
  Index pose_dim() const { return 3 * n_joint(); }
  const std::vector<int>& parents() const { return parents_; }
  const std::vector<std::string>& names() const { return names_; }
  const Eigen::Matrix3Xd& offsets() const { return offsets_; }
  int parent(Index j) const { return parents_[static_cast<std::size_t>(j)]; }

  /// 17-joint Human3.6M-style layout (hip root, legs, spine, head, arms).
  static Skeleton h36m17();
  /// First n joints of h36m17(); any prefix of a topological order is valid.
  static Skeleton h36m_prefix(Index n);

  bool operator==(const Skeleton& other) const {
    return names_ == other.names_ && parents_ == other.parents_ && same(offsets_, other.offsets_);
  }

 private:
  std::vector<std::string> names_;
  std::vector<int> parents_;
  Eigen::Matrix3Xd offsets_;
};

/// Global joint positions (3 * n_joint stacked) for one pose. The root sits
/// at the origin; only rotations are modeled.
template <typename Scalar>
Vector<Scalar> fk_forward(const Skeleton& skel, const Eigen::Ref<const Vector<Scalar>>& pose);

/// Vector-Jacobian product of fk_forward: maps dL/dpositions to dL/dpose.
template <typename Scalar>
Vector<Scalar> fk_backward(const Skeleton& skel, const Eigen::Ref<const Vector<Scalar>>& pose,
                           const Eigen::Ref<const Vector<Scalar>>& upstream);

/// fk_forward applied to every column of a motion (one frame per column).
template <typename Scalar>
Matrix<Scalar> fk_motion(const Skeleton& skel, const Matrix<Scalar>& motion);

}  // namespace lmm
