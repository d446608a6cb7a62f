#pragma once

// Independent reference implementations used by the tests. None of these
// call into the library's math; they are written the slow, obvious way.

#include "lmm/kinematics.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace oracle {

using Eigen::Index;
using Eigen::Matrix3d;
using Eigen::MatrixXd;
using Eigen::Vector3d;
using Eigen::VectorXd;

inline double pi() { return std::acos(-1.0); }

/// Rotation by |v| about v/|v| through a unit quaternion.
inline Matrix3d quat_rotation(const Vector3d& v) {
  const double theta = v.norm();
  if (theta == 0) return Matrix3d::Identity();
  const Vector3d axis = v / theta;
  const double w = std::cos(theta / 2);
  const double x = axis.x() * std::sin(theta / 2);
  const double y = axis.y() * std::sin(theta / 2);
  const double z = axis.z() * std::sin(theta / 2);
  Matrix3d R;
  R << 1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w),
       2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
       2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y);
  return R;
}

/// Global 4x4 transform per joint, composed parent-first; positions are the
/// translation columns.
inline VectorXd matrix_stack_fk(const lmm::Skeleton& skel, const VectorXd& pose) {
  const Index J = skel.n_joint();
  std::vector<Eigen::Matrix4d> global(static_cast<std::size_t>(J));
  VectorXd out(3 * J);
  for (Index j = 0; j < J; ++j) {
    Eigen::Matrix4d local = Eigen::Matrix4d::Identity();
    local.topLeftCorner<3, 3>() = quat_rotation(pose.segment<3>(3 * j));
    local.topRightCorner<3, 1>() = skel.offsets().col(j);
    const int p = skel.parent(j);
    if (p < 0) {
      local.topRightCorner<3, 1>().setZero();
      global[static_cast<std::size_t>(j)] = local;
    } else {
      global[static_cast<std::size_t>(j)] = global[static_cast<std::size_t>(p)] * local;
    }
    out.segment<3>(3 * j) = global[static_cast<std::size_t>(j)].topRightCorner<3, 1>();
  }
  return out;
}

/// Central differences of a scalar function of a vector.
inline VectorXd numeric_gradient(const std::function<double(const VectorXd&)>& f, VectorXd x, double h = 1e-5) {
  VectorXd g(x.size());
  for (Index i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

inline double max_rel_error(const VectorXd& a, const VectorXd& b) {
  const double scale = std::max({a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff(), 1e-12});
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

/// Sum over frames and joints of |a_tj - b_tj|, divided by frames * batch.
inline double angle_loss(const std::vector<MatrixXd>& target, const std::vector<MatrixXd>& rec) {
  double total = 0;
  const Index frames = target.front().cols();
  for (std::size_t b = 0; b < target.size(); ++b) {
    for (Index t = 0; t < frames; ++t) {
      for (Index j = 0; j < target[b].rows() / 3; ++j) {
        double sq = 0;
        for (int k = 0; k < 3; ++k) {
          const double d = rec[b](3 * j + k, t) - target[b](3 * j + k, t);
          sq += d * d;
        }
        total += std::sqrt(sq);
      }
    }
  }
  return total / static_cast<double>(frames * static_cast<Index>(target.size()));
}

inline std::vector<MatrixXd> positions(const lmm::Skeleton& skel, const std::vector<MatrixXd>& motions) {
  std::vector<MatrixXd> out;
  for (const auto& m : motions) {
    MatrixXd p(m.rows(), m.cols());
    for (Index t = 0; t < m.cols(); ++t) p.col(t) = matrix_stack_fk(skel, m.col(t));
    out.push_back(p);
  }
  return out;
}

inline double imq(const VectorXd& x, const VectorXd& y, double C) { return C / (C + (x - y).squaredNorm()); }

/// Unbiased (or biased) MMD by explicit double sums over columns.
inline double mmd(const MatrixXd& z, const MatrixXd& p, double C, bool unbiased = true) {
  const Index n = z.cols();
  const Index m = p.cols();
  double zz = 0, pp = 0, zp = 0;
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      if (unbiased && i == j) continue;
      zz += imq(z.col(i), z.col(j), C);
    }
  }
  for (Index i = 0; i < m; ++i) {
    for (Index j = 0; j < m; ++j) {
      if (unbiased && i == j) continue;
      pp += imq(p.col(i), p.col(j), C);
    }
  }
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < m; ++j) zp += imq(z.col(i), p.col(j), C);
  }
  const double dn = unbiased ? static_cast<double>(n * (n - 1)) : static_cast<double>(n * n);
  const double dm = unbiased ? static_cast<double>(m * (m - 1)) : static_cast<double>(m * m);
  return zz / dn + pp / dm - 2 * zp / static_cast<double>(n * m);
}

struct Lsgan {
  double d, g;
};

inline Lsgan lsgan(const std::vector<double>& real, const std::vector<double>& fake) {
  double fake_sq = 0, real_off = 0, fake_off = 0;
  for (double f : fake) {
    fake_sq += f * f;
    fake_off += (f - 1) * (f - 1);
  }
  for (double r : real) real_off += (r - 1) * (r - 1);
  const double nf = static_cast<double>(fake.size());
  const double nr = static_cast<double>(real.size());
  return {0.5 * fake_sq / nf + 0.5 * real_off / nr, 0.5 * fake_off / nf};
}

/// Per-interval mean over frames of the summed joint error, then mean over
/// motions. `err(m, t)` gives the summed error of motion m at frame t.
inline std::vector<double> interval_means(Index n_motions, Index frames, const std::function<double(Index, Index)>& err) {
  std::vector<double> out(5, 0.0);
  for (int k = 0; k < 5; ++k) {
    const Index begin = k * frames / 5;
    const Index end = (k + 1) * frames / 5;
    for (Index m = 0; m < n_motions; ++m) {
      double s = 0;
      for (Index t = begin; t < end; ++t) s += err(m, t);
      out[static_cast<std::size_t>(k)] += s / static_cast<double>(end - begin);
    }
    out[static_cast<std::size_t>(k)] /= static_cast<double>(n_motions);
  }
  return out;
}

inline MatrixXd random_matrix(Index rows, Index cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  MatrixXd m(rows, cols);
  for (Index j = 0; j < cols; ++j) {
    for (Index i = 0; i < rows; ++i) m(i, j) = g(rng);
  }
  return m;
}

/// Random rotation vector with angle uniform in (lo, hi).
inline Vector3d random_rotation(std::mt19937_64& rng, double lo, double hi) {
  std::normal_distribution<double> g;
  Vector3d axis;
  do axis = Vector3d(g(rng), g(rng), g(rng));
  while (axis.norm() < 1e-6);
  std::uniform_real_distribution<double> angle(lo, hi);
  return axis.normalized() * angle(rng);
}

inline VectorXd random_pose(Index joints, std::mt19937_64& rng, double max_angle = 3.0) {
  VectorXd pose(3 * joints);
  for (Index j = 0; j < joints; ++j) pose.segment<3>(3 * j) = random_rotation(rng, 0.0, max_angle);
  return pose;
}

/// Number of sign changes of x - mean(x).
inline int zero_crossings(const VectorXd& x) {
  const VectorXd c = x.array() - x.mean();
  int n = 0;
  for (Index i = 1; i < c.size(); ++i) n += (c[i - 1] < 0) != (c[i] < 0);
  return n;
}

}  // namespace oracle
