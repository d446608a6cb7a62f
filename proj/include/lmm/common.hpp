#pragma once

#include <Eigen/Core>

#include <stdexcept>
#include <string>

namespace lmm {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using Vector3 = Eigen::Matrix<Scalar, 3, 1>;
template <typename Scalar>
using Matrix3 = Eigen::Matrix<Scalar, 3, 3>;

using Index = Eigen::Index;

// A motion clip in network or radian space: one column per frame, rows are
// the stacked per-joint exponential coordinates (3 * n_joint).
template <typename Scalar>
using Motion = Matrix<Scalar>;

/// Shape mismatch between operands; the message names the op and the dims.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Structurally valid input that violates a domain invariant.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed file contents.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A non-finite value appeared in a computation.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller broke a usage contract (e.g. non-deterministic gradient check).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string dims(Index rows, Index cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

/// Exact equality that is false (not undefined) on a shape mismatch.
template <typename A, typename B>
bool same(const Eigen::DenseBase<A>& a, const Eigen::DenseBase<B>& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.derived().array() == b.derived().array()).all();
}

template <typename Derived>
std::string dims(const Eigen::DenseBase<Derived>& m) {
  return dims(m.rows(), m.cols());
}

}  // namespace lmm
