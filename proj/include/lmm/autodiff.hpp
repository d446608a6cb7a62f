#pragma once

#include "lmm/common.hpp"

#include <deque>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace lmm {
class Skeleton;
}

namespace lmm::ad {

// Reverse-mode differentiation over dense Eigen matrices.
//
// A Tape records every operation in insertion order; a Var is a handle to a
// node on one tape. backward() walks the nodes in reverse exactly once and
// accumulates gradients into the inputs of each op. Parameters are leaves
// bound to an external gradient sink so that a whole parameter tree can
// receive its gradients without an extra gather step.

template <typename Scalar>
class Tape;

template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<Scalar>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Matrix<Scalar>& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }

 private:
  Tape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

struct TapeOptions {
  // Every op result is checked for NaN/Inf.
  bool check_finite = true;
  // Test hook: the backward rule of this op is scaled by fault_scale.
  std::string fault_op;
  double fault_scale = 1.5;
};

template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using BackwardFn = std::function<void(const Mat& upstream)>;

  explicit Tape(TapeOptions options = {}) : options_(std::move(options)) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> constant(Mat value);
  /// Leaf whose gradient is read back with grad().
  Var<Scalar> leaf(Mat value);
  /// Leaf whose gradient is added into *grad_sink by backward(); a null sink
  /// makes the parameter behave as a constant.
  Var<Scalar> parameter(const Mat& value, Mat* grad_sink);

  /// Appends an op result. `backward` receives dL/d(result) and must call
  /// accumulate() for each input.
  Var<Scalar> push(const char* op, Mat value, bool requires_grad, BackwardFn backward);

  const Mat& value(std::size_t id) const { return nodes_[id].value; }
  const Mat& value(Var<Scalar> v) const { return nodes_[v.id()].value; }
  bool requires_grad(Var<Scalar> v) const { return nodes_[v.id()].requires_grad; }

  /// Gradient of the last backward() loss w.r.t. v (zeros if unreached).
  Mat grad(Var<Scalar> v) const;

  template <typename Derived>
  void accumulate(Var<Scalar> v, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[v.id()];
    if (!n.requires_grad) return;
    if (n.has_grad) {
      n.grad += g;
    } else {
      n.grad = g;
      n.has_grad = true;
    }
  }

  /// Throws std::invalid_argument unless `loss` is 1x1.
  void backward(Var<Scalar> loss);

  std::size_t size() const { return nodes_.size(); }
  const TapeOptions& options() const { return options_; }

  /// Label prepended to numeric diagnostics (e.g. the loss term being built).
  void set_scope(std::string scope) { scope_ = std::move(scope); }
  const std::string& scope() const { return scope_; }

 private:
  struct Node {
    const char* op = "";
    Mat value;
    Mat grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
  };

  std::deque<Node> nodes_;
  TapeOptions options_;
  std::string scope_;
};

template <typename Scalar>
const Matrix<Scalar>& Var<Scalar>::value() const {
  return tape_->value(id_);
}

// ---- elementary ops -------------------------------------------------------

template <typename Scalar> Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b);
template <typename Scalar> Var<Scalar> add(Var<Scalar> a, Var<Scalar> b);
template <typename Scalar> Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b);
template <typename Scalar> Var<Scalar> hadamard(Var<Scalar> a, Var<Scalar> b);
template <typename Scalar> Var<Scalar> scale(Var<Scalar> a, Scalar s);
template <typename Scalar> Var<Scalar> add_scalar(Var<Scalar> a, Scalar s);
/// a + bias * 1^T for a column vector `bias`.
template <typename Scalar> Var<Scalar> add_bias(Var<Scalar> a, Var<Scalar> bias);
/// Row-wise constant affine map: a(i, :) * scale(i) + shift(i).
template <typename Scalar>
Var<Scalar> affine_rows(Var<Scalar> a, const Vector<Scalar>& scale, const Vector<Scalar>& shift);

template <typename Scalar> Var<Scalar> tanh(Var<Scalar> a);
template <typename Scalar> Var<Scalar> sigmoid(Var<Scalar> a);
template <typename Scalar> Var<Scalar> relu(Var<Scalar> a);
template <typename Scalar> Var<Scalar> leaky_relu(Var<Scalar> a, Scalar slope);
template <typename Scalar> Var<Scalar> abs(Var<Scalar> a);

/// Inverted dropout. Identity when !train or rate == 0; `rng` is only drawn
/// from in the active case.
template <typename Scalar>
Var<Scalar> dropout(Var<Scalar> a, Scalar rate, bool train, std::mt19937_64* rng);

template <typename Scalar> Var<Scalar> concat_rows(std::span<const Var<Scalar>> parts);
template <typename Scalar> Var<Scalar> slice_rows(Var<Scalar> a, Index start, Index count);

/// Stacks T frames of shape (C x B) into one (C x T*B) matrix where sample b
/// occupies columns [b*T, (b+1)*T).
template <typename Scalar> Var<Scalar> stack_frames(std::span<const Var<Scalar>> frames);

/// Output length of a 1-D convolution with symmetric padding.
Index conv1d_output_length(Index length, Index kernel, Index stride, Index pad);

/// 1-D convolution over `batch` samples laid out as in stack_frames. The
/// weight has shape (C_out x kernel*C_in) with tap-major columns; padding is
/// by reflection. Throws std::invalid_argument if a sample is too short.
template <typename Scalar>
Var<Scalar> conv1d(Var<Scalar> x, Var<Scalar> weight, Var<Scalar> bias, Index batch, Index kernel,
                   Index stride, Index reflect_pad);

template <typename Scalar>
struct BatchNormRunning {
  Vector<Scalar>* mean = nullptr;
  Vector<Scalar>* var = nullptr;
  Scalar momentum = Scalar(0.9);
};

/// Per-row (channel) normalization over all columns. Train mode uses batch
/// statistics and, when `running` points somewhere, folds them into the
/// running averages; eval mode uses the running averages.
template <typename Scalar>
Var<Scalar> batch_norm(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta, bool train,
                       const Vector<Scalar>& eval_mean, const Vector<Scalar>& eval_var,
                       BatchNormRunning<Scalar> running = {}, Scalar eps = Scalar(1e-5));

template <typename Scalar> Var<Scalar> sum(Var<Scalar> a);
template <typename Scalar> Var<Scalar> mean(Var<Scalar> a);
template <typename Scalar> Var<Scalar> sum_sq(Var<Scalar> a);
/// mean((a - target)^2)
template <typename Scalar> Var<Scalar> mean_sq_offset(Var<Scalar> a, Scalar target);

/// Euclidean norms of consecutive row groups: (G*k x B) -> (k x B). The
/// subgradient at a zero vector is taken as zero.
template <typename Scalar> Var<Scalar> group_norms(Var<Scalar> a, Index group);

/// Forward kinematics on every column (one pose per column).
template <typename Scalar> Var<Scalar> forward_kinematics(Var<Scalar> poses, const Skeleton& skel);

/// Kernel two-sample statistic with the inverse multiquadric kernel
/// k(x, y) = C / (C + |x - y|^2) between the columns of `codes` and `prior`.
/// Unbiased (off-diagonal U-statistic) or biased (V-statistic) form.
template <typename Scalar>
Var<Scalar> mmd_imq(Var<Scalar> codes, const Matrix<Scalar>& prior, Scalar C, bool unbiased = true);

template <typename Scalar> Var<Scalar> operator+(Var<Scalar> a, Var<Scalar> b) { return add(a, b); }
template <typename Scalar> Var<Scalar> operator-(Var<Scalar> a, Var<Scalar> b) { return sub(a, b); }
template <typename Scalar> Var<Scalar> operator*(Var<Scalar> a, Var<Scalar> b) { return matmul(a, b); }
template <typename Scalar> Var<Scalar> operator*(Scalar s, Var<Scalar> a) { return scale(a, s); }

// ---- recurrent cell --------------------------------------------------------

/// GRU weights with the three gates stacked as [reset; update; candidate]:
/// W is (3h x in), U is (3h x h), biases are (3h x 1).
template <typename T>
struct GruBlock {
  T W, U, b_in, b_h;
};

/// r = sig(Wr x + br + Ur h + bhr), u = sig(Wu x + bu + Uu h + bhu),
/// n = tanh(Wn x + bn + r * (Un h + bhn)), h' = (1 - u) * n + u * h.
template <typename Scalar>
Var<Scalar> gru_cell(Var<Scalar> x, Var<Scalar> h, const GruBlock<Var<Scalar>>& p);

}  // namespace lmm::ad
