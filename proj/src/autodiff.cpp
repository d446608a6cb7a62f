#include "lmm/autodiff.hpp"

#include "lmm/kinematics.hpp"

#include <cmath>

namespace lmm::ad {
namespace {

void require_shape(bool ok, const char* op, const std::string& detail) {
  if (!ok) throw ShapeError(std::string(op) + ": shape mismatch, " + detail);
}

template <typename Scalar>
std::string dims_of(Var<Scalar> v) {
  return dims(v.rows(), v.cols());
}

template <typename Scalar>
Tape<Scalar>& same_tape(Var<Scalar> a, Var<Scalar> b, const char* op) {
  if (&a.tape() != &b.tape()) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
  return a.tape();
}

// The node about to be pushed gets this id; closures refer to their own
// output through it.
template <typename Scalar>
Var<Scalar> next_var(Tape<Scalar>& t) {
  return Var<Scalar>(&t, t.size());
}

}  // namespace

template <typename Scalar>
Var<Scalar> Tape<Scalar>::constant(Mat value) {
  return push("constant", std::move(value), false, {});
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::leaf(Mat value) {
  return push("leaf", std::move(value), true, {});
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::parameter(const Mat& value, Mat* grad_sink) {
  if (grad_sink == nullptr) return push("parameter", value, false, {});
  if (grad_sink->rows() != value.rows() || grad_sink->cols() != value.cols()) {
    throw ShapeError("parameter: gradient sink " + dims(*grad_sink) + " vs value " + dims(value));
  }
  return push("parameter", value, true, [grad_sink](const Mat& g) { *grad_sink += g; });
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::push(const char* op, Mat value, bool requires_grad, BackwardFn backward) {
  if (options_.check_finite && !value.allFinite()) {
    throw NumericError((scope_.empty() ? std::string() : scope_ + ": ") + "op '" + op +
                       "' produced non-finite values");
  }
  Node node;
  node.op = op;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  if (requires_grad && backward) {
    if (!options_.fault_op.empty() && options_.fault_op == op) {
      const auto s = static_cast<Scalar>(options_.fault_scale);
      node.backward = [fn = std::move(backward), s](const Mat& g) { fn(s * g); };
    } else {
      node.backward = std::move(backward);
    }
  }
  nodes_.push_back(std::move(node));
  return Var<Scalar>(this, nodes_.size() - 1);
}

template <typename Scalar>
typename Tape<Scalar>::Mat Tape<Scalar>::grad(Var<Scalar> v) const {
  const Node& n = nodes_[v.id()];
  if (n.has_grad) return n.grad;
  return Mat::Zero(n.value.rows(), n.value.cols());
}

template <typename Scalar>
void Tape<Scalar>::backward(Var<Scalar> loss) {
  if (&loss.tape() != this) throw std::invalid_argument("backward: loss belongs to another tape");
  const Node& root = nodes_[loss.id()];
  if (root.value.rows() != 1 || root.value.cols() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got " + dims(root.value));
  }
  for (Node& n : nodes_) n.has_grad = false;
  accumulate(loss, Mat::Ones(1, 1));
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.has_grad && n.backward) n.backward(n.grad);
  }
}

// ---- elementary ops -------------------------------------------------------

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  auto& t = same_tape(a, b, "matmul");
  require_shape(a.cols() == b.rows(), "matmul", dims_of(a) + " * " + dims_of(b));
  return t.push("matmul", a.value() * b.value(), t.requires_grad(a) || t.requires_grad(b),
                [a, b](const Matrix<Scalar>& g) {
                  auto& tp = a.tape();
                  if (tp.requires_grad(a)) tp.accumulate(a, g * b.value().transpose());
                  if (tp.requires_grad(b)) tp.accumulate(b, a.value().transpose() * g);
                });
}

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  auto& t = same_tape(a, b, "add");
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "add", dims_of(a) + " + " + dims_of(b));
  return t.push("add", a.value() + b.value(), t.requires_grad(a) || t.requires_grad(b),
                [a, b](const Matrix<Scalar>& g) {
                  a.tape().accumulate(a, g);
                  a.tape().accumulate(b, g);
                });
}

template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b) {
  auto& t = same_tape(a, b, "sub");
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "sub", dims_of(a) + " - " + dims_of(b));
  return t.push("sub", a.value() - b.value(), t.requires_grad(a) || t.requires_grad(b),
                [a, b](const Matrix<Scalar>& g) {
                  a.tape().accumulate(a, g);
                  a.tape().accumulate(b, -g);
                });
}

template <typename Scalar>
Var<Scalar> hadamard(Var<Scalar> a, Var<Scalar> b) {
  auto& t = same_tape(a, b, "hadamard");
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard",
                dims_of(a) + " .* " + dims_of(b));
  return t.push("hadamard", a.value().cwiseProduct(b.value()),
                t.requires_grad(a) || t.requires_grad(b), [a, b](const Matrix<Scalar>& g) {
                  auto& tp = a.tape();
                  if (tp.requires_grad(a)) tp.accumulate(a, g.cwiseProduct(b.value()));
                  if (tp.requires_grad(b)) tp.accumulate(b, g.cwiseProduct(a.value()));
                });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s) {
  auto& t = a.tape();
  return t.push("scale", s * a.value(), t.requires_grad(a),
                [a, s](const Matrix<Scalar>& g) { a.tape().accumulate(a, s * g); });
}

template <typename Scalar>
Var<Scalar> add_scalar(Var<Scalar> a, Scalar s) {
  auto& t = a.tape();
  return t.push("add_scalar", (a.value().array() + s).matrix(), t.requires_grad(a),
                [a](const Matrix<Scalar>& g) { a.tape().accumulate(a, g); });
}

template <typename Scalar>
Var<Scalar> add_bias(Var<Scalar> a, Var<Scalar> bias) {
  auto& t = same_tape(a, bias, "add_bias");
  require_shape(bias.cols() == 1 && bias.rows() == a.rows(), "add_bias",
                dims_of(a) + " + bias " + dims_of(bias));
  Matrix<Scalar> out = a.value();
  out.colwise() += bias.value().col(0);
  return t.push("add_bias", std::move(out), t.requires_grad(a) || t.requires_grad(bias),
                [a, bias](const Matrix<Scalar>& g) {
                  auto& tp = a.tape();
                  tp.accumulate(a, g);
                  if (tp.requires_grad(bias)) tp.accumulate(bias, g.rowwise().sum());
                });
}

template <typename Scalar>
Var<Scalar> affine_rows(Var<Scalar> a, const Vector<Scalar>& scale_v, const Vector<Scalar>& shift) {
  require_shape(scale_v.size() == a.rows() && shift.size() == a.rows(), "affine_rows",
                dims_of(a) + " with scale/shift of length " + std::to_string(scale_v.size()) + "/" +
                    std::to_string(shift.size()));
  auto& t = a.tape();
  Matrix<Scalar> out = (a.value().array().colwise() * scale_v.array()).matrix();
  out.colwise() += shift;
  return t.push("affine_rows", std::move(out), t.requires_grad(a),
                [a, scale_v](const Matrix<Scalar>& g) {
                  a.tape().accumulate(a, (g.array().colwise() * scale_v.array()).matrix());
                });
}

template <typename Scalar>
Var<Scalar> tanh(Var<Scalar> a) {
  auto& t = a.tape();
  const Var<Scalar> out = next_var(t);
  return t.push("tanh", a.value().array().tanh().matrix(), t.requires_grad(a),
                [a, out](const Matrix<Scalar>& g) {
                  const auto& y = out.value().array();
                  a.tape().accumulate(a, (g.array() * (1 - y * y)).matrix());
                });
}

template <typename Scalar>
Var<Scalar> sigmoid(Var<Scalar> a) {
  auto& t = a.tape();
  const Var<Scalar> out = next_var(t);
  Matrix<Scalar> y = (1 / (1 + (-a.value().array()).exp())).matrix();
  return t.push("sigmoid", std::move(y), t.requires_grad(a), [a, out](const Matrix<Scalar>& g) {
    const auto& y = out.value().array();
    a.tape().accumulate(a, (g.array() * y * (1 - y)).matrix());
  });
}

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> a) {
  auto& t = a.tape();
  return t.push("relu", a.value().cwiseMax(Scalar(0)), t.requires_grad(a),
                [a](const Matrix<Scalar>& g) {
                  a.tape().accumulate(
                      a, (a.value().array() > 0).select(g, Matrix<Scalar>::Zero(g.rows(), g.cols())));
                });
}

template <typename Scalar>
Var<Scalar> leaky_relu(Var<Scalar> a, Scalar slope) {
  auto& t = a.tape();
  Matrix<Scalar> y = (a.value().array() > 0).select(a.value(), slope * a.value());
  return t.push("leaky_relu", std::move(y), t.requires_grad(a), [a, slope](const Matrix<Scalar>& g) {
    a.tape().accumulate(a, (a.value().array() > 0).select(g, slope * g));
  });
}

template <typename Scalar>
Var<Scalar> abs(Var<Scalar> a) {
  auto& t = a.tape();
  return t.push("abs", a.value().cwiseAbs(), t.requires_grad(a), [a](const Matrix<Scalar>& g) {
    a.tape().accumulate(a, g.cwiseProduct(a.value().unaryExpr([](Scalar x) {
      return x > 0 ? Scalar(1) : (x < 0 ? Scalar(-1) : Scalar(0));
    })));
  });
}

template <typename Scalar>
Var<Scalar> dropout(Var<Scalar> a, Scalar rate, bool train, std::mt19937_64* rng) {
  if (!train || rate == Scalar(0)) return a;
  if (!(rate > 0 && rate < 1)) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  if (rng == nullptr) throw std::invalid_argument("dropout: train mode needs an rng");
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  const Scalar keep_scale = 1 / (1 - rate);
  Matrix<Scalar> mask(a.rows(), a.cols());
  for (Index j = 0; j < mask.cols(); ++j) {
    for (Index i = 0; i < mask.rows(); ++i) {
      mask(i, j) = uniform(*rng) < static_cast<double>(rate) ? Scalar(0) : keep_scale;
    }
  }
  auto& t = a.tape();
  return t.push("dropout", a.value().cwiseProduct(mask), t.requires_grad(a),
                [a, mask](const Matrix<Scalar>& g) { a.tape().accumulate(a, g.cwiseProduct(mask)); });
}

template <typename Scalar>
Var<Scalar> concat_rows(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  auto& t = parts.front().tape();
  const Index cols = parts.front().cols();
  Index rows = 0;
  bool needs = false;
  for (const auto& p : parts) {
    require_shape(p.cols() == cols, "concat_rows", "column counts " + std::to_string(cols) + " vs " +
                                                       std::to_string(p.cols()));
    rows += p.rows();
    needs = needs || t.requires_grad(p);
  }
  Matrix<Scalar> out(rows, cols);
  Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  std::vector<Var<Scalar>> inputs(parts.begin(), parts.end());
  return t.push("concat_rows", std::move(out), needs, [inputs](const Matrix<Scalar>& g) {
    Index row = 0;
    for (const auto& p : inputs) {
      p.tape().accumulate(p, g.middleRows(row, p.rows()));
      row += p.rows();
    }
  });
}

template <typename Scalar>
Var<Scalar> slice_rows(Var<Scalar> a, Index start, Index count) {
  require_shape(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows",
                "rows [" + std::to_string(start) + ", " + std::to_string(start + count) + ") of " +
                    dims_of(a));
  auto& t = a.tape();
  return t.push("slice_rows", a.value().middleRows(start, count), t.requires_grad(a),
                [a, start, count](const Matrix<Scalar>& g) {
                  Matrix<Scalar> full = Matrix<Scalar>::Zero(a.rows(), a.cols());
                  full.middleRows(start, count) = g;
                  a.tape().accumulate(a, full);
                });
}

template <typename Scalar>
Var<Scalar> stack_frames(std::span<const Var<Scalar>> frames) {
  if (frames.empty()) throw std::invalid_argument("stack_frames: no frames");
  auto& t = frames.front().tape();
  const Index channels = frames.front().rows();
  const Index batch = frames.front().cols();
  const auto steps = static_cast<Index>(frames.size());
  bool needs = false;
  for (const auto& f : frames) {
    require_shape(f.rows() == channels && f.cols() == batch, "stack_frames",
                  dims_of(f) + " vs " + dims(channels, batch));
    needs = needs || t.requires_grad(f);
  }
  Matrix<Scalar> out(channels, steps * batch);
  for (Index s = 0; s < steps; ++s) {
    const auto& v = frames[static_cast<std::size_t>(s)].value();
    for (Index b = 0; b < batch; ++b) out.col(b * steps + s) = v.col(b);
  }
  std::vector<Var<Scalar>> inputs(frames.begin(), frames.end());
  return t.push("stack_frames", std::move(out), needs, [inputs, steps, batch](const Matrix<Scalar>& g) {
    for (Index s = 0; s < steps; ++s) {
      const auto& f = inputs[static_cast<std::size_t>(s)];
      if (!f.tape().requires_grad(f)) continue;
      Matrix<Scalar> gf(g.rows(), batch);
      for (Index b = 0; b < batch; ++b) gf.col(b) = g.col(b * steps + s);
      f.tape().accumulate(f, gf);
    }
  });
}

Index conv1d_output_length(Index length, Index kernel, Index stride, Index pad) {
  const Index span = length + 2 * pad - kernel;
  return span < 0 ? 0 : span / stride + 1;
}

template <typename Scalar>
Var<Scalar> conv1d(Var<Scalar> x, Var<Scalar> weight, Var<Scalar> bias, Index batch, Index kernel,
                   Index stride, Index reflect_pad) {
  auto& t = same_tape(x, weight, "conv1d");
  if (batch < 1 || kernel < 1 || stride < 1 || reflect_pad < 0) {
    throw std::invalid_argument("conv1d: batch, kernel and stride must be positive");
  }
  require_shape(x.cols() % batch == 0, "conv1d",
                "input " + dims_of(x) + " does not split into " + std::to_string(batch) + " samples");
  const Index c_in = x.rows();
  const Index length = x.cols() / batch;
  const Index c_out = weight.rows();
  require_shape(weight.cols() == kernel * c_in, "conv1d",
                "weight " + dims_of(weight) + " for kernel " + std::to_string(kernel) + " x " +
                    std::to_string(c_in) + " channels");
  require_shape(bias.rows() == c_out && bias.cols() == 1, "conv1d", "bias " + dims_of(bias));
  const Index out_len = conv1d_output_length(length, kernel, stride, reflect_pad);
  if (out_len < 1 || reflect_pad >= length) {
    throw std::invalid_argument("conv1d: input length " + std::to_string(length) +
                                " too short for kernel " + std::to_string(kernel) + ", stride " +
                                std::to_string(stride) + ", padding " + std::to_string(reflect_pad));
  }

  auto source = [length, reflect_pad, stride](Index o, Index tap) {
    Index s = o * stride - reflect_pad + tap;
    if (s < 0) s = -s;
    if (s >= length) s = 2 * (length - 1) - s;
    return s;
  };

  Matrix<Scalar> columns(kernel * c_in, out_len * batch);
  const auto& xv = x.value();
  for (Index b = 0; b < batch; ++b) {
    for (Index o = 0; o < out_len; ++o) {
      for (Index tap = 0; tap < kernel; ++tap) {
        columns.block(tap * c_in, b * out_len + o, c_in, 1) = xv.col(b * length + source(o, tap));
      }
    }
  }
  Matrix<Scalar> out = weight.value() * columns;
  out.colwise() += bias.value().col(0);

  const bool needs = t.requires_grad(x) || t.requires_grad(weight) || t.requires_grad(bias);
  return t.push("conv1d", std::move(out), needs,
                [x, weight, bias, columns = std::move(columns), batch, kernel, c_in, length, out_len,
                 source](const Matrix<Scalar>& g) {
                  auto& tp = x.tape();
                  if (tp.requires_grad(weight)) tp.accumulate(weight, g * columns.transpose());
                  if (tp.requires_grad(bias)) tp.accumulate(bias, g.rowwise().sum());
                  if (!tp.requires_grad(x)) return;
                  const Matrix<Scalar> gcol = weight.value().transpose() * g;
                  Matrix<Scalar> gx = Matrix<Scalar>::Zero(c_in, length * batch);
                  for (Index b = 0; b < batch; ++b) {
                    for (Index o = 0; o < out_len; ++o) {
                      for (Index tap = 0; tap < kernel; ++tap) {
                        gx.col(b * length + source(o, tap)) +=
                            gcol.block(tap * c_in, b * out_len + o, c_in, 1);
                      }
                    }
                  }
                  tp.accumulate(x, gx);
                });
}

template <typename Scalar>
Var<Scalar> batch_norm(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta, bool train,
                       const Vector<Scalar>& eval_mean, const Vector<Scalar>& eval_var,
                       BatchNormRunning<Scalar> running, Scalar eps) {
  auto& t = same_tape(x, gamma, "batch_norm");
  const Index c = x.rows();
  const Index n = x.cols();
  require_shape(gamma.rows() == c && gamma.cols() == 1 && beta.rows() == c && beta.cols() == 1,
                "batch_norm", "input " + dims_of(x) + ", gamma " + dims_of(gamma) + ", beta " +
                                  dims_of(beta));

  Vector<Scalar> mu;
  Vector<Scalar> var;
  if (train) {
    mu = x.value().rowwise().mean();
    var = (x.value().colwise() - mu).array().square().rowwise().mean().matrix();
    if (running.mean != nullptr && running.var != nullptr) {
      const Scalar m = running.momentum;
      const Scalar unbias = n > 1 ? Scalar(n) / Scalar(n - 1) : Scalar(1);
      *running.mean = m * *running.mean + (1 - m) * mu;
      *running.var = m * *running.var + (1 - m) * unbias * var;
    }
  } else {
    require_shape(eval_mean.size() == c && eval_var.size() == c, "batch_norm",
                  "running statistics of length " + std::to_string(eval_mean.size()));
    mu = eval_mean;
    var = eval_var;
  }
  const Vector<Scalar> inv_std = (var.array() + eps).rsqrt().matrix();
  Matrix<Scalar> xhat = ((x.value().colwise() - mu).array().colwise() * inv_std.array()).matrix();
  Matrix<Scalar> out = (xhat.array().colwise() * gamma.value().col(0).array()).matrix();
  out.colwise() += beta.value().col(0);

  const bool needs = t.requires_grad(x) || t.requires_grad(gamma) || t.requires_grad(beta);
  return t.push("batch_norm", std::move(out), needs,
                [x, gamma, beta, xhat = std::move(xhat), inv_std, train, n](const Matrix<Scalar>& g) {
                  auto& tp = x.tape();
                  if (tp.requires_grad(gamma)) tp.accumulate(gamma, g.cwiseProduct(xhat).rowwise().sum());
                  if (tp.requires_grad(beta)) tp.accumulate(beta, g.rowwise().sum());
                  if (!tp.requires_grad(x)) return;
                  const Matrix<Scalar> gxhat = (g.array().colwise() * gamma.value().col(0).array()).matrix();
                  if (!train) {
                    tp.accumulate(x, (gxhat.array().colwise() * inv_std.array()).matrix());
                    return;
                  }
                  const Vector<Scalar> sum_g = gxhat.rowwise().sum();
                  const Vector<Scalar> sum_gx = gxhat.cwiseProduct(xhat).rowwise().sum();
                  Matrix<Scalar> gx = Scalar(n) * gxhat;
                  gx.colwise() -= sum_g;
                  gx -= (xhat.array().colwise() * sum_gx.array()).matrix();
                  gx = (gx.array().colwise() * (inv_std.array() / Scalar(n))).matrix();
                  tp.accumulate(x, gx);
                });
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a) {
  auto& t = a.tape();
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  return t.push("sum", std::move(out), t.requires_grad(a), [a](const Matrix<Scalar>& g) {
    a.tape().accumulate(a, Matrix<Scalar>::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

template <typename Scalar>
Var<Scalar> mean(Var<Scalar> a) {
  auto& t = a.tape();
  const auto n = static_cast<Scalar>(a.value().size());
  if (a.value().size() == 0) throw ShapeError("mean: empty input");
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().sum() / n;
  return t.push("mean", std::move(out), t.requires_grad(a), [a, n](const Matrix<Scalar>& g) {
    a.tape().accumulate(a, Matrix<Scalar>::Constant(a.rows(), a.cols(), g(0, 0) / n));
  });
}

template <typename Scalar>
Var<Scalar> sum_sq(Var<Scalar> a) {
  auto& t = a.tape();
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().squaredNorm();
  return t.push("sum_sq", std::move(out), t.requires_grad(a), [a](const Matrix<Scalar>& g) {
    a.tape().accumulate(a, (2 * g(0, 0)) * a.value());
  });
}

template <typename Scalar>
Var<Scalar> mean_sq_offset(Var<Scalar> a, Scalar target) {
  auto& t = a.tape();
  if (a.value().size() == 0) throw ShapeError("mean_sq_offset: empty input");
  const auto n = static_cast<Scalar>(a.value().size());
  Matrix<Scalar> out(1, 1);
  out(0, 0) = (a.value().array() - target).square().sum() / n;
  return t.push("mean_sq_offset", std::move(out), t.requires_grad(a),
                [a, target, n](const Matrix<Scalar>& g) {
                  a.tape().accumulate(a, ((2 * g(0, 0) / n) * (a.value().array() - target)).matrix());
                });
}

template <typename Scalar>
Var<Scalar> group_norms(Var<Scalar> a, Index group) {
  require_shape(group > 0 && a.rows() % group == 0, "group_norms",
                dims_of(a) + " into groups of " + std::to_string(group));
  auto& t = a.tape();
  const Index k = a.rows() / group;
  Matrix<Scalar> out(k, a.cols());
  for (Index b = 0; b < a.cols(); ++b) {
    for (Index j = 0; j < k; ++j) out(j, b) = a.value().block(j * group, b, group, 1).norm();
  }
  const Var<Scalar> self = next_var(t);
  return t.push("group_norms", std::move(out), t.requires_grad(a),
                [a, self, group, k](const Matrix<Scalar>& g) {
                  const auto& norms = self.value();
                  Matrix<Scalar> ga = Matrix<Scalar>::Zero(a.rows(), a.cols());
                  for (Index b = 0; b < a.cols(); ++b) {
                    for (Index j = 0; j < k; ++j) {
                      if (norms(j, b) > 0) {
                        ga.block(j * group, b, group, 1) =
                            (g(j, b) / norms(j, b)) * a.value().block(j * group, b, group, 1);
                      }
                    }
                  }
                  a.tape().accumulate(a, ga);
                });
}

template <typename Scalar>
Var<Scalar> forward_kinematics(Var<Scalar> poses, const Skeleton& skel) {
  require_shape(poses.rows() == skel.pose_dim(), "forward_kinematics",
                dims_of(poses) + " for " + std::to_string(skel.n_joint()) + " joints");
  auto& t = poses.tape();
  const Skeleton* sk = &skel;
  return t.push("forward_kinematics", fk_motion<Scalar>(skel, poses.value()), t.requires_grad(poses),
                [poses, sk](const Matrix<Scalar>& g) {
                  Matrix<Scalar> gp(poses.rows(), poses.cols());
                  for (Index b = 0; b < poses.cols(); ++b) {
                    gp.col(b) = fk_backward<Scalar>(*sk, poses.value().col(b), g.col(b));
                  }
                  poses.tape().accumulate(poses, gp);
                });
}

template <typename Scalar>
Var<Scalar> mmd_imq(Var<Scalar> codes, const Matrix<Scalar>& prior, Scalar C, bool unbiased) {
  const Index n = codes.cols();
  const Index m = prior.cols();
  require_shape(prior.rows() == codes.rows(), "mmd_imq",
                "codes " + dims_of(codes) + " vs prior " + dims(prior));
  if (n < 2 || m < 2) throw std::invalid_argument("mmd_imq: both batches need at least 2 samples");
  if (!(C > 0)) throw std::invalid_argument("mmd_imq: kernel scale must be positive");
  const auto& z = codes.value();
  auto kernel = [C](auto&& x, auto&& y) { return C / (C + (x - y).squaredNorm()); };

  const Scalar w_zz = unbiased ? Scalar(1) / Scalar(n * (n - 1)) : Scalar(1) / Scalar(n * n);
  const Scalar w_pp = unbiased ? Scalar(1) / Scalar(m * (m - 1)) : Scalar(1) / Scalar(m * m);
  const Scalar w_zp = Scalar(2) / Scalar(n * m);
  Scalar zz = 0, pp = 0, zp = 0;
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      if (i != j || !unbiased) zz += kernel(z.col(i), z.col(j));
    }
  }
  for (Index i = 0; i < m; ++i) {
    for (Index j = 0; j < m; ++j) {
      if (i != j || !unbiased) pp += kernel(prior.col(i), prior.col(j));
    }
  }
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < m; ++j) zp += kernel(z.col(i), prior.col(j));
  }
  Matrix<Scalar> out(1, 1);
  out(0, 0) = w_zz * zz + w_pp * pp - w_zp * zp;

  auto& t = codes.tape();
  return t.push("mmd_imq", std::move(out), t.requires_grad(codes),
                [codes, prior, C, w_zz, w_zp](const Matrix<Scalar>& g) {
                  const auto& zv = codes.value();
                  // d/dx k(x, y) = -2 C (x - y) / (C + |x - y|^2)^2
                  auto dk = [C](const Vector<Scalar>& d) {
                    const Scalar den = C + d.squaredNorm();
                    return Vector<Scalar>((-2 * C / (den * den)) * d);
                  };
                  Matrix<Scalar> gz = Matrix<Scalar>::Zero(zv.rows(), zv.cols());
                  for (Index i = 0; i < zv.cols(); ++i) {
                    for (Index j = 0; j < zv.cols(); ++j) {
                      if (i != j) gz.col(i) += (2 * w_zz) * dk(zv.col(i) - zv.col(j));
                    }
                    for (Index j = 0; j < prior.cols(); ++j) gz.col(i) -= w_zp * dk(zv.col(i) - prior.col(j));
                  }
                  codes.tape().accumulate(codes, g(0, 0) * gz);
                });
}

template <typename Scalar>
Var<Scalar> gru_cell(Var<Scalar> x, Var<Scalar> h, const GruBlock<Var<Scalar>>& p) {
  const Index hidden = h.rows();
  require_shape(p.W.rows() == 3 * hidden && p.U.rows() == 3 * hidden && p.U.cols() == hidden,
                "gru_cell", "W " + dims_of(p.W) + ", U " + dims_of(p.U) + " for hidden size " +
                                std::to_string(hidden));
  require_shape(p.W.cols() == x.rows(), "gru_cell",
                "input " + dims_of(x) + " vs W " + dims_of(p.W));
  require_shape(x.cols() == h.cols(), "gru_cell", "input " + dims_of(x) + " vs hidden " + dims_of(h));
  const Var<Scalar> gi = add_bias(matmul(p.W, x), p.b_in);
  const Var<Scalar> gh = add_bias(matmul(p.U, h), p.b_h);
  const Var<Scalar> r = sigmoid(add(slice_rows(gi, 0, hidden), slice_rows(gh, 0, hidden)));
  const Var<Scalar> u = sigmoid(add(slice_rows(gi, hidden, hidden), slice_rows(gh, hidden, hidden)));
  const Var<Scalar> n = tanh(add(slice_rows(gi, 2 * hidden, hidden),
                                 hadamard(r, slice_rows(gh, 2 * hidden, hidden))));
  return add(n, hadamard(u, sub(h, n)));
}

#define LMM_INSTANTIATE_AUTODIFF(S)                                                             \
  template class Tape<S>;                                                                       \
  template Var<S> matmul<S>(Var<S>, Var<S>);                                                    \
  template Var<S> add<S>(Var<S>, Var<S>);                                                       \
  template Var<S> sub<S>(Var<S>, Var<S>);                                                       \
  template Var<S> hadamard<S>(Var<S>, Var<S>);                                                  \
  template Var<S> scale<S>(Var<S>, S);                                                          \
  template Var<S> add_scalar<S>(Var<S>, S);                                                     \
  template Var<S> add_bias<S>(Var<S>, Var<S>);                                                  \
  template Var<S> affine_rows<S>(Var<S>, const Vector<S>&, const Vector<S>&);                   \
  template Var<S> tanh<S>(Var<S>);                                                              \
  template Var<S> sigmoid<S>(Var<S>);                                                           \
  template Var<S> relu<S>(Var<S>);                                                              \
  template Var<S> leaky_relu<S>(Var<S>, S);                                                     \
  template Var<S> abs<S>(Var<S>);                                                               \
  template Var<S> dropout<S>(Var<S>, S, bool, std::mt19937_64*);                                \
  template Var<S> concat_rows<S>(std::span<const Var<S>>);                                      \
  template Var<S> slice_rows<S>(Var<S>, Index, Index);                                          \
  template Var<S> stack_frames<S>(std::span<const Var<S>>);                                     \
  template Var<S> conv1d<S>(Var<S>, Var<S>, Var<S>, Index, Index, Index, Index);                \
  template Var<S> batch_norm<S>(Var<S>, Var<S>, Var<S>, bool, const Vector<S>&,                 \
                                const Vector<S>&, BatchNormRunning<S>, S);                      \
  template Var<S> sum<S>(Var<S>);                                                               \
  template Var<S> mean<S>(Var<S>);                                                              \
  template Var<S> sum_sq<S>(Var<S>);                                                            \
  template Var<S> mean_sq_offset<S>(Var<S>, S);                                                 \
  template Var<S> group_norms<S>(Var<S>, Index);                                                \
  template Var<S> forward_kinematics<S>(Var<S>, const Skeleton&);                               \
  template Var<S> mmd_imq<S>(Var<S>, const Matrix<S>&, S, bool);                                \
  template Var<S> gru_cell<S>(Var<S>, Var<S>, const GruBlock<Var<S>>&);

LMM_INSTANTIATE_AUTODIFF(float)
LMM_INSTANTIATE_AUTODIFF(double)

}  // namespace lmm::ad
