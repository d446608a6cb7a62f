#include "lmm/losses.hpp"

#include <vector>

namespace lmm {

void LossWeights::validate() const {
  if (!(position >= 0 && manifold >= 0 && wasserstein >= 0 && adversarial >= 0)) {
    throw ValidationError("loss weights must be non-negative");
  }
}

double total_loss(const LossTerms<double>& parts, const LossWeights& w) {
  return parts.reconstruction + w.manifold * parts.manifold + w.wasserstein * parts.wasserstein +
         w.adversarial * parts.adversarial;
}

namespace {

template <typename Scalar>
void check_frames(std::span<const ad::Var<Scalar>> rec, std::span<const Matrix<Scalar>> target,
                  const char* op) {
  if (rec.empty() || rec.size() != target.size()) {
    throw ShapeError(std::string(op) + ": " + std::to_string(rec.size()) + " reconstructed vs " +
                     std::to_string(target.size()) + " target frames");
  }
  for (std::size_t t = 0; t < rec.size(); ++t) {
    if (rec[t].rows() != target[t].rows() || rec[t].cols() != target[t].cols()) {
      throw ShapeError(std::string(op) + ": frame " + std::to_string(t) + " is " +
                       dims(rec[t].rows(), rec[t].cols()) + " vs target " + dims(target[t]));
    }
  }
}

template <typename Scalar>
Scalar frame_average(std::span<const ad::Var<Scalar>> rec) {
  return Scalar(1) / static_cast<Scalar>(static_cast<Index>(rec.size()) * rec.front().cols());
}

}  // namespace

template <typename Scalar>
ad::Var<Scalar> angle_loss(std::span<const ad::Var<Scalar>> reconstructed,
                           std::span<const Matrix<Scalar>> target) {
  check_frames(reconstructed, target, "angle_loss");
  auto& tape = reconstructed.front().tape();
  std::optional<ad::Var<Scalar>> acc;
  for (std::size_t t = 0; t < reconstructed.size(); ++t) {
    const auto diff = ad::sub(reconstructed[t], tape.constant(target[t]));
    const auto term = ad::sum(ad::group_norms(diff, 3));
    acc = acc ? ad::add(*acc, term) : term;
  }
  return ad::scale(*acc, frame_average(reconstructed));
}

template <typename Scalar>
ad::Var<Scalar> position_loss(std::span<const ad::Var<Scalar>> reconstructed,
                              std::span<const Matrix<Scalar>> target_positions, const Skeleton& skel) {
  check_frames(reconstructed, target_positions, "position_loss");
  auto& tape = reconstructed.front().tape();
  std::optional<ad::Var<Scalar>> acc;
  for (std::size_t t = 0; t < reconstructed.size(); ++t) {
    const auto positions = ad::forward_kinematics(reconstructed[t], skel);
    const auto diff = ad::sub(positions, tape.constant(target_positions[t]));
    const auto term = ad::sum(ad::group_norms(diff, 3));
    acc = acc ? ad::add(*acc, term) : term;
  }
  return ad::scale(*acc, frame_average(reconstructed));
}

template <typename Scalar>
ad::Var<Scalar> manifold_loss(ad::Var<Scalar> z, ad::Var<Scalar> z_rot,
                              std::optional<ad::Var<Scalar>> z_vel) {
  auto total = ad::sum(ad::abs(ad::sub(z_rot, z)));
  if (z_vel) total = ad::add(total, ad::sum(ad::abs(ad::sub(*z_vel, z))));
  return ad::scale(total, Scalar(1) / static_cast<Scalar>(z.cols()));
}

template <typename Scalar>
ad::Var<Scalar> wasserstein_loss(ad::Var<Scalar> z, const Matrix<Scalar>& prior_samples,
                                 const KernelConfig& kernel, bool unbiased) {
  return ad::mmd_imq(z, prior_samples, static_cast<Scalar>(kernel.C), unbiased);
}

template <typename Scalar>
ad::Var<Scalar> generator_adversarial_loss(std::span<const ad::Var<Scalar>> fake_scores) {
  if (fake_scores.empty()) throw std::invalid_argument("generator_adversarial_loss: no fake scores");
  const auto fakes = ad::concat_rows(fake_scores);
  return ad::scale(ad::mean_sq_offset(fakes, Scalar(1)), Scalar(0.5));
}

template <typename Scalar>
ad::Var<Scalar> discriminator_adversarial_loss(ad::Var<Scalar> real_scores,
                                               std::span<const ad::Var<Scalar>> fake_scores) {
  if (fake_scores.empty()) throw std::invalid_argument("discriminator_adversarial_loss: no fake scores");
  const auto fakes = ad::concat_rows(fake_scores);
  return ad::add(ad::scale(ad::mean_sq_offset(fakes, Scalar(0)), Scalar(0.5)),
                 ad::scale(ad::mean_sq_offset(real_scores, Scalar(1)), Scalar(0.5)));
}

template <typename Scalar>
ReconstructionLoss<Scalar> motion_reconstruction_loss(std::span<const Motion<Scalar>> target,
                                                      std::span<const Motion<Scalar>> rec_rot,
                                                      std::span<const Motion<Scalar>> rec_vel,
                                                      const Skeleton& skel, double position_weight) {
  if (target.empty() || rec_rot.size() != target.size() ||
      (!rec_vel.empty() && rec_vel.size() != target.size())) {
    throw ShapeError("motion_reconstruction_loss: batch sizes differ");
  }
  const Index rows = target.front().rows();
  const Index frames = target.front().cols();
  const auto batch = static_cast<Index>(target.size());
  auto check = [&](const Motion<Scalar>& m) {
    if (m.rows() != rows || m.cols() != frames) {
      throw ShapeError("motion_reconstruction_loss: motion " + dims(m) + " vs " + dims(rows, frames));
    }
  };
  for (std::size_t b = 0; b < target.size(); ++b) {
    check(target[b]);
    check(rec_rot[b]);
    if (!rec_vel.empty()) check(rec_vel[b]);
  }

  auto gather = [&](std::span<const Motion<Scalar>> ms, Index t) {
    Matrix<Scalar> f(rows, batch);
    for (Index b = 0; b < batch; ++b) f.col(b) = ms[static_cast<std::size_t>(b)].col(t);
    return f;
  };

  ad::Tape<Scalar> tape;
  std::vector<Matrix<Scalar>> tgt, tgt_pos;
  std::vector<ad::Var<Scalar>> rot, vel;
  for (Index t = 0; t < frames; ++t) {
    tgt.push_back(gather(target, t));
    tgt_pos.push_back(fk_motion<Scalar>(skel, tgt.back()));
    rot.push_back(tape.constant(gather(rec_rot, t)));
    if (!rec_vel.empty()) vel.push_back(tape.constant(gather(rec_vel, t)));
  }
  ReconstructionLoss<Scalar> out;
  out.angle = angle_loss<Scalar>(rot, tgt).value()(0, 0);
  out.position = position_loss<Scalar>(rot, tgt_pos, skel).value()(0, 0);
  if (!vel.empty()) {
    out.angle += angle_loss<Scalar>(vel, tgt).value()(0, 0);
    out.position += position_loss<Scalar>(vel, tgt_pos, skel).value()(0, 0);
  }
  out.total = out.angle + static_cast<Scalar>(position_weight) * out.position;
  return out;
}

template <typename Scalar>
ReconstructionLoss<Scalar> motion_reconstruction_loss(const Motion<Scalar>& target,
                                                      const Motion<Scalar>& rec_rot,
                                                      const Motion<Scalar>& rec_vel,
                                                      const Skeleton& skel, double position_weight) {
  return motion_reconstruction_loss<Scalar>(std::span(&target, 1), std::span(&rec_rot, 1),
                                            std::span(&rec_vel, 1), skel, position_weight);
}

template <typename Scalar>
Scalar manifold_reconstruction_loss(const Matrix<Scalar>& z, const Matrix<Scalar>& z_rot,
                                    const Matrix<Scalar>& z_vel) {
  if (z.rows() != z_rot.rows() || z.cols() != z_rot.cols() || z.rows() != z_vel.rows() ||
      z.cols() != z_vel.cols()) {
    throw ShapeError("manifold_reconstruction_loss: " + dims(z) + " vs " + dims(z_rot) + " / " +
                     dims(z_vel));
  }
  if (z.cols() == 0) throw ShapeError("manifold_reconstruction_loss: empty batch");
  return ((z_rot - z).cwiseAbs().sum() + (z_vel - z).cwiseAbs().sum()) / static_cast<Scalar>(z.cols());
}

template <typename Scalar>
Scalar mmd_loss(const Matrix<Scalar>& codes, const Matrix<Scalar>& prior_samples,
                const KernelConfig& kernel, bool unbiased) {
  ad::Tape<Scalar> tape;
  return wasserstein_loss<Scalar>(tape.constant(codes), prior_samples, kernel, unbiased).value()(0, 0);
}

template <typename Scalar>
AdversarialLosses<Scalar> lsgan_losses(const Matrix<Scalar>& real_scores,
                                       const Matrix<Scalar>& fake_scores) {
  if (real_scores.size() == 0 || fake_scores.size() == 0) {
    throw std::invalid_argument("lsgan_losses: empty score batch");
  }
  const Scalar fake_sq = fake_scores.array().square().mean();
  const Scalar real_off = (real_scores.array() - 1).square().mean();
  const Scalar fake_off = (fake_scores.array() - 1).square().mean();
  return {Scalar(0.5) * fake_sq + Scalar(0.5) * real_off, Scalar(0.5) * fake_off};
}

template <typename Scalar>
Vector<Scalar> frame_angle_errors(const Motion<Scalar>& target, const Motion<Scalar>& reconstructed) {
  if (target.rows() != reconstructed.rows() || target.cols() != reconstructed.cols() ||
      target.rows() % 3 != 0) {
    throw ShapeError("frame_angle_errors: " + dims(target) + " vs " + dims(reconstructed));
  }
  const Index joints = target.rows() / 3;
  Vector<Scalar> out = Vector<Scalar>::Zero(target.cols());
  for (Index t = 0; t < target.cols(); ++t) {
    for (Index j = 0; j < joints; ++j) {
      out[t] += (reconstructed.col(t).template segment<3>(3 * j) - target.col(t).template segment<3>(3 * j)).norm();
    }
  }
  return out;
}

template <typename Scalar>
Vector<Scalar> frame_position_errors(const Motion<Scalar>& target, const Motion<Scalar>& reconstructed,
                                     const Skeleton& skel) {
  return frame_angle_errors<Scalar>(fk_motion<Scalar>(skel, target), fk_motion<Scalar>(skel, reconstructed));
}

#define LMM_INSTANTIATE_LOSSES(S)                                                                  \
  template ad::Var<S> angle_loss<S>(std::span<const ad::Var<S>>, std::span<const Matrix<S>>);      \
  template ad::Var<S> position_loss<S>(std::span<const ad::Var<S>>, std::span<const Matrix<S>>,    \
                                       const Skeleton&);                                           \
  template ad::Var<S> manifold_loss<S>(ad::Var<S>, ad::Var<S>, std::optional<ad::Var<S>>);         \
  template ad::Var<S> wasserstein_loss<S>(ad::Var<S>, const Matrix<S>&, const KernelConfig&, bool); \
  template ad::Var<S> generator_adversarial_loss<S>(std::span<const ad::Var<S>>);                  \
  template ad::Var<S> discriminator_adversarial_loss<S>(ad::Var<S>, std::span<const ad::Var<S>>);  \
  template ReconstructionLoss<S> motion_reconstruction_loss<S>(                                    \
      std::span<const Motion<S>>, std::span<const Motion<S>>, std::span<const Motion<S>>,          \
      const Skeleton&, double);                                                                    \
  template ReconstructionLoss<S> motion_reconstruction_loss<S>(                                    \
      const Motion<S>&, const Motion<S>&, const Motion<S>&, const Skeleton&, double);              \
  template S manifold_reconstruction_loss<S>(const Matrix<S>&, const Matrix<S>&, const Matrix<S>&); \
  template S mmd_loss<S>(const Matrix<S>&, const Matrix<S>&, const KernelConfig&, bool);           \
  template AdversarialLosses<S> lsgan_losses<S>(const Matrix<S>&, const Matrix<S>&);               \
  template Vector<S> frame_angle_errors<S>(const Motion<S>&, const Motion<S>&);                    \
  template Vector<S> frame_position_errors<S>(const Motion<S>&, const Motion<S>&, const Skeleton&);

LMM_INSTANTIATE_LOSSES(float)
LMM_INSTANTIATE_LOSSES(double)

}  // namespace lmm
