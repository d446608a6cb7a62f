#pragma once

#include "lmm/autodiff.hpp"
#include "lmm/common.hpp"
#include "lmm/kinematics.hpp"

#include <optional>
#include <span>

namespace lmm {

struct LossWeights {
  double position = 5.0;       // w_p
  double manifold = 0.001;     // lambda_M
  double wasserstein = 0.1;    // lambda_W
  double adversarial = 0.001;  // lambda_G

  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

/// Inverse multiquadric kernel scale; the default couples it to the prior,
/// C = 2 * latent * sigma_z^2.
struct KernelConfig {
  double C = 128.0;
  static KernelConfig for_prior(Index latent, double prior_variance) {
    return {2.0 * static_cast<double>(latent) * prior_variance};
  }
};

template <typename T>
struct LossTerms {
  T reconstruction;  // L_R = L_ang + w_p L_pos
  T manifold;        // L_M
  T wasserstein;     // L_W
  T adversarial;     // L_G
};

/// L_R + lambda_M L_M + lambda_W L_W + lambda_G L_G
double total_loss(const LossTerms<double>& parts, const LossWeights& w);

template <typename Scalar>
ad::Var<Scalar> total_loss(const LossTerms<ad::Var<Scalar>>& parts, const LossWeights& w) {
  using ad::scale;
  return parts.reconstruction + scale(parts.manifold, static_cast<Scalar>(w.manifold)) +
         scale(parts.wasserstein, static_cast<Scalar>(w.wasserstein)) +
         scale(parts.adversarial, static_cast<Scalar>(w.adversarial));
}

/// lambda_G * L_D
inline double discriminator_objective(double l_d, const LossWeights& w) { return w.adversarial * l_d; }

// ---- tape-level terms --------------------------------------------------------
// Frames are (3*n_joint x batch) in radians, forward temporal order. Sums run
// over joints; the result is averaged over frames and batch.

template <typename Scalar>
ad::Var<Scalar> angle_loss(std::span<const ad::Var<Scalar>> reconstructed,
                           std::span<const Matrix<Scalar>> target);

/// Same averaging over FK joint positions; `target_positions` are already
/// passed through forward kinematics.
template <typename Scalar>
ad::Var<Scalar> position_loss(std::span<const ad::Var<Scalar>> reconstructed,
                              std::span<const Matrix<Scalar>> target_positions, const Skeleton& skel);

/// (|z_rot - z|_1 + |z_vel - z|_1) averaged over the batch columns. z_vel
/// may be absent (single-decoder variants).
template <typename Scalar>
ad::Var<Scalar> manifold_loss(ad::Var<Scalar> z, ad::Var<Scalar> z_rot,
                              std::optional<ad::Var<Scalar>> z_vel);

template <typename Scalar>
ad::Var<Scalar> wasserstein_loss(ad::Var<Scalar> z, const Matrix<Scalar>& prior_samples,
                                 const KernelConfig& kernel, bool unbiased = true);

/// 1/2 mean((D(fake) - 1)^2) over all fake score maps together.
template <typename Scalar>
ad::Var<Scalar> generator_adversarial_loss(std::span<const ad::Var<Scalar>> fake_scores);

/// 1/2 mean(D(fake)^2) + 1/2 mean((D(real) - 1)^2).
template <typename Scalar>
ad::Var<Scalar> discriminator_adversarial_loss(ad::Var<Scalar> real_scores,
                                               std::span<const ad::Var<Scalar>> fake_scores);

// ---- value-level terms ------------------------------------------------------

template <typename Scalar>
struct ReconstructionLoss {
  Scalar angle = 0;     // L_ang
  Scalar position = 0;  // L_pos
  Scalar total = 0;     // L_ang + w_p L_pos
};

/// Batch of motions (columns are frames, radians). `rec_vel` may be empty.
template <typename Scalar>
ReconstructionLoss<Scalar> motion_reconstruction_loss(std::span<const Motion<Scalar>> target,
                                                      std::span<const Motion<Scalar>> rec_rot,
                                                      std::span<const Motion<Scalar>> rec_vel,
                                                      const Skeleton& skel, double position_weight);

template <typename Scalar>
ReconstructionLoss<Scalar> motion_reconstruction_loss(const Motion<Scalar>& target,
                                                      const Motion<Scalar>& rec_rot,
                                                      const Motion<Scalar>& rec_vel,
                                                      const Skeleton& skel, double position_weight);

/// Columns of the matrices are batch entries.
template <typename Scalar>
Scalar manifold_reconstruction_loss(const Matrix<Scalar>& z, const Matrix<Scalar>& z_rot,
                                    const Matrix<Scalar>& z_vel);

template <typename Scalar>
Scalar mmd_loss(const Matrix<Scalar>& codes, const Matrix<Scalar>& prior_samples,
                const KernelConfig& kernel, bool unbiased = true);

template <typename Scalar>
Scalar imq_kernel(const Vector<Scalar>& x, const Vector<Scalar>& y, const KernelConfig& kernel) {
  return static_cast<Scalar>(kernel.C) / (static_cast<Scalar>(kernel.C) + (x - y).squaredNorm());
}

template <typename Scalar>
struct AdversarialLosses {
  Scalar discriminator;  // L_D
  Scalar generator;      // L_G
};

/// Score maps of any shape; all fake entries are pooled. Empty input throws.
template <typename Scalar>
AdversarialLosses<Scalar> lsgan_losses(const Matrix<Scalar>& real_scores,
                                       const Matrix<Scalar>& fake_scores);

/// Per-frame sum over joints of |q_hat - q| (length = frames).
template <typename Scalar>
Vector<Scalar> frame_angle_errors(const Motion<Scalar>& target, const Motion<Scalar>& reconstructed);

/// Per-frame sum over joints of |p_hat - p| after forward kinematics.
template <typename Scalar>
Vector<Scalar> frame_position_errors(const Motion<Scalar>& target, const Motion<Scalar>& reconstructed,
                                     const Skeleton& skel);

}  // namespace lmm
