#pragma once

#include "lmm/checkpoint.hpp"
#include "lmm/data.hpp"
#include "lmm/losses.hpp"
#include "lmm/model.hpp"

#include <concepts>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace lmm {

// Motions passed to and returned from these functions are in radians (not
// normalized), forward temporal order. Generation uses the rotation decoder
// unless told otherwise.

/// n codes from N(0, sigma_sq I) as columns. sigma_sq = 0 gives zeros.
Eigen::MatrixXd sample_latents(Index latent, Index n, double sigma_sq, std::uint64_t seed);

/// Decodes a latent code and un-normalizes the result.
template <typename Scalar>
Motion<Scalar> decode_latent(const Checkpoint<Scalar>& ckpt, const Vector<Scalar>& z,
                             DecoderKind kind = DecoderKind::rotation);

/// Normalizes then encodes (eval mode).
template <typename Scalar>
Vector<Scalar> encode_motion(const Checkpoint<Scalar>& ckpt, const Motion<Scalar>& motion);

template <typename Scalar>
std::vector<Motion<Scalar>> sample_random(const Checkpoint<Scalar>& ckpt, Index n, double sigma_sq,
                                          std::uint64_t seed, DecoderKind kind = DecoderKind::rotation);

/// (1 - a) za + a zb for a = k / (steps - 1), k = 0..steps-1. Entries where
/// za and zb agree are copied, so za = zb gives a constant path.
template <typename Scalar>
std::vector<Vector<Scalar>> interpolate_latents(const Vector<Scalar>& za, const Vector<Scalar>& zb, Index steps);

template <typename Scalar>
std::vector<Motion<Scalar>> interpolate(const Checkpoint<Scalar>& ckpt, const Motion<Scalar>& a,
                                        const Motion<Scalar>& b, Index steps,
                                        DecoderKind kind = DecoderKind::rotation);

/// decode(encode(m)).
template <typename Scalar>
Motion<Scalar> reconstruct_motion(const Checkpoint<Scalar>& ckpt, const Motion<Scalar>& motion,
                                  DecoderKind kind = DecoderKind::rotation);

/// Projection onto the manifold; the same pipeline as reconstruct_motion.
template <typename Scalar>
Motion<Scalar> denoise(const Checkpoint<Scalar>& ckpt, const Motion<Scalar>& noisy,
                       DecoderKind kind = DecoderKind::rotation);

/// za - zb + zc, evaluated per entry so that za = zb yields zc and zb = zc
/// yields za exactly.
template <typename Scalar>
Vector<Scalar> analogy_latent(const Vector<Scalar>& za, const Vector<Scalar>& zb, const Vector<Scalar>& zc);

template <typename Scalar>
Motion<Scalar> analogy(const Checkpoint<Scalar>& ckpt, const Motion<Scalar>& a, const Motion<Scalar>& b,
                       const Motion<Scalar>& c, DecoderKind kind = DecoderKind::rotation);

// ---- evaluation -------------------------------------------------------------

/// Anything that can encode a radian motion and decode it back.
template <typename C>
concept Codec = requires(const C& c, const Eigen::MatrixXd& m, const Eigen::VectorXd& z, DecoderKind k) {
  { c.encode(m) } -> std::convertible_to<Eigen::VectorXd>;
  { c.decode(z, k) } -> std::convertible_to<Eigen::MatrixXd>;
  { c.has_velocity_decoder() } -> std::convertible_to<bool>;
};

/// Codec view of a checkpoint (computations in its precision, results in
/// double).
template <typename Scalar>
class ModelCodec {
 public:
  explicit ModelCodec(const Checkpoint<Scalar>& ckpt) : ckpt_(ckpt) {}
  Eigen::VectorXd encode(const Eigen::MatrixXd& m) const;
  Eigen::MatrixXd decode(const Eigen::VectorXd& z, DecoderKind kind) const;
  bool has_velocity_decoder() const { return traits(ckpt_.model.variant).velocity_decoder; }

 private:
  const Checkpoint<Scalar>& ckpt_;
};

struct IntervalError {
  double interval_end_s = 0;
  double E_r = 0;
  double E_p = 0;
};

struct DecoderMetrics {
  std::string decoder;  // "rot" | "vel"
  std::vector<IntervalError> intervals;
  double E_z = 0;
};

struct MetricReport {
  static constexpr Index n_intervals = 5;

  std::string variant;
  std::string checkpoint;
  Index n_motions = 0;
  std::vector<DecoderMetrics> decoders;  // rot first, then vel if present

  /// Headline E_z: the rotation path.
  double E_z() const { return decoders.empty() ? 0.0 : decoders.front().E_z; }
  /// Comment line with metadata, then "decoder,interval_end_s,E_r,E_p,E_z",
  /// one row per (decoder, interval), and a summary row per decoder.
  std::string to_csv() const;
};

/// Frame ranges [begin, end) of the 5 intervals of a clip of `frames`.
std::vector<std::pair<Index, Index>> interval_bounds(Index frames);

/// E_r / E_p per interval and E_z per decoder over the given clips; the
/// per-motion work may run on `threads` workers, the reduction is ordered.
template <Codec C>
MetricReport evaluate_codec(const C& codec, std::span<const Eigen::MatrixXd> clips, const Skeleton& skel,
                            double fps, unsigned threads = 1);

/// Picks up to n_eval test files at random (seeded), takes one random clip
/// of the model's length from each and evaluates the checkpoint on them.
template <typename Scalar>
MetricReport evaluate(const Checkpoint<Scalar>& ckpt, std::span<const MotionFile> test, Index n_eval,
                      std::uint64_t seed, double fps = 25.0, unsigned threads = 1);

/// Clips chosen by evaluate (exposed for reproducibility checks).
std::vector<Eigen::MatrixXd> evaluation_clips(std::span<const MotionFile> test, Index frames, Index n_eval,
                                              std::uint64_t seed);

}  // namespace lmm

#include "lmm/applications_impl.hpp"
