#pragma once

#include "lmm/common.hpp"
#include "lmm/kinematics.hpp"

#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace lmm {

/// A recorded motion: per-frame joint rotations plus an optional root
/// translation track (kept on disk, dropped by preprocess).
struct MotionFile {
  Skeleton skeleton;
  double fps = 25.0;
  Eigen::MatrixXd frames{};  // 3*n_joint x n_frames, radians
  std::optional<Eigen::Matrix3Xd> root_translation{};
  std::string label{};

  Index n_frames() const { return frames.cols(); }
  /// Throws ValidationError on fps <= 0, joint-count or track-length mismatch.
  void validate() const;
  bool operator==(const MotionFile& o) const {
    return skeleton == o.skeleton && fps == o.fps && same(frames, o.frames) && label == o.label &&
           root_translation.has_value() == o.root_translation.has_value() &&
           (!root_translation || same(*root_translation, *o.root_translation));
  }
};

class UnsupportedRateError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// JSON text <-> MotionFile. Parse failures throw ParseError naming the line
/// or the offending field; invariant violations throw ValidationError.
MotionFile parse_motion(const std::string& json_text, const std::string& source = "<memory>");
std::string serialize_motion(const MotionFile& file);

MotionFile load_motion(const std::filesystem::path& path);
void save_motion(const MotionFile& file, const std::filesystem::path& path);

/// Loads files in parallel over `threads` workers; result order follows
/// `paths`.
std::vector<MotionFile> load_motions(std::span<const std::filesystem::path> paths, unsigned threads = 1);

Skeleton parse_skeleton(const std::string& json_text);
std::string serialize_skeleton(const Skeleton& skel);

/// Integer-ratio frame decimation to `target_fps`, root translation dropped.
/// If `expected` is given the skeleton must match it.
MotionFile preprocess(const MotionFile& file, double target_fps = 25.0,
                      const Skeleton* expected = nullptr);

/// Per-dimension z-score statistics with the std floored at 1e-6.
struct NormStats {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;

  static constexpr double std_floor = 1e-6;
  bool operator==(const NormStats& o) const { return same(mean, o.mean) && same(std, o.std); }
};

/// Statistics over every frame of the training files. Empty input throws.
NormStats fit_normalization(std::span<const MotionFile> train);

template <typename Scalar>
Motion<Scalar> apply_normalization(const Motion<Scalar>& motion, const NormStats& stats);

template <typename Scalar>
Motion<Scalar> invert_normalization(const Motion<Scalar>& motion, const NormStats& stats);

/// Uniformly placed window of `frames` frames; nullopt when the file is too
/// short.
template <typename Scalar>
std::optional<Motion<Scalar>> sample_clip(const MotionFile& file, Index frames, std::mt19937_64& rng);

/// Zeroes each (frame, joint) 3-vector independently with probability p.
template <typename Scalar>
Motion<Scalar> corrupt_zero_joints(const Motion<Scalar>& motion, double p, std::mt19937_64& rng);

/// Synthetic clip classes, by dominant oscillation frequency.
struct SyntheticClass {
  const char* label;
  double frequency_hz;
};
std::span<const SyntheticClass> synthetic_classes();

/// Procedural sinusoidal motions (clip c has class c mod 3): each joint
/// follows A sin(w t + phi) a1 + B sin(2 w t + psi) a2 with B <= A / 4 and
/// A + B <= 1.2 rad. Deterministic in (skeleton, n_clips, frames, seed).
std::vector<MotionFile> generate_synthetic(const Skeleton& skel, Index n_clips, Index frames,
                                           std::uint64_t seed, double fps = 25.0);

/// Dataset manifest: one "<path> <train|test>" per line, paths relative to
/// the manifest's directory; '#' starts a comment.
struct DatasetSplit {
  std::vector<std::filesystem::path> train;
  std::vector<std::filesystem::path> test;
};

DatasetSplit read_manifest(const std::filesystem::path& manifest);
void write_manifest(const DatasetSplit& split, const std::filesystem::path& manifest);

/// Resolves a dataset argument: a manifest file, or a directory holding
/// manifest.txt, or a directory of *.json files (all treated as train).
DatasetSplit resolve_dataset(const std::filesystem::path& path);

template <typename Scalar>
Motion<Scalar> to_motion(const Eigen::MatrixXd& frames) {
  return frames.template cast<Scalar>();
}

}  // namespace lmm
