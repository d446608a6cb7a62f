#pragma once

#include "lmm/autodiff.hpp"
#include "lmm/checkpoint.hpp"
#include "lmm/data.hpp"
#include "lmm/gradient_check.hpp"
#include "lmm/losses.hpp"
#include "lmm/model.hpp"
#include "lmm/optim.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace lmm {

enum class Precision { f32, f64 };

struct TrainConfig {
  AdamConfig adam;
  Index batch_size = 30;
  Index epochs = 500;
  double clip_norm = 1.0;  // joint norm over all recurrent-cell gradients
  std::uint64_t seed = 0;
  Variant variant = Variant::DKGM;
  LossWeights weights;
  HyperParams hyper;
  bool unbiased_mmd = true;
  Index checkpoint_every = 50;  // epochs; the final epoch is always saved
  Precision precision = Precision::f32;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// Key-value config text: one "key = value" per line, '#' comments.
/// Keys: lr beta1 beta2 eps batch_size epochs clip_norm seed variant
/// w_position lambda_manifold lambda_wasserstein lambda_adversarial hidden
/// latent frames joints dropout prior_variance unbiased_mmd checkpoint_every
/// precision. Unknown keys and bad values throw ParseError with the line.
TrainConfig parse_config(const std::string& text, TrainConfig base = {});
TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {});
/// Applies a single key/value (the same keys as the file format).
void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value);
std::string serialize_config(const TrainConfig& cfg);

/// Loss values of one step. Inactive terms are 0.
struct StepReport {
  double reconstruction = 0;  // L_R = L_ang + w_p L_pos
  double angle = 0;           // L_ang (both decoders)
  double position = 0;        // L_pos (both decoders)
  double manifold = 0;        // L_M
  double wasserstein = 0;     // L_W
  double generator = 0;       // L_G
  double discriminator = 0;   // L_D
  double total = 0;
  double recurrent_grad_norm = 0;  // before clipping
};

/// One optimization step on a batch of motions in radians (3*n_joint x
/// frames each, at least 2): discriminator update on lambda_G L_D with
/// detached fakes (skipped when lambda_G = 0 or the variant has no
/// adversary), then the generator update on the total objective. Throws
/// NumericError naming the first non-finite loss term.
template <typename Scalar>
StepReport train_step(Checkpoint<Scalar>& state, std::span<const Motion<Scalar>> batch, const TrainConfig& cfg,
                      std::mt19937_64& rng, const ad::TapeOptions& tape_options = {});

/// The same losses in eval mode (no dropout, running batch-norm statistics),
/// without updating anything.
template <typename Scalar>
StepReport evaluate_losses(const Checkpoint<Scalar>& state, std::span<const Motion<Scalar>> batch,
                           const TrainConfig& cfg, std::mt19937_64& rng);

/// Finite-difference check of the full objective: generator leaves against
/// L_R + lambda_M L_M + lambda_W L_W + lambda_G L_G, discriminator leaves
/// against L_D. Dropout masks and prior draws are fixed by `seed`.
/// `tape_options` can inject a faulty backward rule.
GradientCheckReport check_gradients(Checkpoint<double>& state, std::span<const Motion<double>> batch,
                                    const TrainConfig& cfg, std::uint64_t seed,
                                    const GradientCheckOptions& options = {},
                                    const ad::TapeOptions& tape_options = {});

/// One row of the loss curve. Row 0 holds eval-mode losses of the initial
/// model; row e > 0 the mean step report of epoch e.
struct EpochRow {
  Index epoch = 0;
  StepReport losses;
};

std::string loss_csv_header();
std::string loss_csv_row(const EpochRow& row);

struct TrainResult {
  std::vector<EpochRow> rows;
  std::vector<std::filesystem::path> checkpoints;
};

std::filesystem::path checkpoint_path(const std::filesystem::path& out_dir, Index epoch);

/// Full training loop. Writes <out_dir>/loss.csv and <out_dir>/ckpt_<epoch>.bin
/// (epoch 0 always, then every checkpoint_every epochs and the last one).
/// `files` must already be preprocessed; only clips of exactly
/// cfg.hyper.frames are used. With `resume`, training continues from that
/// checkpoint and reproduces an uninterrupted run.
template <typename Scalar>
TrainResult train(std::span<const MotionFile> files, const TrainConfig& cfg, const std::filesystem::path& out_dir,
                  const std::optional<std::filesystem::path>& resume = std::nullopt,
                  const std::function<void(const EpochRow&)>& progress = {});

/// Clips for one epoch: files shuffled with `rng`, one random window per file
/// long enough, grouped into batches of batch_size (a trailing single clip
/// joins the previous batch).
template <typename Scalar>
std::vector<std::vector<Motion<Scalar>>> epoch_batches(std::span<const MotionFile> files, Index frames,
                                                       Index batch_size, std::mt19937_64& rng);

/// RNG stream owned by one epoch of one run.
std::mt19937_64 epoch_rng(std::uint64_t seed, Index epoch);

}  // namespace lmm
