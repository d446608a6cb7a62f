#include "lmm/applications.hpp"
#include "lmm/training.hpp"
#include "oracles.hpp"
#include "scratch.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>

using namespace lmm;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// Pinned tolerances and targets.
constexpr double kGradTol = 1e-3;
constexpr double kGradSeconds = 60;
constexpr double kBoneTol = 1e-9;
constexpr double kFkOracleTol = 1e-10;
constexpr double kFkBackwardTol = 1e-4;
constexpr double kFkSeconds = 10;
constexpr double kRoundtripTol = 1e-8;
constexpr double kSo3Tol = 1e-12;
constexpr double kMmdOracleTol = 1e-12;
constexpr double kMmdMarginSE = 5;
constexpr double kOverfitAngle = 0.05;
constexpr double kOverfitRatio = 0.1;
constexpr double kOverfitSeconds = 600;
constexpr int kDenoiseTrials = 20;
constexpr int kDenoiseNeeded = 18;
constexpr double kDenoiseP = 0.5;
constexpr double kMetricTol = 1e-10;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int n, bool pass, const std::string& name, const std::string& detail) {
  std::printf("%s criterion %d: %s (%s)\n", pass ? "PASS" : "FAIL", n, name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---- 1 ----------------------------------------------------------------------

void gradient_integrity() {
  const auto t0 = Clock::now();
  TrainConfig cfg;
  cfg.variant = Variant::DKGM;
  cfg.hyper = {.hidden = 16, .latent = 4, .frames = 8, .joints = 5, .dropout = 0.2, .prior_variance = 1.0};
  cfg.weights = {1.0, 1.0, 1.0, 1.0};
  cfg.batch_size = 4;
  const Skeleton skel = Skeleton::h36m_prefix(5);
  const auto files = generate_synthetic(skel, 4, 8, 0);
  auto ckpt = make_checkpoint(Model<double>::init(cfg.hyper, cfg.variant, 0), skel, fit_normalization(files));
  std::vector<Motion<double>> batch;
  for (const auto& f : files) batch.push_back(f.frames);

  std::mt19937_64 rng(0);
  const StepReport terms = evaluate_losses(ckpt, std::span<const Motion<double>>(batch), cfg, rng);
  const bool all_active = terms.reconstruction > 0 && terms.manifold > 0 && terms.wasserstein != 0 && terms.generator > 0;

  const GradientCheckReport r = check_gradients(ckpt, batch, cfg, 0);
  const double secs = seconds_since(t0);
  const BlockError* worst = r.worst();
  report(1, all_active && r.passed(kGradTol) && secs < kGradSeconds, "gradient integrity",
         fmt("%zu blocks, worst %s rel %.2e < %.0e, %.1f s < %.0f s", r.blocks.size(), worst ? worst->name.c_str() : "-",
             worst ? worst->max_rel_error : 0.0, kGradTol, secs, kGradSeconds));
}

// ---- 2 ----------------------------------------------------------------------

void fk_correctness() {
  const auto t0 = Clock::now();
  const Skeleton skel = Skeleton::h36m17();
  std::mt19937_64 rng(2);
  double bone = 0, stack = 0, back = 0;
  for (int i = 0; i < 1000; ++i) {
    const VectorXd pose = oracle::random_pose(skel.n_joint(), rng);
    const VectorXd p = fk_forward<double>(skel, pose);
    for (Index j = 1; j < skel.n_joint(); ++j) {
      const double len = (p.segment<3>(3 * j) - p.segment<3>(3 * skel.parent(j))).norm();
      const double ref = skel.offsets().col(j).norm();
      bone = std::max(bone, std::abs(len - ref) / ref);
    }
    stack = std::max(stack, (p - oracle::matrix_stack_fk(skel, pose)).cwiseAbs().maxCoeff());
    if (i % 20 == 0) {
      const VectorXd up = oracle::random_matrix(skel.pose_dim(), 1, rng);
      const VectorXd analytic = fk_backward<double>(skel, pose, up);
      const VectorXd numeric =
          oracle::numeric_gradient([&](const VectorXd& q) { return up.dot(fk_forward<double>(skel, q)); }, pose);
      back = std::max(back, oracle::max_rel_error(analytic, numeric));
    }
  }
  const double secs = seconds_since(t0);
  report(2, bone < kBoneTol && stack < kFkOracleTol && back < kFkBackwardTol && secs < kFkSeconds, "forward kinematics",
         fmt("bone rel %.1e < %.0e, oracle %.1e < %.0e, backward rel %.1e < %.0e, %.2f s", bone, kBoneTol, stack,
             kFkOracleTol, back, kFkBackwardTol, secs));
}

// ---- 3 ----------------------------------------------------------------------

void rotation_algebra() {
  std::mt19937_64 rng(3);
  double roundtrip = 0, ortho = 0, det = 0;
  for (int i = 0; i < 1000; ++i) {
    const Eigen::Vector3d v = oracle::random_rotation(rng, 0.01, oracle::pi() - 0.01);
    const Eigen::Matrix3d R = exp_to_rotmat<double>(v);
    roundtrip = std::max(roundtrip, (rotmat_to_exp<double>(R) - v).norm());
    ortho = std::max(ortho, (R.transpose() * R - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff());
    det = std::max(det, std::abs(R.determinant() - 1));
  }
  report(3, roundtrip < kRoundtripTol && ortho < kSo3Tol && det < kSo3Tol, "rotation algebra",
         fmt("roundtrip %.1e < %.0e, |R^T R - I| %.1e, |det - 1| %.1e < %.0e", roundtrip, kRoundtripTol, ortho, det,
             kSo3Tol));
}

// ---- 4 ----------------------------------------------------------------------

void mmd_estimator() {
  double oracle_err = 0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    std::mt19937_64 rng(400 + s);
    const MatrixXd z = oracle::random_matrix(4, 8, rng);
    const MatrixXd p = oracle::random_matrix(4, 8, rng);
    const KernelConfig k = KernelConfig::for_prior(4, 1.0);
    for (bool unbiased : {true, false}) {
      oracle_err = std::max(oracle_err, std::abs(mmd_loss<double>(z, p, k, unbiased) - oracle::mmd(z, p, k.C, unbiased)));
    }
  }

  const Index n = 64, d = 64;
  const KernelConfig k = KernelConfig::for_prior(d, 1.0);
  std::vector<double> same_dist, shifted;
  for (std::uint64_t s = 0; s < 100; ++s) {
    std::mt19937_64 rng(4000 + s);
    const MatrixXd prior = oracle::random_matrix(d, n, rng);
    const MatrixXd a = oracle::random_matrix(d, n, rng);
    const MatrixXd b = oracle::random_matrix(d, n, rng).array() + 3.0;
    same_dist.push_back(mmd_loss<double>(a, prior, k));
    shifted.push_back(mmd_loss<double>(b, prior, k));
  }
  auto mean = [](const std::vector<double>& x) { return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size()); };
  const double m0 = mean(same_dist), m1 = mean(shifted);
  double var = 0;
  for (double x : same_dist) var += (x - m0) * (x - m0);
  const double se = std::sqrt(var / static_cast<double>(same_dist.size() - 1)) / std::sqrt(static_cast<double>(same_dist.size()));
  const double margin = (m1 - m0) / se;
  report(4, oracle_err < kMmdOracleTol && margin > kMmdMarginSE, "MMD estimator",
         fmt("oracle %.1e < %.0e, shifted %.4f vs same %.5f, margin %.0f SE > %.0f", oracle_err, kMmdOracleTol, m1, m0,
             margin, kMmdMarginSE));
}

// ---- 5, 6, 7, 9, 10 ---------------------------------------------------------

TrainConfig overfit_config() {
  TrainConfig cfg;
  cfg.variant = Variant::DKGM;
  cfg.weights.adversarial = 0;
  cfg.hyper = {.hidden = 64, .latent = 8, .frames = 30, .joints = 5, .dropout = 0.0, .prior_variance = 1.0};
  cfg.batch_size = 4;
  cfg.epochs = 2000;  // 4 clips in one batch: one step per epoch
  cfg.seed = 0;
  cfg.checkpoint_every = 1000;
  cfg.precision = Precision::f64;
  return cfg;
}

std::vector<MotionFile> overfit_files() { return generate_synthetic(Skeleton::h36m_prefix(5), 4, 30, 0); }

std::vector<Motion<double>> clips_of(const std::vector<MotionFile>& files) {
  std::vector<Motion<double>> out;
  for (const auto& f : files) out.push_back(f.frames);
  return out;
}

Checkpoint<double> overfit(const std::filesystem::path& dir) {
  const auto cfg = overfit_config();
  const auto files = overfit_files();
  const auto clips = clips_of(files);
  const auto t0 = Clock::now();
  train<double>(files, cfg, dir);
  const double secs = seconds_since(t0);

  const auto initial = load_checkpoint<double>(checkpoint_path(dir, 0));
  auto final_state = load_checkpoint<double>(checkpoint_path(dir, cfg.epochs));
  std::mt19937_64 r0(5), r1(5);
  const double l0 = evaluate_losses(initial, std::span<const Motion<double>>(clips), cfg, r0).angle;
  const double l1 = evaluate_losses(final_state, std::span<const Motion<double>>(clips), cfg, r1).angle;

  double err = 0;
  for (const auto& c : clips) {
    err += frame_angle_errors<double>(c, reconstruct_motion(final_state, c)).mean() / static_cast<double>(cfg.hyper.joints);
  }
  err /= static_cast<double>(clips.size());
  report(5, err < kOverfitAngle && l1 <= kOverfitRatio * l0 && secs < kOverfitSeconds, "overfit reconstruction",
         fmt("rot per-joint angle error %.4f rad < %.2f, L_ang %.4f -> %.4f (ratio %.3f <= %.1f), %.0f s", err,
             kOverfitAngle, l0, l1, l1 / l0, kOverfitRatio, secs));
  return final_state;
}

void denoising(const Checkpoint<double>& ckpt) {
  const auto clips = clips_of(overfit_files());
  int wins = 0;
  for (int s = 0; s < kDenoiseTrials; ++s) {
    const Motion<double>& truth = clips[static_cast<std::size_t>(s) % clips.size()];
    std::mt19937_64 rng(600 + static_cast<std::uint64_t>(s));
    const Motion<double> noisy = corrupt_zero_joints(truth, kDenoiseP, rng);
    const Motion<double> clean = denoise(ckpt, noisy);
    const double e_clean = frame_position_errors<double>(truth, clean, ckpt.skeleton).sum();
    const double e_noisy = frame_position_errors<double>(truth, noisy, ckpt.skeleton).sum();
    wins += e_clean < e_noisy;
  }
  report(6, wins >= kDenoiseNeeded, "denoising", fmt("%d/%d trials improved, need %d", wins, kDenoiseTrials, kDenoiseNeeded));
}

void interpolation_analogy(const Checkpoint<double>& ckpt) {
  const auto clips = clips_of(overfit_files());
  const auto& a = clips[0];
  const auto& b = clips[1];
  const auto& c = clips[2];
  bool ok = true;
  int checks = 0;
  auto expect = [&](bool v) {
    ok = ok && v;
    ++checks;
  };
  const VectorXd za = encode_motion(ckpt, a), zb = encode_motion(ckpt, b), zc = encode_motion(ckpt, c);
  const auto path = interpolate_latents<double>(za, zb, 7);
  expect(same(path.front(), za));
  expect(same(path.back(), zb));
  expect(same(analogy_latent<double>(za, za, zc), zc));
  expect(same(analogy_latent<double>(za, zc, zc), za));
  for (DecoderKind kind : {DecoderKind::rotation, DecoderKind::velocity}) {
    const auto motions = interpolate(ckpt, a, b, 5, kind);
    expect(same(motions.front(), reconstruct_motion(ckpt, a, kind)));
    expect(same(motions.back(), reconstruct_motion(ckpt, b, kind)));
    expect(same(analogy(ckpt, a, a, c, kind), reconstruct_motion(ckpt, c, kind)));
    expect(same(analogy(ckpt, a, c, c, kind), reconstruct_motion(ckpt, a, kind)));
  }
  report(7, ok, "interpolation and analogy exactness", fmt("%d bit-exact identities checked", checks));
}

void determinism(const std::filesystem::path& first) {
  const auto cfg = overfit_config();
  const auto files = overfit_files();
  ScratchDir second("accept_second"), split("accept_split");
  train<double>(files, cfg, second.path());
  auto half = cfg;
  half.epochs = cfg.epochs / 2;
  train<double>(files, half, split.path());
  train<double>(files, cfg, split.path(), checkpoint_path(split.path(), half.epochs));

  const std::string csv = slurp(first / "loss.csv");
  const bool identical = !csv.empty() && csv == slurp(second / "loss.csv");
  const bool resumed = csv == slurp(split / "loss.csv");
  const auto a = load_checkpoint<double>(checkpoint_path(first, cfg.epochs));
  const auto b = load_checkpoint<double>(checkpoint_path(split.path(), cfg.epochs));
  bool params = true;
  visit_params([&](const ParamInfo&, const MatrixXd& x, const MatrixXd& y) { params = params && same(x, y); }, a.model.params,
               b.model.params);
  report(9, identical && resumed && params, "determinism",
         fmt("repeat run CSV %s, resumed CSV %s, resumed parameters %s", identical ? "identical" : "differs",
             resumed ? "identical" : "differs", params ? "identical" : "differ"));
}

void reversal(const Checkpoint<double>& ckpt) {
  const auto clips = clips_of(overfit_files());
  int ok = 0;
  std::string where;
  for (const auto& clip : clips) {
    const auto rec = reconstruct(ckpt.model, apply_normalization(clip, ckpt.norm));
    const VectorXd raw0 = invert_normalization<double>(rec.rot.reversed, ckpt.norm).col(0);
    Index best = -1;
    double best_err = 0;
    for (Index t = 0; t < clip.cols(); ++t) {
      double e = 0;
      for (Index j = 0; j < clip.rows() / 3; ++j) e += (raw0.segment<3>(3 * j) - clip.col(t).segment<3>(3 * j)).norm();
      if (best < 0 || e < best_err) {
        best = t;
        best_err = e;
      }
    }
    ok += best == clip.cols() - 1;
    where += (where.empty() ? "" : " ") + std::to_string(best);
  }
  report(10, ok == static_cast<int>(clips.size()), "reversal contract",
         fmt("raw frame 0 nearest input frame per clip: %s (want 29)", where.c_str()));
}

// ---- 8 ----------------------------------------------------------------------

void lsgan_plumbing() {
  const MatrixXd ones = MatrixXd::Ones(1, 18), zeros = MatrixXd::Zero(1, 18 * 3), half = MatrixXd::Constant(1, 18, 0.5);
  const auto perfect = lsgan_losses<double>(ones, zeros);
  const auto constant = lsgan_losses<double>(half, MatrixXd::Constant(1, 18 * 3, 0.5));

  ad::Tape<double> tape;
  const auto real = tape.constant(ones);
  std::vector<ad::Var<double>> fakes{tape.constant(MatrixXd::Zero(1, 18)), tape.constant(MatrixXd::Zero(1, 18))};
  const double tape_d = discriminator_adversarial_loss<double>(real, fakes).value()(0, 0);
  const double tape_g = generator_adversarial_loss<double>(fakes).value()(0, 0);

  const bool ok = perfect.discriminator == 0.0 && perfect.generator == 0.5 && constant.discriminator == 0.25 &&
                  constant.generator == 0.125 && tape_d == 0.0 && tape_g == 0.5;
  report(8, ok, "LSGAN plumbing",
         fmt("perfect D: L_D %g L_G %g; constant 1/2: L_D %g L_G %g; tape L_D %g L_G %g", perfect.discriminator,
             perfect.generator, constant.discriminator, constant.generator, tape_d, tape_g));
}

// ---- 11 ---------------------------------------------------------------------

struct StubCodec {
  Index frames;
  bool perfect = false;
  VectorXd encode(const MatrixXd& m) const { return perfect ? VectorXd(m.reshaped()) : VectorXd(m.rowwise().sum()); }
  MatrixXd decode(const VectorXd& z, DecoderKind kind) const {
    if (perfect) return z.reshaped(z.size() / frames, frames);
    MatrixXd out(z.size(), frames);
    const double k = kind == DecoderKind::rotation ? 0.1 : -0.2;
    for (Index t = 0; t < frames; ++t) {
      for (Index r = 0; r < z.size(); ++r) out(r, t) = z[r] / static_cast<double>(frames) + k * std::sin(0.3 * t + r);
    }
    return out;
  }
  bool has_velocity_decoder() const { return true; }
};

void metric_harness() {
  const Skeleton s = Skeleton::h36m_prefix(5);
  const Index frames = 27;
  std::vector<MatrixXd> clips;
  for (const auto& f : generate_synthetic(s, 4, frames, 11)) clips.push_back(f.frames);

  const auto zero = evaluate_codec(StubCodec{frames, true}, std::span<const MatrixXd>(clips), s, 25.0);
  double zero_max = 0;
  for (const auto& d : zero.decoders) {
    zero_max = std::max(zero_max, std::abs(d.E_z));
    for (const auto& i : d.intervals) zero_max = std::max({zero_max, std::abs(i.E_r), std::abs(i.E_p)});
  }

  const StubCodec codec{frames};
  const auto rep = evaluate_codec(codec, std::span<const MatrixXd>(clips), s, 25.0);
  double worst = 0;
  auto joint_sum = [](const MatrixXd& a, const MatrixXd& b, Index t) {
    double sum = 0;
    for (Index j = 0; j < a.rows() / 3; ++j) sum += (a.block<3, 1>(3 * j, t) - b.block<3, 1>(3 * j, t)).norm();
    return sum;
  };
  for (std::size_t k = 0; k < 2; ++k) {
    const DecoderKind kind = k == 0 ? DecoderKind::rotation : DecoderKind::velocity;
    std::vector<MatrixXd> recs, pos_t, pos_r;
    double ez = 0;
    for (const auto& c : clips) {
      recs.push_back(codec.decode(codec.encode(c), kind));
      pos_t.push_back(oracle::positions(s, {c}).front());
      pos_r.push_back(oracle::positions(s, {recs.back()}).front());
      ez += (codec.encode(recs.back()) - codec.encode(c)).cwiseAbs().sum();
    }
    const auto n = static_cast<Index>(clips.size());
    const auto er = oracle::interval_means(n, frames, [&](Index m, Index t) {
      return joint_sum(clips[static_cast<std::size_t>(m)], recs[static_cast<std::size_t>(m)], t);
    });
    const auto ep = oracle::interval_means(n, frames, [&](Index m, Index t) {
      return joint_sum(pos_t[static_cast<std::size_t>(m)], pos_r[static_cast<std::size_t>(m)], t);
    });
    const auto& d = rep.decoders.at(k);
    for (std::size_t i = 0; i < 5; ++i) {
      worst = std::max({worst, std::abs(d.intervals.at(i).E_r - er[i]), std::abs(d.intervals.at(i).E_p - ep[i])});
    }
    worst = std::max(worst, std::abs(d.E_z - ez / static_cast<double>(n)));
  }

  std::istringstream csv(rep.to_csv());
  std::vector<std::string> lines;
  for (std::string l; std::getline(csv, l);) lines.push_back(l);
  int rot_rows = 0, vel_rows = 0;
  for (const auto& l : lines) {
    if (l.rfind("rot,", 0) == 0 && l.rfind("rot,summary", 0) != 0) ++rot_rows;
    if (l.rfind("vel,", 0) == 0 && l.rfind("vel,summary", 0) != 0) ++vel_rows;
  }
  const bool layout = rep.decoders.size() == 2 && rot_rows == MetricReport::n_intervals && vel_rows == MetricReport::n_intervals &&
                      lines.size() > 1 && lines[1] == "decoder,interval_end_s,E_r,E_p,E_z";
  report(11, zero_max == 0.0 && worst < kMetricTol && layout, "metric harness",
         fmt("perfect stub max %.1e, oracle diff %.1e < %.0e, report %d rot + %d vel interval rows", zero_max, worst, kMetricTol,
             rot_rows, vel_rows));
}

template <typename F>
void guarded(int n, const char* name, F&& f) {
  try {
    f();
  } catch (const std::exception& e) {
    report(n, false, name, std::string("threw: ") + e.what());
  }
}

}  // namespace

int main() {
  guarded(1, "gradient integrity", gradient_integrity);
  guarded(2, "forward kinematics", fk_correctness);
  guarded(3, "rotation algebra", rotation_algebra);
  guarded(4, "MMD estimator", mmd_estimator);

  ScratchDir run("accept_overfit");
  std::optional<Checkpoint<double>> trained;
  guarded(5, "overfit reconstruction", [&] { trained = overfit(run.path()); });
  if (trained) {
    guarded(6, "denoising", [&] { denoising(*trained); });
    guarded(7, "interpolation and analogy exactness", [&] { interpolation_analogy(*trained); });
  } else {
    report(6, false, "denoising", "no overfit model");
    report(7, false, "interpolation and analogy exactness", "no overfit model");
  }
  guarded(8, "LSGAN plumbing", lsgan_plumbing);
  guarded(9, "determinism", [&] { determinism(run.path()); });
  if (trained) {
    guarded(10, "reversal contract", [&] { reversal(*trained); });
  } else {
    report(10, false, "reversal contract", "no overfit model");
  }
  guarded(11, "metric harness", metric_harness);

  std::printf("%s: %d of 11 criteria failed\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
