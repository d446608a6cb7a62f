#include "lmm/cli.hpp"

#include "lmm/applications.hpp"
#include "lmm/checkpoint.hpp"
#include "lmm/data.hpp"
#include "lmm/training.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <map>
#include <optional>

namespace lmm::cli {

namespace fs = std::filesystem;

namespace {

struct Globals {
  unsigned threads = 1;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
};

std::string numbered(const std::string& stem, Index i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "_%03lld.json", static_cast<long long>(i));
  return stem + buf;
}

void make_dirs(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

DecoderKind parse_decoder(const std::string& s) {
  if (s == "rot") return DecoderKind::rotation;
  if (s == "vel") return DecoderKind::velocity;
  throw ValidationError("--decoder must be rot or vel");
}

// ---- gen-data -----------------------------------------------------------

struct GenData {
  Index clips = 8;
  Index frames = 150;
  Index joints = 17;
  double fps = 25;
  Index test_every = 5;
  std::string out;
};

int gen_data(const GenData& o, const Globals& g, std::ostream& out) {
  const fs::path dir(o.out);
  make_dirs(dir);
  const auto skel = Skeleton::h36m_prefix(o.joints);
  const auto clips = generate_synthetic(skel, o.clips, o.frames, g.seed, o.fps);
  DatasetSplit split;
  for (Index i = 0; i < o.clips; ++i) {
    const fs::path file = dir / numbered("clip", i);
    save_motion(clips[static_cast<std::size_t>(i)], file);
    const bool test = o.test_every > 0 && o.clips >= o.test_every && i % o.test_every == o.test_every - 1;
    (test ? split.test : split.train).push_back(file);
  }
  write_manifest(split, dir / "manifest.txt");
  out << "wrote " << o.clips << " clips (" << split.train.size() << " train, " << split.test.size() << " test) to "
      << dir.string() << "\n";
  return ok;
}

// ---- shared helpers -------------------------------------------------------

std::vector<MotionFile> load_split(const std::vector<fs::path>& paths, unsigned threads, double fps,
                                   const Skeleton* expected) {
  auto files = load_motions(paths, threads);
  for (auto& f : files) f = preprocess(f, fps, expected);
  return files;
}

template <typename Scalar>
Motion<Scalar> load_clip(const Checkpoint<Scalar>& ckpt, const std::string& path) {
  const MotionFile f = preprocess(load_motion(path), 25.0, &ckpt.skeleton);
  if (f.n_frames() < ckpt.model.hp.frames) {
    throw ValidationError(path + ": " + std::to_string(f.n_frames()) + " frames, the model needs " +
                          std::to_string(ckpt.model.hp.frames));
  }
  return f.frames.leftCols(ckpt.model.hp.frames).template cast<Scalar>();
}

template <typename Scalar>
void write_motion(const Checkpoint<Scalar>& ckpt, const Motion<Scalar>& m, const fs::path& path) {
  MotionFile f{.skeleton = ckpt.skeleton, .fps = 25.0};
  f.frames = m.template cast<double>();
  if (path.has_parent_path()) make_dirs(path.parent_path());
  save_motion(f, path);
}

template <typename F>
int with_checkpoint(const std::string& path, F&& f) {
  if (checkpoint_dtype(path) == "f64") return f(load_checkpoint<double>(path));
  return f(load_checkpoint<float>(path));
}

// ---- train ----------------------------------------------------------------

struct Train {
  std::string config, data, out, resume;
  std::vector<std::string> set;
  Index epochs = 500, batch_size = 30, hidden = 1024, latent = 64, frames = 150;
  double lr = 1e-3, dropout = 0.2;
  std::string variant = "DKGM", precision = "f32";
  std::map<std::string, CLI::Option*> given;
};

int train_cmd(const Train& o, const Globals& g, std::ostream& out) {
  TrainConfig cfg;
  cfg.hyper.joints = 0;  // taken from the data unless configured
  if (!o.config.empty()) cfg = load_config(o.config, cfg);
  auto flag = [&](const char* name) { return o.given.at(name)->count() > 0; };
  if (flag("epochs")) cfg.epochs = o.epochs;
  if (flag("batch-size")) cfg.batch_size = o.batch_size;
  if (flag("hidden")) cfg.hyper.hidden = o.hidden;
  if (flag("latent")) cfg.hyper.latent = o.latent;
  if (flag("frames")) cfg.hyper.frames = o.frames;
  if (flag("lr")) cfg.adam.lr = o.lr;
  if (flag("dropout")) cfg.hyper.dropout = o.dropout;
  if (flag("variant")) set_config_value(cfg, "variant", o.variant);
  if (flag("precision")) set_config_value(cfg, "precision", o.precision);
  for (const auto& kv : o.set) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ValidationError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (g.seed_opt->count() > 0) cfg.seed = g.seed;

  const DatasetSplit split = resolve_dataset(o.data);
  if (split.train.empty()) throw ValidationError(o.data + ": no training files");
  const auto files = load_split(split.train, g.threads, 25.0, nullptr);
  if (cfg.hyper.joints == 0) cfg.hyper.joints = files.front().skeleton.n_joint();
  cfg.validate();

  auto progress = [&out](const EpochRow& r) {
    out << "epoch " << r.epoch << "  L_R " << r.losses.reconstruction << "  L_ang " << r.losses.angle << "  L_M "
        << r.losses.manifold << "  L_W " << r.losses.wasserstein << "  L_G " << r.losses.generator << "  L_D "
        << r.losses.discriminator << "\n";
  };
  const std::optional<fs::path> resume = o.resume.empty() ? std::nullopt : std::optional<fs::path>(o.resume);
  const TrainResult result = cfg.precision == Precision::f64 ? train<double>(files, cfg, o.out, resume, progress)
                                                             : train<float>(files, cfg, o.out, resume, progress);
  out << "wrote " << result.checkpoints.size() << " checkpoints and " << (fs::path(o.out) / "loss.csv").string() << "\n";
  return ok;
}

// ---- eval -------------------------------------------------------------------

struct Eval {
  std::string ckpt, data, out;
  Index n_eval = 30;
  bool use_train = false;
};

int eval_cmd(const Eval& o, const Globals& g, std::ostream& out) {
  return with_checkpoint(o.ckpt, [&](const auto& ckpt) {
    const DatasetSplit split = resolve_dataset(o.data);
    const auto& paths = o.use_train || split.test.empty() ? split.train : split.test;
    const auto files = load_split(paths, g.threads, 25.0, &ckpt.skeleton);
    MetricReport report = evaluate(ckpt, files, o.n_eval, g.seed, 25.0, g.threads);
    report.checkpoint = fs::path(o.ckpt).filename().string();
    if (o.out.empty()) {
      out << report.to_csv();
    } else {
      std::ofstream f(o.out, std::ios::trunc);
      if (!f) throw IoError("cannot write " + o.out);
      f << report.to_csv();
      if (!f) throw IoError("write failed: " + o.out);
      out << "wrote " << o.out << "\n";
    }
    return static_cast<int>(ok);
  });
}

// ---- manifold operations ---------------------------------------------------

struct Ops {
  std::string ckpt, in, a, b, c, out, decoder = "rot", corrupted_out;
  Index n = 8, steps = 6;
  double sigma_sq = -1, corrupt = 0;
};

int reconstruct_cmd(const Ops& o, const Globals&, std::ostream& out) {
  return with_checkpoint(o.ckpt, [&](const auto& ckpt) {
    write_motion(ckpt, reconstruct_motion(ckpt, load_clip(ckpt, o.in), parse_decoder(o.decoder)), o.out);
    out << "wrote " << o.out << "\n";
    return static_cast<int>(ok);
  });
}

int sample_cmd(const Ops& o, const Globals& g, std::ostream& out) {
  return with_checkpoint(o.ckpt, [&](const auto& ckpt) {
    const double var = o.sigma_sq < 0 ? ckpt.model.hp.prior_variance : o.sigma_sq;
    const auto motions = sample_random(ckpt, o.n, var, g.seed, parse_decoder(o.decoder));
    for (std::size_t i = 0; i < motions.size(); ++i) write_motion(ckpt, motions[i], fs::path(o.out) / numbered("sample", static_cast<Index>(i)));
    out << "wrote " << motions.size() << " samples to " << o.out << "\n";
    return static_cast<int>(ok);
  });
}

int interpolate_cmd(const Ops& o, const Globals&, std::ostream& out) {
  return with_checkpoint(o.ckpt, [&](const auto& ckpt) {
    const auto motions = interpolate(ckpt, load_clip(ckpt, o.a), load_clip(ckpt, o.b), o.steps, parse_decoder(o.decoder));
    for (std::size_t i = 0; i < motions.size(); ++i) write_motion(ckpt, motions[i], fs::path(o.out) / numbered("interp", static_cast<Index>(i)));
    out << "wrote " << motions.size() << " motions to " << o.out << "\n";
    return static_cast<int>(ok);
  });
}

int denoise_cmd(const Ops& o, const Globals& g, std::ostream& out) {
  return with_checkpoint(o.ckpt, [&](const auto& ckpt) {
    auto motion = load_clip(ckpt, o.in);
    if (o.corrupt > 0) {
      std::mt19937_64 rng(g.seed);
      motion = corrupt_zero_joints(motion, o.corrupt, rng);
      if (!o.corrupted_out.empty()) write_motion(ckpt, motion, o.corrupted_out);
    }
    write_motion(ckpt, denoise(ckpt, motion, parse_decoder(o.decoder)), o.out);
    out << "wrote " << o.out << "\n";
    return static_cast<int>(ok);
  });
}

int analogy_cmd(const Ops& o, const Globals&, std::ostream& out) {
  return with_checkpoint(o.ckpt, [&](const auto& ckpt) {
    write_motion(ckpt, analogy(ckpt, load_clip(ckpt, o.a), load_clip(ckpt, o.b), load_clip(ckpt, o.c), parse_decoder(o.decoder)),
                 o.out);
    out << "wrote " << o.out << "\n";
    return static_cast<int>(ok);
  });
}

// ---- gradcheck --------------------------------------------------------------

struct GradCheck {
  std::string precision = "f64", inject_fault, variant = "DKGM";
  Index frames = 8, hidden = 16, latent = 4, joints = 5, batch = 4;
  double tol = 1e-3, step = 1e-5, weight = 1.0;
};

int gradcheck_cmd(const GradCheck& o, const Globals& g, std::ostream& out, std::ostream& err) {
  if (o.precision != "f64") {
    err << "gradcheck: finite differences need double precision; rerun with --precision f64\n";
    return invalid_input;
  }
  TrainConfig cfg;
  cfg.variant = parse_variant(o.variant);
  cfg.hyper = {.hidden = o.hidden, .latent = o.latent, .frames = o.frames, .joints = o.joints, .dropout = 0.2,
               .prior_variance = 1.0};
  cfg.weights = {o.weight, o.weight, o.weight, o.weight};
  cfg.batch_size = o.batch;
  cfg.validate();

  const Skeleton skel = Skeleton::h36m_prefix(o.joints);
  const auto files = generate_synthetic(skel, o.batch, o.frames, g.seed);
  auto ckpt = make_checkpoint(Model<double>::init(cfg.hyper, cfg.variant, g.seed), skel, fit_normalization(files));
  std::vector<Motion<double>> batch;
  for (const auto& f : files) batch.push_back(f.frames);

  ad::TapeOptions tape;
  tape.fault_op = o.inject_fault;
  GradientCheckOptions opts;
  opts.step = o.step;
  const GradientCheckReport report = check_gradients(ckpt, batch, cfg, g.seed, opts, tape);
  out << report.to_string();
  const BlockError* worst = report.worst();
  const bool pass = report.passed(o.tol);
  out << (pass ? "PASS" : "FAIL") << ": worst block " << (worst ? worst->name : "-") << " relative error "
      << (worst ? worst->max_rel_error : 0.0) << " (tolerance " << o.tol << ")\n";
  return pass ? ok : runtime_failure;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Latent motion manifold: train and apply a sequence autoencoder for skeletal motion", "lmm"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  Globals g;
  app.add_option("--threads", g.threads, "Worker threads for loading and evaluation (1 = deterministic mode)")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  g.seed_opt = app.add_option("--seed", g.seed, "Random seed")->capture_default_str();

  GenData gd;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic motion dataset with a train/test manifest");
  gen->add_option("--clips", gd.clips, "Number of clips")->capture_default_str()->check(CLI::PositiveNumber);
  gen->add_option("--frames", gd.frames, "Frames per clip")->capture_default_str()->check(CLI::PositiveNumber);
  gen->add_option("--joints", gd.joints, "Joints (prefix of the 17-joint skeleton)")->capture_default_str()->check(CLI::Range(1, 17));
  gen->add_option("--fps", gd.fps, "Frame rate of the written files")->capture_default_str();
  gen->add_option("--test-every", gd.test_every, "Every k-th clip goes to the test split (0 = none)")->capture_default_str();
  gen->add_option("--out", gd.out, "Output directory")->required();

  Train tr;
  auto* trn = app.add_subcommand("train", "Train a model; writes checkpoints and loss.csv");
  trn->add_option("--config", tr.config, "Key-value config file")->check(CLI::ExistingFile);
  trn->add_option("--data", tr.data, "Manifest file or dataset directory")->required();
  trn->add_option("--out", tr.out, "Output directory")->required();
  trn->add_option("--resume", tr.resume, "Continue from this checkpoint")->check(CLI::ExistingFile);
  tr.given["epochs"] = trn->add_option("--epochs", tr.epochs, "Training epochs")->capture_default_str();
  tr.given["batch-size"] = trn->add_option("--batch-size", tr.batch_size, "Clips per batch")->capture_default_str();
  tr.given["lr"] = trn->add_option("--lr", tr.lr, "Adam learning rate")->capture_default_str();
  tr.given["hidden"] = trn->add_option("--hidden", tr.hidden, "GRU hidden size")->capture_default_str();
  tr.given["latent"] = trn->add_option("--latent", tr.latent, "Latent dimension")->capture_default_str();
  tr.given["frames"] = trn->add_option("--frames", tr.frames, "Clip length in frames")->capture_default_str();
  tr.given["dropout"] = trn->add_option("--dropout", tr.dropout, "Dropout rate before output layers")->capture_default_str();
  tr.given["variant"] = trn->add_option("--variant", tr.variant, "S, D, DK, DKG, DKGM or DKGMZ")->capture_default_str();
  tr.given["precision"] = trn->add_option("--precision", tr.precision, "f32 or f64")->capture_default_str();
  trn->add_option("--set", tr.set,
                  "Override any config key, e.g. --set lambda_adversarial=0 (keys: lr beta1 beta2 eps batch_size "
                  "epochs clip_norm seed variant w_position lambda_manifold lambda_wasserstein lambda_adversarial "
                  "hidden latent frames joints dropout prior_variance unbiased_mmd checkpoint_every precision)");

  Eval ev;
  auto* evl = app.add_subcommand("eval", "Per-interval E_r / E_p and E_z on the test split (CSV)");
  evl->add_option("--ckpt", ev.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  evl->add_option("--data", ev.data, "Manifest file or dataset directory")->required();
  evl->add_option("--n-eval", ev.n_eval, "Number of test clips")->capture_default_str()->check(CLI::PositiveNumber);
  evl->add_option("--out", ev.out, "CSV output path (default: stdout)");
  evl->add_flag("--train-split", ev.use_train, "Evaluate on the training split");

  Ops ops;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--ckpt", ops.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
    sub->add_option("--decoder", ops.decoder, "rot or vel")->capture_default_str();
  };
  auto* rec = app.add_subcommand("reconstruct", "Encode and decode one motion");
  add_common(rec);
  rec->add_option("--in", ops.in, "Input motion JSON")->required()->check(CLI::ExistingFile);
  rec->add_option("--out", ops.out, "Output motion JSON")->required();

  auto* smp = app.add_subcommand("sample", "Decode random latent codes");
  add_common(smp);
  smp->add_option("--n", ops.n, "Number of samples")->capture_default_str()->check(CLI::NonNegativeNumber);
  smp->add_option("--sigma-sq", ops.sigma_sq, "Prior variance (default: the model's)");
  smp->add_option("--out", ops.out, "Output directory")->required();

  auto* itp = app.add_subcommand("interpolate", "Linear interpolation between two encoded motions");
  add_common(itp);
  itp->add_option("--a", ops.a, "First motion")->required()->check(CLI::ExistingFile);
  itp->add_option("--b", ops.b, "Second motion")->required()->check(CLI::ExistingFile);
  itp->add_option("--steps", ops.steps, "Number of outputs including both ends")->capture_default_str();
  itp->add_option("--out", ops.out, "Output directory")->required();

  auto* dns = app.add_subcommand("denoise", "Project a motion onto the manifold");
  add_common(dns);
  dns->add_option("--in", ops.in, "Input motion JSON")->required()->check(CLI::ExistingFile);
  dns->add_option("--out", ops.out, "Output motion JSON")->required();
  dns->add_option("--corrupt", ops.corrupt, "First zero each joint with this probability")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  dns->add_option("--corrupted-out", ops.corrupted_out, "Also write the corrupted input here");

  auto* ana = app.add_subcommand("analogy", "Decode encode(a) - encode(b) + encode(c)");
  add_common(ana);
  ana->add_option("--a", ops.a, "Motion A")->required()->check(CLI::ExistingFile);
  ana->add_option("--b", ops.b, "Motion B")->required()->check(CLI::ExistingFile);
  ana->add_option("--c", ops.c, "Motion C")->required()->check(CLI::ExistingFile);
  ana->add_option("--out", ops.out, "Output motion JSON")->required();

  GradCheck gc;
  auto* grd = app.add_subcommand("gradcheck", "Finite-difference check of every parameter block on a tiny model");
  grd->add_option("--precision", gc.precision, "Must be f64")->capture_default_str();
  grd->add_option("--variant", gc.variant, "Model variant")->capture_default_str();
  grd->add_option("--frames", gc.frames, "Clip length")->capture_default_str();
  grd->add_option("--hidden", gc.hidden, "GRU hidden size")->capture_default_str();
  grd->add_option("--latent", gc.latent, "Latent dimension")->capture_default_str();
  grd->add_option("--joints", gc.joints, "Joints")->capture_default_str()->check(CLI::Range(1, 17));
  grd->add_option("--batch", gc.batch, "Batch size")->capture_default_str();
  grd->add_option("--weight", gc.weight, "Weight of every loss term (w_p and all lambdas)")->capture_default_str();
  grd->add_option("--tol", gc.tol, "Relative error tolerance per block")->capture_default_str();
  grd->add_option("--step", gc.step, "Finite-difference step")->capture_default_str();
  grd->add_option("--inject-fault", gc.inject_fault, "Scale the backward rule of this op (test fixture)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    err << app.help();
    return invalid_input;
  }

  try {
    if (*gen) return gen_data(gd, g, out);
    if (*trn) return train_cmd(tr, g, out);
    if (*evl) return eval_cmd(ev, g, out);
    if (*rec) return reconstruct_cmd(ops, g, out);
    if (*smp) return sample_cmd(ops, g, out);
    if (*itp) return interpolate_cmd(ops, g, out);
    if (*dns) return denoise_cmd(ops, g, out);
    if (*ana) return analogy_cmd(ops, g, out);
    if (*grd) return gradcheck_cmd(gc, g, out, err);
  } catch (const ParseError& e) {
    err << "error: " << e.what() << "\n";
    return invalid_input;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return invalid_input;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return runtime_failure;
  }
  return invalid_input;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace lmm::cli
