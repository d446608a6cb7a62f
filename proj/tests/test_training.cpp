#include "lmm/training.hpp"
#include "oracles.hpp"
#include "scratch.hpp"

#include <doctest.h>

#include <fstream>
#include <sstream>

using namespace lmm;
using Eigen::MatrixXd;

namespace {

TrainConfig tiny_config(Variant v = Variant::DKGM) {
  TrainConfig cfg;
  cfg.variant = v;
  cfg.hyper.hidden = 8;
  cfg.hyper.latent = 3;
  cfg.hyper.frames = 10;
  cfg.hyper.joints = 5;
  cfg.batch_size = 4;
  cfg.epochs = 3;
  cfg.checkpoint_every = 2;
  cfg.precision = Precision::f64;
  cfg.weights.adversarial = 0.5;
  return cfg;
}

std::vector<MotionFile> tiny_files(Index n = 4, Index frames = 14) {
  return generate_synthetic(Skeleton::h36m_prefix(5), n, frames, 21);
}

Checkpoint<double> tiny_state(const TrainConfig& cfg, const std::vector<MotionFile>& files) {
  return make_checkpoint(Model<double>::init(cfg.hyper, cfg.variant, cfg.seed), files.front().skeleton,
                         fit_normalization(files));
}

std::vector<MatrixXd> tiny_batch(const std::vector<MotionFile>& files, Index frames) {
  std::vector<MatrixXd> out;
  for (const auto& f : files) out.push_back(f.frames.leftCols(frames));
  return out;
}

bool group_equal(const ModelParams<double>& a, const ModelParams<double>& b, ParamGroup g) {
  bool ok = true;
  visit_params([&](const ParamInfo& info, const MatrixXd& x, const MatrixXd& y) {
    if (info.group == g) ok = ok && same(x, y);
  }, a, b);
  return ok;
}

bool group_all_changed(const ModelParams<double>& a, const ModelParams<double>& b, ParamGroup g) {
  bool ok = true;
  visit_params([&](const ParamInfo& info, const MatrixXd& x, const MatrixXd& y) {
    if (info.group == g) ok = ok && !same(x, y);
  }, a, b);
  return ok;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("adam first step moves by the learning rate") {
  AdamConfig cfg;
  for (double g : {1e-3, 0.5, -7.0}) {
    MatrixXd p = MatrixXd::Constant(1, 1, 1.0), grad = MatrixXd::Constant(1, 1, g);
    MatrixXd m = MatrixXd::Zero(1, 1), v = MatrixXd::Zero(1, 1);
    adam_update(p, grad, m, v, 1, cfg);
    CHECK(p(0, 0) - 1.0 == doctest::Approx(-0.001 * (g > 0 ? 1 : -1)).epsilon(1e-4));
  }
}

TEST_CASE("adam with a zero gradient leaves parameters alone") {
  std::mt19937_64 rng(1);
  const MatrixXd p0 = oracle::random_matrix(3, 4, rng);
  MatrixXd p = p0, m = MatrixXd::Zero(3, 4), v = MatrixXd::Zero(3, 4);
  for (int s = 1; s <= 5; ++s) adam_update(p, MatrixXd(MatrixXd::Zero(3, 4)), m, v, s, AdamConfig{});
  CHECK(same(p, p0));
  MatrixXd wrong = MatrixXd::Zero(2, 2);
  CHECK_THROWS_AS(adam_update(p, wrong, m, v, 1, AdamConfig{}), ShapeError);
}

TEST_CASE("adam on (w - 3)^2 follows the scalar recurrence") {
  AdamConfig cfg;
  cfg.lr = 0.1;
  MatrixXd w = MatrixXd::Zero(1, 1), m = MatrixXd::Zero(1, 1), v = MatrixXd::Zero(1, 1);
  double ow = 0, om = 0, ov = 0;
  for (int t = 1; t <= 500; ++t) {
    const double g = 2 * (ow - 3);
    om = 0.9 * om + 0.1 * g;
    ov = 0.999 * ov + 0.001 * g * g;
    ow -= 0.1 * (om / (1 - std::pow(0.9, t))) / (std::sqrt(ov / (1 - std::pow(0.999, t))) + 1e-8);
    adam_update(w, MatrixXd(MatrixXd::Constant(1, 1, 2 * (w(0, 0) - 3))), m, v, t, cfg);
    CHECK(std::abs(w(0, 0) - ow) < 1e-12);
  }
  CHECK(std::abs(w(0, 0) - 3) < 1e-2);
}

TEST_CASE("global norm clipping") {
  MatrixXd a = MatrixXd::Constant(1, 1, 3.0), b = MatrixXd::Constant(1, 1, 4.0);
  std::vector<MatrixXd*> both{&a, &b};
  CHECK(clip_global_norm<double>(both, 1.0) == 5.0);
  CHECK(a(0, 0) == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(b(0, 0) == doctest::Approx(0.8).epsilon(1e-15));
  const MatrixXd a0 = a, b0 = b;
  clip_global_norm<double>(both, 2.0);
  CHECK(same(a, a0));
  CHECK(same(b, b0));
  CHECK_THROWS_AS(clip_global_norm<double>(both, 0.0), ValidationError);

  std::mt19937_64 rng(2);
  for (int i = 0; i < 50; ++i) {
    MatrixXd x = oracle::random_matrix(3, 5, rng), y = oracle::random_matrix(7, 2, rng);
    std::vector<MatrixXd*> ptrs{&x, &y};
    const double before = std::sqrt(x.squaredNorm() + y.squaredNorm());
    const double max_norm = std::uniform_real_distribution<double>(0.5, 6.0)(rng);
    CHECK(clip_global_norm<double>(ptrs, max_norm) == doctest::Approx(before));
    CHECK(std::sqrt(x.squaredNorm() + y.squaredNorm()) == doctest::Approx(std::min(before, max_norm)).epsilon(1e-12));
  }
}

TEST_CASE("recurrent clipping touches only recurrent leaves") {
  const auto cfg = tiny_config();
  auto grads = zeros_like(param_shapes<double>(cfg.hyper, cfg.variant));
  visit_params([](const ParamInfo&, MatrixXd& m) { m.setConstant(10.0); }, grads);
  const double norm = clip_recurrent(grads, 1.0, is_generator);
  CHECK(norm > 1.0);
  double sq = 0;
  visit_params([&](const ParamInfo& info, const MatrixXd& m) {
    if (info.recurrent && is_generator(info.group)) {
      sq += m.squaredNorm();
    } else {
      CHECK(m.isConstant(10.0));
    }
  }, grads);
  CHECK(std::sqrt(sq) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("a step updates exactly the trained groups") {
  const auto files = tiny_files();
  const auto batch = tiny_batch(files, 10);

  SUBCASE("full model") {
    const auto cfg = tiny_config(Variant::DKGM);
    auto state = tiny_state(cfg, files);
    const auto before = state;
    std::mt19937_64 rng(3);
    const auto r = train_step<double>(state, batch, cfg, rng);
    CHECK(group_all_changed(state.model.params, before.model.params, ParamGroup::encoder));
    CHECK(group_all_changed(state.model.params, before.model.params, ParamGroup::rotation_decoder));
    CHECK(group_all_changed(state.model.params, before.model.params, ParamGroup::velocity_decoder));
    CHECK_FALSE(group_equal(state.model.params, before.model.params, ParamGroup::discriminator));
    CHECK_FALSE(state.model.running == before.model.running);
    CHECK(state.generator_opt.step == 1);
    CHECK(state.discriminator_opt.step == 1);
    CHECK(r.discriminator > 0);
    CHECK(r.generator > 0);
    CHECK(r.manifold > 0);
    CHECK(r.total == doctest::Approx(total_loss({r.reconstruction, r.manifold, r.wasserstein, r.generator}, cfg.weights)));
    CHECK(r.reconstruction == doctest::Approx(r.angle + cfg.weights.position * r.position));
  }
  SUBCASE("zero adversarial weight freezes the discriminator") {
    auto cfg = tiny_config(Variant::DKGM);
    cfg.weights.adversarial = 0;
    auto state = tiny_state(cfg, files);
    const auto before = state;
    std::mt19937_64 rng(4);
    const auto r = train_step<double>(state, batch, cfg, rng);
    CHECK(group_equal(state.model.params, before.model.params, ParamGroup::discriminator));
    CHECK(state.model.running == before.model.running);
    CHECK(state.discriminator_opt.step == 0);
    CHECK(r.generator == 0);
    CHECK(r.discriminator == 0);
  }
  SUBCASE("single decoder variant leaves the velocity decoder alone") {
    const auto cfg = tiny_config(Variant::S);
    auto state = tiny_state(cfg, files);
    const auto before = state;
    std::mt19937_64 rng(5);
    const auto r = train_step<double>(state, batch, cfg, rng);
    CHECK(group_equal(state.model.params, before.model.params, ParamGroup::velocity_decoder));
    CHECK(group_equal(state.model.params, before.model.params, ParamGroup::discriminator));
    CHECK(r.position == 0);
    CHECK(r.manifold == 0);
  }
}

TEST_CASE("training steps are deterministic") {
  const auto files = tiny_files();
  const auto batch = tiny_batch(files, 10);
  const auto cfg = tiny_config();
  auto a = tiny_state(cfg, files);
  auto b = tiny_state(cfg, files);
  std::mt19937_64 ra(6), rb(6);
  for (int i = 0; i < 3; ++i) {
    const auto x = train_step<double>(a, batch, cfg, ra);
    const auto y = train_step<double>(b, batch, cfg, rb);
    CHECK(x.total == y.total);
    CHECK(x.discriminator == y.discriminator);
  }
  bool equal = true;
  visit_params([&](const ParamInfo&, const MatrixXd& x, const MatrixXd& y) { equal = equal && same(x, y); }, a.model.params,
               b.model.params);
  CHECK(equal);
}

TEST_CASE("evaluation leaves the state untouched") {
  const auto files = tiny_files();
  const auto batch = tiny_batch(files, 10);
  const auto cfg = tiny_config();
  const auto state = tiny_state(cfg, files);
  std::mt19937_64 r1(7), r2(7);
  const auto x = evaluate_losses<double>(state, batch, cfg, r1);
  const auto y = evaluate_losses<double>(state, batch, cfg, r2);
  CHECK(x.total == y.total);
  CHECK(x.total > 0);
}

TEST_CASE("a non-finite loss term is named") {
  const auto files = tiny_files();
  const auto batch = tiny_batch(files, 10);
  const auto cfg = tiny_config();
  auto state = tiny_state(cfg, files);
  state.model.params.rot.out.b(0, 0) = std::numeric_limits<double>::quiet_NaN();
  std::mt19937_64 rng(8);
  ad::TapeOptions quiet;
  quiet.check_finite = false;
  CHECK_THROWS_WITH_AS(train_step<double>(state, batch, cfg, rng, quiet), doctest::Contains("L_ang"), NumericError);
  auto again = tiny_state(cfg, files);
  again.model.params.rot.out.b(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(train_step<double>(again, batch, cfg, rng), NumericError);
}

TEST_CASE("gradient check of the full objective") {
  const auto files = tiny_files();
  const auto batch = tiny_batch(files, 10);
  auto cfg = tiny_config(Variant::DKGMZ);
  cfg.weights = {1, 1, 1, 1};
  auto state = tiny_state(cfg, files);
  GradientCheckOptions opts;
  opts.max_entries_per_block = 12;
  const auto report = check_gradients(state, batch, cfg, 9, opts);
  INFO(report.to_string());
  CHECK(report.passed(1e-3));
  CHECK(report.blocks.size() == 34);

  ad::TapeOptions fault;
  fault.fault_op = "sigmoid";
  const auto broken = check_gradients(state, batch, cfg, 9, opts, fault);
  CHECK_FALSE(broken.passed(1e-3));
}

TEST_CASE("epoch batching") {
  auto files = tiny_files(5, 12);
  files.push_back(tiny_files(1, 6).front());
  std::mt19937_64 rng(10);
  const auto batches = epoch_batches<double>(files, 10, 2, rng);
  REQUIRE(batches.size() == 2);
  CHECK(batches[0].size() == 2);
  CHECK(batches[1].size() == 3);
  for (const auto& b : batches) {
    for (const auto& m : b) CHECK(m.cols() == 10);
  }
  std::mt19937_64 a(11), b(11);
  const auto x = epoch_batches<double>(files, 10, 4, a);
  const auto y = epoch_batches<double>(files, 10, 4, b);
  CHECK(same(x[0][1], y[0][1]));
  std::mt19937_64 e0 = epoch_rng(1, 0), e1 = epoch_rng(1, 1), e0b = epoch_rng(1, 0);
  CHECK(e0 == e0b);
  CHECK_FALSE(e0 == e1);
}

TEST_CASE("zero epochs writes only the initial checkpoint") {
  ScratchDir dir("train0");
  auto cfg = tiny_config();
  cfg.epochs = 0;
  const auto files = tiny_files();
  const auto result = train<double>(files, cfg, dir.path());
  CHECK(result.checkpoints.size() == 1);
  CHECK(std::filesystem::exists(checkpoint_path(dir.path(), 0)));
  CHECK(result.rows.size() == 1);
  const std::string csv = slurp(dir / "loss.csv");
  CHECK(csv.rfind(loss_csv_header() + "\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);
  const auto ckpt = load_checkpoint<double>(checkpoint_path(dir.path(), 0));
  CHECK(ckpt.epoch == 0);
  CHECK(ckpt.metadata.count("config") == 1);
}

TEST_CASE("loss curve has one row per epoch plus the initial one") {
  ScratchDir dir("train3");
  const auto cfg = tiny_config();
  const auto result = train<double>(tiny_files(), cfg, dir.path());
  CHECK(result.rows.size() == 4);
  CHECK(loss_csv_header() == "epoch,L_R,L_ang,L_pos,L_M,L_W,L_G,L_D");
  const std::string csv = slurp(dir / "loss.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
  CHECK(std::filesystem::exists(checkpoint_path(dir.path(), 0)));
  CHECK(std::filesystem::exists(checkpoint_path(dir.path(), 2)));
  CHECK(std::filesystem::exists(checkpoint_path(dir.path(), 3)));
  CHECK_FALSE(std::filesystem::exists(checkpoint_path(dir.path(), 1)));
  CHECK(checkpoint_path(dir.path(), 3).filename() == "ckpt_000003.bin");
}

TEST_CASE("resuming reproduces an uninterrupted run") {
  ScratchDir whole("resume_whole"), split("resume_split");
  auto cfg = tiny_config();
  cfg.epochs = 4;
  const auto files = tiny_files();
  train<double>(files, cfg, whole.path());
  auto first = cfg;
  first.epochs = 2;
  train<double>(files, first, split.path());
  train<double>(files, cfg, split.path(), checkpoint_path(split.path(), 2));
  CHECK(slurp(whole / "loss.csv") == slurp(split / "loss.csv"));
  const auto a = load_checkpoint<double>(checkpoint_path(whole.path(), 4));
  const auto b = load_checkpoint<double>(checkpoint_path(split.path(), 4));
  bool equal = true;
  visit_params([&](const ParamInfo&, const MatrixXd& x, const MatrixXd& y) { equal = equal && same(x, y); }, a.model.params,
               b.model.params);
  CHECK(equal);
  CHECK(a.model.running == b.model.running);

  auto other = cfg;
  other.adam.lr = 0.5;
  CHECK_THROWS_AS(train<double>(files, other, split.path(), checkpoint_path(split.path(), 2)), ValidationError);
}

TEST_CASE("training input is validated") {
  ScratchDir dir("train_bad");
  auto cfg = tiny_config();
  CHECK_THROWS_AS(train<double>({}, cfg, dir.path()), ValidationError);
  cfg.hyper.joints = 17;
  CHECK_THROWS_AS(train<double>(tiny_files(), cfg, dir.path()), ValidationError);
  cfg = tiny_config();
  cfg.batch_size = 1;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("config text round trip") {
  auto cfg = tiny_config(Variant::DKGMZ);
  cfg.adam.lr = 3e-4;
  cfg.weights.position = 2.5;
  cfg.seed = 12345678901234ULL;
  cfg.unbiased_mmd = false;
  const auto back = parse_config(serialize_config(cfg));
  CHECK(back == cfg);
  const auto parsed = parse_config("# comment\nlr = 0.01\n\nvariant = DK  # trailing\nprecision = f64\n");
  CHECK(parsed.adam.lr == 0.01);
  CHECK(parsed.variant == Variant::DK);
  CHECK(parsed.precision == Precision::f64);
  CHECK(parsed.batch_size == TrainConfig{}.batch_size);
  TrainConfig s;
  set_config_value(s, "hidden", "32");
  CHECK(s.hyper.hidden == 32);
}

TEST_CASE("config errors name the line") {
  CHECK_THROWS_WITH_AS(parse_config("lr = 0.1\nbogus = 3\n"), doctest::Contains("line 2"), ParseError);
  CHECK_THROWS_WITH_AS(parse_config("epochs = many\n"), doctest::Contains("line 1"), ParseError);
  CHECK_THROWS_AS(parse_config("lr 0.1\n"), ParseError);
  CHECK_THROWS_AS(parse_config("variant = Q\n"), ParseError);
  CHECK_THROWS_AS(parse_config("lr = -1\n").validate(), ValidationError);
}
