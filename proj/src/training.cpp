#include "lmm/training.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace lmm {

void AdamConfig::validate() const {
  if (!(lr > 0)) throw ValidationError("adam: lr must be positive");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ValidationError("adam: betas must lie in [0, 1)");
  if (!(eps > 0)) throw ValidationError("adam: eps must be positive");
}

void TrainConfig::validate() const {
  adam.validate();
  weights.validate();
  hyper.validate();
  if (batch_size < 2) throw ValidationError("train: batch_size must be at least 2");
  if (epochs < 0) throw ValidationError("train: epochs must be non-negative");
  if (!(clip_norm > 0)) throw ValidationError("train: clip_norm must be positive");
  if (checkpoint_every < 1) throw ValidationError("train: checkpoint_every must be at least 1");
}

// ---- config ---------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ParseError("'" + key + "': expected a number, got '" + v + "'");
  return out;
}

template <typename Int>
Int to_int(const std::string& key, const std::string& v) {
  Int out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ParseError("'" + key + "': expected an integer, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ParseError("'" + key + "': expected true or false, got '" + v + "'");
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void set_config_value(TrainConfig& c, const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  if (key == "lr") c.adam.lr = to_double(key, v);
  else if (key == "beta1") c.adam.beta1 = to_double(key, v);
  else if (key == "beta2") c.adam.beta2 = to_double(key, v);
  else if (key == "eps") c.adam.eps = to_double(key, v);
  else if (key == "batch_size") c.batch_size = to_int<Index>(key, v);
  else if (key == "epochs") c.epochs = to_int<Index>(key, v);
  else if (key == "clip_norm") c.clip_norm = to_double(key, v);
  else if (key == "seed") c.seed = to_int<std::uint64_t>(key, v);
  else if (key == "variant") {
    try {
      c.variant = parse_variant(v);
    } catch (const ValidationError&) {
      throw ParseError("'variant': unknown variant '" + v + "'");
    }
  } else if (key == "w_position") c.weights.position = to_double(key, v);
  else if (key == "lambda_manifold") c.weights.manifold = to_double(key, v);
  else if (key == "lambda_wasserstein") c.weights.wasserstein = to_double(key, v);
  else if (key == "lambda_adversarial") c.weights.adversarial = to_double(key, v);
  else if (key == "hidden") c.hyper.hidden = to_int<Index>(key, v);
  else if (key == "latent") c.hyper.latent = to_int<Index>(key, v);
  else if (key == "frames") c.hyper.frames = to_int<Index>(key, v);
  else if (key == "joints") c.hyper.joints = to_int<Index>(key, v);
  else if (key == "dropout") c.hyper.dropout = to_double(key, v);
  else if (key == "prior_variance") c.hyper.prior_variance = to_double(key, v);
  else if (key == "unbiased_mmd") c.unbiased_mmd = to_bool(key, v);
  else if (key == "checkpoint_every") c.checkpoint_every = to_int<Index>(key, v);
  else if (key == "precision") {
    if (v == "f32") c.precision = Precision::f32;
    else if (v == "f64") c.precision = Precision::f64;
    else throw ParseError("'precision': expected f32 or f64, got '" + v + "'");
  } else throw ParseError("unknown config key '" + key + "'");
}

TrainConfig parse_config(const std::string& text, TrainConfig base) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    try {
      if (eq == std::string::npos) throw ParseError("expected 'key = value'");
      set_config_value(base, trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ParseError& e) {
      throw ParseError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

TrainConfig load_config(const std::filesystem::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str(), base);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

std::string serialize_config(const TrainConfig& c) {
  std::ostringstream out;
  out << "lr = " << fmt(c.adam.lr) << "\n"
      << "beta1 = " << fmt(c.adam.beta1) << "\n"
      << "beta2 = " << fmt(c.adam.beta2) << "\n"
      << "eps = " << fmt(c.adam.eps) << "\n"
      << "batch_size = " << c.batch_size << "\n"
      << "epochs = " << c.epochs << "\n"
      << "clip_norm = " << fmt(c.clip_norm) << "\n"
      << "seed = " << c.seed << "\n"
      << "variant = " << to_string(c.variant) << "\n"
      << "w_position = " << fmt(c.weights.position) << "\n"
      << "lambda_manifold = " << fmt(c.weights.manifold) << "\n"
      << "lambda_wasserstein = " << fmt(c.weights.wasserstein) << "\n"
      << "lambda_adversarial = " << fmt(c.weights.adversarial) << "\n"
      << "hidden = " << c.hyper.hidden << "\n"
      << "latent = " << c.hyper.latent << "\n"
      << "frames = " << c.hyper.frames << "\n"
      << "joints = " << c.hyper.joints << "\n"
      << "dropout = " << fmt(c.hyper.dropout) << "\n"
      << "prior_variance = " << fmt(c.hyper.prior_variance) << "\n"
      << "unbiased_mmd = " << (c.unbiased_mmd ? "true" : "false") << "\n"
      << "checkpoint_every = " << c.checkpoint_every << "\n"
      << "precision = " << (c.precision == Precision::f32 ? "f32" : "f64") << "\n";
  return out.str();
}

// ---- losses of one batch ---------------------------------------------------

namespace {

template <typename Scalar>
struct BatchData {
  std::vector<Matrix<Scalar>> target;      // radians, P x B per frame
  std::vector<Matrix<Scalar>> target_pos;  // FK positions, 3J x B per frame
  std::vector<Matrix<Scalar>> normalized;  // network input, P x B per frame
  Index batch = 0;
};

template <typename Scalar>
BatchData<Scalar> prepare(std::span<const Motion<Scalar>> batch, const Checkpoint<Scalar>& st) {
  const HyperParams& hp = st.model.hp;
  if (batch.size() < 2) throw ValidationError("train_step: batch must hold at least 2 motions");
  BatchData<Scalar> d;
  d.batch = static_cast<Index>(batch.size());
  for (const auto& m : batch) {
    if (m.rows() != hp.pose_dim() || m.cols() != hp.frames) {
      throw ShapeError("train_step: motion " + dims(m) + ", expected " + dims(hp.pose_dim(), hp.frames));
    }
  }
  for (Index t = 0; t < hp.frames; ++t) {
    Matrix<Scalar> f(hp.pose_dim(), d.batch);
    for (Index b = 0; b < d.batch; ++b) f.col(b) = batch[static_cast<std::size_t>(b)].col(t);
    d.target_pos.push_back(fk_motion<Scalar>(st.skeleton, f));
    d.normalized.push_back(apply_normalization<Scalar>(f, st.norm));
    d.target.push_back(std::move(f));
  }
  return d;
}

template <typename Scalar>
Matrix<Scalar> draw_prior(const HyperParams& hp, Index batch, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, std::sqrt(hp.prior_variance));
  Matrix<Scalar> prior(hp.latent, batch);
  for (Index j = 0; j < batch; ++j) {
    for (Index i = 0; i < hp.latent; ++i) prior(i, j) = static_cast<Scalar>(gauss(rng));
  }
  return prior;
}

template <typename Scalar>
DiscriminatorBlock<ad::Var<Scalar>> bind_discriminator(ad::Tape<Scalar>& tape, const DiscriminatorBlock<Matrix<Scalar>>& d,
                                                       DiscriminatorBlock<Matrix<Scalar>>* grads) {
  auto bind = [&](const Matrix<Scalar>& v, Matrix<Scalar>* g) { return tape.parameter(v, g); };
  auto lin = [&](const LinearBlock<Matrix<Scalar>>& l, LinearBlock<Matrix<Scalar>>* g) {
    return LinearBlock<ad::Var<Scalar>>{bind(l.W, g ? &g->W : nullptr), bind(l.b, g ? &g->b : nullptr)};
  };
  auto norm = [&](const NormBlock<Matrix<Scalar>>& n, NormBlock<Matrix<Scalar>>* g) {
    return NormBlock<ad::Var<Scalar>>{bind(n.gamma, g ? &g->gamma : nullptr), bind(n.beta, g ? &g->beta : nullptr)};
  };
  DiscriminatorBlock<ad::Var<Scalar>> out;
  out.conv1 = lin(d.conv1, grads ? &grads->conv1 : nullptr);
  out.conv2 = lin(d.conv2, grads ? &grads->conv2 : nullptr);
  out.norm2 = norm(d.norm2, grads ? &grads->norm2 : nullptr);
  out.conv3 = lin(d.conv3, grads ? &grads->conv3 : nullptr);
  out.norm3 = norm(d.norm3, grads ? &grads->norm3 : nullptr);
  out.conv4 = lin(d.conv4, grads ? &grads->conv4 : nullptr);
  return out;
}

template <typename Scalar>
struct GeneratorPass {
  ad::Var<Scalar> angle, position, reconstruction, manifold, wasserstein;
  std::vector<ad::Var<Scalar>> fakes;  // stacked normalized forward-order decoder outputs
};

template <typename Scalar>
GeneratorPass<Scalar> generator_pass(ad::Tape<Scalar>& tape, const BoundParams<Scalar>& p, const Checkpoint<Scalar>& st,
                                     const BatchData<Scalar>& data, const Matrix<Scalar>& prior,
                                     const TrainConfig& cfg, ForwardMode<Scalar> mode) {
  const HyperParams& hp = st.model.hp;
  const VariantTraits tr = traits(st.model.variant);
  const Vector<Scalar> sd = st.norm.std.template cast<Scalar>();
  const Vector<Scalar> mu = st.norm.mean.template cast<Scalar>();
  const auto zero = tape.constant(Matrix<Scalar>::Zero(1, 1));

  std::vector<ad::Var<Scalar>> input;
  for (const auto& f : data.normalized) input.push_back(tape.constant(f));
  tape.set_scope("encoder");
  const auto z = encode<Scalar>(hp, p, input, mode);

  GeneratorPass<Scalar> out{zero, zero, zero, zero, zero, {}};
  std::vector<ad::Var<Scalar>> codes;
  auto run_decoder = [&](const DecoderBlock<ad::Var<Scalar>>& block, DecoderKind kind, const char* scope) {
    tape.set_scope(scope);
    auto raw = decode<Scalar>(hp, st.model.variant, block, kind, z, mode);
    std::reverse(raw.begin(), raw.end());
    std::vector<ad::Var<Scalar>> radians;
    for (const auto& f : raw) radians.push_back(ad::affine_rows(f, sd, mu));
    tape.set_scope(std::string(scope) + ".loss");
    out.angle = out.angle + angle_loss<Scalar>(radians, data.target);
    if (!std::isfinite(static_cast<double>(out.angle.value()(0, 0)))) throw NumericError("non-finite loss term L_ang");
    if (tr.position_loss) out.position = out.position + position_loss<Scalar>(radians, data.target_pos, st.skeleton);
    if (tr.manifold_loss) codes.push_back(encode<Scalar>(hp, p, raw, mode));
    out.fakes.push_back(ad::stack_frames<Scalar>(raw));
  };
  run_decoder(p.rot, DecoderKind::rotation, "rotation_decoder");
  if (tr.velocity_decoder) run_decoder(p.vel, DecoderKind::velocity, "velocity_decoder");

  tape.set_scope("losses");
  out.reconstruction = out.angle + ad::scale(out.position, static_cast<Scalar>(cfg.weights.position));
  if (tr.manifold_loss) {
    out.manifold = manifold_loss<Scalar>(z, codes[0], codes.size() > 1 ? std::optional(codes[1]) : std::nullopt);
  }
  out.wasserstein = wasserstein_loss<Scalar>(z, prior, KernelConfig::for_prior(hp.latent, hp.prior_variance),
                                             cfg.unbiased_mmd);
  return out;
}

template <typename Scalar>
ad::Var<Scalar> discriminator_loss(ad::Tape<Scalar>& tape, const DiscriminatorBlock<ad::Var<Scalar>>& d,
                                   const Checkpoint<Scalar>& st, const BatchData<Scalar>& data,
                                   const std::vector<Matrix<Scalar>>& fakes, bool train,
                                   DiscriminatorStats<Scalar>* running) {
  std::vector<ad::Var<Scalar>> real_frames;
  for (const auto& f : data.normalized) real_frames.push_back(tape.constant(f));
  tape.set_scope("discriminator");
  const auto real = discriminate<Scalar>(st.model.hp, d, ad::stack_frames<Scalar>(real_frames), data.batch, train,
                                         st.model.running, running);
  std::vector<ad::Var<Scalar>> scores;
  for (const auto& f : fakes) {
    scores.push_back(discriminate<Scalar>(st.model.hp, d, tape.constant(f), data.batch, train, st.model.running, running));
  }
  return discriminator_adversarial_loss<Scalar>(real, scores);
}

template <typename Scalar>
ad::Var<Scalar> generator_adv(ad::Tape<Scalar>& tape, const DiscriminatorBlock<ad::Var<Scalar>>& d,
                              const Checkpoint<Scalar>& st, const GeneratorPass<Scalar>& g, Index batch, bool train) {
  tape.set_scope("adversarial");
  std::vector<ad::Var<Scalar>> scores;
  for (const auto& f : g.fakes) scores.push_back(discriminate<Scalar>(st.model.hp, d, f, batch, train, st.model.running));
  return generator_adversarial_loss<Scalar>(scores);
}

double scalar(const auto& v) { return static_cast<double>(v.value()(0, 0)); }

void check_finite(const StepReport& r) {
  const std::pair<const char*, double> terms[] = {{"L_ang", r.angle},       {"L_pos", r.position},
                                                  {"L_M", r.manifold},      {"L_W", r.wasserstein},
                                                  {"L_D", r.discriminator}, {"L_G", r.generator}};
  for (const auto& [name, v] : terms) {
    if (!std::isfinite(v)) throw NumericError("non-finite loss term " + std::string(name));
  }
}

template <typename Scalar>
void fill(StepReport& r, const GeneratorPass<Scalar>& g) {
  r.angle = scalar(g.angle);
  r.position = scalar(g.position);
  r.reconstruction = scalar(g.reconstruction);
  r.manifold = scalar(g.manifold);
  r.wasserstein = scalar(g.wasserstein);
}

bool adversary_active(const TrainConfig& cfg, Variant v) { return traits(v).adversarial && cfg.weights.adversarial > 0; }

std::function<bool(ParamGroup)> trained_generator_groups(Variant v) {
  const bool vel = traits(v).velocity_decoder;
  return [vel](ParamGroup g) {
    return g == ParamGroup::encoder || g == ParamGroup::rotation_decoder || (vel && g == ParamGroup::velocity_decoder);
  };
}

template <typename Scalar>
std::vector<Matrix<Scalar>> fake_values(const GeneratorPass<Scalar>& g) {
  std::vector<Matrix<Scalar>> out;
  for (const auto& f : g.fakes) out.push_back(f.value());
  return out;
}

}  // namespace

template <typename Scalar>
StepReport train_step(Checkpoint<Scalar>& state, std::span<const Motion<Scalar>> batch, const TrainConfig& cfg,
                      std::mt19937_64& rng, const ad::TapeOptions& tape_options) {
  Model<Scalar>& model = state.model;
  const BatchData<Scalar> data = prepare(batch, state);
  const Matrix<Scalar> prior = draw_prior<Scalar>(model.hp, data.batch, rng);
  const ForwardMode<Scalar> mode{true, &rng};

  ad::Tape<Scalar> tape(tape_options);
  ModelParams<Scalar> grads = zeros_like(model.params);
  const auto p = bind_params<Scalar>(tape, model.params, &grads, is_generator);
  const GeneratorPass<Scalar> g = generator_pass(tape, p, state, data, prior, cfg, mode);

  StepReport report;
  fill(report, g);
  auto adversarial = tape.constant(Matrix<Scalar>::Zero(1, 1));
  if (adversary_active(cfg, model.variant)) {
    ad::Tape<Scalar> dtape(tape_options);
    ModelParams<Scalar> dgrads = zeros_like(model.params);
    const auto d = bind_discriminator(dtape, model.params.disc, &dgrads.disc);
    const auto l_d = discriminator_loss(dtape, d, state, data, fake_values(g), true, &model.running);
    report.discriminator = scalar(l_d);
    if (!std::isfinite(report.discriminator)) check_finite(report);
    dtape.backward(ad::scale(l_d, static_cast<Scalar>(cfg.weights.adversarial)));
    adam_step(model.params, dgrads, state.discriminator_opt, cfg.adam,
              [](ParamGroup grp) { return grp == ParamGroup::discriminator; });

    const auto d_now = bind_discriminator<Scalar>(tape, model.params.disc, nullptr);
    adversarial = generator_adv(tape, d_now, state, g, data.batch, true);
    report.generator = scalar(adversarial);
  }
  check_finite(report);

  tape.set_scope("total");
  const auto total = total_loss<Scalar>({g.reconstruction, g.manifold, g.wasserstein, adversarial}, cfg.weights);
  report.total = scalar(total);
  tape.backward(total);
  const auto groups = trained_generator_groups(model.variant);
  report.recurrent_grad_norm = clip_recurrent(grads, cfg.clip_norm, groups);
  adam_step(model.params, grads, state.generator_opt, cfg.adam, groups);
  return report;
}

template <typename Scalar>
StepReport evaluate_losses(const Checkpoint<Scalar>& state, std::span<const Motion<Scalar>> batch,
                           const TrainConfig& cfg, std::mt19937_64& rng) {
  const BatchData<Scalar> data = prepare(batch, state);
  const Matrix<Scalar> prior = draw_prior<Scalar>(state.model.hp, data.batch, rng);
  ad::Tape<Scalar> tape;
  const auto p = bind_params<Scalar>(tape, state.model.params, nullptr);
  const GeneratorPass<Scalar> g = generator_pass(tape, p, state, data, prior, cfg, ForwardMode<Scalar>{});
  StepReport report;
  fill(report, g);
  if (adversary_active(cfg, state.model.variant)) {
    report.discriminator = scalar(discriminator_loss<Scalar>(tape, p.disc, state, data, fake_values(g), false, nullptr));
    report.generator = scalar(generator_adv(tape, p.disc, state, g, data.batch, false));
  }
  check_finite(report);
  report.total = total_loss({report.reconstruction, report.manifold, report.wasserstein, report.generator}, cfg.weights);
  return report;
}

GradientCheckReport check_gradients(Checkpoint<double>& state, std::span<const Motion<double>> batch,
                                    const TrainConfig& cfg, std::uint64_t seed, const GradientCheckOptions& options,
                                    const ad::TapeOptions& tape_options) {
  using S = double;
  Model<S>& model = state.model;
  const BatchData<S> data = prepare(batch, state);
  const bool adversarial = adversary_active(cfg, model.variant);
  const auto gen_groups = trained_generator_groups(model.variant);

  // Generator objective with fixed dropout masks and prior draws.
  auto generator_objective = [&](ModelParams<S>* grads, const ad::TapeOptions& opts,
                                 std::vector<Matrix<S>>* fakes) -> double {
    std::mt19937_64 rng(seed);
    const Matrix<S> prior = draw_prior<S>(model.hp, data.batch, rng);
    ad::Tape<S> tape(opts);
    const auto p = bind_params<S>(tape, model.params, grads, gen_groups);
    const GeneratorPass<S> g = generator_pass(tape, p, state, data, prior, cfg, ForwardMode<S>{true, &rng});
    auto adv = tape.constant(Matrix<S>::Zero(1, 1));
    if (adversarial) adv = generator_adv(tape, p.disc, state, g, data.batch, true);
    const auto total = total_loss<S>({g.reconstruction, g.manifold, g.wasserstein, adv}, cfg.weights);
    if (fakes) *fakes = fake_values(g);
    if (grads) tape.backward(total);
    return scalar(total);
  };

  ModelParams<S> grads = zeros_like(model.params);
  std::vector<Matrix<S>> fakes;
  generator_objective(&grads, tape_options, &fakes);

  std::vector<GradientBlock> gen_blocks, disc_blocks;
  visit_params(
      [&](const ParamInfo& info, Matrix<S>& value, const Matrix<S>& g) {
        if (gen_groups(info.group)) gen_blocks.push_back({std::string(info.name), &value, g});
      },
      model.params, grads);
  GradientCheckReport report =
      gradient_check([&] { return generator_objective(nullptr, {}, nullptr); }, gen_blocks, options);

  if (adversarial) {
    auto disc_objective = [&](DiscriminatorBlock<Matrix<S>>* dgrads, const ad::TapeOptions& opts) {
      ad::Tape<S> tape(opts);
      const auto d = bind_discriminator<S>(tape, model.params.disc, dgrads);
      const auto l_d = discriminator_loss<S>(tape, d, state, data, fakes, true, nullptr);
      if (dgrads) tape.backward(l_d);
      return scalar(l_d);
    };
    ModelParams<S> dgrads = zeros_like(model.params);
    disc_objective(&dgrads.disc, tape_options);
    visit_params(
        [&](const ParamInfo& info, Matrix<S>& value, const Matrix<S>& g) {
          if (info.group == ParamGroup::discriminator) disc_blocks.push_back({std::string(info.name), &value, g});
        },
        model.params, dgrads);
    const GradientCheckReport d_report = gradient_check([&] { return disc_objective(nullptr, {}); }, disc_blocks, options);
    report.blocks.insert(report.blocks.end(), d_report.blocks.begin(), d_report.blocks.end());
  }
  return report;
}

// ---- training loop ---------------------------------------------------------

std::mt19937_64 epoch_rng(std::uint64_t seed, Index epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(static_cast<std::uint64_t>(epoch) >> 32)};
  return std::mt19937_64(seq);
}

template <typename Scalar>
std::vector<std::vector<Motion<Scalar>>> epoch_batches(std::span<const MotionFile> files, Index frames,
                                                       Index batch_size, std::mt19937_64& rng) {
  if (batch_size < 2) throw ValidationError("epoch_batches: batch_size must be at least 2");
  std::vector<std::size_t> order(files.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Motion<Scalar>> clips;
  for (auto i : order) {
    if (auto clip = sample_clip<Scalar>(files[i], frames, rng)) clips.push_back(std::move(*clip));
  }
  if (clips.size() < 2) {
    throw ValidationError("training needs at least 2 clips of " + std::to_string(frames) + " frames, found " +
                          std::to_string(clips.size()));
  }
  std::vector<std::vector<Motion<Scalar>>> batches;
  for (std::size_t i = 0; i < clips.size(); i += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(clips.size(), i + static_cast<std::size_t>(batch_size));
    if (end - i == 1) {
      batches.back().push_back(std::move(clips[i]));
      break;
    }
    batches.emplace_back(std::make_move_iterator(clips.begin() + static_cast<std::ptrdiff_t>(i)),
                         std::make_move_iterator(clips.begin() + static_cast<std::ptrdiff_t>(end)));
  }
  return batches;
}

std::string loss_csv_header() { return "epoch,L_R,L_ang,L_pos,L_M,L_W,L_G,L_D"; }

std::string loss_csv_row(const EpochRow& row) {
  const auto& l = row.losses;
  return std::to_string(row.epoch) + "," + fmt(l.reconstruction) + "," + fmt(l.angle) + "," + fmt(l.position) + "," +
         fmt(l.manifold) + "," + fmt(l.wasserstein) + "," + fmt(l.generator) + "," + fmt(l.discriminator);
}

namespace {

std::vector<EpochRow> read_loss_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open loss curve " + path.string());
  std::string line;
  std::getline(in, line);
  if (trim(line) != loss_csv_header()) throw ParseError(path.string() + ": unexpected header");
  std::vector<EpochRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(trim(cell));
    if (cells.size() != 8) throw ParseError(path.string() + ": line " + std::to_string(lineno) + ": expected 8 columns");
    try {
      EpochRow r;
      r.epoch = to_int<Index>("epoch", cells[0]);
      auto& l = r.losses;
      l.reconstruction = to_double("L_R", cells[1]);
      l.angle = to_double("L_ang", cells[2]);
      l.position = to_double("L_pos", cells[3]);
      l.manifold = to_double("L_M", cells[4]);
      l.wasserstein = to_double("L_W", cells[5]);
      l.generator = to_double("L_G", cells[6]);
      l.discriminator = to_double("L_D", cells[7]);
      rows.push_back(r);
    } catch (const ParseError& e) {
      throw ParseError(path.string() + ": line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<EpochRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write loss curve " + path.string());
  out << loss_csv_header() << "\n";
  for (const auto& r : rows) out << loss_csv_row(r) << "\n";
  if (!out) throw IoError("write failed: " + path.string());
}

void append_loss_csv(const std::filesystem::path& path, const EpochRow& row) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot append to loss curve " + path.string());
  out << loss_csv_row(row) << "\n";
  if (!out) throw IoError("write failed: " + path.string());
}

void accumulate(StepReport& acc, const StepReport& r) {
  acc.reconstruction += r.reconstruction;
  acc.angle += r.angle;
  acc.position += r.position;
  acc.manifold += r.manifold;
  acc.wasserstein += r.wasserstein;
  acc.generator += r.generator;
  acc.discriminator += r.discriminator;
  acc.total += r.total;
  acc.recurrent_grad_norm += r.recurrent_grad_norm;
}

StepReport divide(StepReport r, std::size_t n) {
  const double k = static_cast<double>(n);
  for (double* v : {&r.reconstruction, &r.angle, &r.position, &r.manifold, &r.wasserstein, &r.generator,
                    &r.discriminator, &r.total, &r.recurrent_grad_norm}) {
    *v /= k;
  }
  return r;
}

// Fields that must agree between a run and its resumption.
TrainConfig resumable_part(TrainConfig c) {
  c.epochs = 0;
  c.checkpoint_every = 1;
  return c;
}

}  // namespace

std::filesystem::path checkpoint_path(const std::filesystem::path& out_dir, Index epoch) {
  char name[32];
  std::snprintf(name, sizeof name, "ckpt_%06lld.bin", static_cast<long long>(epoch));
  return out_dir / name;
}

template <typename Scalar>
TrainResult train(std::span<const MotionFile> files, const TrainConfig& cfg, const std::filesystem::path& out_dir,
                  const std::optional<std::filesystem::path>& resume,
                  const std::function<void(const EpochRow&)>& progress) {
  cfg.validate();
  if (files.empty()) throw ValidationError("train: empty training set");
  const Skeleton& skel = files.front().skeleton;
  for (const auto& f : files) {
    if (!(f.skeleton == skel)) throw ValidationError("train: motion files use different skeletons");
  }
  if (skel.n_joint() != cfg.hyper.joints) {
    throw ValidationError("train: data has " + std::to_string(skel.n_joint()) + " joints, config expects " +
                          std::to_string(cfg.hyper.joints));
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  const auto csv = out_dir / "loss.csv";

  TrainResult result;
  Checkpoint<Scalar> state;
  if (resume) {
    state = load_checkpoint<Scalar>(*resume);
    const auto stored = state.metadata.find("config");
    if (stored == state.metadata.end()) throw ValidationError("resume: checkpoint carries no training config");
    if (!(resumable_part(parse_config(stored->second)) == resumable_part(cfg))) {
      throw ValidationError("resume: config differs from the one the checkpoint was trained with");
    }
    if (!(state.skeleton == skel)) throw ValidationError("resume: data skeleton differs from the checkpoint's");
    for (auto& r : read_loss_csv(resume->parent_path() / "loss.csv")) {
      if (r.epoch <= state.epoch) result.rows.push_back(r);
    }
    if (static_cast<Index>(result.rows.size()) != state.epoch + 1) {
      throw ValidationError("resume: loss curve next to " + resume->string() + " does not cover epoch " +
                            std::to_string(state.epoch));
    }
  } else {
    state = make_checkpoint(Model<Scalar>::init(cfg.hyper, cfg.variant, cfg.seed), skel, fit_normalization(files));
    auto rng = epoch_rng(cfg.seed, 0);
    StepReport acc;
    const auto batches = epoch_batches<Scalar>(files, cfg.hyper.frames, cfg.batch_size, rng);
    for (const auto& b : batches) accumulate(acc, evaluate_losses<Scalar>(state, b, cfg, rng));
    result.rows.push_back({0, divide(acc, batches.size())});
  }
  state.metadata["config"] = serialize_config(cfg);
  write_loss_csv(csv, result.rows);
  if (!resume) {
    save_checkpoint(state, checkpoint_path(out_dir, 0));
    result.checkpoints.push_back(checkpoint_path(out_dir, 0));
  }
  if (progress) progress(result.rows.back());

  for (Index epoch = state.epoch + 1; epoch <= cfg.epochs; ++epoch) {
    auto rng = epoch_rng(cfg.seed, epoch);
    const auto batches = epoch_batches<Scalar>(files, cfg.hyper.frames, cfg.batch_size, rng);
    StepReport acc;
    for (const auto& b : batches) accumulate(acc, train_step<Scalar>(state, b, cfg, rng));
    state.epoch = epoch;
    const EpochRow row{epoch, divide(acc, batches.size())};
    result.rows.push_back(row);
    append_loss_csv(csv, row);
    if (epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs) {
      save_checkpoint(state, checkpoint_path(out_dir, epoch));
      result.checkpoints.push_back(checkpoint_path(out_dir, epoch));
    }
    if (progress) progress(row);
  }
  return result;
}

#define LMM_INSTANTIATE(S)                                                                                           \
  template StepReport train_step<S>(Checkpoint<S>&, std::span<const Motion<S>>, const TrainConfig&,                  \
                                    std::mt19937_64&, const ad::TapeOptions&);                                        \
  template StepReport evaluate_losses<S>(const Checkpoint<S>&, std::span<const Motion<S>>, const TrainConfig&,       \
                                         std::mt19937_64&);                                                           \
  template TrainResult train<S>(std::span<const MotionFile>, const TrainConfig&, const std::filesystem::path&,       \
                                const std::optional<std::filesystem::path>&,                                         \
                                const std::function<void(const EpochRow&)>&);                                        \
  template std::vector<std::vector<Motion<S>>> epoch_batches<S>(std::span<const MotionFile>, Index, Index,           \
                                                                 std::mt19937_64&);
LMM_INSTANTIATE(float)
LMM_INSTANTIATE(double)
#undef LMM_INSTANTIATE

}  // namespace lmm
