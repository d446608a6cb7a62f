#include "lmm/model.hpp"

#include <array>
#include <cmath>

namespace lmm {

VariantTraits traits(Variant v) {
  switch (v) {
    case Variant::S: return {false, false, false, false, false};
    case Variant::D: return {true, false, false, false, false};
    case Variant::DK: return {true, true, false, false, false};
    case Variant::DKG: return {true, true, true, false, false};
    case Variant::DKGM: return {true, true, true, true, false};
    case Variant::DKGMZ: return {true, true, true, true, true};
  }
  throw std::logic_error("unknown variant");
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::S: return "S";
    case Variant::D: return "D";
    case Variant::DK: return "DK";
    case Variant::DKG: return "DKG";
    case Variant::DKGM: return "DKGM";
    case Variant::DKGMZ: return "DKGMZ";
  }
  throw std::logic_error("unknown variant");
}

Variant parse_variant(std::string_view name) {
  for (Variant v : {Variant::S, Variant::D, Variant::DK, Variant::DKG, Variant::DKGM, Variant::DKGMZ}) {
    if (to_string(v) == name) return v;
  }
  throw ValidationError("unknown model variant '" + std::string(name) +
                        "' (expected S, D, DK, DKG, DKGM or DKGMZ)");
}

void HyperParams::validate() const {
  auto fail = [](const std::string& what) { throw ValidationError("hyperparameters: " + what); };
  if (hidden < 1) fail("hidden size must be positive");
  if (latent < 1) fail("latent size must be positive");
  if (joints < 1) fail("joint count must be positive");
  if (frames < 2) fail("clip length must be at least 2 frames");
  if (!(dropout >= 0 && dropout < 1)) fail("dropout must be in [0, 1)");
  if (!(prior_variance > 0)) fail("prior variance must be positive");
}

Index discriminator_output_length(Index frames) {
  Index len = frames;
  for (int layer = 0; layer < 3; ++layer) {
    if (len < 2) return 0;  // reflect padding needs two samples
    len = ad::conv1d_output_length(len, 4, 2, 1);
  }
  return len;
}

template <typename Scalar>
ModelParams<Scalar> param_shapes(const HyperParams& hp, Variant variant) {
  hp.validate();
  const Index h = hp.hidden;
  const Index l = hp.latent;
  const Index p = hp.pose_dim();
  const Index dec_in = p + (traits(variant).latent_input ? l : 0);
  using M = Matrix<Scalar>;
  auto gru = [h](Index in) { return ad::GruBlock<M>{M(3 * h, in), M(3 * h, h), M(3 * h, 1), M(3 * h, 1)}; };
  auto linear = [](Index out, Index in) { return LinearBlock<M>{M(out, in), M(out, 1)}; };
  auto decoder = [&] { return DecoderBlock<M>{linear(h, l), gru(dec_in), linear(p, h)}; };

  ModelParams<Scalar> out;
  out.encoder = gru(p);
  out.compress = linear(l, h);
  out.rot = decoder();
  out.vel = decoder();
  out.disc.conv1 = linear(32, 4 * p);
  out.disc.conv2 = linear(64, 4 * 32);
  out.disc.conv3 = linear(128, 4 * 64);
  out.disc.conv4 = linear(1, 128);
  out.disc.norm2 = {M(64, 1), M(64, 1)};
  out.disc.norm3 = {M(128, 1), M(128, 1)};
  return out;
}

template <typename Scalar>
ModelParams<Scalar> zeros_like(const ModelParams<Scalar>& like) {
  ModelParams<Scalar> out = like;
  visit_params([](const ParamInfo&, Matrix<Scalar>& m) { m.setZero(); }, out);
  return out;
}

template <typename Scalar>
Model<Scalar> Model<Scalar>::init(const HyperParams& hp, Variant variant, std::uint64_t seed) {
  Model model;
  model.hp = hp;
  model.variant = variant;
  model.params = param_shapes<Scalar>(hp, variant);
  std::mt19937_64 rng(seed);
  visit_params(
      [&rng](const ParamInfo& info, Matrix<Scalar>& m) {
        const std::string_view name = info.name;
        if (name.ends_with("gamma")) {
          m.setOnes();
        } else if (name.ends_with(".b") || name.ends_with("b_in") || name.ends_with("b_h") ||
                   name.ends_with("beta")) {
          m.setZero();
        } else {
          const double bound = 1.0 / std::sqrt(static_cast<double>(m.cols()));
          std::uniform_real_distribution<double> uniform(-bound, bound);
          for (Index j = 0; j < m.cols(); ++j) {
            for (Index i = 0; i < m.rows(); ++i) m(i, j) = static_cast<Scalar>(uniform(rng));
          }
        }
      },
      model.params);
  model.running = {Vector<Scalar>::Zero(64), Vector<Scalar>::Ones(64), Vector<Scalar>::Zero(128),
                   Vector<Scalar>::Ones(128)};
  return model;
}

template <typename Scalar>
BoundParams<Scalar> bind_params(ad::Tape<Scalar>& tape, const ModelParams<Scalar>& params,
                                ModelParams<Scalar>* grads,
                                const std::function<bool(ParamGroup)>& with_grad) {
  BoundParams<Scalar> vars;
  if (grads == nullptr) {
    visit_params([&tape](const ParamInfo&, ad::Var<Scalar>& v,
                         const Matrix<Scalar>& value) { v = tape.parameter(value, nullptr); },
                 vars, params);
    return vars;
  }
  visit_params(
      [&tape, &with_grad](const ParamInfo& info, ad::Var<Scalar>& v, const Matrix<Scalar>& value,
                          Matrix<Scalar>& grad) {
        const bool active = !with_grad || with_grad(info.group);
        v = tape.parameter(value, active ? &grad : nullptr);
      },
      vars, params, *grads);
  return vars;
}

namespace {

template <typename Scalar>
ad::Var<Scalar> linear(ad::Var<Scalar> x, const LinearBlock<ad::Var<Scalar>>& p) {
  return ad::add_bias(ad::matmul(p.W, x), p.b);
}

}  // namespace

template <typename Scalar>
ad::Var<Scalar> encode(const HyperParams& hp, const BoundParams<Scalar>& p,
                       std::span<const ad::Var<Scalar>> frames, ForwardMode<Scalar> mode) {
  if (frames.empty()) throw ShapeError("encode: empty motion");
  auto& tape = frames.front().tape();
  const Index batch = frames.front().cols();
  for (const auto& f : frames) {
    if (f.rows() != hp.pose_dim() || f.cols() != batch) {
      throw ShapeError("encode: frame " + dims(f.rows(), f.cols()) + ", expected " +
                       dims(hp.pose_dim(), batch));
    }
  }
  ad::Var<Scalar> h = tape.constant(Matrix<Scalar>::Zero(hp.hidden, batch));
  for (const auto& x : frames) h = ad::gru_cell(x, h, p.encoder);
  h = ad::dropout(h, static_cast<Scalar>(hp.dropout), mode.train, mode.rng);
  return linear(h, p.compress);
}

template <typename Scalar>
std::vector<ad::Var<Scalar>> decode(const HyperParams& hp, Variant variant,
                                    const DecoderBlock<ad::Var<Scalar>>& p, DecoderKind kind,
                                    ad::Var<Scalar> z, ForwardMode<Scalar> mode,
                                    const StepHook<Scalar>* hook) {
  if (z.rows() != hp.latent) {
    throw ShapeError("decode: code " + dims(z.rows(), z.cols()) + ", expected " +
                     std::to_string(hp.latent) + " rows");
  }
  auto& tape = z.tape();
  const Index batch = z.cols();
  const bool with_code = traits(variant).latent_input;

  ad::Var<Scalar> h = linear(z, p.expand);
  ad::Var<Scalar> prev = tape.constant(Matrix<Scalar>::Zero(hp.pose_dim(), batch));
  std::vector<ad::Var<Scalar>> raw;
  raw.reserve(static_cast<std::size_t>(hp.frames));
  for (Index step = 0; step < hp.frames; ++step) {
    ad::Var<Scalar> input = prev;
    if (with_code) {
      const std::array<ad::Var<Scalar>, 2> parts{prev, z};
      input = ad::concat_rows<Scalar>(parts);
    }
    h = ad::gru_cell(input, h, p.gru);
    ad::Var<Scalar> out =
        linear(ad::dropout(h, static_cast<Scalar>(hp.dropout), mode.train, mode.rng), p.out);
    if (kind == DecoderKind::velocity) out = ad::add(out, prev);
    if (hook != nullptr && *hook) {
      Matrix<Scalar> value = out.value();
      (*hook)(step, value);
      if (value != out.value()) out = tape.constant(std::move(value));
    }
    raw.push_back(out);
    prev = out;
  }
  return raw;
}

template <typename Scalar>
ad::Var<Scalar> discriminate(const HyperParams& hp, const DiscriminatorBlock<ad::Var<Scalar>>& p,
                             ad::Var<Scalar> stacked, Index batch, bool train,
                             const DiscriminatorStats<Scalar>& eval_stats,
                             DiscriminatorStats<Scalar>* running_update) {
  if (stacked.rows() != hp.pose_dim() || batch < 1 || stacked.cols() % batch != 0) {
    throw ShapeError("discriminate: input " + dims(stacked.rows(), stacked.cols()) + " for batch " +
                     std::to_string(batch));
  }
  const Index frames = stacked.cols() / batch;
  if (discriminator_output_length(frames) < 1) {
    throw std::invalid_argument("discriminate: clip of " + std::to_string(frames) +
                                " frames is too short for the stride-2 stack (need >= 8)");
  }
  const auto slope = Scalar(0.2);
  ad::BatchNormRunning<Scalar> run2, run3;
  if (running_update != nullptr) {
    run2 = {&running_update->mean2, &running_update->var2};
    run3 = {&running_update->mean3, &running_update->var3};
  }
  auto h = ad::leaky_relu(ad::conv1d(stacked, p.conv1.W, p.conv1.b, batch, 4, 2, 1), slope);
  h = ad::conv1d(h, p.conv2.W, p.conv2.b, batch, 4, 2, 1);
  h = ad::leaky_relu(ad::batch_norm(h, p.norm2.gamma, p.norm2.beta, train, eval_stats.mean2,
                                    eval_stats.var2, run2),
                     slope);
  h = ad::conv1d(h, p.conv3.W, p.conv3.b, batch, 4, 2, 1);
  h = ad::leaky_relu(ad::batch_norm(h, p.norm3.gamma, p.norm3.beta, train, eval_stats.mean3,
                                    eval_stats.var3, run3),
                     slope);
  return ad::relu(ad::conv1d(h, p.conv4.W, p.conv4.b, batch, 1, 1, 0));
}

namespace {

template <typename Scalar>
void check_motion(const HyperParams& hp, const Motion<Scalar>& m, const char* op) {
  if (m.rows() != hp.pose_dim() || m.cols() != hp.frames) {
    throw ShapeError(std::string(op) + ": motion " + dims(m) + ", expected " +
                     dims(hp.pose_dim(), hp.frames));
  }
}

template <typename Scalar>
std::vector<ad::Var<Scalar>> frame_constants(ad::Tape<Scalar>& tape, const Motion<Scalar>& m) {
  std::vector<ad::Var<Scalar>> frames;
  frames.reserve(static_cast<std::size_t>(m.cols()));
  for (Index t = 0; t < m.cols(); ++t) frames.push_back(tape.constant(m.col(t)));
  return frames;
}

template <typename Scalar>
Decoded<Scalar> collect(const std::vector<ad::Var<Scalar>>& raw, Index pose_dim) {
  Decoded<Scalar> out;
  const auto n = static_cast<Index>(raw.size());
  out.reversed.resize(pose_dim, n);
  for (Index i = 0; i < n; ++i) out.reversed.col(i) = raw[static_cast<std::size_t>(i)].value().col(0);
  out.forward = reverse_frames(out.reversed);
  return out;
}

template <typename Scalar>
Decoded<Scalar> decode_value(const Model<Scalar>& model, const Vector<Scalar>& z, DecoderKind kind,
                             ForwardMode<Scalar> mode, const StepHook<Scalar>* hook) {
  if (z.size() != model.hp.latent || !z.allFinite()) {
    throw ShapeError("decode: code of length " + std::to_string(z.size()) + ", expected finite " +
                     std::to_string(model.hp.latent));
  }
  ad::Tape<Scalar> tape;
  const auto p = bind_params<Scalar>(tape, model.params, nullptr);
  const auto zv = tape.constant(z);
  const auto& block = kind == DecoderKind::rotation ? p.rot : p.vel;
  return collect(decode(model.hp, model.variant, block, kind, zv, mode, hook), model.hp.pose_dim());
}

}  // namespace

template <typename Scalar>
Vector<Scalar> encode(const Model<Scalar>& model, const Motion<Scalar>& motion, ForwardMode<Scalar> mode) {
  check_motion(model.hp, motion, "encode");
  ad::Tape<Scalar> tape;
  const auto p = bind_params<Scalar>(tape, model.params, nullptr);
  const auto frames = frame_constants(tape, motion);
  return encode<Scalar>(model.hp, p, frames, mode).value().col(0);
}

template <typename Scalar>
Decoded<Scalar> decode_rotation(const Model<Scalar>& model, const Vector<Scalar>& z,
                                ForwardMode<Scalar> mode, const StepHook<Scalar>* hook) {
  return decode_value(model, z, DecoderKind::rotation, mode, hook);
}

template <typename Scalar>
Decoded<Scalar> decode_velocity(const Model<Scalar>& model, const Vector<Scalar>& z,
                                ForwardMode<Scalar> mode, const StepHook<Scalar>* hook) {
  return decode_value(model, z, DecoderKind::velocity, mode, hook);
}

template <typename Scalar>
Matrix<Scalar> discriminate(const Model<Scalar>& model, const Motion<Scalar>& motion) {
  if (motion.rows() != model.hp.pose_dim()) {
    throw ShapeError("discriminate: motion " + dims(motion) + ", expected " +
                     std::to_string(model.hp.pose_dim()) + " rows");
  }
  ad::Tape<Scalar> tape;
  const auto p = bind_params<Scalar>(tape, model.params, nullptr);
  const auto frames = frame_constants(tape, motion);
  const auto stacked = ad::stack_frames<Scalar>(frames);
  return discriminate(model.hp, p.disc, stacked, 1, false, model.running).value();
}

template <typename Scalar>
Reconstruction<Scalar> reconstruct(const Model<Scalar>& model, const Motion<Scalar>& motion) {
  Reconstruction<Scalar> out;
  out.z = encode(model, motion);
  out.rot = decode_rotation(model, out.z);
  out.vel = decode_velocity(model, out.z);
  return out;
}

#define LMM_INSTANTIATE_MODEL(S)                                                                   \
  template struct Model<S>;                                                                        \
  template ModelParams<S> param_shapes<S>(const HyperParams&, Variant);                            \
  template ModelParams<S> zeros_like<S>(const ModelParams<S>&);                                    \
  template BoundParams<S> bind_params<S>(ad::Tape<S>&, const ModelParams<S>&, ModelParams<S>*,     \
                                         const std::function<bool(ParamGroup)>&);                  \
  template ad::Var<S> encode<S>(const HyperParams&, const BoundParams<S>&,                         \
                                std::span<const ad::Var<S>>, ForwardMode<S>);                      \
  template std::vector<ad::Var<S>> decode<S>(const HyperParams&, Variant,                          \
                                             const DecoderBlock<ad::Var<S>>&, DecoderKind,         \
                                             ad::Var<S>, ForwardMode<S>, const StepHook<S>*);      \
  template ad::Var<S> discriminate<S>(const HyperParams&, const DiscriminatorBlock<ad::Var<S>>&,   \
                                      ad::Var<S>, Index, bool, const DiscriminatorStats<S>&,       \
                                      DiscriminatorStats<S>*);                                     \
  template Vector<S> encode<S>(const Model<S>&, const Motion<S>&, ForwardMode<S>);                 \
  template Decoded<S> decode_rotation<S>(const Model<S>&, const Vector<S>&, ForwardMode<S>,        \
                                         const StepHook<S>*);                                      \
  template Decoded<S> decode_velocity<S>(const Model<S>&, const Vector<S>&, ForwardMode<S>,        \
                                         const StepHook<S>*);                                      \
  template Matrix<S> discriminate<S>(const Model<S>&, const Motion<S>&);                           \
  template Reconstruction<S> reconstruct<S>(const Model<S>&, const Motion<S>&);

LMM_INSTANTIATE_MODEL(float)
LMM_INSTANTIATE_MODEL(double)

}  // namespace lmm
