#pragma once

#include "lmm/autodiff.hpp"
#include "lmm/common.hpp"

#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace lmm {

/// Ablation ladder: S (rotation decoder only), D (+velocity decoder),
/// DK (+FK position loss), DKG (+adversarial loss), DKGM (+manifold
/// reconstruction loss), DKGMZ (+latent code concatenated to decoder input).
enum class Variant { S, D, DK, DKG, DKGM, DKGMZ };

struct VariantTraits {
  bool velocity_decoder;
  bool position_loss;
  bool adversarial;
  bool manifold_loss;
  bool latent_input;
};

VariantTraits traits(Variant v);
std::string to_string(Variant v);
/// Throws ValidationError for unknown names.
Variant parse_variant(std::string_view name);

struct HyperParams {
  Index hidden = 1024;
  Index latent = 64;
  Index frames = 150;
  Index joints = 17;
  double dropout = 0.2;
  double prior_variance = 1.0;

  Index pose_dim() const { return 3 * joints; }
  /// Throws ValidationError when a field is out of range.
  void validate() const;
  bool operator==(const HyperParams&) const = default;
};

template <typename T>
struct LinearBlock {
  T W, b;
};

template <typename T>
struct DecoderBlock {
  LinearBlock<T> expand;
  ad::GruBlock<T> gru;
  LinearBlock<T> out;
};

template <typename T>
struct NormBlock {
  T gamma, beta;
};

// Four temporal convolutions over the 3*n_joint input channels:
// 32, 64, 128 channels with kernel 4 / stride 2 / reflect padding 1 and leaky
// ReLU(0.2), batch norm on layers 2 and 3, then a kernel-1 ReLU scoring layer.
template <typename T>
struct DiscriminatorBlock {
  LinearBlock<T> conv1, conv2, conv3, conv4;
  NormBlock<T> norm2, norm3;
};

template <typename T>
struct ParamTree {
  ad::GruBlock<T> encoder;
  LinearBlock<T> compress;
  DecoderBlock<T> rot;
  DecoderBlock<T> vel;
  DiscriminatorBlock<T> disc;
};

template <typename Scalar>
using ModelParams = ParamTree<Matrix<Scalar>>;

enum class ParamGroup { encoder, rotation_decoder, velocity_decoder, discriminator };

struct ParamInfo {
  std::string_view name;
  ParamGroup group;
  bool recurrent;
};

inline bool is_generator(ParamGroup g) { return g != ParamGroup::discriminator; }

/// Calls f(info, tree.leaf...) for every leaf, in a fixed order, across any
/// number of identically structured trees.
template <typename F, typename... Trees>
void visit_params(F&& f, Trees&&... trees) {
#define LMM_LEAF(path, group, recurrent) f(ParamInfo{#path, group, recurrent}, trees.path...)
  constexpr auto enc = ParamGroup::encoder;
  constexpr auto rot = ParamGroup::rotation_decoder;
  constexpr auto vel = ParamGroup::velocity_decoder;
  constexpr auto dis = ParamGroup::discriminator;
  LMM_LEAF(encoder.W, enc, true);
  LMM_LEAF(encoder.U, enc, true);
  LMM_LEAF(encoder.b_in, enc, true);
  LMM_LEAF(encoder.b_h, enc, true);
  LMM_LEAF(compress.W, enc, false);
  LMM_LEAF(compress.b, enc, false);
  LMM_LEAF(rot.expand.W, rot, false);
  LMM_LEAF(rot.expand.b, rot, false);
  LMM_LEAF(rot.gru.W, rot, true);
  LMM_LEAF(rot.gru.U, rot, true);
  LMM_LEAF(rot.gru.b_in, rot, true);
  LMM_LEAF(rot.gru.b_h, rot, true);
  LMM_LEAF(rot.out.W, rot, false);
  LMM_LEAF(rot.out.b, rot, false);
  LMM_LEAF(vel.expand.W, vel, false);
  LMM_LEAF(vel.expand.b, vel, false);
  LMM_LEAF(vel.gru.W, vel, true);
  LMM_LEAF(vel.gru.U, vel, true);
  LMM_LEAF(vel.gru.b_in, vel, true);
  LMM_LEAF(vel.gru.b_h, vel, true);
  LMM_LEAF(vel.out.W, vel, false);
  LMM_LEAF(vel.out.b, vel, false);
  LMM_LEAF(disc.conv1.W, dis, false);
  LMM_LEAF(disc.conv1.b, dis, false);
  LMM_LEAF(disc.conv2.W, dis, false);
  LMM_LEAF(disc.conv2.b, dis, false);
  LMM_LEAF(disc.norm2.gamma, dis, false);
  LMM_LEAF(disc.norm2.beta, dis, false);
  LMM_LEAF(disc.conv3.W, dis, false);
  LMM_LEAF(disc.conv3.b, dis, false);
  LMM_LEAF(disc.norm3.gamma, dis, false);
  LMM_LEAF(disc.norm3.beta, dis, false);
  LMM_LEAF(disc.conv4.W, dis, false);
  LMM_LEAF(disc.conv4.b, dis, false);
#undef LMM_LEAF
}

/// Batch-norm running averages of the discriminator (not trained by Adam).
template <typename Scalar>
struct DiscriminatorStats {
  Vector<Scalar> mean2, var2, mean3, var3;
  bool operator==(const DiscriminatorStats& o) const {
    return same(mean2, o.mean2) && same(var2, o.var2) && same(mean3, o.mean3) && same(var3, o.var3);
  }
};

template <typename Scalar>
struct Model {
  HyperParams hp;
  Variant variant = Variant::DKGM;
  ModelParams<Scalar> params;
  DiscriminatorStats<Scalar> running;

  /// Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit batch-norm scale.
  static Model init(const HyperParams& hp, Variant variant, std::uint64_t seed);
};

/// Parameter tree of zeros shaped like `like`.
template <typename Scalar>
ModelParams<Scalar> zeros_like(const ModelParams<Scalar>& like);

template <typename Scalar>
ModelParams<Scalar> param_shapes(const HyperParams& hp, Variant variant);

template <typename Scalar>
struct ForwardMode {
  bool train = false;
  std::mt19937_64* rng = nullptr;  // dropout masks; required when train
};

enum class DecoderKind { rotation, velocity };

/// Called on each raw decoder output before it is fed back (test hook).
template <typename Scalar>
using StepHook = std::function<void(Index step, Matrix<Scalar>& output)>;

// ---- tape-level network ----------------------------------------------------

template <typename Scalar>
using BoundParams = ParamTree<ad::Var<Scalar>>;

/// Registers every parameter on `tape`. Leaves whose group passes
/// `with_grad` accumulate into the matching entry of *grads; the rest are
/// constants. grads may be null (no gradients).
template <typename Scalar>
BoundParams<Scalar> bind_params(ad::Tape<Scalar>& tape, const ModelParams<Scalar>& params,
                                ModelParams<Scalar>* grads,
                                const std::function<bool(ParamGroup)>& with_grad = {});

/// GRU over the frames (each 3*n_joint x batch) from a zero state, then the
/// compression linear on the (dropped-out) last hidden state.
template <typename Scalar>
ad::Var<Scalar> encode(const HyperParams& hp, const BoundParams<Scalar>& p,
                       std::span<const ad::Var<Scalar>> frames, ForwardMode<Scalar> mode);

/// Autoregressive decoding from code z (latent x batch). Returns the raw
/// output sequence, i.e. last frame first.
template <typename Scalar>
std::vector<ad::Var<Scalar>> decode(const HyperParams& hp, Variant variant,
                                    const DecoderBlock<ad::Var<Scalar>>& p, DecoderKind kind,
                                    ad::Var<Scalar> z, ForwardMode<Scalar> mode,
                                    const StepHook<Scalar>* hook = nullptr);

/// Scores a stacked batch (3*n_joint x frames*batch). Train mode uses batch
/// statistics and, if `running_update` is set, folds them into it.
template <typename Scalar>
ad::Var<Scalar> discriminate(const HyperParams& hp, const DiscriminatorBlock<ad::Var<Scalar>>& p,
                             ad::Var<Scalar> stacked, Index batch, bool train,
                             const DiscriminatorStats<Scalar>& eval_stats,
                             DiscriminatorStats<Scalar>* running_update = nullptr);

/// Temporal length of the discriminator score map for a clip of `frames`.
Index discriminator_output_length(Index frames);

// ---- value-level convenience ----------------------------------------------

template <typename Scalar>
struct Decoded {
  Motion<Scalar> forward;   // frame t in column t
  Motion<Scalar> reversed;  // raw decoder order, column 0 = last frame
};

template <typename Scalar>
struct Reconstruction {
  Vector<Scalar> z;
  Decoded<Scalar> rot;
  Decoded<Scalar> vel;
};

template <typename Scalar>
Vector<Scalar> encode(const Model<Scalar>& model, const Motion<Scalar>& motion,
                      ForwardMode<Scalar> mode = {});

template <typename Scalar>
Decoded<Scalar> decode_rotation(const Model<Scalar>& model, const Vector<Scalar>& z,
                                ForwardMode<Scalar> mode = {}, const StepHook<Scalar>* hook = nullptr);

template <typename Scalar>
Decoded<Scalar> decode_velocity(const Model<Scalar>& model, const Vector<Scalar>& z,
                                ForwardMode<Scalar> mode = {}, const StepHook<Scalar>* hook = nullptr);

/// Eval-mode score map (1 x output length) for one motion.
template <typename Scalar>
Matrix<Scalar> discriminate(const Model<Scalar>& model, const Motion<Scalar>& motion);

/// encode followed by both decoders, eval mode.
template <typename Scalar>
Reconstruction<Scalar> reconstruct(const Model<Scalar>& model, const Motion<Scalar>& motion);

/// Reverses the column order.
template <typename Scalar>
Motion<Scalar> reverse_frames(const Motion<Scalar>& m) {
  return m.rowwise().reverse();
}

}  // namespace lmm
