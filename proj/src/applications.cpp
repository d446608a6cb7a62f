#include "lmm/applications.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace lmm {

Eigen::MatrixXd sample_latents(Index latent, Index n, double sigma_sq, std::uint64_t seed) {
  if (latent < 1 || n < 0) throw ValidationError("sample_latents: bad dimensions");
  if (!(sigma_sq >= 0)) throw ValidationError("sample_latents: variance must be non-negative");
  Eigen::MatrixXd z = Eigen::MatrixXd::Zero(latent, n);
  if (sigma_sq == 0) return z;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, std::sqrt(sigma_sq));
  for (Index j = 0; j < n; ++j) {
    for (Index i = 0; i < latent; ++i) z(i, j) = gauss(rng);
  }
  return z;
}

template <typename Scalar>
Motion<Scalar> decode_latent(const Checkpoint<Scalar>& ckpt, const Vector<Scalar>& z, DecoderKind kind) {
  const Decoded<Scalar> d = kind == DecoderKind::rotation ? decode_rotation(ckpt.model, z) : decode_velocity(ckpt.model, z);
  return invert_normalization<Scalar>(d.forward, ckpt.norm);
}

template <typename Scalar>
Vector<Scalar> encode_motion(const Checkpoint<Scalar>& ckpt, const Motion<Scalar>& motion) {
  return encode(ckpt.model, apply_normalization<Scalar>(motion, ckpt.norm));
}

template <typename Scalar>
std::vector<Motion<Scalar>> sample_random(const Checkpoint<Scalar>& ckpt, Index n, double sigma_sq,
                                          std::uint64_t seed, DecoderKind kind) {
  const Eigen::MatrixXd z = sample_latents(ckpt.model.hp.latent, n, sigma_sq, seed);
  std::vector<Motion<Scalar>> out;
  for (Index i = 0; i < n; ++i) out.push_back(decode_latent<Scalar>(ckpt, z.col(i).cast<Scalar>(), kind));
  return out;
}

template <typename Scalar>
std::vector<Vector<Scalar>> interpolate_latents(const Vector<Scalar>& za, const Vector<Scalar>& zb, Index steps) {
  if (steps < 2) throw ValidationError("interpolate: steps must be at least 2");
  if (za.size() != zb.size()) throw ShapeError("interpolate: latent sizes differ");
  std::vector<Vector<Scalar>> out;
  for (Index k = 0; k < steps; ++k) {
    const auto a = static_cast<Scalar>(static_cast<double>(k) / static_cast<double>(steps - 1));
    out.push_back(za.binaryExpr(zb, [a](Scalar x, Scalar y) { return x == y ? x : (Scalar(1) - a) * x + a * y; }));
  }
  return out;
}

template <typename Scalar>
std::vector<Motion<Scalar>> interpolate(const Checkpoint<Scalar>& ckpt, const Motion<Scalar>& a,
                                        const Motion<Scalar>& b, Index steps, DecoderKind kind) {
  const auto zs = interpolate_latents<Scalar>(encode_motion(ckpt, a), encode_motion(ckpt, b), steps);
  std::vector<Motion<Scalar>> out;
  for (const auto& z : zs) out.push_back(decode_latent(ckpt, z, kind));
  return out;
}

template <typename Scalar>
Motion<Scalar> reconstruct_motion(const Checkpoint<Scalar>& ckpt, const Motion<Scalar>& motion, DecoderKind kind) {
  return decode_latent(ckpt, encode_motion(ckpt, motion), kind);
}

template <typename Scalar>
Motion<Scalar> denoise(const Checkpoint<Scalar>& ckpt, const Motion<Scalar>& noisy, DecoderKind kind) {
  return reconstruct_motion(ckpt, noisy, kind);
}

template <typename Scalar>
Vector<Scalar> analogy_latent(const Vector<Scalar>& za, const Vector<Scalar>& zb, const Vector<Scalar>& zc) {
  if (za.size() != zb.size() || za.size() != zc.size()) throw ShapeError("analogy: latent sizes differ");
  Vector<Scalar> out(za.size());
  for (Index i = 0; i < za.size(); ++i) out[i] = zb[i] == zc[i] ? za[i] + (zc[i] - zb[i]) : (za[i] - zb[i]) + zc[i];
  return out;
}

template <typename Scalar>
Motion<Scalar> analogy(const Checkpoint<Scalar>& ckpt, const Motion<Scalar>& a, const Motion<Scalar>& b,
                       const Motion<Scalar>& c, DecoderKind kind) {
  return decode_latent(ckpt, analogy_latent<Scalar>(encode_motion(ckpt, a), encode_motion(ckpt, b), encode_motion(ckpt, c)),
                       kind);
}

template <typename Scalar>
Eigen::VectorXd ModelCodec<Scalar>::encode(const Eigen::MatrixXd& m) const {
  return encode_motion<Scalar>(ckpt_, m.cast<Scalar>()).template cast<double>();
}

template <typename Scalar>
Eigen::MatrixXd ModelCodec<Scalar>::decode(const Eigen::VectorXd& z, DecoderKind kind) const {
  return decode_latent<Scalar>(ckpt_, z.cast<Scalar>(), kind).template cast<double>();
}

std::vector<std::pair<Index, Index>> interval_bounds(Index frames) {
  const Index n = MetricReport::n_intervals;
  if (frames < n) throw ValidationError("evaluate: clips need at least 5 frames");
  std::vector<std::pair<Index, Index>> out;
  for (Index k = 0; k < n; ++k) out.emplace_back(k * frames / n, (k + 1) * frames / n);
  return out;
}

std::string MetricReport::to_csv() const {
  std::ostringstream out;
  out << "# variant=" << variant << " checkpoint=" << checkpoint << " n_motions=" << n_motions << "\n";
  out << "decoder,interval_end_s,E_r,E_p,E_z\n";
  char buf[160];
  for (const auto& d : decoders) {
    for (const auto& i : d.intervals) {
      std::snprintf(buf, sizeof buf, "%s,%.3g,%.17g,%.17g,\n", d.decoder.c_str(), i.interval_end_s, i.E_r, i.E_p);
      out << buf;
    }
  }
  for (const auto& d : decoders) {
    std::snprintf(buf, sizeof buf, "%s,summary,,,%.17g\n", d.decoder.c_str(), d.E_z);
    out << buf;
  }
  return out.str();
}

std::vector<Eigen::MatrixXd> evaluation_clips(std::span<const MotionFile> test, Index frames, Index n_eval,
                                              std::uint64_t seed) {
  if (n_eval < 1) throw ValidationError("evaluate: n_eval must be at least 1");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(test.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Eigen::MatrixXd> clips;
  for (auto i : order) {
    if (static_cast<Index>(clips.size()) == n_eval) break;
    if (auto clip = sample_clip<double>(test[i], frames, rng)) clips.push_back(std::move(*clip));
  }
  if (clips.empty()) throw ValidationError("evaluate: no test motion holds " + std::to_string(frames) + " frames");
  return clips;
}

template <typename Scalar>
MetricReport evaluate(const Checkpoint<Scalar>& ckpt, std::span<const MotionFile> test, Index n_eval,
                      std::uint64_t seed, double fps, unsigned threads) {
  if (test.empty()) throw ValidationError("evaluate: empty test set");
  const auto clips = evaluation_clips(test, ckpt.model.hp.frames, n_eval, seed);
  MetricReport report = evaluate_codec(ModelCodec<Scalar>(ckpt), clips, ckpt.skeleton, fps, threads);
  report.variant = to_string(ckpt.model.variant);
  return report;
}

#define LMM_INSTANTIATE(S)                                                                                           \
  template Motion<S> decode_latent<S>(const Checkpoint<S>&, const Vector<S>&, DecoderKind);                          \
  template Vector<S> encode_motion<S>(const Checkpoint<S>&, const Motion<S>&);                                       \
  template std::vector<Motion<S>> sample_random<S>(const Checkpoint<S>&, Index, double, std::uint64_t, DecoderKind); \
  template std::vector<Vector<S>> interpolate_latents<S>(const Vector<S>&, const Vector<S>&, Index);                 \
  template std::vector<Motion<S>> interpolate<S>(const Checkpoint<S>&, const Motion<S>&, const Motion<S>&, Index,    \
                                                 DecoderKind);                                                       \
  template Motion<S> reconstruct_motion<S>(const Checkpoint<S>&, const Motion<S>&, DecoderKind);                     \
  template Motion<S> denoise<S>(const Checkpoint<S>&, const Motion<S>&, DecoderKind);                                \
  template Vector<S> analogy_latent<S>(const Vector<S>&, const Vector<S>&, const Vector<S>&);                        \
  template Motion<S> analogy<S>(const Checkpoint<S>&, const Motion<S>&, const Motion<S>&, const Motion<S>&,          \
                                DecoderKind);                                                                        \
  template class ModelCodec<S>;                                                                                      \
  template MetricReport evaluate<S>(const Checkpoint<S>&, std::span<const MotionFile>, Index, std::uint64_t, double, \
                                    unsigned);
LMM_INSTANTIATE(float)
LMM_INSTANTIATE(double)
#undef LMM_INSTANTIATE

}  // namespace lmm
