#pragma once

#include <future>

namespace lmm {

namespace detail {

struct MotionMetrics {
  // [decoder][interval]
  std::vector<std::vector<double>> e_r, e_p;
  std::vector<double> e_z;
};

template <Codec C>
MotionMetrics motion_metrics(const C& codec, const Eigen::MatrixXd& clip, const Skeleton& skel,
                             const std::vector<std::pair<Index, Index>>& bounds,
                             const std::vector<DecoderKind>& kinds) {
  MotionMetrics out;
  const Eigen::VectorXd z = codec.encode(clip);
  for (DecoderKind kind : kinds) {
    const Eigen::MatrixXd rec = codec.decode(z, kind);
    const Eigen::VectorXd angle = frame_angle_errors<double>(clip, rec);
    const Eigen::VectorXd pos = frame_position_errors<double>(clip, rec, skel);
    std::vector<double> r, p;
    for (auto [b, e] : bounds) {
      r.push_back(angle.segment(b, e - b).mean());
      p.push_back(pos.segment(b, e - b).mean());
    }
    out.e_r.push_back(std::move(r));
    out.e_p.push_back(std::move(p));
    const Eigen::VectorXd z_hat = codec.encode(rec);
    out.e_z.push_back((z_hat - z).cwiseAbs().sum());
  }
  return out;
}

}  // namespace detail

template <Codec C>
MetricReport evaluate_codec(const C& codec, std::span<const Eigen::MatrixXd> clips, const Skeleton& skel,
                            double fps, unsigned threads) {
  if (clips.empty()) throw ValidationError("evaluate: empty test set");
  if (!(fps > 0)) throw ValidationError("evaluate: fps must be positive");
  const Index frames = clips.front().cols();
  for (const auto& c : clips) {
    if (c.cols() != frames || c.rows() != skel.pose_dim()) {
      throw ShapeError("evaluate: clip " + dims(c) + ", expected " + dims(skel.pose_dim(), frames));
    }
  }
  const auto bounds = interval_bounds(frames);
  std::vector<DecoderKind> kinds{DecoderKind::rotation};
  if (codec.has_velocity_decoder()) kinds.push_back(DecoderKind::velocity);

  std::vector<detail::MotionMetrics> per_motion(clips.size());
  threads = std::max(1u, threads);
  if (threads == 1) {
    for (std::size_t i = 0; i < clips.size(); ++i) per_motion[i] = detail::motion_metrics(codec, clips[i], skel, bounds, kinds);
  } else {
    std::vector<std::future<void>> workers;
    for (unsigned w = 0; w < threads; ++w) {
      workers.push_back(std::async(std::launch::async, [&, w] {
        for (std::size_t i = w; i < clips.size(); i += threads) {
          per_motion[i] = detail::motion_metrics(codec, clips[i], skel, bounds, kinds);
        }
      }));
    }
    for (auto& f : workers) f.get();
  }

  MetricReport report;
  report.n_motions = static_cast<Index>(clips.size());
  const double n = static_cast<double>(clips.size());
  for (std::size_t k = 0; k < kinds.size(); ++k) {
    DecoderMetrics dm;
    dm.decoder = kinds[k] == DecoderKind::rotation ? "rot" : "vel";
    for (std::size_t i = 0; i < bounds.size(); ++i) {
      IntervalError ie;
      ie.interval_end_s = static_cast<double>(bounds[i].second) / fps;
      for (const auto& m : per_motion) {
        ie.E_r += m.e_r[k][i];
        ie.E_p += m.e_p[k][i];
      }
      ie.E_r /= n;
      ie.E_p /= n;
      dm.intervals.push_back(ie);
    }
    for (const auto& m : per_motion) dm.E_z += m.e_z[k];
    dm.E_z /= n;
    report.decoders.push_back(std::move(dm));
  }
  return report;
}

}  // namespace lmm
