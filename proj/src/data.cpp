#include "lmm/data.hpp"

#include "json_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <numbers>
#include <sstream>

namespace lmm {

using detail::json;

void MotionFile::validate() const {
  if (!(fps > 0) || !std::isfinite(fps)) throw ValidationError("motion: fps must be positive");
  if (frames.rows() != skeleton.pose_dim()) {
    throw ValidationError("motion: frames have " + std::to_string(frames.rows() / 3) + " joints, skeleton has " +
                          std::to_string(skeleton.n_joint()));
  }
  if (!frames.allFinite()) throw ValidationError("motion: non-finite joint rotation");
  if (root_translation && root_translation->cols() != frames.cols()) {
    throw ValidationError("motion: root_translation length " + std::to_string(root_translation->cols()) +
                          " does not match " + std::to_string(frames.cols()) + " frames");
  }
}

namespace {

json triples(const Eigen::Ref<const Eigen::MatrixXd>& m) {
  json out = json::array();
  for (Index c = 0; c < m.cols(); ++c) out.push_back({m(0, c), m(1, c), m(2, c)});
  return out;
}

Eigen::Vector3d read_triple(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 3) throw ParseError(where + ": expected [x, y, z]");
  Eigen::Vector3d v;
  for (int k = 0; k < 3; ++k) {
    if (!j[k].is_number()) throw ParseError(where + ": expected a number");
    v[k] = j[k].get<double>();
  }
  return v;
}

const json& field(const json& obj, const char* name) {
  auto it = obj.find(name);
  if (it == obj.end()) throw ParseError(std::string("missing field '") + name + "'");
  return *it;
}

json parse_json(const std::string& text, const std::string& source) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(source + ": line " + std::to_string(detail::line_of(text, e.byte)) + ": " + e.what());
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

MotionFile parse_motion(const std::string& json_text, const std::string& source) {
  const json doc = parse_json(json_text, source);
  try {
    if (!doc.is_object()) throw ParseError("top level must be an object");
    MotionFile out{.skeleton = [&] {
      try {
        return detail::skeleton_from_json(field(doc, "skeleton"));
      } catch (const json::exception& e) {
        throw ParseError(std::string("field 'skeleton': ") + e.what());
      }
    }()};
    const json& fps = field(doc, "fps");
    if (!fps.is_number()) throw ParseError("field 'fps': expected a number");
    out.fps = fps.get<double>();

    const json& frames = field(doc, "frames");
    if (!frames.is_array()) throw ParseError("field 'frames': expected an array");
    const Index J = out.skeleton.n_joint();
    out.frames.resize(3 * J, static_cast<Index>(frames.size()));
    for (std::size_t t = 0; t < frames.size(); ++t) {
      const json& pose = frames[t];
      const std::string where = "frames[" + std::to_string(t) + "]";
      if (!pose.is_array()) throw ParseError(where + ": expected an array of joints");
      if (static_cast<Index>(pose.size()) != J) {
        throw ValidationError(where + ": " + std::to_string(pose.size()) + " joints, skeleton has " +
                              std::to_string(J));
      }
      for (Index j = 0; j < J; ++j) {
        out.frames.block<3, 1>(3 * j, static_cast<Index>(t)) =
            read_triple(pose[static_cast<std::size_t>(j)], where + "[" + std::to_string(j) + "]");
      }
    }
    if (auto it = doc.find("root_translation"); it != doc.end() && !it->is_null()) {
      if (!it->is_array()) throw ParseError("field 'root_translation': expected an array");
      Eigen::Matrix3Xd root(3, static_cast<Index>(it->size()));
      for (std::size_t t = 0; t < it->size(); ++t) {
        root.col(static_cast<Index>(t)) = read_triple((*it)[t], "root_translation[" + std::to_string(t) + "]");
      }
      out.root_translation = std::move(root);
    }
    if (auto it = doc.find("label"); it != doc.end()) {
      if (!it->is_string()) throw ParseError("field 'label': expected a string");
      out.label = it->get<std::string>();
    }
    out.validate();
    return out;
  } catch (const ParseError& e) {
    throw ParseError(source + ": " + e.what());
  } catch (const ValidationError& e) {
    throw ValidationError(source + ": " + e.what());
  }
}

std::string serialize_motion(const MotionFile& file) {
  file.validate();
  json doc;
  doc["skeleton"] = detail::skeleton_to_json(file.skeleton);
  doc["fps"] = file.fps;
  json frames = json::array();
  for (Index t = 0; t < file.n_frames(); ++t) {
    frames.push_back(triples(file.frames.col(t).reshaped(3, file.skeleton.n_joint())));
  }
  doc["frames"] = std::move(frames);
  if (file.root_translation) doc["root_translation"] = triples(*file.root_translation);
  if (!file.label.empty()) doc["label"] = file.label;
  return doc.dump() + "\n";
}

MotionFile load_motion(const std::filesystem::path& path) { return parse_motion(read_file(path), path.string()); }

void save_motion(const MotionFile& file, const std::filesystem::path& path) {
  const std::string text = serialize_motion(file);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<MotionFile> load_motions(std::span<const std::filesystem::path> paths, unsigned threads) {
  std::vector<MotionFile> out(paths.size());
  threads = std::max(1u, threads);
  if (threads == 1 || paths.size() < 2) {
    for (std::size_t i = 0; i < paths.size(); ++i) out[i] = load_motion(paths[i]);
    return out;
  }
  std::vector<std::future<void>> workers;
  for (unsigned w = 0; w < threads; ++w) {
    workers.push_back(std::async(std::launch::async, [&, w] {
      for (std::size_t i = w; i < paths.size(); i += threads) out[i] = load_motion(paths[i]);
    }));
  }
  for (auto& f : workers) f.get();
  return out;
}

Skeleton parse_skeleton(const std::string& json_text) {
  const json doc = parse_json(json_text, "skeleton");
  try {
    return detail::skeleton_from_json(doc);
  } catch (const json::exception& e) {
    throw ParseError(std::string("skeleton: ") + e.what());
  }
}

std::string serialize_skeleton(const Skeleton& skel) { return detail::skeleton_to_json(skel).dump(); }

MotionFile preprocess(const MotionFile& file, double target_fps, const Skeleton* expected) {
  file.validate();
  if (!(target_fps > 0)) throw ValidationError("preprocess: target fps must be positive");
  if (expected && !(*expected == file.skeleton)) {
    throw ValidationError("preprocess: skeleton does not match the configured skeleton");
  }
  const double ratio = file.fps / target_fps;
  const double step = std::round(ratio);
  if (file.fps < target_fps || std::abs(ratio - step) > 1e-9 * ratio) {
    throw UnsupportedRateError("preprocess: cannot decimate " + std::to_string(file.fps) + " Hz to " +
                               std::to_string(target_fps) + " Hz by an integer ratio");
  }
  const auto k = static_cast<Index>(step);
  MotionFile out{.skeleton = file.skeleton, .fps = target_fps};
  out.label = file.label;
  const Index n = (file.n_frames() + k - 1) / k;
  out.frames.resize(file.frames.rows(), n);
  for (Index t = 0; t < n; ++t) out.frames.col(t) = file.frames.col(t * k);
  return out;
}

NormStats fit_normalization(std::span<const MotionFile> train) {
  if (train.empty()) throw ValidationError("fit_normalization: empty training set");
  const Index D = train.front().frames.rows();
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(D);
  Index count = 0;
  for (const auto& f : train) {
    if (f.frames.rows() != D) throw ShapeError("fit_normalization: inconsistent pose dimension");
    sum += f.frames.rowwise().sum();
    count += f.n_frames();
  }
  if (count == 0) throw ValidationError("fit_normalization: training set has no frames");
  NormStats s;
  s.mean = sum / static_cast<double>(count);
  Eigen::VectorXd sq = Eigen::VectorXd::Zero(D);
  for (const auto& f : train) sq += (f.frames.colwise() - s.mean).array().square().rowwise().sum().matrix();
  s.std = (sq / static_cast<double>(count)).cwiseSqrt().cwiseMax(NormStats::std_floor);
  return s;
}

template <typename Scalar>
Motion<Scalar> apply_normalization(const Motion<Scalar>& motion, const NormStats& stats) {
  if (motion.rows() != stats.mean.size()) throw ShapeError("apply_normalization: dimension mismatch");
  const Vector<Scalar> mean = stats.mean.cast<Scalar>();
  const Vector<Scalar> inv = stats.std.cwiseInverse().cast<Scalar>();
  return ((motion.colwise() - mean).array().colwise() * inv.array()).matrix();
}

template <typename Scalar>
Motion<Scalar> invert_normalization(const Motion<Scalar>& motion, const NormStats& stats) {
  if (motion.rows() != stats.mean.size()) throw ShapeError("invert_normalization: dimension mismatch");
  const Vector<Scalar> mean = stats.mean.cast<Scalar>();
  const Vector<Scalar> sd = stats.std.cast<Scalar>();
  return ((motion.array().colwise() * sd.array()).matrix().colwise() + mean);
}

template <typename Scalar>
std::optional<Motion<Scalar>> sample_clip(const MotionFile& file, Index frames, std::mt19937_64& rng) {
  if (frames <= 0) throw ValidationError("sample_clip: clip length must be positive");
  if (file.n_frames() < frames) return std::nullopt;
  std::uniform_int_distribution<Index> start(0, file.n_frames() - frames);
  return file.frames.middleCols(start(rng), frames).template cast<Scalar>();
}

template <typename Scalar>
Motion<Scalar> corrupt_zero_joints(const Motion<Scalar>& motion, double p, std::mt19937_64& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("corrupt_zero_joints: p must lie in [0, 1]");
  if (motion.rows() % 3 != 0) throw ShapeError("corrupt_zero_joints: rows must be 3 * n_joint");
  Motion<Scalar> out = motion;
  std::bernoulli_distribution zero(p);
  for (Index t = 0; t < out.cols(); ++t) {
    for (Index j = 0; j < out.rows() / 3; ++j) {
      if (zero(rng)) out.template block<3, 1>(3 * j, t).setZero();
    }
  }
  return out;
}

namespace {
constexpr SyntheticClass kClasses[] = {{"sway", 0.75}, {"swing", 1.5}, {"twist", 2.5}};
}

std::span<const SyntheticClass> synthetic_classes() { return kClasses; }

std::vector<MotionFile> generate_synthetic(const Skeleton& skel, Index n_clips, Index frames, std::uint64_t seed,
                                           double fps) {
  if (n_clips < 1) throw ValidationError("generate_synthetic: n_clips must be at least 1");
  if (frames < 1) throw ValidationError("generate_synthetic: frames must be at least 1");
  if (!(fps > 0)) throw ValidationError("generate_synthetic: fps must be positive");
  constexpr double two_pi = 2.0 * std::numbers::pi;
  std::vector<MotionFile> clips;
  clips.reserve(static_cast<std::size_t>(n_clips));
  for (Index c = 0; c < n_clips; ++c) {
    std::seed_seq seq{seed, static_cast<std::uint64_t>(c)};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    auto random_axis = [&] {
      Eigen::Vector3d a;
      do a = Eigen::Vector3d(gauss(rng), gauss(rng), gauss(rng));
      while (a.norm() < 1e-3);
      return Eigen::Vector3d(a.normalized());
    };

    const SyntheticClass& cls = kClasses[c % 3];
    const double freq = cls.frequency_hz * (0.9 + 0.2 * unit(rng));
    const double w = two_pi * freq / fps;
    MotionFile clip{.skeleton = skel, .fps = fps};
    clip.label = cls.label;
    clip.frames.resize(skel.pose_dim(), frames);
    for (Index j = 0; j < skel.n_joint(); ++j) {
      const Eigen::Vector3d a1 = random_axis();
      const Eigen::Vector3d a2 = random_axis();
      const double A = 0.4 + 0.5 * unit(rng);
      const double B = 0.25 * A * unit(rng);
      const double phi = two_pi * unit(rng);
      const double psi = two_pi * unit(rng);
      for (Index t = 0; t < frames; ++t) {
        const double s = static_cast<double>(t);
        clip.frames.block<3, 1>(3 * j, t) = A * std::sin(w * s + phi) * a1 + B * std::sin(2.0 * w * s + psi) * a2;
      }
    }
    Eigen::Matrix3Xd root(3, frames);
    const double drift = 0.01 * (unit(rng) - 0.5);
    for (Index t = 0; t < frames; ++t) {
      const double s = static_cast<double>(t);
      root.col(t) << 0.2 * std::sin(w * s) + drift * s, 0.9 + 0.02 * std::sin(2.0 * w * s), 0.2 * std::cos(w * s);
    }
    clip.root_translation = std::move(root);
    clips.push_back(std::move(clip));
  }
  return clips;
}

DatasetSplit read_manifest(const std::filesystem::path& manifest) {
  std::istringstream in(read_file(manifest));
  const auto base = manifest.parent_path();
  DatasetSplit split;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream fields(line);
    std::string path, tag, extra;
    if (!(fields >> path)) continue;
    if (!(fields >> tag) || (fields >> extra)) {
      throw ParseError(manifest.string() + ": line " + std::to_string(lineno) + ": expected '<path> <train|test>'");
    }
    std::filesystem::path p(path);
    if (p.is_relative()) p = base / p;
    if (tag == "train") split.train.push_back(p);
    else if (tag == "test") split.test.push_back(p);
    else throw ParseError(manifest.string() + ": line " + std::to_string(lineno) + ": unknown split '" + tag + "'");
  }
  for (const auto& t : split.train) {
    if (std::find(split.test.begin(), split.test.end(), t) != split.test.end()) {
      throw ValidationError(manifest.string() + ": " + t.string() + " is in both splits");
    }
  }
  return split;
}

void write_manifest(const DatasetSplit& split, const std::filesystem::path& manifest) {
  std::ofstream out(manifest, std::ios::trunc);
  if (!out) throw IoError("cannot write " + manifest.string());
  const auto base = manifest.parent_path();
  auto rel = [&](const std::filesystem::path& p) {
    return base.empty() ? p.generic_string() : p.lexically_relative(base).generic_string();
  };
  for (const auto& p : split.train) out << rel(p) << " train\n";
  for (const auto& p : split.test) out << rel(p) << " test\n";
  if (!out) throw IoError("write failed: " + manifest.string());
}

DatasetSplit resolve_dataset(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  if (fs::is_regular_file(path)) return read_manifest(path);
  if (!fs::is_directory(path)) throw IoError("no such dataset: " + path.string());
  if (fs::is_regular_file(path / "manifest.txt")) return read_manifest(path / "manifest.txt");
  DatasetSplit split;
  for (const auto& entry : fs::directory_iterator(path)) {
    if (entry.is_regular_file() && entry.path().extension() == ".json") split.train.push_back(entry.path());
  }
  std::sort(split.train.begin(), split.train.end());
  if (split.train.empty()) throw ValidationError("dataset " + path.string() + " holds no motion files");
  return split;
}

#define LMM_INSTANTIATE(S)                                                                                  \
  template Motion<S> apply_normalization<S>(const Motion<S>&, const NormStats&);                            \
  template Motion<S> invert_normalization<S>(const Motion<S>&, const NormStats&);                           \
  template std::optional<Motion<S>> sample_clip<S>(const MotionFile&, Index, std::mt19937_64&);             \
  template Motion<S> corrupt_zero_joints<S>(const Motion<S>&, double, std::mt19937_64&);
LMM_INSTANTIATE(float)
LMM_INSTANTIATE(double)
#undef LMM_INSTANTIATE

}  // namespace lmm
