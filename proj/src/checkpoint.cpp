#include "lmm/checkpoint.hpp"

#include "json_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

namespace lmm {

using detail::json;

namespace {

constexpr std::array<char, 8> kMagic = {'L', 'M', 'M', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename Scalar>
constexpr const char* dtype_name() {
  return sizeof(Scalar) == 4 ? "f32" : "f64";
}

struct TensorRef {
  std::string name;
  const char* dtype;
  Index rows, cols;
  const void* data;
  std::size_t bytes;
};

template <typename Derived>
TensorRef tensor(std::string name, const Eigen::PlainObjectBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  return {std::move(name), dtype_name<Scalar>(), m.rows(), m.cols(), m.data(),
          static_cast<std::size_t>(m.size()) * sizeof(Scalar)};
}

json hyper_to_json(const HyperParams& hp) {
  return {{"hidden", hp.hidden},   {"latent", hp.latent},   {"frames", hp.frames},
          {"joints", hp.joints},   {"dropout", hp.dropout}, {"prior_variance", hp.prior_variance}};
}

HyperParams hyper_from_json(const json& j) {
  HyperParams hp;
  hp.hidden = j.at("hidden").get<Index>();
  hp.latent = j.at("latent").get<Index>();
  hp.frames = j.at("frames").get<Index>();
  hp.joints = j.at("joints").get<Index>();
  hp.dropout = j.at("dropout").get<double>();
  hp.prior_variance = j.at("prior_variance").get<double>();
  hp.validate();
  return hp;
}

struct RawFile {
  json header;
  std::string data;
};

RawFile read_raw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::array<char, 8> magic{};
  std::uint32_t version = 0;
  std::uint64_t header_len = 0;
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw ParseError(path.string() + ": not a checkpoint file");
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&header_len), sizeof header_len);
  if (!in) throw ParseError(path.string() + ": truncated checkpoint header");
  if (version != kVersion) throw ParseError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw ParseError(path.string() + ": truncated checkpoint header");
  RawFile raw;
  try {
    raw.header = json::parse(header);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": corrupt checkpoint header: " + e.what());
  }
  raw.data.assign(std::istreambuf_iterator<char>(in), {});
  return raw;
}

class TensorReader {
 public:
  TensorReader(const RawFile& raw, std::string source) : raw_(raw), source_(std::move(source)) {
    for (const auto& t : raw.header.at("tensors")) index_.emplace(t.at("name").get<std::string>(), &t);
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  template <typename Scalar>
  void read(const std::string& name, Matrix<Scalar>& out) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ParseError(source_ + ": missing tensor '" + name + "'");
    const json& t = *it->second;
    const auto rows = t.at("rows").get<Index>();
    const auto cols = t.at("cols").get<Index>();
    const auto dtype = t.at("dtype").get<std::string>();
    const auto offset = t.at("offset").get<std::size_t>();
    if (out.size() != 0 && (out.rows() != rows || out.cols() != cols)) {
      throw ParseError(source_ + ": tensor '" + name + "' is " + dims(rows, cols) + ", expected " + dims(out));
    }
    const std::size_t width = dtype == "f32" ? 4 : dtype == "f64" ? 8 : 0;
    if (width == 0) throw ParseError(source_ + ": tensor '" + name + "' has unknown dtype " + dtype);
    const std::size_t bytes = static_cast<std::size_t>(rows * cols) * width;
    if (offset + bytes > raw_.data.size()) throw ParseError(source_ + ": tensor '" + name + "' is truncated");
    const char* src = raw_.data.data() + offset;
    if (width == 4) out = load<float>(src, rows, cols).template cast<Scalar>();
    else out = load<double>(src, rows, cols).template cast<Scalar>();
  }

  template <typename Scalar>
  void read(const std::string& name, Vector<Scalar>& out) const {
    Matrix<Scalar> m(out.size(), out.size() == 0 ? 0 : 1);
    read(name, m);
    if (m.cols() != 1) throw ParseError(source_ + ": tensor '" + name + "' is not a vector");
    out = m.col(0);
  }

 private:
  template <typename T>
  static Matrix<T> load(const char* src, Index rows, Index cols) {
    Matrix<T> m(rows, cols);
    std::memcpy(m.data(), src, static_cast<std::size_t>(m.size()) * sizeof(T));
    return m;
  }

  const RawFile& raw_;
  std::string source_;
  std::map<std::string, const json*> index_;
};

}  // namespace

template <typename Scalar>
Checkpoint<Scalar> make_checkpoint(Model<Scalar> model, Skeleton skeleton, NormStats norm) {
  if (skeleton.n_joint() != model.hp.joints) {
    throw ValidationError("checkpoint: skeleton has " + std::to_string(skeleton.n_joint()) + " joints, model expects " +
                          std::to_string(model.hp.joints));
  }
  Checkpoint<Scalar> c;
  c.generator_opt = AdamState<Scalar>::zeros(model.params);
  c.discriminator_opt = AdamState<Scalar>::zeros(model.params);
  c.model = std::move(model);
  c.skeleton = std::move(skeleton);
  c.norm = std::move(norm);
  return c;
}

template <typename Scalar>
void save_checkpoint(const Checkpoint<Scalar>& ckpt, const std::filesystem::path& path) {
  std::vector<TensorRef> tensors;
  visit_params([&](const ParamInfo& info, const Matrix<Scalar>& p) { tensors.push_back(tensor("param/" + std::string(info.name), p)); },
               ckpt.model.params);
  const auto& r = ckpt.model.running;
  tensors.push_back(tensor("running/mean2", r.mean2));
  tensors.push_back(tensor("running/var2", r.var2));
  tensors.push_back(tensor("running/mean3", r.mean3));
  tensors.push_back(tensor("running/var3", r.var3));
  tensors.push_back(tensor("norm/mean", ckpt.norm.mean));
  tensors.push_back(tensor("norm/std", ckpt.norm.std));
  visit_params(
      [&](const ParamInfo& info, const Matrix<Scalar>& gm, const Matrix<Scalar>& gv, const Matrix<Scalar>& dm,
          const Matrix<Scalar>& dv) {
        const std::string leaf(info.name);
        if (is_generator(info.group)) {
          tensors.push_back(tensor("adam.gen.m/" + leaf, gm));
          tensors.push_back(tensor("adam.gen.v/" + leaf, gv));
        } else {
          tensors.push_back(tensor("adam.disc.m/" + leaf, dm));
          tensors.push_back(tensor("adam.disc.v/" + leaf, dv));
        }
      },
      ckpt.generator_opt.m, ckpt.generator_opt.v, ckpt.discriminator_opt.m, ckpt.discriminator_opt.v);

  json index = json::array();
  std::size_t offset = 0;
  for (const auto& t : tensors) {
    index.push_back({{"name", t.name}, {"dtype", t.dtype}, {"rows", t.rows}, {"cols", t.cols}, {"offset", offset}});
    offset += t.bytes;
  }
  json header{{"hyper", hyper_to_json(ckpt.model.hp)},
              {"variant", to_string(ckpt.model.variant)},
              {"dtype", dtype_name<Scalar>()},
              {"skeleton", detail::skeleton_to_json(ckpt.skeleton)},
              {"epoch", ckpt.epoch},
              {"adam_steps", {{"generator", ckpt.generator_opt.step}, {"discriminator", ckpt.discriminator_opt.step}}},
              {"metadata", ckpt.metadata},
              {"tensors", std::move(index)}};
  const std::string text = header.dump();
  const std::uint64_t header_len = text.size();

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    out.write(kMagic.data(), kMagic.size());
    out.write(reinterpret_cast<const char*>(&kVersion), sizeof kVersion);
    out.write(reinterpret_cast<const char*>(&header_len), sizeof header_len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : tensors) out.write(static_cast<const char*>(t.data), static_cast<std::streamsize>(t.bytes));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

template <typename Scalar>
Checkpoint<Scalar> load_checkpoint(const std::filesystem::path& path) {
  const RawFile raw = read_raw(path);
  const std::string source = path.string();
  try {
    const json& h = raw.header;
    const HyperParams hp = hyper_from_json(h.at("hyper"));
    const Variant variant = parse_variant(h.at("variant").get<std::string>());
    Checkpoint<Scalar> c;
    c.model.hp = hp;
    c.model.variant = variant;
    c.model.params = param_shapes<Scalar>(hp, variant);
    c.skeleton = detail::skeleton_from_json(h.at("skeleton"));
    c.epoch = h.at("epoch").get<Index>();
    c.metadata = h.at("metadata").get<std::map<std::string, std::string>>();
    c.generator_opt = AdamState<Scalar>::zeros(c.model.params);
    c.discriminator_opt = AdamState<Scalar>::zeros(c.model.params);
    c.generator_opt.step = h.at("adam_steps").at("generator").get<std::int64_t>();
    c.discriminator_opt.step = h.at("adam_steps").at("discriminator").get<std::int64_t>();

    const TensorReader reader(raw, source);
    visit_params([&](const ParamInfo& info, Matrix<Scalar>& p) { reader.read("param/" + std::string(info.name), p); },
                 c.model.params);
    auto& r = c.model.running;
    r.mean2.resize(64);
    r.var2.resize(64);
    r.mean3.resize(128);
    r.var3.resize(128);
    reader.read("running/mean2", r.mean2);
    reader.read("running/var2", r.var2);
    reader.read("running/mean3", r.mean3);
    reader.read("running/var3", r.var3);
    reader.read("norm/mean", c.norm.mean);
    reader.read("norm/std", c.norm.std);
    visit_params(
        [&](const ParamInfo& info, Matrix<Scalar>& gm, Matrix<Scalar>& gv, Matrix<Scalar>& dm, Matrix<Scalar>& dv) {
          const std::string leaf(info.name);
          if (is_generator(info.group)) {
            reader.read("adam.gen.m/" + leaf, gm);
            reader.read("adam.gen.v/" + leaf, gv);
          } else {
            reader.read("adam.disc.m/" + leaf, dm);
            reader.read("adam.disc.v/" + leaf, dv);
          }
        },
        c.generator_opt.m, c.generator_opt.v, c.discriminator_opt.m, c.discriminator_opt.v);
    if (c.skeleton.n_joint() != hp.joints) throw ParseError("skeleton joint count does not match hyperparameters");
    if (c.norm.mean.size() != hp.pose_dim()) throw ParseError("normalization statistics do not match pose dimension");
    return c;
  } catch (const json::exception& e) {
    throw ParseError(source + ": malformed checkpoint header: " + e.what());
  } catch (const ParseError& e) {
    throw ParseError(std::string(e.what()).starts_with(source) ? e.what() : source + ": " + e.what());
  }
}

std::string checkpoint_dtype(const std::filesystem::path& path) {
  const RawFile raw = read_raw(path);
  try {
    return raw.header.at("dtype").get<std::string>();
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": malformed checkpoint header: " + e.what());
  }
}

#define LMM_INSTANTIATE(S)                                                                  \
  template Checkpoint<S> make_checkpoint<S>(Model<S>, Skeleton, NormStats);                 \
  template void save_checkpoint<S>(const Checkpoint<S>&, const std::filesystem::path&);     \
  template Checkpoint<S> load_checkpoint<S>(const std::filesystem::path&);
LMM_INSTANTIATE(float)
LMM_INSTANTIATE(double)
#undef LMM_INSTANTIATE

}  // namespace lmm
