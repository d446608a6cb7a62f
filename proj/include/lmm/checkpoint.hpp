#pragma once

#include "lmm/data.hpp"
#include "lmm/kinematics.hpp"
#include "lmm/model.hpp"
#include "lmm/optim.hpp"

#include <filesystem>
#include <map>
#include <string>

namespace lmm {

// File layout (little endian):
//   8 bytes  magic "LMMCKPT\0"
//   u32      format version (1)
//   u64      header length N
//   N bytes  JSON header: hyper, variant, dtype ("f32" | "f64"), skeleton,
//            epoch, adam step counters, metadata and a tensor index of
//            {name, rows, cols, dtype, offset} relative to the data section
//   ...      raw column-major tensor data
//
// Tensor names: "param/<leaf>", "running/{mean2,var2,mean3,var3}",
// "norm/{mean,std}" (always f64), "adam.gen.{m,v}/<leaf>" for generator
// leaves and "adam.disc.{m,v}/<leaf>" for discriminator leaves.
template <typename Scalar>
struct Checkpoint {
  Model<Scalar> model;
  Skeleton skeleton;
  NormStats norm;
  AdamState<Scalar> generator_opt;
  AdamState<Scalar> discriminator_opt;
  Index epoch = 0;
  std::map<std::string, std::string> metadata;
};

/// Fresh state around an initialized model: zero Adam moments, epoch 0.
template <typename Scalar>
Checkpoint<Scalar> make_checkpoint(Model<Scalar> model, Skeleton skeleton, NormStats norm);

template <typename Scalar>
void save_checkpoint(const Checkpoint<Scalar>& ckpt, const std::filesystem::path& path);

/// Loads and, if the stored dtype differs, converts. Throws ParseError on a
/// malformed file and IoError when it cannot be read.
template <typename Scalar>
Checkpoint<Scalar> load_checkpoint(const std::filesystem::path& path);

/// "f32" or "f64".
std::string checkpoint_dtype(const std::filesystem::path& path);

}  // namespace lmm
