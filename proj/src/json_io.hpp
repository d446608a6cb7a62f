#pragma once

#include "lmm/kinematics.hpp"

#include <json.hpp>

namespace lmm::detail {

using nlohmann::json;

inline json skeleton_to_json(const Skeleton& skel) {
  json offsets = json::array();
  for (Index j = 0; j < skel.n_joint(); ++j) {
    offsets.push_back({skel.offsets()(0, j), skel.offsets()(1, j), skel.offsets()(2, j)});
  }
  return json{{"names", skel.names()}, {"parents", skel.parents()}, {"offsets", offsets}};
}

inline Skeleton skeleton_from_json(const json& j) {
  auto names = j.at("names").get<std::vector<std::string>>();
  auto parents = j.at("parents").get<std::vector<int>>();
  const auto& offsets = j.at("offsets");
  Eigen::Matrix3Xd off(3, static_cast<Index>(offsets.size()));
  for (std::size_t i = 0; i < offsets.size(); ++i) {
    const auto v = offsets[i].get<std::vector<double>>();
    if (v.size() != 3) throw ValidationError("skeleton: offsets[" + std::to_string(i) + "] is not a 3-vector");
    off.col(static_cast<Index>(i)) << v[0], v[1], v[2];
  }
  return Skeleton(std::move(names), std::move(parents), std::move(off));
}

/// 1-based line of a byte offset in `text`.
inline std::size_t line_of(const std::string& text, std::size_t byte) {
  std::size_t line = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) line += text[i] == '\n';
  return line;
}

}  // namespace lmm::detail
