#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "fmq/dense.hpp"

namespace fmq {

// Binary tensor container: 8-byte magic, u64-LE header length, UTF-8 JSON
// header (tensor names/shapes/offsets plus free-form meta), then contiguous
// little-endian float32 payload. Round trips are bit-exact.
inline constexpr char kCheckpointMagic[9] = "FMQCKPT1";
inline constexpr char kDatasetMagic[9] = "FMQDATA1";

struct NamedTensor {
  std::string name;
  const DenseArray* array = nullptr;
};

void save_container(const std::string& path, const char magic[9],
                    const std::vector<NamedTensor>& tensors, const nlohmann::json& meta);

struct Container {
  std::map<std::string, DenseArray> tensors;
  nlohmann::json meta;

  const DenseArray& get(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw IoError("missing tensor: " + name);
    return it->second;
  }
};

Container load_container(const std::string& path, const char magic[9]);

}  // namespace fmq
