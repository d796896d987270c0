#pragma once

#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "taskcodec/layers.hpp"
#include "taskcodec/tensor.hpp"

namespace taskcodec {

// Self-describing parameter container: a small header, a JSON manifest
// naming every tensor (shape, offset, length), then raw float32
// little-endian payloads. Loading a checkpoint and saving it again
// reproduces the file byte for byte.
struct Checkpoint {
  nlohmann::json meta;  // free-form: model kind, quality tag, windows, ...
  std::vector<std::pair<std::string, Tensor>> tensors;

  void add(const std::string& name, const Tensor& t) { tensors.emplace_back(name, t); }

  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

  // Hash of the serialized bytes (manifest + payload).
  uint64_t content_hash() const;

  // Registry helpers: capture copies of all params / write values back.
  static Checkpoint from_params(const std::vector<Param<float>>& ps, nlohmann::json meta);
  void restore_params(std::vector<Param<float>>& ps) const;
};

}  // namespace taskcodec
