#include "taskcodec/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace taskcodec {

namespace {

constexpr char kMagic[4] = {'T', 'C', 'K', 'P'};
constexpr uint8_t kVersion = 1;

std::vector<uint8_t> serialize(const Checkpoint& c) {
  nlohmann::json manifest;
  manifest["meta"] = c.meta;
  nlohmann::json items = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& [name, t] : c.tensors) {
    const uint64_t bytes = t.vals().size() * sizeof(float);
    items.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"bytes", bytes}});
    offset += bytes;
  }
  manifest["tensors"] = std::move(items);
  const std::string mstr = manifest.dump();

  std::vector<uint8_t> out;
  out.reserve(9 + mstr.size() + offset);
  out.insert(out.end(), kMagic, kMagic + 4);
  out.push_back(kVersion);
  const uint32_t mlen = static_cast<uint32_t>(mstr.size());
  out.insert(out.end(), reinterpret_cast<const uint8_t*>(&mlen),
             reinterpret_cast<const uint8_t*>(&mlen) + 4);
  out.insert(out.end(), mstr.begin(), mstr.end());
  for (const auto& [name, t] : c.tensors) {
    const auto* p = reinterpret_cast<const uint8_t*>(t.vals().data());
    out.insert(out.end(), p, p + t.vals().size() * sizeof(float));
  }
  return out;
}

}  // namespace

const Tensor& Checkpoint::get(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  fail("io: checkpoint has no tensor named '" + name + "'");
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return true;
  return false;
}

void Checkpoint::save(const std::string& path) const {
  const auto bytes = serialize(*this);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("io: cannot write checkpoint '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail("io: short write to checkpoint '" + path + "'");
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("io: cannot open checkpoint '" + path + "'");
  std::vector<uint8_t> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  check(data.size() >= 9 && std::memcmp(data.data(), kMagic, 4) == 0,
        "io: '" + path + "' is not a checkpoint file");
  check(data[4] == kVersion, "io: checkpoint version " + std::to_string(data[4]) + " unsupported");
  uint32_t mlen;
  std::memcpy(&mlen, data.data() + 5, 4);
  check(9 + static_cast<size_t>(mlen) <= data.size(), "io: checkpoint manifest truncated");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(data.begin() + 9, data.begin() + 9 + mlen);
  } catch (const nlohmann::json::exception& e) {
    fail("io: checkpoint manifest is not valid JSON: " + std::string(e.what()));
  }
  const size_t payload_base = 9 + mlen;

  Checkpoint c;
  c.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& item : manifest.at("tensors")) {
    const std::string name = item.at("name");
    const Shape shape = item.at("shape").get<Shape>();
    const uint64_t offset = item.at("offset");
    const uint64_t bytes = item.at("bytes");
    check(bytes == numel(shape) * sizeof(float), "io: checkpoint tensor '" + name + "' size mismatch");
    check(payload_base + offset + bytes <= data.size(),
          "io: checkpoint payload truncated at tensor '" + name + "'");
    std::vector<float> vals(static_cast<size_t>(numel(shape)));
    std::memcpy(vals.data(), data.data() + payload_base + offset, bytes);
    c.tensors.emplace_back(name, Tensor::from(shape, std::move(vals)));
  }
  return c;
}

uint64_t Checkpoint::content_hash() const {
  const auto bytes = serialize(*this);
  return fnv1a(bytes.data(), bytes.size());
}

Checkpoint Checkpoint::from_params(const std::vector<Param<float>>& ps, nlohmann::json meta) {
  Checkpoint c;
  c.meta = std::move(meta);
  for (const auto& p : ps) c.add(p.name, p.t);
  return c;
}

void Checkpoint::restore_params(std::vector<Param<float>>& ps) const {
  for (auto& p : ps) {
    const Tensor& src = get(p.name);
    check(src.shape() == p.t.shape(), "io: checkpoint tensor '" + p.name + "' has shape " +
                                          shape_str(src.shape()) + ", model expects " +
                                          shape_str(p.t.shape()));
    p.t.vals() = src.vals();
  }
}

}  // namespace taskcodec
