#pragma once

// Named-tensor checkpoint container.
//
// Layout:
//   line 1: "CEMRRL-CHECKPOINT 1"
//   line 2: JSON manifest {"tensors":[{"name","shape","offset","count"}...],
//           "meta":{...}}; offsets are in doubles from the start of the
//           data section
//   rest:   little-endian IEEE-754 float64 values, row-major per tensor

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace cemrrl {

struct NamedTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> data;  // row-major
};

struct Checkpoint {
  std::vector<NamedTensor> tensors;
  nlohmann::json meta = nlohmann::json::object();

  const NamedTensor& get(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw std::runtime_error("checkpoint has no tensor named '" + name + "'");
  }
};

inline constexpr const char* kCheckpointMagic = "CEMRRL-CHECKPOINT 1";

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");
  nlohmann::json manifest;
  manifest["tensors"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    std::size_t count = 1;
    for (auto d : t.shape) count *= d;
    if (count != t.data.size()) throw CheckpointError("tensor '" + t.name + "' shape does not match data");
    manifest["tensors"].push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}, {"count", count}});
    offset += count;
  }
  manifest["meta"] = ckpt.meta;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open checkpoint for writing: " + path);
  out << kCheckpointMagic << '\n' << manifest.dump() << '\n';
  for (const auto& t : ckpt.tensors)
    out.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * 8));
  if (!out) throw CheckpointError("failed writing checkpoint: " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path);
  std::string magic, manifest_line;
  std::getline(in, magic);
  if (magic != kCheckpointMagic) throw CheckpointError("not a checkpoint file: " + path);
  std::getline(in, manifest_line);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(manifest_line);
  } catch (const nlohmann::json::exception&) {
    throw CheckpointError("corrupt checkpoint manifest: " + path);
  }

  Checkpoint ckpt;
  ckpt.meta = manifest.value("meta", nlohmann::json::object());
  const std::streampos data_start = in.tellg();
  for (const auto& entry : manifest.at("tensors")) {
    NamedTensor t;
    t.name = entry.at("name").get<std::string>();
    t.shape = entry.at("shape").get<std::vector<std::size_t>>();
    const auto count = entry.at("count").get<std::size_t>();
    const auto offset = entry.at("offset").get<std::size_t>();
    t.data.resize(count);
    in.seekg(data_start + static_cast<std::streamoff>(offset * 8));
    in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(count * 8));
    if (!in) throw CheckpointError("truncated checkpoint: " + path);
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

}  // namespace cemrrl
