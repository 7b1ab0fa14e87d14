#pragma once
// Checkpoint file: one file holding a JSON manifest and a flat array blob.
//
//   bytes 0..7    "MSUFCKPT"
//   bytes 8..11   format version, uint32 little-endian
//   bytes 12..19  manifest length N, uint64 little-endian
//   next N bytes  manifest JSON (names, shapes, offsets, dtype, flags, meta)
//   remainder     float64 little-endian values, arrays in manifest order

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msuf/core/errors.hpp"
#include "msuf/core/hash.hpp"
#include "msuf/core/matrix.hpp"

namespace msuf::tensor {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'M', 'S', 'U', 'F', 'C', 'K', 'P', 'T'};

struct NamedArray {
  std::string name;
  Matrix value;
  bool frozen = false;
};

struct Checkpoint {
  bool frozen = false;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return &a;
    return nullptr;
  }
  const Matrix& at(const std::string& name) const {
    if (const auto* a = find(name)) return a->value;
    throw DataError("checkpoint: no array named '" + name + "'");
  }
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw DataError("checkpoint: truncated file");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json manifest;
  manifest["format"] = "msuf-checkpoint";
  manifest["version"] = kCheckpointVersion;
  manifest["dtype"] = "float64";
  manifest["frozen"] = ckpt.frozen;
  manifest["meta"] = ckpt.meta;
  manifest["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& a : ckpt.arrays) {
    manifest["tensors"].push_back({{"name", a.name},
                                   {"shape", {a.value.rows, a.value.cols}},
                                   {"offset", offset},
                                   {"count", a.value.data.size()},
                                   {"frozen", a.frozen}});
    offset += a.value.data.size();
  }
  const std::string text = manifest.dump();
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint64_t>(out, text.size());
  out += text;
  for (const auto& a : ckpt.arrays)
    for (double v : a.value.data) detail::put<double>(out, v);
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw DataError("checkpoint: bad magic");
  std::size_t pos = 8;
  const auto version = detail::get<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
  const auto len = detail::get<std::uint64_t>(bytes, pos);
  if (pos + len > bytes.size()) throw DataError("checkpoint: truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(pos, len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: bad manifest: ") + e.what());
  }
  pos += len;
  if (manifest.value("dtype", "") != "float64") throw DataError("checkpoint: unsupported dtype");
  Checkpoint ckpt;
  ckpt.frozen = manifest.value("frozen", false);
  ckpt.meta = manifest.value("meta", nlohmann::json::object());
  const std::size_t base = pos;
  for (const auto& t : manifest.at("tensors")) {
    NamedArray a;
    a.name = t.at("name").get<std::string>();
    a.frozen = t.value("frozen", false);
    const auto rows = t.at("shape").at(0).get<std::size_t>();
    const auto cols = t.at("shape").at(1).get<std::size_t>();
    std::size_t at = base + t.at("offset").get<std::size_t>() * sizeof(double);
    std::vector<double> values(rows * cols);
    for (double& v : values) v = detail::get<double>(bytes, at);
    a.value = Matrix(rows, cols, std::move(values));
    ckpt.arrays.push_back(std::move(a));
  }
  return ckpt;
}

// Writes to a sibling temp file and renames, so readers never see a partial file.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("checkpoint: cannot write " + tmp);
    const auto bytes = serialize_checkpoint(ckpt);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file_bytes(path)); }

inline std::string checkpoint_hash(const Checkpoint& ckpt) { return sha256_hex(serialize_checkpoint(ckpt)); }

}  // namespace msuf::tensor
