#pragma once

// Checkpoint file layout (all integers and floats little-endian):
//
//   magic        8 bytes  "RSEPCKPT"
//   version      u32      kCheckpointVersion
//   block_count  u32
//   block_count times:
//     name_len   u32, then name_len bytes of ASCII name
//     ndim       u32, then ndim x u64 dims
//     data       prod(dims) x f64, row-major
//
// Blocks "meta.config" (8 values: max_intruders, enc_width, heads, head_dim,
// trunk_width, leaky_slope, rel_gain_x, rel_gain_y), "meta.norm_offset" and
// "meta.norm_scale" (6 values each) come first, followed by one block per
// network tensor in layout order ("own.w0", ..., "v.b1").

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "rsep/diffnet.hpp"

namespace rsep {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'R', 'S', 'E', 'P', 'C', 'K', 'P', 'T'};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

struct Tensor {
  std::vector<std::uint64_t> dims;
  std::vector<double> data;  // row-major
};

namespace detail {

template <class T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
}

template <class T>
void put(std::ostream& os, T v) {
  v = to_little(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw CheckpointError("checkpoint truncated");
  return to_little(v);
}

}  // namespace detail

inline void write_tensors(std::ostream& os, const std::vector<std::pair<std::string, Tensor>>& blocks) {
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(blocks.size()));
  for (const auto& [name, t] : blocks) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) detail::put<std::uint64_t>(os, d);
    for (double v : t.data) detail::put<double>(os, v);
  }
  if (!os) throw CheckpointError("checkpoint write failed");
}

inline std::map<std::string, Tensor> read_tensors(std::istream& is) {
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) throw CheckpointError("not a checkpoint file");
  const auto version = detail::get<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw CheckpointVersionError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                                 std::to_string(kCheckpointVersion) + ")");
  const auto count = detail::get<std::uint32_t>(is);
  std::map<std::string, Tensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = detail::get<std::uint32_t>(is);
    if (len > 4096) throw CheckpointError("checkpoint block name too long");
    std::string name(len, '\0');
    is.read(name.data(), len);
    Tensor t;
    const auto ndim = detail::get<std::uint32_t>(is);
    if (ndim > 8) throw CheckpointError("checkpoint block rank too large");
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      t.dims.push_back(detail::get<std::uint64_t>(is));
      n *= t.dims.back();
    }
    if (n > (1ULL << 28)) throw CheckpointError("checkpoint block too large");
    t.data.resize(n);
    for (auto& v : t.data) v = detail::get<double>(is);
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

inline std::vector<std::pair<std::string, Tensor>> to_tensors(const PolicyNet& net) {
  const NetConfig& c = net.params.config();
  std::vector<std::pair<std::string, Tensor>> blocks;
  blocks.push_back({"meta.config",
                    {{8},
                     {double(c.max_intruders), double(c.enc_width), double(c.heads), double(c.head_dim),
                      double(c.trunk_width), c.leaky_slope, c.rel_gain_x, c.rel_gain_y}}});
  blocks.push_back({"meta.norm_offset", {{kStateCols}, {net.normalizer.offset.begin(), net.normalizer.offset.end()}}});
  blocks.push_back({"meta.norm_scale", {{kStateCols}, {net.normalizer.scale.begin(), net.normalizer.scale.end()}}});
  for (int b = 0; b < kParamBlockCount; ++b) {
    const auto& spec = net.params.layout()[static_cast<std::size_t>(b)];
    const auto m = net.params.block(b);
    Tensor t{{static_cast<std::uint64_t>(spec.rows), static_cast<std::uint64_t>(spec.cols)}, {}};
    t.data.reserve(static_cast<std::size_t>(spec.size()));
    for (int i = 0; i < spec.rows; ++i)
      for (int j = 0; j < spec.cols; ++j) t.data.push_back(m(i, j));
    blocks.push_back({spec.name, std::move(t)});
  }
  return blocks;
}

inline PolicyNet from_tensors(const std::map<std::string, Tensor>& blocks) {
  auto need = [&](const std::string& name, std::size_t n) -> const Tensor& {
    auto it = blocks.find(name);
    if (it == blocks.end()) throw CheckpointError("checkpoint missing block " + name);
    if (it->second.data.size() != n) throw CheckpointError("checkpoint block " + name + " has wrong size");
    return it->second;
  };
  const auto& meta = need("meta.config", 8).data;
  NetConfig c;
  c.max_intruders = static_cast<int>(meta[0]);
  c.enc_width = static_cast<int>(meta[1]);
  c.heads = static_cast<int>(meta[2]);
  c.head_dim = static_cast<int>(meta[3]);
  c.trunk_width = static_cast<int>(meta[4]);
  c.leaky_slope = meta[5];
  c.rel_gain_x = meta[6];
  c.rel_gain_y = meta[7];
  PolicyNet net{NetParams(c), {}};
  const auto& off = need("meta.norm_offset", kStateCols).data;
  const auto& sc = need("meta.norm_scale", kStateCols).data;
  std::copy(off.begin(), off.end(), net.normalizer.offset.begin());
  std::copy(sc.begin(), sc.end(), net.normalizer.scale.begin());
  for (int b = 0; b < kParamBlockCount; ++b) {
    const auto& spec = net.params.layout()[static_cast<std::size_t>(b)];
    const auto& t = need(spec.name, static_cast<std::size_t>(spec.size()));
    if (t.dims.size() != 2 || t.dims[0] != static_cast<std::uint64_t>(spec.rows) ||
        t.dims[1] != static_cast<std::uint64_t>(spec.cols))
      throw CheckpointError("checkpoint block " + spec.name + " has wrong shape");
    auto m = net.params.block(b);
    std::size_t k = 0;
    for (int i = 0; i < spec.rows; ++i)
      for (int j = 0; j < spec.cols; ++j) m(i, j) = t.data[k++];
  }
  return net;
}

inline void save_checkpoint(const std::string& path, const PolicyNet& net) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open " + path + " for writing");
  write_tensors(os, to_tensors(net));
}

inline PolicyNet load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path);
  return from_tensors(read_tensors(is));
}

}  // namespace rsep
