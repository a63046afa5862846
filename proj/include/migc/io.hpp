#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "migc/diffusion.hpp"

namespace migc {

// Flat binary files: 8-byte magic, u32 version, then a format-specific
// header and row-major little-endian f64 payloads.

namespace binio {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void magic(const char (&m)[9]) { bytes(m, 8); }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void f64s(const std::vector<double>& v) { bytes(v.data(), v.size() * sizeof(double)); }
  void shape(const Shape& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    for (auto d : s) u64(d);
  }
  void tensor(const Tensor& t) {
    shape(t.shape());
    f64s(t.storage());
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::kInput, "cannot write " + path.string());
    out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    require(static_cast<bool>(out), ErrorKind::kInput, "short write to " + path.string());
  }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : name_(path.string()) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::kNotFound, "cannot open " + name_);
    buf_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }

  void bytes(void* p, std::size_t n) {
    require(pos_ + n <= buf_.size(), ErrorKind::kInput, name_ + ": truncated file");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  void expect_magic(const char (&m)[9]) {
    char got[8];
    bytes(got, 8);
    require(std::memcmp(got, m, 8) == 0, ErrorKind::kInput, name_ + ": bad magic, expected " + std::string(m, 8));
  }
  void expect_version(std::uint32_t v) {
    const auto got = u32();
    require(got == v, ErrorKind::kInput,
            name_ + ": unsupported version " + std::to_string(got) + " (expected " + std::to_string(v) + ")");
  }
  std::uint8_t u8() { std::uint8_t v; bytes(&v, 1); return v; }
  std::uint32_t u32() { std::uint32_t v; bytes(&v, 4); return v; }
  std::uint64_t u64() { std::uint64_t v; bytes(&v, 8); return v; }
  Shape shape() {
    const auto rank = u32();
    require(rank >= 1 && rank <= 8, ErrorKind::kInput, name_ + ": implausible rank " + std::to_string(rank));
    Shape s(rank);
    for (auto& d : s) {
      d = u64();
      require(d >= 1 && d < (std::uint64_t{1} << 32), ErrorKind::kInput, name_ + ": implausible extent");
    }
    return s;
  }
  std::vector<double> f64s(std::size_t n) {
    require(n <= (buf_.size() - pos_) / sizeof(double), ErrorKind::kInput, name_ + ": truncated payload");
    std::vector<double> v(n);
    bytes(v.data(), n * sizeof(double));
    return v;
  }
  Tensor tensor() {
    Shape s = shape();
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return Tensor(s, f64s(n));
  }
  void expect_end() const { require(pos_ == buf_.size(), ErrorKind::kInput, name_ + ": trailing bytes"); }

 private:
  std::string name_;
  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

}  // namespace binio

inline constexpr std::uint32_t kTrajectoryVersion = 1;
inline constexpr std::uint32_t kKvCacheVersion = 1;

/// Trajectory as one rank-4 array [steps+1, H, W, C].
inline void write_trajectory(const std::filesystem::path& path, const std::vector<Tensor>& trajectory) {
  require(!trajectory.empty(), ErrorKind::kInvalidArgument, "empty trajectory");
  const Shape& s = trajectory.front().shape();
  require(s.size() == 3, ErrorKind::kShape, "trajectory latents must be H x W x C");
  binio::Writer w;
  w.magic("MIGCTRAJ");
  w.u32(kTrajectoryVersion);
  w.shape({trajectory.size(), s[0], s[1], s[2]});
  for (const auto& z : trajectory) {
    require_same_shape(z.shape(), s, "trajectory entry");
    w.f64s(z.storage());
  }
  w.save(path);
}

inline std::vector<Tensor> read_trajectory(const std::filesystem::path& path) {
  binio::Reader r(path);
  r.expect_magic("MIGCTRAJ");
  r.expect_version(kTrajectoryVersion);
  const Shape s = r.shape();
  require(s.size() == 4, ErrorKind::kInput, path.string() + ": trajectory must be rank 4");
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < s[0]; ++i) out.emplace_back(Shape{s[1], s[2], s[3]}, r.f64s(s[1] * s[2] * s[3]));
  r.expect_end();
  return out;
}

inline void write_kv_cache(const std::filesystem::path& path, const KvCache& cache) {
  binio::Writer w;
  w.magic("MIGCKVC_");
  w.u32(kKvCacheVersion);
  w.u64(cache.size());
  for (const auto& [key, entry] : cache) {
    w.u8(static_cast<std::uint8_t>(key.pass));
    w.u8(static_cast<std::uint8_t>(key.block));
    w.u32(key.step);
    w.tensor(entry.k);
    w.tensor(entry.v);
  }
  w.save(path);
}

inline KvCache read_kv_cache(const std::filesystem::path& path) {
  binio::Reader r(path);
  r.expect_magic("MIGCKVC_");
  r.expect_version(kKvCacheVersion);
  const auto n = r.u64();
  KvCache cache;
  for (std::uint64_t i = 0; i < n; ++i) {
    KvKey key;
    const auto pass = r.u8(), block = r.u8();
    require(pass <= 1 && block < kAllBlocks.size(), ErrorKind::kInput, path.string() + ": bad cache key");
    key.pass = static_cast<Pass>(pass);
    key.block = static_cast<BlockId>(block);
    key.step = r.u32();
    KvEntry e{r.tensor(), r.tensor()};
    cache.emplace(key, std::move(e));
  }
  r.expect_end();
  return cache;
}

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Named shader parameter sets (block names, or "toy" for the training stack).
using CheckpointEntries = std::map<std::string, ShaderParams<double>>;

namespace detail {
inline std::vector<std::uint64_t> dims_fields(const ShaderDims& d) {
  return {d.channels,    d.attn_dim,        d.embed_dim, d.heads,    d.fourier_freqs,
          d.grounding_hidden, d.position_tokens, d.capacity, d.reduction};
}
}  // namespace detail

/// Header: magic, version, entry table (name, dims, tensor shapes with their
/// group tags). Body: every tensor's f64 values in table order.
inline void write_checkpoint(const std::filesystem::path& path, const CheckpointEntries& entries) {
  binio::Writer w;
  w.magic("MIGCCKPT");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(entries.size()));
  std::vector<double> body;
  for (const auto& [name, params] : entries) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    for (auto f : detail::dims_fields(params.dims)) w.u64(f);
    std::uint32_t count = 0;
    params.visit([&](ParamGroup, const Tensor&) { ++count; });
    w.u32(count);
    params.visit([&](ParamGroup g, const Tensor& t) {
      w.u8(static_cast<std::uint8_t>(g));
      w.shape(t.shape());
      body.insert(body.end(), t.storage().begin(), t.storage().end());
    });
  }
  w.f64s(body);
  w.save(path);
}

inline CheckpointEntries read_checkpoint(const std::filesystem::path& path) {
  binio::Reader r(path);
  r.expect_magic("MIGCCKPT");
  r.expect_version(kCheckpointVersion);
  const auto n = r.u32();
  struct Pending {
    std::string name;
    ShaderDims dims;
    std::vector<std::pair<std::uint8_t, Shape>> table;
  };
  std::vector<Pending> pending;
  for (std::uint32_t e = 0; e < n; ++e) {
    Pending p;
    const auto len = r.u32();
    require(len < 4096, ErrorKind::kInput, path.string() + ": implausible entry name");
    p.name.resize(len);
    r.bytes(p.name.data(), len);
    std::size_t* fields[] = {&p.dims.channels,    &p.dims.attn_dim,        &p.dims.embed_dim,
                             &p.dims.heads,       &p.dims.fourier_freqs,   &p.dims.grounding_hidden,
                             &p.dims.position_tokens, &p.dims.capacity,    &p.dims.reduction};
    for (auto* f : fields) *f = r.u64();
    const auto count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto g = r.u8();
      p.table.emplace_back(g, r.shape());
    }
    pending.push_back(std::move(p));
  }
  CheckpointEntries out;
  for (auto& p : pending) {
    ShaderParams<double> params = ShaderParams<double>::random(0, p.dims);
    std::size_t i = 0;
    params.visit([&](ParamGroup g, Tensor& t) {
      require(i < p.table.size() && p.table[i].first == static_cast<std::uint8_t>(g) &&
                  p.table[i].second == t.shape(),
              ErrorKind::kInput, path.string() + ": entry '" + p.name + "' does not match its declared dims");
      t = Tensor(t.shape(), r.f64s(t.size()));
      ++i;
    });
    require(i == p.table.size(), ErrorKind::kInput, path.string() + ": entry '" + p.name + "' has extra tensors");
    out.emplace(p.name, std::move(params));
  }
  r.expect_end();
  return out;
}

}  // namespace migc
