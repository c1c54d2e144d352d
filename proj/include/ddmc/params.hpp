#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "ddmc/autodiff.hpp"
#include "ddmc/rng.hpp"

namespace ddmc {

static_assert(std::endian::native == std::endian::little, "serialisation assumes little-endian host");

/// Ordered, named collection of network tensors. Trainable entries are graph
/// leaves that receive gradients; the rest (running statistics) are state.
template <typename T>
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Var<T> var;
    bool trainable = true;
  };

  static constexpr std::uint16_t kFormatVersion = 1;

  Var<T>& add(const std::string& name, Tensor<T> value, bool trainable = true) {
    for (const auto& e : entries_)
      if (e.name == name) throw ValueError("ParamSet: duplicate name '" + name + "'");
    entries_.push_back({name, Var<T>::leaf(std::move(value), trainable), trainable});
    return entries_.back().var;
  }

  std::size_t size() const noexcept { return entries_.size(); }
  std::vector<Entry>& entries() noexcept { return entries_; }
  const std::vector<Entry>& entries() const noexcept { return entries_; }

  const Entry& find(std::string_view name) const {
    for (const auto& e : entries_)
      if (e.name == name) return e;
    throw ValueError("ParamSet: no tensor named '" + std::string(name) + "'");
  }
  Var<T>& get(std::string_view name) { return const_cast<Entry&>(find(name)).var; }
  const Var<T>& get(std::string_view name) const { return find(name).var; }

  std::uint32_t version() const noexcept { return version_; }
  void bump_version() noexcept { ++version_; }

  void zero_grad() {
    for (auto& e : entries_) e.var.zero_grad();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.trainable) n += e.var.value().size();
    return n;
  }

  /// "DDMC" | u16 version | u32 count | per tensor: u16 name length, name,
  /// u8 rank, u32 extents, float32 values. All little-endian.
  std::vector<std::uint8_t> serialize() const {
    std::vector<std::uint8_t> out{'D', 'D', 'M', 'C'};
    put<std::uint16_t>(out, kFormatVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(entries_.size()));
    for (const auto& e : entries_) {
      put<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
      out.insert(out.end(), e.name.begin(), e.name.end());
      const auto& shape = e.var.value().shape();
      out.push_back(static_cast<std::uint8_t>(shape.size()));
      for (auto d : shape) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
      for (T v : e.var.value().values()) put<float>(out, static_cast<float>(v));
    }
    return out;
  }

  /// Parses a serialised set. Returns the number of bytes consumed. Entries
  /// whose name starts with "running_" or contains ".running_" are state.
  static ParamSet deserialize(std::span<const std::uint8_t> bytes, std::size_t* consumed = nullptr) {
    Reader r{bytes};
    if (bytes.size() < 4 || std::memcmp(bytes.data(), "DDMC", 4) != 0)
      throw FormatError(ErrorKind::bad_magic, "ParamSet: bad magic (expected \"DDMC\")");
    r.pos = 4;
    const auto ver = r.template get<std::uint16_t>();
    if (ver != kFormatVersion)
      throw FormatError(ErrorKind::bad_version,
                        "ParamSet: format version " + std::to_string(ver) + " unsupported");
    const auto count = r.template get<std::uint32_t>();
    ParamSet ps;
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto len = r.template get<std::uint16_t>();
      std::string name(len, '\0');
      r.bytes(name.data(), len);
      const auto rank = r.template get<std::uint8_t>();
      Shape shape(rank);
      for (auto& d : shape) d = r.template get<std::uint32_t>();
      Tensor<T> t(shape);
      for (auto& v : t.values()) v = static_cast<T>(r.template get<float>());
      const bool state = name.rfind("running_", 0) == 0 || name.find(".running_") != std::string::npos;
      ps.add(name, std::move(t), !state);
    }
    if (consumed) *consumed = r.pos;
    return ps;
  }

  /// Copies values from `other` into this set; names and shapes must match.
  void assign_from(const ParamSet& other) {
    if (other.size() != size())
      throw IntegrityError("ParamSet: tensor count mismatch (" + std::to_string(other.size()) +
                           " vs " + std::to_string(size()) + ")");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& src = other.entries_[i];
      auto& dst = entries_[i];
      if (src.name != dst.name)
        throw IntegrityError("ParamSet: expected '" + dst.name + "', found '" + src.name + "'");
      require_same_shape(src.var.value().shape(), dst.var.value().shape(), "ParamSet::assign_from");
      dst.var.mutable_value() = src.var.value();
    }
  }

  /// FNV-1a over the serialised bytes.
  std::uint64_t hash() const { return fnv1a(serialize()); }

  static std::uint64_t fnv1a(std::span<const std::uint8_t> bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (auto b : bytes) {
      h ^= b;
      h *= 0x100000001b3ull;
    }
    return h;
  }

 private:
  template <typename U>
  static void put(std::vector<std::uint8_t>& out, U v) {
    std::uint8_t buf[sizeof(U)];
    std::memcpy(buf, &v, sizeof(U));
    out.insert(out.end(), buf, buf + sizeof(U));
  }

  struct Reader {
    std::span<const std::uint8_t> data;
    std::size_t pos = 0;
    void bytes(void* dst, std::size_t n) {
      if (pos + n > data.size())
        throw FormatError(ErrorKind::truncated, "ParamSet: truncated payload (need " +
                                                    std::to_string(pos + n) + " bytes, have " +
                                                    std::to_string(data.size()) + ")");
      std::memcpy(dst, data.data() + pos, n);
      pos += n;
    }
    template <typename U>
    U get() {
      U v;
      bytes(&v, sizeof(U));
      return v;
    }
  };

  std::vector<Entry> entries_;
  std::uint32_t version_ = 0;
};

/// Kaiming-uniform (fan-in) initialiser: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
template <typename T>
Tensor<T> kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

}  // namespace ddmc
