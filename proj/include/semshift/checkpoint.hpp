#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "semshift/tensor.hpp"

namespace semshift {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { F32 = 1, F64 = 2 };

template <std::floating_point T>
constexpr DType dtype_of() {
  return std::is_same_v<T, float> ? DType::F32 : DType::F64;
}

/// Versioned binary container of named tensors.
///
/// Layout (little-endian): magic "SSCKPT01", u32 version, u64 fingerprint,
/// u64 metadata length + bytes, u64 tensor count, then per tensor: u32 name
/// length + bytes, u8 dtype, u32 rank, u64 dims[rank], row-major payload.
class Checkpoint {
 public:
  static constexpr std::uint32_t kVersion = 1;

  Checkpoint() = default;
  explicit Checkpoint(std::uint64_t fingerprint) : fingerprint_(fingerprint) {}

  std::uint64_t fingerprint() const { return fingerprint_; }

  /// Free-form metadata text (the trainer stores JSON here).
  const std::string& metadata() const { return metadata_; }
  void set_metadata(std::string text) { metadata_ = std::move(text); }

  template <std::floating_point T>
  void put(const std::string& name, const Shape& shape, std::span<const T> values);
  template <std::floating_point T>
  void put(const std::string& name, const Tensor<T>& tensor) {
    put<T>(name, tensor.shape(), tensor.values());
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  std::vector<std::string> names() const;

  /// Copies a stored tensor into `out`, which must already have the stored
  /// shape and dtype.
  template <std::floating_point T>
  void read_into(const std::string& name, const Shape& shape, std::span<T> out) const;
  template <std::floating_point T>
  void read_into(const std::string& name, Tensor<T>& tensor) const {
    read_into<T>(name, tensor.shape(), tensor.mutable_values());
  }

  void save(const std::filesystem::path& path) const;
  /// Throws CheckpointError on malformed files or a fingerprint mismatch.
  static Checkpoint load(const std::filesystem::path& path);
  static Checkpoint load(const std::filesystem::path& path, std::uint64_t expected_fingerprint);

 private:
  struct Entry {
    DType dtype;
    Shape shape;
    std::vector<unsigned char> payload;
  };

  std::uint64_t fingerprint_ = 0;
  std::string metadata_;
  std::map<std::string, Entry> entries_;
};

/// FNV-1a over a byte string; used to fingerprint resolved configs.
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace semshift
