// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vitft/tensor.hpp"

namespace vitft {

// Binary layout (little-endian):
//   "FTRA"  u32 version  u32 entry_count
//   per entry: u16 name_len, name bytes (utf-8), u8 dtype, u8 rank,
//              u64 dims[rank], raw payload (numel * dtype size bytes)
inline constexpr std::uint32_t kArchiveVersion = 1;

enum class ArchiveDType : std::uint8_t { kFloat32 = 0, kFloat64 = 1, kInt64 = 2, kUInt8 = 3 };

std::size_t dtype_size(ArchiveDType dtype);

struct ArchiveEntry {
  std::string name;
  ArchiveDType dtype = ArchiveDType::kFloat32;
  Shape shape;
  std::vector<std::uint8_t> bytes;

  bool operator==(const ArchiveEntry&) const = default;
};

class ArchiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Ordered collection of uniquely named entries.
class TensorArchive {
 public:
  const std::vector<ArchiveEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool contains(std::string_view name) const;
  const ArchiveEntry& at(std::string_view name) const;

  /// Throws ArchiveError on a duplicate name.
  void add(ArchiveEntry entry);

  template <typename T>
  void put(std::string name, const Tensor<T>& tensor);
  void put_i64(std::string name, std::span<const std::int64_t> values);
  void put_u8(std::string name, std::span<const std::uint8_t> values);
  void put_u8(std::string name, std::string_view text);

  /// Typed readers; throw ArchiveError on a dtype or size mismatch.
  template <typename T>
  Tensor<T> get(std::string_view name) const;
  template <typename T>
  void get_into(std::string_view name, Tensor<T>& out) const;
  std::vector<std::int64_t> get_i64(std::string_view name) const;
  std::string get_text(std::string_view name) const;

  bool operator==(const TensorArchive&) const = default;

 private:
  std::vector<ArchiveEntry> entries_;
};

std::vector<std::uint8_t> serialize_archive(const TensorArchive& archive);
/// Throws ArchiveError on bad magic, version mismatch, truncation, trailing
/// bytes or duplicate names.
TensorArchive parse_archive(std::span<const std::uint8_t> bytes);

void write_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive read_archive(const std::filesystem::path& path);

extern template void TensorArchive::put(std::string, const Tensor<float>&);
extern template void TensorArchive::put(std::string, const Tensor<double>&);
extern template Tensor<float> TensorArchive::get(std::string_view) const;
extern template Tensor<double> TensorArchive::get(std::string_view) const;
extern template void TensorArchive::get_into(std::string_view, Tensor<float>&) const;
extern template void TensorArchive::get_into(std::string_view, Tensor<double>&) const;

}  // namespace vitft
