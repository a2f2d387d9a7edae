// SPDX-License-Identifier: Apache-2.0
#include "vitft/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

namespace vitft {

static_assert(std::endian::native == std::endian::little,
              "the archive payload is written in host byte order");

namespace {

constexpr char kMagic[4] = {'F', 'T', 'R', 'A'};

template <typename T>
constexpr ArchiveDType archive_dtype() {
  if constexpr (std::is_same_v<T, float>) return ArchiveDType::kFloat32;
  if constexpr (std::is_same_v<T, double>) return ArchiveDType::kFloat64;
  if constexpr (std::is_same_v<T, std::int64_t>) return ArchiveDType::kInt64;
  return ArchiveDType::kUInt8;
}

template <typename U>
void put_scalar(std::vector<std::uint8_t>& out, U value) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
  out.insert(out.end(), p, p + sizeof(U));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename U>
  U scalar(const char* what) {
    U value;
    std::memcpy(&value, take(sizeof(U), what).data(), sizeof(U));
    return value;
  }
  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw ArchiveError(std::string("archive truncated while reading ") + what);
    }
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::size_t payload_size(const ArchiveEntry& e) {
  return static_cast<std::size_t>(numel_of(e.shape)) * dtype_size(e.dtype);
}

}  // namespace

std::size_t dtype_size(ArchiveDType dtype) {
  switch (dtype) {
    case ArchiveDType::kFloat32: return 4;
    case ArchiveDType::kFloat64: return 8;
    case ArchiveDType::kInt64: return 8;
    case ArchiveDType::kUInt8: return 1;
  }
  throw ArchiveError("unknown dtype code " + std::to_string(static_cast<int>(dtype)));
}

bool TensorArchive::contains(std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return true;
  }
  return false;
}

const ArchiveEntry& TensorArchive::at(std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e;
  }
  throw ArchiveError("archive has no entry '" + std::string(name) + "'");
}

void TensorArchive::add(ArchiveEntry entry) {
  if (contains(entry.name)) throw ArchiveError("duplicate archive entry '" + entry.name + "'");
  if (entry.name.size() > std::numeric_limits<std::uint16_t>::max()) {
    throw ArchiveError("archive entry name too long");
  }
  if (entry.shape.size() > std::numeric_limits<std::uint8_t>::max()) {
    throw ArchiveError("archive entry rank too large");
  }
  if (entry.bytes.size() != payload_size(entry)) {
    throw ArchiveError("payload size mismatch for '" + entry.name + "'");
  }
  entries_.push_back(std::move(entry));
}

template <typename T>
void TensorArchive::put(std::string name, const Tensor<T>& tensor) {
  ArchiveEntry e{std::move(name), archive_dtype<T>(), tensor.shape(), {}};
  const auto* p = reinterpret_cast<const std::uint8_t*>(tensor.ptr());
  e.bytes.assign(p, p + tensor.size() * sizeof(T));
  add(std::move(e));
}

void TensorArchive::put_i64(std::string name, std::span<const std::int64_t> values) {
  ArchiveEntry e{std::move(name), ArchiveDType::kInt64,
                 {static_cast<std::int64_t>(values.size())}, {}};
  const auto* p = reinterpret_cast<const std::uint8_t*>(values.data());
  e.bytes.assign(p, p + values.size_bytes());
  add(std::move(e));
}

void TensorArchive::put_u8(std::string name, std::span<const std::uint8_t> values) {
  add({std::move(name), ArchiveDType::kUInt8, {static_cast<std::int64_t>(values.size())},
       std::vector<std::uint8_t>(values.begin(), values.end())});
}

void TensorArchive::put_u8(std::string name, std::string_view text) {
  put_u8(std::move(name), std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

template <typename T>
void TensorArchive::get_into(std::string_view name, Tensor<T>& out) const {
  const auto& e = at(name);
  if (e.dtype != archive_dtype<T>()) {
    throw ArchiveError("entry '" + e.name + "' has a different dtype");
  }
  out.resize(e.shape);
  std::memcpy(out.ptr(), e.bytes.data(), e.bytes.size());
}

template <typename T>
Tensor<T> TensorArchive::get(std::string_view name) const {
  Tensor<T> out;
  get_into(name, out);
  return out;
}

std::vector<std::int64_t> TensorArchive::get_i64(std::string_view name) const {
  const auto& e = at(name);
  if (e.dtype != ArchiveDType::kInt64) throw ArchiveError("entry '" + e.name + "' is not int64");
  std::vector<std::int64_t> out(e.bytes.size() / sizeof(std::int64_t));
  std::memcpy(out.data(), e.bytes.data(), e.bytes.size());
  return out;
}

std::string TensorArchive::get_text(std::string_view name) const {
  const auto& e = at(name);
  if (e.dtype != ArchiveDType::kUInt8) throw ArchiveError("entry '" + e.name + "' is not uint8");
  return std::string(e.bytes.begin(), e.bytes.end());
}

std::vector<std::uint8_t> serialize_archive(const TensorArchive& archive) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_scalar(out, kArchiveVersion);
  put_scalar(out, static_cast<std::uint32_t>(archive.size()));
  for (const auto& e : archive.entries()) {
    put_scalar(out, static_cast<std::uint16_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    put_scalar(out, static_cast<std::uint8_t>(e.dtype));
    put_scalar(out, static_cast<std::uint8_t>(e.shape.size()));
    for (auto d : e.shape) put_scalar(out, static_cast<std::uint64_t>(d));
    out.insert(out.end(), e.bytes.begin(), e.bytes.end());
  }
  return out;
}

TensorArchive parse_archive(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto magic = r.take(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw ArchiveError("bad archive magic");
  const auto version = r.scalar<std::uint32_t>("version");
  if (version != kArchiveVersion) {
    throw ArchiveError("unsupported archive version " + std::to_string(version));
  }
  const auto count = r.scalar<std::uint32_t>("entry count");
  TensorArchive archive;
  for (std::uint32_t i = 0; i < count; ++i) {
    ArchiveEntry e;
    const auto name_len = r.scalar<std::uint16_t>("name length");
    const auto name = r.take(name_len, "name");
    e.name.assign(name.begin(), name.end());
    const auto code = r.scalar<std::uint8_t>("dtype");
    if (code > static_cast<std::uint8_t>(ArchiveDType::kUInt8)) {
      throw ArchiveError("entry '" + e.name + "' has unknown dtype code " + std::to_string(code));
    }
    e.dtype = static_cast<ArchiveDType>(code);
    const auto rank = r.scalar<std::uint8_t>("rank");
    for (std::uint8_t d = 0; d < rank; ++d) {
      const auto dim = r.scalar<std::uint64_t>("dims");
      if (dim > static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max() / 8)) {
        throw ArchiveError("entry '" + e.name + "' has an implausible extent");
      }
      e.shape.push_back(static_cast<std::int64_t>(dim));
    }
    const auto payload = r.take(payload_size(e), "payload");
    e.bytes.assign(payload.begin(), payload.end());
    archive.add(std::move(e));
  }
  if (!r.done()) throw ArchiveError("trailing bytes after the last archive entry");
  return archive;
}

void write_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  const auto bytes = serialize_archive(archive);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ArchiveError("cannot open '" + tmp.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ArchiveError("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

TensorArchive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArchiveError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_archive(bytes);
}

template void TensorArchive::put(std::string, const Tensor<float>&);
template void TensorArchive::put(std::string, const Tensor<double>&);
template Tensor<float> TensorArchive::get(std::string_view) const;
template Tensor<double> TensorArchive::get(std::string_view) const;
template void TensorArchive::get_into(std::string_view, Tensor<float>&) const;
template void TensorArchive::get_into(std::string_view, Tensor<double>&) const;

}  // namespace vitft
