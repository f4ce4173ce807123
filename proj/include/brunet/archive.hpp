#pragma once

// Tensor archive ("BTAR", version 1), all integers little-endian:
//   magic[4] | version u32 | record_count u32 |
//   per record: name_len u16 | name bytes | dtype u8 | rank u8 | dims u64[rank] | payload

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <string>
#include <vector>

#include "brunet/error.hpp"
#include "brunet/tensor.hpp"

namespace brunet {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

enum class DType : std::uint8_t { f32 = 1, f64 = 2, u8 = 3 };

inline std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::u8: return 1;
  }
  throw InvalidArgument("unknown dtype");
}

template <class T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::f32;
  else if constexpr (std::is_same_v<T, double>) return DType::f64;
  else {
    static_assert(std::is_same_v<T, std::uint8_t>, "unsupported archive element type");
    return DType::u8;
  }
}

struct Record {
  std::string name;
  DType dtype = DType::f32;
  std::vector<std::uint64_t> dims;
  std::vector<std::uint8_t> payload;

  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }

  template <class T>
  static Record from_values(std::string name, std::vector<std::uint64_t> dims, std::span<const T> values) {
    Record r{std::move(name), dtype_of<T>(), std::move(dims), {}};
    if (r.element_count() != values.size()) throw InvalidArgument("record '" + r.name + "': dims do not match value count");
    r.payload.resize(values.size_bytes());
    if (!values.empty()) std::memcpy(r.payload.data(), values.data(), values.size_bytes());
    return r;
  }

  template <class T>
  static Record from_tensor(std::string name, const Tensor<T>& t) {
    std::vector<std::uint64_t> dims(t.shape().extents().begin(), t.shape().extents().end());
    return from_values<T>(std::move(name), std::move(dims), t.values());
  }

  static Record from_text(std::string name, const std::string& text) {
    return from_values<std::uint8_t>(std::move(name), {text.size()},
                                     std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }

  template <class T>
  std::vector<T> values() const {
    if (dtype != dtype_of<T>()) throw InvalidArgument("record '" + name + "' has a different dtype");
    std::vector<T> out(payload.size() / sizeof(T));
    if (!out.empty()) std::memcpy(out.data(), payload.data(), payload.size());
    return out;
  }

  template <class T>
  Tensor<T> tensor() const {
    if (dims.empty() || dims.size() > kMaxRank) throw InvalidArgument("record '" + name + "' is not a rank 1..4 tensor");
    std::vector<std::size_t> ext(dims.begin(), dims.end());
    return Tensor<T>(Shape(std::span<const std::size_t>(ext)), values<T>());
  }

  std::string text() const {
    if (dtype != DType::u8) throw InvalidArgument("record '" + name + "' is not text");
    return std::string(payload.begin(), payload.end());
  }

  friend bool operator==(const Record&, const Record&) = default;
};

namespace detail {

template <class U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint64_t offset() const noexcept { return pos_; }

  template <class U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(bytes_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }

  std::span<const std::uint8_t> take(std::uint64_t n, const char* what) {
    need(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const noexcept { return pos_ == bytes_.size(); }

 private:
  void need(std::uint64_t n, const char* what) const {
    if (n > bytes_.size() - pos_) throw FormatError(std::string("truncated archive while reading ") + what, pos_);
  }

  std::span<const std::uint8_t> bytes_;
  std::uint64_t pos_ = 0;
};

}  // namespace detail

inline constexpr std::uint32_t kArchiveVersion = 1;

inline std::vector<std::uint8_t> archive_encode(const std::vector<Record>& records) {
  std::vector<std::uint8_t> out{'B', 'T', 'A', 'R'};
  detail::put_le<std::uint32_t>(out, kArchiveVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(records.size()));
  std::set<std::string> names;
  for (const auto& r : records) {
    if (!names.insert(r.name).second) throw InvalidArgument("duplicate archive record name '" + r.name + "'");
    if (r.name.size() > 0xFFFF) throw InvalidArgument("record name too long");
    if (r.dims.size() > 0xFF) throw InvalidArgument("record rank too large");
    if (r.payload.size() != r.element_count() * dtype_size(r.dtype))
      throw InvalidArgument("record '" + r.name + "' payload length does not match dims");
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(r.name.size()));
    out.insert(out.end(), r.name.begin(), r.name.end());
    out.push_back(static_cast<std::uint8_t>(r.dtype));
    out.push_back(static_cast<std::uint8_t>(r.dims.size()));
    for (auto d : r.dims) detail::put_le<std::uint64_t>(out, d);
    out.insert(out.end(), r.payload.begin(), r.payload.end());
  }
  return out;
}

inline std::vector<Record> archive_decode(std::span<const std::uint8_t> bytes) {
  detail::Reader in(bytes);
  const auto magic = in.take(4, "magic");
  if (std::memcmp(magic.data(), "BTAR", 4) != 0) throw FormatError("bad archive magic", 0);
  const std::uint64_t version_at = in.offset();
  if (const auto v = in.get<std::uint32_t>("version"); v != kArchiveVersion)
    throw FormatError("unsupported archive version " + std::to_string(v), version_at);
  const auto count = in.get<std::uint32_t>("record count");
  std::vector<Record> records;
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint64_t record_at = in.offset();
    Record r;
    const auto name_len = in.get<std::uint16_t>("record name length");
    const auto name = in.take(name_len, "record name");
    r.name.assign(name.begin(), name.end());
    if (!names.insert(r.name).second) throw FormatError("duplicate record name '" + r.name + "'", record_at);
    const std::uint64_t dtype_at = in.offset();
    const auto code = in.get<std::uint8_t>("dtype");
    if (code < 1 || code > 3) throw FormatError("unknown dtype code " + std::to_string(code), dtype_at);
    r.dtype = static_cast<DType>(code);
    const auto rank = in.get<std::uint8_t>("rank");
    r.dims.resize(rank);
    for (auto& d : r.dims) d = in.get<std::uint64_t>("dims");
    const std::uint64_t payload_at = in.offset();
    const std::uint64_t n = r.element_count();
    const std::uint64_t esz = dtype_size(r.dtype);
    if (n != 0 && n > (bytes.size() - payload_at) / esz)
      throw FormatError("truncated archive while reading payload of '" + r.name + "'", payload_at);
    const auto payload = in.take(n * esz, "payload");
    r.payload.assign(payload.begin(), payload.end());
    records.push_back(std::move(r));
  }
  if (!in.at_end()) throw FormatError("trailing bytes after last record", in.offset());
  return records;
}

inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + tmp.string() + "' for writing");
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("write to '" + tmp.string() + "' failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(is), {});
}

inline void archive_save(const std::filesystem::path& path, const std::vector<Record>& records) {
  write_file_atomic(path, archive_encode(records));
}

inline std::vector<Record> archive_load(const std::filesystem::path& path) { return archive_decode(read_file(path)); }

inline const Record& find_record(const std::vector<Record>& records, const std::string& name) {
  for (const auto& r : records)
    if (r.name == name) return r;
  throw FormatError("archive has no record named '" + name + "'", 0);
}

inline const Record* try_find_record(const std::vector<Record>& records, const std::string& name) {
  for (const auto& r : records)
    if (r.name == name) return &r;
  return nullptr;
}

}  // namespace brunet
