#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "aim/errors.hpp"
#include "aim/tensor.hpp"

namespace aim {

// AIMT tensor format, all integers little-endian:
//   "AIMT" | version u16 (=1) | dtype u8 (0 f32, 1 f64) | rank u8 | dims u64[rank] | payload
inline constexpr std::array<char, 4> kAimtMagic{'A', 'I', 'M', 'T'};
inline constexpr std::uint16_t kAimtVersion = 1;

template <typename T>
constexpr std::uint8_t aimt_dtype() {
  if constexpr (std::is_same_v<T, float>) {
    return 0;
  } else {
    static_assert(std::is_same_v<T, double>, "AIMT stores float or double");
    return 1;
  }
}

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  template <typename U>
  void le(U v) {
    static_assert(std::is_unsigned_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    le(u);
  }
  void f64(double v) {
    std::uint64_t u;
    std::memcpy(&u, &v, 8);
    le(u);
  }
  const std::vector<std::uint8_t>& buffer() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& data) : data_(data) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }
  bool at_end() const { return pos_ == data_.size(); }

  void need(std::size_t n, const std::string& what) const {
    if (remaining() < n) {
      throw FormatError("truncated " + what + ": expected " + std::to_string(n) + " bytes, found " +
                            std::to_string(remaining()),
                        pos_);
    }
  }
  template <typename U>
  U le(const std::string& what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(data_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  void bytes(void* out, std::size_t n, const std::string& what) {
    need(n, what);
    std::memcpy(out, data_.data() + pos_, n);
    pos_ += n;
  }

 private:
  const std::vector<std::uint8_t>& data_;
  std::size_t pos_ = 0;
};

template <typename T>
void encode_tensor(ByteWriter& w, const Tensor<T>& t) {
  if (t.rank() > 255) throw UsageError("AIMT: rank above 255");
  w.bytes(kAimtMagic.data(), 4);
  w.le<std::uint16_t>(kAimtVersion);
  w.le<std::uint8_t>(aimt_dtype<T>());
  w.le<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) w.le<std::uint64_t>(d);
  for (T v : t.data()) {
    if constexpr (std::is_same_v<T, float>) {
      w.f32(v);
    } else {
      w.f64(v);
    }
  }
}

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

inline AnyTensor decode_tensor(ByteReader& r) {
  const std::size_t start = r.offset();
  std::array<char, 4> magic{};
  r.bytes(magic.data(), 4, "AIMT magic");
  if (magic != kAimtMagic) throw FormatError("AIMT: bad magic", start);
  const std::size_t vpos = r.offset();
  const auto version = r.le<std::uint16_t>("AIMT version");
  if (version != kAimtVersion) {
    throw VersionError("AIMT: unsupported version " + std::to_string(version) + " (expected " +
                           std::to_string(kAimtVersion) + ")",
                       vpos);
  }
  const std::size_t dpos = r.offset();
  const auto dtype = r.le<std::uint8_t>("AIMT dtype");
  if (dtype > 1) throw FormatError("AIMT: unknown dtype " + std::to_string(dtype), dpos);
  const auto rank = r.le<std::uint8_t>("AIMT rank");
  Shape shape;
  std::uint64_t count = 1;
  for (std::uint8_t i = 0; i < rank; ++i) {
    const std::size_t pos = r.offset();
    const auto d = r.le<std::uint64_t>("AIMT dims");
    if (d == 0 || d > (std::uint64_t{1} << 40)) throw FormatError("AIMT: invalid dimension " + std::to_string(d), pos);
    count *= d;
    if (count > (std::uint64_t{1} << 40)) throw FormatError("AIMT: tensor too large", pos);
    shape.push_back(static_cast<std::size_t>(d));
  }
  const std::size_t width = dtype == 0 ? 4 : 8;
  r.need(static_cast<std::size_t>(count) * width, "AIMT payload");
  if (dtype == 0) {
    std::vector<float> data(count);
    for (auto& v : data) {
      const auto u = r.le<std::uint32_t>("AIMT payload");
      std::memcpy(&v, &u, 4);
    }
    return Tensor<float>(std::move(shape), std::move(data));
  }
  std::vector<double> data(count);
  for (auto& v : data) {
    const auto u = r.le<std::uint64_t>("AIMT payload");
    std::memcpy(&v, &u, 8);
  }
  return Tensor<double>(std::move(shape), std::move(data));
}

template <typename T>
Tensor<T> decode_tensor_as(ByteReader& r) {
  const std::size_t start = r.offset();
  AnyTensor any = decode_tensor(r);
  if (auto* t = std::get_if<Tensor<T>>(&any)) return std::move(*t);
  throw FormatError("AIMT: stored dtype does not match the requested one", start);
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
inline void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

template <typename T>
void write_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  ByteWriter w;
  encode_tensor(w, t);
  write_file_atomic(path, w.buffer());
}

template <typename T>
Tensor<T> read_tensor(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  ByteReader r(bytes);
  Tensor<T> t = decode_tensor_as<T>(r);
  if (!r.at_end()) throw FormatError("AIMT: trailing bytes after payload", r.offset());
  return t;
}

}  // namespace aim
