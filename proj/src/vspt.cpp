#include "splitkit/vspt.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <limits>

#include "splitkit/io.hpp"

namespace splitkit {

namespace {

constexpr char kMagic[4] = {'V', 'S', 'P', 'T'};
constexpr std::uint8_t kDtypeF32 = 0;

class Writer {
 public:
  template <class T>
  void put(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }

  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(bytes_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) throw VsptError(std::string("truncated VSPT file while reading ") + what);
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

void put_floats(Writer& w, std::span<const float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    w.put_bytes(values.data(), values.size_bytes());
  } else {
    for (float v : values) w.put(std::bit_cast<std::uint32_t>(v));
  }
}

std::vector<float> get_floats(std::span<const std::uint8_t> raw) {
  std::vector<float> out(raw.size() / 4);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data(), raw.data(), raw.size());
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) {
      std::uint32_t u = 0;
      for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(raw[i * 4 + b]) << (8 * b);
      out[i] = std::bit_cast<float>(u);
    }
  }
  return out;
}

}  // namespace

void TensorFile::add(std::string name, const Tensor& tensor) {
  if (name.empty() || name.size() > std::numeric_limits<std::uint16_t>::max()) {
    throw VsptError("invalid tensor name length " + std::to_string(name.size()));
  }
  if (contains(name)) throw VsptError("duplicate tensor name: " + name);
  if (tensor.rank() > std::numeric_limits<std::uint8_t>::max()) throw VsptError("rank too large for " + name);
  for (Dim d : tensor.shape()) {
    if (d > std::numeric_limits<std::uint32_t>::max()) throw VsptError("dimension too large for " + name);
  }
  entries_.push_back({std::move(name), tensor});
}

bool TensorFile::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const TensorEntry& e) { return e.name == name; });
}

const Tensor& TensorFile::at(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e.tensor;
  }
  throw VsptError("missing tensor: " + name);
}

void TensorFile::require(std::span<const std::string> names) const {
  std::string missing;
  for (const auto& n : names) {
    if (!contains(n)) missing += (missing.empty() ? "" : ", ") + n;
  }
  if (!missing.empty()) throw VsptError("missing tensors: " + missing);
}

std::vector<std::uint8_t> TensorFile::serialize() const {
  Writer w;
  w.put_bytes(kMagic, 4);
  w.put<std::uint32_t>(kVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(entries_.size()));
  std::uint64_t offset = 0;
  for (const auto& e : entries_) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(e.name.size()));
    w.put_bytes(e.name.data(), e.name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(e.tensor.rank()));
    for (Dim d : e.tensor.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    w.put<std::uint8_t>(kDtypeF32);
    w.put<std::uint64_t>(offset);
    offset += static_cast<std::uint64_t>(e.tensor.numel()) * 4;
  }
  for (const auto& e : entries_) put_floats(w, e.tensor.data());
  return std::move(w.bytes);
}

TensorFile TensorFile::parse(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  auto magic = r.take(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), kMagic)) throw VsptError("bad magic: not a VSPT file");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion) throw VsptError("unsupported VSPT version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>("entry count");

  struct Header {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Header> headers;
  headers.reserve(std::min<std::uint32_t>(count, 1u << 16));
  for (std::uint32_t i = 0; i < count; ++i) {
    Header h;
    const auto len = r.get<std::uint16_t>("name length");
    auto name = r.take(len, "name");
    h.name.assign(name.begin(), name.end());
    const auto rank = r.get<std::uint8_t>("rank");
    for (std::uint8_t d = 0; d < rank; ++d) h.shape.push_back(r.get<std::uint32_t>("dims"));
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype != kDtypeF32) throw VsptError("unsupported dtype code " + std::to_string(dtype) + " for " + h.name);
    h.offset = r.get<std::uint64_t>("offset");
    headers.push_back(std::move(h));
  }

  const std::size_t blob_start = r.position();
  const std::uint64_t blob_size = bytes.size() - blob_start;
  TensorFile file;
  for (const auto& h : headers) {
    const std::uint64_t n = static_cast<std::uint64_t>(shape_numel(h.shape)) * 4;
    if (h.offset > blob_size || n > blob_size - h.offset) {
      throw VsptError("truncated VSPT file: payload of " + h.name + " runs past end of file");
    }
    auto raw = bytes.subspan(blob_start + h.offset, n);
    file.add(h.name, Tensor::from(h.shape, get_floats(raw)));
  }
  return file;
}

void TensorFile::save(const std::filesystem::path& path) const { atomic_write_file(path, serialize()); }

TensorFile TensorFile::load(const std::filesystem::path& path) { return parse(read_file(path)); }

}  // namespace splitkit
