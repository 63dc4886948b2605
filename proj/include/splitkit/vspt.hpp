#pragma once

// VSPT tensor container.
//
//   "VSPT" | u32 version (1) | u32 entry count
//   per entry: u16 name length, name bytes (UTF-8), u8 rank, rank x u32 dims,
//              u8 dtype (0 = f32 little-endian), u64 byte offset into the blob
//   blob: tensor payloads, back to back in entry order
//
// All integers are little-endian.

#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "splitkit/tensor.hpp"

namespace splitkit {

class VsptError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TensorEntry {
  std::string name;
  Tensor tensor;
};

/// Ordered set of named tensors. Names are unique.
class TensorFile {
 public:
  static constexpr std::uint32_t kVersion = 1;

  void add(std::string name, const Tensor& tensor);
  bool contains(const std::string& name) const;
  /// Throws VsptError("missing tensor: <name>") when absent.
  const Tensor& at(const std::string& name) const;
  /// Throws one VsptError listing every name that is absent.
  void require(std::span<const std::string> names) const;
  const std::vector<TensorEntry>& entries() const { return entries_; }

  std::vector<std::uint8_t> serialize() const;
  /// Parses a complete container; any inconsistency throws VsptError and
  /// nothing is returned.
  static TensorFile parse(std::span<const std::uint8_t> bytes);

  void save(const std::filesystem::path& path) const;
  static TensorFile load(const std::filesystem::path& path);

 private:
  std::vector<TensorEntry> entries_;
};

}  // namespace splitkit
