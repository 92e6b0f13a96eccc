#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mededge/tensor.hpp"

// Single-file model container. All integers little-endian:
//
//   "EMED" | u16 version | u16 flags | u64 manifest_len | manifest (UTF-8)
//   u32 tensor_count
//   per tensor: u16 name_len | name | u8 dtype | u8 rank | rank x u32 dims |
//               f32 scale | i32 zero_point | u64 offset | u64 byte_len | u32 crc32
//   zero padding to the next 4096-byte boundary
//   weight blob: tensors at 64-byte aligned offsets (relative to blob start),
//                zero padding between them
namespace mededge {

inline constexpr std::uint16_t kBundleVersion = 1;
inline constexpr std::uint64_t kPageSize = 4096;
inline constexpr std::uint64_t kTensorAlignment = 64;

enum BundleFlag : std::uint16_t {
  kTrainingArtifacts = 1u << 0,
  kQuantized = 1u << 1,
};

using Bytes = std::vector<std::uint8_t>;

struct TensorEntry {
  std::string name;
  DType dtype = DType::f32;
  std::vector<std::int64_t> shape;
  float scale = 0.0f;
  std::int32_t zero_point = 0;
  std::uint64_t offset = 0;  // from blob start
  std::uint64_t byte_length = 0;
  std::uint32_t crc32 = 0;
  std::uint64_t table_offset = 0;  // absolute file offset of this table entry
};

struct BundleLayout {
  std::uint16_t version = kBundleVersion;
  std::uint16_t flags = 0;
  std::string manifest;
  std::vector<TensorEntry> tensors;
  std::uint64_t blob_offset = 0;
  std::uint64_t blob_size = 0;
  std::uint64_t file_size = 0;

  const TensorEntry* find(std::string_view name) const;
};

std::uint32_t crc32(std::span<const std::uint8_t> bytes);
std::uint64_t fnv1a64(std::string_view text);
std::string hex64(std::uint64_t value);

inline std::uint64_t align_up(std::uint64_t value, std::uint64_t alignment) {
  return (value + alignment - 1) / alignment * alignment;
}

/// Serialises tensors (in the given order) behind the manifest.
Bytes encode_bundle(std::string_view manifest, std::uint16_t flags,
                    const std::vector<std::pair<std::string, const Tensor*>>& tensors);

/// Same payload bytes and checksums encode_bundle would produce for t.
Bytes tensor_payload(const Tensor& t);

struct ParsedBundle {
  BundleLayout layout;
  std::vector<Violation> violations;
  bool ok() const noexcept { return violations.empty(); }
};

/// Bounds-checked parse. Structural problems stop parsing; checksum and
/// padding problems are collected per tensor.
ParsedBundle parse_bundle(std::span<const std::uint8_t> file, bool check_payloads = true);

/// Tensor copy out of a parsed file image.
Tensor read_tensor(std::span<const std::uint8_t> file, const BundleLayout& layout,
                   const TensorEntry& entry);

std::vector<Violation> verify_bundle(const std::filesystem::path& path);

Bytes read_file(const std::filesystem::path& path);
/// Writes to a sibling temporary file and renames it into place.
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace mededge
