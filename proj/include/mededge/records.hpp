#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mededge/bundle.hpp"
#include "mededge/meddata.hpp"

// Record file: a plain sequence of
//   u64 payload_len | payload | u32 crc32(payload)
// Payload: u8 modality | u32 label | body
//   modality 0 (symptoms): u32 n | n x f32
//   modality 1 (image):    u32 h | u32 w | u32 c | h*w*c x u8
namespace mededge {

Bytes encode_sample(const LabeledSample& sample);
/// Throws InputError on a malformed payload.
LabeledSample decode_sample(std::span<const std::uint8_t> payload);

void write_records(std::span<const LabeledSample> samples, const std::filesystem::path& path);

enum class OnCorrupt { fail, skip };

struct RecordFailure {
  std::size_t index = 0;     // 0-based record number
  std::uint64_t offset = 0;  // file offset of the record's length prefix
  std::string message;
};

/// Streams records one at a time with positioned reads; nothing past the
/// current record is ever read. A checksum or payload failure either throws
/// IntegrityError (fail) or is recorded and skipped (skip). A length prefix
/// that runs past the end of the file ends the stream in both modes, since
/// nothing after it can be located.
class RecordReader {
 public:
  explicit RecordReader(const std::filesystem::path& path, OnCorrupt policy = OnCorrupt::fail);
  ~RecordReader();
  RecordReader(const RecordReader&) = delete;
  RecordReader& operator=(const RecordReader&) = delete;

  std::optional<LabeledSample> next();

  const std::vector<RecordFailure>& failures() const noexcept { return failures_; }
  /// Highest file offset read so far.
  std::uint64_t bytes_consumed() const noexcept { return high_water_; }
  std::size_t records_seen() const noexcept { return index_; }

 private:
  bool read_at(std::uint64_t offset, std::span<std::uint8_t> out);
  void fail(std::uint64_t offset, std::string message);

  int fd_ = -1;
  std::uint64_t file_size_ = 0;
  std::uint64_t pos_ = 0;
  std::uint64_t high_water_ = 0;
  std::size_t index_ = 0;
  bool done_ = false;
  OnCorrupt policy_;
  std::vector<RecordFailure> failures_;
};

struct RecordSet {
  std::vector<LabeledSample> samples;
  std::vector<RecordFailure> failures;
};

RecordSet read_records(const std::filesystem::path& path, OnCorrupt policy = OnCorrupt::fail);

}  // namespace mededge
