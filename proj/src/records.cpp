#include "mededge/records.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

namespace mededge {

namespace {

void put_u32(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(Bytes& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_le(std::span<const std::uint8_t> b, std::size_t at, int width) {
  std::uint64_t v = 0;
  for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(b[at + i]) << (8 * i);
  return v;
}

class Cursor {
 public:
  explicit Cursor(std::span<const std::uint8_t> b) : b_(b) {}
  std::uint64_t take(int width) {
    need(static_cast<std::size_t>(width));
    const auto v = get_le(b_, pos_, width);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  std::span<const std::uint8_t> bytes(std::size_t n) {
    need(n);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw InputError("record payload truncated");
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace

Bytes encode_sample(const LabeledSample& sample) {
  Bytes out;
  if (const auto* v = std::get_if<SymptomVector>(&sample.input)) {
    out.push_back(0);
    put_u32(out, static_cast<std::uint32_t>(sample.label));
    put_u32(out, static_cast<std::uint32_t>(v->size()));
    for (float f : *v) {
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32(out, bits);
    }
  } else {
    const auto& img = std::get<Image>(sample.input);
    out.push_back(1);
    put_u32(out, static_cast<std::uint32_t>(sample.label));
    put_u32(out, static_cast<std::uint32_t>(img.height));
    put_u32(out, static_cast<std::uint32_t>(img.width));
    put_u32(out, static_cast<std::uint32_t>(img.channels));
    out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  }
  return out;
}

LabeledSample decode_sample(std::span<const std::uint8_t> payload) {
  Cursor c(payload);
  LabeledSample s;
  const auto modality = c.take(1);
  s.label = static_cast<int>(c.take(4));
  if (modality == 0) {
    const auto n = c.take(4);
    if (n > payload.size() / 4) throw InputError("record payload truncated");
    SymptomVector v(static_cast<std::size_t>(n));
    for (auto& f : v) {
      const auto bits = static_cast<std::uint32_t>(c.take(4));
      std::memcpy(&f, &bits, 4);
    }
    s.input = std::move(v);
  } else if (modality == 1) {
    const auto h = c.take(4), w = c.take(4), ch = c.take(4);
    if (h == 0 || w == 0 || ch == 0 || h * w * ch > payload.size()) {
      throw InputError("record image dimensions do not match payload");
    }
    Image img(static_cast<int>(h), static_cast<int>(w), static_cast<int>(ch));
    const auto px = c.bytes(img.pixels.size());
    std::copy(px.begin(), px.end(), img.pixels.begin());
    s.input = std::move(img);
  } else {
    throw InputError("unknown record modality " + std::to_string(modality));
  }
  if (!c.at_end()) throw InputError("trailing bytes in record payload");
  return s;
}

void write_records(std::span<const LabeledSample> samples, const std::filesystem::path& path) {
  Bytes out;
  for (const auto& s : samples) {
    const auto payload = encode_sample(s);
    put_u64(out, payload.size());
    out.insert(out.end(), payload.begin(), payload.end());
    put_u32(out, crc32(payload));
  }
  write_file(path, out);
}

RecordReader::RecordReader(const std::filesystem::path& path, OnCorrupt policy) : policy_(policy) {
  fd_ = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
  if (fd_ < 0) throw IoError("cannot open " + path.string() + ": " + std::strerror(errno));
  struct stat st {};
  if (::fstat(fd_, &st) != 0) {
    ::close(fd_);
    throw IoError("cannot stat " + path.string());
  }
  file_size_ = static_cast<std::uint64_t>(st.st_size);
}

RecordReader::~RecordReader() {
  if (fd_ >= 0) ::close(fd_);
}

bool RecordReader::read_at(std::uint64_t offset, std::span<std::uint8_t> out) {
  if (offset + out.size() > file_size_) return false;
  std::size_t done = 0;
  while (done < out.size()) {
    const auto n = ::pread(fd_, out.data() + done, out.size() - done,
                           static_cast<off_t>(offset + done));
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) throw IoError(std::string("record read failed: ") + std::strerror(errno));
    done += static_cast<std::size_t>(n);
  }
  high_water_ = std::max(high_water_, offset + out.size());
  return true;
}

void RecordReader::fail(std::uint64_t offset, std::string message) {
  RecordFailure f{index_, offset, std::move(message)};
  if (policy_ == OnCorrupt::fail) {
    done_ = true;
    throw IntegrityError({Violation{f.offset, "", "record " + std::to_string(f.index) + ": " + f.message}});
  }
  failures_.push_back(std::move(f));
}

std::optional<LabeledSample> RecordReader::next() {
  while (!done_ && pos_ < file_size_) {
    const std::uint64_t start = pos_;
    std::uint8_t head[8];
    if (!read_at(start, head)) {
      done_ = true;
      fail(start, "truncated length prefix");
      return std::nullopt;
    }
    const std::uint64_t len = get_le(head, 0, 8);
    if (len > file_size_ - start - 8 || file_size_ - start - 8 - len < 4) {
      done_ = true;
      fail(start, "length " + std::to_string(len) + " runs past end of file");
      return std::nullopt;
    }
    Bytes payload(static_cast<std::size_t>(len));
    std::uint8_t tail[4];
    read_at(start + 8, payload);
    read_at(start + 8 + len, tail);
    pos_ = start + 8 + len + 4;
    const auto stored = static_cast<std::uint32_t>(get_le(tail, 0, 4));
    if (stored != crc32(payload)) {
      fail(start, "checksum mismatch");
      ++index_;
      continue;
    }
    try {
      auto sample = decode_sample(payload);
      ++index_;
      return sample;
    } catch (const InputError& e) {
      fail(start, e.what());
      ++index_;
    }
  }
  return std::nullopt;
}

RecordSet read_records(const std::filesystem::path& path, OnCorrupt policy) {
  RecordReader reader(path, policy);
  RecordSet out;
  while (auto s = reader.next()) out.samples.push_back(std::move(*s));
  out.failures = reader.failures();
  return out;
}

}  // namespace mededge
