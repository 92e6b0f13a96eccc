#include "mededge/bundle.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <system_error>

namespace mededge {

static_assert(std::endian::native == std::endian::little,
              "mapped weight blobs are read in place and must be little-endian");

namespace {

constexpr std::uint8_t kMagic[4] = {0x45, 0x4D, 0x45, 0x44};  // "EMED"

class Writer {
 public:
  explicit Writer(Bytes& out) : out_(out) {}
  template <typename T>
  void put(T value) {
    using U = std::make_unsigned_t<T>;
    auto u = static_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
  }
  void put_f32(float v) { put(std::bit_cast<std::uint32_t>(v)); }
  void put_bytes(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }
  void put_text(std::string_view s) {
    out_.insert(out_.end(), reinterpret_cast<const std::uint8_t*>(s.data()),
                reinterpret_cast<const std::uint8_t*>(s.data()) + s.size());
  }
  void pad_to(std::uint64_t size) { out_.resize(size, 0); }

 private:
  Bytes& out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  std::uint64_t pos() const noexcept { return pos_; }
  bool has(std::uint64_t n) const noexcept { return n <= in_.size() && pos_ <= in_.size() - n; }
  template <typename T>
  bool get(T& value) {
    if (!has(sizeof(T))) return false;
    std::make_unsigned_t<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      u |= static_cast<std::make_unsigned_t<T>>(static_cast<std::make_unsigned_t<T>>(in_[pos_ + i]) << (8 * i));
    }
    value = static_cast<T>(u);
    pos_ += sizeof(T);
    return true;
  }
  bool get_f32(float& v) {
    std::uint32_t u = 0;
    if (!get(u)) return false;
    v = std::bit_cast<float>(u);
    return true;
  }
  bool get_text(std::uint64_t n, std::string& s) {
    if (!has(n)) return false;
    s.assign(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return true;
  }

 private:
  std::span<const std::uint8_t> in_;
  std::uint64_t pos_ = 0;
};

std::size_t dtype_width(DType d) { return d == DType::f32 ? sizeof(float) : 1; }

}  // namespace

const TensorEntry* BundleLayout::find(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
    crc = ::crc32(crc, bytes.data() + done, chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, value >>= 4) s[static_cast<std::size_t>(i)] = kDigits[value & 0xF];
  return s;
}

Bytes tensor_payload(const Tensor& t) {
  Bytes out(t.byte_size());
  if (t.dtype() == DType::f32) {
    std::memcpy(out.data(), t.values().data(), out.size());
  } else {
    std::memcpy(out.data(), t.codes().data(), out.size());
  }
  return out;
}

Bytes encode_bundle(std::string_view manifest, std::uint16_t flags,
                    const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
  std::vector<Bytes> payloads;
  payloads.reserve(tensors.size());
  for (const auto& [name, t] : tensors) payloads.push_back(tensor_payload(*t));

  Bytes out;
  Writer w(out);
  w.put_bytes(kMagic);
  w.put(kBundleVersion);
  w.put(flags);
  w.put(static_cast<std::uint64_t>(manifest.size()));
  w.put_text(manifest);
  w.put(static_cast<std::uint32_t>(tensors.size()));
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& [name, t] = tensors[i];
    if (name.size() > 0xFFFF || t->rank() > 0xFF) throw DimensionError("tensor " + name + " cannot be encoded");
    w.put(static_cast<std::uint16_t>(name.size()));
    w.put_text(name);
    w.put(static_cast<std::uint8_t>(t->dtype()));
    w.put(static_cast<std::uint8_t>(t->rank()));
    for (auto d : t->shape()) w.put(static_cast<std::uint32_t>(d));
    const bool q8 = t->dtype() == DType::q8;
    w.put_f32(q8 ? t->quant().scale : 0.0f);
    w.put(q8 ? t->quant().zero_point : std::int32_t{0});
    w.put(offset);
    w.put(static_cast<std::uint64_t>(payloads[i].size()));
    w.put(crc32(payloads[i]));
    offset = align_up(offset + payloads[i].size(), kTensorAlignment);
  }
  const std::uint64_t blob_start = align_up(out.size(), kPageSize);
  w.pad_to(blob_start);
  offset = 0;
  for (const auto& p : payloads) {
    w.pad_to(blob_start + offset);
    w.put_bytes(p);
    offset = align_up(offset + p.size(), kTensorAlignment);
  }
  return out;
}

ParsedBundle parse_bundle(std::span<const std::uint8_t> file, bool check_payloads) {
  ParsedBundle result;
  auto& layout = result.layout;
  auto& bad = result.violations;
  layout.file_size = file.size();
  Reader r(file);
  auto structural = [&](std::string message) {
    bad.push_back({r.pos(), "", std::move(message)});
    return result;
  };

  if (!r.has(4) || std::memcmp(file.data(), kMagic, 4) != 0) return structural("bad magic");
  std::uint8_t skip[4];
  for (auto& b : skip) r.get(b);
  if (!r.get(layout.version) || !r.get(layout.flags)) return structural("truncated header");
  if (layout.version != kBundleVersion) {
    return structural("unsupported version " + std::to_string(layout.version));
  }
  std::uint64_t manifest_len = 0;
  if (!r.get(manifest_len) || !r.get_text(manifest_len, layout.manifest)) {
    return structural("manifest exceeds file");
  }
  std::uint32_t count = 0;
  if (!r.get(count)) return structural("truncated tensor count");

  for (std::uint32_t i = 0; i < count; ++i) {
    TensorEntry e;
    e.table_offset = r.pos();
    std::uint16_t name_len = 0;
    std::uint8_t dtype = 0, rank = 0;
    if (!r.get(name_len) || !r.get_text(name_len, e.name) || !r.get(dtype) || !r.get(rank)) {
      return structural("truncated tensor table");
    }
    if (dtype > 1) return structural("tensor " + e.name + ": unknown dtype " + std::to_string(dtype));
    if (rank == 0) return structural("tensor " + e.name + ": rank 0");
    e.dtype = static_cast<DType>(dtype);
    std::uint64_t elements = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      std::uint32_t dim = 0;
      if (!r.get(dim)) return structural("truncated tensor table");
      if (dim == 0) return structural("tensor " + e.name + ": zero dimension");
      e.shape.push_back(dim);
      elements *= dim;
      if (elements > file.size()) return structural("tensor " + e.name + ": larger than file");
    }
    if (!r.get_f32(e.scale) || !r.get(e.zero_point) || !r.get(e.offset) || !r.get(e.byte_length) ||
        !r.get(e.crc32)) {
      return structural("truncated tensor table");
    }
    if (e.byte_length != elements * dtype_width(e.dtype)) {
      return structural("tensor " + e.name + ": byte length does not match shape");
    }
    if (e.offset > file.size()) {
      return structural("tensor " + e.name + ": offset beyond end of file");
    }
    if (e.offset % kTensorAlignment != 0) {
      return structural("tensor " + e.name + ": offset not 64-byte aligned");
    }
    if (!layout.tensors.empty()) {
      const auto& prev = layout.tensors.back();
      if (e.offset < prev.offset + prev.byte_length) {
        return structural("tensor " + e.name + ": offset overlaps or precedes previous tensor");
      }
    }
    if (e.dtype == DType::q8 && (!(e.scale >= 0.0f) || !std::isfinite(e.scale) ||
                                 e.zero_point < 0 || e.zero_point > 255)) {
      return structural("tensor " + e.name + ": invalid quantisation parameters");
    }
    layout.tensors.push_back(std::move(e));
  }

  const std::uint64_t header_end = r.pos();
  layout.blob_offset = align_up(header_end, kPageSize);
  const std::uint64_t blob_end =
      layout.tensors.empty()
          ? layout.blob_offset
          : layout.blob_offset + layout.tensors.back().offset + layout.tensors.back().byte_length;
  if (blob_end > file.size() || layout.blob_offset > file.size()) {
    bad.push_back({file.size(), "", "file truncated: weight blob ends at " + std::to_string(blob_end)});
    return result;
  }
  if (blob_end != file.size()) {
    bad.push_back({blob_end, "", "trailing bytes after weight blob"});
  }
  layout.blob_size = blob_end - layout.blob_offset;

  auto check_zero = [&](std::uint64_t from, std::uint64_t to, const std::string& after) {
    for (std::uint64_t p = from; p < to; ++p) {
      if (file[p] != 0) {
        bad.push_back({p, after, "non-zero padding byte"});
        return;
      }
    }
  };
  check_zero(header_end, layout.blob_offset, "");
  if (!check_payloads) return result;
  std::uint64_t cursor = layout.blob_offset;
  for (const auto& e : layout.tensors) {
    const std::uint64_t start = layout.blob_offset + e.offset;
    check_zero(cursor, start, e.name);
    const auto crc = crc32(file.subspan(start, e.byte_length));
    if (crc != e.crc32) {
      bad.push_back({start, e.name, "crc32 mismatch (stored " + std::to_string(e.crc32) +
                                        ", computed " + std::to_string(crc) + ")"});
    }
    cursor = start + e.byte_length;
  }
  return result;
}

Tensor read_tensor(std::span<const std::uint8_t> file, const BundleLayout& layout,
                   const TensorEntry& e) {
  const auto* src = file.data() + layout.blob_offset + e.offset;
  const std::size_t n = element_count(e.shape);
  if (e.dtype == DType::f32) {
    std::vector<float> v(n);
    std::memcpy(v.data(), src, n * sizeof(float));
    return Tensor::from_values(e.shape, std::move(v));
  }
  return Tensor::quantized(e.shape, std::vector<std::uint8_t>(src, src + n), {e.scale, e.zero_point});
}

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  Bytes bytes(size);
  if (size && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size))) {
    throw IoError("cannot read " + path.string());
  }
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot create " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " into place: " + ec.message());
}

std::vector<Violation> verify_bundle(const std::filesystem::path& path) {
  const Bytes bytes = read_file(path);
  return parse_bundle(bytes).violations;
}

}  // namespace mededge
