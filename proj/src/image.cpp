#include "mededge/image.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <numbers>

#include "mededge/random.hpp"

namespace mededge {

namespace {

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0));
}

}  // namespace

std::vector<float> image_features(const Image& image) {
  std::vector<float> out(image.pixels.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(image.pixels[i]) / 255.0f;
  return out;
}

Image rotate(const Image& in, int degrees) {
  if (degrees < 0 || degrees >= 360 || degrees % 30 != 0) {
    throw InputError("rotation must be a multiple of 30 degrees in [0, 330], got " +
                     std::to_string(degrees));
  }
  const int H = in.height, W = in.width, C = in.channels;
  switch (degrees) {
    case 0:
      return in;
    case 90: {
      Image out(W, H, C);
      for (int i = 0; i < W; ++i)
        for (int j = 0; j < H; ++j)
          for (int c = 0; c < C; ++c) out.at(i, j, c) = in.at(H - 1 - j, i, c);
      return out;
    }
    case 180: {
      Image out(H, W, C);
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j)
          for (int c = 0; c < C; ++c) out.at(i, j, c) = in.at(H - 1 - i, W - 1 - j, c);
      return out;
    }
    case 270: {
      Image out(W, H, C);
      for (int i = 0; i < W; ++i)
        for (int j = 0; j < H; ++j)
          for (int c = 0; c < C; ++c) out.at(i, j, c) = in.at(j, W - 1 - i, c);
      return out;
    }
    default:
      break;
  }
  // Bilinear resampling; samples falling outside the source read as zero.
  const double theta = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  const double cy = (H - 1) / 2.0, cx = (W - 1) / 2.0;
  Image out(H, W, C);
  auto sample = [&](int y, int x, int c) -> double {
    if (y < 0 || y >= H || x < 0 || x >= W) return 0.0;
    return in.at(y, x, c);
  };
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const double dy = y - cy, dx = x - cx;
      const double sy = cy - dx * sn + dy * cs;
      const double sx = cx + dx * cs + dy * sn;
      const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
      const double fy = sy - y0, fx = sx - x0;
      for (int c = 0; c < C; ++c) {
        const double v = (1 - fy) * ((1 - fx) * sample(y0, x0, c) + fx * sample(y0, x0 + 1, c)) +
                         fy * ((1 - fx) * sample(y0 + 1, x0, c) + fx * sample(y0 + 1, x0 + 1, c));
        out.at(y, x, c) = to_byte(v);
      }
    }
  }
  return out;
}

Image gaussian_blur(const Image& in, double sigma) {
  if (!(sigma > 0.0)) throw InputError("blur sigma must be positive");
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (int k = -radius; k <= radius; ++k) {
    kernel[static_cast<std::size_t>(k + radius)] = std::exp(-(k * k) / (2.0 * sigma * sigma));
    total += kernel[static_cast<std::size_t>(k + radius)];
  }
  for (auto& w : kernel) w /= total;

  const int H = in.height, W = in.width, C = in.channels;
  std::vector<double> tmp(in.pixels.size());
  auto idx = [&](int y, int x, int c) { return static_cast<std::size_t>((y * W + x) * C + c); };
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) {
          const int xx = std::clamp(x + k, 0, W - 1);
          acc += kernel[static_cast<std::size_t>(k + radius)] * in.at(y, xx, c);
        }
        tmp[idx(y, x, c)] = acc;
      }
  Image out(H, W, C);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) {
          const int yy = std::clamp(y + k, 0, H - 1);
          acc += kernel[static_cast<std::size_t>(k + radius)] * tmp[idx(yy, x, c)];
        }
        out.at(y, x, c) = to_byte(acc);
      }
  return out;
}

Image white_noise(const Image& in, double amplitude, std::uint64_t seed) {
  if (!(amplitude >= 0.0)) throw InputError("noise amplitude must be non-negative");
  Rng rng(seed);
  Image out = in;
  for (auto& p : out.pixels) p = to_byte(p + rng.uniform(-amplitude, amplitude));
  return out;
}

Image adjust_brightness(const Image& in, double factor) {
  if (!(factor > 0.0)) throw InputError("brightness factor must be positive");
  Image out = in;
  for (auto& p : out.pixels) p = to_byte(p * factor);
  return out;
}

Image apply_op(const Image& image, const AugmentOp& op) {
  return std::visit(
      [&](const auto& o) -> Image {
        using T = std::decay_t<decltype(o)>;
        if constexpr (std::is_same_v<T, Rotate>) return rotate(image, o.degrees);
        if constexpr (std::is_same_v<T, GaussianBlur>) return gaussian_blur(image, o.sigma);
        if constexpr (std::is_same_v<T, WhiteNoise>) return white_noise(image, o.amplitude, o.seed);
        if constexpr (std::is_same_v<T, Brightness>) return adjust_brightness(image, o.factor);
      },
      op);
}

std::vector<Image> augment_image(const Image& image, std::span<const AugmentOp> ops) {
  std::vector<Image> out;
  out.reserve(ops.size());
  for (const auto& op : ops) out.push_back(apply_op(image, op));
  return out;
}

std::string encode_ppm(const Image& image) {
  if (image.channels != 3) throw InputError("PPM export needs a 3-channel image");
  std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(image.pixels.data()), image.pixels.size());
  return out;
}

Image decode_ppm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&]() -> long {
    skip_space();
    long v = 0;
    std::size_t digits = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos]) && digits < 9) {
      v = v * 10 + (bytes[pos++] - '0');
      ++digits;
    }
    if (digits == 0) throw InputError("expected a binary PPM (P6) image: malformed header");
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') {
    throw InputError("expected a binary PPM (P6) image");
  }
  pos = 2;
  const long width = read_int();
  const long height = read_int();
  const long maxval = read_int();
  if (width <= 0 || height <= 0 || maxval != 255) {
    throw InputError("expected a binary PPM (P6) image with maxval 255");
  }
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) {
    throw InputError("expected a binary PPM (P6) image: malformed header");
  }
  ++pos;
  const auto need = static_cast<std::size_t>(width * height * 3);
  if (bytes.size() - pos != need) {
    throw InputError("PPM pixel data has " + std::to_string(bytes.size() - pos) + " bytes, expected " +
                     std::to_string(need));
  }
  Image img(static_cast<int>(height), static_cast<int>(width), 3);
  std::copy(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end(), img.pixels.begin());
  return img;
}

const std::vector<std::string>& skin_class_names() {
  static const std::vector<std::string> names = {
      "acne",           "actinic_keratosis", "alopecia_areata",   "atopic_dermatitis",
      "basal_cell_carcinoma", "bullous_pemphigoid", "cellulitis", "contact_dermatitis",
      "erythema_multiforme",  "folliculitis",  "herpes_simplex",    "hives",
      "impetigo",       "lichen_planus",     "lupus_rash",        "melanoma",
      "molluscum_contagiosum", "nail_fungus", "pityriasis_rosea",  "psoriasis",
      "rosacea",        "scabies",           "seborrheic_keratosis", "shingles",
      "tinea_corporis", "vitiligo"};
  return names;
}

Image render_skin_image(int cls, std::uint64_t seed, int size) {
  if (cls < 0 || cls >= kSkinClasses) throw InputError("skin class out of range");
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(cls)));
  // Class signature: hue spread around the colour wheel, 3 stripe
  // frequencies and 3 spot densities.
  const double hue = std::fmod(cls * (360.0 / kSkinClasses) * 7.0, 360.0) * std::numbers::pi / 180.0;
  const double tint[3] = {0.5 + 0.5 * std::cos(hue), 0.5 + 0.5 * std::cos(hue - 2.094),
                          0.5 + 0.5 * std::cos(hue + 2.094)};
  const int stripe_cycles = 2 * (cls % 3);
  const int spots = std::array{0, 6, 16}[static_cast<std::size_t>((cls / 3) % 3)];
  const double skin[3] = {200 + rng.uniform(-8, 8), 160 + rng.uniform(-8, 8), 140 + rng.uniform(-8, 8)};
  const double orientation = rng.uniform(0.0, std::numbers::pi);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);

  Image img(size, size, 3);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double u = (x * std::cos(orientation) + y * std::sin(orientation)) / size;
      const double stripe =
          stripe_cycles == 0 ? 0.0 : 0.5 + 0.5 * std::sin(2 * std::numbers::pi * stripe_cycles * u + phase);
      for (int c = 0; c < 3; ++c) {
        const double base = 0.45 * skin[c] + 0.55 * 255.0 * tint[c];
        img.at(y, x, c) = to_byte(base * (1.0 - 0.35 * stripe) + rng.uniform(-6, 6));
      }
    }
  }
  for (int s = 0; s < spots; ++s) {
    const double sy = rng.uniform(0, size), sx = rng.uniform(0, size), r = rng.uniform(1.0, 2.5);
    for (int y = std::max(0, static_cast<int>(sy - r)); y < std::min(size, static_cast<int>(sy + r) + 1); ++y)
      for (int x = std::max(0, static_cast<int>(sx - r)); x < std::min(size, static_cast<int>(sx + r) + 1); ++x)
        if ((y - sy) * (y - sy) + (x - sx) * (x - sx) <= r * r)
          for (int c = 0; c < 3; ++c) img.at(y, x, c) = to_byte(0.35 * img.at(y, x, c));
  }
  return img;
}

}  // namespace mededge
