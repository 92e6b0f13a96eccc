#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "mededge/tensor.hpp"

namespace mededge {

/// 8-bit interleaved image, row-major HWC.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int h, int w, int c = 3, std::uint8_t fill = 0)
      : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h * w * c), fill) {}

  std::uint8_t& at(int y, int x, int c) {
    return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
  }
  std::uint8_t at(int y, int x, int c) const {
    return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
  }
  friend bool operator==(const Image&, const Image&) = default;
};

/// Pixel values scaled to [0, 1], in HWC order; the network input encoding.
std::vector<float> image_features(const Image& image);

// Augmentations. Rotation is clockwise about the image centre.
struct Rotate {
  int degrees = 0;  // multiple of 30 in [0, 330]
};
struct GaussianBlur {
  double sigma = 1.0;
};
struct WhiteNoise {
  double amplitude = 8.0;
  std::uint64_t seed = 0;
};
struct Brightness {
  double factor = 1.0;
};
using AugmentOp = std::variant<Rotate, GaussianBlur, WhiteNoise, Brightness>;

Image rotate(const Image& image, int degrees);
Image gaussian_blur(const Image& image, double sigma);
Image white_noise(const Image& image, double amplitude, std::uint64_t seed);
Image adjust_brightness(const Image& image, double factor);
Image apply_op(const Image& image, const AugmentOp& op);

/// One output per op, each applied to the original image.
std::vector<Image> augment_image(const Image& image, std::span<const AugmentOp> ops);

/// Binary PPM (P6, maxval 255).
std::string encode_ppm(const Image& image);
/// Throws InputError on anything that is not a well-formed P6 image.
Image decode_ppm(std::span<const std::uint8_t> bytes);

// Synthetic skin-texture classes.
inline constexpr int kSkinClasses = 26;
const std::vector<std::string>& skin_class_names();
/// Procedural texture for class `cls`: class-specific tint, spot density and
/// stripe frequency, with per-sample jitter drawn from `seed`.
Image render_skin_image(int cls, std::uint64_t seed, int size = 32);

}  // namespace mededge
