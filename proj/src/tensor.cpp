#include "mededge/tensor.hpp"

#include <numeric>
#include <sstream>

namespace mededge {

std::string describe(const std::vector<Violation>& violations) {
  std::ostringstream out;
  out << violations.size() << " integrity violation(s)";
  for (const auto& v : violations) {
    out << "; @" << v.offset;
    if (!v.tensor.empty()) out << " [" << v.tensor << "]";
    out << ": " << v.message;
  }
  return out.str();
}

std::size_t element_count(std::span<const std::int64_t> shape) {
  std::size_t n = 1;
  for (auto d : shape) {
    if (d <= 0) throw DimensionError("tensor dimensions must be positive");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor Tensor::zeros(std::vector<std::int64_t> shape) {
  const auto n = element_count(shape);
  return from_values(std::move(shape), std::vector<float>(n, 0.0f));
}

Tensor Tensor::from_values(std::vector<std::int64_t> shape, std::vector<float> values) {
  if (shape.empty()) throw DimensionError("tensor rank must be at least 1");
  if (element_count(shape) != values.size()) {
    throw DimensionError("tensor shape does not match element count");
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.dtype_ = DType::f32;
  t.f32_ = std::move(values);
  return t;
}

Tensor Tensor::quantized(std::vector<std::int64_t> shape, std::vector<std::uint8_t> codes,
                         QuantParams params) {
  if (shape.empty()) throw DimensionError("tensor rank must be at least 1");
  if (element_count(shape) != codes.size()) {
    throw DimensionError("tensor shape does not match element count");
  }
  if (!(params.scale >= 0.0f) || params.zero_point < 0 || params.zero_point > 255) {
    throw NumericError("q8 tensor needs scale >= 0 and zero_point in [0, 255]");
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.dtype_ = DType::q8;
  t.q8_ = std::move(codes);
  t.quant_ = params;
  return t;
}

std::size_t Tensor::size() const noexcept {
  if (shape_.empty()) return 0;
  return dtype_ == DType::f32 ? f32_.size() : q8_.size();
}

std::size_t Tensor::byte_size() const noexcept {
  return dtype_ == DType::f32 ? f32_.size() * sizeof(float) : q8_.size();
}

std::span<const float> Tensor::values() const {
  if (dtype_ != DType::f32) throw DimensionError("values() requires an f32 tensor");
  return f32_;
}

std::span<float> Tensor::values() {
  if (dtype_ != DType::f32) throw DimensionError("values() requires an f32 tensor");
  return f32_;
}

std::span<const std::uint8_t> Tensor::codes() const {
  if (dtype_ != DType::q8) throw DimensionError("codes() requires a q8 tensor");
  return q8_;
}

const QuantParams& Tensor::quant() const {
  if (dtype_ != DType::q8) throw DimensionError("quant() requires a q8 tensor");
  return quant_;
}

Eigen::Index Tensor::cols() const noexcept {
  return shape_.empty() ? 0 : static_cast<Eigen::Index>(shape_.back());
}

Eigen::Index Tensor::rows() const noexcept {
  if (shape_.empty()) return 0;
  return static_cast<Eigen::Index>(size()) / cols();
}

ConstMatrixMap<float> Tensor::matrix() const {
  const auto v = values();
  return ConstMatrixMap<float>(v.data(), rows(), cols());
}

Eigen::Map<MatrixX<float>> Tensor::matrix() {
  auto v = values();
  return Eigen::Map<MatrixX<float>>(v.data(), rows(), cols());
}

std::string Tensor::shape_string() const {
  std::string s = "[";
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape_[i]);
  }
  return s + "]";
}

}  // namespace mededge
