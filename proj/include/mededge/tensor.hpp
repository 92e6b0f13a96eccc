#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mededge/errors.hpp"

namespace mededge {

// Dense storage is row-major throughout so that a flat tensor buffer, a
// mapped bundle region and an Eigen matrix share one layout.
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const MatrixX<Scalar>>;

enum class DType : std::uint8_t { f32 = 0, q8 = 1 };

struct QuantParams {
  float scale = 1.0f;
  std::int32_t zero_point = 0;
  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

/// n-dimensional array holding either f32 values or affine uint8 codes.
///
/// The matrix view folds every leading dimension into rows and keeps the last
/// dimension as columns, so a dense weight [n_in, n_out] maps to an
/// n_in x n_out matrix and a conv kernel [k, k, c_in, c_out] maps to the
/// (k*k*c_in) x c_out im2col operand.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::int64_t> shape);
  static Tensor from_values(std::vector<std::int64_t> shape, std::vector<float> values);
  static Tensor quantized(std::vector<std::int64_t> shape, std::vector<std::uint8_t> codes,
                          QuantParams params);
  template <typename Derived>
  static Tensor from_matrix(const Eigen::MatrixBase<Derived>& m, std::vector<std::int64_t> shape) {
    std::vector<float> values(static_cast<std::size_t>(m.size()));
    Eigen::Map<MatrixX<float>>(values.data(), m.rows(), m.cols()) = m.template cast<float>();
    return from_values(std::move(shape), std::move(values));
  }

  const std::vector<std::int64_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  DType dtype() const noexcept { return dtype_; }
  std::size_t size() const noexcept;
  bool empty() const noexcept { return shape_.empty(); }
  std::size_t byte_size() const noexcept;

  std::span<const float> values() const;
  std::span<float> values();
  std::span<const std::uint8_t> codes() const;
  const QuantParams& quant() const;

  Eigen::Index rows() const noexcept;
  Eigen::Index cols() const noexcept;
  ConstMatrixMap<float> matrix() const;
  Eigen::Map<MatrixX<float>> matrix();

  std::string shape_string() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::int64_t> shape_;
  DType dtype_ = DType::f32;
  std::vector<float> f32_;
  std::vector<std::uint8_t> q8_;
  QuantParams quant_{};
};

std::size_t element_count(std::span<const std::int64_t> shape);

}  // namespace mededge

namespace mededge {

/// x = scale * (q - zero_point), written into a matrix shaped like t.matrix().
template <typename S>
void dequantize_into(const Tensor& t, MatrixX<S>& out) {
  const auto codes = t.codes();
  const auto& q = t.quant();
  out.resize(t.rows(), t.cols());
  S* dst = out.data();
  const S scale = static_cast<S>(q.scale);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    dst[i] = scale * static_cast<S>(static_cast<int>(codes[i]) - q.zero_point);
  }
}

}  // namespace mededge
