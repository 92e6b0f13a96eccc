#pragma once

#include <Eigen/Core>

#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include "mededge/tensor.hpp"

// Layer kernels over sample batches. A batch is a row-major matrix with one
// sample per row; image activations are flattened height-major, channel-last
// (HWC), so the same buffer also reads as an (N*H*W) x C matrix for
// per-channel statistics.
namespace mededge {

struct Shape3 {
  int height = 1;
  int width = 1;
  int channels = 1;
  int size() const noexcept { return height * width * channels; }
  int pixels() const noexcept { return height * width; }
  friend bool operator==(const Shape3&, const Shape3&) = default;
};

std::string to_string(const Shape3& s);

template <typename Derived>
using Scalar_t = typename Eigen::internal::traits<Derived>::Scalar;

/// out = bias + input * weight, row by row.
template <typename DX, typename DW, typename DB>
MatrixX<Scalar_t<DX>> dense_forward(const Eigen::MatrixBase<DX>& input,
                                    const Eigen::MatrixBase<DW>& weight,
                                    const Eigen::MatrixBase<DB>& bias,
                                    std::string_view layer = "dense") {
  using S = Scalar_t<DX>;
  if (input.cols() != weight.rows() || bias.size() != weight.cols()) {
    throw DimensionError(std::string(layer) + ": dense expects input width " +
                         std::to_string(weight.rows()) + " and bias width " +
                         std::to_string(weight.cols()) + ", got " + std::to_string(input.cols()) +
                         " and " + std::to_string(bias.size()));
  }
  MatrixX<S> out = input * weight;
  out.rowwise() += bias.reshaped().transpose();
  return out;
}

template <typename Derived>
void check_finite(const Eigen::MatrixBase<Derived>& m, std::string_view what) {
  if (!m.allFinite()) throw NumericError(std::string(what) + ": non-finite value");
}

/// Row-wise numerically stable softmax.
template <typename Derived>
MatrixX<Scalar_t<Derived>> softmax(const Eigen::MatrixBase<Derived>& logits) {
  using S = Scalar_t<Derived>;
  if (logits.cols() < 1) throw DimensionError("softmax: needs at least one class");
  check_finite(logits, "softmax");
  MatrixX<S> out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const S peak = logits.row(r).maxCoeff();
    out.row(r) = (logits.row(r).array() - peak).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

template <typename Derived>
MatrixX<Scalar_t<Derived>> relu(const Eigen::MatrixBase<Derived>& x) {
  return x.cwiseMax(Scalar_t<Derived>(0));
}

inline int same_padding(int kernel) { return kernel / 2; }

inline Shape3 conv_output_shape(const Shape3& in, int kernel, int stride, int out_channels) {
  const int pad = same_padding(kernel);
  return {(in.height + 2 * pad - kernel) / stride + 1, (in.width + 2 * pad - kernel) / stride + 1,
          out_channels};
}

inline Shape3 pool_output_shape(const Shape3& in, int kernel, int stride) {
  return {(in.height - kernel) / stride + 1, (in.width - kernel) / stride + 1, in.channels};
}

/// Gathers the receptive fields of one sample into an (Hout*Wout) x (k*k*C) matrix.
template <typename S>
void im2col(const S* sample, const Shape3& in, int kernel, int stride, const Shape3& out,
            MatrixX<S>& col) {
  const int pad = same_padding(kernel);
  col.setZero(out.pixels(), kernel * kernel * in.channels);
  for (int oy = 0; oy < out.height; ++oy) {
    for (int ox = 0; ox < out.width; ++ox) {
      S* dst = col.row(oy * out.width + ox).data();
      for (int ky = 0; ky < kernel; ++ky) {
        const int iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= in.height) continue;
        for (int kx = 0; kx < kernel; ++kx) {
          const int ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= in.width) continue;
          const S* src = sample + (static_cast<std::ptrdiff_t>(iy) * in.width + ix) * in.channels;
          std::copy(src, src + in.channels, dst + (ky * kernel + kx) * in.channels);
        }
      }
    }
  }
}

template <typename S>
void col2im_add(const MatrixX<S>& col, const Shape3& in, int kernel, int stride, const Shape3& out,
                S* sample) {
  const int pad = same_padding(kernel);
  for (int oy = 0; oy < out.height; ++oy) {
    for (int ox = 0; ox < out.width; ++ox) {
      const S* src = col.row(oy * out.width + ox).data();
      for (int ky = 0; ky < kernel; ++ky) {
        const int iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= in.height) continue;
        for (int kx = 0; kx < kernel; ++kx) {
          const int ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= in.width) continue;
          S* dst = sample + (static_cast<std::ptrdiff_t>(iy) * in.width + ix) * in.channels;
          const S* s = src + (ky * kernel + kx) * in.channels;
          for (int c = 0; c < in.channels; ++c) dst[c] += s[c];
        }
      }
    }
  }
}

/// Same-padded 2-D convolution. weight is (k*k*C_in) x C_out, bias has C_out entries.
template <typename S, typename DW, typename DB>
MatrixX<S> conv2d_forward(const MatrixX<S>& input, const Shape3& in,
                          const Eigen::MatrixBase<DW>& weight, const Eigen::MatrixBase<DB>& bias,
                          int kernel, int stride, std::string_view layer = "conv2d") {
  if (input.cols() != in.size() || weight.rows() != kernel * kernel * in.channels ||
      bias.size() != weight.cols()) {
    throw DimensionError(std::string(layer) + ": conv2d operands do not match input " +
                         to_string(in));
  }
  const Shape3 out = conv_output_shape(in, kernel, stride, static_cast<int>(weight.cols()));
  MatrixX<S> result(input.rows(), out.size());
  MatrixX<S> col;
  for (Eigen::Index n = 0; n < input.rows(); ++n) {
    im2col(input.row(n).data(), in, kernel, stride, out, col);
    Eigen::Map<MatrixX<S>> y(result.row(n).data(), out.pixels(), out.channels);
    y.noalias() = col * weight;
    y.rowwise() += bias.reshaped().transpose();
  }
  return result;
}

/// Max pooling without padding. argmax receives, per output element, the
/// flat index of the winning input element within its sample.
template <typename S>
MatrixX<S> maxpool_forward(const MatrixX<S>& input, const Shape3& in, int kernel, int stride,
                           std::vector<int>* argmax = nullptr) {
  if (input.cols() != in.size()) throw DimensionError("maxpool: input does not match " + to_string(in));
  const Shape3 out = pool_output_shape(in, kernel, stride);
  MatrixX<S> result(input.rows(), out.size());
  if (argmax) argmax->assign(static_cast<std::size_t>(input.rows() * out.size()), 0);
  for (Eigen::Index n = 0; n < input.rows(); ++n) {
    const S* x = input.row(n).data();
    for (int oy = 0; oy < out.height; ++oy) {
      for (int ox = 0; ox < out.width; ++ox) {
        for (int c = 0; c < in.channels; ++c) {
          int best = ((oy * stride) * in.width + ox * stride) * in.channels + c;
          for (int ky = 0; ky < kernel; ++ky) {
            for (int kx = 0; kx < kernel; ++kx) {
              const int idx = ((oy * stride + ky) * in.width + ox * stride + kx) * in.channels + c;
              if (x[idx] > x[best]) best = idx;
            }
          }
          const int o = (oy * out.width + ox) * out.channels + c;
          result(n, o) = x[best];
          if (argmax) (*argmax)[static_cast<std::size_t>(n * out.size() + o)] = best;
        }
      }
    }
  }
  return result;
}

/// Per-channel affine normalisation with the given statistics.
template <typename S, typename DG, typename DB, typename DM, typename DV>
MatrixX<S> batch_norm_apply(const MatrixX<S>& input, int channels, const Eigen::MatrixBase<DG>& gamma,
                            const Eigen::MatrixBase<DB>& beta, const Eigen::MatrixBase<DM>& mean,
                            const Eigen::MatrixBase<DV>& var, S epsilon) {
  if (input.cols() % channels != 0 || gamma.size() != channels || beta.size() != channels ||
      mean.size() != channels || var.size() != channels) {
    throw DimensionError("batch_norm: parameter widths do not match channel count");
  }
  MatrixX<S> out = input;
  Eigen::Map<MatrixX<S>> rows(out.data(), input.rows() * (input.cols() / channels), channels);
  const RowVectorX<S> inv_std =
      (var.reshaped().transpose().array() + epsilon).rsqrt().matrix();
  const RowVectorX<S> scale = gamma.reshaped().transpose().cwiseProduct(inv_std);
  const RowVectorX<S> shift =
      beta.reshaped().transpose() - mean.reshaped().transpose().cwiseProduct(scale);
  rows.array().rowwise() *= scale.array();
  rows.rowwise() += shift;
  return out;
}

/// Parameters for relu(x + conv2(relu(bn(conv1(x))))).
template <typename S>
struct ResidualBlockParams {
  int kernel = 3;
  MatrixX<S> conv1_weight;
  RowVectorX<S> conv1_bias;
  RowVectorX<S> bn_gamma, bn_beta, bn_mean, bn_var;
  S bn_epsilon = S(0.001);
  MatrixX<S> conv2_weight;
  RowVectorX<S> conv2_bias;
};

/// Identity-shortcut residual block over a batch of HWC samples.
template <typename S>
MatrixX<S> residual_block_forward(const MatrixX<S>& x, const Shape3& shape,
                                  const ResidualBlockParams<S>& p) {
  if (p.conv1_weight.cols() != shape.channels || p.conv2_weight.cols() != shape.channels) {
    throw DimensionError("residual block: residual path must preserve " + to_string(shape));
  }
  MatrixX<S> f = conv2d_forward(x, shape, p.conv1_weight, p.conv1_bias, p.kernel, 1, "residual.conv1");
  f = batch_norm_apply(f, shape.channels, p.bn_gamma, p.bn_beta, p.bn_mean, p.bn_var, p.bn_epsilon);
  f = relu(f);
  f = conv2d_forward(f, shape, p.conv2_weight, p.conv2_bias, p.kernel, 1, "residual.conv2");
  return relu(x + f);
}

/// Convenience form for a single H x W x C tensor.
Tensor residual_block_forward(const Tensor& x, const ResidualBlockParams<float>& p);

}  // namespace mededge
