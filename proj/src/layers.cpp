#include "mededge/layers.hpp"

namespace mededge {

std::string to_string(const Shape3& s) {
  return std::to_string(s.height) + "x" + std::to_string(s.width) + "x" + std::to_string(s.channels);
}

Tensor residual_block_forward(const Tensor& x, const ResidualBlockParams<float>& p) {
  if (x.rank() != 3) throw DimensionError("residual block: expects an H x W x C tensor");
  const Shape3 shape{static_cast<int>(x.shape()[0]), static_cast<int>(x.shape()[1]),
                     static_cast<int>(x.shape()[2])};
  MatrixX<float> batch = Eigen::Map<const MatrixX<float>>(x.values().data(), 1, shape.size());
  MatrixX<float> y = residual_block_forward(batch, shape, p);
  return Tensor::from_matrix(y, x.shape());
}

}  // namespace mededge
