#include "picn/init.hpp"

#include <Eigen/Dense>

namespace picn {

template <typename T>
Tensor<T> orthogonal_init(const Shape& shape, Rng& rng, double gain) {
  if (shape.empty()) throw ShapeError("orthogonal_init needs at least one axis");
  for (auto e : shape)
    if (e == 0) throw ShapeError("orthogonal_init on degenerate shape " + shape_str(shape));
  const auto rows = shape[0];
  const auto cols = numel_of(shape) / rows;
  const bool wide = rows < cols;
  const auto tall_rows = wide ? cols : rows;
  const auto tall_cols = wide ? rows : cols;

  Eigen::MatrixXd a(tall_rows, tall_cols);
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) a(i, j) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(tall_rows, tall_cols);
  const Eigen::MatrixXd r = qr.matrixQR().topRows(tall_cols).triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < q.cols(); ++j)
    if (r(j, j) < 0) q.col(j) *= -1.0;

  std::vector<T> values(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j)
      values[i * cols + j] = static_cast<T>(gain * (wide ? q(j, i) : q(i, j)));
  return Tensor<T>(shape, std::move(values));
}

template Tensor<float> orthogonal_init<float>(const Shape&, Rng&, double);
template Tensor<double> orthogonal_init<double>(const Shape&, Rng&, double);

}  // namespace picn
