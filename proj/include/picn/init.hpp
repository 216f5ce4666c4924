#pragma once

#include "picn/rng.hpp"
#include "picn/tensor.hpp"

namespace picn {

// Orthogonal initialisation: the tensor is viewed as a matrix
// (shape[0], product of the remaining extents), filled from the Q factor of a
// standard-normal matrix with the signs fixed so that diag(R) > 0, scaled by
// gain. Rows are orthonormal when the matrix is wide, columns when it is tall.
template <typename T>
Tensor<T> orthogonal_init(const Shape& shape, Rng& rng, double gain = 1.0);

}  // namespace picn
