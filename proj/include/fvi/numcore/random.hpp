#pragma once

#include <vector>

#include "fvi/numcore/rng.hpp"
#include "fvi/numcore/tensor.hpp"

namespace fvi {

/// i.i.d. N(0, 1) constant tensor; deterministic given the generator state.
inline Tensor standard_normal(Shape shape, Rng& rng) {
  std::vector<double> v(numel(shape));
  rng.fill_normal(v);
  return Tensor::constant(std::move(shape), std::move(v));
}

}  // namespace fvi
