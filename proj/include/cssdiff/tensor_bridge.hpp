#pragma once

#include <torch/torch.h>

#include "cssdiff/volume.hpp"

namespace cssdiff {

// Volume -> (Z, 1, Y, X) float tensor (copy).
torch::Tensor to_slices(const Volume& v);

// (Z, 1, Y, X) or (Z, Y, X) tensor -> Volume carrying the given metadata.
Volume from_slices(const torch::Tensor& slices, const std::array<double, 3>& spacing_mm, double field_strength_T);

}  // namespace cssdiff
