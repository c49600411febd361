#include "cssdiff/tensor_bridge.hpp"

#include "cssdiff/errors.hpp"

namespace cssdiff {

torch::Tensor to_slices(const Volume& v) {
  auto t = torch::from_blob(const_cast<float*>(v.data.data()), {v.shape.z, 1, v.shape.y, v.shape.x}, torch::kFloat32);
  return t.clone();
}

Volume from_slices(const torch::Tensor& slices, const std::array<double, 3>& spacing_mm, double field_strength_T) {
  auto t = slices.detach().to(torch::kFloat32).contiguous();
  if (t.dim() == 4) {
    if (t.size(1) != 1) throw ShapeError("expected single-channel slices");
    t = t.squeeze(1);
  }
  if (t.dim() != 3) throw ShapeError("expected a (Z, Y, X) stack");
  Volume v({t.size(0), t.size(1), t.size(2)}, spacing_mm, field_strength_T);
  std::memcpy(v.data.data(), t.data_ptr<float>(), v.data.size() * sizeof(float));
  return v;
}

}  // namespace cssdiff
