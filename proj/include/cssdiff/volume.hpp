#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace cssdiff {

// Extent of a volume in (z, y, x) order. x varies fastest in memory.
struct Shape3 {
  int64_t z = 0;
  int64_t y = 0;
  int64_t x = 0;

  int64_t voxels() const { return z * y * x; }
  int64_t slice_size() const { return y * x; }
  bool operator==(const Shape3&) const = default;
};

// A 3-D scalar image with intensities in [0, 1].
struct Volume {
  Shape3 shape;
  std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};
  double field_strength_T = 3.0;
  std::vector<float> data;

  Volume() = default;
  Volume(Shape3 s, std::array<double, 3> spacing, double field, float fill = 0.0f);

  int64_t index(int64_t z, int64_t y, int64_t x) const { return (z * shape.y + y) * shape.x + x; }
  float& at(int64_t z, int64_t y, int64_t x) { return data[static_cast<size_t>(index(z, y, x))]; }
  float at(int64_t z, int64_t y, int64_t x) const { return data[static_cast<size_t>(index(z, y, x))]; }

  std::span<float> slice(int64_t z);
  std::span<const float> slice(int64_t z) const;

  bool same_geometry(const Volume& other) const { return shape == other.shape; }
};

// Raw little-endian float32, C order (z, y, x).
void write_raw_f32(const std::filesystem::path& path, const Volume& v);
std::vector<float> read_raw_f32(const std::filesystem::path& path, const Shape3& shape);

}  // namespace cssdiff
