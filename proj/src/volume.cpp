#include "cssdiff/volume.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "cssdiff/errors.hpp"

namespace cssdiff {

namespace {

uint32_t byteswap32(uint32_t v) {
  return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
}

void to_little_endian(std::vector<float>& values) {
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& f : values) f = std::bit_cast<float>(byteswap32(std::bit_cast<uint32_t>(f)));
  }
}

}  // namespace

Volume::Volume(Shape3 s, std::array<double, 3> spacing, double field, float fill)
    : shape(s), spacing_mm(spacing), field_strength_T(field),
      data(static_cast<size_t>(s.voxels()), fill) {}

std::span<float> Volume::slice(int64_t z) {
  return {data.data() + z * shape.slice_size(), static_cast<size_t>(shape.slice_size())};
}

std::span<const float> Volume::slice(int64_t z) const {
  return {data.data() + z * shape.slice_size(), static_cast<size_t>(shape.slice_size())};
}

void write_raw_f32(const std::filesystem::path& path, const Volume& v) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  std::vector<float> le = v.data;
  to_little_endian(le);
  out.write(reinterpret_cast<const char*>(le.data()), static_cast<std::streamsize>(le.size() * sizeof(float)));
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<float> read_raw_f32(const std::filesystem::path& path, const Shape3& shape) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  std::vector<float> values(static_cast<size_t>(shape.voxels()));
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(float)));
  if (in.gcount() != static_cast<std::streamsize>(values.size() * sizeof(float)))
    throw IoError("truncated volume file: " + path.string());
  to_little_endian(values);
  return values;
}

}  // namespace cssdiff
