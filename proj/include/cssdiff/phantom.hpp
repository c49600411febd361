#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "cssdiff/volume.hpp"

namespace cssdiff {

// Low-field degradation knobs. The noise standard deviation follows the
// quadratic SNR law: sigma_lf = base_noise_sigma * (b_high / b_low)^2.
struct DegradationParams {
  double b_low_T = 0.064;
  double b_high_T = 3.0;
  double base_noise_sigma = 2.0e-5;
  std::array<double, 3> blur_fwhm_mm{2.5, 2.5, 2.5};
  double contrast_gamma = 1.2;
  double bias_field_amplitude = 0.2;

  void validate() const;
  double noise_multiplier() const { return (b_high_T / b_low_T) * (b_high_T / b_low_T); }
  double noise_sigma() const { return base_noise_sigma * noise_multiplier(); }

  nlohmann::json to_json() const;
  static DegradationParams from_json(const nlohmann::json& j);
};

struct PairedSample {
  Volume lf;
  Volume hf;
  int slice_shift = 0;
  std::string sample_id;
  uint64_t rng_seed = 0;
};

struct SampleRecord {
  std::string sample_id;
  Shape3 shape;
  std::array<double, 3> spacing_mm{};
  double lf_field_T = 0.0;
  double hf_field_T = 0.0;
  int slice_shift = 0;
  uint64_t rng_seed = 0;

  nlohmann::json to_json() const;
  static SampleRecord from_json(const nlohmann::json& j);
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<SampleRecord> samples;
  nlohmann::json params;

  const SampleRecord& find(const std::string& id) const;
};

Volume generate_phantom(uint64_t seed, Shape3 shape, int n_lesions,
                        std::array<double, 3> spacing_mm = {2.0, 2.0, 2.0});

// Separable Gaussian blur with edge replication; FWHM given in millimetres.
Volume blur_volume(const Volume& v, const std::array<double, 3>& fwhm_mm);

// blur -> bias field -> gamma -> noise -> clamp.
Volume degrade_to_low_field(const Volume& hf, const DegradationParams& p, uint64_t seed);

// out[k] = in[k + shift], out-of-range indices replicated from the nearest edge slice.
Volume inject_slice_shift(const Volume& v, int shift);

struct DatasetSpec {
  int n_samples = 10;
  Shape3 shape{32, 64, 64};
  std::array<double, 3> spacing_mm{2.0, 2.0, 2.0};
  int n_lesions = 2;
  DegradationParams degradation;
  int shift_range = 2;
  uint64_t root_seed = 1;

  nlohmann::json to_json() const;
  static DatasetSpec from_json(const nlohmann::json& j);
};

// Builds one paired sample; make_dataset writes exactly these to disk.
PairedSample make_sample(const DatasetSpec& spec, int index);

DatasetManifest make_dataset(const DatasetSpec& spec, const std::filesystem::path& out_dir);

DatasetManifest load_manifest(const std::filesystem::path& dir);
PairedSample load_sample(const DatasetManifest& manifest, const SampleRecord& record);
std::vector<PairedSample> load_all(const DatasetManifest& manifest);

std::string sample_id_for(int index);

}  // namespace cssdiff
