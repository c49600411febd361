#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace cssdiff {

constexpr double kPsnrCap = 100.0;
constexpr uint64_t kPerceptualSeed = 0x9E3779B1C55D1FFull;

// Images may be (H, W), (N, H, W) or (N, 1, H, W); 2-D metrics treat the
// leading dimension as a stack of slices.
double psnr(const torch::Tensor& a, const torch::Tensor& b, double data_range = 1.0);

struct SsimOptions {
  int window = 7;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = 1.0;
};

// Normalised 2-D Gaussian window (double).
torch::Tensor gaussian_window(int size, double sigma);

// Differentiable mean SSIM over all valid window positions of every slice.
// Computed in double precision; returns a 0-dim double tensor.
torch::Tensor ssim_tensor(const torch::Tensor& a, const torch::Tensor& b, const SsimOptions& opts = {});
double ssim(const torch::Tensor& a, const torch::Tensor& b, const SsimOptions& opts = {});

// Fixed random multi-scale conv features, softly unit-normalised per pixel,
// squared-L2 compared and averaged. A deterministic stand-in for learned
// perceptual metrics; its values are not comparable to published LPIPS.
double perceptual_distance(const torch::Tensor& a, const torch::Tensor& b, uint64_t seed = kPerceptualSeed);

struct LmiResult {
  std::vector<double> window_mi;  // nats, one per window
  double mean = 0.0;
};

// Joint-histogram mutual information over a non-overlapping window tiling.
// Intensities are binned over [0, 1].
LmiResult local_mutual_information(const torch::Tensor& a, const torch::Tensor& b, int window = 16, int bins = 16);

struct SampleMetrics {
  std::string sample_id;
  double psnr_db = 0.0;
  double ssim = 0.0;
  double perceptual = 0.0;
  double lmi_cross = 0.0;
};

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1); 0 for n < 2
};

struct MetricReport {
  std::vector<SampleMetrics> per_sample;
  std::map<std::string, MetricSummary> aggregate;
  // Paired (prediction - low-field input) differences against the same reference.
  std::map<std::string, MetricSummary> paired_vs_lf;
  std::vector<std::string> missing;
  std::string config_hash;

  nlohmann::json to_json() const;
  static MetricReport from_json(const nlohmann::json& j);
  std::string to_csv() const;
};

SampleMetrics compute_sample_metrics(const std::string& id, const torch::Tensor& pred, const torch::Tensor& ref);
MetricSummary summarize(const std::vector<double>& values);
void fill_aggregate(MetricReport& report);
std::string metric_config_hash();

// Prediction files are <pred_dir>/<id>_syn.f32. Writes metrics.json and
// metrics.csv to out_dir (default: pred_dir). Throws IoError listing every
// missing id after writing the partial report.
MetricReport evaluate_dataset(const std::filesystem::path& pred_dir, const std::filesystem::path& manifest_dir,
                              const std::filesystem::path& out_dir = {});

}  // namespace cssdiff
