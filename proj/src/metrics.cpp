#include "cssdiff/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "cssdiff/errors.hpp"
#include "cssdiff/phantom.hpp"
#include "cssdiff/tensor_bridge.hpp"

namespace cssdiff {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

torch::Tensor as_stack(const torch::Tensor& x) {
  if (x.dim() == 2) return x.unsqueeze(0).unsqueeze(0);
  if (x.dim() == 3) return x.unsqueeze(1);
  if (x.dim() == 4 && x.size(1) == 1) return x;
  throw ShapeError("expected (H, W), (N, H, W) or (N, 1, H, W) images");
}

void check_pair(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (!a.sizes().equals(b.sizes())) throw ShapeError(std::string(what) + ": shape mismatch");
}

constexpr int kPerceptualScales = 3;
constexpr int kPerceptualFilters = 8;
constexpr double kPerceptualSoftness = 0.05;

std::vector<torch::Tensor> perceptual_filters(uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<torch::Tensor> filters;
  for (int s = 0; s < kPerceptualScales; ++s) {
    auto w = torch::empty({kPerceptualFilters, 1, 3, 3}, torch::kDouble);
    auto acc = w.accessor<double, 4>();
    for (int f = 0; f < kPerceptualFilters; ++f)
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) acc[f][0][i][j] = n01(rng) / 3.0;
    filters.push_back(w);
  }
  return filters;
}

}  // namespace

double psnr(const torch::Tensor& a, const torch::Tensor& b, double data_range) {
  check_pair(a, b, "psnr");
  const double mse = (a.to(torch::kDouble) - b.to(torch::kDouble)).pow(2).mean().item<double>();
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(data_range * data_range / mse));
}

torch::Tensor gaussian_window(int size, double sigma) {
  auto w = torch::empty({size, size}, torch::kDouble);
  auto acc = w.accessor<double, 2>();
  const double c = (size - 1) / 2.0;
  double sum = 0.0;
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) {
      acc[i][j] = std::exp(-((i - c) * (i - c) + (j - c) * (j - c)) / (2.0 * sigma * sigma));
      sum += acc[i][j];
    }
  return w / sum;
}

torch::Tensor ssim_tensor(const torch::Tensor& a_in, const torch::Tensor& b_in, const SsimOptions& o) {
  check_pair(a_in, b_in, "ssim");
  const auto a = as_stack(a_in).to(torch::kDouble);
  const auto b = as_stack(b_in).to(torch::kDouble);
  if (a.size(2) < o.window || a.size(3) < o.window)
    throw ParameterError("image smaller than the SSIM window");
  const auto w = gaussian_window(o.window, o.sigma).view({1, 1, o.window, o.window});
  auto filt = [&](const torch::Tensor& t) { return torch::conv2d(t, w); };
  const auto mu_a = filt(a), mu_b = filt(b);
  const auto var_a = filt(a * a) - mu_a * mu_a;
  const auto var_b = filt(b * b) - mu_b * mu_b;
  const auto cov = filt(a * b) - mu_a * mu_b;
  const double c1 = std::pow(o.k1 * o.data_range, 2);
  const double c2 = std::pow(o.k2 * o.data_range, 2);
  const auto map = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) /
                   ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
  return map.mean();
}

double ssim(const torch::Tensor& a, const torch::Tensor& b, const SsimOptions& opts) {
  torch::NoGradGuard guard;
  return ssim_tensor(a, b, opts).item<double>();
}

double perceptual_distance(const torch::Tensor& a_in, const torch::Tensor& b_in, uint64_t seed) {
  check_pair(a_in, b_in, "perceptual_distance");
  torch::NoGradGuard guard;
  auto a = as_stack(a_in).to(torch::kDouble);
  auto b = as_stack(b_in).to(torch::kDouble);
  const auto filters = perceptual_filters(seed);
  double total = 0.0;
  for (int s = 0; s < kPerceptualScales; ++s) {
    if (s > 0) {
      if (a.size(2) < 2 || a.size(3) < 2) break;
      a = torch::avg_pool2d(a, 2);
      b = torch::avg_pool2d(b, 2);
    }
    auto feat = [&](const torch::Tensor& x) {
      const auto f = torch::relu(torch::conv2d(x, filters[s], {}, 1, 1));
      return f / (f.pow(2).sum(1, true) + kPerceptualSoftness * kPerceptualSoftness).sqrt();
    };
    total += (feat(a) - feat(b)).pow(2).sum(1).mean().item<double>();
  }
  return total / kPerceptualScales;
}

LmiResult local_mutual_information(const torch::Tensor& a_in, const torch::Tensor& b_in, int window, int bins) {
  check_pair(a_in, b_in, "local_mutual_information");
  if (window < 1 || bins < 2) throw ParameterError("LMI needs window >= 1 and bins >= 2");
  const auto a = as_stack(a_in).to(torch::kDouble).contiguous();
  const auto b = as_stack(b_in).to(torch::kDouble).contiguous();
  const int64_t n = a.size(0), h = a.size(2), w = a.size(3);
  if (h < window || w < window) throw ParameterError("image smaller than the LMI window");
  const auto pa = a.accessor<double, 4>();
  const auto pb = b.accessor<double, 4>();
  auto bin_of = [bins](double v) { return std::clamp(static_cast<int>(v * bins), 0, bins - 1); };

  LmiResult r;
  std::vector<double> joint(static_cast<size_t>(bins * bins));
  std::vector<double> ma(bins), mb(bins);
  for (int64_t s = 0; s < n; ++s)
    for (int64_t y0 = 0; y0 + window <= h; y0 += window)
      for (int64_t x0 = 0; x0 + window <= w; x0 += window) {
        std::fill(joint.begin(), joint.end(), 0.0);
        std::fill(ma.begin(), ma.end(), 0.0);
        std::fill(mb.begin(), mb.end(), 0.0);
        for (int64_t y = y0; y < y0 + window; ++y)
          for (int64_t x = x0; x < x0 + window; ++x) {
            const int i = bin_of(pa[s][0][y][x]);
            const int j = bin_of(pb[s][0][y][x]);
            joint[i * bins + j] += 1.0;
            ma[i] += 1.0;
            mb[j] += 1.0;
          }
        const double total = static_cast<double>(window) * window;
        double mi = 0.0;
        for (int i = 0; i < bins; ++i)
          for (int j = 0; j < bins; ++j) {
            const double c = joint[i * bins + j];
            if (c > 0.0) mi += (c / total) * std::log(c * total / (ma[i] * mb[j]));
          }
        r.window_mi.push_back(std::max(0.0, mi));
      }
  double sum = 0.0;
  for (double v : r.window_mi) sum += v;
  r.mean = r.window_mi.empty() ? 0.0 : sum / r.window_mi.size();
  return r;
}

SampleMetrics compute_sample_metrics(const std::string& id, const torch::Tensor& pred, const torch::Tensor& ref) {
  SampleMetrics m;
  m.sample_id = id;
  m.psnr_db = psnr(pred, ref);
  m.ssim = ssim(pred, ref);
  m.perceptual = perceptual_distance(pred, ref);
  m.lmi_cross = local_mutual_information(pred, ref).mean;
  return m;
}

MetricSummary summarize(const std::vector<double>& values) {
  MetricSummary s;
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / values.size();
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / (values.size() - 1));
  }
  return s;
}

namespace {

std::map<std::string, std::vector<double>> columns(const std::vector<SampleMetrics>& rows) {
  std::map<std::string, std::vector<double>> c;
  for (const auto& r : rows) {
    c["psnr_db"].push_back(r.psnr_db);
    c["ssim"].push_back(r.ssim);
    c["perceptual"].push_back(r.perceptual);
    c["lmi_cross"].push_back(r.lmi_cross);
  }
  return c;
}

json summary_json(const std::map<std::string, MetricSummary>& m) {
  json j = json::object();
  for (const auto& [k, v] : m) j[k] = {{"mean", v.mean}, {"std", v.std}};
  return j;
}

std::map<std::string, MetricSummary> summary_from(const json& j) {
  std::map<std::string, MetricSummary> m;
  for (auto it = j.begin(); it != j.end(); ++it) m[it.key()] = {it->at("mean").get<double>(), it->at("std").get<double>()};
  return m;
}

}  // namespace

void fill_aggregate(MetricReport& report) {
  report.aggregate.clear();
  for (const auto& [name, values] : columns(report.per_sample)) report.aggregate[name] = summarize(values);
}

std::string metric_config_hash() {
  const SsimOptions o;
  std::ostringstream cfg;
  cfg << "psnr:range=1,cap=" << kPsnrCap << ";ssim:w=" << o.window << ",s=" << o.sigma << ",k1=" << o.k1 << ",k2=" << o.k2
      << ";perc:seed=" << kPerceptualSeed << ",scales=" << kPerceptualScales << ",filters=" << kPerceptualFilters
      << ";lmi:w=16,bins=16";
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : cfg.str()) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

json MetricReport::to_json() const {
  json rows = json::array();
  for (const auto& r : per_sample)
    rows.push_back({{"sample_id", r.sample_id},
                    {"psnr_db", r.psnr_db},
                    {"ssim", r.ssim},
                    {"perceptual", r.perceptual},
                    {"lmi_cross", r.lmi_cross}});
  return {{"per_sample", rows},
          {"aggregate", summary_json(aggregate)},
          {"paired_vs_lf", summary_json(paired_vs_lf)},
          {"missing", missing},
          {"config_hash", config_hash}};
}

MetricReport MetricReport::from_json(const json& j) {
  MetricReport r;
  for (const auto& row : j.at("per_sample"))
    r.per_sample.push_back({row.at("sample_id").get<std::string>(), row.at("psnr_db").get<double>(),
                            row.at("ssim").get<double>(), row.at("perceptual").get<double>(),
                            row.at("lmi_cross").get<double>()});
  r.aggregate = summary_from(j.at("aggregate"));
  if (j.contains("paired_vs_lf")) r.paired_vs_lf = summary_from(j.at("paired_vs_lf"));
  r.missing = j.value("missing", std::vector<std::string>{});
  r.config_hash = j.value("config_hash", std::string{});
  return r;
}

std::string MetricReport::to_csv() const {
  std::ostringstream out;
  out << "sample_id,psnr_db,ssim,perceptual,lmi_cross\n";
  char buf[256];
  for (const auto& r : per_sample) {
    std::snprintf(buf, sizeof(buf), "%s,%.17g,%.17g,%.17g,%.17g\n", r.sample_id.c_str(), r.psnr_db, r.ssim, r.perceptual,
                  r.lmi_cross);
    out << buf;
  }
  return out.str();
}

MetricReport evaluate_dataset(const fs::path& pred_dir, const fs::path& manifest_dir, const fs::path& out_dir_in) {
  const auto manifest = load_manifest(manifest_dir);
  const fs::path out_dir = out_dir_in.empty() ? pred_dir : out_dir_in;

  MetricReport report;
  report.config_hash = metric_config_hash();
  std::vector<double> d_psnr, d_ssim;
  for (const auto& rec : manifest.samples) {
    const auto pred_path = pred_dir / (rec.sample_id + "_syn.f32");
    if (!fs::exists(pred_path)) {
      report.missing.push_back(rec.sample_id);
      continue;
    }
    const auto sample = load_sample(manifest, rec);
    Volume pred(rec.shape, rec.spacing_mm, rec.hf_field_T);
    pred.data = read_raw_f32(pred_path, rec.shape);
    const auto ref = to_slices(sample.hf);
    const auto pred_t = to_slices(pred);
    const auto lf_t = to_slices(sample.lf);
    const auto m = compute_sample_metrics(rec.sample_id, pred_t, ref);
    report.per_sample.push_back(m);
    d_psnr.push_back(m.psnr_db - psnr(lf_t, ref));
    d_ssim.push_back(m.ssim - ssim(lf_t, ref));
  }
  fill_aggregate(report);
  report.paired_vs_lf["psnr_db"] = summarize(d_psnr);
  report.paired_vs_lf["ssim"] = summarize(d_ssim);

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  std::ofstream js(out_dir / "metrics.json", std::ios::trunc);
  std::ofstream csv(out_dir / "metrics.csv", std::ios::trunc);
  if (!js || !csv) throw IoError("cannot write metric report to " + out_dir.string());
  js << report.to_json().dump(2) << "\n";
  csv << report.to_csv();
  js.close();
  csv.close();

  if (!report.missing.empty()) {
    std::string ids;
    for (const auto& id : report.missing) ids += (ids.empty() ? "" : ", ") + id;
    throw IoError("missing predictions for: " + ids);
  }
  return report;
}

}  // namespace cssdiff
