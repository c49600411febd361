#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "cssdiff/errors.hpp"
#include "cssdiff/pipeline.hpp"

namespace cssdiff {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kW = 480.0;
constexpr double kH = 300.0;
constexpr double kPad = 48.0;

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string svg_open(const std::string& title) {
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(kW) + "\" height=\"" + fmt(kH) + "\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"" + fmt(kW / 2) + "\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">" +
       title + "</text>\n";
  s += "<line x1=\"" + fmt(kPad) + "\" y1=\"" + fmt(kH - kPad) + "\" x2=\"" + fmt(kW - kPad / 2) + "\" y2=\"" +
       fmt(kH - kPad) + "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + fmt(kPad) + "\" y1=\"" + fmt(kPad / 1.5) + "\" x2=\"" + fmt(kPad) + "\" y2=\"" + fmt(kH - kPad) +
       "\" stroke=\"black\"/>\n";
  return s;
}

std::string axis_label(double x, double y, const std::string& text, const char* anchor = "middle") {
  return "<text x=\"" + fmt(x) + "\" y=\"" + fmt(y) + "\" text-anchor=\"" + anchor +
         "\" font-family=\"sans-serif\" font-size=\"10\">" + text + "</text>\n";
}

void save(const fs::path& path, const std::string& body) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << body << "</svg>\n";
}

void histogram_svg(const fs::path& path, const std::string& title, const std::vector<double>& values, int bins) {
  auto s = svg_open(title);
  if (!values.empty()) {
    double lo = *std::min_element(values.begin(), values.end());
    double hi = *std::max_element(values.begin(), values.end());
    if (hi - lo < 1e-12) {
      lo -= 0.5;
      hi += 0.5;
    }
    std::vector<int> counts(static_cast<size_t>(bins), 0);
    for (double v : values) {
      int b = static_cast<int>((v - lo) / (hi - lo) * bins);
      counts[static_cast<size_t>(std::clamp(b, 0, bins - 1))]++;
    }
    const int peak = *std::max_element(counts.begin(), counts.end());
    const double pw = (kW - 1.5 * kPad) / bins;
    const double ph = kH - kPad - kPad / 1.5;
    for (int b = 0; b < bins; ++b) {
      const double h = ph * counts[static_cast<size_t>(b)] / std::max(peak, 1);
      s += "<rect x=\"" + fmt(kPad + b * pw + 1) + "\" y=\"" + fmt(kH - kPad - h) + "\" width=\"" + fmt(pw - 2) +
           "\" height=\"" + fmt(h) + "\" fill=\"steelblue\"/>\n";
    }
    s += axis_label(kPad, kH - kPad + 14, fmt(lo));
    s += axis_label(kW - kPad / 2, kH - kPad + 14, fmt(hi));
    s += axis_label(kPad - 4, kPad / 1.5 + 8, std::to_string(peak), "end");
  }
  save(path, s);
}

void curve_svg(const fs::path& path, const std::string& title, const std::vector<double>& xs, const std::vector<double>& ys) {
  auto s = svg_open(title);
  if (!xs.empty()) {
    const double x0 = *std::min_element(xs.begin(), xs.end());
    const double x1 = std::max(*std::max_element(xs.begin(), xs.end()), x0 + 1.0);
    double y0 = *std::min_element(ys.begin(), ys.end());
    double y1 = *std::max_element(ys.begin(), ys.end());
    if (y1 - y0 < 1e-12) {
      y0 -= 0.5;
      y1 += 0.5;
    }
    const double pw = kW - 1.5 * kPad;
    const double ph = kH - kPad - kPad / 1.5;
    std::string pts;
    for (size_t i = 0; i < xs.size(); ++i) {
      const double px = kPad + pw * (xs[i] - x0) / (x1 - x0);
      const double py = kH - kPad - ph * (ys[i] - y0) / (y1 - y0);
      pts += fmt(px) + "," + fmt(py) + " ";
    }
    s += "<polyline fill=\"none\" stroke=\"firebrick\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
    s += axis_label(kPad, kH - kPad + 14, fmt(x0));
    s += axis_label(kW - kPad / 2, kH - kPad + 14, fmt(x1));
    s += axis_label(kPad - 4, kH - kPad, fmt(y0), "end");
    s += axis_label(kPad - 4, kPad / 1.5 + 8, fmt(y1), "end");
  }
  save(path, s);
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot read " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError(p.string() + " is not valid JSON: " + e.what());
  }
}

}  // namespace

std::vector<fs::path> run_report(const std::optional<fs::path>& metrics_json, const std::optional<fs::path>& train_report_json,
                                 const fs::path& out_dir) {
  if (!metrics_json && !train_report_json) throw ParameterError("report needs metrics.json and/or train_report.json");
  fs::create_directories(out_dir);
  std::vector<fs::path> written;

  if (metrics_json) {
    const auto report = MetricReport::from_json(read_json(*metrics_json));
    const std::vector<std::pair<std::string, double SampleMetrics::*>> fields{{"psnr_db", &SampleMetrics::psnr_db},
                                                                              {"ssim", &SampleMetrics::ssim},
                                                                              {"perceptual", &SampleMetrics::perceptual},
                                                                              {"lmi_cross", &SampleMetrics::lmi_cross}};
    for (const auto& [name, member] : fields) {
      std::vector<double> vals, idx;
      for (size_t i = 0; i < report.per_sample.size(); ++i) {
        vals.push_back(report.per_sample[i].*member);
        idx.push_back(static_cast<double>(i));
      }
      const int bins = std::clamp(static_cast<int>(std::sqrt(static_cast<double>(vals.size()))) + 1, 3, 20);
      const auto h = out_dir / ("hist_" + name + ".svg");
      histogram_svg(h, name + " per sample", vals, bins);
      written.push_back(h);
      const auto c = out_dir / ("samples_" + name + ".svg");
      curve_svg(c, name + " by sample index", idx, vals);
      written.push_back(c);
    }
  }

  if (train_report_json) {
    const auto j = read_json(*train_report_json);
    std::vector<double> epochs;
    std::map<std::string, std::vector<double>> series;
    for (const auto& h : j.at("history")) {
      const auto e = EpochRecord::from_json(h);
      epochs.push_back(e.epoch);
      series["lr"].push_back(e.lr);
      series["gen_loss"].push_back(e.gen_loss);
      series["disc_loss"].push_back(e.disc_loss);
      series["val_psnr"].push_back(e.val_psnr);
      series["val_cycle_error"].push_back(e.val_cycle_error);
    }
    for (const auto& [name, ys] : series) {
      const auto p = out_dir / ("curve_" + name + ".svg");
      curve_svg(p, name + " by epoch", epochs, ys);
      written.push_back(p);
    }
  }
  return written;
}

}  // namespace cssdiff
