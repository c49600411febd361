#include "cssdiff/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "cssdiff/errors.hpp"
#include "cssdiff/rng.hpp"

namespace cssdiff {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kFwhmToSigma = 2.3548200450309493;  // 2*sqrt(2 ln 2)

double logistic(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Soft membership of a normalised radius rho inside boundary r.
double inside(double rho, double r, double width) { return logistic((r - rho) / width); }

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += k[i + radius];
  }
  for (auto& w : k) w /= sum;
  return k;
}

// One separable pass along `axis` (0 = z, 1 = y, 2 = x) with edge replication.
void blur_axis(Volume& v, int axis, double sigma) {
  const auto kernel = gaussian_kernel(sigma);
  const int radius = static_cast<int>(kernel.size() / 2);
  const std::array<int64_t, 3> ext{v.shape.z, v.shape.y, v.shape.x};
  const std::array<int64_t, 3> stride{v.shape.y * v.shape.x, v.shape.x, 1};
  const int64_t n = ext[axis];
  std::vector<float> line(static_cast<size_t>(n));
  std::vector<float> out = v.data;
  const int a1 = axis == 0 ? 1 : 0;
  const int a2 = axis == 2 ? 1 : 2;
  for (int64_t i = 0; i < ext[a1]; ++i) {
    for (int64_t j = 0; j < ext[a2]; ++j) {
      const int64_t base = i * stride[a1] + j * stride[a2];
      for (int64_t k = 0; k < n; ++k) line[k] = v.data[base + k * stride[axis]];
      for (int64_t k = 0; k < n; ++k) {
        double acc = 0.0;
        for (int d = -radius; d <= radius; ++d) {
          const int64_t src = std::clamp<int64_t>(k + d, 0, n - 1);
          acc += kernel[d + radius] * line[src];
        }
        out[base + k * stride[axis]] = static_cast<float>(acc);
      }
    }
  }
  v.data = std::move(out);
}

void clamp_unit(Volume& v) {
  for (auto& f : v.data) f = std::clamp(f, 0.0f, 1.0f);
}

json shape_json(const Shape3& s) { return json::array({s.z, s.y, s.x}); }

Shape3 shape_from(const json& j) { return {j.at(0).get<int64_t>(), j.at(1).get<int64_t>(), j.at(2).get<int64_t>()}; }

}  // namespace

void DegradationParams::validate() const {
  if (!(b_low_T > 0.0) || !(b_low_T < b_high_T))
    throw ParameterError("degradation requires 0 < b_low_T < b_high_T");
  if (!(base_noise_sigma >= 0.0)) throw ParameterError("base_noise_sigma must be >= 0");
  for (double f : blur_fwhm_mm)
    if (!(f >= 0.0)) throw ParameterError("blur_fwhm_mm must be >= 0 componentwise");
  if (!(contrast_gamma > 0.0)) throw ParameterError("contrast_gamma must be > 0");
  if (!(bias_field_amplitude >= 0.0 && bias_field_amplitude < 1.0))
    throw ParameterError("bias_field_amplitude must lie in [0, 1)");
}

json DegradationParams::to_json() const {
  return {{"b_low_T", b_low_T},
          {"b_high_T", b_high_T},
          {"base_noise_sigma", base_noise_sigma},
          {"blur_fwhm_mm", blur_fwhm_mm},
          {"contrast_gamma", contrast_gamma},
          {"bias_field_amplitude", bias_field_amplitude}};
}

DegradationParams DegradationParams::from_json(const json& j) {
  DegradationParams p;
  p.b_low_T = j.value("b_low_T", p.b_low_T);
  p.b_high_T = j.value("b_high_T", p.b_high_T);
  p.base_noise_sigma = j.value("base_noise_sigma", p.base_noise_sigma);
  p.blur_fwhm_mm = j.value("blur_fwhm_mm", p.blur_fwhm_mm);
  p.contrast_gamma = j.value("contrast_gamma", p.contrast_gamma);
  p.bias_field_amplitude = j.value("bias_field_amplitude", p.bias_field_amplitude);
  return p;
}

Volume generate_phantom(uint64_t seed, Shape3 shape, int n_lesions, std::array<double, 3> spacing_mm) {
  if (shape.z < 16 || shape.y < 16 || shape.x < 16)
    throw DimensionError("phantom shape must be >= 16 in every axis");
  if (n_lesions < 0) throw ParameterError("n_lesions must be >= 0");

  // Anatomy and lesions draw from separate streams so that adding lesions
  // never perturbs the background anatomy.
  std::mt19937_64 rng(derive_seed(seed, {1}));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto jitter = [&](double centre, double half) { return centre + half * (2.0 * u01(rng) - 1.0); };
  constexpr double two_pi = 2.0 * std::numbers::pi;

  const double csf = jitter(0.25, 0.02);
  const double gm = jitter(0.55, 0.03);
  const double wm = jitter(0.80, 0.03);
  const std::array<double, 3> head{jitter(1.25, 0.03), jitter(0.84, 0.03), jitter(0.74, 0.03)};
  const double brain_scale = jitter(0.88, 0.02);
  const double wm_radius = jitter(0.70, 0.03);
  const std::array<double, 3> phase{two_pi * u01(rng), two_pi * u01(rng), two_pi * u01(rng)};

  struct Blob { std::array<double, 3> c, r; };
  std::array<Blob, 2> ventricles;
  const double vz = jitter(0.0, 0.08), vy = jitter(0.05, 0.05);
  for (int s = 0; s < 2; ++s) {
    ventricles[s].c = {vz, vy, (s == 0 ? -1.0 : 1.0) * jitter(0.16, 0.03)};
    ventricles[s].r = {jitter(0.38, 0.05), jitter(0.22, 0.03), jitter(0.07, 0.01)};
  }

  struct Wave { std::array<double, 3> f; double amp, phase; };
  std::array<Wave, 5> texture;
  for (auto& w : texture) {
    for (auto& f : w.f) f = jitter(0.0, 1.6);
    w.amp = 0.012 + 0.008 * u01(rng);
    w.phase = two_pi * u01(rng);
  }

  // Sulci: CSF clefts cut into the cortex whose angle drifts quickly with z
  // and which only span part of the stack, so every slice has its own pattern.
  struct Sulcus { double theta0, omega, depth, z0, z1; };
  std::array<Sulcus, 10> sulci;
  for (auto& s : sulci) {
    s.theta0 = two_pi * u01(rng);
    s.omega = (u01(rng) < 0.5 ? -1.0 : 1.0) * std::numbers::pi * (5.0 + 4.0 * u01(rng));
    s.depth = 0.15 + 0.15 * u01(rng);
    s.z0 = -1.0 + 1.4 * u01(rng);
    s.z1 = s.z0 + 0.4 + 0.6 * u01(rng);
  }
  const double fold_phase = two_pi * u01(rng);

  const double edge = 1.4 / static_cast<double>(std::min(shape.y, shape.x));
  Volume vol(shape, spacing_mm, 3.0);
  for (int64_t z = 0; z < shape.z; ++z) {
    const double zn = 2.0 * (z + 0.5) / shape.z - 1.0;
    // The head narrows towards the vertex so the two ends of the stack are distinguishable.
    const double taper = 1.0 - 0.12 * zn;
    for (int64_t y = 0; y < shape.y; ++y) {
      const double yn = 2.0 * (y + 0.5) / shape.y - 1.0;
      for (int64_t x = 0; x < shape.x; ++x) {
        const double xn = 2.0 * (x + 0.5) / shape.x - 1.0;
        const double rho_head =
            std::sqrt(std::pow(zn / head[0], 2) + std::pow(yn / (head[1] * taper), 2) + std::pow(xn / (head[2] * taper), 2));
        const double rho_brain = rho_head / brain_scale;
        const double theta = std::atan2(yn, xn);
        // Gyral folding: the WM boundary twists with z so neighbouring slices differ.
        const double fold = 1.0 + 0.10 * std::sin(5.0 * theta + 3.0 * std::numbers::pi * zn + phase[0]) +
                            0.06 * std::sin(3.0 * theta - 2.0 * std::numbers::pi * zn + phase[1]) +
                            0.04 * std::sin(7.0 * theta + 5.0 * std::numbers::pi * zn + phase[2]) +
                            0.05 * std::sin(9.0 * theta - 9.0 * std::numbers::pi * zn + fold_phase);
        const double m_head = inside(rho_head, 1.0, edge);
        const double m_brain = inside(rho_brain, 1.0, edge);
        const double m_wm = inside(rho_brain, wm_radius * fold, edge);
        double v = csf * m_head + (gm - csf) * m_brain + (wm - gm) * m_wm;

        double tex = 0.0;
        for (const auto& w : texture)
          tex += w.amp * std::cos(std::numbers::pi * (w.f[0] * zn + w.f[1] * yn + w.f[2] * xn) + w.phase);
        v += m_brain * tex;

        for (const auto& s : sulci) {
          if (zn < s.z0 || zn > s.z1) continue;
          const double d = std::remainder(theta - s.theta0 - s.omega * zn, two_pi);
          const double m = std::exp(-0.5 * (d / 0.07) * (d / 0.07)) * inside(1.0 - s.depth, rho_brain, edge) * m_brain;
          v += (csf - v) * m;
        }

        for (const auto& b : ventricles) {
          const double rho = std::sqrt(std::pow((zn - b.c[0]) / b.r[0], 2) + std::pow((yn - b.c[1]) / b.r[1], 2) +
                                       std::pow((xn - b.c[2]) / b.r[2], 2));
          const double m = inside(rho, 1.0, edge / b.r[2] * 0.5) * m_brain;
          v += (csf - v) * m;
        }
        vol.at(z, y, x) = static_cast<float>(v);
      }
    }
  }
  clamp_unit(vol);

  // Lesions: bright compact blobs in white matter with disjoint supports.
  std::mt19937_64 lrng(derive_seed(seed, {2}));
  std::uniform_real_distribution<double> lu(0.0, 1.0);
  struct Lesion { double z, y, x, r; };
  std::vector<int64_t> white;
  for (int64_t i = 0; i < shape.voxels(); ++i)
    if (vol.data[static_cast<size_t>(i)] >= 0.5 * (gm + wm)) white.push_back(i);
  std::vector<Lesion> placed;
  for (int n = 0; n < n_lesions; ++n) {
    bool ok = false;
    for (int attempt = 0; attempt < 2000 && !ok && !white.empty(); ++attempt) {
      const int64_t i = white[static_cast<size_t>(lu(lrng) * static_cast<double>(white.size())) % white.size()];
      Lesion l{};
      l.r = 1.2 + 0.8 * lu(lrng);
      l.z = static_cast<double>(i / shape.slice_size()) + lu(lrng) - 0.5;
      l.y = static_cast<double>((i / shape.x) % shape.y) + lu(lrng) - 0.5;
      l.x = static_cast<double>(i % shape.x) + lu(lrng) - 0.5;
      const double margin = 3.0 * l.r + 1.0;
      if (l.z < margin || l.z > shape.z - 1 - margin || l.y < margin || l.y > shape.y - 1 - margin || l.x < margin ||
          l.x > shape.x - 1 - margin)
        continue;
      ok = std::all_of(placed.begin(), placed.end(), [&](const Lesion& o) {
        const double d = std::sqrt((l.z - o.z) * (l.z - o.z) + (l.y - o.y) * (l.y - o.y) + (l.x - o.x) * (l.x - o.x));
        return d > 3.0 * (l.r + o.r) + 2.0;
      });
      if (ok) placed.push_back(l);
    }
    if (!ok) throw ParameterError("could not place " + std::to_string(n_lesions) + " disjoint lesions");
  }
  for (const auto& l : placed) {
    const double support = 3.0 * l.r;
    const auto lo = [&](double c) { return static_cast<int64_t>(std::floor(c - support)); };
    const auto hi = [&](double c) { return static_cast<int64_t>(std::ceil(c + support)); };
    for (int64_t z = std::max<int64_t>(0, lo(l.z)); z <= std::min(shape.z - 1, hi(l.z)); ++z)
      for (int64_t y = std::max<int64_t>(0, lo(l.y)); y <= std::min(shape.y - 1, hi(l.y)); ++y)
        for (int64_t x = std::max<int64_t>(0, lo(l.x)); x <= std::min(shape.x - 1, hi(l.x)); ++x) {
          const double d2 = (z - l.z) * (z - l.z) + (y - l.y) * (y - l.y) + (x - l.x) * (x - l.x);
          if (d2 >= support * support) continue;
          float& v = vol.at(z, y, x);
          v = static_cast<float>(v + (1.0 - v) * std::exp(-0.5 * d2 / (l.r * l.r)));
        }
  }
  clamp_unit(vol);
  return vol;
}

Volume blur_volume(const Volume& v, const std::array<double, 3>& fwhm_mm) {
  Volume out = v;
  for (int axis = 0; axis < 3; ++axis) {
    const double sigma = fwhm_mm[axis] / kFwhmToSigma / v.spacing_mm[axis];
    if (sigma > 1e-6) blur_axis(out, axis, sigma);
  }
  return out;
}

Volume degrade_to_low_field(const Volume& hf, const DegradationParams& p, uint64_t seed) {
  p.validate();
  if (hf.shape.z < 4 || hf.shape.y < 4 || hf.shape.x < 4) throw DimensionError("volume dims must be >= 4");

  Volume out = blur_volume(hf, p.blur_fwhm_mm);
  std::mt19937_64 rng(derive_seed(seed, {7}));
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  if (p.bias_field_amplitude > 0.0) {
    // One smooth cosine across the field of view, random direction and phase.
    std::normal_distribution<double> n01(0.0, 1.0);
    std::array<double, 3> dir{n01(rng), n01(rng), n01(rng)};
    const double norm = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]) + 1e-12;
    for (auto& d : dir) d /= norm;
    const double phase = 2.0 * std::numbers::pi * u01(rng);
    const double freq = 0.35;
    for (int64_t z = 0; z < out.shape.z; ++z)
      for (int64_t y = 0; y < out.shape.y; ++y)
        for (int64_t x = 0; x < out.shape.x; ++x) {
          const double zn = 2.0 * (z + 0.5) / out.shape.z - 1.0;
          const double yn = 2.0 * (y + 0.5) / out.shape.y - 1.0;
          const double xn = 2.0 * (x + 0.5) / out.shape.x - 1.0;
          const double b = std::cos(2.0 * std::numbers::pi * freq * (dir[0] * zn + dir[1] * yn + dir[2] * xn) + phase);
          out.at(z, y, x) = static_cast<float>(out.at(z, y, x) * (1.0 + p.bias_field_amplitude * b));
        }
  }
  if (p.contrast_gamma != 1.0) {
    for (auto& f : out.data) f = static_cast<float>(std::pow(std::clamp(static_cast<double>(f), 0.0, 1.0), p.contrast_gamma));
  }
  const double sigma = p.noise_sigma();
  if (sigma > 0.0) {
    std::mt19937_64 noise_rng(derive_seed(seed, {8}));
    std::normal_distribution<double> noise(0.0, sigma);
    for (auto& f : out.data) f = static_cast<float>(f + noise(noise_rng));
  }
  clamp_unit(out);
  out.field_strength_T = p.b_low_T;
  return out;
}

Volume inject_slice_shift(const Volume& v, int shift) {
  if (std::abs(static_cast<int64_t>(shift)) >= v.shape.z)
    throw RangeError("slice shift " + std::to_string(shift) + " outside z-extent " + std::to_string(v.shape.z));
  Volume out = v;
  for (int64_t k = 0; k < v.shape.z; ++k) {
    const int64_t src = std::clamp<int64_t>(k + shift, 0, v.shape.z - 1);
    std::copy(v.slice(src).begin(), v.slice(src).end(), out.slice(k).begin());
  }
  return out;
}

json SampleRecord::to_json() const {
  return {{"id", sample_id},
          {"shape", shape_json(shape)},
          {"spacing_mm", spacing_mm},
          {"field_strength_T", {{"lf", lf_field_T}, {"hf", hf_field_T}}},
          {"slice_shift", slice_shift},
          {"rng_seed", rng_seed}};
}

SampleRecord SampleRecord::from_json(const json& j) {
  SampleRecord r;
  r.sample_id = j.at("id").get<std::string>();
  r.shape = shape_from(j.at("shape"));
  r.spacing_mm = j.at("spacing_mm").get<std::array<double, 3>>();
  r.lf_field_T = j.at("field_strength_T").at("lf").get<double>();
  r.hf_field_T = j.at("field_strength_T").at("hf").get<double>();
  r.slice_shift = j.at("slice_shift").get<int>();
  r.rng_seed = j.at("rng_seed").get<uint64_t>();
  return r;
}

const SampleRecord& DatasetManifest::find(const std::string& id) const {
  for (const auto& s : samples)
    if (s.sample_id == id) return s;
  throw ParameterError("sample not in manifest: " + id);
}

json DatasetSpec::to_json() const {
  return {{"n_samples", n_samples},
          {"shape", shape_json(shape)},
          {"spacing_mm", spacing_mm},
          {"n_lesions", n_lesions},
          {"degradation", degradation.to_json()},
          {"shift_range", shift_range},
          {"root_seed", root_seed}};
}

DatasetSpec DatasetSpec::from_json(const json& j) {
  DatasetSpec s;
  s.n_samples = j.value("n_samples", s.n_samples);
  if (j.contains("shape")) s.shape = shape_from(j.at("shape"));
  s.spacing_mm = j.value("spacing_mm", s.spacing_mm);
  s.n_lesions = j.value("n_lesions", s.n_lesions);
  if (j.contains("degradation")) s.degradation = DegradationParams::from_json(j.at("degradation"));
  s.shift_range = j.value("shift_range", s.shift_range);
  s.root_seed = j.value("root_seed", s.root_seed);
  return s;
}

std::string sample_id_for(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "sample_%04d", index);
  return buf;
}

PairedSample make_sample(const DatasetSpec& spec, int index) {
  if (spec.shift_range < 0 || 4 * spec.shift_range >= spec.shape.z)
    throw ParameterError("shift_range must satisfy 0 <= shift_range < z/4");
  PairedSample s;
  s.rng_seed = derive_seed(spec.root_seed, {static_cast<uint64_t>(index)});
  s.sample_id = sample_id_for(index);
  s.hf = generate_phantom(derive_seed(s.rng_seed, {1}), spec.shape, spec.n_lesions, spec.spacing_mm);
  s.hf.field_strength_T = spec.degradation.b_high_T;
  std::mt19937_64 shift_rng(derive_seed(s.rng_seed, {3}));
  s.slice_shift = std::uniform_int_distribution<int>(-spec.shift_range, spec.shift_range)(shift_rng);
  s.lf = degrade_to_low_field(inject_slice_shift(s.hf, s.slice_shift), spec.degradation, derive_seed(s.rng_seed, {2}));
  return s;
}

DatasetManifest make_dataset(const DatasetSpec& spec, const fs::path& out_dir) {
  if (spec.n_samples < 1) throw ParameterError("n_samples must be >= 1");
  spec.degradation.validate();
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw IoError("cannot create output directory: " + out_dir.string());

  DatasetManifest manifest;
  manifest.root = out_dir;
  manifest.params = spec.to_json();
  json list = json::array();
  for (int i = 0; i < spec.n_samples; ++i) {
    const PairedSample s = make_sample(spec, i);
    SampleRecord rec{s.sample_id, s.hf.shape, s.hf.spacing_mm, s.lf.field_strength_T, s.hf.field_strength_T,
                     s.slice_shift, s.rng_seed};
    write_raw_f32(out_dir / (s.sample_id + "_lf.f32"), s.lf);
    write_raw_f32(out_dir / (s.sample_id + "_hf.f32"), s.hf);
    std::ofstream side(out_dir / (s.sample_id + ".json"), std::ios::trunc);
    if (!side) throw IoError("cannot write sidecar for " + s.sample_id);
    side << rec.to_json().dump(2) << "\n";
    list.push_back(rec.to_json());
    manifest.samples.push_back(rec);
  }
  std::ofstream out(out_dir / "manifest.json", std::ios::trunc);
  if (!out) throw IoError("cannot write manifest in " + out_dir.string());
  out << json{{"format", "cssdiff-f32-v1"}, {"params", manifest.params}, {"samples", list}}.dump(2) << "\n";
  return manifest;
}

DatasetManifest load_manifest(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("missing manifest.json in " + dir.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError("malformed manifest in " + dir.string() + ": " + e.what());
  }
  DatasetManifest m;
  m.root = dir;
  m.params = j.value("params", json::object());
  for (const auto& s : j.at("samples")) m.samples.push_back(SampleRecord::from_json(s));
  return m;
}

PairedSample load_sample(const DatasetManifest& manifest, const SampleRecord& rec) {
  PairedSample s;
  s.sample_id = rec.sample_id;
  s.slice_shift = rec.slice_shift;
  s.rng_seed = rec.rng_seed;
  s.lf = Volume(rec.shape, rec.spacing_mm, rec.lf_field_T);
  s.hf = Volume(rec.shape, rec.spacing_mm, rec.hf_field_T);
  s.lf.data = read_raw_f32(manifest.root / (rec.sample_id + "_lf.f32"), rec.shape);
  s.hf.data = read_raw_f32(manifest.root / (rec.sample_id + "_hf.f32"), rec.shape);
  return s;
}

std::vector<PairedSample> load_all(const DatasetManifest& manifest) {
  std::vector<PairedSample> out;
  out.reserve(manifest.samples.size());
  for (const auto& rec : manifest.samples) out.push_back(load_sample(manifest, rec));
  return out;
}

}  // namespace cssdiff
