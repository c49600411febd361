#include "cssdiff/models.hpp"

#include <cmath>
#include <set>

#include "cssdiff/errors.hpp"

namespace cssdiff {

namespace nn = torch::nn;
using nlohmann::json;

namespace {

constexpr int kConcatChannels = 4;
constexpr double kSlope = 0.2;

nn::Conv2d conv3(int in, int out, int stride = 1) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

torch::Tensor act(const torch::Tensor& h) { return torch::leaky_relu(h, kSlope); }

torch::Tensor guarded_sigmoid(const torch::Tensor& logits) {
  return torch::sigmoid(logits).clamp(kScoreFloor, 1.0 - kScoreFloor);
}

void scale_parameters(nn::Module& m, double factor) {
  torch::NoGradGuard guard;
  for (auto& p : m.parameters()) p.mul_(factor);
}

int log2_exact(int v) {
  int n = 0;
  while ((1 << n) < v) ++n;
  return (1 << n) == v ? n : -1;
}

}  // namespace

void NetConfig::validate() const {
  if (base_channels < 4) throw ParameterError("base_channels must be >= 4");
  if (depth < 1) throw ParameterError("depth must be >= 1");
  if (embed_dim < 4) throw ParameterError("embed_dim must be >= 4");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ParameterError("dropout must lie in [0, 1)");
  if (T_steps < 1) throw ParameterError("T_steps must be >= 1");
  if (patch_stride < 2 || log2_exact(patch_stride) < 0) throw ParameterError("patch_stride must be a power of two >= 2");
}

json NetConfig::to_json() const {
  return {{"base_channels", base_channels},
          {"depth", depth},
          {"embed_dim", embed_dim},
          {"cond_mode", cond_mode == CondMode::film ? "film" : "concat"},
          {"dropout", dropout},
          {"T_steps", T_steps},
          {"share_weights", share_weights},
          {"patch_stride", patch_stride}};
}

NetConfig NetConfig::from_json(const json& j) {
  NetConfig c;
  c.base_channels = j.value("base_channels", c.base_channels);
  c.depth = j.value("depth", c.depth);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  const std::string mode = j.value("cond_mode", std::string("film"));
  if (mode != "film" && mode != "concat") throw ParameterError("cond_mode must be film or concat");
  c.cond_mode = mode == "film" ? CondMode::film : CondMode::concat;
  c.dropout = j.value("dropout", c.dropout);
  c.T_steps = j.value("T_steps", c.T_steps);
  c.share_weights = j.value("share_weights", c.share_weights);
  c.patch_stride = j.value("patch_stride", c.patch_stride);
  return c;
}

std::optional<std::string> NetConfig::first_difference(const NetConfig& o) const {
  if (base_channels != o.base_channels) return "base_channels";
  if (depth != o.depth) return "depth";
  if (embed_dim != o.embed_dim) return "embed_dim";
  if (cond_mode != o.cond_mode) return "cond_mode";
  if (T_steps != o.T_steps) return "T_steps";
  if (share_weights != o.share_weights) return "share_weights";
  if (patch_stride != o.patch_stride) return "patch_stride";
  return std::nullopt;
}

// ---------------------------------------------------------------------------

ResUNetImpl::ResUNetImpl(int in_channels, int channels, int depth, int cond_dim, CondMode mode, double dropout)
    : in_channels_(in_channels), channels_(channels), depth_(depth), cond_dim_(cond_dim), mode_(mode), dropout_(dropout) {
  int head_in = in_channels;
  if (cond_dim > 0 && mode == CondMode::concat) {
    cond_proj_ = register_module("cond_proj", nn::Linear(cond_dim, kConcatChannels));
    head_in += kConcatChannels;
  }
  head_ = register_module("head", conv3(head_in, channels));
  for (int l = 0; l < depth; ++l) down_->push_back(conv3(channels, channels, 2));
  down_ = register_module("down", down_);
  mid_ = register_module("mid", conv3(channels, channels));
  for (int l = 0; l < depth; ++l) up_->push_back(conv3(channels, channels));
  up_ = register_module("up", up_);
  tail_ = register_module("tail", conv3(channels, 1));
  scale_parameters(*tail_, 0.1);
  if (cond_dim > 0 && mode == CondMode::film) {
    // Sites: one per resolution level (levels 1..depth after each downsample,
    // level 0 after the last upsample).
    film_ = register_module("film", nn::Linear(cond_dim, (depth + 1) * 2 * channels));
    scale_parameters(*film_, 0.1);
  }
}

torch::Tensor ResUNetImpl::modulate(const torch::Tensor& h, const torch::Tensor& film, int site) const {
  if (!film.defined()) return h;
  const auto params = film.view({film.size(0), depth_ + 1, 2, channels_});
  const auto gamma = params.select(1, site).select(1, 0).unsqueeze(-1).unsqueeze(-1);
  const auto beta = params.select(1, site).select(1, 1).unsqueeze(-1).unsqueeze(-1);
  return h * (1.0 + gamma) + beta;
}

torch::Tensor ResUNetImpl::forward(const torch::Tensor& x_in, const torch::Tensor& latent, const torch::Tensor& cond_in) {
  const auto x = as_image_batch(x_in);
  const int64_t n = x.size(0), h = x.size(2), w = x.size(3);
  const int64_t factor = int64_t{1} << depth_;
  if (h % factor != 0 || w % factor != 0)
    throw ShapeError("depth " + std::to_string(depth_) + " too large for a " + std::to_string(h) + "x" +
                     std::to_string(w) + " input");

  std::vector<torch::Tensor> inputs{x};
  if (takes_latent()) {
    if (latent.defined()) {
      if (!latent.sizes().equals(x.sizes())) throw ShapeError("latent must match the image shape");
      inputs.push_back(latent);
    } else {
      inputs.push_back(torch::zeros_like(x));
    }
  }
  torch::Tensor cond;
  if (cond_dim_ > 0) {
    cond = cond_in.defined() ? cond_in : torch::zeros({n, cond_dim_}, x.options());
    if (cond.dim() == 1) cond = cond.unsqueeze(0).expand({n, cond_dim_});
    if (cond.dim() != 2 || cond.size(1) != cond_dim_ || cond.size(0) != n)
      throw ShapeError("condition must be (N, " + std::to_string(cond_dim_) + ")");
  }
  torch::Tensor film;
  if (cond.defined() && mode_ == CondMode::film) film = film_->forward(cond);
  if (cond.defined() && mode_ == CondMode::concat) {
    inputs.push_back(cond_proj_->forward(cond).view({n, kConcatChannels, 1, 1}).expand({n, kConcatChannels, h, w}));
  }

  auto hcur = act(head_->forward(torch::cat(inputs, 1)));
  std::vector<torch::Tensor> skips{hcur};
  for (int l = 0; l < depth_; ++l) {
    hcur = act(modulate(down_[l]->as<nn::Conv2d>()->forward(hcur), film, l + 1));
    hcur = torch::dropout(hcur, dropout_, is_training());
    skips.push_back(hcur);
  }
  hcur = hcur + act(mid_->forward(hcur));
  for (int l = depth_ - 1; l >= 0; --l) {
    hcur = torch::upsample_nearest2d(hcur, {skips[l].size(2), skips[l].size(3)});
    hcur = act(up_[l]->as<nn::Conv2d>()->forward(hcur + skips[l]));
    if (l == 0) hcur = modulate(hcur, film, 0);
  }
  return x + tail_->forward(hcur);
}

// ---------------------------------------------------------------------------

DiscriminatorImpl::DiscriminatorImpl(int channels, int depth) {
  features_->push_back(conv3(1, channels, 2));
  features_->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(kSlope)));
  for (int l = 1; l < depth; ++l) {
    features_->push_back(conv3(channels, channels, 2));
    features_->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(kSlope)));
  }
  features_ = register_module("features", features_);
  score_ = register_module("score", conv3(channels, 1));
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& x) {
  const auto logits = score_->forward(features_->forward(as_image_batch(x)));
  return guarded_sigmoid(logits.mean({1, 2, 3}));
}

PatchDiscriminatorImpl::PatchDiscriminatorImpl(int channels, int stride) : stride_(stride) {
  const int levels = log2_exact(stride);
  if (levels < 1) throw ParameterError("patch stride must be a power of two >= 2");
  int in = 1;
  for (int l = 0; l < levels; ++l) {
    features_->push_back(conv3(in, channels, 2));
    features_->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(kSlope)));
    in = channels;
  }
  features_ = register_module("features", features_);
  score_ = register_module("score", nn::Conv2d(nn::Conv2dOptions(channels, 1, 1)));
}

torch::Tensor PatchDiscriminatorImpl::forward(const torch::Tensor& x_in) {
  const auto x = as_image_batch(x_in);
  if (x.size(2) % stride_ != 0 || x.size(3) % stride_ != 0)
    throw ShapeError("image size must be a multiple of the patch stride " + std::to_string(stride_));
  return guarded_sigmoid(score_->forward(features_->forward(x))).squeeze(1);
}

SliceEncoderImpl::SliceEncoderImpl(int channels, int depth, int embed_dim) : embed_dim_(embed_dim) {
  features_->push_back(conv3(1, channels));
  features_->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(kSlope)));
  for (int l = 0; l < depth; ++l) {
    features_->push_back(conv3(channels, channels, 2));
    features_->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(kSlope)));
  }
  features_->push_back(nn::AdaptiveAvgPool2d(nn::AdaptiveAvgPool2dOptions({8, 8})));
  features_ = register_module("features", features_);
  proj_ = register_module("proj", nn::Linear(channels * 64, embed_dim));
}

torch::Tensor SliceEncoderImpl::forward(const torch::Tensor& x) {
  const auto f = features_->forward(as_image_batch(x)).flatten(1);
  const auto e = proj_->forward(f);
  return e / e.norm(2, {1}, true).clamp_min(1e-12);
}

// ---------------------------------------------------------------------------

std::vector<NamedModule> ModelBundle::named_modules() const {
  std::vector<NamedModule> out;
  if (cfg.share_weights) {
    out.push_back({"chain_shared", chain.front().ptr()});
  } else {
    for (size_t t = 0; t < chain.size(); ++t) out.push_back({"chain_" + std::to_string(t), chain[t].ptr()});
  }
  out.push_back({"reverse", reverse.ptr()});
  out.push_back({"disc", disc.ptr()});
  out.push_back({"patch_disc", patch_disc.ptr()});
  out.push_back({"sgp_encoder", slice_encoder.ptr()});
  out.push_back({"lsc_corrector", corrector.ptr()});
  return out;
}

std::vector<torch::Tensor> ModelBundle::chain_parameters() const {
  std::vector<torch::Tensor> out;
  std::set<const void*> seen;
  for (const auto& g : chain)
    for (const auto& p : g->parameters())
      if (seen.insert(p.unsafeGetTensorImpl()).second) out.push_back(p);
  return out;
}

std::vector<torch::Tensor> ModelBundle::generator_parameters() const {
  auto out = chain_parameters();
  for (const auto& p : reverse->parameters()) out.push_back(p);
  return out;
}

void ModelBundle::set_train(bool on) {
  for (auto& m : named_modules()) m.module->train(on);
}

int64_t ModelBundle::parameter_count() const {
  int64_t n = 0;
  for (const auto& m : named_modules())
    for (const auto& p : m.module->parameters()) n += p.numel();
  return n;
}

ModelBundle init_models(const NetConfig& cfg, uint64_t seed) {
  cfg.validate();
  torch::manual_seed(seed);
  ModelBundle b;
  b.cfg = cfg;
  const int cond_dim = 2 * cfg.embed_dim;
  auto make_generator = [&] { return ResUNet(2, cfg.base_channels, cfg.depth, cond_dim, cfg.cond_mode, cfg.dropout); };
  if (cfg.share_weights) {
    auto shared = make_generator();
    b.chain.assign(cfg.T_steps, shared);
  } else {
    for (int t = 0; t < cfg.T_steps; ++t) b.chain.push_back(make_generator());
  }
  b.reverse = ResUNet(1, cfg.base_channels, cfg.depth, 0, cfg.cond_mode, cfg.dropout);
  b.disc = Discriminator(cfg.base_channels, cfg.depth);
  b.patch_disc = PatchDiscriminator(cfg.base_channels, cfg.patch_stride);
  b.slice_encoder = SliceEncoder(cfg.base_channels, cfg.depth + 1, cfg.embed_dim);
  b.corrector = make_generator();
  return b;
}

torch::Tensor step_embedding(int t, int dim) {
  auto out = torch::zeros({dim}, torch::kFloat32);
  const int half = dim / 2;
  auto acc = out.accessor<float, 1>();
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half));
    acc[i] = static_cast<float>(std::sin(t * freq));
    acc[half + i] = static_cast<float>(std::cos(t * freq));
  }
  return out;
}

torch::Tensor chain_condition(const torch::Tensor& slice_cond, int t, int64_t batch, int embed_dim) {
  torch::Tensor z;
  if (slice_cond.defined()) {
    z = slice_cond.dim() == 1 ? slice_cond.unsqueeze(0).expand({batch, embed_dim}) : slice_cond;
    if (z.size(0) != batch || z.size(1) != embed_dim)
      throw ShapeError("slice condition must be (N, " + std::to_string(embed_dim) + ")");
  } else {
    z = torch::zeros({batch, embed_dim});
  }
  const auto options = z.options();
  const auto temb = step_embedding(t, embed_dim).to(options).unsqueeze(0).expand({batch, embed_dim});
  return torch::cat({z, temb}, 1);
}

std::vector<torch::Tensor> apply_chain(const ModelBundle& b, const torch::Tensor& x0_in, const std::vector<torch::Tensor>& zs,
                                       const torch::Tensor& cond) {
  if (zs.size() != b.chain.size())
    throw ArityError("expected " + std::to_string(b.chain.size()) + " latents, got " + std::to_string(zs.size()));
  auto x = as_image_batch(x0_in);
  std::vector<torch::Tensor> states;
  states.reserve(b.chain.size());
  for (size_t t = 0; t < b.chain.size(); ++t) {
    const auto c = chain_condition(cond, static_cast<int>(t), x.size(0), b.cfg.embed_dim).to(x.options());
    x = b.chain[t].ptr()->forward(x, zs[t], c);
    states.push_back(x);
  }
  return states;
}

torch::Tensor apply_reverse(const ModelBundle& b, const torch::Tensor& y) {
  return b.reverse.ptr()->forward(as_image_batch(y), {}, {});
}

torch::Tensor apply_corrector(const ModelBundle& b, const torch::Tensor& y_in) {
  const auto y = as_image_batch(y_in);
  const auto c = chain_condition({}, b.cfg.T_steps - 1, y.size(0), b.cfg.embed_dim).to(y.options());
  return b.corrector.ptr()->forward(y, torch::zeros_like(y), c);
}

torch::Tensor discriminate(const ModelBundle& b, const torch::Tensor& x) { return b.disc.ptr()->forward(x); }

torch::Tensor discriminate_patches(const ModelBundle& b, const torch::Tensor& x) { return b.patch_disc.ptr()->forward(x); }

torch::Tensor embed_slice(const ModelBundle& b, const torch::Tensor& slice) {
  if (slice.dim() == 2) return b.slice_encoder.ptr()->forward(slice.unsqueeze(0).unsqueeze(0)).squeeze(0);
  return b.slice_encoder.ptr()->forward(slice);
}

void transfer_corrector_to_chain(ModelBundle& b) {
  torch::NoGradGuard guard;
  auto src = b.corrector->named_parameters();
  auto dst = b.chain.back()->named_parameters();
  for (auto& item : src) dst[item.key()].copy_(item.value());
}

torch::Tensor as_image_batch(const torch::Tensor& x) {
  if (!x.defined()) throw ShapeError("undefined image tensor");
  if (x.dim() == 4) {
    if (x.size(1) != 1) throw ShapeError("expected single-channel images");
    return x;
  }
  if (x.dim() == 3) {
    if (x.size(0) != 1) throw ShapeError("3-D input must be (1, H, W)");
    return x.unsqueeze(0);
  }
  throw ShapeError("image input must be 3-D (1, H, W) or 4-D (N, 1, H, W)");
}

FrozenParameters::FrozenParameters(const torch::nn::Module& m) {
  for (const auto& p : m.parameters()) {
    saved_.emplace_back(p, p.requires_grad());
    const_cast<torch::Tensor&>(p).requires_grad_(false);
  }
}

FrozenParameters::~FrozenParameters() {
  for (auto& [p, flag] : saved_) p.requires_grad_(flag);
}

}  // namespace cssdiff
