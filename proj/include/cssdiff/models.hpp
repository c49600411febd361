#pragma once

#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace cssdiff {

enum class CondMode { film, concat };

// Discriminator outputs are clamped into [kScoreFloor, 1 - kScoreFloor] so
// they stay strictly inside (0, 1) even when the sigmoid saturates in float.
constexpr double kScoreFloor = 1e-7;

struct NetConfig {
  int base_channels = 16;
  int depth = 2;
  int embed_dim = 16;
  CondMode cond_mode = CondMode::film;
  double dropout = 0.2;
  int T_steps = 4;
  bool share_weights = false;
  int patch_stride = 16;

  void validate() const;
  nlohmann::json to_json() const;
  static NetConfig from_json(const nlohmann::json& j);
  // Name of the first field that differs, if any.
  std::optional<std::string> first_difference(const NetConfig& other) const;
};

// Small shape-preserving U-Net with a global residual (out = x + net(x)),
// additive skips and one feature-wise modulation per resolution level.
class ResUNetImpl : public torch::nn::Module {
 public:
  ResUNetImpl(int in_channels, int channels, int depth, int cond_dim, CondMode mode, double dropout);

  // x: (N, 1, H, W). latent: (N, 1, H, W) when the net was built with a
  // latent channel, otherwise undefined. cond: (N, cond_dim) or undefined.
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& latent, const torch::Tensor& cond);

  int depth() const { return depth_; }
  int cond_dim() const { return cond_dim_; }
  bool takes_latent() const { return in_channels_ >= 2; }

 private:
  torch::Tensor modulate(const torch::Tensor& h, const torch::Tensor& film, int site) const;

  int in_channels_;
  int channels_;
  int depth_;
  int cond_dim_;
  CondMode mode_;
  double dropout_;
  torch::nn::Conv2d head_{nullptr};
  torch::nn::ModuleList down_;
  torch::nn::Conv2d mid_{nullptr};
  torch::nn::ModuleList up_;
  torch::nn::Conv2d tail_{nullptr};
  torch::nn::Linear film_{nullptr};
  torch::nn::Linear cond_proj_{nullptr};
};
TORCH_MODULE(ResUNet);

// Global real/fake score per image.
class DiscriminatorImpl : public torch::nn::Module {
 public:
  DiscriminatorImpl(int channels, int depth);
  torch::Tensor forward(const torch::Tensor& x);  // (N)

 private:
  torch::nn::Sequential features_;
  torch::nn::Conv2d score_{nullptr};
};
TORCH_MODULE(Discriminator);

// One score per stride x stride patch.
class PatchDiscriminatorImpl : public torch::nn::Module {
 public:
  PatchDiscriminatorImpl(int channels, int stride);
  torch::Tensor forward(const torch::Tensor& x);  // (N, H/stride, W/stride)
  int stride() const { return stride_; }

 private:
  int stride_;
  torch::nn::Sequential features_;
  torch::nn::Conv2d score_{nullptr};
};
TORCH_MODULE(PatchDiscriminator);

// Slice -> unit-norm embedding. Spatial layout survives down to an 8x8 grid
// before the projection so neighbouring slices stay distinguishable.
class SliceEncoderImpl : public torch::nn::Module {
 public:
  SliceEncoderImpl(int channels, int depth, int embed_dim);
  torch::Tensor forward(const torch::Tensor& x);  // (N, E)
  int embed_dim() const { return embed_dim_; }

 private:
  int embed_dim_;
  torch::nn::Sequential features_;
  torch::nn::Linear proj_{nullptr};
};
TORCH_MODULE(SliceEncoder);

struct NamedModule {
  std::string name;
  std::shared_ptr<torch::nn::Module> module;
};

struct ModelBundle {
  NetConfig cfg;
  std::vector<ResUNet> chain;  // G_0..G_{T-1}; entries alias one net when share_weights
  ResUNet reverse{nullptr};    // F
  Discriminator disc{nullptr};
  PatchDiscriminator patch_disc{nullptr};
  SliceEncoder slice_encoder{nullptr};
  ResUNet corrector{nullptr};  // E_T

  // Stable checkpoint names, one entry per distinct network.
  std::vector<NamedModule> named_modules() const;
  std::vector<torch::Tensor> chain_parameters() const;
  std::vector<torch::Tensor> generator_parameters() const;  // chain + reverse
  void set_train(bool on);
  int64_t parameter_count() const;
};

ModelBundle init_models(const NetConfig& cfg, uint64_t seed);

// Sinusoidal embedding of the chain step.
torch::Tensor step_embedding(int t, int dim);

// (N, 2E): slice embedding (or zeros) followed by the step embedding.
torch::Tensor chain_condition(const torch::Tensor& slice_cond, int t, int64_t batch, int embed_dim);

// Runs x_{t+1} = G_t(x_t, z_t | cond) and returns [x_1, ..., x_T].
std::vector<torch::Tensor> apply_chain(const ModelBundle& b, const torch::Tensor& x0, const std::vector<torch::Tensor>& zs,
                                       const torch::Tensor& cond);

torch::Tensor apply_reverse(const ModelBundle& b, const torch::Tensor& y);
torch::Tensor apply_corrector(const ModelBundle& b, const torch::Tensor& y);
torch::Tensor discriminate(const ModelBundle& b, const torch::Tensor& x);
torch::Tensor discriminate_patches(const ModelBundle& b, const torch::Tensor& x);
torch::Tensor embed_slice(const ModelBundle& b, const torch::Tensor& slice);

// Copies the corrector weights into the last generator of the chain.
void transfer_corrector_to_chain(ModelBundle& b);

// Normalises image input to (N, 1, H, W); throws ShapeError otherwise.
torch::Tensor as_image_batch(const torch::Tensor& x);

// Temporarily disables requires_grad on a module's parameters.
class FrozenParameters {
 public:
  explicit FrozenParameters(const torch::nn::Module& m);
  ~FrozenParameters();
  FrozenParameters(const FrozenParameters&) = delete;
  FrozenParameters& operator=(const FrozenParameters&) = delete;

 private:
  std::vector<std::pair<torch::Tensor, bool>> saved_;
};

}  // namespace cssdiff
