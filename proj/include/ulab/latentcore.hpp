// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "json.hpp"
#include "ulab/image.hpp"
#include "ulab/nn.hpp"
#include "ulab/synthworld.hpp"
#include "ulab/textbridge.hpp"

// Miniature latent diffusion stack: VAE, linear-beta scheduler, conditional
// U-Net with cross-attention, DDPM training and ancestral sampling.
namespace ulab::latentcore {

struct NoiseSchedule {
  std::vector<double> betas, alphas, alpha_bars;
  std::size_t steps() const { return betas.size(); }
  // Reverse-process variance, fixed to the forward beta_t.
  double reverse_variance(std::size_t t) const { return betas.at(t); }
};

// beta linearly spaced in [beta_start, beta_end]; alpha = 1 - beta; alpha_bar
// cumulative product.
NoiseSchedule make_schedule(std::size_t steps, double beta_start, double beta_end);

// sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps
Tensor add_noise(const Tensor& z0, std::size_t t, const Tensor& eps, const NoiseSchedule& schedule);
// One forward transition x_{t} ~ N(sqrt(alpha_t) x_{t-1}, (1 - alpha_t) I).
Tensor forward_step(const Tensor& x_prev, std::size_t t, const Tensor& eps, const NoiseSchedule& schedule);

// Mean squared error between predicted and true noise.
Tensor ddpm_loss(const Tensor& eps_hat, const Tensor& eps);

struct VaeConfig {
  std::size_t side = synthworld::kDefaultSide;
  std::size_t latent_channels = 4;
  std::size_t width = 16;
  std::size_t latent_side() const { return side / 4; }
};

struct UnetConfig {
  std::size_t latent_channels = 4;
  std::size_t width = 32;
  std::size_t context_dim = 64;
  std::size_t heads = 4;
  std::size_t groups = 8;
  std::size_t time_dim = 32;
};

struct ScheduleConfig {
  std::size_t steps = 100;
  double beta_start = 1e-4;
  double beta_end = 0.1;
};

struct DiffusionConfig {
  VaeConfig vae;
  UnetConfig unet;
  ScheduleConfig schedule;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static DiffusionConfig from_json(const nlohmann::json& j);
};

class DiffusionModel {
 public:
  explicit DiffusionModel(const DiffusionConfig& config);
  DiffusionModel(const DiffusionModel& other);
  DiffusionModel& operator=(const DiffusionModel&) = delete;

  const DiffusionConfig& config() const { return config_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  Shape latent_shape() const;

  // Posterior mean (scaled), [n, c, h, w].
  Tensor vae_encode(const Tensor& images) const;
  // Returns (mean, logvar) unscaled, for VAE training.
  std::pair<Tensor, Tensor> vae_posterior(const Tensor& images) const;
  // Decoder output in [0,1] via a terminal sigmoid; input is a scaled latent.
  Tensor vae_decode(const Tensor& latents) const;
  Tensor vae_decode_unscaled(const Tensor& latents) const;
  double latent_scale() const { return latent_scale_[0]; }
  void set_latent_scale(double s);

  Tensor vae_encode(const Image& image) const;
  Image vae_decode_one(const Tensor& latent) const;

  // z_t [n,c,h,w], timesteps (one per row), cond [n, context_dim] -> eps_hat.
  Tensor unet_predict(const Tensor& z_t, const std::vector<std::size_t>& t, const Tensor& cond) const;
  // n rows of the learned null token; as cond it yields the unconditional
  // context [null, null].
  Tensor null_condition(std::size_t n) const;

  // Ancestral sampling from N(0, I) with `steps` evenly respaced timesteps
  // (steps == schedule length is the plain reverse chain). Each row draws
  // its noise from its own seed, so batching never changes a sample.
  // guidance != 1 mixes eps_u + w (eps_c - eps_u) with the null condition.
  Tensor sample_latents(const Tensor& cond, std::size_t steps, const std::vector<std::uint64_t>& seeds,
                        double guidance = 1.0) const;
  std::vector<Image> sample(const Tensor& cond, std::size_t steps, const std::vector<std::uint64_t>& seeds,
                            double guidance = 1.0) const;

  bool is_vae_param(const std::string& name) const { return name.rfind("vae.", 0) == 0; }

 private:
  struct ResBlock {
    GroupNorm gn1, gn2;
    Conv2d conv1, conv2, skip;
    Linear temb;
    Tensor operator()(const Tensor& x, const Tensor& temb_act) const;
  };
  struct CrossAttn {
    LayerNorm ln;
    Linear q, k, v, o;
    std::size_t heads = 1;
    Tensor operator()(const Tensor& x, const Tensor& context) const;
  };
  void build(Rng& rng);
  Tensor time_features(const std::vector<std::size_t>& t) const;

  DiffusionConfig config_;
  NoiseSchedule schedule_;
  ParamSet params_;
  // VAE
  Conv2d enc1_, enc2_, enc3_, enc_out_, dec_in_, dec1_, dec2_, dec_out_;
  Tensor latent_scale_;
  // U-Net
  Linear time1_, time2_;
  Conv2d conv_in_, down_, conv_out_;
  ResBlock rb_down_, rb_mid_, rb_up_;
  CrossAttn attn_down_, attn_mid_;
  GroupNorm out_norm_;
  Tensor null_token_;
};

struct TrainConfig {
  std::size_t vae_epochs = 2;
  std::size_t unet_epochs = 40;
  std::size_t batch = 16;
  double vae_lr = 2e-3;
  double unet_lr = 1e-3;
  double kl_weight = 1e-3;
  double cond_dropout = 0.1;  // fraction of U-Net rows trained on the null condition
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct TrainLog {
  std::vector<double> vae_epoch_loss;
  std::vector<double> unet_epoch_loss;
};

// Trains the VAE, fixes the latent scale to unit variance, then trains the
// U-Net on the noise-prediction objective conditioned on the frozen text
// embeddings P f of each caption.
TrainLog train_diffusion(DiffusionModel& model, const synthworld::Corpus& corpus,
                         const textbridge::DualEncoder& encoder, const TrainConfig& config);

// Mean per-pixel squared error of decode(encode(x)).
double reconstruction_mse(const DiffusionModel& model, const synthworld::Corpus& corpus);

void save_diffusion(const std::filesystem::path& dir, const DiffusionModel& model, nlohmann::json meta = {});
DiffusionModel load_diffusion(const std::filesystem::path& dir);

}  // namespace ulab::latentcore
