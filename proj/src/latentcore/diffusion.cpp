// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <numeric>

#include "ulab/checkpoint.hpp"
#include "ulab/errors.hpp"
#include "ulab/latentcore.hpp"
#include "ulab/optim.hpp"

namespace ulab::latentcore {

nlohmann::json DiffusionConfig::to_json() const {
  return {{"vae", {{"side", vae.side}, {"latent_channels", vae.latent_channels}, {"width", vae.width}}},
          {"unet",
           {{"latent_channels", unet.latent_channels},
            {"width", unet.width},
            {"context_dim", unet.context_dim},
            {"heads", unet.heads},
            {"groups", unet.groups},
            {"time_dim", unet.time_dim}}},
          {"schedule",
           {{"steps", schedule.steps}, {"beta_start", schedule.beta_start}, {"beta_end", schedule.beta_end}}},
          {"seed", seed}};
}

DiffusionConfig DiffusionConfig::from_json(const nlohmann::json& j) {
  DiffusionConfig c;
  if (j.contains("vae")) {
    const auto& v = j.at("vae");
    c.vae.side = v.value("side", c.vae.side);
    c.vae.latent_channels = v.value("latent_channels", c.vae.latent_channels);
    c.vae.width = v.value("width", c.vae.width);
  }
  if (j.contains("unet")) {
    const auto& u = j.at("unet");
    c.unet.latent_channels = u.value("latent_channels", c.unet.latent_channels);
    c.unet.width = u.value("width", c.unet.width);
    c.unet.context_dim = u.value("context_dim", c.unet.context_dim);
    c.unet.heads = u.value("heads", c.unet.heads);
    c.unet.groups = u.value("groups", c.unet.groups);
    c.unet.time_dim = u.value("time_dim", c.unet.time_dim);
  }
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    c.schedule.steps = s.value("steps", c.schedule.steps);
    c.schedule.beta_start = s.value("beta_start", c.schedule.beta_start);
    c.schedule.beta_end = s.value("beta_end", c.schedule.beta_end);
  }
  c.seed = j.value("seed", c.seed);
  return c;
}

nlohmann::json TrainConfig::to_json() const {
  return {{"vae_epochs", vae_epochs}, {"unet_epochs", unet_epochs}, {"batch", batch}, {"vae_lr", vae_lr},
          {"unet_lr", unet_lr},       {"kl_weight", kl_weight},     {"cond_dropout", cond_dropout},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.vae_epochs = j.value("vae_epochs", c.vae_epochs);
  c.unet_epochs = j.value("unet_epochs", c.unet_epochs);
  c.batch = j.value("batch", c.batch);
  c.vae_lr = j.value("vae_lr", c.vae_lr);
  c.unet_lr = j.value("unet_lr", c.unet_lr);
  c.kl_weight = j.value("kl_weight", c.kl_weight);
  c.cond_dropout = j.value("cond_dropout", c.cond_dropout);
  c.seed = j.value("seed", c.seed);
  return c;
}

DiffusionModel::DiffusionModel(const DiffusionConfig& config)
    : config_(config),
      schedule_(make_schedule(config.schedule.steps, config.schedule.beta_start, config.schedule.beta_end)) {
  require(config.vae.side % 4 == 0 && config.vae.side >= 16, "VAE side must be a multiple of 4, at least 16");
  require(config.vae.latent_channels == config.unet.latent_channels, "VAE and U-Net latent channels differ");
  require(config.vae.latent_side() % 2 == 0, "latent side must be even for the U-Net downsample");
  require(config.unet.width % config.unet.groups == 0 && config.unet.width % config.unet.heads == 0,
          "U-Net width must divide into groups and heads");
  Rng rng(derive_seed(config.seed, "latentcore.init"));
  build(rng);
}

DiffusionModel::DiffusionModel(const DiffusionModel& other) : config_(other.config_), schedule_(other.schedule_) {
  Rng rng(0);
  build(rng);
  params_.copy_values_from(other.params_);
}

void DiffusionModel::build(Rng& rng) {
  const auto& v = config_.vae;
  const std::size_t w = v.width, lc = v.latent_channels;
  enc1_ = Conv2d(params_, "vae.enc1", 3, w, 3, 1, 1, rng);
  enc2_ = Conv2d(params_, "vae.enc2", w, 2 * w, 3, 2, 1, rng);
  enc3_ = Conv2d(params_, "vae.enc3", 2 * w, 4 * w, 3, 2, 1, rng);
  enc_out_ = Conv2d(params_, "vae.enc_out", 4 * w, 2 * lc, 3, 1, 1, rng);
  dec_in_ = Conv2d(params_, "vae.dec_in", lc, 2 * w, 3, 1, 1, rng);
  dec1_ = Conv2d(params_, "vae.dec1", 2 * w, w, 3, 1, 1, rng);
  dec2_ = Conv2d(params_, "vae.dec2", w, w, 3, 1, 1, rng);
  dec_out_ = Conv2d(params_, "vae.dec_out", w, 3, 3, 1, 1, rng);
  latent_scale_ = params_.add_constant("vae.latent_scale", {1}, 1.0);

  const auto& u = config_.unet;
  const std::size_t c = u.width, tdim = 4 * u.width;
  time1_ = Linear(params_, "unet.time1", u.time_dim, tdim, rng);
  time2_ = Linear(params_, "unet.time2", tdim, tdim, rng);
  conv_in_ = Conv2d(params_, "unet.conv_in", u.latent_channels, c, 3, 1, 1, rng);
  auto resblock = [&](const std::string& name, std::size_t in, std::size_t out) {
    ResBlock rb;
    rb.gn1 = GroupNorm(params_, name + ".gn1", in, u.groups);
    rb.conv1 = Conv2d(params_, name + ".conv1", in, out, 3, 1, 1, rng);
    rb.temb = Linear(params_, name + ".temb", tdim, out, rng);
    rb.gn2 = GroupNorm(params_, name + ".gn2", out, u.groups);
    rb.conv2 = Conv2d(params_, name + ".conv2", out, out, 3, 1, 1, rng);
    if (in != out) rb.skip = Conv2d(params_, name + ".skip", in, out, 1, 1, 0, rng);
    return rb;
  };
  auto crossattn = [&](const std::string& name, std::size_t ch) {
    CrossAttn a;
    a.heads = u.heads;
    a.ln = LayerNorm(params_, name + ".ln", ch);
    a.q = Linear(params_, name + ".q", ch, ch, rng, false);
    a.k = Linear(params_, name + ".k", u.context_dim, ch, rng, false);
    a.v = Linear(params_, name + ".v", u.context_dim, ch, rng, false);
    a.o = Linear(params_, name + ".o", ch, ch, rng);
    return a;
  };
  rb_down_ = resblock("unet.down.res", c, c);
  attn_down_ = crossattn("unet.down.attn", c);
  down_ = Conv2d(params_, "unet.downsample", c, 2 * c, 3, 2, 1, rng);
  rb_mid_ = resblock("unet.mid.res", 2 * c, 2 * c);
  attn_mid_ = crossattn("unet.mid.attn", 2 * c);
  rb_up_ = resblock("unet.up.res", 3 * c, c);
  out_norm_ = GroupNorm(params_, "unet.out_norm", c, u.groups);
  conv_out_ = Conv2d(params_, "unet.conv_out", c, u.latent_channels, 3, 1, 1, rng);
  null_token_ = params_.add("unet.null_token", {u.context_dim}, 0.1, rng);
}

Shape DiffusionModel::latent_shape() const {
  const std::size_t s = config_.vae.latent_side();
  return {config_.vae.latent_channels, s, s};
}

void DiffusionModel::set_latent_scale(double s) {
  require(std::isfinite(s) && s > 0.0, "latent scale must be positive");
  latent_scale_.data()[0] = s;
}

std::pair<Tensor, Tensor> DiffusionModel::vae_posterior(const Tensor& images) const {
  const std::size_t side = config_.vae.side;
  require(images.rank() == 4 && images.dim(1) == 3 && images.dim(2) == side && images.dim(3) == side,
          "vae_encode: expected [n,3," + std::to_string(side) + "," + std::to_string(side) + "], got " +
              shape_str(images.shape()));
  Tensor h = silu(enc1_(images));
  h = silu(enc2_(h));
  h = silu(enc3_(h));
  h = enc_out_(h);
  const std::size_t lc = config_.vae.latent_channels;
  return {slice_channels(h, 0, lc), slice_channels(h, lc, 2 * lc)};
}

Tensor DiffusionModel::vae_encode(const Tensor& images) const {
  return scale(vae_posterior(images).first, latent_scale());
}

Tensor DiffusionModel::vae_encode(const Image& image) const {
  return vae_encode(images_to_tensor(std::span<const Image>(&image, 1)));
}

Tensor DiffusionModel::vae_decode_unscaled(const Tensor& z) const {
  const Shape ls = latent_shape();
  require(z.rank() == 4 && z.dim(1) == ls[0] && z.dim(2) == ls[1] && z.dim(3) == ls[2],
          "vae_decode: latent shape " + shape_str(z.shape()) + " does not match " + shape_str(ls));
  Tensor h = silu(dec_in_(z));
  h = silu(dec1_(upsample_nearest2x(h)));
  h = silu(dec2_(upsample_nearest2x(h)));
  return sigmoid(dec_out_(h));
}

Tensor DiffusionModel::vae_decode(const Tensor& z) const { return vae_decode_unscaled(scale(z, 1.0 / latent_scale())); }

Image DiffusionModel::vae_decode_one(const Tensor& latent) const {
  Tensor z = latent.rank() == 3 ? reshape(latent, {1, latent.dim(0), latent.dim(1), latent.dim(2)}) : latent;
  return tensor_to_images(vae_decode(z)).at(0);
}

Tensor DiffusionModel::ResBlock::operator()(const Tensor& x, const Tensor& temb_act) const {
  Tensor h = conv1(silu(gn1(x)));
  h = add_channel_vector(h, temb(temb_act));
  h = conv2(silu(gn2(h)));
  return add(h, skip.weight.defined() ? skip(x) : x);
}

Tensor DiffusionModel::CrossAttn::operator()(const Tensor& x, const Tensor& context) const {
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const std::size_t m = context.dim(1), cd = context.dim(2);
  Tensor tokens = reshape(transpose(reshape(x, {n, c, hw})), {n * hw, c});
  Tensor h = ln(tokens);
  Tensor ctx = reshape(context, {n * m, cd});
  Tensor a = attention(reshape(q(h), {n, hw, c}), reshape(k(ctx), {n, m, c}), reshape(v(ctx), {n, m, c}), heads,
                       false);
  Tensor out = o(reshape(a, {n * hw, c}));
  Tensor back = reshape(transpose(reshape(out, {n, hw, c})), x.shape());
  return add(x, back);
}

Tensor DiffusionModel::time_features(const std::vector<std::size_t>& t) const {
  const std::size_t dim = config_.unet.time_dim, half = dim / 2;
  std::vector<double> v(t.size() * dim);
  for (std::size_t i = 0; i < t.size(); ++i)
    for (std::size_t j = 0; j < half; ++j) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) / static_cast<double>(half));
      v[i * dim + j] = std::sin(static_cast<double>(t[i]) * freq);
      v[i * dim + half + j] = std::cos(static_cast<double>(t[i]) * freq);
    }
  return Tensor::from({t.size(), dim}, std::move(v));
}

Tensor DiffusionModel::unet_predict(const Tensor& z_t, const std::vector<std::size_t>& t, const Tensor& cond) const {
  const Shape ls = latent_shape();
  require(z_t.rank() == 4 && z_t.dim(1) == ls[0] && z_t.dim(2) == ls[1] && z_t.dim(3) == ls[2],
          "unet_predict: latent shape " + shape_str(z_t.shape()) + " does not match " + shape_str(ls));
  const std::size_t n = z_t.dim(0);
  require(t.size() == n, "unet_predict: one timestep per sample required");
  for (auto ti : t) require(ti < schedule_.steps(), "unet_predict: timestep out of range");
  require(cond.rank() == 2 && cond.dim(0) == n && cond.dim(1) == config_.unet.context_dim,
          "unet_predict: conditioning shape " + shape_str(cond.shape()) + " incompatible");
  Tensor temb = silu(time2_(silu(time1_(time_features(t)))));
  Tensor ctx = append_token(cond, null_token_);
  Tensor h0 = conv_in_(z_t);
  Tensor skip = attn_down_(rb_down_(h0, temb), ctx);
  Tensor mid = attn_mid_(rb_mid_(down_(skip), temb), ctx);
  Tensor up = rb_up_(concat_channels(upsample_nearest2x(mid), skip), temb);
  return conv_out_(silu(out_norm_(up)));
}

Tensor DiffusionModel::null_condition(std::size_t n) const {
  const std::size_t d = config_.unet.context_dim;
  return matmul(Tensor::full({n, 1}, 1.0), reshape(null_token_, {1, d}));
}

Tensor DiffusionModel::sample_latents(const Tensor& cond, std::size_t steps, const std::vector<std::uint64_t>& seeds,
                                      double guidance) const {
  require(steps >= 1, "sampling needs at least one step");
  require(std::isfinite(guidance), "guidance scale must be finite");
  require(steps <= schedule_.steps(), "sampling steps exceed the schedule length");
  require(cond.rank() == 2 && cond.dim(0) == seeds.size(), "sample: one seed per conditioning row");
  NoGradGuard ng;
  const std::size_t n = seeds.size(), per = numel(latent_shape());
  const std::size_t T = schedule_.steps();
  std::vector<std::size_t> taus(steps);
  for (std::size_t i = 0; i < steps; ++i)
    taus[i] = steps == 1 ? T - 1 : static_cast<std::size_t>(std::llround(static_cast<double>(i) * (T - 1) / (steps - 1)));
  std::vector<Rng> rngs;
  for (auto s : seeds) rngs.emplace_back(s);
  Shape shape{n};
  for (auto d : latent_shape()) shape.push_back(d);
  std::vector<double> x(n * per);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t i = 0; i < per; ++i) x[j * per + i] = rngs[j].normal();
  const bool guided = guidance != 1.0;
  Tensor cond_d = cond.detach();
  if (guided) {
    std::vector<double> both(cond_d.values());
    const Tensor nc = null_condition(n);
    both.insert(both.end(), nc.values().begin(), nc.values().end());
    cond_d = Tensor::from({2 * n, cond.dim(1)}, std::move(both));
  }
  Shape batch_shape = shape;
  if (guided) batch_shape[0] = 2 * n;
  for (std::size_t i = steps; i-- > 0;) {
    const std::size_t t = taus[i];
    const double ab = schedule_.alpha_bars[t];
    const double ab_prev = i > 0 ? schedule_.alpha_bars[taus[i - 1]] : 1.0;
    const double alpha = ab / ab_prev, beta = 1.0 - alpha;
    std::vector<double> xin(x);
    if (guided) xin.insert(xin.end(), x.begin(), x.end());
    Tensor out = unet_predict(Tensor::from(batch_shape, std::move(xin)), std::vector<std::size_t>(batch_shape[0], t),
                              cond_d);
    std::vector<double> eps(out.values().begin(), out.values().begin() + static_cast<std::ptrdiff_t>(n * per));
    if (guided)
      for (std::size_t k = 0; k < n * per; ++k) eps[k] = out[n * per + k] + guidance * (eps[k] - out[n * per + k]);
    const double coef = beta / std::sqrt(1.0 - ab), inv_sqrt_a = 1.0 / std::sqrt(alpha);
    const double sigma = std::sqrt(beta);  // fixed reverse variance
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < per; ++k) {
        double& xv = x[j * per + k];
        xv = inv_sqrt_a * (xv - coef * eps[j * per + k]);
        if (i > 0) xv += sigma * rngs[j].normal();
      }
  }
  return Tensor::from(shape, std::move(x));
}

std::vector<Image> DiffusionModel::sample(const Tensor& cond, std::size_t steps,
                                          const std::vector<std::uint64_t>& seeds, double guidance) const {
  NoGradGuard ng;
  return tensor_to_images(vae_decode(sample_latents(cond, steps, seeds, guidance)));
}

namespace {

std::vector<std::vector<std::size_t>> shuffled_batches(std::size_t n, std::size_t batch, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng.engine());
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < n; s += batch)
    out.emplace_back(order.begin() + s, order.begin() + std::min(n, s + batch));
  return out;
}

std::vector<Tensor> params_with_prefix(const ParamSet& ps, const std::string& prefix, bool exclude_scale) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : ps.entries())
    if (name.rfind(prefix, 0) == 0 && !(exclude_scale && name == "vae.latent_scale")) out.push_back(t);
  return out;
}

}  // namespace

TrainLog train_diffusion(DiffusionModel& model, const synthworld::Corpus& corpus,
                         const textbridge::DualEncoder& encoder, const TrainConfig& cfg) {
  require(corpus.split == synthworld::Split::pretrain, "train_diffusion needs a pretrain split corpus");
  require(!corpus.items.empty() && cfg.batch >= 1, "train_diffusion: empty corpus or batch");
  require(cfg.cond_dropout >= 0.0 && cfg.cond_dropout < 1.0, "cond_dropout must lie in [0, 1)");
  require(encoder.config().d == model.config().unet.context_dim, "encoder width differs from U-Net context");
  TrainLog log;
  const std::size_t n = corpus.items.size();

  // VAE stage.
  {
    auto params = params_with_prefix(model.params(), "vae.", true);
    for (auto& p : params) p.set_requires_grad(true);
    Adam opt(params, cfg.vae_lr);
    Rng rng(derive_seed(cfg.seed, "latentcore.vae"));
    for (std::size_t epoch = 0; epoch < cfg.vae_epochs; ++epoch) {
      double total = 0.0;
      auto batches = shuffled_batches(n, cfg.batch, rng);
      for (const auto& b : batches) {
        std::vector<Image> imgs;
        for (auto i : b) imgs.push_back(corpus.items[i].image);
        Tensor x = images_to_tensor(imgs);
        auto [mu, logvar] = model.vae_posterior(x);
        std::vector<double> noise(mu.size());
        for (auto& e : noise) e = rng.normal();
        Tensor z = add(mu, mul(exp(scale(logvar, 0.5)), Tensor::from(mu.shape(), std::move(noise))));
        Tensor recon = model.vae_decode_unscaled(z);
        Tensor kl = scale(mean(sub(add(square(mu), exp(logvar)), add_scalar(logvar, 1.0))), 0.5);
        Tensor loss = add(mse(recon, x), scale(kl, cfg.kl_weight));
        if (!std::isfinite(loss.item()))
          throw RuntimeFailure("VAE training diverged (NaN loss) in epoch " + std::to_string(epoch));
        loss.backward();
        opt.step();
        total += loss.item() * static_cast<double>(b.size());
      }
      log.vae_epoch_loss.push_back(total / static_cast<double>(n));
    }
    for (auto& p : params) p.set_requires_grad(false);
  }

  std::vector<Tensor> latents;  // unit-scaled posterior means, one [c,h,w] block per item
  if (cfg.vae_epochs > 0 || cfg.unet_epochs > 0) {
    NoGradGuard ng;
    std::vector<Tensor> raw;
    double sq = 0.0;
    std::size_t count = 0;
    for (std::size_t s = 0; s < n; s += 64) {
      std::vector<Image> imgs;
      for (std::size_t i = s; i < std::min(n, s + 64); ++i) imgs.push_back(corpus.items[i].image);
      Tensor mu = model.vae_posterior(images_to_tensor(imgs)).first;
      for (double v : mu.values()) sq += v * v;
      count += mu.size();
      raw.push_back(mu);
    }
    if (cfg.vae_epochs > 0) model.set_latent_scale(1.0 / std::sqrt(sq / static_cast<double>(count)));
    for (auto& r : raw) latents.push_back(scale(r, model.latent_scale()));
  }

  // U-Net stage.
  {
    const std::size_t per = numel(model.latent_shape());
    std::vector<double> flat;
    for (const auto& l : latents) flat.insert(flat.end(), l.values().begin(), l.values().end());
    Tensor cond_table;
    {
      NoGradGuard ng;
      std::vector<std::string> captions;
      for (const auto& c : synthworld::vocabulary()) captions.push_back(synthworld::make_caption(c));
      cond_table = encoder.embed_text(captions).detach();
    }
    auto params = params_with_prefix(model.params(), "unet.", false);
    for (auto& p : params) p.set_requires_grad(true);
    Adam opt(params, cfg.unet_lr);
    Rng rng(derive_seed(cfg.seed, "latentcore.unet"));
    const auto& sched = model.schedule();
    const std::size_t d = model.config().unet.context_dim;
    for (std::size_t epoch = 0; epoch < cfg.unet_epochs; ++epoch) {
      double total = 0.0;
      auto batches = shuffled_batches(n, cfg.batch, rng);
      for (const auto& b : batches) {
        const std::size_t bn = b.size();
        std::vector<double> zt(bn * per), eps(bn * per), cond(bn * d), keep(bn), drop(bn);
        std::vector<std::size_t> ts(bn);
        for (std::size_t j = 0; j < bn; ++j) {
          drop[j] = rng.uniform() < cfg.cond_dropout ? 1.0 : 0.0;
          keep[j] = 1.0 - drop[j];
          ts[j] = rng.index(sched.steps());
          const double ab = sched.alpha_bars[ts[j]];
          for (std::size_t k = 0; k < per; ++k) {
            eps[j * per + k] = rng.normal();
            zt[j * per + k] = std::sqrt(ab) * flat[b[j] * per + k] + std::sqrt(1.0 - ab) * eps[j * per + k];
          }
          const std::size_t ci = corpus.items[b[j]].label.index();
          for (std::size_t k = 0; k < d; ++k) cond[j * d + k] = keep[j] * cond_table[ci * d + k];
        }
        Shape shape{bn};
        for (auto s : model.latent_shape()) shape.push_back(s);
        Tensor c = Tensor::from({bn, d}, cond);
        if (cfg.cond_dropout > 0.0)
          c = add(c, matmul(Tensor::from({bn, 1}, drop), reshape(model.null_condition(1), {1, d})));
        Tensor pred = model.unet_predict(Tensor::from(shape, zt), ts, c);
        Tensor loss = ddpm_loss(pred, Tensor::from(shape, eps));
        if (!std::isfinite(loss.item()))
          throw RuntimeFailure("U-Net training diverged (NaN loss) in epoch " + std::to_string(epoch));
        loss.backward();
        opt.step();
        total += loss.item() * static_cast<double>(bn);
      }
      log.unet_epoch_loss.push_back(total / static_cast<double>(n));
    }
    for (auto& p : params) p.set_requires_grad(false);
  }
  return log;
}

double reconstruction_mse(const DiffusionModel& model, const synthworld::Corpus& corpus) {
  NoGradGuard ng;
  double sq = 0.0;
  std::size_t count = 0;
  for (std::size_t s = 0; s < corpus.items.size(); s += 64) {
    std::vector<Image> imgs;
    for (std::size_t i = s; i < std::min(corpus.items.size(), s + 64); ++i) imgs.push_back(corpus.items[i].image);
    Tensor x = images_to_tensor(imgs);
    Tensor r = model.vae_decode(model.vae_encode(x));
    for (std::size_t i = 0; i < x.size(); ++i) sq += (x[i] - r[i]) * (x[i] - r[i]);
    count += x.size();
  }
  return sq / static_cast<double>(count);
}

void save_diffusion(const std::filesystem::path& dir, const DiffusionModel& model, nlohmann::json meta) {
  meta["diffusion_config"] = model.config().to_json();
  const auto& s = model.schedule();
  meta["schedule"] = {{"betas", s.betas}, {"alpha_bars", s.alpha_bars}};
  save_checkpoint(dir, model.params(), meta);
}

DiffusionModel load_diffusion(const std::filesystem::path& dir) {
  const auto meta = read_checkpoint_meta(dir);
  DiffusionModel m(DiffusionConfig::from_json(meta.at("diffusion_config")));
  load_checkpoint(dir, m.params());
  return m;
}

}  // namespace ulab::latentcore
