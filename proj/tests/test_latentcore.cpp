#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "doctest.h"
#include "gradcheck.hpp"
#include "ulab/checkpoint.hpp"
#include "ulab/errors.hpp"
#include "ulab/latentcore.hpp"

using namespace ulab;
using namespace ulab::latentcore;
using testutil::gradcheck;
using testutil::randn;

namespace {

DiffusionConfig tiny() {
  DiffusionConfig c;
  c.vae.side = 16;
  c.vae.latent_channels = 2;
  c.vae.width = 4;
  c.unet.latent_channels = 2;
  c.unet.width = 8;
  c.unet.context_dim = 8;
  c.unet.heads = 2;
  c.unet.groups = 2;
  c.unet.time_dim = 8;
  c.schedule.steps = 10;
  c.seed = 4;
  return c;
}

// "unet.down.res.conv1.weight" -> "unet.down.res"
std::string group_of(const std::string& name) {
  const auto a = name.find('.');
  const auto b = name.find('.', a + 1);
  if (name.rfind("unet.down.", 0) == 0 || name.rfind("unet.mid.", 0) == 0 || name.rfind("unet.up.", 0) == 0)
    return name.substr(0, name.find('.', b + 1));
  return name.substr(0, b);
}

}  // namespace

TEST_CASE("schedule hand example") {
  auto s = make_schedule(2, 0.5, 0.5);
  CHECK(s.alphas[0] == doctest::Approx(0.5));
  CHECK(s.alphas[1] == doctest::Approx(0.5));
  CHECK(s.alpha_bars[0] == doctest::Approx(0.5));
  CHECK(s.alpha_bars[1] == doctest::Approx(0.25));
  CHECK(s.reverse_variance(1) == doctest::Approx(0.5));
}

TEST_CASE("schedule invariants") {
  auto s = make_schedule(100, 1e-4, 0.1);
  CHECK(s.steps() == 100);
  CHECK(s.alpha_bars[0] >= 0.99);
  CHECK(s.betas.front() == doctest::Approx(1e-4));
  CHECK(s.betas.back() == doctest::Approx(0.1));
  for (std::size_t t = 0; t < 100; ++t) {
    CHECK(s.alphas[t] > 0.0);
    CHECK(s.alphas[t] < 1.0);
    if (t) CHECK(s.alpha_bars[t] < s.alpha_bars[t - 1]);
  }
  CHECK_THROWS_AS(make_schedule(1, 0.1, 0.2), ValidationError);
  CHECK_THROWS_AS(make_schedule(10, 0.0, 0.2), ValidationError);
  CHECK_THROWS_AS(make_schedule(10, 0.3, 0.2), ValidationError);
  CHECK_THROWS_AS(make_schedule(10, 0.1, 1.0), ValidationError);
}

TEST_CASE("add_noise closed form") {
  auto s = make_schedule(100, 1e-4, 0.1);
  std::mt19937_64 g(1);
  Tensor z0 = randn({2, 3}, g), eps = randn({2, 3}, g);
  Tensor out = add_noise(z0, 0, eps, s);
  for (std::size_t i = 0; i < 6; ++i)
    CHECK(out[i] == doctest::Approx(std::sqrt(s.alpha_bars[0]) * z0[i] + std::sqrt(1 - s.alpha_bars[0]) * eps[i]));
  // alpha_bar -> 1 as beta -> 0
  auto tiny_beta = make_schedule(2, 1e-14, 1e-14);
  Tensor same = add_noise(z0, 0, eps, tiny_beta);
  for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(same[i] - z0[i]) < 1e-6);
  Tensor zero = add_noise(Tensor::zeros({2, 3}), 57, eps, s);
  for (std::size_t i = 0; i < 6; ++i) CHECK(zero[i] == std::sqrt(1 - s.alpha_bars[57]) * eps[i]);
  CHECK_THROWS_AS(add_noise(z0, 0, Tensor::zeros({3, 2}), s), ValidationError);
  CHECK_THROWS_AS(add_noise(z0, 100, eps, s), ValidationError);
}

TEST_CASE("ddpm loss") {
  Tensor a = Tensor::from({2}, {1, 0}), b = Tensor::from({2}, {0, 0});
  CHECK(ddpm_loss(a, b).item() == doctest::Approx(0.5));
  CHECK(ddpm_loss(a, a).item() == 0.0);
  std::mt19937_64 g(2);
  Tensor x = randn({5}, g), y = randn({5}, g);
  CHECK(ddpm_loss(x, y).item() == ddpm_loss(y, x).item());
  CHECK(ddpm_loss(x, y).item() >= 0.0);
  CHECK_THROWS_AS(ddpm_loss(a, Tensor::zeros({3})), ValidationError);
}

TEST_CASE("VAE encode/decode contracts") {
  DiffusionModel m(tiny());
  Image blank(16);
  Tensor z1 = m.vae_encode(blank), z2 = m.vae_encode(blank);
  CHECK(z1.values() == z2.values());
  CHECK(z1.shape() == Shape{1, 2, 4, 4});
  for (double v : z1.values()) CHECK(std::isfinite(v));
  std::mt19937_64 g(3);
  std::uniform_real_distribution<double> u(-10, 10);
  std::vector<double> lv(2 * 2 * 4 * 4);
  for (auto& v : lv) v = u(g);
  Tensor big = Tensor::from({2, 2, 4, 4}, lv);
  Tensor img = m.vae_decode(big);
  for (double v : img.values()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK(m.vae_decode(big).values() == img.values());
  CHECK_THROWS_AS(m.vae_encode(Image(32)), ValidationError);
  CHECK_THROWS_AS(m.vae_decode(Tensor::zeros({1, 3, 4, 4})), ValidationError);
}

TEST_CASE("unet output shape, finiteness, shape errors") {
  DiffusionModel m(tiny());
  std::mt19937_64 g(4);
  Tensor z = randn({3, 2, 4, 4}, g), c = randn({3, 8}, g);
  Tensor e = m.unet_predict(z, {0, 5, 9}, c);
  CHECK(e.shape() == z.shape());
  for (double v : e.values()) CHECK(std::isfinite(v));
  CHECK_THROWS_AS(m.unet_predict(z, {0, 1}, c), ValidationError);
  CHECK_THROWS_AS(m.unet_predict(z, {0, 1, 10}, c), ValidationError);
  CHECK_THROWS_AS(m.unet_predict(z, {0, 1, 2}, randn({3, 7}, g)), ValidationError);
  CHECK_THROWS_AS(m.unet_predict(randn({3, 2, 6, 6}, g), {0, 1, 2}, c), ValidationError);
}

TEST_CASE("unet gradient with respect to cond") {
  DiffusionModel m(tiny());
  std::mt19937_64 g(5);
  Tensor z = randn({2, 2, 4, 4}, g), c = randn({2, 8}, g);
  auto rep = gradcheck([&] { return mean(m.unet_predict(z, {3, 7}, c)); }, {c});
  INFO(rep.worst);
  CHECK(rep.max_rel < 1e-4);
}

TEST_CASE("ddpm loss gradient for every U-Net parameter group") {
  DiffusionModel m(tiny());
  std::mt19937_64 g(6);
  Tensor z = randn({2, 2, 4, 4}, g), eps = randn({2, 2, 4, 4}, g), c = randn({2, 8}, g);
  std::map<std::string, std::vector<Tensor>> groups;
  for (const auto& [name, t] : m.params().entries())
    if (name.rfind("unet.", 0) == 0) groups[group_of(name)].push_back(t);
  CHECK(groups.size() >= 10);
  for (auto& [group, params] : groups) {
    auto rep = gradcheck([&] { return ddpm_loss(m.unet_predict(z, {2, 8}, c), eps); }, params, 1e-5, 12);
    INFO(group << ": " << rep.worst);
    CHECK(rep.max_rel < 1e-4);
  }
}

TEST_CASE("VAE loss gradient for encoder and decoder") {
  DiffusionModel m(tiny());
  std::mt19937_64 g(7);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> px(2 * 3 * 16 * 16);
  for (auto& v : px) v = u(g);
  Tensor x = Tensor::from({2, 3, 16, 16}, px);
  std::vector<Tensor> params;
  for (const auto& [name, t] : m.params().entries())
    if (name.rfind("vae.", 0) == 0 && name != "vae.latent_scale") params.push_back(t);
  auto rep = gradcheck(
      [&] {
        auto [mu, logvar] = m.vae_posterior(x);
        return add(mse(m.vae_decode_unscaled(mu), x), scale(mean(square(logvar)), 0.1));
      },
      params, 1e-5, 8);
  INFO(rep.worst);
  CHECK(rep.max_rel < 1e-4);
}

TEST_CASE("sampling: determinism, batching, step checks") {
  DiffusionModel m(tiny());
  std::mt19937_64 g(8);
  Tensor c = randn({2, 8}, g);
  auto a = m.sample(c, 10, {1, 2});
  auto b = m.sample(c, 10, {1, 2});
  REQUIRE(a.size() == 2);
  CHECK(a[0] == b[0]);
  CHECK(a[1] == b[1]);
  Tensor c1 = Tensor::from({1, 8}, std::vector<double>(c.values().begin() + 8, c.values().end()));
  auto solo = m.sample(c1, 10, {2});
  CHECK(solo[0] == a[1]);
  auto guided = m.sample(c, 4, {1, 2}, 2.5);
  CHECK(guided.size() == 2);
  Tensor lat = m.sample_latents(c, 5, {1, 2});
  for (double v : lat.values()) CHECK(std::isfinite(v));
  CHECK_THROWS_AS(m.sample(c, 0, {1, 2}), ValidationError);
  CHECK_THROWS_AS(m.sample(c, 11, {1, 2}), ValidationError);
  CHECK_THROWS_AS(m.sample(c, 5, {1}), ValidationError);
}

TEST_CASE("training: zero epochs keeps init, runs are reproducible") {
  textbridge::EncoderConfig ec;
  ec.d = 8;
  ec.heads = 2;
  ec.image_side = 16;
  ec.image_width = 4;
  textbridge::DualEncoder enc(ec);
  auto corpus = synthworld::build_corpus(synthworld::Split::pretrain, std::nullopt, 32, 2,
                                         synthworld::CorpusOptions{16});
  DiffusionModel init(tiny());
  TrainConfig zero;
  zero.vae_epochs = 0;
  zero.unet_epochs = 0;
  DiffusionModel m0(tiny());
  train_diffusion(m0, corpus, enc, zero);
  CHECK(blob_hashes(m0.params()) == blob_hashes(init.params()));

  TrainConfig tc;
  tc.vae_epochs = 1;
  tc.unet_epochs = 2;
  tc.batch = 8;
  DiffusionModel a(tiny()), b(tiny());
  auto la = train_diffusion(a, corpus, enc, tc);
  auto lb = train_diffusion(b, corpus, enc, tc);
  CHECK(la.unet_epoch_loss == lb.unet_epoch_loss);
  CHECK(la.unet_epoch_loss.size() == 2);
  CHECK(blob_hashes(a.params()) == blob_hashes(b.params()));
  CHECK(a.latent_scale() > 0.0);
  auto evalc = synthworld::build_corpus(synthworld::Split::eval, std::nullopt, 16, 2, synthworld::CorpusOptions{16});
  CHECK_THROWS_AS(train_diffusion(a, evalc, enc, tc), ValidationError);
}

TEST_CASE("diffusion checkpoint round-trips bit-exactly") {
  DiffusionModel m(tiny());
  quantize_f32(m.params());
  const auto dir = std::filesystem::temp_directory_path() / "ulab_test_diffusion";
  std::filesystem::remove_all(dir);
  save_diffusion(dir, m, {{"note", "roundtrip"}});
  DiffusionModel back = load_diffusion(dir);
  CHECK(blob_hashes(back.params()) == blob_hashes(m.params()));
  for (const auto& [name, t] : m.params().entries()) CHECK(back.params().get(name).values() == t.values());
  CHECK(back.config().to_json() == m.config().to_json());
  CHECK(read_checkpoint_meta(dir).at("note") == "roundtrip");
  std::filesystem::remove_all(dir);
}

TEST_CASE("tampered checkpoint is rejected") {
  DiffusionModel m(tiny());
  const auto dir = std::filesystem::temp_directory_path() / "ulab_test_tamper";
  std::filesystem::remove_all(dir);
  save_diffusion(dir, m);
  {
    std::fstream f(dir / "params.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(5);
    f.put('\x7f');
  }
  CHECK_THROWS(load_diffusion(dir));
  std::filesystem::remove_all(dir);
}
