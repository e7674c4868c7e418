// SPDX-License-Identifier: Apache-2.0
#include "ulab/lru.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>

#include "ulab/checkpoint.hpp"
#include "ulab/errors.hpp"
#include "ulab/optim.hpp"

namespace ulab::lru {

using latentcore::DiffusionModel;
using textbridge::DualEncoder;

LowRankPerturbation init_low_rank(std::size_t d, std::size_t r, std::uint64_t seed, double init_std) {
  require(d >= 1, "low-rank dimension must be positive");
  require(r >= 1 && r <= d, "rank must satisfy 1 <= r <= d (got r=" + std::to_string(r) + ", d=" +
                                std::to_string(d) + ")");
  require(init_std >= 0.0, "init_std must be non-negative");
  Rng rng(derive_seed(seed, "lru.low_rank"));
  std::vector<double> a(d * r), b(d * r);
  for (auto& v : a) v = rng.normal(0.0, init_std);
  for (auto& v : b) v = rng.normal(0.0, init_std);
  return {Tensor::from({d, r}, std::move(a), true), Tensor::from({d, r}, std::move(b), true)};
}

Tensor delta_p(const LowRankPerturbation& lrp) {
  require(lrp.a.defined() && lrp.b.defined(), "low-rank factors are empty");
  return matmul(lrp.a, lrp.b, false, true);
}

bool ParamPartition::is_trainable(const std::string& qualified) const {
  for (const auto& n : trainable)
    if (n == qualified) return true;
  return false;
}

ParamPartition apply_freeze_policy(DiffusionModel& diffusion, DualEncoder& encoder, std::size_t trainable_blocks,
                                   bool with_low_rank, bool with_final_norm) {
  const std::size_t blocks = encoder.config().blocks;
  if (trainable_blocks > blocks)
    throw ValidationError("cannot unfreeze " + std::to_string(trainable_blocks) + " blocks: encoder has " +
                          std::to_string(blocks));
  std::set<std::string> open_groups;
  if (with_final_norm) open_groups.insert("text.final_norm");
  for (std::size_t i = blocks - trainable_blocks; i < blocks; ++i) open_groups.insert("text.block" + std::to_string(i));

  ParamPartition part;
  for (const auto& [name, t] : diffusion.params().entries()) {
    Tensor h = t;
    h.set_requires_grad(false);
    part.frozen.push_back("diffusion/" + name);
  }
  for (const auto& [name, t] : encoder.params().entries()) {
    Tensor h = t;
    const bool open = open_groups.count(textbridge::parameter_group(name)) > 0;
    h.set_requires_grad(open);
    (open ? part.trainable : part.frozen).push_back("encoder/" + name);
  }
  if (with_low_rank) {
    part.trainable.push_back("lora.A");
    part.trainable.push_back("lora.B");
  }
  return part;
}

ForgetTarget sample_forget_target(std::size_t d, std::size_t n_f, std::uint64_t seed, double spread,
                                  SpreadReading reading) {
  require(d >= 1 && n_f >= 1, "forget target needs positive dimensions");
  require(spread > 0.0, "forget target spread must be positive");
  const double sd = reading == SpreadReading::variance ? std::sqrt(spread) : spread;
  Rng rng(derive_seed(seed, "lru.forget_target"));
  std::vector<double> v(d * n_f);
  for (auto& x : v) x = rng.normal(0.0, sd);
  return {Tensor::from({d, n_f}, std::move(v))};
}

Tensor loss_img(const Tensor& eps_hat, const Tensor& eps) { return scale(mse(eps_hat, eps), -1.0); }

Tensor loss_retain(const Tensor& p, const Tensor& dp, const Tensor& f_r) {
  return mse(textbridge::project(f_r, p, dp), textbridge::project(f_r, p));
}

Tensor loss_forget(const Tensor& p, const Tensor& dp, const Tensor& f_f, const ForgetTarget& target) {
  require(target.values.dim(0) == p.dim(0) && target.values.dim(1) == f_f.dim(0),
          "forget target shape " + shape_str(target.values.shape()) + " does not match features " +
              shape_str(f_f.shape()));
  // rows of project() are columns of (P + dP) f_f^T
  return mse(textbridge::project(f_f, p, dp), transpose(target.values));
}

Tensor loss_reg(const Tensor& dp) { return frobenius_norm(dp); }

Tensor total_loss(const Tensor& l_img, const Tensor& l_retain, const Tensor& l_forget, const Tensor& l_reg,
                  const UnlearnConfig& c) {
  return add(add(l_img, scale(l_retain, c.lambda1)), add(scale(l_forget, c.lambda2), scale(l_reg, c.lambda3)));
}

void UnlearnConfig::validate(bool allow_zero_epochs) const {
  auto finite_nonneg = [](double v) { return std::isfinite(v) && v >= 0.0; };
  require(finite_nonneg(lambda1), "lambda1 must be finite and non-negative");
  require(finite_nonneg(lambda2), "lambda2 must be finite and non-negative");
  require(finite_nonneg(lambda3), "lambda3 must be finite and non-negative");
  require(rank >= 1, "rank must be at least 1");
  require(allow_zero_epochs || epochs >= 1, "epochs must be at least 1");
  require(std::isfinite(lr) && lr > 0.0, "lr must be positive");
  require(std::isfinite(low_rank_lr) && low_rank_lr > 0.0, "low_rank_lr must be positive");
  require(std::isfinite(clip_norm) && clip_norm > 0.0, "clip_norm must be positive");
  require(finite_nonneg(init_std), "init_std must be non-negative");
  require(std::isfinite(target_spread) && target_spread > 0.0, "target_spread must be positive");
}

nlohmann::json UnlearnConfig::to_json() const {
  return {{"lambda1", lambda1},
          {"lambda2", lambda2},
          {"lambda3", lambda3},
          {"rank", rank},
          {"epochs", epochs},
          {"lr", lr},
          {"low_rank_lr", low_rank_lr},
          {"seed", seed},
          {"trainable_blocks", trainable_blocks},
          {"train_final_norm", train_final_norm},
          {"clip_norm", clip_norm},
          {"init_std", init_std},
          {"target_spread", target_spread},
          {"target_reading", target_reading == SpreadReading::variance ? "variance" : "stddev"}};
}

UnlearnConfig UnlearnConfig::from_json(const nlohmann::json& j) {
  UnlearnConfig c;
  c.lambda1 = j.value("lambda1", c.lambda1);
  c.lambda2 = j.value("lambda2", c.lambda2);
  c.lambda3 = j.value("lambda3", c.lambda3);
  c.rank = j.value("rank", c.rank);
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.low_rank_lr = j.value("low_rank_lr", c.low_rank_lr);
  c.seed = j.value("seed", c.seed);
  c.trainable_blocks = j.value("trainable_blocks", c.trainable_blocks);
  c.train_final_norm = j.value("train_final_norm", c.train_final_norm);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.init_std = j.value("init_std", c.init_std);
  c.target_spread = j.value("target_spread", c.target_spread);
  const std::string reading =
      j.value("target_reading", std::string(c.target_reading == SpreadReading::variance ? "variance" : "stddev"));
  if (reading == "variance")
    c.target_reading = SpreadReading::variance;
  else if (reading == "stddev")
    c.target_reading = SpreadReading::stddev;
  else
    throw ValidationError("target_reading must be variance or stddev, got " + reading);
  return c;
}

std::string UnlearnRunLog::to_csv() const {
  std::ostringstream os;
  os << "epoch,l_img,l_retain,l_forget,l_reg,l_total,wall_seconds\n" << std::setprecision(17);
  for (const auto& e : epochs)
    os << e.epoch << ',' << e.l_img << ',' << e.l_retain << ',' << e.l_forget << ',' << e.l_reg << ',' << e.l_total
       << ',' << e.wall_seconds << '\n';
  return os.str();
}

UnlearnRunLog UnlearnRunLog::from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line.rfind("epoch,", 0) != 0) throw ValidationError("run log has no header");
  UnlearnRunLog log;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    EpochRecord r;
    if (!(ls >> r.epoch >> r.l_img >> r.l_retain >> r.l_forget >> r.l_reg >> r.l_total >> r.wall_seconds))
      throw ValidationError("malformed run log line " + std::to_string(lineno));
    log.epochs.push_back(r);
  }
  if (!log.epochs.empty()) log.unlearning_time_s = log.epochs.back().wall_seconds;
  return log;
}

std::vector<std::string> default_retain_prompts(const synthworld::Concept& forget) {
  std::vector<std::string> out;
  for (const auto& c : synthworld::vocabulary())
    if (c.index() != forget.index()) out.push_back(synthworld::make_caption(c));
  return out;
}

namespace {

struct Sums {
  double img = 0, retain = 0, forget = 0, reg = 0, total = 0;
};

void check_finite(const Tensor& t, const char* what, std::size_t epoch, std::size_t image) {
  if (!std::isfinite(t.item()))
    throw RuntimeFailure(std::string("non-finite ") + what + " at epoch " + std::to_string(epoch) + ", image " +
                         std::to_string(image));
}

UnlearnResult run(DiffusionModel& diffusion, const DualEncoder& encoder, const synthworld::Corpus& forget_corpus,
                  const std::string& forget_prompt, const std::vector<std::string>& retain_prompts,
                  const UnlearnConfig& config, bool low_rank) {
  config.validate(!low_rank);
  require(!forget_corpus.items.empty(), "forget corpus is empty");
  require(!low_rank || !retain_prompts.empty(), "retain prompt set is empty");
  const std::size_t d = encoder.config().d;
  require(config.rank <= d, "rank " + std::to_string(config.rank) + " exceeds embedding width " +
                                std::to_string(d));
  require(diffusion.config().unet.context_dim == d, "diffusion context width does not match the encoder");

  DualEncoder enc(encoder);
  ParamPartition part =
      apply_freeze_policy(diffusion, enc, config.trainable_blocks, low_rank, config.train_final_norm);
  std::vector<Tensor> layers;
  for (const auto& [name, t] : enc.params().entries())
    if (t.requires_grad()) layers.push_back(t);
  std::vector<Tensor> trainable = layers;

  LowRankPerturbation lrp;
  ForgetTarget target;
  if (low_rank) {
    lrp = init_low_rank(d, config.rank, config.seed, config.init_std);
    trainable.push_back(lrp.a);
    trainable.push_back(lrp.b);
    target = sample_forget_target(d, 1, config.seed, config.target_spread, config.target_reading);
  }
  Adam layer_opt(layers, config.lr);
  Adam factor_opt(low_rank ? std::vector<Tensor>{lrp.a, lrp.b} : std::vector<Tensor>{}, config.low_rank_lr);
  Rng rng(derive_seed(config.seed, low_rank ? "lru.loop" : "lru.baseline_loop"));
  const Tensor p = enc.projection();
  const auto& sched = diffusion.schedule();

  std::vector<Tensor> latents;
  {
    NoGradGuard ng;
    for (const auto& item : forget_corpus.items) latents.push_back(diffusion.vae_encode(item.image));
  }

  UnlearnRunLog log;
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    Sums s;
    for (std::size_t i = 0; i < latents.size(); ++i) {
      const std::size_t t = rng.index(sched.steps());
      std::vector<double> noise(latents[i].size());
      for (auto& v : noise) v = rng.normal();
      Tensor eps = Tensor::from(latents[i].shape(), std::move(noise));
      Tensor z_t = latentcore::add_noise(latents[i], t, eps, sched);

      Tensor f_f = enc.encode_text({forget_prompt});
      Tensor li, lr, lf, lg, total;
      if (low_rank) {
        Tensor dp = delta_p(lrp);
        Tensor f_r = enc.encode_text(retain_prompts);
        Tensor eps_hat = diffusion.unet_predict(z_t, {t}, textbridge::project(f_f, p, dp));
        li = loss_img(eps_hat, eps);
        lr = loss_retain(p, dp, f_r);
        lf = loss_forget(p, dp, f_f, target);
        lg = loss_reg(dp);
        total = total_loss(li, lr, lf, lg, config);
      } else {
        Tensor eps_hat = diffusion.unet_predict(z_t, {t}, textbridge::project(f_f, p));
        li = loss_img(eps_hat, eps);
        lr = lf = lg = Tensor::scalar(0.0);
        total = li;
      }
      check_finite(total, "loss", epoch, i);
      total.backward();
      clip_grad_norm(trainable, config.clip_norm);
      layer_opt.step();
      factor_opt.step();
      s.img += li.item();
      s.retain += lr.item();
      s.forget += lf.item();
      s.reg += lg.item();
      s.total += total.item();
    }
    const double n = static_cast<double>(latents.size());
    EpochRecord rec;
    rec.epoch = epoch;
    rec.l_img = s.img / n;
    rec.l_retain = s.retain / n;
    rec.l_forget = s.forget / n;
    rec.l_reg = s.reg / n;
    rec.l_total = s.total / n;
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log.epochs.push_back(rec);
  }
  if (!log.epochs.empty()) log.unlearning_time_s = log.epochs.back().wall_seconds;

  for (const auto& t : trainable) {
    Tensor h = t;
    h.set_requires_grad(false);
  }
  // Round what was trained to the stored precision; frozen values stay untouched.
  for (auto& t : trainable)
    for (auto& v : t.data()) v = static_cast<double>(static_cast<float>(v));
  return UnlearnResult{std::move(enc), lrp, std::move(log), std::move(part)};
}

ParamSet low_rank_params(const LowRankPerturbation& lrp) {
  ParamSet ps;
  ps.add_constant("lora.A", lrp.a.shape(), 0.0);
  ps.add_constant("lora.B", lrp.b.shape(), 0.0);
  std::copy(lrp.a.data().begin(), lrp.a.data().end(), ps.get("lora.A").data().begin());
  std::copy(lrp.b.data().begin(), lrp.b.data().end(), ps.get("lora.B").data().begin());
  return ps;
}

}  // namespace

UnlearnResult unlearn_concept(DiffusionModel& diffusion, const DualEncoder& encoder,
                              const synthworld::Corpus& forget_corpus, const std::string& forget_prompt,
                              const std::vector<std::string>& retain_prompts, const UnlearnConfig& config) {
  return run(diffusion, encoder, forget_corpus, forget_prompt, retain_prompts, config, true);
}

UnlearnResult unlearn_negative_loss_baseline(DiffusionModel& diffusion, const DualEncoder& encoder,
                                             const synthworld::Corpus& forget_corpus,
                                             const std::string& forget_prompt, const UnlearnConfig& config) {
  return run(diffusion, encoder, forget_corpus, forget_prompt, {}, config, false);
}

void save_unlearned(const std::filesystem::path& dir, const UnlearnResult& result, const nlohmann::json& provenance) {
  std::filesystem::create_directories(dir);
  textbridge::save_encoder(dir / "encoder", result.encoder, {{"provenance", provenance}});
  if (result.low_rank.rank() > 0)
    save_checkpoint(dir / "low_rank", low_rank_params(result.low_rank), {{"rank", result.low_rank.rank()}});
  write_text(dir / "run_log.csv", result.log.to_csv());
  nlohmann::json part = {{"trainable", result.partition.trainable}, {"frozen", result.partition.frozen}};
  write_text(dir / "partition.json", part.dump(2));
  write_text(dir / "provenance.json", provenance.dump(2));
}

UnlearnResult load_unlearned(const std::filesystem::path& dir) {
  DualEncoder enc = textbridge::load_encoder(dir / "encoder");
  LowRankPerturbation lrp;
  if (std::filesystem::exists(dir / "low_rank" / "manifest.json")) {
    const auto m = read_checkpoint_meta(dir / "low_rank");
    const std::size_t r = m.at("rank").get<std::size_t>();
    const std::size_t d = enc.config().d;
    ParamSet ps;
    ps.add_constant("lora.A", {d, r}, 0.0);
    ps.add_constant("lora.B", {d, r}, 0.0);
    load_checkpoint(dir / "low_rank", ps);
    lrp.a = ps.get("lora.A");
    lrp.b = ps.get("lora.B");
  }
  UnlearnRunLog log = UnlearnRunLog::from_csv(read_text(dir / "run_log.csv"));
  const auto part_json = nlohmann::json::parse(read_text(dir / "partition.json"));
  ParamPartition part{part_json.at("trainable").get<std::vector<std::string>>(),
                      part_json.at("frozen").get<std::vector<std::string>>()};
  return UnlearnResult{std::move(enc), lrp, std::move(log), std::move(part)};
}

}  // namespace ulab::lru
