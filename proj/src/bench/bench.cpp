// SPDX-License-Identifier: Apache-2.0
#include "ulab/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <iomanip>
#include <sstream>

#include "ulab/checkpoint.hpp"
#include "ulab/errors.hpp"
#include "ulab/rng.hpp"

namespace ulab::bench {

using nlohmann::json;
using synthworld::Corpus;
using synthworld::Split;
namespace fs = std::filesystem;

namespace {

json contrastive_json(const textbridge::ContrastiveConfig& c) {
  return {{"epochs", c.epochs}, {"lr", c.lr}, {"temperature", c.temperature}, {"seed", c.seed}};
}

textbridge::ContrastiveConfig contrastive_from(const json& j) {
  textbridge::ContrastiveConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.temperature = j.value("temperature", c.temperature);
  c.seed = j.value("seed", c.seed);
  return c;
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::string sha256_text(const std::string& s) {
  return sha256_hex({reinterpret_cast<const unsigned char*>(s.data()), s.size()});
}

ArtifactRecord record(const fs::path& file, const fs::path& base) {
  const fs::path rel = fs::absolute(file).lexically_normal().lexically_relative(fs::absolute(base).lexically_normal());
  return {rel.generic_string(), sha256_file(file)};
}

std::vector<Image> images_of(const Corpus& c) {
  std::vector<Image> out;
  out.reserve(c.items.size());
  for (const auto& it : c.items) out.push_back(it.image);
  return out;
}

// Rethrows with the stage name in front, keeping the error category.
template <typename F>
auto stage(const std::string& name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ValidationError& e) {
    throw ValidationError(name + ": " + e.what());
  } catch (const RuntimeFailure& e) {
    throw RuntimeFailure(name + ": " + e.what());
  } catch (const std::exception& e) {
    throw RuntimeFailure(name + ": " + e.what());
  }
}

std::uint64_t data_seed(const ExperimentConfig& c, const char* name) { return derive_seed(c.seed, name); }

}  // namespace

nlohmann::json DataConfig::to_json() const {
  return {{"pretrain_images", pretrain_images},     {"heldout_images", heldout_images},
          {"classifier_images", classifier_images}, {"ground_truth_images", ground_truth_images},
          {"forget_images", forget_images},         {"forget_concept", forget_concept}};
}

DataConfig DataConfig::from_json(const json& j) {
  DataConfig c;
  c.pretrain_images = j.value("pretrain_images", c.pretrain_images);
  c.heldout_images = j.value("heldout_images", c.heldout_images);
  c.classifier_images = j.value("classifier_images", c.classifier_images);
  c.ground_truth_images = j.value("ground_truth_images", c.ground_truth_images);
  c.forget_images = j.value("forget_images", c.forget_images);
  c.forget_concept = j.value("forget_concept", c.forget_concept);
  return c;
}

nlohmann::json PretrainConfig::to_json() const {
  return {{"encoder", encoder.to_json()},
          {"clip", contrastive_json(clip)},
          {"diffusion", diffusion.to_json()},
          {"diffusion_train", diffusion_train.to_json()},
          {"classifier", classifier.to_json()},
          {"min_pair_margin", min_pair_margin},
          {"max_reconstruction_mse", max_reconstruction_mse}};
}

PretrainConfig PretrainConfig::from_json(const json& j) {
  PretrainConfig c;
  if (j.contains("encoder")) c.encoder = textbridge::EncoderConfig::from_json(j["encoder"]);
  if (j.contains("clip")) c.clip = contrastive_from(j["clip"]);
  if (j.contains("diffusion")) c.diffusion = latentcore::DiffusionConfig::from_json(j["diffusion"]);
  if (j.contains("diffusion_train")) c.diffusion_train = latentcore::TrainConfig::from_json(j["diffusion_train"]);
  if (j.contains("classifier")) c.classifier = judge::ClassifierConfig::from_json(j["classifier"]);
  c.min_pair_margin = j.value("min_pair_margin", c.min_pair_margin);
  c.max_reconstruction_mse = j.value("max_reconstruction_mse", c.max_reconstruction_mse);
  return c;
}

void ExperimentConfig::validate() const {
  require(data.pretrain_images >= synthworld::kNumConcepts, "data.pretrain_images must cover all 16 concepts");
  require(data.classifier_images >= synthworld::kNumConcepts, "data.classifier_images must cover all 16 concepts");
  require(data.heldout_images >= 1, "data.heldout_images must be positive");
  require(data.ground_truth_images >= 2, "data.ground_truth_images must be at least 2");
  require(data.forget_images >= 1, "data.forget_images must be positive");
  synthworld::parse_concept(data.forget_concept);
  require(pretrain.encoder.d == pretrain.diffusion.unet.context_dim,
          "pretrain.encoder.d must equal pretrain.diffusion.unet.context_dim");
  require(pretrain.encoder.image_side == pretrain.diffusion.vae.side,
          "pretrain.encoder.image_side must equal pretrain.diffusion.vae.side");
  require(pretrain.diffusion.vae.side == synthworld::kDefaultSide, "images are rendered at 32x32");
  require(eval.forget_samples >= 2, "eval.forget_samples must be at least 2");
  require(eval.steps >= 1, "eval.steps must be positive");
  unlearn.validate();
  require(unlearn.rank <= pretrain.encoder.d, "unlearn.rank must not exceed pretrain.encoder.d");
}

nlohmann::json ExperimentConfig::to_json() const {
  return {{"data", data.to_json()},   {"pretrain", pretrain.to_json()}, {"unlearn", unlearn.to_json()},
          {"eval", eval.to_json()},   {"run_baseline", run_baseline},   {"seed", seed},
          {"trial", trial},           {"output_dir", output_dir}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  require(j.is_object(), "experiment config must be a JSON object");
  static const std::vector<std::string> known{"data", "pretrain", "unlearn", "eval", "run_baseline",
                                              "seed", "trial",    "output_dir"};
  for (const auto& [k, v] : j.items())
    require(std::find(known.begin(), known.end(), k) != known.end(), "unknown config key: " + k);
  ExperimentConfig c;
  try {
    if (j.contains("data")) c.data = DataConfig::from_json(j["data"]);
    if (j.contains("pretrain")) c.pretrain = PretrainConfig::from_json(j["pretrain"]);
    if (j.contains("unlearn")) c.unlearn = lru::UnlearnConfig::from_json(j["unlearn"]);
    if (j.contains("eval")) c.eval = judge::EvalConfig::from_json(j["eval"]);
    c.run_baseline = j.value("run_baseline", c.run_baseline);
    c.seed = j.value("seed", c.seed);
    c.trial = j.value("trial", c.trial);
    c.output_dir = j.value("output_dir", c.output_dir);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed experiment config: ") + e.what());
  }
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw ValidationError("cannot parse " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

ExperimentConfig ExperimentConfig::resolved() const {
  ExperimentConfig c = *this;
  c.pretrain.encoder.seed = derive_seed(seed, "pretrain.encoder");
  c.pretrain.clip.seed = derive_seed(seed, "pretrain.clip");
  c.pretrain.diffusion.seed = derive_seed(seed, "pretrain.diffusion");
  c.pretrain.diffusion_train.seed = derive_seed(seed, "pretrain.diffusion_train");
  c.pretrain.classifier.seed = derive_seed(seed, "pretrain.classifier");
  const std::string t = std::to_string(trial);
  c.unlearn.seed = derive_seed(seed, "unlearn/trial" + t);
  c.eval.seed = derive_seed(seed, "eval/trial" + t);
  return c;
}

std::string ExperimentConfig::hash() const {
  json j = resolved().to_json();
  j.erase("output_dir");
  return sha256_text(j.dump());
}

std::string ExperimentConfig::pretrain_hash() const {
  const ExperimentConfig r = resolved();
  json j = {{"pretrain", r.pretrain.to_json()},
            {"pretrain_images", data.pretrain_images},
            {"heldout_images", data.heldout_images},
            {"classifier_images", data.classifier_images},
            {"seed", seed}};
  return sha256_text(j.dump());
}

fs::path output_root() {
  const char* env = std::getenv(kOutputRootEnv);
  return env && *env ? fs::path(env) : fs::path("runs");
}

fs::path resolve_output(const std::string& dir) {
  const fs::path p(dir);
  return p.is_absolute() ? p : output_root() / p;
}

nlohmann::json RunManifest::to_json() const {
  auto recs = [](const std::map<std::string, ArtifactRecord>& m) {
    json o = json::object();
    for (const auto& [k, r] : m) o[k] = {{"path", r.path}, {"sha256", r.sha256}};
    return o;
  };
  return {{"format", "ulab-run-v1"},         {"config_hash", config_hash}, {"pretrain_hash", pretrain_hash},
          {"checkpoints", recs(checkpoints)}, {"reports", recs(reports)},   {"timestamps", timestamps},
          {"versions", versions}};
}

RunManifest RunManifest::from_json(const json& j) {
  require(j.value("format", "") == "ulab-run-v1", "not a run manifest");
  auto recs = [](const json& o) {
    std::map<std::string, ArtifactRecord> m;
    for (const auto& [k, v] : o.items()) m[k] = {v.at("path").get<std::string>(), v.at("sha256").get<std::string>()};
    return m;
  };
  RunManifest m;
  m.config_hash = j.at("config_hash").get<std::string>();
  m.pretrain_hash = j.at("pretrain_hash").get<std::string>();
  m.checkpoints = recs(j.at("checkpoints"));
  m.reports = recs(j.at("reports"));
  m.timestamps = j.at("timestamps").get<std::map<std::string, std::string>>();
  m.versions = j.at("versions").get<std::map<std::string, std::string>>();
  return m;
}

void RunManifest::verify(const fs::path& dir) const {
  for (const auto* group : {&checkpoints, &reports})
    for (const auto& [name, rec] : *group) {
      const fs::path p = dir / rec.path;
      if (!fs::exists(p)) throw RuntimeFailure("manifest entry " + name + ": missing file " + p.string());
      if (sha256_file(p) != rec.sha256) throw RuntimeFailure("manifest entry " + name + ": hash mismatch for " + p.string());
    }
}

Pretrained ensure_pretrained(const ExperimentConfig& config) {
  const ExperimentConfig cfg = config.resolved();
  const PretrainConfig& pc = cfg.pretrain;
  const fs::path dir = output_root() / "cache" / config.pretrain_hash().substr(0, 16);
  if (fs::exists(dir / "cache.json")) {
    return Pretrained{textbridge::load_encoder(dir / "encoder"), latentcore::load_diffusion(dir / "diffusion"),
                      judge::load_classifier(dir / "classifier"), dir, true};
  }
  const Corpus corpus =
      synthworld::build_corpus(Split::pretrain, std::nullopt, cfg.data.pretrain_images, data_seed(cfg, "data.pretrain"));
  const Corpus heldout =
      synthworld::build_corpus(Split::eval, std::nullopt, cfg.data.heldout_images, data_seed(cfg, "data.heldout"));

  textbridge::DualEncoder enc(pc.encoder);
  const auto clip_log = stage("pretrain-clip", [&] { return textbridge::contrastive_pretrain(enc, corpus, pc.clip); });
  const auto margin = textbridge::pair_margin(enc, heldout);
  if (margin.margin() < pc.min_pair_margin) {
    std::ostringstream os;
    os << "pretrain-clip: held-out pair margin " << margin.margin() << " is below " << pc.min_pair_margin;
    throw RuntimeFailure(os.str());
  }

  latentcore::DiffusionModel dm(pc.diffusion);
  const auto dm_log =
      stage("pretrain-diffusion", [&] { return latentcore::train_diffusion(dm, corpus, enc, pc.diffusion_train); });
  const double recon = latentcore::reconstruction_mse(dm, heldout);
  if (recon > pc.max_reconstruction_mse) {
    std::ostringstream os;
    os << "pretrain-diffusion: reconstruction MSE " << recon << " exceeds " << pc.max_reconstruction_mse;
    throw RuntimeFailure(os.str());
  }

  const Corpus cls_train = synthworld::build_corpus(Split::pretrain, std::nullopt, cfg.data.classifier_images,
                                                    data_seed(cfg, "data.classifier"));
  const Corpus cls_heldout = synthworld::build_corpus(Split::eval, std::nullopt, cfg.data.heldout_images,
                                                      data_seed(cfg, "data.classifier_heldout"));
  judge::ConceptClassifier clf =
      stage("train-classifier", [&] { return judge::train_concept_classifier(cls_train, cls_heldout, pc.classifier); });

  const fs::path tmp = dir.string() + ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  textbridge::save_encoder(tmp / "encoder", enc, {{"pretrain_hash", config.pretrain_hash()}});
  latentcore::save_diffusion(tmp / "diffusion", dm, {{"pretrain_hash", config.pretrain_hash()}});
  judge::save_classifier(tmp / "classifier", clf);
  json record = {{"pretrain_hash", config.pretrain_hash()},
                 {"config", pc.to_json()},
                 {"pair_margin", {{"matched", margin.matched}, {"mismatched", margin.mismatched}}},
                 {"reconstruction_mse", recon},
                 {"classifier_heldout_accuracy", clf.metadata.at("heldout_accuracy")},
                 {"clip_epoch_loss", clip_log.epoch_loss},
                 {"vae_epoch_loss", dm_log.vae_epoch_loss},
                 {"unet_epoch_loss", dm_log.unet_epoch_loss},
                 {"created", utc_now()}};
  write_text(tmp / "cache.json", record.dump(2) + "\n");
  fs::remove_all(dir);
  fs::rename(tmp, dir);
  // Reload so a fresh run sees exactly the bytes a cached run would.
  return Pretrained{textbridge::load_encoder(dir / "encoder"), latentcore::load_diffusion(dir / "diffusion"),
                    judge::load_classifier(dir / "classifier"), dir, false};
}

ScenarioResult run_scenario(const ExperimentConfig& config) {
  stage("config", [&] { config.validate(); });
  const ExperimentConfig cfg = config.resolved();
  const std::string hash = config.hash();
  const fs::path dir = resolve_output(cfg.output_dir.empty() ? "scenarios/" + hash.substr(0, 16) : cfg.output_dir);
  fs::create_directories(dir);

  RunManifest man;
  man.config_hash = hash;
  man.pretrain_hash = config.pretrain_hash();
  man.versions = {{"ulab", kVersion}, {"checkpoint", "ulab-checkpoint-v1"}};
  write_text(dir / "config.json", cfg.to_json().dump(2) + "\n");

  man.timestamps["gen-data"] = utc_now();
  const synthworld::Concept target = stage("gen-data", [&] { return synthworld::parse_concept(cfg.data.forget_concept); });
  const Corpus forget = stage("gen-data", [&] {
    return synthworld::build_corpus(Split::forget, target, cfg.data.forget_images, data_seed(cfg, "data.forget"));
  });
  const Corpus truth = stage("gen-data", [&] {
    return synthworld::build_corpus(Split::eval, target, cfg.data.ground_truth_images, data_seed(cfg, "data.ground_truth"));
  });
  stage("gen-data", [&] { synthworld::save_corpus(dir / "data" / "forget", forget); });

  man.timestamps["pretrain"] = utc_now();
  Pretrained pre = stage("pretrain", [&] { return ensure_pretrained(config); });
  man.checkpoints["encoder"] = record(pre.dir / "encoder" / "params.bin", dir);
  man.checkpoints["diffusion"] = record(pre.dir / "diffusion" / "params.bin", dir);
  man.checkpoints["classifier"] = record(pre.dir / "classifier" / "params.bin", dir);

  const std::string prompt = synthworld::make_caption(target);
  const auto retain = lru::default_retain_prompts(target);
  const json provenance = {{"config_hash", hash},
                           {"forget_concept", cfg.data.forget_concept},
                           {"seed", cfg.seed},
                           {"trial", cfg.trial},
                           {"unlearn_seed", cfg.unlearn.seed}};

  man.timestamps["unlearn"] = utc_now();
  lru::UnlearnResult res = stage("unlearn", [&] {
    return lru::unlearn_concept(pre.diffusion, pre.encoder, forget, prompt, retain, cfg.unlearn);
  });
  stage("unlearn", [&] { lru::save_unlearned(dir / "unlearned", res, provenance); });
  man.checkpoints["unlearned_encoder"] = record(dir / "unlearned" / "encoder" / "params.bin", dir);
  man.checkpoints["low_rank"] = record(dir / "unlearned" / "low_rank" / "params.bin", dir);

  std::optional<lru::UnlearnResult> base;
  if (cfg.run_baseline) {
    man.timestamps["unlearn-baseline"] = utc_now();
    base.emplace(stage("unlearn-baseline", [&] {
      return lru::unlearn_negative_loss_baseline(pre.diffusion, pre.encoder, forget, prompt, cfg.unlearn);
    }));
    stage("unlearn-baseline", [&] { lru::save_unlearned(dir / "baseline", *base, provenance); });
    man.checkpoints["baseline_encoder"] = record(dir / "baseline" / "encoder" / "params.bin", dir);
  }

  man.timestamps["evaluate"] = utc_now();
  ScenarioResult out;
  const auto gt = images_of(truth);
  auto eval_one = [&](const judge::ModelState& st, const std::string& label) {
    auto e = judge::evaluate(st, pre.encoder, pre.classifier, target, retain, gt, cfg.eval);
    e.report.label = label;
    write_png_grid(dir / ("samples_" + label + ".png"), e.forget_samples, 8);
    return e.report;
  };
  stage("evaluate", [&] {
    out.pre = eval_one(judge::ModelState{&pre.diffusion, &pre.encoder, {}, 0.0}, "pre");
    NoGradGuard ng;
    out.post = eval_one(judge::ModelState{&pre.diffusion, &res.encoder, lru::delta_p(res.low_rank).detach(),
                                          res.log.unlearning_time_s},
                        "post");
    if (base) out.baseline = eval_one(judge::ModelState{&pre.diffusion, &base->encoder, {}, base->log.unlearning_time_s}, "baseline");
  });

  std::vector<judge::MetricsReport> reports{out.pre, out.post};
  if (base) reports.push_back(out.baseline);
  std::string csv = judge::MetricsReport::csv_header() + "\n";
  json mj = json::array();
  for (const auto& r : reports) {
    csv += r.csv_row() + "\n";
    mj.push_back(r.to_json());
  }
  write_text(dir / "metrics.csv", csv);
  write_text(dir / "metrics.json", mj.dump(2) + "\n");
  write_text(dir / "run_log.csv", res.log.to_csv());
  stage("plot-losses", [&] { plot_losses(res.log, dir / "losses.svg"); });
  for (const char* f : {"metrics.csv", "metrics.json", "run_log.csv", "losses.svg"}) man.reports[f] = record(dir / f, dir);
  man.timestamps["done"] = utc_now();
  write_text(dir / "manifest.json", man.to_json().dump(2) + "\n");
  man.verify(dir);

  out.manifest = std::move(man);
  out.dir = dir;
  out.unlearned.emplace(std::move(res));
  out.pretrain_from_cache = pre.from_cache;
  return out;
}

std::map<std::string, MetricSummary> aggregate(const std::vector<judge::MetricsReport>& reports) {
  require(!reports.empty(), "nothing to aggregate");
  std::map<std::string, std::vector<double>> cols;
  for (const auto& r : reports) {
    cols["retain_clip"].push_back(r.retain_clip);
    cols["forget_clip"].push_back(r.forget_clip);
    cols["fid"].push_back(r.fid);
    cols["detection_rate"].push_back(r.detection_rate);
    cols["unlearning_time_s"].push_back(r.unlearning_time_s);
  }
  std::map<std::string, MetricSummary> out;
  for (const auto& [name, v] : cols) {
    MetricSummary s;
    s.n = v.size();
    for (double x : v) s.mean += x;
    s.mean /= static_cast<double>(s.n);
    if (s.n > 1) {
      double ss = 0.0;
      for (double x : v) ss += (x - s.mean) * (x - s.mean);
      s.spread = std::sqrt(ss / static_cast<double>(s.n - 1));
    }
    out[name] = s;
  }
  return out;
}

std::string format_aggregate(const std::map<std::string, MetricSummary>& agg) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  for (const auto& [name, s] : agg) os << std::left << std::setw(20) << name << s.mean << " +/- " << s.spread << " (n=" << s.n << ")\n";
  return os.str();
}

PlotSummary plot_losses(const lru::UnlearnRunLog& log, const fs::path& out) {
  require(!log.epochs.empty(), "plot_losses: the run log has no epochs");
  PlotSummary sum;
  sum.points = log.epochs.size();
  sum.retain_below_forget = std::all_of(log.epochs.begin(), log.epochs.end(),
                                        [](const lru::EpochRecord& e) { return e.l_retain < e.l_forget; });

  constexpr double W = 640, H = 400, L = 70, R = 150, T = 30, B = 50;
  double lo = 0, hi = 0;
  for (const auto& e : log.epochs)
    for (double v : {e.l_retain, e.l_forget, e.l_total}) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  if (hi - lo < 1e-12) hi = lo + 1.0;
  const std::size_t n = log.epochs.size();
  auto px = [&](std::size_t i) { return n == 1 ? L + (W - L - R) / 2 : L + (W - L - R) * static_cast<double>(i) / (n - 1); };
  auto py = [&](double v) { return T + (H - T - B) * (hi - v) / (hi - lo); };

  std::ostringstream os;
  os << std::setprecision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = lo + (hi - lo) * k / 4.0;
    os << "<text x=\"" << L - 6 << "\" y=\"" << py(v) + 4 << "\" text-anchor=\"end\">" << v << "</text>\n";
  }
  for (std::size_t i = 0; i < n; ++i)
    os << "<text x=\"" << px(i) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << log.epochs[i].epoch + 1 << "</text>\n";
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">epoch</text>\n";
  os << "<text x=\"18\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 " << (T + H - B) / 2
     << ")\">loss</text>\n";
  struct Curve {
    const char* name;
    const char* color;
    double lru::EpochRecord::*field;
  };
  const Curve curves[] = {{"retain", "#1f77b4", &lru::EpochRecord::l_retain},
                          {"forget", "#d62728", &lru::EpochRecord::l_forget},
                          {"average", "#2ca02c", &lru::EpochRecord::l_total}};
  int row = 0;
  for (const auto& c : curves) {
    os << "<polyline class=\"" << c.name << "\" fill=\"none\" stroke=\"" << c.color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < n; ++i) os << (i ? " " : "") << px(i) << ',' << py(log.epochs[i].*c.field);
    os << "\"/>\n";
    for (std::size_t i = 0; i < n; ++i)
      os << "<circle class=\"" << c.name << "\" cx=\"" << px(i) << "\" cy=\"" << py(log.epochs[i].*c.field)
         << "\" r=\"3\" fill=\"" << c.color << "\"/>\n";
    const double ly = T + 10 + 18 * row++;
    os << "<line x1=\"" << W - R + 15 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 40 << "\" y2=\"" << ly << "\" stroke=\""
       << c.color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << W - R + 46 << "\" y=\"" << ly + 4 << "\">" << c.name << "</text>\n";
  }
  os << "</svg>\n";
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_text(out, os.str());
  return sum;
}

}  // namespace ulab::bench
