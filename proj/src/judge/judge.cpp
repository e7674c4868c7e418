// SPDX-License-Identifier: Apache-2.0
#include "ulab/judge.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "ulab/checkpoint.hpp"
#include "ulab/errors.hpp"
#include "ulab/optim.hpp"

namespace ulab::judge {

using synthworld::Concept;
using textbridge::DualEncoder;

nlohmann::json MetricsReport::to_json() const {
  return {{"label", label},
          {"forget_concept", forget_concept},
          {"retain_clip", retain_clip},
          {"forget_clip", forget_clip},
          {"fid", fid},
          {"detection_rate", detection_rate},
          {"unlearning_time_s", unlearning_time_s},
          {"n_samples", n_samples},
          {"seeds", seeds}};
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.label = j.value("label", std::string());
  r.forget_concept = j.value("forget_concept", std::string());
  r.retain_clip = j.at("retain_clip").get<double>();
  r.forget_clip = j.at("forget_clip").get<double>();
  r.fid = j.at("fid").get<double>();
  r.detection_rate = j.at("detection_rate").get<double>();
  r.unlearning_time_s = j.at("unlearning_time_s").get<double>();
  r.n_samples = j.at("n_samples").get<std::size_t>();
  r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  return r;
}

std::string MetricsReport::csv_header() {
  return "label,forget_concept,retain_clip,forget_clip,fid,detection_rate,n_samples,seeds";
}

std::string MetricsReport::csv_row() const {
  std::ostringstream os;
  os.precision(17);
  os << label << ',' << forget_concept << ',' << retain_clip << ',' << forget_clip << ',' << fid << ','
     << detection_rate << ',' << n_samples << ',';
  for (std::size_t i = 0; i < seeds.size(); ++i) os << (i ? ";" : "") << seeds[i];
  return os.str();
}

Tensor ModelState::condition(const std::vector<std::string>& prompts) const {
  require(diffusion && encoder, "model state is incomplete");
  return textbridge::project(encoder->encode_text(prompts), encoder->projection(), delta_p);
}

std::vector<std::uint64_t> sample_seeds(std::uint64_t seed, const std::string& prompt, std::size_t n) {
  const std::uint64_t base = derive_seed(seed, "judge.sample/" + prompt);
  std::vector<std::uint64_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = splitmix64(base + i);
  return out;
}

std::vector<Image> generate(const ModelState& state, const std::string& prompt, const std::vector<std::uint64_t>& seeds,
                            std::size_t steps, double guidance) {
  require(!seeds.empty(), "generate: no seeds");
  NoGradGuard ng;
  Tensor one = state.condition({prompt});
  const std::size_t d = one.dim(1);
  std::vector<double> rows;
  rows.reserve(seeds.size() * d);
  for (std::size_t i = 0; i < seeds.size(); ++i) rows.insert(rows.end(), one.values().begin(), one.values().end());
  return state.diffusion->sample(Tensor::from({seeds.size(), d}, std::move(rows)), steps, seeds, guidance);
}

double clip_score_images(const DualEncoder& scorer, const std::vector<Image>& images, const std::string& prompt) {
  require(!images.empty(), "clip score of an empty image set");
  NoGradGuard ng;
  Tensor text = scorer.embed_text({prompt});
  Tensor img = scorer.encode_image(images_to_tensor(images));
  const std::size_t d = text.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < images.size(); ++i)
    total += textbridge::cosine_similarity(img.data().subspan(i * d, d), text.data());
  return total / static_cast<double>(images.size());
}

double clip_score_batch(const ModelState& state, const DualEncoder& scorer, const std::string& prompt,
                        std::size_t n_samples, const std::vector<std::uint64_t>& seeds, std::size_t steps,
                        double guidance) {
  require(n_samples >= 1, "n_samples must be at least 1");
  require(seeds.size() == n_samples, "expected one seed per sample");
  return clip_score_images(scorer, generate(state, prompt, seeds, steps, guidance), prompt);
}

Eigen::MatrixXd sqrtm_psd(const Eigen::MatrixXd& m) {
  require(m.rows() == m.cols(), "sqrtm_psd: matrix must be square");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  require(es.info() == Eigen::Success, "sqrtm_psd: eigendecomposition failed");
  Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

namespace {

std::pair<Eigen::VectorXd, Eigen::MatrixXd> moments(const Eigen::MatrixXd& x, double eps) {
  Eigen::VectorXd mu = x.colwise().mean().transpose();
  Eigen::MatrixXd c = x.rowwise() - mu.transpose();
  Eigen::MatrixXd cov = (c.transpose() * c) / static_cast<double>(x.rows() - 1);
  cov.diagonal().array() += eps;
  return {mu, cov};
}

}  // namespace

double frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double eps) {
  require(a.rows() >= 2 && b.rows() >= 2, "frechet_distance needs at least 2 rows per set (got " +
                                              std::to_string(a.rows()) + " and " + std::to_string(b.rows()) + ")");
  require(a.cols() >= 1 && a.cols() == b.cols(), "frechet_distance: feature widths differ");
  auto [mu_a, cov_a] = moments(a, eps);
  auto [mu_b, cov_b] = moments(b, eps);
  // Tr((Sa Sb)^{1/2}) = Tr((Sa^{1/2} Sb Sa^{1/2})^{1/2}), the latter symmetric PSD.
  Eigen::MatrixXd ra = sqrtm_psd(cov_a);
  Eigen::MatrixXd inner = ra * cov_b * ra;
  inner = 0.5 * (inner + inner.transpose());
  const double cross = sqrtm_psd(inner).trace();
  const double d = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
  return std::max(d, 0.0);
}

Eigen::MatrixXd image_features(const DualEncoder& extractor, const std::vector<Image>& images) {
  require(!images.empty(), "no images to featurize");
  NoGradGuard ng;
  Tensor f = extractor.encode_image(images_to_tensor(images));
  Eigen::MatrixXd out(f.dim(0), f.dim(1));
  for (std::size_t i = 0; i < f.dim(0); ++i)
    for (std::size_t j = 0; j < f.dim(1); ++j) out(i, j) = f[i * f.dim(1) + j];
  return out;
}

double fid_score(const std::vector<Image>& real, const std::vector<Image>& generated, const DualEncoder& extractor) {
  require(real.size() >= 2 && generated.size() >= 2, "fid_score needs at least 2 images per set");
  return frechet_distance(image_features(extractor, real), image_features(extractor, generated));
}

nlohmann::json ClassifierConfig::to_json() const {
  return {{"epochs", epochs}, {"batch", batch}, {"lr", lr}, {"min_accuracy", min_accuracy}, {"seed", seed}};
}

ClassifierConfig ClassifierConfig::from_json(const nlohmann::json& j) {
  ClassifierConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch = j.value("batch", c.batch);
  c.lr = j.value("lr", c.lr);
  c.min_accuracy = j.value("min_accuracy", c.min_accuracy);
  c.seed = j.value("seed", c.seed);
  return c;
}

ConceptClassifier::ConceptClassifier(std::uint64_t seed, std::size_t side) : side_(side) {
  require(side % 8 == 0 && side >= 8, "classifier image side must be a multiple of 8");
  Rng rng(derive_seed(seed, "judge.classifier.init"));
  c1_ = Conv2d(params_, "cls.conv1", 3, 16, 3, 2, 1, rng);
  c2_ = Conv2d(params_, "cls.conv2", 16, 32, 3, 2, 1, rng);
  c3_ = Conv2d(params_, "cls.conv3", 32, 32, 3, 2, 1, rng);
  fc_ = Linear(params_, "cls.fc", 32 * (side / 8) * (side / 8), synthworld::kNumConcepts, rng);
  metadata = {{"seed", seed}, {"side", side}};
}

ConceptClassifier::ConceptClassifier(const ConceptClassifier& other)
    : ConceptClassifier(other.metadata.value("seed", std::uint64_t{0}), other.side_) {
  params_.copy_values_from(other.params_);
  metadata = other.metadata;
}

Tensor ConceptClassifier::logits(const Tensor& images) const {
  Tensor h = relu(c1_(images));
  h = relu(c2_(h));
  h = relu(c3_(h));
  return fc_(reshape(h, {h.dim(0), h.size() / h.dim(0)}));
}

std::vector<std::size_t> ConceptClassifier::predict(const std::vector<Image>& images) const {
  NoGradGuard ng;
  std::vector<std::size_t> out;
  constexpr std::size_t chunk = 64;
  for (std::size_t s = 0; s < images.size(); s += chunk) {
    const std::size_t e = std::min(images.size(), s + chunk);
    Tensor lg = logits(images_to_tensor(std::span<const Image>(images).subspan(s, e - s)));
    const std::size_t k = lg.dim(1);
    for (std::size_t i = 0; i < e - s; ++i) {
      auto row = lg.data().subspan(i * k, k);
      out.push_back(static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  return out;
}

double ConceptClassifier::accuracy(const synthworld::Corpus& corpus) const {
  require(!corpus.items.empty(), "accuracy of an empty corpus");
  std::vector<Image> images;
  for (const auto& it : corpus.items) images.push_back(it.image);
  const auto pred = predict(images);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == corpus.items[i].label.index();
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

ConceptClassifier train_concept_classifier(const synthworld::Corpus& train, const synthworld::Corpus& heldout,
                                           const ClassifierConfig& config) {
  require(config.batch >= 1, "classifier batch must be positive");
  std::vector<bool> seen(synthworld::kNumConcepts, false);
  for (const auto& it : train.items) seen[it.label.index()] = true;
  for (std::size_t c = 0; c < seen.size(); ++c)
    require(seen[c], "classifier corpus is missing concept " + synthworld::concept_name(Concept::from_index(c)));

  ConceptClassifier clf(config.seed);
  clf.params().set_requires_grad(true);
  Adam opt(clf.params().tensors(), config.lr);
  Rng rng(derive_seed(config.seed, "judge.classifier.train"));
  std::vector<std::size_t> order(train.items.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> losses;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t s = 0; s < order.size(); s += config.batch) {
      std::vector<Image> imgs;
      std::vector<std::size_t> labels;
      for (std::size_t i = s; i < std::min(order.size(), s + config.batch); ++i) {
        imgs.push_back(train.items[order[i]].image);
        labels.push_back(train.items[order[i]].label.index());
      }
      Tensor loss = cross_entropy(clf.logits(images_to_tensor(imgs)), labels);
      if (!std::isfinite(loss.item()))
        throw RuntimeFailure("classifier loss is not finite at epoch " + std::to_string(epoch));
      loss.backward();
      opt.step();
      total += loss.item();
      ++batches;
    }
    losses.push_back(total / static_cast<double>(std::max<std::size_t>(batches, 1)));
  }
  clf.params().set_requires_grad(false);
  quantize_f32(clf.params());
  const double acc = clf.accuracy(heldout);
  clf.metadata["config"] = config.to_json();
  clf.metadata["epoch_loss"] = losses;
  clf.metadata["heldout_accuracy"] = acc;
  if (acc < config.min_accuracy) {
    std::ostringstream os;
    os << "classifier held-out accuracy " << acc << " is below the gate " << config.min_accuracy << " after "
       << config.epochs << " epochs";
    throw RuntimeFailure(os.str());
  }
  return clf;
}

void save_classifier(const std::filesystem::path& dir, const ConceptClassifier& classifier) {
  save_checkpoint(dir, classifier.params(), classifier.metadata);
}

ConceptClassifier load_classifier(const std::filesystem::path& dir) {
  const auto meta = read_checkpoint_meta(dir);
  ConceptClassifier clf(meta.value("seed", std::uint64_t{0}), meta.value("side", synthworld::kDefaultSide));
  load_checkpoint(dir, clf.params());
  clf.metadata = meta;
  return clf;
}

double detection_rate(const std::vector<std::size_t>& predictions, const Concept& target) {
  require(!predictions.empty(), "detection rate of an empty image set");
  const auto hits = std::count(predictions.begin(), predictions.end(), target.index());
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

double detection_rate(const std::vector<Image>& images, const ConceptClassifier& classifier, const Concept& target) {
  require(!images.empty(), "detection rate of an empty image set");
  return detection_rate(classifier.predict(images), target);
}

nlohmann::json EvalConfig::to_json() const {
  return {{"forget_samples", forget_samples},
          {"retain_samples_per_prompt", retain_samples_per_prompt},
          {"steps", steps},
          {"guidance", guidance},
          {"seed", seed}};
}

EvalConfig EvalConfig::from_json(const nlohmann::json& j) {
  EvalConfig c;
  c.forget_samples = j.value("forget_samples", c.forget_samples);
  c.retain_samples_per_prompt = j.value("retain_samples_per_prompt", c.retain_samples_per_prompt);
  c.steps = j.value("steps", c.steps);
  c.guidance = j.value("guidance", c.guidance);
  c.seed = j.value("seed", c.seed);
  return c;
}

Evaluation evaluate(const ModelState& state, const DualEncoder& scorer, const ConceptClassifier& classifier,
                    const Concept& forget, const std::vector<std::string>& retain_prompts,
                    const std::vector<Image>& ground_truth, const EvalConfig& config) {
  require(config.forget_samples >= 2, "evaluation needs at least 2 forget samples");
  require(!retain_prompts.empty() && config.retain_samples_per_prompt >= 1, "evaluation needs retain samples");
  Evaluation ev;
  const std::string forget_prompt = synthworld::make_caption(forget);
  const auto seeds = sample_seeds(config.seed, forget_prompt, config.forget_samples);
  ev.forget_samples = generate(state, forget_prompt, seeds, config.steps, config.guidance);

  MetricsReport& r = ev.report;
  r.forget_concept = synthworld::concept_name(forget);
  r.forget_clip = clip_score_images(scorer, ev.forget_samples, forget_prompt);
  r.fid = fid_score(ground_truth, ev.forget_samples, scorer);
  r.detection_rate = detection_rate(ev.forget_samples, classifier, forget);

  double retain = 0.0;
  for (const auto& p : retain_prompts) {
    auto imgs = generate(state, p, sample_seeds(config.seed, p, config.retain_samples_per_prompt), config.steps,
                         config.guidance);
    retain += clip_score_images(scorer, imgs, p);
    ev.retain_samples.push_back(imgs.front());
  }
  r.retain_clip = retain / static_cast<double>(retain_prompts.size());
  r.unlearning_time_s = state.unlearning_time_s;
  r.n_samples = config.forget_samples + config.retain_samples_per_prompt * retain_prompts.size();
  r.seeds = seeds;
  return ev;
}

}  // namespace ulab::judge
