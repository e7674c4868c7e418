// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "ulab/latentcore.hpp"
#include "ulab/synthworld.hpp"
#include "ulab/textbridge.hpp"

// Evaluation: CLIP-style scores, Frechet distance, detection rate.
namespace ulab::judge {

struct MetricsReport {
  std::string label;           // e.g. "pre" / "post"
  std::string forget_concept;  // e.g. "red_circle"
  double retain_clip = 0.0;
  double forget_clip = 0.0;
  double fid = 0.0;
  double detection_rate = 0.0;
  double unlearning_time_s = 0.0;
  std::size_t n_samples = 0;
  std::vector<std::uint64_t> seeds;

  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
  static std::string csv_header();
  // Deterministic columns only (no wall time). Doubles printed with 17
  // significant digits; seeds joined by ';'.
  std::string csv_row() const;
};

// What generates images: a diffusion model conditioned on (P + dP) f from a
// possibly modified text encoder. dP may be left undefined.
struct ModelState {
  const latentcore::DiffusionModel* diffusion = nullptr;
  const textbridge::DualEncoder* encoder = nullptr;
  Tensor delta_p;
  double unlearning_time_s = 0.0;

  Tensor condition(const std::vector<std::string>& prompts) const;
};

// Per-sample seeds derived from (seed, prompt, index).
std::vector<std::uint64_t> sample_seeds(std::uint64_t seed, const std::string& prompt, std::size_t n);

std::vector<Image> generate(const ModelState& state, const std::string& prompt, const std::vector<std::uint64_t>& seeds,
                            std::size_t steps, double guidance = 1.0);

// Mean cosine between scorer image embeddings and the scorer's P f(prompt).
double clip_score_images(const textbridge::DualEncoder& scorer, const std::vector<Image>& images,
                         const std::string& prompt);

double clip_score_batch(const ModelState& state, const textbridge::DualEncoder& scorer, const std::string& prompt,
                        std::size_t n_samples, const std::vector<std::uint64_t>& seeds, std::size_t steps,
                        double guidance = 1.0);

// Principal square root of a symmetric PSD matrix via eigendecomposition,
// negative eigenvalues clamped to 0.
Eigen::MatrixXd sqrtm_psd(const Eigen::MatrixXd& m);

// Rows are samples. Covariances get eps * I before the square root.
double frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double eps = 1e-6);

Eigen::MatrixXd image_features(const textbridge::DualEncoder& extractor, const std::vector<Image>& images);
double fid_score(const std::vector<Image>& real, const std::vector<Image>& generated,
                 const textbridge::DualEncoder& extractor);

struct ClassifierConfig {
  std::size_t epochs = 12;
  std::size_t batch = 8;
  double lr = 2e-3;
  double min_accuracy = 0.9;
  std::uint64_t seed = 0;
  nlohmann::json to_json() const;
  static ClassifierConfig from_json(const nlohmann::json& j);
};

// conv 3->16 s2, 16->32 s2, 32->32 s2, flatten, linear to 16 concepts.
class ConceptClassifier {
 public:
  explicit ConceptClassifier(std::uint64_t seed = 0, std::size_t side = synthworld::kDefaultSide);
  ConceptClassifier(const ConceptClassifier& other);
  ConceptClassifier& operator=(const ConceptClassifier&) = delete;

  Tensor logits(const Tensor& images) const;
  std::vector<std::size_t> predict(const std::vector<Image>& images) const;
  double accuracy(const synthworld::Corpus& corpus) const;

  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  nlohmann::json metadata;  // training record: config, epoch losses, held-out accuracy

 private:
  std::size_t side_;
  ParamSet params_;
  Conv2d c1_, c2_, c3_;
  Linear fc_;
};

// Trains on `train`, then gates on `heldout` accuracy; throws RuntimeFailure
// with the measured accuracy if below config.min_accuracy.
ConceptClassifier train_concept_classifier(const synthworld::Corpus& train, const synthworld::Corpus& heldout,
                                           const ClassifierConfig& config);

void save_classifier(const std::filesystem::path& dir, const ConceptClassifier& classifier);
ConceptClassifier load_classifier(const std::filesystem::path& dir);

// Fraction of `predictions` equal to the target index.
double detection_rate(const std::vector<std::size_t>& predictions, const synthworld::Concept& target);
double detection_rate(const std::vector<Image>& images, const ConceptClassifier& classifier,
                      const synthworld::Concept& target);

struct EvalConfig {
  std::size_t forget_samples = 32;
  std::size_t retain_samples_per_prompt = 4;
  std::size_t steps = 100;
  double guidance = 4.0;
  std::uint64_t seed = 0;
  nlohmann::json to_json() const;
  static EvalConfig from_json(const nlohmann::json& j);
};

struct Evaluation {
  MetricsReport report;
  std::vector<Image> forget_samples;
  std::vector<Image> retain_samples;
};

// scorer: frozen pre-unlearning encoder used for CLIP scores and FID
// features. ground_truth: real images of the forget concept.
Evaluation evaluate(const ModelState& state, const textbridge::DualEncoder& scorer,
                    const ConceptClassifier& classifier, const synthworld::Concept& forget,
                    const std::vector<std::string>& retain_prompts, const std::vector<Image>& ground_truth,
                    const EvalConfig& config);

}  // namespace ulab::judge
