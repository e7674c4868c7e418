// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "ulab/judge.hpp"
#include "ulab/latentcore.hpp"
#include "ulab/lru.hpp"
#include "ulab/textbridge.hpp"

// Experiment harness: config, cached pretraining, scenario runs, manifests,
// aggregation, loss plots and the command-line front end.
namespace ulab::bench {

inline constexpr const char* kOutputRootEnv = "ULAB_OUTPUT_ROOT";
inline constexpr const char* kVersion = "0.1.0";

struct DataConfig {
  std::size_t pretrain_images = 1600;
  std::size_t heldout_images = 320;
  std::size_t classifier_images = 4800;
  std::size_t ground_truth_images = 32;
  std::size_t forget_images = 5;
  std::string forget_concept = "red_circle";

  nlohmann::json to_json() const;
  static DataConfig from_json(const nlohmann::json& j);
};

struct PretrainConfig {
  textbridge::EncoderConfig encoder;
  textbridge::ContrastiveConfig clip;
  latentcore::DiffusionConfig diffusion;
  latentcore::TrainConfig diffusion_train;
  judge::ClassifierConfig classifier;
  double min_pair_margin = 0.1;
  double max_reconstruction_mse = 0.02;

  nlohmann::json to_json() const;
  static PretrainConfig from_json(const nlohmann::json& j);
};

// The per-stage seeds inside `pretrain`, `unlearn` and `eval` are overwritten
// from `seed` (pretraining, data) and `trial` (unlearning, sampling) by
// derive_seed(seed, "<stage>"), so one number drives a run.
struct ExperimentConfig {
  DataConfig data;
  PretrainConfig pretrain;
  lru::UnlearnConfig unlearn;
  judge::EvalConfig eval;
  bool run_baseline = true;
  std::uint64_t seed = 0;
  std::uint64_t trial = 0;
  // Relative paths resolve under $ULAB_OUTPUT_ROOT (default "runs").
  std::string output_dir;

  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);

  // sha256 of the canonical JSON without output_dir.
  std::string hash() const;
  // Hash of the fields pretraining depends on (data sizes, budgets, seed).
  std::string pretrain_hash() const;
  // Copy with the stage seeds filled in.
  ExperimentConfig resolved() const;
};

std::filesystem::path output_root();
std::filesystem::path resolve_output(const std::string& dir);

struct ArtifactRecord {
  std::string path;  // relative to the manifest directory
  std::string sha256;
};

struct RunManifest {
  std::string config_hash;
  std::string pretrain_hash;
  std::map<std::string, ArtifactRecord> checkpoints;  // name -> params.bin
  std::map<std::string, ArtifactRecord> reports;      // name -> metrics file
  std::map<std::string, std::string> timestamps;      // stage -> ISO-8601 UTC
  std::map<std::string, std::string> versions;

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
  // Throws RuntimeFailure naming the first missing or mismatched file.
  void verify(const std::filesystem::path& dir) const;
};

struct Pretrained {
  textbridge::DualEncoder encoder;
  latentcore::DiffusionModel diffusion;
  judge::ConceptClassifier classifier;
  std::filesystem::path dir;
  bool from_cache = false;
};

// Loads <root>/cache/<pretrain_hash> when present and verified, otherwise
// trains the encoder, the diffusion model and the classifier, checks the
// pretraining gates and writes the cache.
Pretrained ensure_pretrained(const ExperimentConfig& config);

struct ScenarioResult {
  RunManifest manifest;
  std::filesystem::path dir;
  judge::MetricsReport pre, post, baseline;
  std::optional<lru::UnlearnResult> unlearned;
  bool pretrain_from_cache = false;
};

// gen-data -> pretrain -> unlearn -> evaluate. Writes metrics.csv (pre,
// post[, baseline]), metrics.json, run_log.csv, losses.svg, the unlearned
// state and manifest.json under resolve_output(output_dir). Stage failures
// rethrow with the stage name prefixed.
ScenarioResult run_scenario(const ExperimentConfig& config);

struct MetricSummary {
  double mean = 0.0;
  double spread = 0.0;  // sample standard deviation; 0 for one run
  std::size_t n = 0;
};
// metric name -> summary across reports.
std::map<std::string, MetricSummary> aggregate(const std::vector<judge::MetricsReport>& reports);
std::string format_aggregate(const std::map<std::string, MetricSummary>& agg);

struct PlotSummary {
  std::size_t points = 0;  // per curve
  bool retain_below_forget = false;
};
// SVG with retain, forget and total loss per epoch.
PlotSummary plot_losses(const lru::UnlearnRunLog& log, const std::filesystem::path& out);

// Exit 0 on success, 1 on validation errors and usage, 2 on runtime failure.
int cli(int argc, const char* const* argv);

}  // namespace ulab::bench
