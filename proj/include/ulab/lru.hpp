// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "ulab/latentcore.hpp"
#include "ulab/synthworld.hpp"
#include "ulab/textbridge.hpp"

// Low-rank concept unlearning on the text-encoder projection, plus the
// negative-loss few-shot baseline.
namespace ulab::lru {

// deltaP = A B^T with A, B in R^{d x r}.
struct LowRankPerturbation {
  Tensor a, b;
  std::size_t rank() const { return a.defined() ? a.dim(1) : 0; }
  std::size_t dim() const { return a.defined() ? a.dim(0) : 0; }
};

// A, B i.i.d. N(0, init_std^2).
LowRankPerturbation init_low_rank(std::size_t d, std::size_t r, std::uint64_t seed, double init_std = 0.01);
Tensor delta_p(const LowRankPerturbation& lrp);

// Parameter names are qualified "diffusion/<name>", "encoder/<name>" and
// "lora.A" / "lora.B".
struct ParamPartition {
  std::vector<std::string> trainable, frozen;
  bool is_trainable(const std::string& qualified) const;
};

// Trainable: the last `trainable_blocks` text blocks, the final norm (unless
// `with_final_norm` is off) and the low-rank factors when `with_low_rank`.
// Everything else is frozen. Sets requires_grad on every parameter to match.
ParamPartition apply_freeze_policy(latentcore::DiffusionModel& diffusion, textbridge::DualEncoder& encoder,
                                   std::size_t trainable_blocks, bool with_low_rank = true,
                                   bool with_final_norm = true);

enum class SpreadReading { variance, stddev };

// Fixed random target [d, n_f] for the projected forget features.
struct ForgetTarget {
  Tensor values;
};
ForgetTarget sample_forget_target(std::size_t d, std::size_t n_f, std::uint64_t seed, double spread = 2.0,
                                  SpreadReading reading = SpreadReading::variance);

// -MSE(eps_hat, eps)
Tensor loss_img(const Tensor& eps_hat, const Tensor& eps);
// MSE((P + dP) f_r^T, P f_r^T), f_r [n_r, d]
Tensor loss_retain(const Tensor& p, const Tensor& dp, const Tensor& f_r);
// MSE((P + dP) f_f^T, F_forget), f_f [n_f, d], target [d, n_f]
Tensor loss_forget(const Tensor& p, const Tensor& dp, const Tensor& f_f, const ForgetTarget& target);
// Frobenius norm of dP.
Tensor loss_reg(const Tensor& dp);

struct UnlearnConfig {
  double lambda1 = 10.0;
  double lambda2 = 1.0;
  double lambda3 = 0.01;
  std::size_t rank = 8;
  std::size_t epochs = 10;
  double lr = 1e-4;             // encoder layers
  double low_rank_lr = 1e-2;    // A and B
  std::uint64_t seed = 0;
  std::size_t trainable_blocks = 2;
  bool train_final_norm = true;
  double clip_norm = 1.0;
  double init_std = 0.01;
  double target_spread = 2.0;
  SpreadReading target_reading = SpreadReading::stddev;

  // epochs may be 0 only when allow_zero_epochs.
  void validate(bool allow_zero_epochs = false) const;
  nlohmann::json to_json() const;
  static UnlearnConfig from_json(const nlohmann::json& j);
};

// l_img + lambda1 l_retain + lambda2 l_forget + lambda3 l_reg
Tensor total_loss(const Tensor& l_img, const Tensor& l_retain, const Tensor& l_forget, const Tensor& l_reg,
                  const UnlearnConfig& config);

struct EpochRecord {
  std::size_t epoch = 0;
  double l_img = 0.0, l_retain = 0.0, l_forget = 0.0, l_reg = 0.0, l_total = 0.0;
  double wall_seconds = 0.0;  // elapsed since the run started
};

struct UnlearnRunLog {
  std::vector<EpochRecord> epochs;
  double unlearning_time_s = 0.0;

  // epoch,l_img,l_retain,l_forget,l_reg,l_total,wall_seconds
  std::string to_csv() const;
  static UnlearnRunLog from_csv(const std::string& text);
};

struct UnlearnResult {
  textbridge::DualEncoder encoder;
  LowRankPerturbation low_rank;  // rank 0 for the baseline
  UnlearnRunLog log;
  ParamPartition partition;
};

// The full low-rank unlearning loop: per epoch, per forget image: encode,
// noise at a uniform timestep, encode prompts, predict noise under
// (P + dP) f_f, combine the four losses and update only the trainable set.
// The input models are not modified apart from requires_grad flags.
UnlearnResult unlearn_concept(latentcore::DiffusionModel& diffusion, const textbridge::DualEncoder& encoder,
                              const synthworld::Corpus& forget_corpus, const std::string& forget_prompt,
                              const std::vector<std::string>& retain_prompts, const UnlearnConfig& config);

// Same loop with total loss = l_img only and no low-rank factors. Zero
// epochs is allowed and returns the encoder unchanged.
UnlearnResult unlearn_negative_loss_baseline(latentcore::DiffusionModel& diffusion,
                                             const textbridge::DualEncoder& encoder,
                                             const synthworld::Corpus& forget_corpus,
                                             const std::string& forget_prompt, const UnlearnConfig& config);

// Every caption of the vocabulary except the forget concept's.
std::vector<std::string> default_retain_prompts(const synthworld::Concept& forget);

// Modified encoder checkpoint, low_rank/ checkpoint holding lora.A and
// lora.B, run_log.csv and provenance.json.
void save_unlearned(const std::filesystem::path& dir, const UnlearnResult& result, const nlohmann::json& provenance);
UnlearnResult load_unlearned(const std::filesystem::path& dir);

}  // namespace ulab::lru
