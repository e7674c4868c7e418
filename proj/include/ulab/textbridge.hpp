// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "ulab/image.hpp"
#include "ulab/nn.hpp"
#include "ulab/synthworld.hpp"

// Toy dual encoder: causal transformer text tower with a final d x d
// projection P, and a small convolutional image tower, trained contrastively.
namespace ulab::textbridge {

inline constexpr std::size_t kPad = 0, kStart = 1, kEnd = 2;

class Tokenizer {
 public:
  explicit Tokenizer(std::size_t max_len = 16);

  // [start, words..., end, pad...], always max_len ids. Unknown words throw a
  // ValidationError listing them.
  std::vector<std::size_t> encode(const std::string& prompt) const;
  // Index of the end token in an encoded sequence.
  static std::size_t end_position(const std::vector<std::size_t>& ids);

  std::size_t vocab_size() const { return words_.size(); }
  std::size_t max_len() const { return max_len_; }
  const std::vector<std::string>& words() const { return words_; }
  void write_vocabulary(const std::filesystem::path& path) const;

 private:
  std::vector<std::string> words_;
  std::size_t max_len_;
};

struct EncoderConfig {
  std::size_t d = 64;
  std::size_t heads = 4;
  std::size_t blocks = 2;
  std::size_t max_len = 16;
  std::size_t mlp_ratio = 4;
  std::size_t image_side = synthworld::kDefaultSide;
  std::size_t image_width = 16;  // first conv channels; doubles per stage
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& j);
};

// Freezable unit a parameter belongs to: "text.embedding", "text.block<i>",
// "text.final_norm", "text.projection" or "image".
std::string parameter_group(const std::string& name);

class DualEncoder {
 public:
  explicit DualEncoder(const EncoderConfig& config);
  DualEncoder(const DualEncoder& other);
  DualEncoder& operator=(const DualEncoder&) = delete;

  const EncoderConfig& config() const { return config_; }
  const Tokenizer& tokenizer() const { return tokenizer_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  // Pooled end-token features after the final norm, [n, d], pre-projection.
  Tensor encode_text(const std::vector<std::string>& prompts) const;
  // [n, d] rows (P f)
  Tensor project(const Tensor& features) const;
  Tensor projection() const { return projection_; }
  // P f for each prompt.
  Tensor embed_text(const std::vector<std::string>& prompts) const { return project(encode_text(prompts)); }
  // images NCHW -> [n, d]
  Tensor encode_image(const Tensor& images) const;
  Tensor encode_image(const Image& image) const;

 private:
  struct Block {
    LayerNorm ln1, ln2;
    Linear q, k, v, o, fc1, fc2;
  };
  void build(Rng& rng);

  EncoderConfig config_;
  Tokenizer tokenizer_;
  ParamSet params_;
  Tensor token_embedding_, position_embedding_, projection_;
  std::vector<Block> blocks_;
  LayerNorm final_norm_;
  Conv2d img1_, img2_, img3_;
  Linear img_proj_;
};

// project(f, P, deltaP): rows of f mapped by (P + deltaP); deltaP may be undefined.
Tensor project(const Tensor& features, const Tensor& projection, const Tensor& delta = {});

// a.b / (|a||b|); throws on a zero vector.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

// Symmetric temperature-scaled cross-entropy over the n x n similarity grid;
// row i of both inputs is a matched pair.
Tensor contrastive_loss(const Tensor& image_emb, const Tensor& text_emb, double temperature);

struct ContrastiveConfig {
  std::size_t epochs = 30;
  double lr = 1e-3;
  double temperature = 0.07;
  std::uint64_t seed = 0;
};

struct ContrastiveLog {
  std::vector<double> epoch_loss;
};

// One image per concept in every step, so the 16 x 16 grid has a unique
// positive per row. Throws RuntimeFailure naming the epoch on a NaN loss.
ContrastiveLog contrastive_pretrain(DualEncoder& encoder, const synthworld::Corpus& corpus,
                                    const ContrastiveConfig& config);

struct PairMargin {
  double matched = 0.0, mismatched = 0.0;
  double margin() const { return matched - mismatched; }
};
// Mean cosine of each image with its own caption vs the other captions.
PairMargin pair_margin(const DualEncoder& encoder, const synthworld::Corpus& corpus);

void save_encoder(const std::filesystem::path& dir, const DualEncoder& encoder, nlohmann::json meta = {});
DualEncoder load_encoder(const std::filesystem::path& dir);

}  // namespace ulab::textbridge
