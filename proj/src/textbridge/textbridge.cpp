// SPDX-License-Identifier: Apache-2.0
#include "ulab/textbridge.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ulab/checkpoint.hpp"
#include "ulab/errors.hpp"
#include "ulab/kernels.hpp"
#include "ulab/optim.hpp"

namespace ulab::textbridge {

using synthworld::Corpus;

Tokenizer::Tokenizer(std::size_t max_len) : max_len_(max_len) {
  require(max_len >= 2, "tokenizer needs room for start and end tokens");
  words_ = {"<pad>", "<start>", "<end>", "an", "image", "of", "a", "the", "photo"};
  for (const auto& c : {synthworld::Color::red, synthworld::Color::green, synthworld::Color::blue,
                        synthworld::Color::yellow})
    words_.push_back(synthworld::color_name(c));
  for (const auto& s : {synthworld::ShapeKind::circle, synthworld::ShapeKind::square,
                        synthworld::ShapeKind::triangle, synthworld::ShapeKind::cross})
    words_.push_back(synthworld::shape_name(s));
}

std::vector<std::size_t> Tokenizer::encode(const std::string& prompt) const {
  std::vector<std::size_t> ids{kStart};
  std::vector<std::string> unknown;
  std::istringstream is(prompt);
  std::string w;
  while (is >> w) {
    auto it = std::find(words_.begin() + 3, words_.end(), w);
    if (it == words_.end())
      unknown.push_back(w);
    else
      ids.push_back(static_cast<std::size_t>(it - words_.begin()));
  }
  if (!unknown.empty()) {
    std::string list;
    for (const auto& u : unknown) list += (list.empty() ? "" : ", ") + u;
    throw ValidationError("out-of-vocabulary words: " + list);
  }
  require(ids.size() + 1 <= max_len_, "prompt exceeds " + std::to_string(max_len_ - 2) + " words");
  ids.push_back(kEnd);
  ids.resize(max_len_, kPad);
  return ids;
}

std::size_t Tokenizer::end_position(const std::vector<std::size_t>& ids) {
  auto it = std::find(ids.begin(), ids.end(), kEnd);
  require(it != ids.end(), "token sequence has no end token");
  return static_cast<std::size_t>(it - ids.begin());
}

void Tokenizer::write_vocabulary(const std::filesystem::path& path) const {
  std::string text;
  for (const auto& w : words_) text += w + "\n";
  write_text(path, text);
}

nlohmann::json EncoderConfig::to_json() const {
  return {{"d", d},
          {"heads", heads},
          {"blocks", blocks},
          {"max_len", max_len},
          {"mlp_ratio", mlp_ratio},
          {"image_side", image_side},
          {"image_width", image_width},
          {"seed", seed}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.d = j.value("d", c.d);
  c.heads = j.value("heads", c.heads);
  c.blocks = j.value("blocks", c.blocks);
  c.max_len = j.value("max_len", c.max_len);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.image_side = j.value("image_side", c.image_side);
  c.image_width = j.value("image_width", c.image_width);
  c.seed = j.value("seed", c.seed);
  return c;
}

std::string parameter_group(const std::string& name) {
  if (name.rfind("image.", 0) == 0) return "image";
  if (name.rfind("text.block", 0) == 0) return name.substr(0, name.find('.', 5));
  if (name.rfind("text.final_norm", 0) == 0) return "text.final_norm";
  if (name == "text.projection") return "text.projection";
  if (name.rfind("text.", 0) == 0) return "text.embedding";
  throw ValidationError("parameter " + name + " belongs to no encoder group");
}

DualEncoder::DualEncoder(const EncoderConfig& config) : config_(config), tokenizer_(config.max_len) {
  require(config.d >= 1 && config.heads >= 1 && config.d % config.heads == 0, "encoder width must divide into heads");
  require(config.blocks >= 1, "encoder needs at least one block");
  require(config.image_side % 8 == 0 && config.image_side >= 16, "image side must be a multiple of 8, at least 16");
  Rng rng(derive_seed(config.seed, "textbridge.init"));
  build(rng);
}

DualEncoder::DualEncoder(const DualEncoder& other) : config_(other.config_), tokenizer_(other.tokenizer_) {
  Rng rng(0);
  build(rng);
  params_.copy_values_from(other.params_);
}

void DualEncoder::build(Rng& rng) {
  const std::size_t d = config_.d;
  token_embedding_ = params_.add("text.token_embedding", {tokenizer_.vocab_size(), d}, 0.5, rng);
  position_embedding_ = params_.add("text.position_embedding", {config_.max_len, d}, 0.1, rng);
  for (std::size_t b = 0; b < config_.blocks; ++b) {
    const std::string p = "text.block" + std::to_string(b);
    Block blk;
    blk.ln1 = LayerNorm(params_, p + ".ln1", d);
    blk.q = Linear(params_, p + ".attn.q", d, d, rng);
    blk.k = Linear(params_, p + ".attn.k", d, d, rng);
    blk.v = Linear(params_, p + ".attn.v", d, d, rng);
    blk.o = Linear(params_, p + ".attn.o", d, d, rng);
    blk.ln2 = LayerNorm(params_, p + ".ln2", d);
    blk.fc1 = Linear(params_, p + ".mlp.fc1", d, config_.mlp_ratio * d, rng);
    blk.fc2 = Linear(params_, p + ".mlp.fc2", config_.mlp_ratio * d, d, rng);
    blocks_.push_back(blk);
  }
  final_norm_ = LayerNorm(params_, "text.final_norm", d);
  projection_ = params_.add("text.projection", {d, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  const std::size_t w = config_.image_width;
  img1_ = Conv2d(params_, "image.conv1", 3, w, 3, 2, 1, rng);
  img2_ = Conv2d(params_, "image.conv2", w, 2 * w, 3, 2, 1, rng);
  img3_ = Conv2d(params_, "image.conv3", 2 * w, 4 * w, 3, 2, 1, rng);
  img_proj_ = Linear(params_, "image.proj", 4 * w, d, rng);
}

Tensor DualEncoder::encode_text(const std::vector<std::string>& prompts) const {
  require(!prompts.empty(), "encode_text: no prompts");
  const std::size_t n = prompts.size(), d = config_.d;
  std::vector<std::vector<std::size_t>> seqs;
  std::vector<std::size_t> ends;
  std::size_t len = 0;
  for (const auto& p : prompts) {
    seqs.push_back(tokenizer_.encode(p));
    ends.push_back(Tokenizer::end_position(seqs.back()));
    len = std::max(len, ends.back() + 1);
  }
  // Causal attention: positions after the longest end token never reach a
  // pooled feature, so the batch is truncated there.
  std::vector<std::size_t> ids, positions, pooled;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < len; ++t) {
      ids.push_back(seqs[i][t]);
      positions.push_back(t);
    }
    pooled.push_back(i * len + ends[i]);
  }
  Tensor x = add(embedding(token_embedding_, ids), embedding(position_embedding_, positions));
  for (const auto& blk : blocks_) {
    Tensor h = blk.ln1(x);
    Tensor q = reshape(blk.q(h), {n, len, d});
    Tensor k = reshape(blk.k(h), {n, len, d});
    Tensor v = reshape(blk.v(h), {n, len, d});
    Tensor a = reshape(attention(q, k, v, config_.heads, true), {n * len, d});
    x = add(x, blk.o(a));
    x = add(x, blk.fc2(gelu(blk.fc1(blk.ln2(x)))));
  }
  return select_rows(final_norm_(x), pooled);
}

Tensor DualEncoder::project(const Tensor& features) const { return textbridge::project(features, projection_); }

Tensor DualEncoder::encode_image(const Tensor& images) const {
  require(images.rank() == 4 && images.dim(1) == 3 && images.dim(2) == config_.image_side &&
              images.dim(3) == config_.image_side,
          "encode_image: expected [n,3," + std::to_string(config_.image_side) + "," +
              std::to_string(config_.image_side) + "], got " + shape_str(images.shape()));
  Tensor h = silu(img1_(images));
  h = silu(img2_(h));
  h = silu(img3_(h));
  return img_proj_(global_avg_pool(h));
}

Tensor DualEncoder::encode_image(const Image& image) const {
  require(image.side == config_.image_side, "encode_image: image side mismatch");
  return encode_image(images_to_tensor(std::span<const Image>(&image, 1)));
}

Tensor project(const Tensor& features, const Tensor& projection, const Tensor& delta) {
  require(projection.rank() == 2 && projection.dim(0) == projection.dim(1), "projection matrix must be square");
  require(features.rank() == 2 && features.dim(1) == projection.dim(1),
          "project: feature width " + shape_str(features.shape()) + " vs P " + shape_str(projection.shape()));
  if (delta.defined()) {
    require(delta.shape() == projection.shape(), "project: deltaP shape mismatch");
    return matmul(features, add(projection, delta), false, true);
  }
  return matmul(features, projection, false, true);
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size() && !a.empty(), "cosine_similarity: length mismatch");
  const auto& k = kernels::active();
  const double na = std::sqrt(k.dot(a.data(), a.data(), a.size()));
  const double nb = std::sqrt(k.dot(b.data(), b.data(), b.size()));
  require(na > 0.0 && nb > 0.0, "cosine_similarity: zero vector");
  return std::clamp(k.dot(a.data(), b.data(), a.size()) / (na * nb), -1.0, 1.0);
}

Tensor contrastive_loss(const Tensor& image_emb, const Tensor& text_emb, double temperature) {
  require(image_emb.shape() == text_emb.shape() && image_emb.rank() == 2, "contrastive_loss: shape mismatch");
  const std::size_t n = image_emb.dim(0);
  std::vector<std::size_t> diag(n);
  for (std::size_t i = 0; i < n; ++i) diag[i] = i;
  Tensor logits = scale(matmul(normalize_rows(image_emb), normalize_rows(text_emb), false, true), 1.0 / temperature);
  return scale(add(cross_entropy(logits, diag), cross_entropy(transpose(logits), diag)), 0.5);
}

namespace {
std::vector<std::string> all_captions() {
  std::vector<std::string> out;
  for (const auto& c : synthworld::vocabulary()) out.push_back(synthworld::make_caption(c));
  return out;
}
}  // namespace

ContrastiveLog contrastive_pretrain(DualEncoder& encoder, const Corpus& corpus, const ContrastiveConfig& cfg) {
  require(corpus.split == synthworld::Split::pretrain, "contrastive_pretrain needs a pretrain split corpus");
  std::vector<std::vector<std::size_t>> by_concept(synthworld::kNumConcepts);
  for (std::size_t i = 0; i < corpus.items.size(); ++i) by_concept[corpus.items[i].label.index()].push_back(i);
  std::size_t steps = corpus.items.size();
  for (const auto& g : by_concept) {
    require(!g.empty(), "contrastive_pretrain: corpus misses a concept");
    steps = std::min(steps, g.size());
  }
  const auto captions = all_captions();
  encoder.params().set_requires_grad(true);
  Adam opt(encoder.params().tensors(), cfg.lr);
  Rng rng(derive_seed(cfg.seed, "textbridge.contrastive"));
  ContrastiveLog log;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (auto& g : by_concept) std::shuffle(g.begin(), g.end(), rng.engine());
    double total = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
      std::vector<Image> batch;
      for (const auto& g : by_concept) batch.push_back(corpus.items[g[s]].image);
      Tensor loss = contrastive_loss(encoder.encode_image(images_to_tensor(batch)), encoder.embed_text(captions),
                                     cfg.temperature);
      if (!std::isfinite(loss.item()))
        throw RuntimeFailure("contrastive pretraining diverged (NaN loss) in epoch " + std::to_string(epoch));
      loss.backward();
      opt.step();
      total += loss.item();
    }
    log.epoch_loss.push_back(total / static_cast<double>(steps));
  }
  return log;
}

PairMargin pair_margin(const DualEncoder& encoder, const Corpus& corpus) {
  NoGradGuard ng;
  const auto captions = all_captions();
  Tensor text = encoder.embed_text(captions);
  const std::size_t d = encoder.config().d;
  double matched = 0.0, mismatched = 0.0;
  std::size_t nm = 0, nx = 0;
  for (std::size_t start = 0; start < corpus.items.size(); start += 64) {
    std::vector<Image> batch;
    for (std::size_t i = start; i < std::min(start + 64, corpus.items.size()); ++i)
      batch.push_back(corpus.items[i].image);
    Tensor img = encoder.encode_image(images_to_tensor(batch));
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const std::size_t own = corpus.items[start + b].label.index();
      for (std::size_t c = 0; c < captions.size(); ++c) {
        const double s = cosine_similarity(img.data().subspan(b * d, d), text.data().subspan(c * d, d));
        if (c == own) {
          matched += s;
          ++nm;
        } else {
          mismatched += s;
          ++nx;
        }
      }
    }
  }
  return {matched / static_cast<double>(nm), mismatched / static_cast<double>(nx)};
}

void save_encoder(const std::filesystem::path& dir, const DualEncoder& encoder, nlohmann::json meta) {
  nlohmann::json groups = nlohmann::json::object();
  for (const auto& name : encoder.params().names()) groups[name] = parameter_group(name);
  meta["encoder_config"] = encoder.config().to_json();
  meta["parameter_groups"] = groups;
  save_checkpoint(dir, encoder.params(), meta);
  encoder.tokenizer().write_vocabulary(dir / "vocabulary.txt");
}

DualEncoder load_encoder(const std::filesystem::path& dir) {
  const auto meta = read_checkpoint_meta(dir);
  DualEncoder enc(EncoderConfig::from_json(meta.at("encoder_config")));
  load_checkpoint(dir, enc.params());
  return enc;
}

}  // namespace ulab::textbridge
