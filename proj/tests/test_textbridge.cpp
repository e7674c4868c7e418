#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "doctest.h"
#include "gradcheck.hpp"
#include "ulab/checkpoint.hpp"
#include "ulab/errors.hpp"
#include "ulab/textbridge.hpp"

using namespace ulab;
using namespace ulab::textbridge;
using testutil::gradcheck;
using testutil::probe;

namespace {

EncoderConfig tiny() {
  EncoderConfig c;
  c.d = 8;
  c.heads = 2;
  c.blocks = 2;
  c.image_side = 16;
  c.image_width = 4;
  c.seed = 3;
  return c;
}

std::vector<Tensor> group_params(DualEncoder& enc, const std::string& group) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : enc.params().entries())
    if (parameter_group(name) == group) out.push_back(t);
  return out;
}

Tensor image_batch(std::size_t n, std::size_t side, std::uint64_t seed) {
  std::mt19937_64 g(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(n * 3 * side * side);
  for (auto& x : v) x = u(g);
  return Tensor::from({n, 3, side, side}, std::move(v));
}

}  // namespace

TEST_CASE("tokenizer is stable, padded and closed") {
  Tokenizer tok;
  auto ids = tok.encode("an image of a red circle");
  CHECK(ids.size() == 16);
  CHECK(ids == tok.encode("an image of a red circle"));
  CHECK(ids[0] == kStart);
  CHECK(Tokenizer::end_position(ids) == 7);
  CHECK(ids[7] == kEnd);
  CHECK(ids[8] == kPad);

  auto empty = tok.encode("");
  CHECK(empty[0] == kStart);
  CHECK(empty[1] == kEnd);
  for (std::size_t i = 2; i < empty.size(); ++i) CHECK(empty[i] == kPad);

  CHECK_THROWS_WITH_AS(tok.encode("an image of a husky"), doctest::Contains("husky"), ValidationError);
  CHECK_THROWS_AS(tok.encode("a a a a a a a a a a a a a a a"), ValidationError);
}

TEST_CASE("vocabulary file lists one word per line") {
  Tokenizer tok;
  const auto p = std::filesystem::temp_directory_path() / "ulab_vocab.txt";
  tok.write_vocabulary(p);
  const std::string text = read_text(p);
  CHECK(std::count(text.begin(), text.end(), '\n') == static_cast<long>(tok.vocab_size()));
  CHECK(text.find("circle\n") != std::string::npos);
  std::filesystem::remove(p);
}

TEST_CASE("cosine similarity") {
  std::vector<double> a{1, 0}, b{1, 1}, c{0, 1}, z{0, 0};
  CHECK(cosine_similarity(a, a) == doctest::Approx(1.0));
  CHECK(cosine_similarity(a, c) == doctest::Approx(0.0));
  CHECK(cosine_similarity(a, b) == doctest::Approx(0.70711).epsilon(1e-5));
  CHECK_THROWS_AS(cosine_similarity(a, z), ValidationError);
  std::vector<double> b3{3.7, 3.7};
  CHECK(std::abs(cosine_similarity(a, b3) - cosine_similarity(a, b)) < 1e-6);
}

TEST_CASE("projection: identity, hand example, linearity") {
  Tensor p = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor dp = Tensor::from({2, 2}, {0, 1, 0, 0});
  Tensor f = Tensor::from({1, 2}, {2, 3});
  CHECK(project(f, p, dp).values() == std::vector<double>{5, 3});
  CHECK(project(f, p).values() == std::vector<double>{2, 3});
  CHECK(project(f, p, Tensor::zeros({2, 2})).values() == project(f, p).values());

  std::mt19937_64 g(1);
  Tensor pr = testutil::randn({4, 4}, g), f1 = testutil::randn({1, 4}, g), f2 = testutil::randn({1, 4}, g);
  Tensor lhs = project(add(f1, f2), pr);
  Tensor rhs = add(project(f1, pr), project(f2, pr));
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(lhs[i] - rhs[i]) < 1e-12);
  CHECK_THROWS_AS(project(Tensor::zeros({1, 3}), p), ValidationError);
  CHECK_THROWS_AS(project(f, p, Tensor::zeros({3, 3})), ValidationError);
}

TEST_CASE("parameter groups partition the encoder") {
  DualEncoder enc(EncoderConfig{});
  std::map<std::string, int> count;
  for (const auto& name : enc.params().names()) ++count[parameter_group(name)];
  std::set<std::string> want{"text.embedding", "text.block0", "text.block1", "text.final_norm", "text.projection",
                             "image"};
  std::set<std::string> got;
  for (auto& [g, n] : count) got.insert(g);
  CHECK(got == want);
  CHECK(count["text.projection"] == 1);
  CHECK_THROWS_AS(parameter_group("unet.conv_in.weight"), ValidationError);
}

TEST_CASE("encoders are deterministic and finite") {
  DualEncoder enc(tiny());
  Tensor a = enc.encode_text({"an image of a red circle"});
  Tensor b = enc.encode_text({"an image of a red circle"});
  CHECK(a.values() == b.values());
  CHECK(a.shape() == Shape{1, 8});
  Tensor batch = enc.encode_text({"an image of a blue cross", "an image of a red circle"});
  for (std::size_t i = 0; i < 8; ++i) CHECK(batch[8 + i] == doctest::Approx(a[i]).epsilon(1e-12));

  Image ones(16);
  std::fill(ones.pixels.begin(), ones.pixels.end(), 1.0);
  Tensor e1 = enc.encode_image(ones), e2 = enc.encode_image(ones);
  CHECK(e1.values() == e2.values());
  for (double v : e1.values()) CHECK(std::isfinite(v));
  CHECK_THROWS_AS(enc.encode_image(Image(32)), ValidationError);
}

TEST_CASE("encode_text gradient w.r.t. last block and final norm") {
  DualEncoder enc(tiny());
  auto params = group_params(enc, "text.block1");
  auto norm = group_params(enc, "text.final_norm");
  params.insert(params.end(), norm.begin(), norm.end());
  auto rep = gradcheck([&] { return probe(enc.encode_text({"an image of a red circle", "a green square"})); }, params);
  INFO(rep.worst);
  CHECK(rep.max_rel < 1e-4);
}

TEST_CASE("contrastive loss gradient w.r.t. every group") {
  DualEncoder enc(tiny());
  Tensor imgs = image_batch(3, 16, 5);
  std::vector<std::string> caps{"an image of a red circle", "an image of a blue square", "the photo of a cross"};
  for (const std::string group :
       {"text.embedding", "text.block0", "text.block1", "text.final_norm", "text.projection", "image"}) {
    auto rep = gradcheck([&] { return contrastive_loss(enc.encode_image(imgs), enc.embed_text(caps), 0.07); },
                         group_params(enc, group));
    INFO(group << ": " << rep.worst);
    CHECK(rep.max_rel < 1e-4);
  }
}

TEST_CASE("contrastive loss of a single pair is zero") {
  std::mt19937_64 g(2);
  Tensor a = testutil::randn({1, 8}, g), b = testutil::randn({1, 8}, g);
  CHECK(contrastive_loss(a, b, 0.07).item() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("contrastive pretraining is deterministic and lowers the loss") {
  auto corpus = synthworld::build_corpus(synthworld::Split::pretrain, std::nullopt, 64, 1,
                                         synthworld::CorpusOptions{16});
  ContrastiveConfig cfg;
  cfg.epochs = 3;
  DualEncoder a(tiny()), b(tiny());
  auto la = contrastive_pretrain(a, corpus, cfg);
  auto lb = contrastive_pretrain(b, corpus, cfg);
  CHECK(la.epoch_loss == lb.epoch_loss);
  CHECK(la.epoch_loss.size() == 3);
  CHECK(la.epoch_loss.back() < la.epoch_loss.front());
  CHECK(blob_hashes(a.params()) == blob_hashes(b.params()));
  auto bad = synthworld::build_corpus(synthworld::Split::eval, std::nullopt, 16, 1, synthworld::CorpusOptions{16});
  CHECK_THROWS_AS(contrastive_pretrain(a, bad, cfg), ValidationError);
}

TEST_CASE("encoder checkpoint round-trips bit-exactly") {
  DualEncoder enc(tiny());
  quantize_f32(enc.params());
  const auto dir = std::filesystem::temp_directory_path() / "ulab_test_encoder";
  std::filesystem::remove_all(dir);
  save_encoder(dir, enc);
  CHECK(std::filesystem::exists(dir / "vocabulary.txt"));
  auto meta = read_checkpoint_meta(dir);
  CHECK(meta.at("parameter_groups").size() == enc.params().entries().size());
  DualEncoder back = load_encoder(dir);
  for (const auto& [name, t] : enc.params().entries()) CHECK(back.params().get(name).values() == t.values());
  std::filesystem::remove_all(dir);
}
