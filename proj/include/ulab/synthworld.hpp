// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ulab/image.hpp"

// Procedural corpus of colored geometric shapes with template captions.
namespace ulab::synthworld {

enum class ShapeKind : int { circle = 0, square = 1, triangle = 2, cross = 3 };
enum class Color : int { red = 0, green = 1, blue = 2, yellow = 3 };

inline constexpr std::size_t kNumShapes = 4;
inline constexpr std::size_t kNumColors = 4;
inline constexpr std::size_t kNumConcepts = kNumShapes * kNumColors;
inline constexpr std::size_t kDefaultSide = 32;

struct Concept {
  ShapeKind shape = ShapeKind::circle;
  Color color = Color::red;

  // shape-major index in [0, 16)
  std::size_t index() const { return static_cast<std::size_t>(shape) * kNumColors + static_cast<std::size_t>(color); }
  static Concept from_index(std::size_t i);
  bool valid() const;
  bool operator==(const Concept&) const = default;
};

std::string shape_name(ShapeKind s);
std::string color_name(Color c);
// "red_circle"
std::string concept_name(const Concept& c);
Concept parse_concept(const std::string& name);
std::vector<Concept> vocabulary();
std::array<double, 3> rgb(Color c);

struct SceneSpec {
  ShapeKind shape = ShapeKind::circle;
  Color color = Color::red;
  double x = 0.5, y = 0.5;  // center, normalized
  double scale = 0.4;       // fraction of side, [0.2, 0.5]
  double background = 0.5;  // gray level
  std::uint64_t seed = 0;
};

// Validation error names the offending field.
void validate(const SceneSpec& spec);
// 2x2 supersampled coverage blended over the background.
Image render_scene(const SceneSpec& spec, std::size_t side = kDefaultSide);

// "an image of a <color> <shape>"
std::string make_caption(const Concept& c);

enum class Split { pretrain, forget, retain, eval };
std::string split_name(Split s);
Split parse_split(const std::string& name);

struct CaptionedImage {
  Image image;
  std::string caption;
  Concept label;
  std::uint64_t seed = 0;
};

struct Corpus {
  std::vector<CaptionedImage> items;
  Split split = Split::pretrain;
  std::uint64_t seed = 0;
};

// Sampling ranges for generated scenes; all within SceneSpec's valid ranges.
struct CorpusOptions {
  std::size_t side = kDefaultSide;
  double position_lo = 0.35, position_hi = 0.65;
  double scale_lo = 0.3, scale_hi = 0.5;
  double background_lo = 0.3, background_hi = 0.7;
  std::size_t forget_min = 4, forget_max = 5;
};

// pretrain/eval: concepts cycle through the vocabulary (or are fixed to
// `target` when given); retain: every concept except `target`; forget: only
// `target`, n within [forget_min, forget_max]. Item i uses seed ^ i.
Corpus build_corpus(Split split, std::optional<Concept> target, std::size_t n, std::uint64_t seed,
                    const CorpusOptions& options = {});

// One PNG per item plus manifest.json: filename -> {caption, shape, color, split, seed}.
void save_corpus(const std::filesystem::path& dir, const Corpus& corpus);
Corpus load_corpus(const std::filesystem::path& dir);

}  // namespace ulab::synthworld
