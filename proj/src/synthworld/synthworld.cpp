// SPDX-License-Identifier: Apache-2.0
#include "ulab/synthworld.hpp"

#include <cmath>
#include <cstdio>

#include "json.hpp"
#include "ulab/checkpoint.hpp"
#include "ulab/errors.hpp"
#include "ulab/rng.hpp"

namespace ulab::synthworld {

Concept Concept::from_index(std::size_t i) {
  require(i < kNumConcepts, "concept index out of range: " + std::to_string(i));
  return {static_cast<ShapeKind>(i / kNumColors), static_cast<Color>(i % kNumColors)};
}

bool Concept::valid() const {
  const int s = static_cast<int>(shape), c = static_cast<int>(color);
  return s >= 0 && s < static_cast<int>(kNumShapes) && c >= 0 && c < static_cast<int>(kNumColors);
}

std::string shape_name(ShapeKind s) {
  switch (s) {
    case ShapeKind::circle: return "circle";
    case ShapeKind::square: return "square";
    case ShapeKind::triangle: return "triangle";
    case ShapeKind::cross: return "cross";
  }
  throw ValidationError("unknown shape value " + std::to_string(static_cast<int>(s)));
}

std::string color_name(Color c) {
  switch (c) {
    case Color::red: return "red";
    case Color::green: return "green";
    case Color::blue: return "blue";
    case Color::yellow: return "yellow";
  }
  throw ValidationError("unknown color value " + std::to_string(static_cast<int>(c)));
}

std::string concept_name(const Concept& c) { return color_name(c.color) + "_" + shape_name(c.shape); }

Concept parse_concept(const std::string& name) {
  for (const auto& c : vocabulary())
    if (concept_name(c) == name) return c;
  throw ValidationError("unknown concept '" + name + "' (expected <color>_<shape>, e.g. red_circle)");
}

std::vector<Concept> vocabulary() {
  std::vector<Concept> v;
  for (std::size_t i = 0; i < kNumConcepts; ++i) v.push_back(Concept::from_index(i));
  return v;
}

std::array<double, 3> rgb(Color c) {
  switch (c) {
    case Color::red: return {1.0, 0.0, 0.0};
    case Color::green: return {0.0, 1.0, 0.0};
    case Color::blue: return {0.0, 0.0, 1.0};
    case Color::yellow: return {1.0, 1.0, 0.0};
  }
  throw ValidationError("unknown color");
}

void validate(const SceneSpec& s) {
  require(Concept{s.shape, s.color}.valid(), "scene field 'shape'/'color' outside the vocabulary");
  require(s.x >= 0.0 && s.x <= 1.0, "scene field 'x' must lie in [0,1]");
  require(s.y >= 0.0 && s.y <= 1.0, "scene field 'y' must lie in [0,1]");
  require(s.scale >= 0.2 && s.scale <= 0.5, "scene field 'scale' must lie in [0.2,0.5]");
  require(s.background >= 0.0 && s.background <= 1.0, "scene field 'background' must lie in [0,1]");
}

namespace {

bool inside(ShapeKind shape, double dx, double dy, double s) {
  const double h = 0.5 * s;
  switch (shape) {
    case ShapeKind::circle:
      return dx * dx + dy * dy <= h * h;
    case ShapeKind::square:
      return std::abs(dx) <= h && std::abs(dy) <= h;
    case ShapeKind::triangle: {
      // apex up, base at dy = +h; half-width grows linearly from apex to base
      if (dy < -h || dy > h) return false;
      const double half_width = 0.5 * (dy + h);
      return std::abs(dx) <= half_width;
    }
    case ShapeKind::cross: {
      const double arm = s / 6.0;
      return (std::abs(dx) <= h && std::abs(dy) <= arm) || (std::abs(dy) <= h && std::abs(dx) <= arm);
    }
  }
  return false;
}

}  // namespace

Image render_scene(const SceneSpec& spec, std::size_t side) {
  require(side >= 16, "render side must be at least 16 pixels");
  validate(spec);
  Image im(side);
  const auto col = rgb(spec.color);
  const double inv = 1.0 / static_cast<double>(side);
  constexpr double offs[2] = {0.25, 0.75};
  for (std::size_t py = 0; py < side; ++py)
    for (std::size_t px = 0; px < side; ++px) {
      int hits = 0;
      for (double oy : offs)
        for (double ox : offs) {
          const double u = (static_cast<double>(px) + ox) * inv, v = (static_cast<double>(py) + oy) * inv;
          hits += inside(spec.shape, u - spec.x, v - spec.y, spec.scale) ? 1 : 0;
        }
      const double cov = hits / 4.0;
      for (std::size_t c = 0; c < 3; ++c) im.at(py, px, c) = cov * col[c] + (1.0 - cov) * spec.background;
    }
  return im;
}

std::string make_caption(const Concept& c) {
  require(c.valid(), "concept outside the vocabulary");
  return "an image of a " + color_name(c.color) + " " + shape_name(c.shape);
}

std::string split_name(Split s) {
  switch (s) {
    case Split::pretrain: return "pretrain";
    case Split::forget: return "forget";
    case Split::retain: return "retain";
    case Split::eval: return "eval";
  }
  return "?";
}

Split parse_split(const std::string& name) {
  for (Split s : {Split::pretrain, Split::forget, Split::retain, Split::eval})
    if (split_name(s) == name) return s;
  throw ValidationError("unknown split '" + name + "'");
}

Corpus build_corpus(Split split, std::optional<Concept> target, std::size_t n, std::uint64_t seed,
                    const CorpusOptions& o) {
  require(n > 0, "corpus size must be positive");
  if (target) require(target->valid(), "corpus concept outside the vocabulary");
  if (split == Split::forget) {
    require(target.has_value(), "forget split requires a concept");
    require(n >= o.forget_min && n <= o.forget_max,
            "forget split size " + std::to_string(n) + " outside [" + std::to_string(o.forget_min) + ", " +
                std::to_string(o.forget_max) + "]");
  }
  std::vector<Concept> cycle;
  if (split == Split::forget || ((split == Split::pretrain || split == Split::eval) && target)) {
    cycle = {*target};
  } else {
    for (const auto& c : vocabulary())
      if (!(split == Split::retain && target && c == *target)) cycle.push_back(c);
  }
  Corpus corpus{{}, split, seed};
  corpus.items.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t item_seed = seed ^ static_cast<std::uint64_t>(i);
    Rng rng(splitmix64(item_seed));
    const Concept c = cycle[i % cycle.size()];
    SceneSpec spec;
    spec.shape = c.shape;
    spec.color = c.color;
    spec.x = rng.uniform(o.position_lo, o.position_hi);
    spec.y = rng.uniform(o.position_lo, o.position_hi);
    spec.scale = rng.uniform(o.scale_lo, o.scale_hi);
    spec.background = rng.uniform(o.background_lo, o.background_hi);
    spec.seed = item_seed;
    corpus.items.push_back({render_scene(spec, o.side), make_caption(c), c, item_seed});
  }
  return corpus;
}

void save_corpus(const std::filesystem::path& dir, const Corpus& corpus) {
  std::filesystem::create_directories(dir);
  nlohmann::json items = nlohmann::json::object();
  for (std::size_t i = 0; i < corpus.items.size(); ++i) {
    const auto& it = corpus.items[i];
    char name[32];
    std::snprintf(name, sizeof(name), "%06zu.png", i);
    write_png(dir / name, it.image);
    items[name] = {{"caption", it.caption},
                   {"shape", shape_name(it.label.shape)},
                   {"color", color_name(it.label.color)},
                   {"split", split_name(corpus.split)},
                   {"seed", it.seed}};
  }
  nlohmann::json manifest{{"split", split_name(corpus.split)}, {"seed", corpus.seed}, {"items", items}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

Corpus load_corpus(const std::filesystem::path& dir) {
  const auto manifest = nlohmann::json::parse(read_text(dir / "manifest.json"));
  Corpus c;
  c.split = parse_split(manifest.at("split").get<std::string>());
  c.seed = manifest.at("seed").get<std::uint64_t>();
  for (const auto& [file, meta] : manifest.at("items").items()) {  // keys sort by filename
    CaptionedImage it;
    it.image = read_png(dir / file);
    it.caption = meta.at("caption").get<std::string>();
    it.label = parse_concept(meta.at("color").get<std::string>() + "_" + meta.at("shape").get<std::string>());
    it.seed = meta.at("seed").get<std::uint64_t>();
    c.items.push_back(std::move(it));
  }
  return c;
}

}  // namespace ulab::synthworld
