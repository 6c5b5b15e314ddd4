#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "detailclip/config.hpp"
#include "detailclip/tensor.hpp"

namespace detailclip {

/// H x W x 3 floats, interleaved row-major.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, float fill = 0.0f)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {}

  float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }

  bool operator==(const Image&) const = default;
};

enum class Shape { kCircle, kSquare, kTriangle };
enum class Color { kRed, kGreen, kBlue, kYellow };

inline constexpr std::array<std::string_view, 3> kShapeNames = {"circle", "square", "triangle"};
inline constexpr std::array<std::string_view, 4> kColorNames = {"red", "green", "blue", "yellow"};
inline constexpr int kPairCount = 12;

/// Center and size are fractions of the image side.
struct SceneObject {
  Shape shape = Shape::kCircle;
  Color color = Color::kRed;
  double cx = 0.5;
  double cy = 0.5;
  double size = 0.3;

  bool operator==(const SceneObject&) const = default;
};

struct CaptionedImage {
  int id = 0;
  Image pixels;
  std::string caption;
  std::vector<SceneObject> scene;
};

// ---------------------------------------------------------------------------
// rendering

namespace detail {

inline constexpr std::array<std::array<std::uint8_t, 3>, 4> kPalette = {{
    {220, 40, 40},   // red
    {40, 190, 60},   // green
    {50, 80, 230},   // blue
    {230, 210, 40},  // yellow
}};
inline constexpr std::uint8_t kBackground = 40;

inline bool covers(const SceneObject& o, double x, double y) {
  const double dx = x - o.cx;
  const double dy = y - o.cy;
  const double half = o.size / 2.0;
  switch (o.shape) {
    case Shape::kCircle:
      return dx * dx + dy * dy <= half * half;
    case Shape::kSquare:
      return std::abs(dx) <= half && std::abs(dy) <= half;
    case Shape::kTriangle: {
      // apex up, base at cy + half
      if (dy < -half || dy > half) return false;
      const double t = (dy + half) / (2.0 * half);
      return std::abs(dx) <= t * half;
    }
  }
  return false;
}

}  // namespace detail

/// Pixel values are multiples of 1/255, so an 8-bit lossless export
/// round-trips bitwise.
inline Image render_scene(const std::vector<SceneObject>& scene, int side) {
  Image img(side, side, static_cast<float>(detail::kBackground) / 255.0f);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      const double fx = (x + 0.5) / side;
      const double fy = (y + 0.5) / side;
      for (const auto& o : scene) {
        if (!detail::covers(o, fx, fy)) continue;
        const auto& rgb = detail::kPalette[static_cast<std::size_t>(o.color)];
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>(rgb[static_cast<std::size_t>(c)]) / 255.0f;
      }
    }
  }
  return img;
}

inline std::string caption_for(const std::vector<SceneObject>& scene) {
  std::string out;
  for (std::size_t i = 0; i < scene.size(); ++i) {
    if (i > 0) out += " and ";
    out += "a ";
    out += kColorNames[static_cast<std::size_t>(scene[i].color)];
    out += ' ';
    out += kShapeNames[static_cast<std::size_t>(scene[i].shape)];
  }
  return out;
}

inline std::string scene_to_text(const std::vector<SceneObject>& scene) {
  std::ostringstream out;
  for (std::size_t i = 0; i < scene.size(); ++i) {
    const auto& o = scene[i];
    if (i > 0) out << ';';
    out << kShapeNames[static_cast<std::size_t>(o.shape)] << ' ' << kColorNames[static_cast<std::size_t>(o.color)]
        << ' ' << detail::format_double(o.cx) << ' ' << detail::format_double(o.cy) << ' '
        << detail::format_double(o.size);
  }
  return out.str();
}

inline std::vector<SceneObject> scene_from_text(std::string_view text) {
  std::vector<SceneObject> scene;
  std::istringstream in{std::string(text)};
  std::string item;
  while (std::getline(in, item, ';')) {
    std::istringstream fields(item);
    std::string shape;
    std::string color;
    SceneObject o;
    if (!(fields >> shape >> color >> o.cx >> o.cy >> o.size)) throw ParseError("bad scene spec '" + item + "'");
    const auto s = std::find(kShapeNames.begin(), kShapeNames.end(), shape);
    const auto c = std::find(kColorNames.begin(), kColorNames.end(), color);
    if (s == kShapeNames.end() || c == kColorNames.end()) throw ParseError("bad scene spec '" + item + "'");
    o.shape = static_cast<Shape>(s - kShapeNames.begin());
    o.color = static_cast<Color>(c - kColorNames.begin());
    scene.push_back(o);
  }
  return scene;
}

namespace detail {

inline SceneObject random_object(Rng& rng, int pair, double x_lo, double x_hi) {
  SceneObject o;
  o.shape = static_cast<Shape>(pair / 4);
  o.color = static_cast<Color>(pair % 4);
  o.size = rng.uniform(0.25, 0.42);
  const double half = o.size / 2.0;
  o.cx = rng.uniform(std::max(x_lo, half), std::min(x_hi, 1.0 - half));
  o.cy = rng.uniform(half, 1.0 - half);
  return o;
}

inline std::vector<SceneObject> random_scene(Rng& rng, int forced_pair) {
  if (forced_pair >= 0) return {random_object(rng, forced_pair, 0.0, 1.0)};
  const int first = static_cast<int>(rng.below(kPairCount));
  if (rng.coin()) return {random_object(rng, first, 0.0, 1.0)};
  const int second = static_cast<int>(rng.below(kPairCount));
  return {random_object(rng, first, 0.0, 0.5), random_object(rng, second, 0.5, 1.0)};
}

}  // namespace detail

/// Deterministic corpus. Even indices cycle through all 12 single-object
/// (shape, color) pairs in a seed-dependent order; odd indices hold one or
/// two random objects.
inline std::vector<CaptionedImage> generate_corpus(int n, std::uint64_t seed, int image_size = 64) {
  if (n < 1) throw RangeError("corpus size must be at least 1");
  std::array<int, kPairCount> order{};
  for (int i = 0; i < kPairCount; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng perm(derive_seed(seed, 0x70617273));
  perm.shuffle(order.begin(), order.end());

  std::vector<CaptionedImage> corpus;
  corpus.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, 0x636f7270, static_cast<std::uint64_t>(i)));
    const int forced = i % 2 == 0 ? order[static_cast<std::size_t>((i / 2) % kPairCount)] : -1;
    CaptionedImage item;
    item.id = i;
    item.scene = detail::random_scene(rng, forced);
    item.caption = caption_for(item.scene);
    item.pixels = render_scene(item.scene, image_size);
    corpus.push_back(std::move(item));
  }
  return corpus;
}

/// Evaluation pairs with pairwise-distinct captions, so top-1 retrieval has a
/// single correct answer per query.
inline std::vector<CaptionedImage> generate_heldout(int n, std::uint64_t seed, int image_size = 64) {
  if (n < 1 || n > kPairCount + kPairCount * kPairCount) {
    throw RangeError("held-out size must lie in [1, 156]");
  }
  std::vector<CaptionedImage> out;
  std::set<std::string> seen;
  for (std::uint64_t k = 0; static_cast<int>(out.size()) < n; ++k) {
    Rng rng(derive_seed(seed, 0x68656c64, k));
    CaptionedImage item;
    item.scene = detail::random_scene(rng, -1);
    item.caption = caption_for(item.scene);
    if (!seen.insert(item.caption).second) continue;
    item.id = static_cast<int>(out.size());
    item.pixels = render_scene(item.scene, image_size);
    out.push_back(std::move(item));
  }
  return out;
}

// ---------------------------------------------------------------------------
// tokenizer

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;

/// Closed vocabulary: three specials followed by the word list.
inline const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> words = {
      "<pad>", "<bos>", "<eos>",                                              //
      "a",     "an",    "the",   "and",    "with",   "on",     "of",          //
      "red",   "green", "blue",  "yellow", "circle", "square", "triangle",    //
      "small", "large", "left",  "right",  "top",    "bottom", "shape",       //
      "shapes", "two",  "one",   "image",  "picture", "next",  "to",          //
      "above", "below"};
  return words;
}

struct TokenizedCaption {
  std::vector<int> ids;
  int eot_index = 0;

  bool operator==(const TokenizedCaption&) const = default;
};

inline TokenizedCaption tokenize(std::string_view caption, int context_length = 16, int vocab_size = 40) {
  const auto& vocab = vocabulary();
  if (static_cast<int>(vocab.size()) > vocab_size) {
    throw VocabularyError("vocab_size " + std::to_string(vocab_size) + " is smaller than the vocabulary (" +
                          std::to_string(vocab.size()) + ")");
  }
  TokenizedCaption out;
  out.ids.assign(static_cast<std::size_t>(context_length), kPad);
  std::istringstream in{std::string(caption)};
  std::vector<int> words;
  std::string word;
  while (in >> word) {
    const auto it = std::find(vocab.begin() + 3, vocab.end(), word);
    if (it == vocab.end()) throw UnknownWord("'" + word + "' is not in the vocabulary");
    words.push_back(static_cast<int>(it - vocab.begin()));
  }
  if (static_cast<int>(words.size()) + 2 > context_length) {
    throw LengthError("caption needs " + std::to_string(words.size() + 2) + " tokens, context is " +
                      std::to_string(context_length));
  }
  out.ids[0] = kBos;
  std::copy(words.begin(), words.end(), out.ids.begin() + 1);
  out.eot_index = static_cast<int>(words.size()) + 1;
  out.ids[static_cast<std::size_t>(out.eot_index)] = kEos;
  return out;
}

inline std::string detokenize(const TokenizedCaption& tokens) {
  const auto& vocab = vocabulary();
  std::string out;
  for (int i = 1; i < tokens.eot_index; ++i) {
    if (!out.empty()) out += ' ';
    out += vocab.at(static_cast<std::size_t>(tokens.ids[static_cast<std::size_t>(i)]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// views

/// Square crop of the source: side length in source pixels, top-left offset,
/// and whether the resized crop is mirrored horizontally.
struct CropRecord {
  double scale = 1.0;
  double side = 0.0;
  double offset_x = 0.0;
  double offset_y = 0.0;
  bool flip = false;

  bool operator==(const CropRecord&) const = default;
};

struct ViewPair {
  Image view_u;
  Image view_v;
  CropRecord crop_u;
  CropRecord crop_v;
};

inline CropRecord sample_crop(Rng& rng, int source_side) {
  CropRecord c;
  c.scale = rng.uniform(0.5, 1.0);
  c.side = std::sqrt(c.scale) * source_side;
  c.offset_x = rng.uniform() * (source_side - c.side);
  c.offset_y = rng.uniform() * (source_side - c.side);
  c.flip = rng.coin();
  return c;
}

inline CropRecord identity_crop(int source_side) { return CropRecord{1.0, static_cast<double>(source_side), 0.0, 0.0, false}; }

/// Bilinear resized crop, mapped from [0, 1] to [-1, 1].
inline Image apply_crop(const Image& src, const CropRecord& crop, int out_side) {
  if (src.height < out_side || src.width < out_side) {
    throw ShapeError("source image smaller than the view size");
  }
  Image out(out_side, out_side);
  const double step = crop.side / out_side;
  auto coord = [&](int i, double offset, int limit, int& i0, int& i1, double& frac) {
    double s = offset + (i + 0.5) * step - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(limit - 1));
    i0 = static_cast<int>(std::floor(s));
    i1 = std::min(i0 + 1, limit - 1);
    frac = s - i0;
  };
  for (int y = 0; y < out_side; ++y) {
    int y0 = 0, y1 = 0;
    double fy = 0.0;
    coord(y, crop.offset_y, src.height, y0, y1, fy);
    for (int x = 0; x < out_side; ++x) {
      const int sx_index = crop.flip ? out_side - 1 - x : x;
      int x0 = 0, x1 = 0;
      double fx = 0.0;
      coord(sx_index, crop.offset_x, src.width, x0, x1, fx);
      for (int c = 0; c < 3; ++c) {
        const double top = (1.0 - fx) * src.at(y0, x0, c) + fx * src.at(y0, x1, c);
        const double bottom = (1.0 - fx) * src.at(y1, x0, c) + fx * src.at(y1, x1, c);
        const double v = (1.0 - fy) * top + fy * bottom;
        out.at(y, x, c) = static_cast<float>(2.0 * v - 1.0);
      }
    }
  }
  return out;
}

/// Two independent random-resized crops of one image.
inline ViewPair make_views(const CaptionedImage& img, std::uint64_t seed, int out_side) {
  Rng rng(derive_seed(seed, 0x76696577, static_cast<std::uint64_t>(img.id)));
  ViewPair pair;
  pair.crop_u = sample_crop(rng, img.pixels.width);
  pair.crop_v = sample_crop(rng, img.pixels.width);
  pair.view_u = apply_crop(img.pixels, pair.crop_u, out_side);
  pair.view_v = apply_crop(img.pixels, pair.crop_v, out_side);
  return pair;
}

/// Full-frame, unflipped view used for evaluation and visualisation.
inline Image eval_view(const Image& src, int out_side) {
  return apply_crop(src, identity_crop(src.width), out_side);
}

// ---------------------------------------------------------------------------
// lossless 8-bit image files (binary PPM) and corpus directories

inline void write_ppm(const std::filesystem::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> bytes(img.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(img.pixels[i], 0.0f, 1.0f) * 255.0f));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

inline Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255) throw IoError("unsupported image file " + path.string());
  in.get();
  Image img(h, w);
  std::vector<unsigned char> bytes(img.pixels.size());
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw IoError("truncated image " + path.string());
  for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = static_cast<float>(bytes[i]) / 255.0f;
  return img;
}

/// Writes images/NNNNN.ppm plus metadata.tsv (id, caption, scene spec).
inline void export_corpus(const std::vector<CaptionedImage>& corpus, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::ofstream meta(dir / "metadata.tsv");
  if (!meta) throw IoError("cannot write metadata in " + dir.string());
  for (const auto& item : corpus) {
    char name[32];
    std::snprintf(name, sizeof name, "%05d.ppm", item.id);
    write_ppm(dir / "images" / name, item.pixels);
    meta << item.id << '\t' << item.caption << '\t' << scene_to_text(item.scene) << '\n';
  }
}

inline std::vector<CaptionedImage> import_corpus(const std::filesystem::path& dir) {
  std::ifstream meta(dir / "metadata.tsv");
  if (!meta) throw IoError("no metadata.tsv in " + dir.string());
  std::vector<CaptionedImage> corpus;
  std::string line;
  while (std::getline(meta, line)) {
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = line.find('\t', t1 + 1);
    if (t1 == std::string::npos || t2 == std::string::npos) throw ParseError("bad metadata line: " + line);
    CaptionedImage item;
    item.id = std::stoi(line.substr(0, t1));
    item.caption = line.substr(t1 + 1, t2 - t1 - 1);
    item.scene = scene_from_text(line.substr(t2 + 1));
    char name[32];
    std::snprintf(name, sizeof name, "%05d.ppm", item.id);
    item.pixels = read_ppm(dir / "images" / name);
    corpus.push_back(std::move(item));
  }
  if (corpus.empty()) throw IoError("empty corpus in " + dir.string());
  return corpus;
}

}  // namespace detailclip
