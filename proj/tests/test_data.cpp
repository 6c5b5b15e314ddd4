#include <filesystem>
#include <set>

#include <gtest/gtest.h>

#include "detailclip/detailclip.hpp"

using namespace detailclip;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("detailclip_data_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(Corpus, SameSeedSameCorpus) {
  const auto a = generate_corpus(1, 7);
  const auto b = generate_corpus(1, 7);
  ASSERT_EQ(a.size(), 1u);
  EXPECT_EQ(a[0].caption, b[0].caption);
  EXPECT_EQ(a[0].scene, b[0].scene);
  EXPECT_EQ(a[0].pixels, b[0].pixels);
}

TEST(Corpus, DifferentSeedsDiffer) {
  const auto a = generate_corpus(8, 1);
  const auto b = generate_corpus(8, 2);
  int same = 0;
  for (int i = 0; i < 8; ++i) same += a[static_cast<std::size_t>(i)].pixels == b[static_cast<std::size_t>(i)].pixels;
  EXPECT_LT(same, 8);
}

TEST(Corpus, TwentyFourCoverEveryPair) {
  for (std::uint64_t seed : {0ULL, 3ULL, 99ULL}) {
    const auto corpus = generate_corpus(24, seed);
    std::set<std::pair<Shape, Color>> singles;
    for (const auto& item : corpus) {
      if (item.scene.size() == 1) singles.insert({item.scene[0].shape, item.scene[0].color});
    }
    EXPECT_EQ(singles.size(), 12u) << "seed " << seed;
  }
}

TEST(Corpus, EmptyRequestRejected) {
  EXPECT_THROW(generate_corpus(0, 0), RangeError);
  EXPECT_THROW(generate_corpus(-3, 0), RangeError);
}

TEST(Corpus, CaptionsDescribeScenes) {
  for (const auto& item : generate_corpus(40, 5)) {
    EXPECT_EQ(item.caption, caption_for(item.scene));
    EXPECT_EQ(item.pixels.height, 64);
    EXPECT_NO_THROW(tokenize(item.caption));
    EXPECT_EQ(scene_from_text(scene_to_text(item.scene)), item.scene);
  }
}

TEST(Corpus, RenderingUsesPaletteColours) {
  const Image img = render_scene({{Shape::kSquare, Color::kRed, 0.5, 0.5, 0.5}}, 64);
  EXPECT_FLOAT_EQ(img.at(32, 32, 0), detail::kPalette[0][0] / 255.0f);
  EXPECT_FLOAT_EQ(img.at(0, 0, 0), detail::kBackground / 255.0f);
}

TEST(Corpus, HeldOutCaptionsAreDistinct) {
  const auto held = generate_heldout(32, 1000);
  std::set<std::string> captions;
  for (const auto& item : held) captions.insert(item.caption);
  EXPECT_EQ(captions.size(), 32u);
  EXPECT_THROW(generate_heldout(157, 0), RangeError);
}

TEST(Tokenizer, TemplateMapping) {
  const auto t = tokenize("a red circle");
  const auto& vocab = vocabulary();
  ASSERT_EQ(t.ids.size(), 16u);
  EXPECT_EQ(t.ids[0], kBos);
  EXPECT_EQ(vocab[static_cast<std::size_t>(t.ids[1])], "a");
  EXPECT_EQ(vocab[static_cast<std::size_t>(t.ids[2])], "red");
  EXPECT_EQ(vocab[static_cast<std::size_t>(t.ids[3])], "circle");
  EXPECT_EQ(t.ids[4], kEos);
  EXPECT_EQ(t.eot_index, 4);
  for (std::size_t i = 5; i < t.ids.size(); ++i) EXPECT_EQ(t.ids[i], kPad);
}

TEST(Tokenizer, RoundTripsCorpusCaptions) {
  for (const auto& item : generate_corpus(60, 11)) EXPECT_EQ(detokenize(tokenize(item.caption)), item.caption);
}

TEST(Tokenizer, Errors) {
  EXPECT_THROW(tokenize("a purple blob"), UnknownWord);
  EXPECT_THROW(tokenize("a red circle and a blue square and a green triangle", 8), LengthError);
  EXPECT_THROW(tokenize("a red circle", 16, 10), VocabularyError);
}

TEST(Views, IdentityCropIsResizedSource) {
  const auto item = generate_corpus(1, 4)[0];
  const Image v = apply_crop(item.pixels, identity_crop(64), 64);
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      for (int c = 0; c < 3; ++c) EXPECT_NEAR(v.at(y, x, c), item.pixels.at(y, x, c) * 2.0f - 1.0f, 1e-6f);
    }
  }
}

TEST(Views, SameSeedSamePair) {
  const auto item = generate_corpus(3, 4)[2];
  const auto a = make_views(item, 77, 64);
  const auto b = make_views(item, 77, 64);
  EXPECT_EQ(a.crop_u, b.crop_u);
  EXPECT_EQ(a.crop_v, b.crop_v);
  EXPECT_EQ(a.view_u, b.view_u);
  EXPECT_EQ(a.view_v, b.view_v);
}

TEST(Views, ScaleStaysInRange) {
  Rng rng(123);
  double lo = 1.0, hi = 0.0;
  int flips = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto c = sample_crop(rng, 64);
    lo = std::min(lo, c.scale);
    hi = std::max(hi, c.scale);
    flips += c.flip;
    EXPECT_LE(c.offset_x + c.side, 64.0 + 1e-9);
    EXPECT_LE(c.offset_y + c.side, 64.0 + 1e-9);
  }
  EXPECT_GE(lo, 0.5);
  EXPECT_LE(hi, 1.0);
  EXPECT_GT(flips, 400);
  EXPECT_LT(flips, 600);
}

TEST(Files, PpmRoundTripIsLosslessOnPalette) {
  const auto item = generate_corpus(1, 9)[0];
  const fs::path dir = scratch("ppm");
  fs::create_directories(dir);
  write_ppm(dir / "x.ppm", item.pixels);
  EXPECT_EQ(read_ppm(dir / "x.ppm"), item.pixels);
  EXPECT_THROW(read_ppm(dir / "missing.ppm"), IoError);
  fs::remove_all(dir);
}

TEST(Files, CorpusDirectoryRoundTrip) {
  const auto corpus = generate_corpus(6, 21);
  const fs::path dir = scratch("corpus");
  export_corpus(corpus, dir);
  const auto back = import_corpus(dir);
  ASSERT_EQ(back.size(), corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    EXPECT_EQ(back[i].id, corpus[i].id);
    EXPECT_EQ(back[i].caption, corpus[i].caption);
    EXPECT_EQ(back[i].scene, corpus[i].scene);
    EXPECT_EQ(back[i].pixels, corpus[i].pixels);
  }
  fs::remove_all(dir);
  EXPECT_THROW(import_corpus(dir), IoError);
}
