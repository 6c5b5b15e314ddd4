#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "detailclip/detailclip.hpp"

using namespace detailclip;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("detailclip_ckpt_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

void replace_in_file(const fs::path& p, const std::string& from, const std::string& to) {
  std::string text = slurp(p);
  const auto at = text.find(from);
  ASSERT_NE(at, std::string::npos) << from;
  text.replace(at, from.size(), to);
  std::ofstream(p) << text;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitwise) {
  TrainState s(mini_config());
  s.step = 17;
  Rng rng(3);
  for (int k = 0; k < s.center.center.size(); ++k) s.center.center(k) = static_cast<float>(rng.normal());
  s.adam_m.value("student.clip.logit_scale")(0, 0) = 0.125f;
  s.adam_v.value("student.clip.logit_scale")(0, 0) = 0.5f;
  const fs::path dir = scratch("roundtrip");
  save_train_state(s, dir);
  EXPECT_TRUE(fs::exists(dir / "manifest.json"));
  EXPECT_TRUE(fs::exists(dir / "config.ini"));

  const TrainState back = load_train_state(dir);
  EXPECT_EQ(back.step, 17);
  EXPECT_EQ(config_hash(back.cfg), config_hash(s.cfg));
  ASSERT_EQ(back.params.names(), s.params.names());
  for (const auto& n : s.params.names()) EXPECT_EQ(back.params.value(n), s.params.value(n)) << n;
  EXPECT_EQ(back.center.center, s.center.center);
  EXPECT_EQ(back.adam_m.value("student.clip.logit_scale")(0, 0), 0.125f);
  EXPECT_EQ(back.adam_v.value("student.clip.logit_scale")(0, 0), 0.5f);
  fs::remove_all(dir);
}

TEST(Checkpoint, ArrayFilesAreRawLittleEndianFloat32) {
  ParamStore<float> arrays;
  arrays.add("x", (Mat<float>(1, 2) << 1.0f, -2.5f).finished());
  const fs::path dir = scratch("raw");
  const auto manifest = save_checkpoint(dir, mini_config(), 0, arrays);
  ASSERT_EQ(manifest.arrays.size(), 1u);
  std::ifstream in(dir / manifest.arrays[0].file, std::ios::binary);
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  ASSERT_EQ(in.gcount(), 8);
  // 1.0f = 0x3f800000, -2.5f = 0xc0200000
  EXPECT_EQ(b[0], 0x00);
  EXPECT_EQ(b[3], 0x3f);
  EXPECT_EQ(b[2], 0x80);
  EXPECT_EQ(b[7], 0xc0);
  EXPECT_EQ(b[6], 0x20);
  EXPECT_EQ(fs::file_size(dir / manifest.arrays[0].file), 8u);
  fs::remove_all(dir);
}

TEST(Checkpoint, EditedWidthIsShapeMismatch) {
  const fs::path dir = scratch("width");
  save_train_state(TrainState(mini_config()), dir);
  TrainConfig other = mini_config();
  apply_override(other, "vision_width=96");
  EXPECT_THROW(load_train_state(dir, validate_config(other)), ShapeMismatch);
  fs::remove_all(dir);
}

TEST(Checkpoint, OldFormatVersionRejected) {
  const fs::path dir = scratch("version");
  save_train_state(TrainState(mini_config()), dir);
  replace_in_file(dir / "manifest.json", "\"format_version\": 1", "\"format_version\": 0");
  EXPECT_THROW(load_train_state(dir), VersionError);
  fs::remove_all(dir);
}

TEST(Checkpoint, ConfigHashGuardsResume) {
  const fs::path dir = scratch("hash");
  save_train_state(TrainState(mini_config()), dir);
  TrainConfig other = mini_config();
  apply_override(other, "lr=0.002");
  other = validate_config(other);
  EXPECT_THROW(load_train_state(dir, other), ConfigMismatch);
  EXPECT_NO_THROW(load_train_state(dir, other, true));
  fs::remove_all(dir);
}

TEST(Checkpoint, TruncatedArrayDetected) {
  const fs::path dir = scratch("truncated");
  const auto manifest = save_checkpoint(dir, mini_config(), 0, TrainState(mini_config()).arrays());
  fs::resize_file(dir / manifest.arrays[0].file, 4);
  EXPECT_THROW(load_checkpoint(dir), ShapeMismatch);
  fs::remove_all(dir);
  EXPECT_THROW(load_checkpoint(dir), IoError);
}

TEST(Checkpoint, PaperPresetConfigSerialises) {
  const fs::path dir = scratch("paper");
  ParamStore<float> none;
  none.add("placeholder", Mat<float>::Zero(1, 1));
  save_checkpoint(dir, paper_preset(), 0, none);
  const auto data = load_checkpoint(dir);
  EXPECT_EQ(data.config.preset, "vitb16-paper");
  EXPECT_EQ(config_hash(data.config), config_hash(paper_preset()));
  EXPECT_THROW(load_train_state(dir), LoadOnlyPreset);
  fs::remove_all(dir);
}
