#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "detailclip/errors.hpp"

namespace detailclip {

enum class MaskMode { kAttention, kRandom, kNone };
enum class KlDirection { kStudentTeacher, kTeacherStudent };

/// Every architecture, schedule and loss-weight knob. Defaults are the
/// desk-scale ("mini") model.
struct TrainConfig {
  std::string preset = "mini";

  // vision encoder g
  int image_size = 64;
  int patch_size = 8;
  int vision_layers = 4;
  int vision_width = 128;
  int vision_heads = 4;
  int mlp_ratio = 4;

  // text encoder e
  int text_layers = 2;
  int text_width = 64;
  int text_heads = 2;
  int vocab_size = 40;
  int context_length = 16;
  int clip_embed_dim = 64;

  // distillation head h
  int head_hidden_dim = 256;
  int head_bottleneck_dim = 64;
  int head_out_dim = 256;

  // decoder d
  int decoder_layers = 2;
  int decoder_width = 64;
  int decoder_heads = 2;

  // masking
  double mask_ratio = 0.5;
  MaskMode mask_mode = MaskMode::kAttention;

  // objectives
  double alpha1 = 1.0;
  double alpha2 = 1.0;
  double alpha3 = 1.0;
  double teacher_temp = 0.04;
  double student_temp = 0.1;
  double center_momentum = 0.9;
  KlDirection kl_direction = KlDirection::kStudentTeacher;
  double logit_scale_init = 1.0 / 0.07;
  double logit_scale_max = 100.0;

  // schedule / optimizer
  double lambda_start = 0.996;
  double lr = 1e-3;
  int warmup_steps = 20;
  double weight_decay = 0.05;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-8;
  int batch_size = 32;
  int total_steps = 300;
  int checkpoint_every = 0;
  std::uint64_t seed = 0;

  // derived by validate_config
  int num_patches = 0;
  int patch_dim = 0;
  int vision_head_dim = 0;
  int text_head_dim = 0;
  int decoder_head_dim = 0;
  int masked_count = 0;

  bool load_only() const { return preset == "vitb16-paper"; }
};

/// ceil(ratio * count), robust to representation error in the product
/// (0.3 * 10 must give 3, not 4).
inline int masked_count_for(double ratio, int count) {
  const double product = ratio * static_cast<double>(count);
  const double rounded = std::round(product);
  if (std::abs(product - rounded) < 1e-9) return static_cast<int>(rounded);
  return static_cast<int>(std::ceil(product));
}

inline TrainConfig validate_config(TrainConfig cfg) {
  auto positive = [](long long v, const char* name) {
    if (v <= 0) throw RangeError(std::string(name) + " must be positive");
  };
  positive(cfg.image_size, "image_size");
  positive(cfg.patch_size, "patch_size");
  for (auto [v, n] : {std::pair{cfg.vision_layers, "vision_layers"}, {cfg.vision_width, "vision_width"},
                      {cfg.vision_heads, "vision_heads"}, {cfg.mlp_ratio, "mlp_ratio"},
                      {cfg.text_layers, "text_layers"}, {cfg.text_width, "text_width"},
                      {cfg.text_heads, "text_heads"}, {cfg.vocab_size, "vocab_size"},
                      {cfg.context_length, "context_length"}, {cfg.clip_embed_dim, "clip_embed_dim"},
                      {cfg.head_hidden_dim, "head_hidden_dim"},
                      {cfg.head_bottleneck_dim, "head_bottleneck_dim"}, {cfg.head_out_dim, "head_out_dim"},
                      {cfg.decoder_layers, "decoder_layers"}, {cfg.decoder_width, "decoder_width"},
                      {cfg.decoder_heads, "decoder_heads"}, {cfg.batch_size, "batch_size"},
                      {cfg.total_steps, "total_steps"}}) {
    positive(v, n);
  }
  if (cfg.image_size % cfg.patch_size != 0) {
    throw DivisibilityError("image_size " + std::to_string(cfg.image_size) +
                            " is not divisible by patch_size " + std::to_string(cfg.patch_size));
  }
  auto divisible = [](int width, int heads, const char* name) {
    if (width % heads != 0) {
      throw DivisibilityError(std::string(name) + " width " + std::to_string(width) +
                              " is not divisible by its head count " + std::to_string(heads));
    }
  };
  divisible(cfg.vision_width, cfg.vision_heads, "vision");
  divisible(cfg.text_width, cfg.text_heads, "text");
  divisible(cfg.decoder_width, cfg.decoder_heads, "decoder");

  if (!(cfg.mask_ratio > 0.0 && cfg.mask_ratio < 1.0)) throw RangeError("mask_ratio must lie in (0, 1)");
  if (!(cfg.lambda_start > 0.0 && cfg.lambda_start <= 1.0)) throw RangeError("lambda_start must lie in (0, 1]");
  if (!(cfg.teacher_temp > 0.0)) throw RangeError("teacher_temp must be positive");
  if (!(cfg.student_temp > 0.0)) throw RangeError("student_temp must be positive");
  if (!(cfg.center_momentum >= 0.0 && cfg.center_momentum < 1.0)) {
    throw RangeError("center_momentum must lie in [0, 1)");
  }
  if (!(cfg.alpha1 >= 0.0 && cfg.alpha2 >= 0.0 && cfg.alpha3 >= 0.0)) {
    throw RangeError("alpha weights must be nonnegative");
  }
  if (!(cfg.logit_scale_init > 0.0 && cfg.logit_scale_max >= cfg.logit_scale_init)) {
    throw RangeError("logit_scale_init must be positive and not exceed logit_scale_max");
  }
  if (!(cfg.lr > 0.0)) throw RangeError("lr must be positive");
  if (!(cfg.weight_decay >= 0.0)) throw RangeError("weight_decay must be nonnegative");
  if (!(cfg.adam_beta1 >= 0.0 && cfg.adam_beta1 < 1.0 && cfg.adam_beta2 >= 0.0 && cfg.adam_beta2 < 1.0)) {
    throw RangeError("adam betas must lie in [0, 1)");
  }
  if (cfg.warmup_steps < 0 || cfg.checkpoint_every < 0) {
    throw RangeError("warmup_steps and checkpoint_every must be nonnegative");
  }

  const int side = cfg.image_size / cfg.patch_size;
  cfg.num_patches = side * side;
  cfg.patch_dim = cfg.patch_size * cfg.patch_size * 3;
  cfg.vision_head_dim = cfg.vision_width / cfg.vision_heads;
  cfg.text_head_dim = cfg.text_width / cfg.text_heads;
  cfg.decoder_head_dim = cfg.decoder_width / cfg.decoder_heads;
  cfg.masked_count = masked_count_for(cfg.mask_ratio, cfg.num_patches);
  return cfg;
}

inline TrainConfig mini_config() { return validate_config(TrainConfig{}); }

/// ViT-B/16 scale settings. Validates, serializes and loads, but the trainer
/// refuses to instantiate it.
inline TrainConfig paper_preset() {
  TrainConfig cfg;
  cfg.preset = "vitb16-paper";
  cfg.image_size = 224;
  cfg.patch_size = 16;
  cfg.vision_layers = 12;
  cfg.vision_width = 768;
  cfg.vision_heads = 12;
  cfg.text_layers = 12;
  cfg.text_width = 512;
  cfg.text_heads = 8;
  cfg.vocab_size = 49408;
  cfg.context_length = 77;
  cfg.clip_embed_dim = 512;
  cfg.head_hidden_dim = 2048;
  cfg.head_bottleneck_dim = 256;
  cfg.head_out_dim = 8192;
  cfg.decoder_layers = 8;
  cfg.decoder_width = 512;
  cfg.decoder_heads = 16;
  cfg.lr = 5e-4;
  cfg.weight_decay = 0.5;
  cfg.batch_size = 4096;
  cfg.warmup_steps = 0;
  return validate_config(cfg);
}

inline TrainConfig preset_config(std::string_view name) {
  if (name == "mini") return mini_config();
  if (name == "vitb16-paper") return paper_preset();
  throw ParseError("unknown preset '" + std::string(name) + "'");
}

namespace detail {

using FieldRef = std::variant<int TrainConfig::*, double TrainConfig::*, std::uint64_t TrainConfig::*,
                              std::string TrainConfig::*, MaskMode TrainConfig::*, KlDirection TrainConfig::*>;

struct FieldSpec {
  const char* section;
  const char* key;
  FieldRef ref;
};

inline const std::vector<FieldSpec>& config_fields() {
  static const std::vector<FieldSpec> fields = {
      {"general", "preset", &TrainConfig::preset},
      {"vision", "image_size", &TrainConfig::image_size},
      {"vision", "patch_size", &TrainConfig::patch_size},
      {"vision", "vision_layers", &TrainConfig::vision_layers},
      {"vision", "vision_width", &TrainConfig::vision_width},
      {"vision", "vision_heads", &TrainConfig::vision_heads},
      {"vision", "mlp_ratio", &TrainConfig::mlp_ratio},
      {"text", "text_layers", &TrainConfig::text_layers},
      {"text", "text_width", &TrainConfig::text_width},
      {"text", "text_heads", &TrainConfig::text_heads},
      {"text", "vocab_size", &TrainConfig::vocab_size},
      {"text", "context_length", &TrainConfig::context_length},
      {"text", "clip_embed_dim", &TrainConfig::clip_embed_dim},
      {"head", "head_hidden_dim", &TrainConfig::head_hidden_dim},
      {"head", "head_bottleneck_dim", &TrainConfig::head_bottleneck_dim},
      {"head", "head_out_dim", &TrainConfig::head_out_dim},
      {"decoder", "decoder_layers", &TrainConfig::decoder_layers},
      {"decoder", "decoder_width", &TrainConfig::decoder_width},
      {"decoder", "decoder_heads", &TrainConfig::decoder_heads},
      {"masking", "mask_ratio", &TrainConfig::mask_ratio},
      {"masking", "mask_mode", &TrainConfig::mask_mode},
      {"loss", "alpha1", &TrainConfig::alpha1},
      {"loss", "alpha2", &TrainConfig::alpha2},
      {"loss", "alpha3", &TrainConfig::alpha3},
      {"loss", "teacher_temp", &TrainConfig::teacher_temp},
      {"loss", "student_temp", &TrainConfig::student_temp},
      {"loss", "center_momentum", &TrainConfig::center_momentum},
      {"loss", "kl_direction", &TrainConfig::kl_direction},
      {"loss", "logit_scale_init", &TrainConfig::logit_scale_init},
      {"loss", "logit_scale_max", &TrainConfig::logit_scale_max},
      {"schedule", "lambda_start", &TrainConfig::lambda_start},
      {"schedule", "lr", &TrainConfig::lr},
      {"schedule", "warmup_steps", &TrainConfig::warmup_steps},
      {"schedule", "weight_decay", &TrainConfig::weight_decay},
      {"schedule", "adam_beta1", &TrainConfig::adam_beta1},
      {"schedule", "adam_beta2", &TrainConfig::adam_beta2},
      {"schedule", "adam_eps", &TrainConfig::adam_eps},
      {"schedule", "batch_size", &TrainConfig::batch_size},
      {"schedule", "total_steps", &TrainConfig::total_steps},
      {"schedule", "checkpoint_every", &TrainConfig::checkpoint_every},
      {"schedule", "seed", &TrainConfig::seed},
  };
  return fields;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class N>
N parse_number(const std::string& key, const std::string& text) {
  std::istringstream in(text);
  N value{};
  in >> value;
  if (in.fail() || !in.eof()) throw ParseError("bad value '" + text + "' for " + key);
  return value;
}

inline void assign_field(TrainConfig& cfg, const FieldSpec& field, const std::string& text) {
  const std::string key = field.key;
  std::visit(
      [&](auto member) {
        using M = std::remove_reference_t<decltype(cfg.*member)>;
        if constexpr (std::is_same_v<M, std::string>) {
          cfg.*member = text;
        } else if constexpr (std::is_same_v<M, MaskMode>) {
          if (text == "attention") cfg.*member = MaskMode::kAttention;
          else if (text == "random") cfg.*member = MaskMode::kRandom;
          else if (text == "none") cfg.*member = MaskMode::kNone;
          else throw ParseError("mask_mode must be attention|random|none, got '" + text + "'");
        } else if constexpr (std::is_same_v<M, KlDirection>) {
          if (text == "student_teacher") cfg.*member = KlDirection::kStudentTeacher;
          else if (text == "teacher_student") cfg.*member = KlDirection::kTeacherStudent;
          else throw ParseError("kl_direction must be student_teacher|teacher_student");
        } else {
          cfg.*member = parse_number<M>(key, text);
        }
      },
      field.ref);
}

inline std::string field_text(const TrainConfig& cfg, const FieldSpec& field) {
  return std::visit(
      [&](auto member) -> std::string {
        using M = std::remove_cvref_t<decltype(cfg.*member)>;
        const auto& v = cfg.*member;
        if constexpr (std::is_same_v<M, std::string>) {
          return v;
        } else if constexpr (std::is_same_v<M, MaskMode>) {
          return v == MaskMode::kAttention ? "attention" : v == MaskMode::kRandom ? "random" : "none";
        } else if constexpr (std::is_same_v<M, KlDirection>) {
          return v == KlDirection::kStudentTeacher ? "student_teacher" : "teacher_student";
        } else if constexpr (std::is_same_v<M, double>) {
          return format_double(v);
        } else {
          return std::to_string(v);
        }
      },
      field.ref);
}

inline const FieldSpec& find_field(std::string_view key) {
  for (const auto& f : config_fields()) {
    if (key == f.key) return f;
  }
  throw ParseError("unknown config key '" + std::string(key) + "'");
}

}  // namespace detail

/// Apply one `key=value` override. Keys may be written bare or as
/// `section.key`.
inline void apply_override(TrainConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) throw ParseError("override must be key=value: " + std::string(assignment));
  std::string key = detail::trim(assignment.substr(0, eq));
  const std::string value = detail::trim(assignment.substr(eq + 1));
  if (const auto dot = key.find('.'); dot != std::string::npos) key = key.substr(dot + 1);
  detail::assign_field(cfg, detail::find_field(key), value);
}

/// Parses `[section]` / `key = value` text. Unlisted keys keep the defaults of
/// the preset named by `preset` (read first if present).
inline TrainConfig parse_config_text(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> assignments;
  std::string section;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find_first_of("#;"); hash != std::string::npos) line.resize(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw ParseError("line " + std::to_string(lineno) + ": malformed section header");
      section = detail::trim(std::string_view(t).substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ParseError("line " + std::to_string(lineno) + ": expected key = value");
    assignments.emplace_back(detail::trim(std::string_view(t).substr(0, eq)),
                             detail::trim(std::string_view(t).substr(eq + 1)));
  }
  TrainConfig cfg;
  for (const auto& [k, v] : assignments) {
    if (k == "preset") cfg = preset_config(v);
  }
  for (const auto& [k, v] : assignments) {
    if (k != "preset") detail::assign_field(cfg, detail::find_field(k), v);
  }
  return validate_config(cfg);
}

/// Canonical text form. Parsing it back yields the same config, and the
/// config hash is computed over it.
inline std::string to_config_text(const TrainConfig& cfg) {
  std::ostringstream out;
  std::string section;
  for (const auto& f : detail::config_fields()) {
    if (section != f.section) {
      if (!section.empty()) out << '\n';
      section = f.section;
      out << '[' << section << "]\n";
    }
    out << f.key << " = " << detail::field_text(cfg, f) << '\n';
  }
  return out.str();
}

inline TrainConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

/// FNV-1a over the canonical text, as 16 hex digits.
inline std::string config_hash(const TrainConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char c : to_config_text(cfg)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace detailclip
