#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "detailclip/checkpoint.hpp"
#include "detailclip/config.hpp"
#include "detailclip/data.hpp"
#include "detailclip/ema.hpp"
#include "detailclip/heads.hpp"
#include "detailclip/masking.hpp"
#include "detailclip/objectives.hpp"
#include "detailclip/optim.hpp"
#include "detailclip/text.hpp"
#include "detailclip/vit.hpp"

namespace detailclip {

inline constexpr const char* kStudent = "student.";
inline constexpr const char* kTeacher = "teacher.";

/// The networks of one run. Only g and h have teacher copies.
struct Model {
  TrainConfig cfg;
  VisionEncoder student_visual;
  VisionEncoder teacher_visual;
  DistillHead student_head;
  DistillHead teacher_head;
  TextEncoder text;
  ClipProjection clip;
  Decoder decoder;

  explicit Model(const TrainConfig& c)
      : cfg(c),
        student_visual(c, "student.visual"),
        teacher_visual(c, "teacher.visual"),
        student_head(c, "student.head"),
        teacher_head(c, "teacher.head"),
        text(c, "student.text"),
        clip(c, "student.clip"),
        decoder(c, "student.decoder") {}

  /// Student parameters from the seed; the teacher starts as an exact copy.
  template <class T>
  ParamStore<T> init_params() const {
    ParamStore<T> p;
    Rng rng(derive_seed(cfg.seed, 0x696e6974));
    student_visual.init(p, rng);
    student_head.init(p, rng);
    text.init(p, rng);
    clip.init(p, rng);
    decoder.init(p, rng);
    for (const auto& name : std::vector<std::string>(p.names())) {
      if (name.rfind("student.visual.", 0) == 0 || name.rfind("student.head.", 0) == 0) {
        p.add(kTeacher + name.substr(std::char_traits<char>::length(kStudent)), p.value(name));
      }
    }
    return p;
  }
};

/// Student parameter groups used to stratify gradient checks.
inline std::string param_group(const std::string& name) {
  for (const char* g : {"student.visual", "student.text", "student.head", "student.decoder"}) {
    if (name.rfind(g, 0) == 0) return g;
  }
  if (name.find("logit_scale") != std::string::npos) return "tau";
  if (name.rfind("student.clip", 0) == 0) return "student.clip";
  return "other";
}

struct TrainState {
  TrainConfig cfg;
  ParamStore<float> params;
  ParamStore<float> adam_m;
  ParamStore<float> adam_v;
  CenterState<float> center;
  long step = 0;

  explicit TrainState(const TrainConfig& c)
      : cfg(validate_config(c)), center(cfg.head_out_dim, static_cast<float>(cfg.center_momentum)) {
    if (cfg.load_only()) throw LoadOnlyPreset("preset '" + cfg.preset + "' is load-only");
    params = Model(cfg).init_params<float>();
    for (const auto& n : params.names()) {
      if (n.rfind(kStudent, 0) != 0) continue;
      adam_m.add(n, Mat<float>::Zero(params.value(n).rows(), params.value(n).cols()));
      adam_v.add(n, Mat<float>::Zero(params.value(n).rows(), params.value(n).cols()));
    }
  }

  /// Flat view for checkpointing: parameters, optimizer moments, center.
  ParamStore<float> arrays() const {
    ParamStore<float> out;
    for (const auto& n : params.names()) out.add(n, params.value(n));
    for (const auto& n : adam_m.names()) out.add("adam.m." + n, adam_m.value(n));
    for (const auto& n : adam_v.names()) out.add("adam.v." + n, adam_v.value(n));
    out.add("center", center.center);
    return out;
  }

  /// Array names and shapes a checkpoint of this state may hold.
  ParamStore<float> expected_arrays() const {
    ParamStore<float> out;
    for (const auto& n : params.names()) {
      out.add(n, params.value(n));
      if (n.rfind(kStudent, 0) == 0) {
        out.add("adam.m." + n, params.value(n));
        out.add("adam.v." + n, params.value(n));
      }
    }
    out.add("center", center.center);
    return out;
  }
};

inline void save_train_state(const TrainState& s, const std::filesystem::path& dir) {
  save_checkpoint(dir, s.cfg, s.step, s.arrays(), {{"step", s.step}, {"ema_step", s.step}, {"adam_step", s.step}});
}

/// Restores a TrainState. Without `expected_cfg` the checkpoint's own config
/// is used.
inline TrainState load_train_state(const std::filesystem::path& dir, std::optional<TrainConfig> expected_cfg = {},
                                   bool allow_config_mismatch = false) {
  TrainConfig cfg;
  if (expected_cfg) {
    cfg = validate_config(*expected_cfg);
  } else {
    cfg = load_config_file((dir / "config.ini").string());
  }
  TrainState state(cfg);
  const ParamStore<float> expected = state.expected_arrays();
  LoadOptions opts;
  opts.expected = &expected;
  opts.expected_config = cfg;
  opts.allow_config_mismatch = allow_config_mismatch;
  CheckpointData data = load_checkpoint(dir, opts);
  for (const auto& n : state.params.names()) state.params.value(n) = data.arrays.value(n);
  for (const auto& n : state.adam_m.names()) {
    state.adam_m.value(n) = data.arrays.value("adam.m." + n);
    state.adam_v.value(n) = data.arrays.value("adam.v." + n);
  }
  state.center.center = data.arrays.value("center");
  state.step = data.manifest.step;
  return state;
}

// ---------------------------------------------------------------------------
// batches

struct Batch {
  std::vector<ViewPair> views;
  std::vector<TokenizedCaption> tokens;
  std::vector<std::string> captions;

  int size() const { return static_cast<int>(views.size()); }
};

inline Batch make_batch(const TrainConfig& cfg, const std::vector<CaptionedImage>& items, std::uint64_t view_seed) {
  Batch b;
  for (const auto& item : items) {
    b.views.push_back(make_views(item, view_seed, cfg.image_size));
    b.tokens.push_back(tokenize(item.caption, cfg.context_length, cfg.vocab_size));
    b.captions.push_back(item.caption);
  }
  return b;
}

/// Batch for a training step: the corpus is reshuffled every epoch, a
/// trailing partial batch is dropped, and views are seeded by step.
inline Batch batch_for_step(const TrainConfig& cfg, const std::vector<CaptionedImage>& corpus, long step) {
  const int n = static_cast<int>(corpus.size());
  const int bs = std::min(cfg.batch_size, n);
  const long per_epoch = n / bs;
  const long epoch = step / per_epoch;
  const long offset = (step % per_epoch) * bs;
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(cfg.seed, 0x65706f63, static_cast<std::uint64_t>(epoch)));
  rng.shuffle(order.begin(), order.end());
  std::vector<CaptionedImage> items;
  for (int i = 0; i < bs; ++i) items.push_back(corpus[static_cast<std::size_t>(order[static_cast<std::size_t>(offset + i)])]);
  return make_batch(cfg, items, derive_seed(cfg.seed, 0x73746570, static_cast<std::uint64_t>(step)));
}

// ---------------------------------------------------------------------------
// forward step

template <class T>
struct ForwardResult {
  LossBreakdown losses;
  std::unique_ptr<Graph<T>> graph;
  Var total;
  /// Masks fed to the student, views u then v (batch x P each).
  MaskSet mask_u;
  MaskSet mask_v;
  AttentionSummary<T> av_u;
  AttentionSummary<T> av_v;
  /// Mean teacher logits of this batch, for the center update.
  RowVec<T> teacher_mean;
  T inv_tau = T(0);
};

struct ForwardOptions {
  /// Overrides cfg.mask_mode.
  std::optional<MaskMode> mask_mode;
  /// Replaces the computed masks (views u and v).
  const MaskSet* forced_mask_u = nullptr;
  const MaskSet* forced_mask_v = nullptr;
  bool with_grad = true;
  std::uint64_t step = 0;
};

namespace detail {

inline MaskSet stack_masks(const MaskSet& a, const MaskSet& b) {
  MaskSet out(a.batch + b.batch, a.patches);
  std::copy(a.masked.begin(), a.masked.end(), out.masked.begin());
  std::copy(b.masked.begin(), b.masked.end(), out.masked.begin() + static_cast<std::ptrdiff_t>(a.masked.size()));
  return out;
}

}  // namespace detail

/// One pass of the training objective with no parameter or center mutation:
/// teacher encodes both views without gradients and records CLS attention;
/// masks come from that attention; the student encodes the masked views;
/// CLIP, distillation and reconstruction losses are combined.
template <class T>
ForwardResult<T> forward_step(const TrainConfig& cfg, ParamStore<T>& params, const RowVec<T>& center,
                              const Batch& batch, const ForwardOptions& opts = {}) {
  const Model model(cfg);
  const int B = batch.size();
  if (B < 1) throw DegenerateBatch("empty batch");
  const int P = cfg.num_patches;
  const int S = P + 1;
  const MaskMode mode = opts.mask_mode.value_or(cfg.mask_mode);
  const KlDirection dir = cfg.kl_direction;

  std::vector<const Image*> views;
  for (const auto& v : batch.views) views.push_back(&v.view_u);
  for (const auto& v : batch.views) views.push_back(&v.view_v);
  const Mat<T> patches = patchify_batch<T>(views, cfg.image_size, cfg.patch_size);

  ForwardResult<T> r;

  // teacher branch
  Graph<T> tg(false);
  AttentionRecord<T> rec;
  const Var t_tokens = model.teacher_visual.forward(tg, params, patches, 2 * B, nullptr, &rec);
  const Mat<T> t_logits = tg.value(model.teacher_head.forward(tg, params, t_tokens));
  r.teacher_mean = t_logits.colwise().mean();

  AttentionRecord<T> rec_u{rec.layers, rec.heads, {}};
  AttentionRecord<T> rec_v{rec.layers, rec.heads, {}};
  for (const auto& rows : rec.rows) {
    rec_u.rows.push_back(rows.topRows(B));
    rec_v.rows.push_back(rows.bottomRows(B));
  }
  r.av_u = attention_values(rec_u);
  r.av_v = attention_values(rec_v);

  MaskSet loss_mask_u;
  MaskSet loss_mask_v;
  switch (mode) {
    case MaskMode::kAttention:
      r.mask_u = select_mask(r.av_u, cfg.mask_ratio);
      r.mask_v = select_mask(r.av_v, cfg.mask_ratio);
      break;
    case MaskMode::kRandom: {
      Rng rng(derive_seed(cfg.seed, 0x726d736b, opts.step));
      r.mask_u = random_mask(B, P, cfg.mask_ratio, rng);
      r.mask_v = random_mask(B, P, cfg.mask_ratio, rng);
      break;
    }
    case MaskMode::kNone:
      r.mask_u = MaskSet(B, P);
      r.mask_v = MaskSet(B, P);
      break;
  }
  if (opts.forced_mask_u != nullptr) r.mask_u = *opts.forced_mask_u;
  if (opts.forced_mask_v != nullptr) r.mask_v = *opts.forced_mask_v;
  if (mode == MaskMode::kNone && opts.forced_mask_u == nullptr && opts.forced_mask_v == nullptr) {
    // nothing is hidden from the student; the patch terms score every patch
    loss_mask_u = MaskSet(B, P);
    loss_mask_v = MaskSet(B, P);
    std::fill(loss_mask_u.masked.begin(), loss_mask_u.masked.end(), 1);
    std::fill(loss_mask_v.masked.begin(), loss_mask_v.masked.end(), 1);
  } else {
    loss_mask_u = r.mask_u;
    loss_mask_v = r.mask_v;
  }
  const MaskSet student_mask = detail::stack_masks(r.mask_u, r.mask_v);
  const MaskSet loss_mask = detail::stack_masks(loss_mask_u, loss_mask_v);

  // teacher targets, aligned with the student rows they supervise
  const Mat<T> t_logp = teacher_log_probs<T>(t_logits, static_cast<T>(cfg.teacher_temp), center);
  const std::vector<int> cls_rows = model.student_visual.cls_rows(2 * B);
  const std::vector<int> patch_rows = model.student_visual.patch_rows(2 * B);
  Mat<T> cls_targets(2 * B, cfg.head_out_dim);
  for (int b = 0; b < B; ++b) {
    cls_targets.row(b) = t_logp.row((B + b) * S);      // student u <- teacher v
    cls_targets.row(B + b) = t_logp.row(b * S);        // student v <- teacher u
  }
  Mat<T> patch_targets(static_cast<Eigen::Index>(2) * B * P, cfg.head_out_dim);
  for (std::size_t i = 0; i < patch_rows.size(); ++i) patch_targets.row(static_cast<Eigen::Index>(i)) = t_logp.row(patch_rows[i]);

  // student branch
  r.graph = std::make_unique<Graph<T>>(opts.with_grad);
  Graph<T>& g = *r.graph;
  const Var s_tokens = model.student_visual.forward(g, params, patches, 2 * B, &student_mask);

  const Var img_emb = model.clip.image_embed(g, params, s_tokens, cls_rows);
  std::vector<int> first(static_cast<std::size_t>(B));
  std::vector<int> second(static_cast<std::size_t>(B));
  std::iota(first.begin(), first.end(), 0);
  std::iota(second.begin(), second.end(), B);
  const Var img_u = l2_normalize_rows(g, gather_rows(g, img_emb, first));
  const Var img_v = l2_normalize_rows(g, gather_rows(g, img_emb, second));
  const Var txt = l2_normalize_rows(g, model.text.forward(g, params, batch.tokens));
  const Var inv_tau = model.clip.inverse_temperature(g, params);
  r.inv_tau = g.scalar(inv_tau);
  const Var i2t_u = clip_direction_loss(g, img_u, txt, inv_tau, false);
  const Var i2t_v = clip_direction_loss(g, img_v, txt, inv_tau, false);
  const Var t2i_u = clip_direction_loss(g, img_u, txt, inv_tau, true);
  const Var t2i_v = clip_direction_loss(g, img_v, txt, inv_tau, true);

  const Var s_logits = model.student_head.forward(g, params, s_tokens);
  const T ts = static_cast<T>(cfg.student_temp);
  const Var l_cls = kl_loss(g, gather_rows(g, s_logits, cls_rows), std::move(cls_targets),
                            std::vector<T>(static_cast<std::size_t>(2 * B), T(1) / T(2 * B)), ts, dir);
  std::vector<T> patch_weights;
  for (const double w : masked_row_weights(loss_mask)) patch_weights.push_back(static_cast<T>(w));
  const Var l_patch = kl_loss(g, gather_rows(g, s_logits, patch_rows), std::move(patch_targets), patch_weights, ts, dir);

  const Var recon = model.decoder.forward(g, params, s_tokens, 2 * B, &student_mask);
  const Var l_rec = weighted_squared_error(g, recon, patches, patch_weights);

  r.total = weighted_sum<T>(g, {l_cls, l_patch, l_rec, i2t_u, i2t_v, t2i_u, t2i_v},
                            {static_cast<T>(cfg.alpha1), static_cast<T>(cfg.alpha2), static_cast<T>(cfg.alpha3),
                             T(0.25), T(0.25), T(0.25), T(0.25)});

  auto& L = r.losses;
  L.l_i2t = (static_cast<double>(g.scalar(i2t_u)) + static_cast<double>(g.scalar(i2t_v))) / 2.0;
  L.l_t2i = (static_cast<double>(g.scalar(t2i_u)) + static_cast<double>(g.scalar(t2i_v))) / 2.0;
  L.l_clip = (L.l_i2t + L.l_t2i) / 2.0;
  L.l_cls = static_cast<double>(g.scalar(l_cls));
  L.l_patch = static_cast<double>(g.scalar(l_patch));
  L.l_rec = static_cast<double>(g.scalar(l_rec));
  L.l_tot = static_cast<double>(g.scalar(r.total));
  return r;
}

inline void check_finite(const LossBreakdown& L, long step) {
  const std::pair<const char*, double> terms[] = {{"l_i2t", L.l_i2t}, {"l_t2i", L.l_t2i}, {"l_clip", L.l_clip},
                                                  {"l_cls", L.l_cls}, {"l_patch", L.l_patch}, {"l_rec", L.l_rec},
                                                  {"l_tot", L.l_tot}};
  for (const auto& [name, v] : terms) {
    if (!std::isfinite(v)) {
      throw NonFiniteLoss(std::string(name) + " is " + std::to_string(v) + " at step " + std::to_string(step));
    }
  }
}

// ---------------------------------------------------------------------------
// training

struct StepRecord {
  long step = 0;
  LossBreakdown losses;
  double lambda = 0.0;
  double tau = 0.0;
};

/// step l_i2t l_t2i l_clip l_cls l_patch l_rec l_tot lambda tau
inline std::string format_step_record(const StepRecord& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%ld %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g", r.step,
                r.losses.l_i2t, r.losses.l_t2i, r.losses.l_clip, r.losses.l_cls, r.losses.l_patch, r.losses.l_rec,
                r.losses.l_tot, r.lambda, r.tau);
  return buf;
}

inline bool deterministic_mode() {
  const char* v = std::getenv("DETAILCLIP_DETERMINISTIC");
  return v != nullptr && std::string(v) != "0" && std::string(v) != "";
}

/// One optimisation step: forward, backward, AdamW on the student, logit
/// scale clamp, teacher EMA, center update.
inline StepRecord train_step(TrainState& s, const Batch& batch) {
  const TrainConfig& cfg = s.cfg;
  s.params.zero_grad();
  ForwardOptions opts;
  opts.step = static_cast<std::uint64_t>(s.step);
  auto fwd = forward_step<float>(cfg, s.params, s.center.center, batch, opts);
  check_finite(fwd.losses, s.step);
  fwd.graph->backward(fwd.total);
  fwd.graph.reset();

  const AdamW<float> opt(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay);
  opt.step(s.params, kStudent, lr_at(cfg, s.step), s.adam_m, s.adam_v, s.step + 1);
  auto& scale = s.params.value("student.clip.logit_scale");
  scale(0, 0) = std::min(scale(0, 0), static_cast<float>(std::log(cfg.logit_scale_max)));

  const long ema_step = std::min<long>(s.step, cfg.total_steps);
  const double lambda = lambda_at(ema_step, cfg.total_steps, cfg.lambda_start);
  ema_update(s.params, "teacher.", "student.", lambda);
  s.center.update(fwd.teacher_mean);

  StepRecord rec{s.step, fwd.losses, lambda, 1.0 / static_cast<double>(fwd.inv_tau)};
  ++s.step;
  return rec;
}

struct TrainOptions {
  /// Stop after this step count (exclusive); defaults to cfg.total_steps.
  std::optional<long> until;
  /// When set, checkpoints are written under this directory.
  std::optional<std::filesystem::path> out_dir;
  std::ostream* log = nullptr;
  std::function<void(const StepRecord&)> on_step;
};

/// Runs steps [state.step, until). Batches are a pure function of
/// (seed, step); outside deterministic mode the next batch is prepared on a
/// worker thread.
inline std::vector<StepRecord> train(TrainState& s, const std::vector<CaptionedImage>& corpus,
                                     const TrainOptions& opts = {}) {
  const long until = opts.until.value_or(s.cfg.total_steps);
  const bool prefetch = !deterministic_mode();
  std::vector<StepRecord> records;
  std::future<Batch> next;
  if (prefetch && s.step < until) next = std::async(std::launch::async, batch_for_step, s.cfg, std::cref(corpus), s.step);
  while (s.step < until) {
    Batch batch = prefetch ? next.get() : batch_for_step(s.cfg, corpus, s.step);
    if (prefetch && s.step + 1 < until) {
      next = std::async(std::launch::async, batch_for_step, s.cfg, std::cref(corpus), s.step + 1);
    }
    const StepRecord rec = train_step(s, batch);
    records.push_back(rec);
    if (opts.log != nullptr) *opts.log << format_step_record(rec) << '\n' << std::flush;
    if (opts.on_step) opts.on_step(rec);
    if (opts.out_dir && s.cfg.checkpoint_every > 0 && s.step % s.cfg.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "ckpt_step_%06ld", s.step);
      save_train_state(s, *opts.out_dir / name);
    }
  }
  if (opts.out_dir) save_train_state(s, *opts.out_dir / "ckpt_final");
  return records;
}

// ---------------------------------------------------------------------------
// evaluation

struct RetrievalResult {
  double i2t_top1 = 0.0;
  double t2i_top1 = 0.0;
};

/// CLIP-space embeddings of full-frame views and of captions, one row each.
inline std::pair<Mat<float>, Mat<float>> embed_pairs(TrainState& s, const std::vector<CaptionedImage>& pairs) {
  const Model model(s.cfg);
  Mat<float> img(static_cast<Eigen::Index>(pairs.size()), s.cfg.clip_embed_dim);
  Mat<float> txt(static_cast<Eigen::Index>(pairs.size()), s.cfg.clip_embed_dim);
  constexpr std::size_t kChunk = 32;
  for (std::size_t start = 0; start < pairs.size(); start += kChunk) {
    const std::size_t end = std::min(pairs.size(), start + kChunk);
    const int n = static_cast<int>(end - start);
    std::vector<Image> views;
    std::vector<TokenizedCaption> tokens;
    for (std::size_t i = start; i < end; ++i) {
      views.push_back(eval_view(pairs[i].pixels, s.cfg.image_size));
      tokens.push_back(tokenize(pairs[i].caption, s.cfg.context_length, s.cfg.vocab_size));
    }
    std::vector<const Image*> ptrs;
    for (const auto& v : views) ptrs.push_back(&v);
    Graph<float> g(false);
    const Var tok = model.student_visual.forward(g, s.params, patchify_batch<float>(ptrs, s.cfg.image_size, s.cfg.patch_size), n);
    img.middleRows(static_cast<Eigen::Index>(start), n) =
        g.value(model.clip.image_embed(g, s.params, tok, model.student_visual.cls_rows(n)));
    txt.middleRows(static_cast<Eigen::Index>(start), n) = g.value(model.text.forward(g, s.params, tokens));
  }
  return {img, txt};
}

/// Top-1 retrieval accuracy by cosine similarity in both directions. Ties go
/// to the lower index.
inline RetrievalResult eval_retrieval(TrainState& s, const std::vector<CaptionedImage>& pairs) {
  if (pairs.empty()) throw DegenerateBatch("no evaluation pairs");
  auto [img, txt] = embed_pairs(s, pairs);
  img.rowwise().normalize();
  txt.rowwise().normalize();
  const Mat<float> sim = img * txt.transpose();
  int i2t = 0;
  int t2i = 0;
  for (Eigen::Index i = 0; i < sim.rows(); ++i) {
    Eigen::Index best = 0;
    sim.row(i).maxCoeff(&best);
    i2t += best == i ? 1 : 0;
    sim.col(i).maxCoeff(&best);
    t2i += best == i ? 1 : 0;
  }
  const double n = static_cast<double>(pairs.size());
  return {i2t / n, t2i / n};
}

// ---------------------------------------------------------------------------
// mask visualisation

struct MaskVisualization {
  std::vector<std::filesystem::path> files;
  MaskSet masks;
  Mat<float> av;
};

/// Teacher attention values and masks for full-frame views of `images`.
inline std::pair<AttentionSummary<float>, MaskSet> teacher_masks(TrainState& s, const std::vector<Image>& images) {
  const Model model(s.cfg);
  std::vector<Image> views;
  for (const auto& img : images) views.push_back(eval_view(img, s.cfg.image_size));
  std::vector<const Image*> ptrs;
  for (const auto& v : views) ptrs.push_back(&v);
  Graph<float> g(false);
  AttentionRecord<float> rec;
  model.teacher_visual.forward(g, s.params, patchify_batch<float>(ptrs, s.cfg.image_size, s.cfg.patch_size),
                               static_cast<int>(images.size()), nullptr, &rec);
  auto summary = attention_values(rec);
  MaskSet masks = select_mask(summary, s.cfg.mask_ratio);
  return {std::move(summary), std::move(masks)};
}

/// For each image writes NNNNN_original.ppm, NNNNN_attention.ppm (AV heat
/// overlay) and NNNNN_masked.ppm (lowest-AV patches grayed out).
inline MaskVisualization visualize_masks(TrainState& s, const std::vector<Image>& images,
                                         const std::filesystem::path& out_dir) {
  if (images.empty()) throw DegenerateBatch("no images to visualise");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  auto [summary, masks] = teacher_masks(s, images);
  const int ps = s.cfg.patch_size;
  const int grid = s.cfg.image_size / ps;
  MaskVisualization out;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Image view = eval_view(images[i], s.cfg.image_size);
    Image original(view.height, view.width);
    for (std::size_t k = 0; k < view.pixels.size(); ++k) original.pixels[k] = (view.pixels[k] + 1.0f) / 2.0f;
    const auto row = summary.av.row(static_cast<Eigen::Index>(i));
    const float lo = row.minCoeff();
    const float hi = row.maxCoeff();
    Image heat = original;
    Image masked = original;
    for (int y = 0; y < view.height; ++y) {
      for (int x = 0; x < view.width; ++x) {
        const int patch = (y / ps) * grid + (x / ps);
        const float t = hi > lo ? (row(patch) - lo) / (hi - lo) : 0.5f;
        const float tint[3] = {t, 0.2f, 1.0f - t};
        for (int c = 0; c < 3; ++c) {
          heat.at(y, x, c) = 0.5f * original.at(y, x, c) + 0.5f * tint[c];
          if (masks.at(static_cast<int>(i), patch)) masked.at(y, x, c) = 0.5f;
        }
      }
    }
    char stem[32];
    std::snprintf(stem, sizeof stem, "%05zu", i);
    for (const auto& [suffix, img] : {std::pair<const char*, const Image*>{"_original.ppm", &original},
                                      {"_attention.ppm", &heat},
                                      {"_masked.ppm", &masked}}) {
      const auto path = out_dir / (std::string(stem) + suffix);
      write_ppm(path, *img);
      out.files.push_back(path);
    }
  }
  out.masks = std::move(masks);
  out.av = std::move(summary.av);
  return out;
}

// ---------------------------------------------------------------------------
// gradient check

struct GradCheckEntry {
  std::string name;
  std::string group;
  Eigen::Index index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
  bool teacher = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  double max_teacher_abs_grad = 0.0;
  double l_tot = 0.0;
};

/// |a - n| / max(|a|, |n|), or 0 when both are below `floor`.
inline double relative_error(double a, double n, double floor = 1e-8) {
  const double scale = std::max(std::abs(a), std::abs(n));
  if (scale < floor) return 0.0;
  return std::abs(a - n) / scale;
}

/// Central-difference check of d l_tot / d w in double precision, for
/// `n_params` student scalars drawn round-robin over the parameter groups,
/// plus the analytic gradient of a few teacher scalars (must be exactly 0).
inline GradCheckReport grad_check(const TrainConfig& cfg_in, int n_params, double eps, int batch_size = 4,
                                  int n_teacher = 4) {
  const TrainConfig cfg = validate_config(cfg_in);
  if (cfg.load_only()) throw LoadOnlyPreset("preset '" + cfg.preset + "' is load-only");
  ParamStore<double> params = Model(cfg).init_params<float>().cast<double>();
  const auto corpus = generate_corpus(std::max(batch_size, 2), cfg.seed, cfg.image_size);
  std::vector<CaptionedImage> items(corpus.begin(), corpus.begin() + std::max(batch_size, 2));
  const Batch batch = make_batch(cfg, items, derive_seed(cfg.seed, 0x67636b));
  const RowVec<double> center = RowVec<double>::Zero(cfg.head_out_dim);

  auto loss_value = [&]() {
    ForwardOptions o;
    o.with_grad = false;
    return forward_step<double>(cfg, params, center, batch, o).losses.l_tot;
  };

  GradCheckReport report;
  {
    auto fwd = forward_step<double>(cfg, params, center, batch);
    report.l_tot = fwd.losses.l_tot;
    fwd.graph->backward(fwd.total);
  }

  std::map<std::string, std::vector<std::string>> groups;
  std::vector<std::string> teacher_names;
  for (const auto& name : params.names()) {
    if (name.rfind(kStudent, 0) == 0) groups[param_group(name)].push_back(name);
    if (name.rfind(kTeacher, 0) == 0) teacher_names.push_back(name);
  }
  std::vector<std::string> group_order;
  for (const auto& [k, v] : groups) group_order.push_back(k);

  Rng rng(derive_seed(cfg.seed, 0x67726164));
  for (int i = 0; i < n_params; ++i) {
    const auto& names = groups[group_order[static_cast<std::size_t>(i) % group_order.size()]];
    const std::string& name = names[rng.below(names.size())];
    auto& w = params.value(name);
    const auto idx = static_cast<Eigen::Index>(rng.below(static_cast<std::size_t>(w.size())));
    const Mat<double>& grad = params.grad_or_empty(name);
    const double analytic = grad.size() == 0 ? 0.0 : grad.data()[idx];
    const double saved = w.data()[idx];
    w.data()[idx] = saved + eps;
    const double plus = loss_value();
    w.data()[idx] = saved - eps;
    const double minus = loss_value();
    w.data()[idx] = saved;
    const double numeric = (plus - minus) / (2.0 * eps);
    GradCheckEntry e{name, param_group(name), idx, analytic, numeric, relative_error(analytic, numeric), false};
    report.max_rel_error = std::max(report.max_rel_error, e.rel_error);
    report.entries.push_back(std::move(e));
  }
  for (int i = 0; i < n_teacher && !teacher_names.empty(); ++i) {
    const std::string& name = teacher_names[rng.below(teacher_names.size())];
    const auto idx = static_cast<Eigen::Index>(rng.below(static_cast<std::size_t>(params.value(name).size())));
    const Mat<double>& grad = params.grad_or_empty(name);
    const double analytic = grad.size() == 0 ? 0.0 : grad.data()[idx];
    report.max_teacher_abs_grad = std::max(report.max_teacher_abs_grad, std::abs(analytic));
    report.entries.push_back({name, "teacher", idx, analytic, 0.0, 0.0, true});
  }
  return report;
}

}  // namespace detailclip
