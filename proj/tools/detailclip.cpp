// Command-line front end: data generation, training, gradient checks,
// retrieval evaluation and mask visualisation.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "detailclip/detailclip.hpp"

namespace fs = std::filesystem;
using namespace detailclip;

namespace {

struct ConfigArgs {
  std::string path;
  std::string preset;
  std::vector<std::string> overrides;

  void attach(CLI::App* app) {
    app->add_option("--config", path, "key=value config file");
    app->add_option("--preset", preset, "start from a named preset (mini, vitb16-paper)");
    app->add_option("--set", overrides, "override a config key, e.g. --set optim.lr=5e-4")->take_all();
  }

  TrainConfig resolve() const {
    TrainConfig cfg = preset.empty() ? mini_config() : preset_config(preset);
    if (!path.empty()) cfg = load_config_file(path);
    for (const auto& o : overrides) apply_override(cfg, o);
    return validate_config(cfg);
  }
};

std::vector<Image> load_images(const fs::path& dir) {
  if (fs::exists(dir / "metadata.tsv")) {
    std::vector<Image> out;
    for (auto& item : import_corpus(dir)) out.push_back(std::move(item.pixels));
    return out;
  }
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() == ".ppm") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no .ppm images in " + dir.string());
  std::vector<Image> out;
  for (const auto& f : files) out.push_back(read_ppm(f));
  return out;
}

int run_generate(int n, std::uint64_t seed, bool heldout, int image_size, const fs::path& out) {
  const auto corpus = heldout ? generate_heldout(n, seed, image_size) : generate_corpus(n, seed, image_size);
  export_corpus(corpus, out);
  std::cout << "wrote " << corpus.size() << " pairs to " << out.string() << '\n';
  return 0;
}

int run_train(const TrainConfig& cfg, const fs::path& data, const fs::path& out, const std::string& resume,
              long until) {
  TrainState state = resume.empty() ? TrainState(cfg) : load_train_state(resume, cfg);
  const auto corpus = import_corpus(data);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
  {
    std::ofstream cfg_out(out / "config.ini");
    cfg_out << to_config_text(cfg);
  }
  std::ofstream log(out / "loss_log.txt", resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw IoError("cannot write loss log in " + out.string());
  TrainOptions opts;
  opts.out_dir = out;
  opts.log = &log;
  if (until > 0) opts.until = until;
  opts.on_step = [](const StepRecord& r) {
    if (r.step % 10 == 0) {
      std::printf("step %4ld  l_tot %.4f  l_clip %.4f  l_cls %.4f  l_patch %.4f  l_rec %.4f\n", r.step,
                  r.losses.l_tot, r.losses.l_clip, r.losses.l_cls, r.losses.l_patch, r.losses.l_rec);
      std::fflush(stdout);
    }
  };
  train(state, corpus, opts);
  std::cout << "final checkpoint " << (out / "ckpt_final").string() << '\n';
  return 0;
}

int run_grad_check(const TrainConfig& cfg, double eps, int n, double tolerance) {
  const auto report = grad_check(cfg, n, eps);
  for (const auto& e : report.entries) {
    std::printf("%-8s %-48s [%ld] analytic % .6e numeric % .6e rel %.3e\n", e.teacher ? "teacher" : "student",
                e.name.c_str(), static_cast<long>(e.index), e.analytic, e.numeric, e.rel_error);
  }
  std::printf("max relative error %.3e over %d parameters; max |teacher grad| %.1e\n", report.max_rel_error, n,
              report.max_teacher_abs_grad);
  if (report.max_rel_error >= tolerance || report.max_teacher_abs_grad != 0.0) {
    std::fprintf(stderr, "error: GradCheckFailed: tolerance %.1e exceeded\n", tolerance);
    return 3;
  }
  return 0;
}

int run_eval(const fs::path& ckpt, const fs::path& data) {
  TrainState state = load_train_state(ckpt);
  const auto pairs = import_corpus(data);
  const auto r = eval_retrieval(state, pairs);
  std::printf("pairs %zu  i2t_top1 %.4f  t2i_top1 %.4f\n", pairs.size(), r.i2t_top1, r.t2i_top1);
  return 0;
}

int run_visualize(const fs::path& ckpt, const fs::path& images, const fs::path& out) {
  TrainState state = load_train_state(ckpt);
  const auto vis = visualize_masks(state, load_images(images), out);
  std::cout << "wrote " << vis.files.size() << " files to " << out.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale detail-oriented CLIP trainer"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("generate-data", "render a synthetic captioned-shapes corpus");
  int gen_n = 512;
  std::uint64_t gen_seed = 0;
  bool gen_heldout = false;
  int gen_size = 64;
  std::string gen_out;
  gen->add_option("--n", gen_n, "number of pairs")->required();
  gen->add_option("--seed", gen_seed, "generator seed")->required();
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_flag("--heldout", gen_heldout, "distinct captions, for retrieval evaluation");
  gen->add_option("--image-size", gen_size, "side length in pixels");

  auto* tr = app.add_subcommand("train", "train from a corpus directory");
  ConfigArgs tr_cfg;
  tr_cfg.attach(tr);
  std::string tr_data, tr_out, tr_resume;
  long tr_until = 0;
  tr->add_option("--data", tr_data, "corpus directory")->required();
  tr->add_option("--out", tr_out, "run directory")->required();
  tr->add_option("--resume", tr_resume, "checkpoint directory to continue from");
  tr->add_option("--until", tr_until, "stop before this step (default: total_steps)");

  auto* gc = app.add_subcommand("grad-check", "finite-difference gradient check in double precision");
  ConfigArgs gc_cfg;
  gc_cfg.attach(gc);
  double gc_eps = 1e-5;
  int gc_n = 50;
  double gc_tol = 1e-3;
  gc->add_option("--eps", gc_eps, "central difference step");
  gc->add_option("--n", gc_n, "number of sampled student parameters");
  gc->add_option("--tolerance", gc_tol, "fail above this relative error");

  auto* vm = app.add_subcommand("visualize-masks", "write original / attention / masked images");
  std::string vm_ckpt, vm_images, vm_out;
  vm->add_option("--ckpt", vm_ckpt, "checkpoint directory")->required();
  vm->add_option("--images", vm_images, "corpus directory or folder of .ppm files")->required();
  vm->add_option("--out", vm_out, "output directory")->required();

  auto* ev = app.add_subcommand("eval-retrieval", "top-1 image/text retrieval on a corpus");
  std::string ev_ckpt, ev_data;
  ev->add_option("--ckpt", ev_ckpt, "checkpoint directory")->required();
  ev->add_option("--data", ev_data, "held-out corpus directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return run_generate(gen_n, gen_seed, gen_heldout, gen_size, gen_out);
    if (tr->parsed()) return run_train(tr_cfg.resolve(), tr_data, tr_out, tr_resume, tr_until);
    if (gc->parsed()) return run_grad_check(gc_cfg.resolve(), gc_eps, gc_n, gc_tol);
    if (vm->parsed()) return run_visualize(vm_ckpt, vm_images, vm_out);
    if (ev->parsed()) return run_eval(ev_ckpt, ev_data);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s: %s\n", e.kind().c_str(), e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: InternalError: %s\n", e.what());
    return 2;
  }
  return 1;
}
