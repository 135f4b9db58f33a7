#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "texlora/bench.hpp"
#include "texlora/grad_suite.hpp"
#include "texlora/io.hpp"
#include "texlora/serialize.hpp"
#include "texlora/train.hpp"

using namespace texlora;
namespace fs = std::filesystem;

namespace {

struct TrainFlags {
  std::string config;
  std::vector<std::string> overrides;
};

TrainConfig load_train_config(const TrainFlags& f) {
  TrainConfig cfg;
  if (!f.config.empty()) apply_train_config(cfg, read_key_values(f.config));
  std::ostringstream extra;
  for (const auto& o : f.overrides) extra << o << '\n';
  std::istringstream in(extra.str());
  apply_train_config(cfg, parse_key_values(in));
  cfg.validate();
  return cfg;
}

void write_scene(const SyntheticScene& scene, const fs::path& out) {
  fs::create_directories(out);
  write_png(out / "gt_texture.png", hwc_to_chw(scene.gt_texture));
  save_tensor(out / "gt_texture.tensor", scene.gt_texture);
  for (std::size_t k = 0; k < scene.views.size(); ++k) {
    const SceneView& view = scene.views[k];
    const std::string stem = "view" + std::to_string(k);
    write_png(out / (stem + ".png"), view.image);
    save_tensor(out / (stem + "_image.tensor"), view.image);
    save_tensor(out / (stem + "_part_seg.tensor"), view.part_seg);
    save_tensor(out / (stem + "_visibility.tensor"), view.visibility);
    // Part labels as gray levels for a quick look.
    const std::size_t h = view.camera.h, w = view.camera.w;
    std::vector<double> labels(h * w, 0.0);
    for (std::size_t p = 0; p < kPartCount; ++p)
      for (std::size_t i = 0; i < h * w; ++i)
        if (view.part_seg[p * h * w + i] > 0.0) labels[i] = static_cast<double>(p + 1) / kPartCount;
    write_png(out / (stem + "_seg.png"), Tensor({1, h, w}, labels));
  }
}

std::vector<bench::BenchSize> parse_sizes(const std::vector<std::string>& specs) {
  std::vector<bench::BenchSize> out;
  for (const std::string& s : specs) {
    bench::BenchSize b{};
    char tail = 0;
    if (std::sscanf(s.c_str(), "%zux%zux%zux%zu%c", &b.vu, &b.hw, &b.d, &b.c, &tail) != 4)
      throw std::invalid_argument("size '" + s + "' is not VUxHWxDxC");
    out.push_back(b);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Texture transformer with low-rank attention on synthetic scenes"};
  app.require_subcommand(1);

  TrainFlags train_flags;
  std::string train_out = "run";
  auto* train_cmd = app.add_subcommand("train", "Self-supervised training on a synthetic scene");
  train_cmd->add_option("-c,--config", train_flags.config, "key=value config file")->check(CLI::ExistingFile);
  train_cmd->add_option("-s,--set", train_flags.overrides, "Override a config key, e.g. --set steps=100");
  train_cmd->add_option("-o,--out", train_out, "Output directory (metrics.csv, checkpoint/)");

  std::string ckpt, infer_out = "infer";
  std::uint64_t infer_seed = 0;
  std::size_t infer_views = 4;
  auto* infer_cmd = app.add_subcommand("infer", "Predict textures for a synthetic scene from a checkpoint");
  infer_cmd->add_option("checkpoint", ckpt, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  infer_cmd->add_option("--seed", infer_seed, "Scene seed");
  infer_cmd->add_option("--views", infer_views, "Number of views");
  infer_cmd->add_option("-o,--out", infer_out, "Output directory");

  std::vector<std::string> sizes{"4096x4096x64x64"};
  std::string kernel_name = "both", bench_csv;
  std::size_t repeats = 3, mem_limit_mib = 0;
  auto* bench_cmd = app.add_subcommand("bench", "Peak memory and time of the attention kernels (f32)");
  bench_cmd->add_option("--size", sizes, "VUxHWxDxC, repeatable");
  bench_cmd->add_option("--kernel", kernel_name, "softmax, lora or both")
      ->check(CLI::IsMember({"softmax", "lora", "both"}));
  bench_cmd->add_option("--repeats", repeats, "Timed repeats per size")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--mem-limit-mib", mem_limit_mib, "Cap on tracked allocations, 0 for none");
  bench_cmd->add_option("--csv", bench_csv, "Also write the report here");

  std::uint64_t scene_seed = 0;
  std::size_t scene_views = 4, scene_uv = 32, scene_img = 32;
  double scene_jitter = 0.0;
  std::string scene_out = "scene";
  auto* scene_cmd = app.add_subcommand("gen-scene", "Write a synthetic scene as PNGs and tensor blobs");
  scene_cmd->add_option("--seed", scene_seed, "Scene seed");
  scene_cmd->add_option("--views", scene_views, "Number of views");
  scene_cmd->add_option("--uv", scene_uv, "UV map size");
  scene_cmd->add_option("--image", scene_img, "Image size");
  scene_cmd->add_option("--seg-jitter", scene_jitter, "Segmentation camera yaw jitter (radians)");
  scene_cmd->add_option("-o,--out", scene_out, "Output directory");

  std::string only;
  auto* grad_cmd = app.add_subcommand("grad-check", "Finite-difference checks of every op, loss and the model");
  grad_cmd->add_option("--only", only, "Run the cases whose name contains this text");

  std::string info_preset = "default";
  auto* info_cmd = app.add_subcommand("info", "Parameter count of a model preset");
  info_cmd->add_option("preset", info_preset, "default, toy or micro")->check(CLI::IsMember({"default", "toy", "micro"}));

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) {
      const TrainConfig cfg = load_train_config(train_flags);
      fs::create_directories(train_out);
      std::ofstream(fs::path(train_out) / "config.txt") << to_key_values(cfg);
      const auto t0 = std::chrono::steady_clock::now();
      const TrainResult r = train_to_dir(cfg, train_out, [&](const StepMetrics& m) {
        if (m.step % 25 == 0 || m.step == cfg.steps) std::cout << to_csv(m) << std::endl;
      });
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cout << "trained " << cfg.steps << " steps in " << secs << " s; total " << r.history.front().total
                << " -> " << r.history.back().total << ", visible L1 " << r.history.front().visible_l1 << " -> "
                << r.history.back().visible_l1 << '\n';
    } else if (infer_cmd->parsed()) {
      ModelConfig cfg;
      const ModelState state = load_model(ckpt, &cfg);
      SceneConfig sc;
      sc.uv_h = cfg.uv_h;
      sc.uv_w = cfg.uv_w;
      sc.img_h = cfg.img_h;
      sc.img_w = cfg.img_w;
      sc.views = infer_views;
      const SyntheticScene scene = generate_scene(infer_seed, sc);
      const Tensor tex = infer_textures(Texformer(cfg), state, scene);
      fs::create_directories(infer_out);
      for (std::size_t b = 0; b < tex.dim(0); ++b) {
        const Tensor t = reshape(slice(tex, 0, b, 1), {cfg.uv_h, cfg.uv_w, 3});
        write_png(fs::path(infer_out) / ("texture" + std::to_string(b) + ".png"), hwc_to_chw(t));
        save_tensor(fs::path(infer_out) / ("texture" + std::to_string(b) + ".tensor"), t);
        write_png(fs::path(infer_out) / ("render" + std::to_string(b) + ".png"), render(t, scene.views[b]));
      }
      write_png(fs::path(infer_out) / "gt_texture.png", hwc_to_chw(scene.gt_texture));
      std::cout << "wrote " << tex.dim(0) << " textures to " << infer_out << '\n';
    } else if (bench_cmd->parsed()) {
      const auto parsed = parse_sizes(sizes);
      std::vector<bench::BenchRow> rows;
      for (const char* k : {"softmax", "lora"}) {
        if (kernel_name != "both" && kernel_name != k) continue;
        const auto part = bench::bench_attention(parsed, parse_attention_kernel(k), repeats, mem_limit_mib << 20);
        rows.insert(rows.end(), part.begin(), part.end());
      }
      std::ostringstream report;
      report << bench::bench_csv_header() << '\n';
      for (const auto& row : rows) report << bench::to_csv(row) << '\n';
      std::cout << report.str();
      if (!bench_csv.empty()) std::ofstream(bench_csv) << report.str();
    } else if (scene_cmd->parsed()) {
      SceneConfig sc;
      sc.uv_h = sc.uv_w = scene_uv;
      sc.img_h = sc.img_w = scene_img;
      sc.views = scene_views;
      sc.seg_jitter = scene_jitter;
      write_scene(generate_scene(scene_seed, sc), scene_out);
      std::cout << "wrote scene " << scene_seed << " to " << scene_out << '\n';
    } else if (grad_cmd->parsed()) {
      int failed = 0;
      for (const GradCase& c : gradient_suite()) {
        if (!only.empty() && c.name.find(only) == std::string::npos) continue;
        const GradCheckResult r = c.run();
        const bool ok = r.max_relative_error < c.tolerance;
        failed += !ok;
        std::printf("%-4s %-26s rel %.3e (tol %.0e, %zu evals)\n", ok ? "ok" : "FAIL", c.name.c_str(),
                    r.max_relative_error, c.tolerance, r.evaluations);
      }
      return failed == 0 ? 0 : 1;
    } else if (info_cmd->parsed()) {
      const ModelConfig cfg = info_preset == "toy"     ? ModelConfig::toy()
                              : info_preset == "micro" ? ModelConfig::micro()
                                                       : ModelConfig::full();
      std::cout << to_json(cfg) << "\nparameters " << init_model(cfg, 0).parameter_count() << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
