#include "texlora/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace texlora {

void Adam::step(ParamMap& params, const std::map<std::string, Tensor>& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (auto& [name, p] : params) {
    const auto it = grads.find(name);
    if (it == grads.end()) continue;
    const Tensor& g = it->second;
    if (g.shape() != p.shape()) throw TensorError("adam: gradient of " + name + " has the wrong shape");
    auto& m = m_[name];
    auto& v = v_[name];
    m.resize(p.numel(), 0.0);
    v.resize(p.numel(), 0.0);
    std::vector<double> next(p.data().begin(), p.data().end());
    for (std::size_t i = 0; i < next.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      next[i] -= cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
    }
    p = Tensor(p.shape(), std::move(next));
  }
}

void TrainConfig::validate() const {
  if (steps == 0) throw std::invalid_argument("training needs at least one step");
  if (!(adam.lr >= 0.0) || !std::isfinite(adam.lr)) throw std::invalid_argument("learning rate must be >= 0");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0))
    throw std::invalid_argument("adam betas must lie in [0, 1)");
  if (!(adam.eps > 0.0)) throw std::invalid_argument("adam eps must be positive");
  weights.validate();
  scene.validate();
  model.validate();
  if (model.uv_h != scene.uv_h || model.uv_w != scene.uv_w || model.img_h != scene.img_h ||
      model.img_w != scene.img_w)
    throw std::invalid_argument("model and scene sizes differ");
  if (model.parts != kPartCount) throw std::invalid_argument("model part count must match the body");
}

std::string metrics_csv_header() { return "step,reid,style,face,total,ssim,cos_sim,visible_l1"; }

std::string to_csv(const StepMetrics& m) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g", m.step, m.reid, m.style, m.face,
                m.total, m.ssim, m.cos_sim, m.visible_l1);
  return buf;
}

ModelInputs scene_inputs(const SyntheticScene& scene, const ModelConfig& cfg) {
  ModelInputs in;
  std::vector<Tensor> images, segs;
  for (const SceneView& view : scene.views) {
    const Shape img{1, 3, view.camera.h, view.camera.w};
    images.push_back(reshape(view.image, img));
    segs.push_back(reshape(view.part_seg, {1, kPartCount, view.camera.h, view.camera.w}));
  }
  in.image = concat(images, 0);
  in.part_seg = concat(segs, 0);
  in.coords = coordinate_grid(cfg.img_h, cfg.img_w);
  in.query = build_query_map(scene.mesh, cfg.uv_h, cfg.uv_w);
  in.validate(cfg);
  return in;
}

Trainer::Trainer(const SyntheticScene& scene, TrainConfig cfg, ModelState init)
    : scene_(scene), cfg_(std::move(cfg)), model_(cfg_.model), state_(std::move(init)), adam_(cfg_.adam) {
  cfg_.validate();
  if (scene.views.empty()) throw std::invalid_argument("scene has no views");
  inputs_ = scene_inputs(scene, cfg_.model);

  const std::size_t n = scene.views.size(), h = cfg_.model.img_h, w = cfg_.model.img_w;
  std::vector<Tensor> targets, tparts, rparts;
  for (std::size_t b = 0; b < n; ++b)
    for (const SceneView& view : scene.views) {
      targets.push_back(reshape(view.image, {1, 3, h, w}));
      tparts.push_back(reshape(view.part_seg, {1, kPartCount, h, w}));
      rparts.push_back(reshape(view.render_seg, {1, kPartCount, h, w}));
    }
  targets_ = concat(targets, 0);
  target_parts_ = concat(tparts, 0);
  render_parts_ = concat(rparts, 0);
  target_stages_ = fx_.stages(targets_);
  visible_ = scene.visible_union();
}

StepMetrics Trainer::step(bool update) {
  const std::size_t n = scene_.views.size();
  Tape tape;
  ParamMap bound;
  for (const auto& [name, t] : state_.params) bound[name] = tape.leaf(t);

  const TexformerOutputs out = model_.forward(LayerContext{bound, &state_.stats, NormMode::train, true}, inputs_);
  const Tensor fused = mask_fusion(out, inputs_.image);

  std::vector<Tensor> rendered;
  for (std::size_t b = 0; b < n; ++b) {
    const Tensor tex = reshape(slice(fused, 0, b, 1), {cfg_.model.uv_h, cfg_.model.uv_w, 3});
    for (const SceneView& view : scene_.views)
      rendered.push_back(reshape(render(tex, view), {1, 3, cfg_.model.img_h, cfg_.model.img_w}));
  }
  const Tensor r = concat(rendered, 0);
  const std::vector<Tensor> stages = fx_.stages(r);
  const LossTerms terms = combine_losses(reid_loss(stages, target_stages_, fx_),
                                         part_style_loss(stages.front(), target_stages_.front(), render_parts_,
                                                         target_parts_),
                                         face_structure_loss(fused, scene_.faces), cfg_.weights);

  StepMetrics m;
  m.step = done_;
  m.reid = terms.reid.item();
  m.style = terms.style.item();
  m.face = terms.face.item();
  m.total = terms.total.item();
  if (!std::isfinite(m.total)) {
    std::ostringstream os;
    os << "non-finite loss at step " << done_ << ": reid " << m.reid << ", style " << m.style << ", face " << m.face
       << ", total " << m.total;
    throw std::runtime_error(os.str());
  }

  std::vector<Tensor> coverage;
  for (std::size_t b = 0; b < n; ++b)
    for (const SceneView& view : scene_.views) coverage.push_back(reshape(view.coverage, {1, 1, view.camera.h, view.camera.w}));
  m.ssim = ssim_metric(r.detach(), targets_, concat(coverage, 0));
  m.cos_sim = feature_cos_sim(r.detach(), targets_, fx_);

  double l1 = 0.0, count = 0.0;
  const std::size_t texels = visible_.numel();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < texels; ++i) {
      if (visible_[i] == 0.0) continue;
      for (std::size_t k = 0; k < 3; ++k)
        l1 += std::abs(fused[(b * texels + i) * 3 + k] - scene_.gt_texture[i * 3 + k]);
      count += 3.0;
    }
  m.visible_l1 = count > 0.0 ? l1 / count : 0.0;

  if (update) {
    const Gradients g = backward(terms.total);
    std::map<std::string, Tensor> grads;
    for (const auto& [name, t] : bound) grads.emplace(name, g.of(t));
    adam_.step(state_.params, grads);
    ++done_;
  }
  return m;
}

TrainResult train(const SyntheticScene& scene, const TrainConfig& cfg, std::ostream* csv,
                  const std::function<void(const StepMetrics&)>& on_step) {
  cfg.validate();
  Trainer trainer(scene, cfg, init_model(cfg.model, cfg.seed));
  TrainResult result;
  if (csv) *csv << metrics_csv_header() << '\n';
  for (std::size_t k = 0; k <= cfg.steps; ++k) {
    const StepMetrics m = trainer.step(k < cfg.steps);
    if (csv) *csv << to_csv(m) << '\n' << std::flush;
    if (on_step) on_step(m);
    result.history.push_back(m);
  }
  result.state = trainer.state();
  return result;
}

TrainResult train_to_dir(const TrainConfig& cfg, const std::filesystem::path& out,
                         const std::function<void(const StepMetrics&)>& on_step) {
  cfg.validate();
  std::filesystem::create_directories(out);
  const SyntheticScene scene = generate_scene(cfg.seed, cfg.scene);
  std::ofstream csv(out / "metrics.csv", std::ios::binary);
  if (!csv) throw std::runtime_error("cannot write " + (out / "metrics.csv").string());
  TrainResult result = train(scene, cfg, &csv, on_step);
  save_model(out / "checkpoint", cfg.model, result.state);
  return result;
}

Tensor infer_textures(const Texformer& model, const ModelState& state, const SyntheticScene& scene) {
  const ModelInputs in = scene_inputs(scene, model.config());
  StatsMap stats = state.stats;
  const LayerContext ctx{state.params, &stats, NormMode::eval};
  return mask_fusion(model.forward(ctx, in), in.image);
}

}  // namespace texlora
