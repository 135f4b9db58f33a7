#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "texlora/losses.hpp"
#include "texlora/model.hpp"
#include "texlora/scene.hpp"

namespace texlora {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  /// One bias-corrected update of every parameter that has a gradient.
  void step(ParamMap& params, const std::map<std::string, Tensor>& grads);
  std::size_t steps() const { return t_; }

 private:
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

struct TrainConfig {
  std::size_t steps = 500;
  AdamConfig adam;
  /// Seeds both the scene and the model initialization.
  std::uint64_t seed = 0;
  LossWeights weights;
  SceneConfig scene;
  ModelConfig model = ModelConfig::toy();

  /// A learning rate of 0 is accepted and freezes the parameters.
  void validate() const;
};

struct StepMetrics {
  std::size_t step = 0;
  double reid = 0.0, style = 0.0, face = 0.0, total = 0.0;
  double ssim = 0.0, cos_sim = 0.0;
  /// Mean |fused - ground truth| over texels seen by any view.
  double visible_l1 = 0.0;
};

std::string metrics_csv_header();
std::string to_csv(const StepMetrics& m);

/// Cross-view self-supervised training on one scene. Every view is an input;
/// each predicted texture is rendered into every view and compared with that
/// view's image.
class Trainer {
 public:
  Trainer(const SyntheticScene& scene, TrainConfig cfg, ModelState init);

  /// Losses and metrics of the current parameters; when `update` is set the
  /// gradients are applied afterwards. Throws std::runtime_error on a
  /// non-finite loss.
  StepMetrics step(bool update);

  const ModelState& state() const { return state_; }
  const Texformer& model() const { return model_; }
  const ModelInputs& inputs() const { return inputs_; }

 private:
  const SyntheticScene& scene_;
  TrainConfig cfg_;
  Texformer model_;
  ModelState state_;
  Adam adam_;
  FeatureExtractor fx_;
  ModelInputs inputs_;
  Tensor targets_;        // [V*V,3,h,w], pair (b, j) holds view j's image
  Tensor target_parts_;   // [V*V,P,h,w]
  Tensor render_parts_;   // [V*V,P,h,w]
  std::vector<Tensor> target_stages_;
  Tensor visible_;
  std::size_t done_ = 0;
};

struct TrainResult {
  std::vector<StepMetrics> history;  // steps + 1 rows; row 0 is before any update
  ModelState state;
};

/// Runs cfg.steps updates. Each row is streamed to `csv` (header first) and
/// to `on_step` as it is produced.
TrainResult train(const SyntheticScene& scene, const TrainConfig& cfg, std::ostream* csv = nullptr,
                  const std::function<void(const StepMetrics&)>& on_step = {});

/// Generates the scene from cfg.seed, trains, and writes metrics.csv and a
/// checkpoint/ directory under `out`.
TrainResult train_to_dir(const TrainConfig& cfg, const std::filesystem::path& out,
                         const std::function<void(const StepMetrics&)>& on_step = {});

/// Fused textures [V,v,u,3] for every view of the scene, eval-mode batch norm.
Tensor infer_textures(const Texformer& model, const ModelState& state, const SyntheticScene& scene);
ModelInputs scene_inputs(const SyntheticScene& scene, const ModelConfig& cfg);

}  // namespace texlora
