#pragma once

#include <cstdint>
#include <vector>

#include "texlora/layers.hpp"

namespace texlora {

/// Frozen random conv-BN-ReLU stack standing in for a pretrained ReID
/// network. Batch norm runs in inference form with zero mean and a variance
/// calibrated once on random images, so every stage is positively
/// homogeneous in its own weights.
class FeatureExtractor {
 public:
  struct Config {
    std::vector<std::size_t> widths{16, 32, 64, 128};
    std::vector<std::size_t> strides{1, 2, 2, 2};
    /// Stage indices summed by the ReID loss.
    std::vector<std::size_t> reid_taps{1, 3};
    std::uint64_t seed = 42;
  };

  FeatureExtractor();
  explicit FeatureExtractor(Config cfg);
  /// Single pass-through stage: phi_1 is the image itself.
  static FeatureExtractor identity();

  /// Output of every stage for images [B,3,H,W]; H and W must be divisible
  /// by the product of the strides.
  std::vector<Tensor> stages(const Tensor& images) const;
  const std::vector<std::size_t>& reid_taps() const { return cfg_.reid_taps; }
  std::size_t stage_count() const { return identity_ ? 1 : cfg_.widths.size(); }
  /// Product of the strides up to and including `stage`.
  std::size_t stage_stride(std::size_t stage) const;

  /// Copy with the last stage's weights multiplied by `s`.
  FeatureExtractor with_final_scale(double s) const;

 private:
  Config cfg_;
  bool identity_ = false;
  std::vector<Tensor> weights_;
  // Only read: batch norm runs in eval mode.
  mutable std::vector<RunningStats> stats_;
  std::vector<Tensor> gamma_, beta_;

  Tensor stage(std::size_t i, const Tensor& x, bool pooled) const;
};

struct LossWeights {
  double w1 = 5000.0;
  double w2 = 0.4;
  double w3 = 0.01;

  void validate() const;
};

/// UV textures [v,u,3] with a binary face mask [v,u].
struct SyntheticTextureSet {
  std::vector<Tensor> textures;
  Tensor face_mask;

  void validate() const;
};

/// Squared distance of L2-normalized features summed over the ReID taps;
/// averaged over the batch. Target features may be computed once and reused.
Tensor reid_loss(const std::vector<Tensor>& rendered_stages, const std::vector<Tensor>& target_stages,
                 const FeatureExtractor& fx);
Tensor reid_loss(const Tensor& rendered, const Tensor& target, const FeatureExtractor& fx);

/// features [C,H,W], mask [1,H,W] or [H,W]. (F m)(F m)^T / sum(m); zero
/// matrix for an empty mask.
Tensor gram(const Tensor& features, const Tensor& mask);

/// Sum over parts of |G(M_p phi_1(r)) - G(M'_p phi_1(I))|_F^2, averaged over
/// the batch. Masks are [B,P,H,W] at image resolution and are average-pooled
/// to the first stage's resolution.
Tensor part_style_loss(const Tensor& rendered_phi1, const Tensor& target_phi1, const Tensor& rendered_parts,
                       const Tensor& target_parts);
Tensor part_style_loss(const Tensor& rendered, const Tensor& target, const Tensor& rendered_parts,
                       const Tensor& target_parts, const FeatureExtractor& fx);

inline constexpr double kStructureC = 0.03 * 0.03;

/// (cov + C) / (sqrt(var_x var_y) + C) over the elements where mask > 0.5,
/// population statistics. A mask-free overload uses every element.
Tensor ssim_structure(const Tensor& x, const Tensor& y, const Tensor& mask, double c = kStructureC);
Tensor ssim_structure(const Tensor& x, const Tensor& y, double c = kStructureC);

/// -(1/N) sum_i s(face of T, face of T_syn_i). T is [v,u,3] or [B,v,u,3];
/// batches are averaged.
Tensor face_structure_loss(const Tensor& texture, const SyntheticTextureSet& set);

struct LossTerms {
  Tensor reid;
  Tensor style;
  Tensor face;
  Tensor total;
};

/// w1 * reid + w2 * style + w3 * face
Tensor total_loss(const Tensor& reid, const Tensor& style, const Tensor& face, const LossWeights& w);
LossTerms combine_losses(Tensor reid, Tensor style, Tensor face, const LossWeights& w);

/// Gaussian-window SSIM (11x11, sigma 1.5, K1 0.01, K2 0.03, L 1) of images
/// [C,H,W] or [B,C,H,W], averaged over pixels with mask > 0.5 and channels.
/// mask is [H,W], [1,H,W] or [B,1,H,W].
double ssim_metric(const Tensor& x, const Tensor& y, const Tensor& mask);
/// Cosine similarity of the flattened last-stage features; batch mean.
double feature_cos_sim(const Tensor& x, const Tensor& y, const FeatureExtractor& fx);

}  // namespace texlora
