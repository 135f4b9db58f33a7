#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "texlora/attention.hpp"
#include "texlora/body.hpp"
#include "texlora/layers.hpp"
#include "texlora/query_encoding.hpp"

namespace texlora {

struct ModelConfig {
  std::size_t uv_h = 32, uv_w = 32;
  std::size_t img_h = 32, img_w = 32;
  std::size_t levels = 3;
  /// Encoder and decoder width at each pyramid level.
  std::vector<std::size_t> widths{32, 64, 128};
  std::size_t blocks = 3;
  std::size_t d = 128, c = 128, heads = 8;
  std::vector<AttentionKernel> kernels{AttentionKernel::lora, AttentionKernel::lora, AttentionKernel::softmax};
  std::size_t parts = kPartCount;

  static ModelConfig full();
  static ModelConfig toy();
  /// Tiny widths and an 8x8 grid for finite-difference checks.
  static ModelConfig micro();

  void validate() const;
  std::size_t key_channels() const { return 3 + parts; }
  static constexpr std::size_t value_channels() { return 5; }
  static constexpr std::size_t query_channels() { return 3; }
  AttentionConfig attention(std::size_t level) const;
};

/// Batched inputs. image [B,3,h,w] in [0,1]; part_seg [B,P,h,w] one-hot or
/// empty per pixel; coords [1 or B,2,h,w] in [-1,1] (x then y).
struct ModelInputs {
  Tensor image;
  Tensor part_seg;
  Tensor coords;
  QueryMap query;

  void validate(const ModelConfig& cfg) const;
  std::size_t batch() const { return image.dim(0); }
};

/// Pixel coordinates of an h x w image normalized to [-1,1], align-corners.
Tensor coordinate_grid(std::size_t h, std::size_t w);

/// t_rgb [B,v,u,3], flow [B,v,u,2] holding (x, y), mask [B,v,u,1].
struct TexformerOutputs {
  Tensor t_rgb;
  Tensor flow;
  Tensor mask;
};

/// Encoded query pyramid, [1,d,v/2^i,u/2^i] per level. Independent of the
/// image, so it can replace the query CNN at deployment.
struct QueryCache {
  std::vector<Tensor> levels;
};

struct ModelState {
  ParamMap params;
  StatsMap stats;

  std::size_t parameter_count() const;
};

ModelState init_model(const ModelConfig& cfg, std::uint64_t seed);

enum class Branch { query, key, value };

class Texformer {
 public:
  explicit Texformer(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }

  /// Feature pyramid of one input branch: [B, d or c, s/2^i, s/2^i].
  std::vector<Tensor> encode_branch(const LayerContext& ctx, Branch branch, const Tensor& input) const;
  QueryCache encode_query(const LayerContext& ctx, const QueryMap& query) const;

  TexformerOutputs forward(const LayerContext& ctx, const ModelInputs& in,
                           const QueryCache* cache = nullptr) const;

 private:
  ModelConfig cfg_;
  std::vector<PositionalEncoding> pe_query_;
  std::vector<PositionalEncoding> pe_key_;
};

/// Bilinear lookup of image [B,3,h,w] at flow [B,v,u,2]; returns [B,v,u,3].
Tensor sample_texture(const Tensor& flow, const Tensor& image);
/// M * sampled + (1 - M) * t_rgb with the single-channel mask broadcast over
/// color. The result is clamped into [min, max] of its two sources so the
/// blend stays convex under rounding; the gradient is that of the blend.
Tensor mask_fusion(const Tensor& mask, const Tensor& sampled, const Tensor& t_rgb);
Tensor mask_fusion(const TexformerOutputs& out, const Tensor& image);

void save_model(const std::filesystem::path& dir, const ModelConfig& cfg, const ModelState& state);
ModelState load_model(const std::filesystem::path& dir, ModelConfig* cfg);

std::string to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

}  // namespace texlora
