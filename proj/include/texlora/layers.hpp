#pragma once

#include <map>
#include <string>

#include "texlora/ops.hpp"
#include "texlora/random.hpp"

namespace texlora {

using ParamMap = std::map<std::string, Tensor>;
using StatsMap = std::map<std::string, RunningStats>;

/// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))
Tensor fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng);

/// x[N, in] * w[in, out] + b[out]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

/// x[B, C, H, W] + b[C]
Tensor add_channel_bias(const Tensor& x, const Tensor& b);

/// [B, C, H, W] -> [B, H*W, C]
Tensor nchw_to_tokens(const Tensor& x);
/// [B, H*W, C] -> [B, C, H, W]
Tensor tokens_to_nchw(const Tensor& t, std::size_t h, std::size_t w);

/// Parameters and running statistics of one forward pass. `params` may hold
/// tracked leaves; `stats` is only written when `update_stats` is set.
struct LayerContext {
  const ParamMap& params;
  StatsMap* stats = nullptr;
  NormMode mode = NormMode::train;
  bool update_stats = false;

  const Tensor& param(const std::string& name) const;
  BatchNormOptions norm(const std::string& name) const;
};

/// Registers conv weight `<prefix>/w` and batch norm `<prefix>/bn_gamma`,
/// `<prefix>/bn_beta` plus running statistics `<prefix>/bn`.
void init_conv_bn(ParamMap& params, StatsMap& stats, const std::string& prefix, std::size_t in_ch,
                  std::size_t out_ch, std::size_t kernel, Rng& rng);
Tensor conv_bn_relu(const LayerContext& ctx, const std::string& prefix, const Tensor& x);

}  // namespace texlora
