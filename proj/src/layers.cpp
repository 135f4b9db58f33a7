#include "texlora/layers.hpp"

#include <cmath>

namespace texlora {

Tensor fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return rng.uniform_tensor(std::move(shape), -bound, bound);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  const Tensor y = matmul(x, w);
  return add(y, broadcast_to(reshape(b, {1, b.numel()}), y.shape()));
}

Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
  return add(x, broadcast_to(reshape(b, {1, b.numel(), 1, 1}), x.shape()));
}

Tensor nchw_to_tokens(const Tensor& x) {
  const Tensor p = permute(x, {0, 2, 3, 1});
  return reshape(p, {x.dim(0), x.dim(2) * x.dim(3), x.dim(1)});
}

Tensor tokens_to_nchw(const Tensor& t, std::size_t h, std::size_t w) {
  if (t.rank() != 3 || t.dim(1) != h * w) {
    throw TensorError("tokens_to_nchw: " + to_string(t.shape()) + " is not a " + std::to_string(h) + "x" +
                      std::to_string(w) + " token grid");
  }
  const Tensor g = reshape(t, {t.dim(0), h, w, t.dim(2)});
  return permute(g, {0, 3, 1, 2});
}

const Tensor& LayerContext::param(const std::string& name) const {
  const auto it = params.find(name);
  if (it == params.end()) throw TensorError("missing parameter '" + name + "'");
  return it->second;
}

BatchNormOptions LayerContext::norm(const std::string& name) const {
  BatchNormOptions o;
  o.mode = mode;
  if (stats) {
    const auto it = stats->find(name);
    if (it == stats->end()) throw TensorError("missing running statistics '" + name + "'");
    if (mode == NormMode::eval || update_stats) o.stats = &it->second;
  }
  return o;
}

void init_conv_bn(ParamMap& params, StatsMap& stats, const std::string& prefix, std::size_t in_ch,
                  std::size_t out_ch, std::size_t kernel, Rng& rng) {
  params[prefix + "/w"] = fan_in_uniform({out_ch, in_ch, kernel, kernel}, in_ch * kernel * kernel, rng);
  params[prefix + "/bn_gamma"] = Tensor::ones({out_ch});
  params[prefix + "/bn_beta"] = Tensor::zeros({out_ch});
  stats[prefix + "/bn"] = RunningStats::identity(out_ch);
}

Tensor conv_bn_relu(const LayerContext& ctx, const std::string& prefix, const Tensor& x) {
  const Tensor& w = ctx.param(prefix + "/w");
  const Tensor y = conv2d(x, w, 1, w.dim(2) / 2);
  return relu(batchnorm2d(y, ctx.param(prefix + "/bn_gamma"), ctx.param(prefix + "/bn_beta"),
                          ctx.norm(prefix + "/bn")));
}

}  // namespace texlora
