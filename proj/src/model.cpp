#include "texlora/model.hpp"

#include <algorithm>
#include <stdexcept>

#include "json.hpp"
#include "texlora/serialize.hpp"

namespace texlora {

namespace {

std::string level_name(const std::string& prefix, std::size_t level) { return prefix + "/l" + std::to_string(level); }

std::string block_name(const std::string& prefix, std::size_t level, std::size_t block) {
  return level_name(prefix, level) + "/b" + std::to_string(block);
}

const char* branch_prefix(Branch b) {
  switch (b) {
    case Branch::query:
      return "query";
    case Branch::key:
      return "key";
    case Branch::value:
      return "value";
  }
  return "";
}

std::size_t branch_in_channels(const ModelConfig& cfg, Branch b) {
  switch (b) {
    case Branch::query:
      return ModelConfig::query_channels();
    case Branch::key:
      return cfg.key_channels();
    case Branch::value:
      return ModelConfig::value_channels();
  }
  return 0;
}

std::size_t branch_out_channels(const ModelConfig& cfg, Branch b) { return b == Branch::value ? cfg.c : cfg.d; }

void init_branch(const ModelConfig& cfg, Branch branch, ParamMap& params, StatsMap& stats, Rng& rng) {
  const std::string prefix = branch_prefix(branch);
  const std::size_t out = branch_out_channels(cfg, branch);
  std::size_t in = branch_in_channels(cfg, branch);
  for (std::size_t l = 0; l < cfg.levels; ++l) {
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
      init_conv_bn(params, stats, block_name(prefix, l, b), in, cfg.widths[l], 3, rng);
      in = cfg.widths[l];
    }
    params[level_name(prefix, l) + "/proj_w"] = fan_in_uniform({out, in, 1, 1}, in, rng);
  }
}

void init_head(ParamMap& params, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
  params[name + "/w"] = fan_in_uniform({out, in, 1, 1}, in, rng);
  params[name + "/b"] = fan_in_uniform({out}, in, rng);
}

Tensor head(const LayerContext& ctx, const std::string& name, const Tensor& x) {
  const Tensor y = add_channel_bias(conv2d(x, ctx.param(name + "/w"), 1, 0), ctx.param(name + "/b"));
  return permute(y, {0, 2, 3, 1});
}

Tensor batch_broadcast(const Tensor& x, std::size_t batch) {
  if (x.dim(0) == batch) return x;
  Shape s = x.shape();
  s[0] = batch;
  return broadcast_to(x, s);
}

Tensor nchw_slice_tokens(const Tensor& tokens, std::size_t b) {
  const Tensor one = tokens.dim(0) == 1 ? tokens : slice(tokens, 0, b, 1);
  return reshape(one, {tokens.dim(1), tokens.dim(2)});
}

}  // namespace

ModelConfig ModelConfig::full() {
  ModelConfig cfg;
  cfg.uv_h = 128;
  cfg.uv_w = 128;
  cfg.img_h = 128;
  cfg.img_w = 64;
  return cfg;
}

ModelConfig ModelConfig::toy() {
  ModelConfig cfg;
  cfg.widths = {16, 32, 32};
  cfg.blocks = 1;
  cfg.d = 32;
  cfg.c = 32;
  cfg.heads = 4;
  return cfg;
}

ModelConfig ModelConfig::micro() {
  ModelConfig cfg;
  cfg.uv_h = cfg.uv_w = cfg.img_h = cfg.img_w = 8;
  cfg.widths = {2, 3, 4};
  cfg.blocks = 1;
  cfg.d = 4;
  cfg.c = 4;
  cfg.heads = 2;
  return cfg;
}

void ModelConfig::validate() const {
  if (levels == 0) throw std::invalid_argument("model needs at least one pyramid level");
  if (widths.size() != levels || kernels.size() != levels)
    throw std::invalid_argument("widths and kernels need one entry per pyramid level");
  if (blocks == 0) throw std::invalid_argument("model needs at least one conv block per level");
  if (std::find(widths.begin(), widths.end(), 0u) != widths.end())
    throw std::invalid_argument("level widths must be positive");
  const std::size_t step = std::size_t{1} << (levels - 1);
  for (std::size_t s : {uv_h, uv_w, img_h, img_w}) {
    if (s == 0 || s % step != 0)
      throw std::invalid_argument("sizes must be positive multiples of " + std::to_string(step));
  }
  if (d % 4 != 0) throw std::invalid_argument("key width must be a multiple of 4 for positional encoding");
  if (parts == 0) throw std::invalid_argument("model needs at least one body part");
  for (std::size_t l = 0; l < levels; ++l) attention(l).validate();
}

AttentionConfig ModelConfig::attention(std::size_t level) const {
  AttentionConfig a;
  a.heads = heads;
  a.d_key = d;
  a.d_value = c;
  a.kernel = kernels.at(level);
  return a;
}

void ModelInputs::validate(const ModelConfig& cfg) const {
  if (image.rank() != 4 || image.dim(1) != 3 || image.dim(2) != cfg.img_h || image.dim(3) != cfg.img_w) {
    throw TensorError("model image must be [B,3," + std::to_string(cfg.img_h) + "," + std::to_string(cfg.img_w) +
                      "], got " + to_string(image.shape()));
  }
  const Shape seg{image.dim(0), cfg.parts, cfg.img_h, cfg.img_w};
  if (part_seg.shape() != seg)
    throw TensorError("part segmentation must be " + to_string(seg) + ", got " + to_string(part_seg.shape()));
  if (coords.rank() != 4 || (coords.dim(0) != 1 && coords.dim(0) != image.dim(0)) || coords.dim(1) != 2 ||
      coords.dim(2) != cfg.img_h || coords.dim(3) != cfg.img_w) {
    throw TensorError("coordinate grid has shape " + to_string(coords.shape()));
  }
  if (query.grid.shape() != Shape{cfg.uv_h, cfg.uv_w, 3})
    throw TensorError("query map has shape " + to_string(query.grid.shape()));
}

Tensor coordinate_grid(std::size_t h, std::size_t w) {
  std::vector<double> v(2 * h * w);
  const auto norm = [](std::size_t i, std::size_t n) {
    return n == 1 ? 0.0 : -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(n - 1);
  };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      v[y * w + x] = norm(x, w);
      v[h * w + y * w + x] = norm(y, h);
    }
  return Tensor({1, 2, h, w}, std::move(v));
}

std::size_t ModelState::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

ModelState init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelState s;
  Rng rng(seed);
  for (Branch b : {Branch::query, Branch::key, Branch::value}) init_branch(cfg, b, s.params, s.stats, rng);
  for (std::size_t l = 0; l < cfg.levels; ++l)
    init_transformer_params(s.params, s.stats, "unit" + std::to_string(l), cfg.attention(l), rng);
  for (std::size_t l = cfg.levels; l-- > 0;) {
    std::size_t in = cfg.c + cfg.d + (l + 1 < cfg.levels ? cfg.widths[l + 1] : 0);
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
      init_conv_bn(s.params, s.stats, block_name("decoder", l, b), in, cfg.widths[l], 3, rng);
      in = cfg.widths[l];
    }
  }
  init_head(s.params, "head_rgb", cfg.widths[0], 3, rng);
  init_head(s.params, "head_flow", cfg.widths[0], 2, rng);
  init_head(s.params, "head_mask", cfg.widths[0], 1, rng);
  return s;
}

Texformer::Texformer(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  for (std::size_t l = 0; l < cfg_.levels; ++l) {
    pe_query_.push_back(sinusoidal_pe(cfg_.uv_h >> l, cfg_.uv_w >> l, cfg_.d));
    pe_key_.push_back(sinusoidal_pe(cfg_.img_h >> l, cfg_.img_w >> l, cfg_.d));
  }
}

std::vector<Tensor> Texformer::encode_branch(const LayerContext& ctx, Branch branch, const Tensor& input) const {
  const bool uv = branch == Branch::query;
  const std::size_t h = uv ? cfg_.uv_h : cfg_.img_h, w = uv ? cfg_.uv_w : cfg_.img_w;
  const std::size_t in_ch = branch_in_channels(cfg_, branch);
  if (input.rank() != 4 || input.dim(1) != in_ch || input.dim(2) != h || input.dim(3) != w) {
    throw TensorError(std::string(branch_prefix(branch)) + " branch expects [B," + std::to_string(in_ch) + "," +
                      std::to_string(h) + "," + std::to_string(w) + "], got " + to_string(input.shape()));
  }
  const std::string prefix = branch_prefix(branch);
  std::vector<Tensor> pyramid;
  Tensor x = input;
  for (std::size_t l = 0; l < cfg_.levels; ++l) {
    if (l > 0) x = avg_pool2x2(x);
    for (std::size_t b = 0; b < cfg_.blocks; ++b) x = conv_bn_relu(ctx, block_name(prefix, l, b), x);
    pyramid.push_back(conv2d(x, ctx.param(level_name(prefix, l) + "/proj_w"), 1, 0));
  }
  return pyramid;
}

QueryCache Texformer::encode_query(const LayerContext& ctx, const QueryMap& query) const {
  const Tensor& g = query.grid;
  const Tensor x = reshape(permute(g, {2, 0, 1}), {1, 3, g.dim(0), g.dim(1)});
  return QueryCache{encode_branch(ctx, Branch::query, x)};
}

TexformerOutputs Texformer::forward(const LayerContext& ctx, const ModelInputs& in, const QueryCache* cache) const {
  in.validate(cfg_);
  const std::size_t batch = in.batch();
  const QueryCache query = cache ? *cache : encode_query(ctx, in.query);
  if (query.levels.size() != cfg_.levels) throw TensorError("query cache has the wrong number of levels");
  const std::vector<Tensor> keys = encode_branch(ctx, Branch::key, concat({in.image, in.part_seg}, 1));
  const std::vector<Tensor> values =
      encode_branch(ctx, Branch::value, concat({in.image, batch_broadcast(in.coords, batch)}, 1));

  std::vector<Tensor> fused(cfg_.levels);
  for (std::size_t l = 0; l < cfg_.levels; ++l) {
    const Tensor qt = nchw_to_tokens(query.levels[l]);
    const Tensor kt = nchw_to_tokens(keys[l]);
    const Tensor vt = nchw_to_tokens(values[l]);
    std::vector<AttentionInputs> items;
    for (std::size_t b = 0; b < batch; ++b)
      items.push_back({nchw_slice_tokens(qt, 0), nchw_slice_tokens(kt, b), nchw_slice_tokens(vt, b)});
    const Tensor o = transformer_unit(items, pe_query_[l], pe_key_[l], cfg_.attention(l), ctx,
                                      "unit" + std::to_string(l));
    const std::size_t vh = cfg_.uv_h >> l, vw = cfg_.uv_w >> l;
    fused[l] = tokens_to_nchw(reshape(o, {batch, vh * vw, cfg_.c}), vh, vw);
  }

  Tensor x;
  for (std::size_t l = cfg_.levels; l-- > 0;) {
    std::vector<Tensor> parts;
    if (l + 1 < cfg_.levels) parts.push_back(resample_bilinear(x, cfg_.uv_h >> l, cfg_.uv_w >> l));
    parts.push_back(fused[l]);
    parts.push_back(batch_broadcast(query.levels[l], batch));
    x = concat(parts, 1);
    for (std::size_t b = 0; b < cfg_.blocks; ++b) x = conv_bn_relu(ctx, block_name("decoder", l, b), x);
  }
  return TexformerOutputs{sigmoid(head(ctx, "head_rgb", x)), tanh(head(ctx, "head_flow", x)),
                          sigmoid(head(ctx, "head_mask", x))};
}

Tensor sample_texture(const Tensor& flow, const Tensor& image) {
  if (flow.rank() != 4 || flow.dim(3) != 2) throw TensorError("flow must be [B,v,u,2], got " + to_string(flow.shape()));
  return grid_sample(image, flow);
}

Tensor mask_fusion(const Tensor& mask, const Tensor& sampled, const Tensor& t_rgb) {
  if (sampled.shape() != t_rgb.shape() || sampled.rank() != 4) {
    throw TensorError("mask_fusion: sources " + to_string(sampled.shape()) + " and " + to_string(t_rgb.shape()) +
                      " differ");
  }
  const std::size_t channels = sampled.dim(3), texels = sampled.numel() / channels;
  if (mask.numel() != texels || mask.dim(mask.rank() - 1) != 1)
    throw TensorError("mask_fusion: mask " + to_string(mask.shape()) + " does not match " + to_string(sampled.shape()));
  std::vector<double> out(sampled.numel());
  for (std::size_t i = 0; i < texels; ++i) {
    const double m = mask[i];
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t k = i * channels + c;
      const double s = sampled[k], t = t_rgb[k];
      out[k] = std::clamp(m * s + (1.0 - m) * t, std::min(s, t), std::max(s, t));
    }
  }
  return record("mask_fusion", sampled.shape(), std::move(out), {mask, sampled, t_rgb},
                [mask = mask.detach(), sampled = sampled.detach(), t_rgb = t_rgb.detach(), texels, channels](
                    std::span<const double> g, GradRefs pg) {
                  for (std::size_t i = 0; i < texels; ++i) {
                    const double m = mask[i];
                    double dm = 0.0;
                    for (std::size_t c = 0; c < channels; ++c) {
                      const std::size_t k = i * channels + c;
                      dm += g[k] * (sampled[k] - t_rgb[k]);
                      if (pg[1]) (*pg[1])[k] += g[k] * m;
                      if (pg[2]) (*pg[2])[k] += g[k] * (1.0 - m);
                    }
                    if (pg[0]) (*pg[0])[i] += dm;
                  }
                });
}

Tensor mask_fusion(const TexformerOutputs& out, const Tensor& image) {
  return mask_fusion(out.mask, sample_texture(out.flow, image), out.t_rgb);
}

std::string to_json(const ModelConfig& cfg) {
  nlohmann::json j;
  j["uv_size"] = {cfg.uv_h, cfg.uv_w};
  j["image_size"] = {cfg.img_h, cfg.img_w};
  j["levels"] = cfg.levels;
  j["widths"] = cfg.widths;
  j["blocks"] = cfg.blocks;
  j["d"] = cfg.d;
  j["c"] = cfg.c;
  j["heads"] = cfg.heads;
  std::vector<std::string> kernels;
  for (auto k : cfg.kernels) kernels.emplace_back(to_string(k));
  j["kernels"] = kernels;
  j["parts"] = cfg.parts;
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  ModelConfig cfg;
  cfg.uv_h = j.at("uv_size").at(0);
  cfg.uv_w = j.at("uv_size").at(1);
  cfg.img_h = j.at("image_size").at(0);
  cfg.img_w = j.at("image_size").at(1);
  cfg.levels = j.at("levels");
  cfg.widths = j.at("widths").get<std::vector<std::size_t>>();
  cfg.blocks = j.at("blocks");
  cfg.d = j.at("d");
  cfg.c = j.at("c");
  cfg.heads = j.at("heads");
  cfg.kernels.clear();
  for (const auto& k : j.at("kernels")) cfg.kernels.push_back(parse_attention_kernel(k.get<std::string>()));
  cfg.parts = j.at("parts");
  cfg.validate();
  return cfg;
}

void save_model(const std::filesystem::path& dir, const ModelConfig& cfg, const ModelState& state) {
  std::map<std::string, Tensor> blobs = state.params;
  for (const auto& [name, st] : state.stats) {
    blobs["running/" + name + "/mean"] = Tensor({st.mean.size()}, st.mean);
    blobs["running/" + name + "/var"] = Tensor({st.var.size()}, st.var);
  }
  save_tensor_set(dir, blobs, to_json(cfg));
}

ModelState load_model(const std::filesystem::path& dir, ModelConfig* cfg) {
  std::string meta;
  auto blobs = load_tensor_set(dir, &meta);
  const ModelConfig loaded = model_config_from_json(meta);
  ModelState expected = init_model(loaded, 0);
  ModelState s;
  for (const auto& [name, ref] : expected.params) {
    const auto it = blobs.find(name);
    if (it == blobs.end() || it->second.shape() != ref.shape())
      throw std::runtime_error("checkpoint " + dir.string() + " lacks parameter '" + name + "' of shape " +
                               to_string(ref.shape()));
    s.params[name] = it->second;
  }
  for (const auto& [name, ref] : expected.stats) {
    const auto m = blobs.find("running/" + name + "/mean"), v = blobs.find("running/" + name + "/var");
    if (m == blobs.end() || v == blobs.end() || m->second.numel() != ref.mean.size() ||
        v->second.numel() != ref.var.size())
      throw std::runtime_error("checkpoint " + dir.string() + " lacks running statistics '" + name + "'");
    s.stats[name] = RunningStats{{m->second.data().begin(), m->second.data().end()},
                                 {v->second.data().begin(), v->second.data().end()}};
  }
  if (cfg) *cfg = loaded;
  return s;
}

}  // namespace texlora
