#include "texlora/grad_suite.hpp"

#include "texlora/losses.hpp"
#include "texlora/model.hpp"
#include "texlora/random.hpp"
#include "texlora/scene.hpp"

namespace texlora {

namespace {

using Inputs = std::vector<Tensor>;
using Fn = std::function<Tensor(std::span<const Tensor>)>;

// sum(x * w) for fixed random w, so every output element gets a distinct weight.
Tensor weigh(const Tensor& x, std::uint64_t seed = 99) {
  Rng rng(seed);
  return sum(mul(x, rng.uniform_tensor(x.shape(), 0.5, 1.5)));
}

// Uniform values with |x| >= 0.2, away from kinks at zero.
Tensor off_zero(Rng& rng, Shape shape) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.2, 1.0);
  return Tensor(std::move(shape), std::move(v));
}

GradCase make(std::string name, double tol, Fn fn, std::function<Inputs()> inputs, double eps = 1e-5) {
  return {std::move(name), tol, [fn = std::move(fn), inputs = std::move(inputs), eps] {
            return grad_check(fn, inputs(), eps);
          }};
}

}  // namespace

std::vector<GradCase> gradient_suite() {
  std::vector<GradCase> s;
  constexpr double kTol = 1e-4;

  const auto two = [](Shape a, Shape b) {
    return [a, b] {
      Rng rng(1);
      return Inputs{off_zero(rng, a), off_zero(rng, b)};
    };
  };
  const auto one = [](Shape a, double lo = -1.0, double hi = 1.0) {
    return [a, lo, hi] {
      Rng rng(2);
      return Inputs{lo < 0.0 ? off_zero(rng, a) : rng.uniform_tensor(a, lo, hi)};
    };
  };

  // Elementwise and reductions.
  s.push_back(make("add", kTol, [](auto x) { return weigh(add(x[0], x[1])); }, two({3, 4}, {3, 4})));
  s.push_back(make("sub", kTol, [](auto x) { return weigh(sub(x[0], x[1])); }, two({3, 4}, {3, 4})));
  s.push_back(make("mul", kTol, [](auto x) { return weigh(mul(x[0], x[1])); }, two({3, 4}, {3, 4})));
  s.push_back(make("div", kTol, [](auto x) { return weigh(div(x[0], x[1])); }, two({3, 4}, {3, 4})));
  s.push_back(make("add_scalar", kTol, [](auto x) { return weigh(add(x[0], 0.7)); }, one({5})));
  s.push_back(make("scale", kTol, [](auto x) { return weigh(scale(x[0], -1.3)); }, one({5})));
  s.push_back(make("rsub", kTol, [](auto x) { return weigh(rsub(2.0, x[0])); }, one({5})));
  s.push_back(make("relu", kTol, [](auto x) { return weigh(relu(x[0])); }, one({4, 5})));
  s.push_back(make("sigmoid", kTol, [](auto x) { return weigh(sigmoid(x[0])); }, one({4, 5})));
  s.push_back(make("tanh", kTol, [](auto x) { return weigh(tanh(x[0])); }, one({4, 5})));
  s.push_back(make("square", kTol, [](auto x) { return weigh(square(x[0])); }, one({4, 5})));
  s.push_back(make("sqrt", kTol, [](auto x) { return weigh(sqrt(x[0])); }, one({4, 5}, 0.2, 2.0)));
  s.push_back(make("sum", kTol, [](auto x) { return square(sum(x[0])); }, one({3, 4})));
  s.push_back(make("mean", kTol, [](auto x) { return square(mean(x[0])); }, one({3, 4})));

  // Layout.
  s.push_back(make("reshape", kTol, [](auto x) { return weigh(reshape(x[0], {4, 3})); }, one({2, 6})));
  s.push_back(make("permute", kTol, [](auto x) { return weigh(permute(x[0], {2, 0, 1})); }, one({2, 3, 4})));
  s.push_back(make("transpose", kTol, [](auto x) { return weigh(transpose(x[0])); }, one({3, 5})));
  s.push_back(make("broadcast_to", kTol, [](auto x) { return weigh(broadcast_to(x[0], {2, 3, 4})); },
                   one({2, 1, 4})));
  s.push_back(make("slice", kTol, [](auto x) { return weigh(slice(x[0], 1, 1, 2)); }, one({2, 4, 3})));
  s.push_back(make("concat", kTol, [](auto x) { return weigh(concat({x[0], x[1]}, 1)); }, two({2, 3}, {2, 2})));
  s.push_back(make("gather", kTol, [](auto x) { return weigh(gather(x[0], {0, 5, 5, 2, 11})); }, one({3, 4})));

  // Linear algebra and normalization.
  s.push_back(make("matmul", kTol, [](auto x) { return weigh(matmul(x[0], x[1])); }, two({3, 4}, {4, 2})));
  s.push_back(make(
      "spmm", kTol,
      [](auto x) {
        static const SparseMatrix r{3, 4, {0, 2, 2, 5}, {0, 3, 1, 2, 3}, {0.5, 0.5, 0.2, 0.3, 0.5}};
        return weigh(spmm(r, x[0]));
      },
      one({4, 2})));
  s.push_back(make("softmax_lastdim", kTol, [](auto x) { return weigh(softmax_lastdim(x[0])); }, one({3, 5})));
  s.push_back(make("l2_normalize", kTol, [](auto x) { return weigh(l2_normalize(x[0], 1)); }, one({3, 5})));
  s.push_back(make(
      "batchnorm2d", kTol,
      [](auto x) {
        BatchNormOptions bn;
        return weigh(batchnorm2d(x[0], x[1], x[2], bn));
      },
      [] {
        Rng rng(3);
        return Inputs{rng.uniform_tensor({2, 3, 3, 3}, -1, 1), rng.uniform_tensor({3}, 0.5, 1.5),
                      rng.uniform_tensor({3}, -0.5, 0.5)};
      }));

  // Spatial.
  s.push_back(make("conv2d", kTol, [](auto x) { return weigh(conv2d(x[0], x[1], 1, 1)); },
                   two({2, 2, 5, 5}, {3, 2, 3, 3})));
  s.push_back(make("conv2d_stride2", kTol, [](auto x) { return weigh(conv2d(x[0], x[1], 2, 1)); },
                   two({1, 2, 7, 7}, {2, 2, 3, 3})));
  s.push_back(make("avg_pool2x2", kTol, [](auto x) { return weigh(avg_pool2x2(x[0])); }, one({2, 2, 4, 6})));
  s.push_back(make("resample_bilinear", kTol, [](auto x) { return weigh(resample_bilinear(x[0], 7, 5)); },
                   one({1, 2, 4, 3})));
  s.push_back(make(
      "grid_sample", 1e-3, [](auto x) { return weigh(grid_sample(x[0], x[1])); },
      [] {
        Rng rng(4);
        return Inputs{rng.uniform_tensor({1, 2, 5, 6}, 0, 1), rng.uniform_tensor({1, 3, 4, 2}, -0.95, 0.95)};
      }));

  // Attention.
  const auto qkv = [] {
    Rng rng(5);
    return Inputs{rng.uniform_tensor({6, 4}, -1, 1), rng.uniform_tensor({5, 4}, -1, 1),
                  rng.uniform_tensor({5, 3}, -1, 1)};
  };
  s.push_back(make("softmax_attention", kTol, [](auto x) { return weigh(softmax_attention(x[0], x[1], x[2], 2.0)); },
                   qkv));
  s.push_back(make("lora_attention", kTol, [](auto x) { return weigh(lora_attention(x[0], x[1], x[2], 5.0)); }, qkv));

  for (AttentionKernel kernel : {AttentionKernel::softmax, AttentionKernel::lora}) {
    s.push_back(make(
        std::string("transformer_unit_") + to_string(kernel), kTol,
        [kernel](auto x) {
          AttentionConfig cfg;
          cfg.heads = 2;
          cfg.d_key = 4;
          cfg.d_value = 4;
          cfg.kernel = kernel;
          ParamMap params;
          StatsMap stats;
          Rng rng(6);
          init_transformer_params(params, stats, "u", cfg, rng);
          std::size_t i = 3;
          for (auto& [name, t] : params) t = x[i++];
          const PositionalEncoding eq = sinusoidal_pe(2, 3, 4), ek = sinusoidal_pe(2, 2, 4);
          const std::vector<AttentionInputs> batch{{x[0], x[1], x[2]}};
          return weigh(transformer_unit(batch, eq, ek, cfg, LayerContext{params}, "u"));
        },
        [] {
          AttentionConfig cfg;
          cfg.heads = 2;
          cfg.d_key = 4;
          cfg.d_value = 4;
          ParamMap params;
          StatsMap stats;
          Rng rng(6);
          init_transformer_params(params, stats, "u", cfg, rng);
          Rng in(7);
          Inputs x{in.uniform_tensor({6, 4}, -1, 1), in.uniform_tensor({4, 4}, -1, 1), in.uniform_tensor({4, 4}, -1, 1)};
          for (const auto& [name, t] : params) x.push_back(t);
          return x;
        }));
  }

  // Losses.
  s.push_back(make(
      "reid_loss", kTol,
      [](auto x) {
        static const FeatureExtractor fx;
        static const Tensor target = Rng(8).uniform_tensor({2, 3, 8, 8}, 0, 1);
        return reid_loss(x[0], target, fx);
      },
      one({2, 3, 8, 8}, 0.0, 1.0)));
  s.push_back(make(
      "gram", kTol, [](auto x) { return weigh(gram(x[0], x[1])); },
      [] {
        Rng rng(9);
        return Inputs{rng.uniform_tensor({3, 4, 4}, -1, 1), rng.uniform_tensor({1, 4, 4}, 0.1, 1)};
      }));
  s.push_back(make(
      "part_style_loss", kTol,
      [](auto x) {
        static const FeatureExtractor fx;
        static const Tensor target = Rng(10).uniform_tensor({1, 3, 8, 8}, 0, 1);
        std::vector<double> m(2 * 64, 0.0);
        for (std::size_t p = 0; p < 64; ++p) m[(p % 8 < 4 ? 0 : 64) + p] = 1.0;
        const Tensor parts({1, 2, 8, 8}, m);
        return part_style_loss(x[0], target, parts, parts, fx);
      },
      one({1, 3, 8, 8}, 0.0, 1.0)));
  s.push_back(make("ssim_structure", kTol, [](auto x) { return ssim_structure(x[0], x[1]); },
                   two({3, 4, 4}, {3, 4, 4})));
  s.push_back(make(
      "face_structure_loss", kTol,
      [](auto x) {
        static const SyntheticTextureSet set = make_face_set(CapsuleBody{}, 16, 16, 3, 11);
        return face_structure_loss(x[0], set);
      },
      one({16, 16, 3}, 0.0, 1.0)));
  s.push_back(make(
      "total_loss", kTol,
      [](auto x) { return total_loss(square(sum(x[0])), square(sum(x[1])), sum(x[2]), LossWeights{}); },
      [] {
        Rng rng(12);
        return Inputs{rng.uniform_tensor({3}, 0, 0.01), rng.uniform_tensor({3}, 0, 1), rng.uniform_tensor({3}, -1, 0)};
      }));

  // Texture sampling, fusion, rendering and the full model.
  s.push_back(make(
      "sample_texture", 1e-3, [](auto x) { return weigh(sample_texture(x[0], x[1])); },
      [] {
        Rng rng(13);
        return Inputs{rng.uniform_tensor({1, 4, 4, 2}, -0.95, 0.95), rng.uniform_tensor({1, 3, 6, 5}, 0, 1)};
      }));
  s.push_back(make(
      "mask_fusion", kTol, [](auto x) { return weigh(mask_fusion(x[0], x[1], x[2])); },
      [] {
        Rng rng(14);
        return Inputs{rng.uniform_tensor({1, 3, 3, 1}, 0.1, 0.9), rng.uniform_tensor({1, 3, 3, 3}, 0, 1),
                      rng.uniform_tensor({1, 3, 3, 3}, 0, 1)};
      }));
  s.push_back(make(
      "render", kTol,
      [](auto x) {
        static const SyntheticScene scene = generate_scene(0, 16, 16, 16, 16, 1);
        return weigh(render(x[0], scene.views[0]));
      },
      one({16, 16, 3}, 0.0, 1.0), 1e-2));
  s.push_back(make(
      "full_model", 1e-3,
      [](auto x) {
        static const ModelConfig cfg = ModelConfig::micro();
        static const Texformer model(cfg);
        static const ModelState init = init_model(cfg, 15);
        static const ModelInputs in = [] {
          Rng rng(16);
          ModelInputs m;
          m.image = rng.uniform_tensor({2, 3, cfg.img_h, cfg.img_w}, 0, 1);
          std::vector<double> seg(2 * cfg.parts * cfg.img_h * cfg.img_w, 0.0);
          const std::size_t plane = cfg.img_h * cfg.img_w;
          for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t p = 0; p < plane; ++p) seg[(b * cfg.parts + rng.index(cfg.parts)) * plane + p] = 1.0;
          m.part_seg = Tensor({2, cfg.parts, cfg.img_h, cfg.img_w}, seg);
          m.coords = coordinate_grid(cfg.img_h, cfg.img_w);
          m.query = build_query_map(CapsuleBody{}.mesh(), cfg.uv_h, cfg.uv_w);
          return m;
        }();
        ParamMap p;
        std::size_t i = 0;
        for (const auto& [name, t] : init.params) p[name] = x[i++];
        const TexformerOutputs out = model.forward(LayerContext{p}, in);
        return add(add(weigh(out.t_rgb, 1), weigh(out.flow, 2)), weigh(mask_fusion(out, in.image), 3));
      },
      [] {
        Inputs x;
        for (const auto& [name, t] : init_model(ModelConfig::micro(), 15).params) x.push_back(t);
        return x;
      }));
  return s;
}

}  // namespace texlora
