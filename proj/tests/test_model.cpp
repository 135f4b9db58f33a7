#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "test_util.hpp"
#include "texlora/grad_check.hpp"
#include "texlora/model.hpp"

using namespace texlora;
using texlora::testing::max_abs;
using texlora::testing::max_abs_diff;
using texlora::testing::probe;

namespace {

ModelInputs random_inputs(const ModelConfig& cfg, std::size_t batch, std::uint64_t seed) {
  Rng rng(seed);
  ModelInputs in;
  in.image = rng.uniform_tensor({batch, 3, cfg.img_h, cfg.img_w}, 0, 1);
  std::vector<double> seg(batch * cfg.parts * cfg.img_h * cfg.img_w, 0.0);
  const std::size_t plane = cfg.img_h * cfg.img_w;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t label = rng.index(cfg.parts + 1);  // last value means background
      if (label < cfg.parts) seg[(b * cfg.parts + label) * plane + p] = 1.0;
    }
  in.part_seg = Tensor({batch, cfg.parts, cfg.img_h, cfg.img_w}, seg);
  in.coords = coordinate_grid(cfg.img_h, cfg.img_w);
  in.query = build_query_map(CapsuleBody{}.mesh(), cfg.uv_h, cfg.uv_w);
  return in;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

}  // namespace

TEST_CASE("model config") {
  const ModelConfig def = ModelConfig::full();
  CHECK_NOTHROW(def.validate());
  CHECK(def.levels == 3);
  CHECK(def.heads == 8);
  CHECK(def.d == 128);
  CHECK(def.c == 128);
  CHECK(def.kernels == std::vector<AttentionKernel>{AttentionKernel::lora, AttentionKernel::lora,
                                                    AttentionKernel::softmax});
  const std::size_t n = init_model(def, 1).parameter_count();
  MESSAGE("default parameter count " << n);
  CHECK(n < 8'000'000);

  ModelConfig bad = ModelConfig::toy();
  bad.uv_h = 30;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = ModelConfig::toy();
  bad.widths = {8, 8};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  const ModelConfig round = model_config_from_json(to_json(def));
  CHECK(to_json(round) == to_json(def));
}

TEST_CASE("coordinate grid") {
  const Tensor g = coordinate_grid(3, 5);
  CHECK(g.shape() == Shape{1, 2, 3, 5});
  CHECK(g[0] == -1.0);
  CHECK(g[4] == 1.0);
  CHECK(g[15] == -1.0);
  CHECK(g[15 + 14] == 1.0);
  CHECK(g[15 + 7] == 0.0);
}

TEST_CASE("encode_branch shapes and determinism") {
  const ModelConfig cfg = ModelConfig::toy();
  const Texformer model(cfg);
  const ModelState a = init_model(cfg, 7), b = init_model(cfg, 7);
  const ModelInputs in = random_inputs(cfg, 2, 3);
  const Tensor key_in = concat({in.image, in.part_seg}, 1);
  const auto ka = model.encode_branch(LayerContext{a.params}, Branch::key, key_in);
  const auto kb = model.encode_branch(LayerContext{b.params}, Branch::key, key_in);
  REQUIRE(ka.size() == 3);
  for (std::size_t l = 0; l < 3; ++l) {
    CHECK(ka[l].shape() == Shape{2, cfg.d, 32u >> l, 32u >> l});
    CHECK(bit_equal(ka[l], kb[l]));
  }
  const auto va = model.encode_branch(LayerContext{a.params}, Branch::value,
                                      concat({in.image, broadcast_to(in.coords, {2, 2, 32, 32})}, 1));
  CHECK(va[2].shape() == Shape{2, cfg.c, 8, 8});
  CHECK_THROWS_AS(model.encode_branch(LayerContext{a.params}, Branch::key, in.image), TensorError);
}

TEST_CASE("encode_branch gradients match finite differences") {
  const ModelConfig cfg = ModelConfig::micro();
  const Texformer model(cfg);
  const ModelState s = init_model(cfg, 11);
  const ModelInputs in = random_inputs(cfg, 2, 12);
  std::vector<std::string> names;
  std::vector<Tensor> inputs;
  for (const auto& [name, t] : s.params)
    if (name.rfind("key/", 0) == 0) {
      names.push_back(name);
      inputs.push_back(t);
    }
  inputs.push_back(in.image);
  const auto fn = [&](std::span<const Tensor> x) {
    ParamMap p;
    for (std::size_t i = 0; i < names.size(); ++i) p[names[i]] = x[i];
    const auto pyr = model.encode_branch(LayerContext{p}, Branch::key, concat({x.back(), in.part_seg}, 1));
    Tensor total = Tensor::scalar(0.0);
    for (std::size_t l = 0; l < pyr.size(); ++l) total = add(total, probe(pyr[l], 50 + l));
    return total;
  };
  const auto r = grad_check(fn, inputs);
  INFO("worst input " << r.worst_input << " analytic " << r.analytic << " numeric " << r.numeric);
  CHECK(r.max_relative_error < 1e-4);
}

TEST_CASE("forward output ranges and toy forward/backward") {
  const ModelConfig cfg = ModelConfig::toy();
  const Texformer model(cfg);
  ModelState s = init_model(cfg, 5);
  const ModelInputs in = random_inputs(cfg, 2, 6);

  Tape tape;
  ParamMap bound;
  for (const auto& [name, t] : s.params) bound[name] = tape.leaf(t);
  const TexformerOutputs out = model.forward(LayerContext{bound, &s.stats, NormMode::train, true}, in);
  CHECK(out.t_rgb.shape() == Shape{2, 32, 32, 3});
  CHECK(out.flow.shape() == Shape{2, 32, 32, 2});
  CHECK(out.mask.shape() == Shape{2, 32, 32, 1});
  for (double v : out.t_rgb.data()) CHECK((v >= 0.0 && v <= 1.0));
  for (double v : out.flow.data()) CHECK((v >= -1.0 && v <= 1.0));
  for (double v : out.mask.data()) CHECK((v >= 0.0 && v <= 1.0));

  const Tensor fused = mask_fusion(out, in.image);
  const Gradients g = backward(probe(fused));
  for (const auto& [name, t] : bound) CHECK(g.touched(t));

  // Eval mode with the updated running statistics also runs.
  const TexformerOutputs e = model.forward(LayerContext{s.params, &s.stats, NormMode::eval}, in);
  CHECK(e.t_rgb.shape() == out.t_rgb.shape());
}

TEST_CASE("forward is deterministic and the query cache is exact") {
  const ModelConfig cfg = ModelConfig::toy();
  const Texformer model(cfg);
  const ModelState s = init_model(cfg, 8);
  const ModelInputs in = random_inputs(cfg, 1, 9);
  const LayerContext ctx{s.params};
  const TexformerOutputs a = model.forward(ctx, in);
  const TexformerOutputs b = model.forward(ctx, in);
  CHECK(bit_equal(a.t_rgb, b.t_rgb));
  CHECK(bit_equal(a.flow, b.flow));
  CHECK(bit_equal(a.mask, b.mask));

  const QueryCache cache = model.encode_query(ctx, in.query);
  const TexformerOutputs c = model.forward(ctx, in, &cache);
  CHECK(bit_equal(a.t_rgb, c.t_rgb));
  CHECK(bit_equal(a.flow, c.flow));
}

TEST_CASE("every parameter receives gradient at the micro config") {
  const ModelConfig cfg = ModelConfig::micro();
  const Texformer model(cfg);
  const ModelState s = init_model(cfg, 13);
  const ModelInputs in = random_inputs(cfg, 2, 14);
  Tape tape;
  ParamMap bound;
  for (const auto& [name, t] : s.params) bound[name] = tape.leaf(t);
  const TexformerOutputs out = model.forward(LayerContext{bound}, in);
  const Gradients g = backward(probe(mask_fusion(out, in.image)));
  for (const auto& [name, t] : bound) {
    INFO(name);
    CHECK(max_abs(g.of(t)) > 1e-10);
  }
}

TEST_CASE("full model gradient check at the micro config") {
  const ModelConfig cfg = ModelConfig::micro();
  const Texformer model(cfg);
  const ModelState s = init_model(cfg, 15);
  const ModelInputs in = random_inputs(cfg, 2, 16);
  std::vector<std::string> names;
  std::vector<Tensor> inputs;
  for (const auto& [name, t] : s.params) {
    names.push_back(name);
    inputs.push_back(t);
  }
  const auto fn = [&](std::span<const Tensor> x) {
    ParamMap p;
    for (std::size_t i = 0; i < names.size(); ++i) p[names[i]] = x[i];
    const TexformerOutputs out = model.forward(LayerContext{p}, in);
    return add(add(probe(out.t_rgb, 1), probe(out.flow, 2)), probe(mask_fusion(out, in.image), 3));
  };
  const auto r = grad_check(fn, inputs);
  INFO("worst " << names[r.worst_input] << "[" << r.worst_element << "] analytic " << r.analytic << " numeric "
                << r.numeric);
  CHECK(r.max_relative_error < 1e-3);
}

TEST_CASE("sample_texture") {
  Rng rng(17);
  const Tensor image = rng.uniform_tensor({1, 3, 5, 4}, 0, 1);
  // Exact pixel coordinates reproduce the image.
  const Tensor grid = coordinate_grid(5, 4);
  const Tensor flow = permute(grid, {0, 2, 3, 1});
  const Tensor same = sample_texture(flow, image);
  CHECK(max_abs_diff(same, permute(image, {0, 2, 3, 1})) < 1e-15);

  const Tensor corner = sample_texture(Tensor::full({1, 2, 3, 2}, -1.0), image);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t c = 0; c < 3; ++c) CHECK(corner[i * 3 + c] == image[c * 20]);

  // Interior points, away from pixel boundaries.
  std::vector<double> pts;
  for (int i = 0; i < 12; ++i) {
    const double x = -1.0 + 2.0 * (rng.index(3) + rng.uniform(0.2, 0.8)) / 3.0;
    const double y = -1.0 + 2.0 * (rng.index(4) + rng.uniform(0.2, 0.8)) / 4.0;
    pts.push_back(x);
    pts.push_back(y);
  }
  const Tensor f0({1, 3, 4, 2}, pts);
  const auto r = grad_check(
      [](std::span<const Tensor> x) { return probe(sample_texture(x[0], x[1])); },
      std::vector<Tensor>{f0, image});
  CHECK(r.max_relative_error < 1e-3);
}

TEST_CASE("mask fusion") {
  Rng rng(18);
  const Tensor s = rng.uniform_tensor({1, 4, 4, 3}, 0, 1), t = rng.uniform_tensor({1, 4, 4, 3}, 0, 1);
  CHECK(bit_equal(mask_fusion(Tensor::ones({1, 4, 4, 1}), s, t), s));
  CHECK(bit_equal(mask_fusion(Tensor::zeros({1, 4, 4, 1}), s, t), t));
  const Tensor half = mask_fusion(Tensor::full({1, 1, 1, 1}, 0.5), Tensor::ones({1, 1, 1, 3}),
                                  Tensor::zeros({1, 1, 1, 3}));
  for (double v : half.data()) CHECK(v == 0.5);

  for (int instance = 0; instance < 100; ++instance) {
    const Tensor m = rng.uniform_tensor({2, 3, 5, 1}, 0, 1);
    const Tensor a = rng.uniform_tensor({2, 3, 5, 3}, 0, 1), b = rng.uniform_tensor({2, 3, 5, 3}, 0, 1);
    const Tensor f = mask_fusion(m, a, b);
    for (std::size_t k = 0; k < f.numel(); ++k) {
      CHECK(f[k] >= std::min(a[k], b[k]));
      CHECK(f[k] <= std::max(a[k], b[k]));
    }
  }
  const auto r = grad_check(
      [](std::span<const Tensor> x) { return probe(mask_fusion(x[0], x[1], x[2])); },
      std::vector<Tensor>{rng.uniform_tensor({1, 2, 2, 1}, 0.1, 0.9), rng.uniform_tensor({1, 2, 2, 3}, 0, 1),
                          rng.uniform_tensor({1, 2, 2, 3}, 0, 1)});
  CHECK(r.max_relative_error < 1e-6);
  CHECK_THROWS_AS(mask_fusion(Tensor::ones({1, 4, 4, 1}), s, Tensor::zeros({1, 4, 4, 2})), TensorError);
}

TEST_CASE("checkpoint round trip") {
  const ModelConfig cfg = ModelConfig::micro();
  const ModelState s = init_model(cfg, 19);
  const auto dir = std::filesystem::temp_directory_path() / "texlora_test_ckpt";
  std::filesystem::remove_all(dir);
  save_model(dir, cfg, s);
  ModelConfig loaded_cfg;
  const ModelState l = load_model(dir, &loaded_cfg);
  CHECK(to_json(loaded_cfg) == to_json(cfg));
  for (const auto& [name, t] : s.params) CHECK(bit_equal(t, l.params.at(name)));
  for (const auto& [name, st] : s.stats) CHECK(st.var == l.stats.at(name).var);
  std::filesystem::remove_all(dir);
}
