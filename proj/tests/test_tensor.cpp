#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sstream>

#include "test_util.hpp"
#include "texlora/grad_check.hpp"
#include "texlora/serialize.hpp"

using namespace texlora;
using texlora::testing::max_abs_diff;
using texlora::testing::probe;

namespace {

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return Tensor({m, n}, c);
}

Tensor naive_conv(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), k = w.dim(2);
  const std::size_t oh = (H + 2 * pad - k) / stride + 1, ow = (W + 2 * pad - k) / stride + 1;
  std::vector<double> out(B * O * oh * ow, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xo = 0; xo < ow; ++xo)
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < k; ++i)
              for (std::size_t j = 0; j < k; ++j) {
                const long iy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
                const long ix = static_cast<long>(xo * stride + j) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                out[((b * O + o) * oh + y) * ow + xo] +=
                    w[((o * C + c) * k + i) * k + j] *
                    x[((b * C + c) * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)];
              }
  return Tensor({B, O, oh, ow}, out);
}

}  // namespace

TEST_CASE("elementwise examples") {
  const Tensor a({2}, {1, 2}), b({2}, {3, 4});
  CHECK(mul(a, b)[0] == 3);
  CHECK(mul(a, b)[1] == 8);
  const Tensor x({3}, {0.25, -1.5, 7});
  CHECK(max_abs_diff(add(x, 0.0), x) == 0.0);
  CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
  CHECK(elementwise(Elementwise::relu, Tensor({2}, {-1, 2}), 0.0)[0] == 0.0);
  CHECK(elementwise(Elementwise::scale, a, 3.0)[1] == 6.0);
}

TEST_CASE("elementwise errors name both shapes") {
  const Tensor a = Tensor::zeros({2, 3}), b = Tensor::zeros({3, 2});
  try {
    (void)add(a, b);
    FAIL("expected throw");
  } catch (const TensorError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[3,2]") != std::string::npos);
  }
  CHECK_THROWS_AS(div(Tensor({2}, {1, 1}), Tensor({2}, {1, 0})), TensorError);
  CHECK_THROWS_AS(elementwise(Elementwise::div, a, 0.0), TensorError);
}

TEST_CASE("matmul examples and oracle") {
  const Tensor b({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(max_abs_diff(matmul(Tensor({2, 2}, {1, 0, 0, 1}), b), b) == 0.0);
  const Tensor c = matmul(Tensor({2, 2}, {1, 2, 3, 4}), Tensor({2, 1}, {5, 6}));
  CHECK(c[0] == 17);
  CHECK(c[1] == 39);

  Rng rng(1);
  const Tensor x = rng.uniform_tensor({3, 4}, -1, 1), y = rng.uniform_tensor({4, 2}, -1, 1);
  CHECK(max_abs_diff(matmul(x, y), naive_matmul(x, y)) < 1e-14);
  CHECK_THROWS_AS(matmul(x, x), TensorError);
}

TEST_CASE("matmul associativity") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng.index(9), k = 1 + rng.index(9), n = 1 + rng.index(9), p = 1 + rng.index(9);
    const Tensor a = rng.uniform_tensor({m, k}, -1, 1), b = rng.uniform_tensor({k, n}, -1, 1),
                 c = rng.uniform_tensor({n, p}, -1, 1);
    const Tensor left = matmul(matmul(a, b), c), right = matmul(a, matmul(b, c));
    CHECK(max_abs_diff(left, right) / texlora::testing::max_abs(right) < 1e-10);
  }
}

TEST_CASE("softmax examples and properties") {
  const Tensor half = softmax_lastdim(Tensor({2}, {0, 0}));
  CHECK(half[0] == 0.5);
  CHECK(half[1] == 0.5);
  const Tensor big = softmax_lastdim(Tensor({2}, {1000, 0}));
  CHECK(big[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(big[1] >= 0.0);
  CHECK(big[1] < 1e-300);

  const Tensor s = softmax_lastdim(Tensor({3}, {1, 2, 3}));
  long double z = 0;
  for (int i = 1; i <= 3; ++i) z += std::exp(static_cast<long double>(i));
  for (int i = 1; i <= 3; ++i)
    CHECK(std::abs(s[static_cast<std::size_t>(i - 1)] - static_cast<double>(std::exp(static_cast<long double>(i)) / z)) < 1e-15);

  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t rows = 1 + rng.index(5), len = 1 + rng.index(12);
    const Tensor x = rng.uniform_tensor({rows, len}, -5, 5);
    const Tensor y = softmax_lastdim(x);
    const Tensor shifted = softmax_lastdim(add(x, rng.uniform(-50, 50)));
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        CHECK(y[r * len + j] >= 0.0);
        total += y[r * len + j];
      }
      CHECK(std::abs(total - 1.0) < 1e-9);
    }
    CHECK(max_abs_diff(y, shifted) < 1e-9);
  }
}

TEST_CASE("conv2d examples and oracle") {
  Rng rng(4);
  const Tensor x = rng.uniform_tensor({2, 3, 5, 5}, -1, 1);
  Tensor ident_w = Tensor::zeros({3, 3, 1, 1});
  {
    std::vector<double> w(9, 0.0);
    for (std::size_t c = 0; c < 3; ++c) w[c * 3 + c] = 1.0;
    ident_w = Tensor({3, 3, 1, 1}, w);
  }
  CHECK(max_abs_diff(conv2d(x, ident_w, 1, 0), x) == 0.0);

  const Tensor ones = conv2d(Tensor::ones({1, 1, 3, 3}), Tensor::ones({1, 1, 3, 3}), 1, 1);
  CHECK(ones[4] == 9.0);
  CHECK(ones[0] == 4.0);

  const Tensor w = rng.uniform_tensor({4, 3, 3, 3}, -1, 1);
  CHECK(max_abs_diff(conv2d(x, w, 1, 1), naive_conv(x, w, 1, 1)) < 1e-13);
  CHECK(max_abs_diff(conv2d(x, w, 2, 1), naive_conv(x, w, 2, 1)) < 1e-13);
  CHECK(max_abs_diff(conv2d(x, w, 1, 0), naive_conv(x, w, 1, 0)) < 1e-13);

  CHECK_THROWS_AS(conv2d(Tensor::ones({1, 3, 6, 6}), w, 2, 1), TensorError);
  CHECK_THROWS_AS(conv2d(x, Tensor::ones({1, 3, 2, 2}), 1, 0), TensorError);
  CHECK_THROWS_AS(conv2d(x, Tensor::ones({1, 2, 3, 3}), 1, 1), TensorError);
}

TEST_CASE("batchnorm2d examples") {
  const Tensor gamma({2}, {1.5, 0.5}), beta({2}, {0.25, -2.0});
  const Tensor constant = Tensor::full({3, 2, 2, 2}, 4.0);
  const Tensor y = batchnorm2d(constant, gamma, beta, {});
  for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y[i] == beta[(i / 4) % 2]);

  // zero-mean, unit-variance channel: {-1, 1} repeated
  const Tensor unit({2, 1, 1, 2}, {-1, 1, 1, -1});
  const Tensor yu = batchnorm2d(unit, Tensor::ones({1}), Tensor::zeros({1}), {});
  CHECK(max_abs_diff(yu, unit) < 1e-5);

  Rng rng(5);
  const Tensor x = rng.uniform_tensor({4, 3, 5, 5}, -10, 10);
  const Tensor z = batchnorm2d(x, Tensor::ones({3}), Tensor::zeros({3}), {});
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0.0, v = 0.0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 25; ++i) m += z[(b * 3 + c) * 25 + i];
    m /= 100.0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 25; ++i) v += std::pow(z[(b * 3 + c) * 25 + i] - m, 2);
    v /= 100.0;
    CHECK(std::abs(m) < 1e-6);
    CHECK(std::abs(v - 1.0) < 1e-6);
  }
  CHECK_THROWS_AS(batchnorm2d(x, Tensor::ones({2}), Tensor::zeros({3}), {}), TensorError);
}

TEST_CASE("batchnorm2d running statistics") {
  Rng rng(6);
  const Tensor x = rng.uniform_tensor({2, 2, 3, 3}, 0, 4);
  RunningStats stats = RunningStats::identity(2);
  (void)batchnorm2d(x, Tensor::ones({2}), Tensor::zeros({2}), {NormMode::train, 1e-5, 0.1, &stats});
  double m0 = 0.0;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 9; ++i) m0 += x[(b * 2) * 9 + i];
  m0 /= 18.0;
  CHECK(stats.mean[0] == doctest::Approx(0.1 * m0).epsilon(1e-12));

  const Tensor e = batchnorm2d(x, Tensor::ones({2}), Tensor::zeros({2}), {NormMode::eval, 1e-5, 0.1, &stats});
  CHECK(e[0] == doctest::Approx((x[0] - stats.mean[0]) / std::sqrt(stats.var[0] + 1e-5)));
  CHECK_THROWS_AS(batchnorm2d(x, Tensor::ones({2}), Tensor::zeros({2}), {NormMode::eval}), TensorError);
}

TEST_CASE("resample_bilinear") {
  Rng rng(7);
  const Tensor x = rng.uniform_tensor({1, 2, 4, 5}, -1, 1);
  CHECK(max_abs_diff(resample_bilinear(x, 4, 5), x) == 0.0);
  const Tensor up = resample_bilinear(Tensor({1, 1, 2, 2}, {0, 1, 2, 3}), 3, 3);
  CHECK(up[4] == 1.5);

  const Tensor big = rng.uniform_tensor({1, 1, 7, 9}, -1, 1);
  const Tensor down = resample_bilinear(big, 4, 3);
  for (std::size_t oy = 0; oy < 4; ++oy)
    for (std::size_t ox = 0; ox < 3; ++ox) {
      const double sy = oy * 6.0 / 3.0, sx = ox * 8.0 / 2.0;
      const auto y0 = static_cast<std::size_t>(sy), x0 = static_cast<std::size_t>(sx);
      const std::size_t y1 = std::min<std::size_t>(y0 + 1, 6), x1 = std::min<std::size_t>(x0 + 1, 8);
      const double fy = sy - y0, fx = sx - x0;
      auto at = [&](std::size_t y, std::size_t xx) { return big[y * 9 + xx]; };
      const double expect = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
                            fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
      CHECK(std::abs(down[oy * 3 + ox] - expect) < 1e-14);
    }
}

TEST_CASE("l2_normalize") {
  const Tensor v = l2_normalize(Tensor({2}, {3, 4}), 0);
  CHECK(v[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(v[1] == doctest::Approx(0.8).epsilon(1e-15));
  const Tensor u({3}, {0, 1, 0});
  CHECK(max_abs_diff(l2_normalize(u, 0), u) < 1e-15);

  Rng rng(8);
  const Tensor r = rng.uniform_tensor({3, 7, 2}, -1, 1);
  const Tensor n = l2_normalize(r, 1);
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t in = 0; in < 2; ++in) {
      double ss = 0.0;
      for (std::size_t l = 0; l < 7; ++l) ss += std::pow(n[(o * 7 + l) * 2 + in], 2);
      CHECK(std::abs(std::sqrt(ss) - 1.0) < 1e-9);
    }
}

TEST_CASE("backward basics") {
  Tape tape;
  const Tensor x = tape.leaf(Tensor({3}, {1, -2, 3}));
  const Tensor unused = tape.leaf(Tensor({2}, {5, 6}));
  const Gradients g1 = backward(sum(x));
  CHECK(max_abs_diff(g1.of(x), Tensor::ones({3})) == 0.0);
  CHECK(max_abs_diff(g1.of(unused), Tensor::zeros({2})) == 0.0);
  CHECK_FALSE(g1.touched(unused));

  const Gradients g2 = backward(sum(mul(x, x)));
  CHECK(max_abs_diff(g2.of(x), scale(x.detach(), 2.0)) == 0.0);

  CHECK_THROWS_AS(backward(x), TensorError);
  CHECK_THROWS_AS(backward(sum(Tensor({1}, {1}))), TensorError);

  Tape other;
  const Tensor y = other.leaf(Tensor({3}, {1, 1, 1}));
  CHECK_THROWS_AS(add(x, y), TensorError);
}

TEST_CASE("backward through shared subexpressions") {
  Rng rng(9);
  const Tensor x0 = rng.uniform_tensor({4}, -1, 1);
  const ScalarFn f = [](std::span<const Tensor> in) {
    const Tensor s = sigmoid(in[0]);
    const Tensor t = mul(s, s);
    return sum(add(mul(t, s), tanh(add(s, t))));
  };
  const auto r = grad_check(f, std::vector<Tensor>{x0});
  CHECK(r.max_relative_error < 1e-4);
}

TEST_CASE("grad_check examples") {
  Rng rng(10);
  const Tensor x = rng.uniform_tensor({5}, -1, 1);
  const Tensor w = rng.uniform_tensor({5}, -1, 1);
  const auto linear = grad_check([&](std::span<const Tensor> in) { return sum(mul(in[0], w)); },
                                 std::vector<Tensor>{x});
  CHECK(linear.max_relative_error < 1e-8);

  const Tensor logits = rng.uniform_tensor({3, 4}, -1, 1);
  const auto sm = grad_check([](std::span<const Tensor> in) { return probe(softmax_lastdim(in[0])); },
                             std::vector<Tensor>{logits});
  CHECK(sm.max_relative_error < 1e-4);

  const Tensor img = rng.uniform_tensor({1, 2, 5, 5}, -1, 1), ker = rng.uniform_tensor({3, 2, 3, 3}, -1, 1);
  const auto cv = grad_check([](std::span<const Tensor> in) { return probe(conv2d(in[0], in[1], 1, 1)); },
                             std::vector<Tensor>{img, ker});
  CHECK(cv.max_relative_error < 1e-4);

  CHECK_THROWS_AS(grad_check([](std::span<const Tensor> in) { return div(in[0], in[0]); },
                             std::vector<Tensor>{Tensor({2}, {1, 2})}),
                  TensorError);
  CHECK_THROWS_AS(grad_check([](std::span<const Tensor> in) { return scale(sum(in[0]), INFINITY); },
                             std::vector<Tensor>{Tensor({2}, {1, 2})}),
                  TensorError);
}

TEST_CASE("every op matches finite differences") {
  Rng rng(11);
  auto u = [&](Shape s) { return rng.uniform_tensor(std::move(s), -1, 1); };
  auto pos = [&](Shape s) { return rng.uniform_tensor(std::move(s), 0.5, 1.5); };
  SparseMatrix sp;
  sp.rows = 3;
  sp.cols = 4;
  sp.row_ptr = {0, 2, 2, 5};
  sp.col_idx = {0, 3, 1, 2, 3};
  sp.values = {0.25, 0.75, 0.5, 0.3, 0.2};

  struct Case {
    const char* name;
    ScalarFn f;
    std::vector<Tensor> inputs;
  };
  const std::vector<Case> cases = {
      {"add", [](auto in) { return probe(add(in[0], in[1])); }, {u({2, 3}), u({2, 3})}},
      {"sub", [](auto in) { return probe(sub(in[0], in[1])); }, {u({2, 3}), u({2, 3})}},
      {"mul", [](auto in) { return probe(mul(in[0], in[1])); }, {u({2, 3}), u({2, 3})}},
      {"div", [](auto in) { return probe(div(in[0], in[1])); }, {u({2, 3}), pos({2, 3})}},
      {"relu", [](auto in) { return probe(relu(in[0])); }, {u({7})}},
      {"sigmoid", [](auto in) { return probe(sigmoid(in[0])); }, {u({7})}},
      {"tanh", [](auto in) { return probe(tanh(in[0])); }, {u({7})}},
      {"scale", [](auto in) { return probe(scale(in[0], -2.5)); }, {u({7})}},
      {"rsub", [](auto in) { return probe(rsub(1.0, in[0])); }, {u({7})}},
      {"square", [](auto in) { return probe(square(in[0])); }, {u({7})}},
      {"sqrt", [](auto in) { return probe(sqrt(in[0])); }, {pos({7})}},
      {"mean", [](auto in) { return mean(in[0]); }, {u({3, 3})}},
      {"matmul", [](auto in) { return probe(matmul(in[0], in[1])); }, {u({3, 4}), u({4, 2})}},
      {"permute", [](auto in) { return probe(permute(in[0], {2, 0, 1})); }, {u({2, 3, 4})}},
      {"broadcast", [](auto in) { return probe(broadcast_to(in[0], {3, 4, 2})); }, {u({1, 4, 1})}},
      {"slice", [](auto in) { return probe(slice(in[0], 1, 1, 2)); }, {u({2, 4, 3})}},
      {"concat", [](auto in) { return probe(concat({in[0], in[1]}, 1)); }, {u({2, 1, 3}), u({2, 2, 3})}},
      {"gather", [](auto in) { return probe(gather(in[0], {4, 0, 4, 2})); }, {u({5})}},
      {"softmax", [](auto in) { return probe(softmax_lastdim(in[0])); }, {u({3, 5})}},
      {"l2_normalize", [](auto in) { return probe(l2_normalize(in[0], 1)); }, {u({2, 4, 3})}},
      {"batchnorm_train",
       [](auto in) { return probe(batchnorm2d(in[0], in[1], in[2], {})); },
       {u({2, 3, 2, 2}), pos({3}), u({3})}},
      {"conv2d_stride2", [](auto in) { return probe(conv2d(in[0], in[1], 2, 1)); }, {u({1, 2, 5, 5}), u({2, 2, 3, 3})}},
      {"avg_pool", [](auto in) { return probe(avg_pool2x2(in[0])); }, {u({1, 2, 4, 4})}},
      {"resample", [](auto in) { return probe(resample_bilinear(in[0], 5, 3)); }, {u({1, 2, 3, 4})}},
      {"grid_sample", [](auto in) { return probe(grid_sample(in[0], in[1])); },
       {u({1, 2, 4, 5}), rng.uniform_tensor({1, 3, 2, 2}, -0.9, 0.9)}},
      {"spmm", [&sp](auto in) { return probe(spmm(sp, in[0])); }, {u({4, 2})}},
      {"reshape", [](auto in) { return probe(reshape(in[0], {6})); }, {u({2, 3})}},
  };
  for (const auto& c : cases) {
    CAPTURE(c.name);
    const auto r = grad_check(c.f, c.inputs);
    CHECK(r.max_relative_error < 1e-4);
  }

  // Eval-mode batchnorm against fixed running statistics.
  RunningStats stats{{0.1, -0.2}, {0.8, 1.3}};
  const auto r = grad_check(
      [&stats](std::span<const Tensor> in) {
        return probe(batchnorm2d(in[0], in[1], in[2], {NormMode::eval, 1e-5, 0.1, &stats}));
      },
      std::vector<Tensor>{u({2, 2, 3}), pos({2}), u({2})});
  CHECK(r.max_relative_error < 1e-4);
}

TEST_CASE("tensor blob format") {
  const Tensor t({2, 3}, {1.5, -2, 3, 4, 5, 6.25});
  std::stringstream ss;
  write_tensor(ss, t);
  const std::string bytes = ss.str();
  REQUIRE(bytes.size() == 4 + 4 + 2 * 4 + 4 + 6 * 8);
  CHECK(bytes.substr(0, 4) == "TXT0");
  CHECK(bytes[4] == 2);
  CHECK(bytes[8] == 2);
  CHECK(bytes[12] == 3);
  CHECK(bytes[16] == 1);
  // 1.5 = 0x3FF8000000000000, little-endian
  CHECK(static_cast<unsigned char>(bytes[27]) == 0x3F);
  CHECK(static_cast<unsigned char>(bytes[26]) == 0xF8);

  const Tensor back = read_tensor(ss);
  CHECK(back.shape() == t.shape());
  CHECK(max_abs_diff(back, t) == 0.0);

  std::stringstream bad("XXXX");
  CHECK_THROWS_AS(read_tensor(bad), TensorError);

  std::stringstream sc;
  write_tensor(sc, Tensor::scalar(3.0));
  CHECK(read_tensor(sc).item() == 3.0);
}

TEST_CASE("construction invariants") {
  CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), TensorError);
  CHECK_THROWS_AS(Tensor({0}, {}), TensorError);
  CHECK_THROWS_AS(reshape(Tensor::zeros({2, 3}), {4}), TensorError);
  CHECK_THROWS_AS(slice(Tensor::zeros({2, 3}), 1, 2, 2), TensorError);
  CHECK_THROWS_AS(broadcast_to(Tensor::zeros({2, 3}), {4, 3}), TensorError);
}
