// Acceptance run: one PASS/FAIL line per criterion; exit status is nonzero
// when any criterion fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>

#include "texlora/bench.hpp"
#include "texlora/grad_suite.hpp"
#include "texlora/train.hpp"

using namespace texlora;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int g_failed = 0;

void report(int id, const char* name, bool ok, const std::string& detail) {
  std::printf("%s criterion %d (%s): %s\n", ok ? "PASS" : "FAIL", id, name, detail.c_str());
  std::fflush(stdout);
  g_failed += !ok;
}

template <class... Args>
std::string fmt(const char* f, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---- 1 ---------------------------------------------------------------------

void gradients() {
  const auto t0 = Clock::now();
  std::size_t passed = 0, total = 0;
  std::string worst;
  double worst_ratio = 0.0;
  for (const GradCase& c : gradient_suite()) {
    const GradCheckResult r = c.run();
    ++total;
    passed += r.max_relative_error < c.tolerance;
    if (r.max_relative_error / c.tolerance > worst_ratio) {
      worst_ratio = r.max_relative_error / c.tolerance;
      worst = fmt("%s %.2e", c.name.c_str(), r.max_relative_error);
    }
  }
  const double secs = seconds_since(t0);
  report(1, "gradient suite", passed == total && secs < 120.0,
         fmt("%zu/%zu cases, closest to tolerance: %s, %.1f s", passed, total, worst.c_str(), secs));
}

// ---- 2 ---------------------------------------------------------------------

std::vector<long double> softmax_oracle(const Tensor& q, const Tensor& k, const Tensor& v, double alpha,
                                        std::vector<long double>* weights) {
  const std::size_t n = q.dim(0), m = k.dim(0), d = q.dim(1), c = v.dim(1);
  std::vector<long double> out(n * c, 0.0L);
  weights->assign(n * m, 0.0L);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<long double> s(m);
    for (std::size_t j = 0; j < m; ++j) {
      long double dot = 0.0L;
      for (std::size_t a = 0; a < d; ++a) dot += static_cast<long double>(q[i * d + a]) * k[j * d + a];
      s[j] = dot / alpha;
    }
    const long double mx = *std::max_element(s.begin(), s.end());
    long double z = 0.0L;
    for (long double& x : s) z += (x = std::exp(x - mx));
    for (std::size_t j = 0; j < m; ++j) {
      (*weights)[i * m + j] = s[j] / z;
      for (std::size_t a = 0; a < c; ++a) out[i * c + a] += s[j] / z * v[j * c + a];
    }
  }
  return out;
}

void attention_correctness() {
  Rng rng(2024);
  double worst_out = 0.0, worst_sum = 0.0, min_w = 1.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.index(12), m = 1 + rng.index(12), d = 1 + rng.index(8), c = 1 + rng.index(6);
    const Tensor q = rng.uniform_tensor({n, d}, -2, 2), k = rng.uniform_tensor({m, d}, -2, 2);
    const Tensor v = rng.uniform_tensor({m, c}, -2, 2);
    const double alpha = rng.uniform(0.5, 3.0);
    std::vector<long double> w;
    const auto oracle = softmax_oracle(q, k, v, alpha, &w);
    const Tensor out = softmax_attention(q, k, v, alpha);
    for (std::size_t i = 0; i < out.numel(); ++i)
      worst_out = std::max(worst_out, static_cast<double>(std::abs(out[i] - oracle[i])));
    // With V = I the output rows are the attention weights themselves.
    std::vector<double> eye(m * m, 0.0);
    for (std::size_t j = 0; j < m; ++j) eye[j * m + j] = 1.0;
    const Tensor weights = softmax_attention(q, k, Tensor({m, m}, eye), alpha);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        s += weights[i * m + j];
        min_w = std::min(min_w, weights[i * m + j]);
        worst_out = std::max(worst_out, static_cast<double>(std::abs(weights[i * m + j] - w[i * m + j])));
      }
      worst_sum = std::max(worst_sum, std::abs(s - 1.0));
    }
  }
  report(2, "attention correctness", worst_out <= 1e-12 && worst_sum <= 1e-9 && min_w >= 0.0,
         fmt("100 instances, max |out - oracle| %.2e, max |row sum - 1| %.2e, min weight %.2e", worst_out, worst_sum,
             min_w));
}

// ---- 3 ---------------------------------------------------------------------

void lora_claim() {
  const auto t0 = Clock::now();
  Rng rng(7);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.index(20), m = 1 + rng.index(20), d = 1 + rng.index(8), c = 1 + rng.index(8);
    const Tensor q = rng.uniform_tensor({n, d}, -1, 1), k = rng.uniform_tensor({m, d}, -1, 1);
    const Tensor v = rng.uniform_tensor({m, c}, -1, 1);
    const double alpha = static_cast<double>(m);
    const Tensor fast = lora_attention(q, k, v, alpha);
    // Naive order: form the full vu x hw product first.
    const Tensor naive = scale(matmul(matmul(q, transpose(k)), v), 1.0 / alpha);
    double scale_ref = 0.0;
    for (double x : naive.data()) scale_ref = std::max(scale_ref, std::abs(x));
    for (std::size_t i = 0; i < fast.numel(); ++i)
      worst = std::max(worst, std::abs(fast[i] - naive[i]) / std::max(scale_ref, 1e-300));
  }
  const bench::BenchSize size{4096, 4096, 64, 64};
  const auto soft = bench::bench_attention({size}, AttentionKernel::softmax, 3).front();
  const auto lora = bench::bench_attention({size}, AttentionKernel::lora, 3).front();
  const double ratio = lora.peak_meas ? static_cast<double>(soft.peak_meas) / static_cast<double>(lora.peak_meas) : 0.0;
  const double tol = static_cast<double>(bench::buffer_tolerance(size, 4));
  const bool within = std::abs(static_cast<double>(lora.peak_meas) - static_cast<double>(lora.peak_pred)) <= tol &&
                      std::abs(static_cast<double>(soft.peak_meas) - static_cast<double>(soft.peak_pred)) <= tol;
  const double secs = seconds_since(t0);
  report(3, "low-rank equivalence and memory", worst <= 1e-12 && soft.feasible && lora.feasible && ratio >= 32.0 &&
                                                   lora.time_ms < soft.time_ms && within && secs < 60.0,
         fmt("reorder rel err %.2e; peak %zu vs %zu bytes (ratio %.1fx, predicted %zu vs %zu); time %.1f vs %.1f ms; "
             "%.1f s",
             worst, soft.peak_meas, lora.peak_meas, ratio, soft.peak_pred, lora.peak_pred, soft.time_ms, lora.time_ms,
             secs));
}

// ---- 4 ---------------------------------------------------------------------

void fusion() {
  Rng rng(4);
  const Shape img{1, 5, 6, 3}, msk{1, 5, 6, 1};
  const Tensor a = rng.uniform_tensor(img, 0, 1), b = rng.uniform_tensor(img, 0, 1);
  const bool ones = std::equal(a.data().begin(), a.data().end(), mask_fusion(Tensor::ones(msk), a, b).data().begin());
  const bool zeros = std::equal(b.data().begin(), b.data().end(), mask_fusion(Tensor::zeros(msk), a, b).data().begin());
  std::size_t violations = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t h = 1 + rng.index(8), w = 1 + rng.index(8);
    const Tensor m = rng.uniform_tensor({2, h, w, 1}, 0, 1);
    const Tensor s = rng.uniform_tensor({2, h, w, 3}, -3, 3), t = rng.uniform_tensor({2, h, w, 3}, -3, 3);
    const Tensor f = mask_fusion(m, s, t);
    for (std::size_t i = 0; i < f.numel(); ++i)
      violations += f[i] < std::min(s[i], t[i]) || f[i] > std::max(s[i], t[i]);
  }
  report(4, "mask fusion", ones && zeros && violations == 0,
         fmt("M=1 exact %s, M=0 exact %s, hull violations %zu over 100 instances", ones ? "yes" : "no",
             zeros ? "yes" : "no", violations));
}

// ---- 5 ---------------------------------------------------------------------

void loss_identities() {
  Rng rng(5);
  const FeatureExtractor fx;
  const Tensor x = rng.uniform_tensor({2, 3, 16, 16}, 0, 1);
  const double reid = reid_loss(x, x, fx).item();

  std::vector<double> pm(2 * 256, 0.0);
  for (std::size_t p = 0; p < 256; ++p) pm[(p % 16 < 7 ? 0 : 256) + p] = 1.0;
  const Tensor parts = broadcast_to(Tensor({1, 2, 16, 16}, pm), {2, 2, 16, 16});
  const double style_same = part_style_loss(x, x, parts, parts, fx).item();

  // Gram matrices ignore where features sit: permuting pixels together with
  // the mask leaves them unchanged.
  const Tensor f = rng.uniform_tensor({4, 6, 5}, -1, 1), m = rng.uniform_tensor({1, 6, 5}, 0, 1);
  std::vector<std::size_t> perm(30);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[rng.index(i + 1)]);
  std::vector<std::size_t> fidx;
  for (std::size_t ch = 0; ch < 4; ++ch)
    for (std::size_t p : perm) fidx.push_back(ch * 30 + p);
  const Tensor gp = gram(reshape(gather(f, fidx), {4, 6, 5}), reshape(gather(m, perm), {1, 6, 5}));
  const Tensor g0 = gram(f, m);
  double perm_gap = 0.0;
  for (std::size_t i = 0; i < g0.numel(); ++i) perm_gap = std::max(perm_gap, std::abs(g0[i] - gp[i]));

  const Tensor t = rng.uniform_tensor({8, 8, 3}, 0, 1);
  const double s_self = ssim_structure(t, t).item();
  SyntheticTextureSet one;
  one.textures = {t};
  one.face_mask = Tensor::ones({8, 8});
  const double face = face_structure_loss(t, one).item();
  const double total =
      total_loss(Tensor::scalar(0.001), Tensor::scalar(0.1), Tensor::scalar(-0.9), LossWeights{}).item();

  report(5, "loss identities",
         reid == 0.0 && style_same == 0.0 && perm_gap <= 1e-10 && s_self == 1.0 && face == -1.0 && total == 5.031,
         fmt("reid(x,x) %g, style(x,x) %g, gram permutation gap %.1e, s(x,x) %.17g, face %.17g, total %.17g", reid,
             style_same, perm_gap, s_self, face, total));
}

// ---- 6 and 7 ---------------------------------------------------------------

void toy_overfit(const fs::path& out) {
  const auto t0 = Clock::now();
  TrainConfig cfg;
  cfg.steps = 500;
  cfg.seed = 0;
  const TrainResult r = train_to_dir(cfg, out / "toy_run");
  const double secs = seconds_since(t0);
  const StepMetrics& first = r.history.front();
  const StepMetrics& last = r.history.back();
  const double drop = 1.0 - last.visible_l1 / first.visible_l1;
  report(6, "toy overfit", last.step == 500 && last.total < first.total && drop >= 0.5 && secs < 900.0,
         fmt("total %.4g -> %.4g, visible-texel L1 %.4f -> %.4f (%.1f%% lower), %.0f s", first.total, last.total,
             first.visible_l1, last.visible_l1, 100.0 * drop, secs));
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

void determinism(const fs::path& out) {
  TrainConfig cfg;
  cfg.steps = 10;
  cfg.seed = 3;
  train_to_dir(cfg, out / "det_a");
  train_to_dir(cfg, out / "det_b");
  const std::string a = slurp(out / "det_a" / "metrics.csv"), b = slurp(out / "det_b" / "metrics.csv");
  report(7, "determinism", !a.empty() && a == b,
         fmt("two 10-step runs, metrics.csv %zu and %zu bytes, %s", a.size(), b.size(),
             a == b ? "identical" : "different"));
}

// ---- 8 ---------------------------------------------------------------------

void query_encoding() {
  Rng rng(8);
  double worst = 0.0;
  bool finite = true, deterministic = true;
  for (int trial = 0; trial < 100; ++trial) {
    BodyMesh mesh;
    const std::size_t n = 3 + rng.index(150);
    for (std::size_t i = 0; i < n; ++i) {
      mesh.vertices.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
      mesh.uv.push_back({rng.uniform(), rng.uniform()});
    }
    const std::size_t v = 4 + rng.index(13), u = 4 + rng.index(13);
    const QueryMap q = build_query_map(mesh, v, u);
    const QueryMap again = build_query_map(mesh, v, u);
    deterministic = deterministic && std::equal(q.grid.data().begin(), q.grid.data().end(), again.grid.data().begin());
    for (std::size_t r = 0; r < v; ++r)
      for (std::size_t c = 0; c < u; ++c) {
        const double qs = (c + 0.5) / static_cast<double>(u), qt = (r + 0.5) / static_cast<double>(v);
        std::vector<std::pair<double, std::size_t>> d;
        for (std::size_t i = 0; i < n; ++i)
          d.emplace_back(std::hypot(mesh.uv[i][0] - qs, mesh.uv[i][1] - qt), i);
        std::sort(d.begin(), d.end());
        double total = 0.0, acc[3] = {0, 0, 0};
        for (std::size_t j = 0; j < std::min<std::size_t>(kQueryNeighbors, n); ++j) {
          const double w = 1.0 / (d[j].first + 1e-8);
          total += w;
          for (int a = 0; a < 3; ++a) acc[a] += w * (mesh.vertices[d[j].second][a] + 1.0) / 2.0;
        }
        for (std::size_t a = 0; a < 3; ++a) {
          const double got = q.grid[(r * u + c) * 3 + a];
          finite = finite && std::isfinite(got);
          worst = std::max(worst, std::abs(got - acc[a] / total));
        }
      }
  }
  report(8, "query encoding", worst <= 1e-12 && finite && deterministic,
         fmt("100 random meshes, max |map - oracle| %.2e, finite %s, deterministic %s", worst, finite ? "yes" : "no",
             deterministic ? "yes" : "no"));
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path out = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "texlora_acceptance";
  fs::create_directories(out);
  const auto guard = [](auto fn, int id) {
    try {
      fn();
    } catch (const std::exception& e) {
      report(id, "exception", false, e.what());
    }
  };
  guard(gradients, 1);
  guard(attention_correctness, 2);
  guard(lora_claim, 3);
  guard(fusion, 4);
  guard(loss_identities, 5);
  guard([&] { toy_overfit(out); }, 6);
  guard([&] { determinism(out); }, 7);
  guard(query_encoding, 8);
  std::printf("%d of 8 criteria failed\n", g_failed);
  return g_failed == 0 ? 0 : 1;
}
