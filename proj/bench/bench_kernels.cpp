// Serial reference vs OpenMP kernels: wall time and agreement.
#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <vector>

#include "texlora/kernels.hpp"
#include "texlora/random.hpp"

using namespace texlora;
using kernels::Exec;

namespace {

double median_ms(const std::function<void()>& fn, int repeats) {
  std::vector<double> t;
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    t.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  std::sort(t.begin(), t.end());
  return t[t.size() / 2];
}

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-1, 1);
  return v;
}

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

void row(const char* kernel, const char* shape, double serial, double parallel, double diff) {
  std::printf("%s,%s,%d,%.3f,%.3f,%.2f,%.3g\n", kernel, shape, omp_get_max_threads(), serial, parallel,
              serial / parallel, diff);
}

}  // namespace

int main() {
  std::printf("kernel,shape,threads,serial_ms,parallel_ms,speedup,max_abs_diff\n");
  for (std::size_t n : {64, 128, 256}) {
    const auto a = random_vec(n * n, 1), b = random_vec(n * n, 2);
    std::vector<double> cs(n * n), cp(n * n);
    char shape[64];
    std::snprintf(shape, sizeof shape, "%zux%zux%zu", n, n, n);
    const double s = median_ms([&] { kernels::gemm_nn(Exec::serial, n, n, n, a.data(), b.data(), cs.data(), false); }, 5);
    const double p = median_ms([&] { kernels::gemm_nn(Exec::parallel, n, n, n, a.data(), b.data(), cp.data(), false); }, 5);
    row("gemm_nn", shape, s, p, max_diff(cs, cp));
    const double s2 = median_ms([&] { kernels::gemm_tn(Exec::serial, n, n, n, a.data(), b.data(), cs.data(), false); }, 5);
    const double p2 = median_ms([&] { kernels::gemm_tn(Exec::parallel, n, n, n, a.data(), b.data(), cp.data(), false); }, 5);
    row("gemm_tn", shape, s2, p2, max_diff(cs, cp));
    const double s3 = median_ms([&] { kernels::gemm_nt(Exec::serial, n, n, n, a.data(), b.data(), cs.data(), false); }, 5);
    const double p3 = median_ms([&] { kernels::gemm_nt(Exec::parallel, n, n, n, a.data(), b.data(), cp.data(), false); }, 5);
    row("gemm_nt", shape, s3, p3, max_diff(cs, cp));
  }
  for (std::size_t hw : {32, 64, 128}) {
    kernels::ConvGeometry g;
    g.channels = 16;
    g.height = g.width = hw;
    g.kernel = 3;
    g.pad = 1;
    const auto img = random_vec(g.channels * hw * hw, 3);
    const std::size_t cols_n = g.patch_size() * g.out_height() * g.out_width();
    std::vector<double> cs(cols_n), cp(cols_n), is(img.size()), ip(img.size());
    char shape[64];
    std::snprintf(shape, sizeof shape, "16x%zux%zu k3", hw, hw);
    const double s = median_ms([&] { kernels::im2col(Exec::serial, g, img.data(), cs.data()); }, 5);
    const double p = median_ms([&] { kernels::im2col(Exec::parallel, g, img.data(), cp.data()); }, 5);
    row("im2col", shape, s, p, max_diff(cs, cp));
    const double s2 = median_ms([&] { std::fill(is.begin(), is.end(), 0.0); kernels::col2im(Exec::serial, g, cs.data(), is.data()); }, 5);
    const double p2 = median_ms([&] { std::fill(ip.begin(), ip.end(), 0.0); kernels::col2im(Exec::parallel, g, cs.data(), ip.data()); }, 5);
    row("col2im", shape, s2, p2, max_diff(is, ip));
  }
  return 0;
}
