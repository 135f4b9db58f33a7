#include "texlora/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "texlora/kernels.hpp"
#include "texlora/random.hpp"

namespace texlora::bench {

namespace {

std::size_t g_current = 0;
std::size_t g_peak = 0;
std::size_t g_limit = 0;

std::vector<float> random_matrix(Rng& rng, std::size_t n) {
  std::vector<float> out(n);
  for (float& x : out) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  return out;
}

}  // namespace

void MemoryTracker::reset(std::size_t limit) {
  g_current = 0;
  g_peak = 0;
  g_limit = limit;
}

void MemoryTracker::allocate(std::size_t bytes) {
  if (g_limit != 0 && g_current + bytes > g_limit) throw std::bad_alloc();
  g_current += bytes;
  g_peak = std::max(g_peak, g_current);
}

void MemoryTracker::release(std::size_t bytes) { g_current -= std::min(bytes, g_current); }
std::size_t MemoryTracker::current() { return g_current; }
std::size_t MemoryTracker::peak() { return g_peak; }

TrackedVector<float> softmax_attention_f32(const std::vector<float>& q, const std::vector<float>& k,
                                           const std::vector<float>& v, std::size_t vu, std::size_t hw,
                                           std::size_t d, std::size_t c, float alpha) {
  using kernels::Exec;
  TrackedVector<float> s(vu * hw);
  kernels::gemm_nt(Exec::serial, vu, hw, d, q.data(), k.data(), s.data(), false);
  const float inv = 1.0f / alpha;
  for (std::size_t i = 0; i < vu; ++i) {
    float* row = s.data() + i * hw;
    float mx = -INFINITY;
    for (std::size_t j = 0; j < hw; ++j) mx = std::max(mx, row[j] * inv);
    float total = 0.0f;
    for (std::size_t j = 0; j < hw; ++j) {
      row[j] = std::exp(row[j] * inv - mx);
      total += row[j];
    }
    for (std::size_t j = 0; j < hw; ++j) row[j] /= total;
  }
  TrackedVector<float> out(vu * c);
  kernels::gemm_nn(Exec::serial, vu, c, hw, s.data(), v.data(), out.data(), false);
  return out;
}

TrackedVector<float> lora_attention_f32(const std::vector<float>& q, const std::vector<float>& k,
                                        const std::vector<float>& v, std::size_t vu, std::size_t hw, std::size_t d,
                                        std::size_t c, float alpha) {
  using kernels::Exec;
  TrackedVector<float> kv(d * c);
  kernels::gemm_tn(Exec::serial, d, c, hw, k.data(), v.data(), kv.data(), false);
  TrackedVector<float> out(vu * c);
  kernels::gemm_nn(Exec::serial, vu, c, d, q.data(), kv.data(), out.data(), false);
  const float inv = 1.0f / alpha;
  for (float& x : out) x *= inv;
  return out;
}

std::size_t buffer_tolerance(const BenchSize& s, std::size_t dtype_bytes) {
  return std::max(s.vu * s.c, s.d * s.c) * dtype_bytes;
}

std::vector<BenchRow> bench_attention(const std::vector<BenchSize>& sizes, AttentionKernel kernel,
                                      std::size_t repeats, std::size_t memory_limit) {
  if (repeats == 0) throw std::invalid_argument("bench needs at least one repeat");
  std::vector<BenchRow> rows;
  for (const BenchSize& s : sizes) {
    if (s.vu == 0 || s.hw == 0 || s.d == 0 || s.c == 0) throw std::invalid_argument("bench sizes must be positive");
    Rng rng(s.vu * 31 + s.hw * 17 + s.d * 7 + s.c);
    const std::vector<float> q = random_matrix(rng, s.vu * s.d);
    const std::vector<float> k = random_matrix(rng, s.hw * s.d);
    const std::vector<float> v = random_matrix(rng, s.hw * s.c);
    AttentionConfig cfg;
    cfg.heads = 1;
    cfg.d_key = s.d;
    cfg.d_value = s.c;
    cfg.kernel = kernel;
    const auto alpha = static_cast<float>(cfg.alpha_for(s.hw));

    BenchRow row;
    row.kernel = kernel;
    row.size = s;
    row.peak_pred = peak_intermediate_bytes(kernel, s.vu, s.hw, s.d, s.c, sizeof(float));
    std::vector<double> times;
    try {
      for (std::size_t r = 0; r < repeats; ++r) {
        MemoryTracker::reset(memory_limit);
        const auto t0 = std::chrono::steady_clock::now();
        {
          const auto out = kernel == AttentionKernel::softmax ? softmax_attention_f32(q, k, v, s.vu, s.hw, s.d, s.c, alpha)
                                                              : lora_attention_f32(q, k, v, s.vu, s.hw, s.d, s.c, alpha);
          if (!std::isfinite(out[0])) throw std::runtime_error("attention bench produced a non-finite value");
        }
        const auto t1 = std::chrono::steady_clock::now();
        times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        row.peak_meas = std::max(row.peak_meas, MemoryTracker::peak());
      }
      std::sort(times.begin(), times.end());
      row.time_ms = times.size() % 2 ? times[times.size() / 2]
                                     : 0.5 * (times[times.size() / 2 - 1] + times[times.size() / 2]);
    } catch (const std::bad_alloc&) {
      row.feasible = false;
      row.peak_meas = 0;
      row.time_ms = 0.0;
    }
    MemoryTracker::reset();
    rows.push_back(row);
  }
  return rows;
}

std::string bench_csv_header() { return "kernel,vu,hw,d,c,peak_pred,peak_meas,time_ms"; }

std::string to_csv(const BenchRow& row) {
  char buf[256];
  if (!row.feasible) {
    std::snprintf(buf, sizeof buf, "%s,%zu,%zu,%zu,%zu,%zu,infeasible,infeasible", to_string(row.kernel),
                  row.size.vu, row.size.hw, row.size.d, row.size.c, row.peak_pred);
  } else {
    std::snprintf(buf, sizeof buf, "%s,%zu,%zu,%zu,%zu,%zu,%zu,%.3f", to_string(row.kernel), row.size.vu,
                  row.size.hw, row.size.d, row.size.c, row.peak_pred, row.peak_meas, row.time_ms);
  }
  return buf;
}

}  // namespace texlora::bench
