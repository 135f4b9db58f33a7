#pragma once

#include <cstddef>
#include <new>
#include <string>
#include <vector>

#include "texlora/attention.hpp"

namespace texlora::bench {

/// Counts live bytes handed out through TrackingAllocator. Not thread safe;
/// the benchmark runs single-threaded.
class MemoryTracker {
 public:
  static void reset(std::size_t limit = 0);
  static void allocate(std::size_t bytes);
  static void release(std::size_t bytes);
  static std::size_t current();
  static std::size_t peak();
};

template <class T>
struct TrackingAllocator {
  using value_type = T;

  TrackingAllocator() = default;
  template <class U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    MemoryTracker::allocate(n * sizeof(T));
    try {
      return static_cast<T*>(::operator new(n * sizeof(T)));
    } catch (...) {
      MemoryTracker::release(n * sizeof(T));
      throw;
    }
  }
  void deallocate(T* p, std::size_t n) noexcept {
    ::operator delete(p);
    MemoryTracker::release(n * sizeof(T));
  }

  template <class U>
  bool operator==(const TrackingAllocator<U>&) const noexcept {
    return true;
  }
};

template <class T>
using TrackedVector = std::vector<T, TrackingAllocator<T>>;

/// Single-head f32 kernels on row-major Q [vu x d], K [hw x d], V [hw x c].
/// The output [vu x c] and every intermediate are tracked.
TrackedVector<float> softmax_attention_f32(const std::vector<float>& q, const std::vector<float>& k,
                                           const std::vector<float>& v, std::size_t vu, std::size_t hw,
                                           std::size_t d, std::size_t c, float alpha);
TrackedVector<float> lora_attention_f32(const std::vector<float>& q, const std::vector<float>& k,
                                        const std::vector<float>& v, std::size_t vu, std::size_t hw, std::size_t d,
                                        std::size_t c, float alpha);

struct BenchSize {
  std::size_t vu, hw, d, c;
};

struct BenchRow {
  AttentionKernel kernel = AttentionKernel::lora;
  BenchSize size{};
  std::size_t peak_pred = 0;
  std::size_t peak_meas = 0;
  double time_ms = 0.0;
  bool feasible = true;
};

/// Runs `kernel` `repeats` times per size on random inputs. Wall time is the
/// median. `memory_limit` (bytes, 0 = none) caps tracked allocations; a size
/// that exceeds it, or fails to allocate, is reported as infeasible.
std::vector<BenchRow> bench_attention(const std::vector<BenchSize>& sizes, AttentionKernel kernel,
                                      std::size_t repeats, std::size_t memory_limit = 0);

/// Largest single buffer either kernel may hold besides the predicted one:
/// the [vu x c] output or a [d x c] summary.
std::size_t buffer_tolerance(const BenchSize& s, std::size_t dtype_bytes);

std::string bench_csv_header();
std::string to_csv(const BenchRow& row);

}  // namespace texlora::bench
