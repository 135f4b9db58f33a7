#include "texlora/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <vector>

namespace texlora::kernels {

namespace {

std::atomic<Exec> g_default_exec{Exec::parallel};

constexpr std::size_t kRowBlock = 16;
constexpr std::size_t kColBlock = 256;
constexpr std::size_t kDepthBlock = 128;

template <class T>
void gemm_nn_serial(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
                    bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T sum = accumulate ? c[i * n + j] : T(0);
      for (std::size_t p = 0; p < k; ++p) sum += a[i * k + p] * b[p * n + j];
      c[i * n + j] = sum;
    }
  }
}

// Blocked i-p-j ordering. Each C element still sees p in ascending order.
template <class T>
void gemm_nn_parallel(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t a_row,
                      std::size_t a_col, const T* b, T* c, bool accumulate) {
  const auto row_blocks = static_cast<long>((m + kRowBlock - 1) / kRowBlock);
  const auto col_blocks = static_cast<long>((n + kColBlock - 1) / kColBlock);
#pragma omp parallel for collapse(2) schedule(static)
  for (long rb = 0; rb < row_blocks; ++rb) {
    for (long cb = 0; cb < col_blocks; ++cb) {
      const std::size_t i0 = static_cast<std::size_t>(rb) * kRowBlock;
      const std::size_t i1 = std::min(m, i0 + kRowBlock);
      const std::size_t j0 = static_cast<std::size_t>(cb) * kColBlock;
      const std::size_t j1 = std::min(n, j0 + kColBlock);
      if (!accumulate) {
        for (std::size_t i = i0; i < i1; ++i) std::fill(c + i * n + j0, c + i * n + j1, T(0));
      }
      for (std::size_t p0 = 0; p0 < k; p0 += kDepthBlock) {
        const std::size_t p1 = std::min(k, p0 + kDepthBlock);
        for (std::size_t i = i0; i < i1; ++i) {
          T* crow = c + i * n;
          for (std::size_t p = p0; p < p1; ++p) {
            const T av = a[i * a_row + p * a_col];
            const T* brow = b + p * n;
            for (std::size_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
          }
        }
      }
    }
  }
}

template <class T>
void transpose_into(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

}  // namespace

Exec default_exec() { return g_default_exec.load(); }
void set_default_exec(Exec exec) { g_default_exec.store(exec); }

template <class T>
void gemm_nn(Exec exec, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
  if (exec == Exec::serial) {
    gemm_nn_serial(m, n, k, a, b, c, accumulate);
  } else {
    gemm_nn_parallel(m, n, k, a, k, 1, b, c, accumulate);
  }
}

template <class T>
void gemm_tn(Exec exec, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
  if (exec == Exec::serial) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        T sum = accumulate ? c[i * n + j] : T(0);
        for (std::size_t p = 0; p < k; ++p) sum += a[p * m + i] * b[p * n + j];
        c[i * n + j] = sum;
      }
    }
  } else {
    gemm_nn_parallel(m, n, k, a, 1, m, b, c, accumulate);
  }
}

template <class T>
void gemm_nt(Exec exec, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
  if (exec == Exec::serial) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        T sum = accumulate ? c[i * n + j] : T(0);
        for (std::size_t p = 0; p < k; ++p) sum += a[i * k + p] * b[j * k + p];
        c[i * n + j] = sum;
      }
    }
  } else {
    std::vector<T> bt(n * k);
    transpose_into(n, k, b, bt.data());
    gemm_nn_parallel(m, n, k, a, k, 1, bt.data(), c, accumulate);
  }
}

void im2col(Exec exec, const ConvGeometry& g, const double* image, double* cols) {
  const std::size_t oh = g.out_height();
  const std::size_t ow = g.out_width();
  const std::size_t kk = g.kernel * g.kernel;
  const auto channels = static_cast<long>(g.channels);
#pragma omp parallel for schedule(static) if (exec == Exec::parallel)
  for (long ch = 0; ch < channels; ++ch) {
    const std::size_t c = static_cast<std::size_t>(ch);
    const double* plane = image + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        double* row = cols + (c * kk + ki * g.kernel + kj) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.height) &&
                                ix < static_cast<long>(g.width);
            row[oy * ow + ox] = inside ? plane[static_cast<std::size_t>(iy) * g.width +
                                               static_cast<std::size_t>(ix)]
                                       : 0.0;
          }
        }
      }
    }
  }
}

void col2im(Exec exec, const ConvGeometry& g, const double* cols, double* image) {
  const std::size_t oh = g.out_height();
  const std::size_t ow = g.out_width();
  const std::size_t kk = g.kernel * g.kernel;
  const auto channels = static_cast<long>(g.channels);
#pragma omp parallel for schedule(static) if (exec == Exec::parallel)
  for (long ch = 0; ch < channels; ++ch) {
    const std::size_t c = static_cast<std::size_t>(ch);
    double* plane = image + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        const double* row = cols + (c * kk + ki * g.kernel + kj) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
            plane[static_cast<std::size_t>(iy) * g.width + static_cast<std::size_t>(ix)] +=
                row[oy * ow + ox];
          }
        }
      }
    }
  }
}

#define TEXLORA_INSTANTIATE_GEMM(T)                                                            \
  template void gemm_nn<T>(Exec, std::size_t, std::size_t, std::size_t, const T*, const T*, T*, \
                           bool);                                                              \
  template void gemm_tn<T>(Exec, std::size_t, std::size_t, std::size_t, const T*, const T*, T*, \
                           bool);                                                              \
  template void gemm_nt<T>(Exec, std::size_t, std::size_t, std::size_t, const T*, const T*, T*, \
                           bool);

TEXLORA_INSTANTIATE_GEMM(float)
TEXLORA_INSTANTIATE_GEMM(double)

#undef TEXLORA_INSTANTIATE_GEMM

}  // namespace texlora::kernels
