#pragma once

// Raw data-parallel kernels. Every kernel has a serial reference and an
// OpenMP variant; the OpenMP variant never splits a reduction across threads,
// so its results do not depend on the thread count.

#include <cstddef>

namespace texlora::kernels {

enum class Exec { serial, parallel };

Exec default_exec();
void set_default_exec(Exec exec);

// C[m x n] (+)= A[m x k] * B[k x n]
template <class T>
void gemm_nn(Exec exec, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate);

// C[m x n] (+)= A[k x m]^T * B[k x n]
template <class T>
void gemm_tn(Exec exec, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate);

// C[m x n] (+)= A[m x k] * B[n x k]^T
template <class T>
void gemm_nt(Exec exec, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate);

struct ConvGeometry {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;

  std::size_t out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  std::size_t out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
  std::size_t patch_size() const { return channels * kernel * kernel; }
};

// image [C x H x W] -> cols [(C*k*k) x (H'*W')]
void im2col(Exec exec, const ConvGeometry& g, const double* image, double* cols);
// cols [(C*k*k) x (H'*W')] accumulated into image [C x H x W]
void col2im(Exec exec, const ConvGeometry& g, const double* cols, double* image);

}  // namespace texlora::kernels
