#pragma once

#include <cstddef>
#include <vector>

#include "texlora/tensor.hpp"

namespace texlora {

// ---- elementwise -----------------------------------------------------------

enum class Elementwise { add, sub, mul, div, relu, sigmoid, tanh, scale };

/// Binary kinds take `b` as the second operand; unary kinds ignore it.
Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor& b);
/// Scalar form: add/sub/mul/div/scale by `b`; unary kinds ignore it.
Tensor elementwise(Elementwise kind, const Tensor& a, double b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor scale(const Tensor& a, double s);
/// s - a
Tensor rsub(double s, const Tensor& a);

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor square(const Tensor& a);
/// Gradient at exactly zero is taken as zero.
Tensor sqrt(const Tensor& a);

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// ---- layout ----------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor transpose(const Tensor& a);
/// Same rank; every source dim equals the target dim or is 1.
Tensor broadcast_to(const Tensor& a, const Shape& shape);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
/// Flat gather; output has shape [indices.size()].
Tensor gather(const Tensor& a, const std::vector<std::size_t>& indices);

// ---- linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);

/// Fixed CSR matrix; used as a linear operator on tape values.
struct SparseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::size_t> row_ptr;  // rows + 1 entries
  std::vector<std::size_t> col_idx;
  std::vector<double> values;

  double row_sum(std::size_t r) const;
};

/// R[m x n] * X[n x k]; the backward pass applies R^T. `r` must outlive the tape.
Tensor spmm(const SparseMatrix& r, const Tensor& x);

// ---- normalization ---------------------------------------------------------

Tensor softmax_lastdim(const Tensor& a);
/// Unit L2 norm along `axis`; norm is computed as sqrt(|x|^2 + eps^2).
Tensor l2_normalize(const Tensor& a, std::size_t axis, double eps = 1e-12);

enum class NormMode { train, eval };

struct RunningStats {
  std::vector<double> mean;
  std::vector<double> var;

  static RunningStats identity(std::size_t channels);
};

struct BatchNormOptions {
  NormMode mode = NormMode::train;
  double eps = 1e-5;
  double momentum = 0.1;
  /// Updated in train mode when non-null; required in eval mode.
  RunningStats* stats = nullptr;
};

/// Channel axis is 1; statistics are taken over every other axis.
Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   const BatchNormOptions& options);

// ---- spatial ---------------------------------------------------------------

/// Cross-correlation: x[B,C,H,W] with weight[O,C,k,k] -> [B,O,H',W'].
Tensor conv2d(const Tensor& x, const Tensor& weight, std::size_t stride, std::size_t pad);
/// 2x2 mean pooling with stride 2; H and W must be even.
Tensor avg_pool2x2(const Tensor& x);
/// Align-corners bilinear resize of x[B,C,H,W].
Tensor resample_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w);
/// Bilinear lookup of image[B,C,H,W] at grid[B,V,U,2] holding (x, y) in
/// [-1,1], align-corners. Out-of-range coordinates clamp to the border.
/// Returns [B,V,U,C].
Tensor grid_sample(const Tensor& image, const Tensor& grid);

}  // namespace texlora
