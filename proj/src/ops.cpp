#include "texlora/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <string>

#include "texlora/kernels.hpp"

namespace texlora {

namespace {

using kernels::default_exec;

void require_same_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw TensorError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                      to_string(b.shape()));
  }
}

void require_rank(std::string_view op, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw TensorError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                      to_string(a.shape()));
  }
}

void add_into(GradBuffer* dst, std::span<const double> src, double factor = 1.0) {
  if (!dst) return;
  for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += factor * src[i];
}

std::vector<double> copy_data(const Tensor& a) { return {a.data().begin(), a.data().end()}; }

/// out[i] = a[map[i]]; gradients scatter back through the same map.
Tensor remap(std::string_view op, const Tensor& a, Shape out_shape, std::vector<std::size_t> map) {
  std::vector<double> out(map.size());
  const double* src = a.raw();
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = src[map[i]];
  auto shared_map = std::make_shared<const std::vector<std::size_t>>(std::move(map));
  return record(op, std::move(out_shape), std::move(out), {a},
                [shared_map](std::span<const double> g, GradRefs pg) {
                  if (!pg[0]) return;
                  auto& ga = *pg[0];
                  const auto& m = *shared_map;
                  for (std::size_t i = 0; i < m.size(); ++i) ga[m[i]] += g[i];
                });
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

template <class F>
Tensor unary(const Tensor& a, F f) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i]);
  return Tensor(a.shape(), std::move(out));
}

}  // namespace

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return record("add", a.shape(), std::move(out), {a, b}, [](std::span<const double> g, GradRefs pg) {
    add_into(pg[0], g);
    add_into(pg[1], g);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return record("sub", a.shape(), std::move(out), {a, b}, [](std::span<const double> g, GradRefs pg) {
    add_into(pg[0], g);
    add_into(pg[1], g, -1.0);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return record("mul", a.shape(), std::move(out), {a, b},
                [a = a.detach(), b = b.detach()](std::span<const double> g, GradRefs pg) {
                  if (pg[0])
                    for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * b[i];
                  if (pg[1])
                    for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] += g[i] * a[i];
                });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape("div", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (b[i] == 0.0) throw TensorError("div: division by zero at element " + std::to_string(i));
    out[i] = a[i] / b[i];
  }
  return record("div", a.shape(), std::move(out), {a, b},
                [a = a.detach(), b = b.detach()](std::span<const double> g, GradRefs pg) {
                  if (pg[0])
                    for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] / b[i];
                  if (pg[1])
                    for (std::size_t i = 0; i < g.size(); ++i)
                      (*pg[1])[i] -= g[i] * a[i] / (b[i] * b[i]);
                });
}

Tensor add(const Tensor& a, double b) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b;
  return record("add_scalar", a.shape(), std::move(out), {a},
                [](std::span<const double> g, GradRefs pg) { add_into(pg[0], g); });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return record("scale", a.shape(), std::move(out), {a},
                [s](std::span<const double> g, GradRefs pg) { add_into(pg[0], g, s); });
}

Tensor rsub(double s, const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s - a[i];
  return record("rsub", a.shape(), std::move(out), {a},
                [](std::span<const double> g, GradRefs pg) { add_into(pg[0], g, -1.0); });
}

Tensor relu(const Tensor& a) {
  Tensor y = unary(a, [](double v) { return v > 0.0 ? v : 0.0; });
  return record("relu", a.shape(), copy_data(y), {a},
                [a = a.detach()](std::span<const double> g, GradRefs pg) {
                  if (!pg[0]) return;
                  for (std::size_t i = 0; i < g.size(); ++i)
                    if (a[i] > 0.0) (*pg[0])[i] += g[i];
                });
}

Tensor sigmoid(const Tensor& a) {
  Tensor y = unary(a, [](double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
  return record("sigmoid", a.shape(), copy_data(y), {a},
                [y](std::span<const double> g, GradRefs pg) {
                  if (!pg[0]) return;
                  for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * y[i] * (1.0 - y[i]);
                });
}

Tensor tanh(const Tensor& a) {
  Tensor y = unary(a, [](double v) { return std::tanh(v); });
  return record("tanh", a.shape(), copy_data(y), {a}, [y](std::span<const double> g, GradRefs pg) {
    if (!pg[0]) return;
    for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

Tensor square(const Tensor& a) {
  Tensor y = unary(a, [](double v) { return v * v; });
  return record("square", a.shape(), copy_data(y), {a},
                [a = a.detach()](std::span<const double> g, GradRefs pg) {
                  if (!pg[0]) return;
                  for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += 2.0 * a[i] * g[i];
                });
}

Tensor sqrt(const Tensor& a) {
  for (double v : a.data()) {
    if (v < 0.0) throw TensorError("sqrt: negative input");
  }
  Tensor y = unary(a, [](double v) { return std::sqrt(v); });
  return record("sqrt", a.shape(), copy_data(y), {a}, [y](std::span<const double> g, GradRefs pg) {
    if (!pg[0]) return;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (y[i] > 0.0) (*pg[0])[i] += 0.5 * g[i] / y[i];
  });
}

Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor& b) {
  switch (kind) {
    case Elementwise::add: return add(a, b);
    case Elementwise::sub: return sub(a, b);
    case Elementwise::mul: return mul(a, b);
    case Elementwise::div: return div(a, b);
    case Elementwise::relu: return relu(a);
    case Elementwise::sigmoid: return sigmoid(a);
    case Elementwise::tanh: return tanh(a);
    case Elementwise::scale: return mul(a, b);
  }
  throw TensorError("elementwise: unknown kind");
}

Tensor elementwise(Elementwise kind, const Tensor& a, double b) {
  switch (kind) {
    case Elementwise::add: return add(a, b);
    case Elementwise::sub: return add(a, -b);
    case Elementwise::mul:
    case Elementwise::scale: return scale(a, b);
    case Elementwise::div:
      if (b == 0.0) throw TensorError("div: division by zero scalar");
      return scale(a, 1.0 / b);
    case Elementwise::relu: return relu(a);
    case Elementwise::sigmoid: return sigmoid(a);
    case Elementwise::tanh: return tanh(a);
  }
  throw TensorError("elementwise: unknown kind");
}

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return record("sum", {}, {s}, {a}, [](std::span<const double> g, GradRefs pg) {
    if (!pg[0]) return;
    for (double& v : *pg[0]) v += g[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

// ---- layout ----------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw TensorError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  return record("reshape", std::move(shape), copy_data(a), {a},
                [](std::span<const double> g, GradRefs pg) { add_into(pg[0], g); });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  const std::size_t rank = a.rank();
  if (axes.size() != rank) throw TensorError("permute: axis count does not match rank");
  std::vector<bool> seen(rank, false);
  for (std::size_t ax : axes) {
    if (ax >= rank || seen[ax]) throw TensorError("permute: invalid axis list");
    seen[ax] = true;
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = a.dim(axes[i]);
  const auto in_strides = strides_of(a.shape());
  std::vector<std::size_t> map(a.numel());
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t flat = 0; flat < map.size(); ++flat) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < rank; ++i) src += idx[i] * in_strides[axes[i]];
    map[flat] = src;
    for (std::size_t i = rank; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  return remap("permute", a, std::move(out_shape), std::move(map));
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  return permute(a, {1, 0});
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  if (shape.size() != a.rank()) {
    throw TensorError("broadcast_to: rank mismatch " + to_string(a.shape()) + " vs " + to_string(shape));
  }
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (a.dim(i) != shape[i] && a.dim(i) != 1) {
      throw TensorError("broadcast_to: cannot broadcast " + to_string(a.shape()) + " to " +
                        to_string(shape));
    }
  }
  const auto in_strides = strides_of(a.shape());
  const std::size_t rank = shape.size();
  std::vector<std::size_t> map(numel(shape));
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t flat = 0; flat < map.size(); ++flat) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < rank; ++i)
      if (a.dim(i) != 1) src += idx[i] * in_strides[i];
    map[flat] = src;
    for (std::size_t i = rank; i-- > 0;) {
      if (++idx[i] < shape[i]) break;
      idx[i] = 0;
    }
  }
  return remap("broadcast_to", a, shape, std::move(map));
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= a.rank() || length == 0 || start + length > a.dim(axis)) {
    throw TensorError("slice: range [" + std::to_string(start) + ", " +
                      std::to_string(start + length) + ") on axis " + std::to_string(axis) +
                      " invalid for shape " + to_string(a.shape()));
  }
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  std::vector<std::size_t> map;
  map.reserve(outer * length * inner);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < length; ++l)
      for (std::size_t in = 0; in < inner; ++in)
        map.push_back((o * a.dim(axis) + start + l) * inner + in);
  return remap("slice", a, std::move(out_shape), std::move(map));
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw TensorError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw TensorError("concat: axis out of range");
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    bool ok = p.rank() == ref.size();
    for (std::size_t i = 0; ok && i < ref.size(); ++i) ok = i == axis || p.dim(i) == ref[i];
    if (!ok) {
      throw TensorError("concat: incompatible shapes " + to_string(ref) + " and " +
                        to_string(p.shape()));
    }
    total += p.dim(axis);
  }
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
  Shape out_shape = ref;
  out_shape[axis] = total;

  std::vector<std::size_t> widths;
  for (const Tensor& p : parts) widths.push_back(p.dim(axis) * inner);
  const std::size_t row = total * inner;
  std::vector<double> out(outer * row);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const double* src = parts[k].raw();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(src + o * widths[k], widths[k], out.data() + o * row + offset);
    offset += widths[k];
  }
  return record("concat", std::move(out_shape), std::move(out), parts,
                [widths, outer, row](std::span<const double> g, GradRefs pg) {
                  std::size_t off = 0;
                  for (std::size_t k = 0; k < widths.size(); ++k) {
                    if (pg[k]) {
                      auto& dst = *pg[k];
                      for (std::size_t o = 0; o < outer; ++o)
                        for (std::size_t i = 0; i < widths[k]; ++i)
                          dst[o * widths[k] + i] += g[o * row + off + i];
                    }
                    off += widths[k];
                  }
                });
}

Tensor gather(const Tensor& a, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw TensorError("gather: empty index list");
  for (std::size_t i : indices) {
    if (i >= a.numel()) throw TensorError("gather: index out of range");
  }
  return remap("gather", a, {indices.size()}, indices);
}

// ---- linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) {
    throw TensorError("matmul: inner dimensions differ " + to_string(a.shape()) + " x " +
                      to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  kernels::gemm_nn(default_exec(), m, n, k, a.raw(), b.raw(), out.data(), false);
  return record("matmul", {m, n}, std::move(out), {a, b},
                [a = a.detach(), b = b.detach(), m, n, k](std::span<const double> g, GradRefs pg) {
                  if (pg[0]) kernels::gemm_nt(default_exec(), m, k, n, g.data(), b.raw(), pg[0]->data(), true);
                  if (pg[1]) kernels::gemm_tn(default_exec(), k, n, m, a.raw(), g.data(), pg[1]->data(), true);
                });
}

double SparseMatrix::row_sum(std::size_t r) const {
  double s = 0.0;
  for (std::size_t e = row_ptr[r]; e < row_ptr[r + 1]; ++e) s += values[e];
  return s;
}

Tensor spmm(const SparseMatrix& r, const Tensor& x) {
  require_rank("spmm", x, 2);
  if (x.dim(0) != r.cols) {
    throw TensorError("spmm: operator has " + std::to_string(r.cols) + " columns, input shape " +
                      to_string(x.shape()));
  }
  const std::size_t k = x.dim(1);
  std::vector<double> out(r.rows * k, 0.0);
  for (std::size_t row = 0; row < r.rows; ++row) {
    for (std::size_t e = r.row_ptr[row]; e < r.row_ptr[row + 1]; ++e) {
      const double w = r.values[e];
      const double* src = x.raw() + r.col_idx[e] * k;
      for (std::size_t j = 0; j < k; ++j) out[row * k + j] += w * src[j];
    }
  }
  return record("spmm", {r.rows, k}, std::move(out), {x},
                [&r, k](std::span<const double> g, GradRefs pg) {
                  if (!pg[0]) return;
                  auto& gx = *pg[0];
                  for (std::size_t row = 0; row < r.rows; ++row)
                    for (std::size_t e = r.row_ptr[row]; e < r.row_ptr[row + 1]; ++e)
                      for (std::size_t j = 0; j < k; ++j)
                        gx[r.col_idx[e] * k + j] += r.values[e] * g[row * k + j];
                });
}

// ---- normalization ---------------------------------------------------------

Tensor softmax_lastdim(const Tensor& a) {
  if (a.rank() == 0) throw TensorError("softmax_lastdim: scalar input");
  const std::size_t len = a.dim(a.rank() - 1);
  const std::size_t rows = a.numel() / len;
  std::vector<double> out(a.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.raw() + r * len;
    double* y = out.data() + r * len;
    const double mx = *std::max_element(x, x + len);
    double z = 0.0;
    for (std::size_t j = 0; j < len; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < len; ++j) y[j] /= z;
  }
  auto saved = std::make_shared<const std::vector<double>>(out);
  return record("softmax", a.shape(), std::move(out), {a},
                [saved, len, rows](std::span<const double> g, GradRefs pg) {
                  if (!pg[0]) return;
                  const auto& y = *saved;
                  auto& gx = *pg[0];
                  for (std::size_t r = 0; r < rows; ++r) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < len; ++j) dot += g[r * len + j] * y[r * len + j];
                    for (std::size_t j = 0; j < len; ++j)
                      gx[r * len + j] += y[r * len + j] * (g[r * len + j] - dot);
                  }
                });
}

Tensor l2_normalize(const Tensor& a, std::size_t axis, double eps) {
  if (axis >= a.rank()) throw TensorError("l2_normalize: axis out of range");
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
  const std::size_t len = a.dim(axis);
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);

  std::vector<double> norms(outer * inner);
  std::vector<double> out(a.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      double ss = 0.0;
      for (std::size_t l = 0; l < len; ++l) {
        const double v = a[(o * len + l) * inner + in];
        ss += v * v;
      }
      const double n = std::sqrt(ss + eps * eps);
      norms[o * inner + in] = n;
      for (std::size_t l = 0; l < len; ++l) {
        const std::size_t idx = (o * len + l) * inner + in;
        out[idx] = a[idx] / n;
      }
    }
  }
  return record("l2_normalize", a.shape(), std::move(out), {a},
                [a = a.detach(), norms = std::move(norms), outer, len, inner](
                    std::span<const double> g, GradRefs pg) {
                  if (!pg[0]) return;
                  auto& gx = *pg[0];
                  for (std::size_t o = 0; o < outer; ++o) {
                    for (std::size_t in = 0; in < inner; ++in) {
                      const double n = norms[o * inner + in];
                      double xg = 0.0;
                      for (std::size_t l = 0; l < len; ++l) {
                        const std::size_t idx = (o * len + l) * inner + in;
                        xg += a[idx] * g[idx];
                      }
                      for (std::size_t l = 0; l < len; ++l) {
                        const std::size_t idx = (o * len + l) * inner + in;
                        gx[idx] += g[idx] / n - a[idx] * xg / (n * n * n);
                      }
                    }
                  }
                });
}

RunningStats RunningStats::identity(std::size_t channels) {
  return RunningStats{std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0)};
}

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   const BatchNormOptions& options) {
  if (x.rank() < 2) throw TensorError("batchnorm2d: input needs a channel axis, got " + to_string(x.shape()));
  const std::size_t channels = x.dim(1);
  if (gamma.numel() != channels || beta.numel() != channels) {
    throw TensorError("batchnorm2d: " + std::to_string(channels) + " channels but gamma/beta have " +
                      std::to_string(gamma.numel()) + "/" + std::to_string(beta.numel()));
  }
  const std::size_t batch = x.dim(0);
  const std::size_t inner = x.numel() / (batch * channels);
  const std::size_t count = batch * inner;
  const bool train = options.mode == NormMode::train;
  if (!train && !options.stats) throw TensorError("batchnorm2d: eval mode needs running statistics");
  if (options.stats && (options.stats->mean.size() != channels || options.stats->var.size() != channels)) {
    throw TensorError("batchnorm2d: running statistics have the wrong channel count");
  }

  std::vector<double> mu(channels), inv_std(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    if (train) {
      double s = 0.0;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < inner; ++i) s += x[(b * channels + c) * inner + i];
      const double m = s / static_cast<double>(count);
      double v = 0.0;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < inner; ++i) {
          const double d = x[(b * channels + c) * inner + i] - m;
          v += d * d;
        }
      v /= static_cast<double>(count);
      mu[c] = m;
      inv_std[c] = 1.0 / std::sqrt(v + options.eps);
      if (options.stats) {
        const double unbiased = count > 1 ? v * static_cast<double>(count) / static_cast<double>(count - 1) : v;
        auto& st = *options.stats;
        st.mean[c] = (1.0 - options.momentum) * st.mean[c] + options.momentum * m;
        st.var[c] = (1.0 - options.momentum) * st.var[c] + options.momentum * unbiased;
      }
    } else {
      mu[c] = options.stats->mean[c];
      inv_std[c] = 1.0 / std::sqrt(options.stats->var[c] + options.eps);
    }
  }

  std::vector<double> xhat(x.numel());
  std::vector<double> out(x.numel());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t idx = (b * channels + c) * inner + i;
        xhat[idx] = (x[idx] - mu[c]) * inv_std[c];
        out[idx] = gamma[c] * xhat[idx] + beta[c];
      }

  return record(
      "batchnorm2d", x.shape(), std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), gamma = gamma.detach(), batch, channels,
       inner, count, train](std::span<const double> g, GradRefs pg) {
        for (std::size_t c = 0; c < channels; ++c) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < inner; ++i) {
              const std::size_t idx = (b * channels + c) * inner + i;
              sum_g += g[idx];
              sum_gx += g[idx] * xhat[idx];
            }
          if (pg[1]) (*pg[1])[c] += sum_gx;
          if (pg[2]) (*pg[2])[c] += sum_g;
          if (!pg[0]) continue;
          auto& gx = *pg[0];
          const double k = gamma[c] * inv_std[c];
          const double n = static_cast<double>(count);
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < inner; ++i) {
              const std::size_t idx = (b * channels + c) * inner + i;
              gx[idx] += train ? k * (g[idx] - sum_g / n - xhat[idx] * sum_gx / n) : k * g[idx];
            }
        }
      });
}

// ---- spatial ---------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& weight, std::size_t stride, std::size_t pad) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", weight, 4);
  const std::size_t batch = x.dim(0), channels = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t out_ch = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != channels || weight.dim(3) != k) {
    throw TensorError("conv2d: weight " + to_string(weight.shape()) + " incompatible with input " +
                      to_string(x.shape()));
  }
  if (k % 2 == 0) throw TensorError("conv2d: kernel size must be odd");
  if (stride == 0) throw TensorError("conv2d: stride must be positive");
  if (h + 2 * pad < k || w + 2 * pad < k) throw TensorError("conv2d: kernel larger than padded input");
  if ((h + 2 * pad - k) % stride != 0 || (w + 2 * pad - k) % stride != 0) {
    throw TensorError("conv2d: stride " + std::to_string(stride) + " does not divide the padded extent of " +
                      to_string(x.shape()));
  }
  const kernels::ConvGeometry geo{channels, h, w, k, stride, pad};
  const std::size_t oh = geo.out_height(), ow = geo.out_width();
  const std::size_t patch = geo.patch_size(), plane = oh * ow;

  auto cols = std::make_shared<std::vector<double>>(batch * patch * plane);
  std::vector<double> out(batch * out_ch * plane);
  const auto exec = default_exec();
  for (std::size_t b = 0; b < batch; ++b) {
    double* col_b = cols->data() + b * patch * plane;
    kernels::im2col(exec, geo, x.raw() + b * channels * h * w, col_b);
    kernels::gemm_nn(exec, out_ch, plane, patch, weight.raw(), col_b, out.data() + b * out_ch * plane, false);
  }
  return record("conv2d", {batch, out_ch, oh, ow}, std::move(out), {x, weight},
                [cols, weight = weight.detach(), geo, batch, out_ch, patch, plane](
                    std::span<const double> g, GradRefs pg) {
                  const auto exec = default_exec();
                  const std::size_t in_plane = geo.channels * geo.height * geo.width;
                  std::vector<double> gcol(pg[0] ? patch * plane : 0);
                  for (std::size_t b = 0; b < batch; ++b) {
                    const double* g_b = g.data() + b * out_ch * plane;
                    if (pg[1])
                      kernels::gemm_nt(exec, out_ch, patch, plane, g_b, cols->data() + b * patch * plane,
                                       pg[1]->data(), true);
                    if (pg[0]) {
                      kernels::gemm_tn(exec, patch, plane, out_ch, weight.raw(), g_b, gcol.data(), false);
                      kernels::col2im(exec, geo, gcol.data(), pg[0]->data() + b * in_plane);
                    }
                  }
                });
}

Tensor avg_pool2x2(const Tensor& x) {
  require_rank("avg_pool2x2", x, 4);
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2) throw TensorError("avg_pool2x2: spatial dims must be even, got " + to_string(x.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  std::vector<double> out(planes * oh * ow);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xo = 0; xo < ow; ++xo) {
        const double* src = x.raw() + p * h * w + 2 * y * w + 2 * xo;
        out[(p * oh + y) * ow + xo] = 0.25 * (src[0] + src[1] + src[w] + src[w + 1]);
      }
  return record("avg_pool2x2", {x.dim(0), x.dim(1), oh, ow}, std::move(out), {x},
                [planes, h, w, oh, ow](std::span<const double> g, GradRefs pg) {
                  if (!pg[0]) return;
                  auto& gx = *pg[0];
                  for (std::size_t p = 0; p < planes; ++p)
                    for (std::size_t y = 0; y < oh; ++y)
                      for (std::size_t xo = 0; xo < ow; ++xo) {
                        const double v = 0.25 * g[(p * oh + y) * ow + xo];
                        const std::size_t base = p * h * w + 2 * y * w + 2 * xo;
                        gx[base] += v;
                        gx[base + 1] += v;
                        gx[base + w] += v;
                        gx[base + w + 1] += v;
                      }
                });
}

namespace {

struct Lerp {
  std::size_t lo, hi;
  double frac;
};

std::vector<Lerp> align_corners_taps(std::size_t in, std::size_t out) {
  std::vector<Lerp> taps(out);
  for (std::size_t o = 0; o < out; ++o) {
    if (in == out) {
      taps[o] = {o, o, 0.0};
      continue;
    }
    const double src = out == 1 ? 0.0
                                : static_cast<double>(o) * static_cast<double>(in - 1) /
                                      static_cast<double>(out - 1);
    const auto lo = std::min(static_cast<std::size_t>(std::floor(src)), in - 1);
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[o] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

Tensor resample_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_rank("resample_bilinear", x, 4);
  if (out_h == 0 || out_w == 0) throw TensorError("resample_bilinear: output size must be positive");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  auto ty = align_corners_taps(h, out_h);
  auto tx = align_corners_taps(w, out_w);
  std::vector<double> out(planes * out_h * out_w);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = x.raw() + p * h * w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto& ly = ty[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto& lx = tx[ox];
        const double top = (1.0 - lx.frac) * src[ly.lo * w + lx.lo] + lx.frac * src[ly.lo * w + lx.hi];
        const double bot = (1.0 - lx.frac) * src[ly.hi * w + lx.lo] + lx.frac * src[ly.hi * w + lx.hi];
        out[(p * out_h + oy) * out_w + ox] = (1.0 - ly.frac) * top + ly.frac * bot;
      }
    }
  }
  return record("resample_bilinear", {x.dim(0), x.dim(1), out_h, out_w}, std::move(out), {x},
                [ty = std::move(ty), tx = std::move(tx), planes, h, w, out_h, out_w](
                    std::span<const double> g, GradRefs pg) {
                  if (!pg[0]) return;
                  auto& gx = *pg[0];
                  for (std::size_t p = 0; p < planes; ++p) {
                    double* dst = gx.data() + p * h * w;
                    for (std::size_t oy = 0; oy < out_h; ++oy) {
                      const auto& ly = ty[oy];
                      for (std::size_t ox = 0; ox < out_w; ++ox) {
                        const auto& lx = tx[ox];
                        const double v = g[(p * out_h + oy) * out_w + ox];
                        dst[ly.lo * w + lx.lo] += v * (1.0 - ly.frac) * (1.0 - lx.frac);
                        dst[ly.lo * w + lx.hi] += v * (1.0 - ly.frac) * lx.frac;
                        dst[ly.hi * w + lx.lo] += v * ly.frac * (1.0 - lx.frac);
                        dst[ly.hi * w + lx.hi] += v * ly.frac * lx.frac;
                      }
                    }
                  }
                });
}

namespace {

struct SampleTap {
  std::size_t x0, x1, y0, y1;
  double fx, fy;
  double dx_scale, dy_scale;  // d(pixel)/d(normalized); zero when clamped
};

SampleTap sample_tap(double gx, double gy, std::size_t h, std::size_t w) {
  SampleTap t{};
  const double sx = 0.5 * static_cast<double>(w - 1);
  const double sy = 0.5 * static_cast<double>(h - 1);
  double px = (gx + 1.0) * sx;
  double py = (gy + 1.0) * sy;
  t.dx_scale = sx;
  t.dy_scale = sy;
  if (px <= 0.0) {
    px = 0.0;
    t.dx_scale = 0.0;
  } else if (px >= static_cast<double>(w - 1)) {
    px = static_cast<double>(w - 1);
    t.dx_scale = 0.0;
  }
  if (py <= 0.0) {
    py = 0.0;
    t.dy_scale = 0.0;
  } else if (py >= static_cast<double>(h - 1)) {
    py = static_cast<double>(h - 1);
    t.dy_scale = 0.0;
  }
  t.x0 = std::min(static_cast<std::size_t>(std::floor(px)), w - 1);
  t.y0 = std::min(static_cast<std::size_t>(std::floor(py)), h - 1);
  t.x1 = std::min(t.x0 + 1, w - 1);
  t.y1 = std::min(t.y0 + 1, h - 1);
  t.fx = px - static_cast<double>(t.x0);
  t.fy = py - static_cast<double>(t.y0);
  return t;
}

}  // namespace

Tensor grid_sample(const Tensor& image, const Tensor& grid) {
  require_rank("grid_sample", image, 4);
  require_rank("grid_sample", grid, 4);
  const std::size_t batch = image.dim(0), channels = image.dim(1), h = image.dim(2), w = image.dim(3);
  if (grid.dim(0) != batch || grid.dim(3) != 2) {
    throw TensorError("grid_sample: grid " + to_string(grid.shape()) + " incompatible with image " +
                      to_string(image.shape()));
  }
  const std::size_t points = grid.dim(1) * grid.dim(2);
  std::vector<SampleTap> taps(batch * points);
  std::vector<double> out(batch * points * channels);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* img = image.raw() + b * channels * h * w;
    for (std::size_t q = 0; q < points; ++q) {
      const double* gq = grid.raw() + (b * points + q) * 2;
      const SampleTap t = sample_tap(gq[0], gq[1], h, w);
      taps[b * points + q] = t;
      for (std::size_t c = 0; c < channels; ++c) {
        const double* pl = img + c * h * w;
        const double top = (1.0 - t.fx) * pl[t.y0 * w + t.x0] + t.fx * pl[t.y0 * w + t.x1];
        const double bot = (1.0 - t.fx) * pl[t.y1 * w + t.x0] + t.fx * pl[t.y1 * w + t.x1];
        out[(b * points + q) * channels + c] = (1.0 - t.fy) * top + t.fy * bot;
      }
    }
  }
  return record(
      "grid_sample", {batch, grid.dim(1), grid.dim(2), channels}, std::move(out), {image, grid},
      [image = image.detach(), taps = std::move(taps), batch, channels, h, w, points](
          std::span<const double> g, GradRefs pg) {
        for (std::size_t b = 0; b < batch; ++b) {
          const double* img = image.raw() + b * channels * h * w;
          for (std::size_t q = 0; q < points; ++q) {
            const SampleTap& t = taps[b * points + q];
            double dgx = 0.0, dgy = 0.0;
            for (std::size_t c = 0; c < channels; ++c) {
              const double gv = g[(b * points + q) * channels + c];
              const std::size_t off = (b * channels + c) * h * w;
              const double* pl = img + c * h * w;
              if (pg[0]) {
                auto& gi = *pg[0];
                gi[off + t.y0 * w + t.x0] += gv * (1.0 - t.fy) * (1.0 - t.fx);
                gi[off + t.y0 * w + t.x1] += gv * (1.0 - t.fy) * t.fx;
                gi[off + t.y1 * w + t.x0] += gv * t.fy * (1.0 - t.fx);
                gi[off + t.y1 * w + t.x1] += gv * t.fy * t.fx;
              }
              const double v00 = pl[t.y0 * w + t.x0], v01 = pl[t.y0 * w + t.x1];
              const double v10 = pl[t.y1 * w + t.x0], v11 = pl[t.y1 * w + t.x1];
              dgx += gv * ((1.0 - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
              dgy += gv * ((1.0 - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
            }
            if (pg[1]) {
              (*pg[1])[(b * points + q) * 2] += dgx * t.dx_scale;
              (*pg[1])[(b * points + q) * 2 + 1] += dgy * t.dy_scale;
            }
          }
        }
      });
}

}  // namespace texlora
