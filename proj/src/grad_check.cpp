#include "texlora/grad_check.hpp"

#include <cmath>
#include <vector>

namespace texlora {

namespace {

double evaluate(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  const Tensor out = f(inputs);
  if (out.numel() != 1) throw TensorError("grad_check: expression is not scalar, shape " + to_string(out.shape()));
  const double v = out.item();
  if (!std::isfinite(v)) throw TensorError("grad_check: expression evaluated to a non-finite value");
  return v;
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& f, std::span<const Tensor> inputs, double eps) {
  GradCheckResult result;
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Tensor> leaves;
    leaves.reserve(inputs.size());
    for (const Tensor& x : inputs) leaves.push_back(tape.leaf(x));
    const Tensor out = f(leaves);
    if (out.numel() != 1) throw TensorError("grad_check: expression is not scalar, shape " + to_string(out.shape()));
    if (!std::isfinite(out.item())) throw TensorError("grad_check: expression evaluated to a non-finite value");
    const Gradients grads = backward(out);
    for (const Tensor& leaf : leaves) analytic.push_back(grads.of(leaf));
  }

  std::vector<Tensor> probe(inputs.begin(), inputs.end());
  for (auto& t : probe) t = t.detach();
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor original = probe[k];
    std::vector<double> buf(original.data().begin(), original.data().end());
    for (std::size_t i = 0; i < buf.size(); ++i) {
      const double x0 = buf[i];
      buf[i] = x0 + eps;
      probe[k] = Tensor(original.shape(), buf);
      const double plus = evaluate(f, probe);
      buf[i] = x0 - eps;
      probe[k] = Tensor(original.shape(), buf);
      const double minus = evaluate(f, probe);
      buf[i] = x0;
      result.evaluations += 2;

      const double numeric = (plus - minus) / (2.0 * eps);
      const double a = analytic[k][i];
      if (!std::isfinite(a)) throw TensorError("grad_check: non-finite analytic gradient");
      const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(numeric));
      if (err > result.max_relative_error) {
        result.max_relative_error = err;
        result.worst_input = k;
        result.worst_element = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
    probe[k] = original;
  }
  return result;
}

}  // namespace texlora
