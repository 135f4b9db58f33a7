#include "texlora/attention.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace texlora {

const char* to_string(AttentionKernel k) { return k == AttentionKernel::softmax ? "softmax" : "lora"; }

AttentionKernel parse_attention_kernel(const std::string& name) {
  if (name == "softmax") return AttentionKernel::softmax;
  if (name == "lora") return AttentionKernel::lora;
  throw std::invalid_argument("unknown attention kernel '" + name + "'");
}

void AttentionConfig::validate() const {
  if (heads == 0) throw std::invalid_argument("attention needs at least one head");
  if (d_key == 0 || d_value == 0) throw std::invalid_argument("attention widths must be positive");
  if (d_key % heads != 0 || d_value % heads != 0) {
    throw std::invalid_argument("attention widths " + std::to_string(d_key) + "/" + std::to_string(d_value) +
                                " are not divisible by " + std::to_string(heads) + " heads");
  }
  if (alpha.kind == AlphaPolicy::Kind::fixed && !(alpha.value > 0.0))
    throw std::invalid_argument("fixed attention alpha must be positive");
}

double AttentionConfig::alpha_for(std::size_t hw) const {
  switch (alpha.kind) {
    case AlphaPolicy::Kind::fixed:
      return alpha.value;
    case AlphaPolicy::Kind::seq_len:
      return static_cast<double>(hw);
    case AlphaPolicy::Kind::automatic:
      break;
  }
  return kernel == AttentionKernel::lora ? static_cast<double>(hw)
                                         : std::sqrt(static_cast<double>(head_key_dim()));
}

void AttentionInputs::validate() const {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
    throw TensorError("attention inputs must be matrices, got " + to_string(q.shape()) + ", " +
                      to_string(k.shape()) + ", " + to_string(v.shape()));
  }
  if (q.dim(1) != k.dim(1)) {
    throw TensorError("attention: Q " + to_string(q.shape()) + " and K " + to_string(k.shape()) +
                      " differ in width");
  }
  if (k.dim(0) != v.dim(0)) {
    throw TensorError("attention: K " + to_string(k.shape()) + " and V " + to_string(v.shape()) +
                      " differ in length");
  }
}

namespace {

void check_kernel_args(const Tensor& q, const Tensor& k, const Tensor& v, double alpha) {
  AttentionInputs{q, k, v}.validate();
  if (!(alpha > 0.0)) throw TensorError("attention alpha must be positive");
}

}  // namespace

Tensor softmax_attention(const Tensor& q, const Tensor& k, const Tensor& v, double alpha) {
  check_kernel_args(q, k, v, alpha);
  const Tensor weights = softmax_lastdim(scale(matmul(q, transpose(k)), 1.0 / alpha));
  return matmul(weights, v);
}

Tensor lora_attention(const Tensor& q, const Tensor& k, const Tensor& v, double alpha) {
  check_kernel_args(q, k, v, alpha);
  return scale(matmul(q, matmul(transpose(k), v)), 1.0 / alpha);
}

Tensor attention_kernel(AttentionKernel kind, const Tensor& q, const Tensor& k, const Tensor& v, double alpha) {
  return kind == AttentionKernel::lora ? lora_attention(q, k, v, alpha) : softmax_attention(q, k, v, alpha);
}

void init_attention_params(ParamMap& params, const std::string& prefix, const AttentionConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t d = cfg.d_key, c = cfg.d_value;
  params[prefix + "/wq"] = fan_in_uniform({d, d}, d, rng);
  params[prefix + "/wk"] = fan_in_uniform({d, d}, d, rng);
  params[prefix + "/wv"] = fan_in_uniform({c, c}, c, rng);
  params[prefix + "/wo"] = fan_in_uniform({c, c}, c, rng);
}

Tensor multi_head_attention(const AttentionInputs& in, const AttentionConfig& cfg, const LayerContext& ctx,
                            const std::string& prefix) {
  cfg.validate();
  in.validate();
  if (in.q.dim(1) != cfg.d_key || in.v.dim(1) != cfg.d_value) {
    throw TensorError("multi_head_attention: inputs " + to_string(in.q.shape()) + "/" + to_string(in.v.shape()) +
                      " do not match widths " + std::to_string(cfg.d_key) + "/" + std::to_string(cfg.d_value));
  }
  const Tensor q = matmul(in.q, ctx.param(prefix + "/wq"));
  const Tensor k = matmul(in.k, ctx.param(prefix + "/wk"));
  const Tensor v = matmul(in.v, ctx.param(prefix + "/wv"));
  const double alpha = cfg.alpha_for(in.k.dim(0));
  const std::size_t dk = cfg.head_key_dim(), dv = cfg.head_value_dim();

  std::vector<Tensor> heads;
  heads.reserve(cfg.heads);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const Tensor qh = cfg.heads == 1 ? q : slice(q, 1, h * dk, dk);
    const Tensor kh = cfg.heads == 1 ? k : slice(k, 1, h * dk, dk);
    const Tensor vh = cfg.heads == 1 ? v : slice(v, 1, h * dv, dv);
    heads.push_back(attention_kernel(cfg.kernel, qh, kh, vh, alpha));
  }
  const Tensor joined = heads.size() == 1 ? heads[0] : concat(heads, 1);
  return matmul(joined, ctx.param(prefix + "/wo"));
}

void init_transformer_params(ParamMap& params, StatsMap& stats, const std::string& prefix,
                             const AttentionConfig& cfg, Rng& rng) {
  init_attention_params(params, prefix + "/attn", cfg, rng);
  const std::size_t c = cfg.d_value, hidden = 2 * cfg.d_value;
  params[prefix + "/bn_attn_gamma"] = Tensor::ones({c});
  params[prefix + "/bn_attn_beta"] = Tensor::zeros({c});
  params[prefix + "/mlp_w1"] = fan_in_uniform({c, hidden}, c, rng);
  params[prefix + "/bn_hidden_gamma"] = Tensor::ones({hidden});
  params[prefix + "/bn_hidden_beta"] = Tensor::zeros({hidden});
  params[prefix + "/mlp_w2"] = fan_in_uniform({hidden, c}, hidden, rng);
  params[prefix + "/mlp_b2"] = fan_in_uniform({c}, hidden, rng);
  stats[prefix + "/bn_attn"] = RunningStats::identity(c);
  stats[prefix + "/bn_hidden"] = RunningStats::identity(hidden);
}

Tensor transformer_unit(const std::vector<AttentionInputs>& batch, const PositionalEncoding& eq,
                        const PositionalEncoding& ek, const AttentionConfig& cfg, const LayerContext& ctx,
                        const std::string& prefix) {
  if (batch.empty()) throw TensorError("transformer_unit: empty batch");
  const Tensor eq_tokens = eq.tokens();
  const Tensor ek_tokens = ek.tokens();
  std::vector<Tensor> rows;
  rows.reserve(batch.size());
  for (const auto& in : batch) {
    in.validate();
    if (in.q.shape() != eq_tokens.shape() || in.k.shape() != ek_tokens.shape()) {
      throw TensorError("transformer_unit: positional encodings " + to_string(eq_tokens.shape()) + "/" +
                        to_string(ek_tokens.shape()) + " do not match Q " + to_string(in.q.shape()) + " and K " +
                        to_string(in.k.shape()));
    }
    rows.push_back(multi_head_attention({add(in.q, eq_tokens), add(in.k, ek_tokens), in.v}, cfg, ctx,
                                        prefix + "/attn"));
  }
  const Tensor attn = rows.size() == 1 ? rows[0] : concat(rows, 0);
  const Tensor a = batchnorm2d(attn, ctx.param(prefix + "/bn_attn_gamma"), ctx.param(prefix + "/bn_attn_beta"),
                               ctx.norm(prefix + "/bn_attn"));
  const Tensor hidden = relu(batchnorm2d(matmul(a, ctx.param(prefix + "/mlp_w1")),
                                         ctx.param(prefix + "/bn_hidden_gamma"),
                                         ctx.param(prefix + "/bn_hidden_beta"), ctx.norm(prefix + "/bn_hidden")));
  return add(a, linear(hidden, ctx.param(prefix + "/mlp_w2"), ctx.param(prefix + "/mlp_b2")));
}

std::size_t peak_intermediate_bytes(AttentionKernel kernel, std::size_t vu, std::size_t hw, std::size_t d,
                                    std::size_t c, std::size_t dtype_bytes) {
  if (kernel == AttentionKernel::softmax) return vu * hw * dtype_bytes;
  return std::max(vu, hw) * std::max(d, c) * dtype_bytes;
}

}  // namespace texlora
