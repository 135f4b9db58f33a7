#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "texlora/layers.hpp"
#include "texlora/query_encoding.hpp"

namespace texlora {

enum class AttentionKernel { softmax, lora };

const char* to_string(AttentionKernel k);
AttentionKernel parse_attention_kernel(const std::string& name);

/// `automatic` picks sqrt(head dim) for softmax and the key count for lora.
struct AlphaPolicy {
  enum class Kind { automatic, fixed, seq_len };
  Kind kind = Kind::automatic;
  double value = 1.0;

  static AlphaPolicy fixed(double v) { return {Kind::fixed, v}; }
  static AlphaPolicy seq_len() { return {Kind::seq_len, 0.0}; }
};

struct AttentionConfig {
  std::size_t heads = 8;
  std::size_t d_key = 128;
  std::size_t d_value = 128;
  AttentionKernel kernel = AttentionKernel::lora;
  AlphaPolicy alpha;

  void validate() const;
  double alpha_for(std::size_t hw) const;
  std::size_t head_key_dim() const { return d_key / heads; }
  std::size_t head_value_dim() const { return d_value / heads; }
};

/// Q[vu x d], K[hw x d], V[hw x c]
struct AttentionInputs {
  Tensor q;
  Tensor k;
  Tensor v;

  void validate() const;
};

/// softmax(Q K^T / alpha) V
Tensor softmax_attention(const Tensor& q, const Tensor& k, const Tensor& v, double alpha);
/// Q (K^T V) / alpha; the vu x hw product is never formed.
Tensor lora_attention(const Tensor& q, const Tensor& k, const Tensor& v, double alpha);
Tensor attention_kernel(AttentionKernel kind, const Tensor& q, const Tensor& k, const Tensor& v, double alpha);

/// Parameter names below `prefix`: wq, wk, wv, wo, stored [in x out]. The
/// projections carry no bias; the batch norm that follows supplies the shift.
void init_attention_params(ParamMap& params, const std::string& prefix, const AttentionConfig& cfg, Rng& rng);
Tensor multi_head_attention(const AttentionInputs& in, const AttentionConfig& cfg, const LayerContext& ctx,
                            const std::string& prefix);

/// Adds `<prefix>/attn/*`, `<prefix>/bn_attn_*`, `<prefix>/mlp_w1`,
/// `bn_hidden_*`, `mlp_w2`, `mlp_b2`, and the statistics `<prefix>/bn_attn`,
/// `<prefix>/bn_hidden`.
void init_transformer_params(ParamMap& params, StatsMap& stats, const std::string& prefix,
                             const AttentionConfig& cfg, Rng& rng);

/// A = BN(MHA(Q + E_Q, K + E_K, V)) per batch element, rows stacked;
/// out = A + W2 ReLU(BN(A W1)) + b2. Batch statistics cover every row
/// of every batch element. Returns [B*vu x c].
Tensor transformer_unit(const std::vector<AttentionInputs>& batch, const PositionalEncoding& eq,
                        const PositionalEncoding& ek, const AttentionConfig& cfg, const LayerContext& ctx,
                        const std::string& prefix);

/// Largest transient buffer of one kernel evaluation.
std::size_t peak_intermediate_bytes(AttentionKernel kernel, std::size_t vu, std::size_t hw, std::size_t d,
                                    std::size_t c, std::size_t dtype_bytes);

}  // namespace texlora
