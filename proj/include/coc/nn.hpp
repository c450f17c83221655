#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "coc/tensor.hpp"

namespace coc {

struct TransformerConfig {
  int d_model = 64;
  int n_heads = 4;
  int n_layers = 2;
  int d_ff = 256;
  int max_seq = 320;
  int vocab_size = 0;
  bool causal = true;
  std::uint64_t seed = 1;

  void validate() const;

  // Architecture identity, parameter values excluded. Two models with the
  // same descriptor are drop-in interchangeable.
  std::string arch_descriptor() const;

  // Closed-form parameter count of a Transformer built from this config:
  //   vocab*d + max_seq*d                         (token + position tables)
  // + n_layers * (4*(d*d + d)                     (q,k,v,out projections)
  //             + 2*(d*d_ff) + d_ff + d           (feed-forward)
  //             + 4*d)                            (two layer norms)
  // + 2*d                                         (final layer norm)
  // + d*vocab + vocab                             (lm head)
  long long param_count() const;
};

// Named parameter registry. Iteration order is insertion order, which fixes
// optimizer update order and checkpoint layout.
class ParamStore {
 public:
  Tensor add(const std::string& name, Tensor t);
  const std::vector<std::pair<std::string, Tensor>>& items() const {
    return items_;
  }
  std::vector<Tensor> tensors() const;
  Tensor find(const std::string& name) const;

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

// He-style scaled-uniform initializer, U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
std::vector<double> he_uniform(std::size_t rows, std::size_t cols, Rng& rng);

// Additive low-rank reparameterization of a linear layer. up starts at zero
// so the adapted layer is exactly the base layer until the first update.
struct LowRankAdapter {
  Tensor down;  // [in, rank]
  Tensor up;    // [rank, out]
  double scaling = 1.0;

  static LowRankAdapter init(int in, int out, int rank, double scaling,
                             Rng& rng, ParamStore& store,
                             const std::string& prefix);
};

// y = x W + b, optionally + scaling * (x down) up.
struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
  std::optional<LowRankAdapter> adapter;

  static Linear init(int in, int out, Rng& rng, ParamStore& store,
                     const std::string& prefix);
  Tensor forward(const Tensor& x) const;
};

// x (base + scaling * down up), factored so the adapter path is a pair of
// thin matmuls. rank must be < min(in, out).
Tensor apply_low_rank(const Tensor& base_weight, const LowRankAdapter& adapter,
                      const Tensor& x);

struct LayerNormParams {
  Tensor gain;  // [d]
  Tensor bias;  // [d]
  static LayerNormParams init(int d, ParamStore& store,
                              const std::string& prefix);
  Tensor forward(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

// Scaled dot-product multi-head attention over [batch, seq, d_model] inputs.
// mask, when given, is [seq, seq] and is added to the attention scores.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 int n_heads, bool causal,
                 const std::optional<Tensor>& mask = std::nullopt);

// [seq, seq] additive mask with -1e9 above the diagonal.
Tensor causal_mask(int seq);

struct TransformerBlock {
  LayerNormParams ln1, ln2;
  Linear wq, wk, wv, wo;
  Linear ff1, ff2;
  int n_heads = 0;
  bool causal = true;

  static TransformerBlock init(const TransformerConfig& cfg, Rng& rng,
                               ParamStore& store, const std::string& prefix);
  Tensor forward(const Tensor& x) const;
};

// Decoder-only transformer with learned positional embeddings and a separate
// lm head. The embedded-input entry point lets callers prepend non-token
// content (e.g. visual tokens) before the blocks run.
struct Transformer {
  TransformerConfig cfg;
  Tensor tok_emb;  // [vocab, d]
  Tensor pos_emb;  // [max_seq, d]
  std::vector<TransformerBlock> blocks;
  LayerNormParams final_ln;
  Linear lm_head;

  static Transformer init(const TransformerConfig& cfg, ParamStore& store,
                          const std::string& prefix);

  // tokens [batch][seq] -> (hidden [B,S,d], logits [B,S,vocab])
  std::pair<Tensor, Tensor> forward_tokens(
      const std::vector<std::vector<int>>& tokens) const;

  // x [B,S,d] already embedded; adds positions and runs the blocks.
  Tensor forward_embedded(const Tensor& x) const;

  Tensor logits_of(const Tensor& hidden) const {
    return lm_head.forward(hidden);
  }
};

// Attaches rank-r adapters to the q and v projections of every block.
// Returns the adapter parameters in attachment order.
std::vector<Tensor> attach_adapters(Transformer& t, int rank, double scaling,
                                    Rng& rng, ParamStore& store);

}  // namespace coc
