#include "coc/nn.hpp"

#include <cmath>
#include <sstream>

namespace coc {

void TransformerConfig::validate() const {
  if (d_model <= 0 || n_heads <= 0 || n_layers <= 0 || d_ff <= 0)
    throw config_error("transformer dims must be positive");
  if (d_model % n_heads != 0)
    throw config_error("d_model " + std::to_string(d_model) +
                       " not divisible by n_heads " + std::to_string(n_heads));
  if (max_seq < 1) throw config_error("max_seq must be >= 1");
  if (vocab_size <= 0) throw config_error("vocab_size must be positive");
}

std::string TransformerConfig::arch_descriptor() const {
  std::ostringstream os;
  os << "transformer{d_model=" << d_model << ",n_heads=" << n_heads
     << ",n_layers=" << n_layers << ",d_ff=" << d_ff << ",max_seq=" << max_seq
     << ",vocab=" << vocab_size << ",causal=" << (causal ? 1 : 0) << "}";
  return os.str();
}

long long TransformerConfig::param_count() const {
  const long long d = d_model, V = vocab_size, F = d_ff;
  long long per_layer = 4 * (d * d + d) + 2 * (d * F) + F + d + 4 * d;
  return V * d + (long long)max_seq * d + n_layers * per_layer + 2 * d +
         d * V + V;
}

Tensor ParamStore::add(const std::string& name, Tensor t) {
  for (const auto& [n, _] : items_)
    if (n == name) throw contract_error("duplicate parameter name " + name);
  items_.emplace_back(name, t);
  return t;
}

std::vector<Tensor> ParamStore::tensors() const {
  std::vector<Tensor> out;
  out.reserve(items_.size());
  for (const auto& [_, t] : items_) out.push_back(t);
  return out;
}

Tensor ParamStore::find(const std::string& name) const {
  for (const auto& [n, t] : items_)
    if (n == name) return t;
  throw contract_error("parameter not found: " + name);
}

std::vector<double> he_uniform(std::size_t rows, std::size_t cols, Rng& rng) {
  const double limit = std::sqrt(6.0 / double(rows));
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.uniform(-limit, limit);
  return v;
}

LowRankAdapter LowRankAdapter::init(int in, int out, int rank, double scaling,
                                    Rng& rng, ParamStore& store,
                                    const std::string& prefix) {
  if (rank < 1 || rank >= std::min(in, out))
    throw config_error("adapter rank " + std::to_string(rank) +
                       " must be in [1, min(in,out))");
  LowRankAdapter a;
  a.down = store.add(prefix + ".down",
                     Tensor::param({in, rank}, he_uniform(std::size_t(in),
                                                          std::size_t(rank),
                                                          rng)));
  a.up = store.add(prefix + ".up",
                   Tensor::param({rank, out},
                                 std::vector<double>(std::size_t(rank) * out,
                                                     0.0)));
  a.scaling = scaling;
  return a;
}

Linear Linear::init(int in, int out, Rng& rng, ParamStore& store,
                    const std::string& prefix) {
  Linear l;
  l.weight = store.add(
      prefix + ".w",
      Tensor::param({in, out}, he_uniform(std::size_t(in), std::size_t(out),
                                          rng)));
  l.bias = store.add(prefix + ".b",
                     Tensor::param({out}, std::vector<double>(out, 0.0)));
  return l;
}

Tensor Linear::forward(const Tensor& x) const {
  Tensor y = adapter ? apply_low_rank(weight, *adapter, x)
                     : matmul(x, weight);
  return add(y, bias);
}

Tensor apply_low_rank(const Tensor& base_weight, const LowRankAdapter& adapter,
                      const Tensor& x) {
  Tensor base = matmul(x, base_weight);
  Tensor lowrank = matmul(matmul(x, adapter.down), adapter.up);
  return add(base, scale(lowrank, adapter.scaling));
}

LayerNormParams LayerNormParams::init(int d, ParamStore& store,
                                      const std::string& prefix) {
  LayerNormParams p;
  p.gain = store.add(prefix + ".gain",
                     Tensor::param({d}, std::vector<double>(d, 1.0)));
  p.bias = store.add(prefix + ".bias",
                     Tensor::param({d}, std::vector<double>(d, 0.0)));
  return p;
}

Tensor causal_mask(int seq) {
  std::vector<double> m(std::size_t(seq) * seq, 0.0);
  for (int i = 0; i < seq; ++i)
    for (int j = i + 1; j < seq; ++j) m[std::size_t(i) * seq + j] = -1e9;
  return Tensor::from({seq, seq}, std::move(m));
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 int n_heads, bool causal, const std::optional<Tensor>& mask) {
  if (q.ndim() != 3 || k.ndim() != 3 || v.ndim() != 3)
    throw shape_error("attention expects [batch, seq, d_model] inputs");
  if (q.shape() != k.shape() || k.shape() != v.shape())
    throw shape_error("attention q/k/v shapes differ");
  const int B = q.dim(0), S = q.dim(1), d = q.dim(2);
  if (d % n_heads != 0)
    throw shape_error("d_model " + std::to_string(d) +
                      " not divisible by n_heads");
  const int dk = d / n_heads;
  if (!mask) return fused_attention(q, k, v, n_heads, causal);

  // composed fallback for caller-supplied masks
  auto split = [&](const Tensor& t) {
    return transpose(reshape(t, {B, S, n_heads, dk}), 1, 2);  // [B,h,S,dk]
  };
  // scale folded into q so the [B,h,S,S] score tensor is produced once
  Tensor qh = scale(split(q), 1.0 / std::sqrt(double(dk)));
  Tensor kh = split(k), vh = split(v);
  Tensor scores = matmul(qh, transpose(kh, 2, 3));  // [B,h,S,S]
  if (causal) scores = add(scores, causal_mask(S));
  if (mask->ndim() != 2 || mask->dim(0) != S || mask->dim(1) != S)
    throw shape_error("attention mask must be [seq, seq]");
  scores = add(scores, *mask);
  Tensor att = softmax(scores);
  Tensor ctx = matmul(att, vh);                    // [B,h,S,dk]
  return reshape(transpose(ctx, 1, 2), {B, S, d});  // [B,S,d]
}

TransformerBlock TransformerBlock::init(const TransformerConfig& cfg, Rng& rng,
                                        ParamStore& store,
                                        const std::string& prefix) {
  TransformerBlock b;
  b.n_heads = cfg.n_heads;
  b.causal = cfg.causal;
  b.ln1 = LayerNormParams::init(cfg.d_model, store, prefix + ".ln1");
  b.wq = Linear::init(cfg.d_model, cfg.d_model, rng, store, prefix + ".wq");
  b.wk = Linear::init(cfg.d_model, cfg.d_model, rng, store, prefix + ".wk");
  b.wv = Linear::init(cfg.d_model, cfg.d_model, rng, store, prefix + ".wv");
  b.wo = Linear::init(cfg.d_model, cfg.d_model, rng, store, prefix + ".wo");
  b.ln2 = LayerNormParams::init(cfg.d_model, store, prefix + ".ln2");
  b.ff1 = Linear::init(cfg.d_model, cfg.d_ff, rng, store, prefix + ".ff1");
  b.ff2 = Linear::init(cfg.d_ff, cfg.d_model, rng, store, prefix + ".ff2");
  return b;
}

Tensor TransformerBlock::forward(const Tensor& x) const {
  Tensor h = ln1.forward(x);
  Tensor att = attention(wq.forward(h), wk.forward(h), wv.forward(h), n_heads,
                         causal);
  Tensor x1 = add(x, wo.forward(att));
  Tensor h2 = ln2.forward(x1);
  Tensor ff = ff2.forward(gelu(ff1.forward(h2)));
  return add(x1, ff);
}

Transformer Transformer::init(const TransformerConfig& cfg, ParamStore& store,
                              const std::string& prefix) {
  cfg.validate();
  Transformer t;
  t.cfg = cfg;
  Rng rng(cfg.seed);
  {
    const double limit = std::sqrt(3.0 / double(cfg.d_model));
    std::vector<double> e(std::size_t(cfg.vocab_size) * cfg.d_model);
    for (auto& x : e) x = rng.uniform(-limit, limit);
    t.tok_emb = store.add(prefix + ".tok_emb",
                          Tensor::param({cfg.vocab_size, cfg.d_model},
                                        std::move(e)));
    std::vector<double> p(std::size_t(cfg.max_seq) * cfg.d_model);
    for (auto& x : p) x = rng.uniform(-limit, limit);
    t.pos_emb = store.add(prefix + ".pos_emb",
                          Tensor::param({cfg.max_seq, cfg.d_model},
                                        std::move(p)));
  }
  for (int i = 0; i < cfg.n_layers; ++i)
    t.blocks.push_back(TransformerBlock::init(
        cfg, rng, store, prefix + ".block" + std::to_string(i)));
  t.final_ln = LayerNormParams::init(cfg.d_model, store, prefix + ".final_ln");
  t.lm_head = Linear::init(cfg.d_model, cfg.vocab_size, rng, store,
                           prefix + ".lm_head");
  return t;
}

std::pair<Tensor, Tensor> Transformer::forward_tokens(
    const std::vector<std::vector<int>>& tokens) const {
  if (tokens.empty()) throw contract_error("empty token batch");
  const int B = int(tokens.size());
  const int S = int(tokens[0].size());
  std::vector<int> flat;
  flat.reserve(std::size_t(B) * S);
  for (const auto& row : tokens) {
    if (int(row.size()) != S)
      throw shape_error("ragged token batch; pad rows to equal length");
    for (int id : row) {
      if (id < 0 || id >= cfg.vocab_size)
        throw vocab_error("token id " + std::to_string(id) +
                          " outside vocab of size " +
                          std::to_string(cfg.vocab_size));
      flat.push_back(id);
    }
  }
  Tensor x = embedding(tok_emb, flat, {B, S});
  Tensor hidden = forward_embedded(x);
  return {hidden, logits_of(hidden)};
}

Tensor Transformer::forward_embedded(const Tensor& x) const {
  if (x.ndim() != 3 || x.dim(2) != cfg.d_model)
    throw shape_error("forward_embedded expects [B,S," +
                      std::to_string(cfg.d_model) + "]");
  const int S = x.dim(1);
  if (S > cfg.max_seq)
    throw shape_error("sequence length " + std::to_string(S) +
                      " exceeds max_seq " + std::to_string(cfg.max_seq));
  Tensor h = add(x, slice(pos_emb, 0, 0, S));
  for (const auto& b : blocks) h = b.forward(h);
  return final_ln.forward(h);
}

std::vector<Tensor> attach_adapters(Transformer& t, int rank, double scaling,
                                    Rng& rng, ParamStore& store) {
  std::vector<Tensor> added;
  int i = 0;
  for (auto& b : t.blocks) {
    const std::string p = "adapter.block" + std::to_string(i++);
    b.wq.adapter = LowRankAdapter::init(t.cfg.d_model, t.cfg.d_model, rank,
                                        scaling, rng, store, p + ".wq");
    b.wv.adapter = LowRankAdapter::init(t.cfg.d_model, t.cfg.d_model, rank,
                                        scaling, rng, store, p + ".wv");
    added.push_back(b.wq.adapter->down);
    added.push_back(b.wq.adapter->up);
    added.push_back(b.wv.adapter->down);
    added.push_back(b.wv.adapter->up);
  }
  return added;
}

}  // namespace coc
