#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "coc/common.hpp"

namespace coc {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= std::size_t(d);
  return n;
}

std::string shape_str(const Shape& s);

// Flat row-major storage shared by Tensor handles. grad stays empty until the
// backward pass first touches it; callers zero it explicitly between steps.
struct TensorData {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool requires_grad = false;
  bool is_param = false;
  bool grad_blocked = false;   // transient, set only inside gated_backward
  bool finite_checked = false; // cleared on mutable access
  std::uint64_t id = 0;
};

// Value-semantic handle over shared storage. Copying a Tensor aliases the
// same buffer; ops always allocate fresh outputs.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double v);
  // Leaf with requires_grad + is_param set; the only tensors optimizers and
  // freeze sets may touch.
  static Tensor param(Shape shape, std::vector<double> values);

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  std::size_t size() const { return d_->values.size(); }
  int dim(int i) const { return d_->shape[std::size_t(i)]; }
  int ndim() const { return int(d_->shape.size()); }

  std::vector<double>& values() {
    d_->finite_checked = false;
    return d_->values;
  }
  const std::vector<double>& values() const { return d_->values; }
  double item() const;

  bool requires_grad() const { return d_->requires_grad; }
  bool is_param() const { return d_->is_param; }
  bool has_grad() const { return !d_->grad.empty(); }
  std::vector<double>& grad();             // allocates zeros on first use
  const std::vector<double>& grad() const; // contract_error when absent
  void zero_grad() { d_->grad.clear(); }

  std::shared_ptr<TensorData> data_ptr() const { return d_; }
  std::uint64_t id() const { return d_->id; }

 private:
  explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}
  std::shared_ptr<TensorData> d_;
};

enum class OpKind {
  Matmul,
  Add,
  Mul,
  Scale,
  Relu,
  Gelu,
  Sigmoid,
  Softmax,
  Log,
  Exp,
  LayerNorm,
  Embedding,
  Concat,
  Slice,
  Transpose,
  Reshape,
  Mean,
  MeanDim,
  Sum,
  CrossEntropyLogits,
  Mse,
  FusedAttention,
};

const char* op_name(OpKind k);

// One recorded operation. Inputs are kept so the backward closure and the
// graph record agree on topology; backward() reads output->grad and
// accumulates into the inputs' grads.
struct TapeNode {
  OpKind kind;
  std::vector<std::shared_ptr<TensorData>> inputs;
  std::shared_ptr<TensorData> output;
  std::function<void()> backward;
};

// Define-by-run graph, rebuilt per step. Constructing a Tape makes it the
// active recording target for the current thread; destruction restores the
// previous one. Backward visits nodes in exact reverse construction order.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();
  void record(TapeNode node) { nodes_.push_back(std::move(node)); }
  const std::vector<TapeNode>& nodes() const { return nodes_; }
  void clear() { nodes_.clear(); }

 private:
  std::vector<TapeNode> nodes_;
  Tape* prev_ = nullptr;
};

// ---- ops -------------------------------------------------------------
// Forward is eager; a backward closure is recorded iff a Tape is active and
// some input requires grad. All ops validate shapes and reject non-finite
// values in inputs and outputs.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);  // equal shapes, or b a trailing
                                               // sub-shape broadcast over
                                               // leading dims
Tensor mul(const Tensor& a, const Tensor& b);  // same broadcast rule
Tensor scale(const Tensor& x, double c);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // exact erf form
Tensor sigmoid(const Tensor& x);
Tensor softmax(const Tensor& x);  // over last dim, max-shifted
Tensor log_guarded(const Tensor& x);  // log(max(x, 1e-12))
Tensor exp(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);  // over last dim
// table [V,d], ids length prod(lead) -> [lead..., d]
Tensor embedding(const Tensor& table, const std::vector<int>& ids,
                 const Shape& lead);
Tensor concat(const std::vector<Tensor>& xs, int dim);
Tensor slice(const Tensor& x, int dim, int start, int len);
Tensor transpose(const Tensor& x, int dim_a, int dim_b);
Tensor reshape(const Tensor& x, Shape shape);
Tensor mean(const Tensor& x);             // scalar
Tensor mean_dim(const Tensor& x, int dim);
Tensor sum(const Tensor& x);              // scalar
// logits [..., V], targets length prod(leading) -> per-row losses [leading]
Tensor cross_entropy_with_logits(const Tensor& logits,
                                 const std::vector<int>& targets);
Tensor mse(const Tensor& pred, const Tensor& target);  // scalar mean sq err

// Scaled dot-product multi-head attention as one fused graph node:
// q,k,v [B,S,d] with d = n_heads*dk, softmax(q kT / sqrt(dk)) v per head.
// With causal=true, masked score entries are never computed, so output rows
// at position i are bitwise independent of positions > i.
Tensor fused_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                       int n_heads, bool causal);

// ---- backward --------------------------------------------------------

// Reverse pass over the active tape. loss must be a scalar produced by the
// active tape; gradients accumulate additively into requires_grad tensors.
void backward(const Tensor& loss);

// Same traversal, but parameters in `frozen` receive no gradient while
// gradients still flow through the ops that consumed them. Every frozen entry
// must be a parameter leaf. gated_backward(loss, {}) == backward(loss).
void gated_backward(const Tensor& loss, const std::vector<Tensor>& frozen);

void zero_grads(std::vector<Tensor>& params);

// FNV hash over raw parameter bytes, for freeze-contract assertions.
std::uint64_t params_hash(const std::vector<Tensor>& params);

}  // namespace coc
