#include "coc/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <sstream>
#include <thread>

namespace coc {

int num_threads() {
  static const int n = [] {
    if (const char* env = std::getenv("COC_NUM_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return int(hw == 0 ? 1 : (hw > 4 ? 4 : hw));
  }();
  return n;
}

void parallel_for(std::size_t n,
                  const std::function<void(std::size_t, std::size_t)>& fn) {
  const int T = num_threads();
  if (T <= 1 || n < 2) {
    fn(0, n);
    return;
  }
  const std::size_t workers = std::min<std::size_t>(std::size_t(T), n);
  const std::size_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t lo = w * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  fn(0, std::min(n, chunk));
  for (auto& t : pool) t.join();
}

namespace {

using MatMap = Eigen::Map<
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic,
                                                   Eigen::Dynamic,
                                                   Eigen::RowMajor>>;

std::atomic<std::uint64_t> g_next_id{1};

thread_local Tape* g_tape = nullptr;

// Branch-free IEEE exponent test; an all-ones exponent is inf or nan.
bool all_finite(const double* p, std::size_t n) {
  constexpr std::uint64_t kExp = 0x7ff0000000000000ull;
  std::uint64_t bad = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t b;
    std::memcpy(&b, p + i, 8);
    bad |= std::uint64_t((b & kExp) == kExp);
  }
  return bad == 0;
}

void check_finite(const std::vector<double>& v, OpKind k, const char* role) {
  if (!all_finite(v.data(), v.size()))
    throw numeric_error(std::string("non-finite ") + role + " in op " +
                        op_name(k));
}

std::shared_ptr<TensorData> make_data(Shape shape, std::vector<double> values,
                                      bool requires_grad) {
  auto d = std::make_shared<TensorData>();
  if (values.size() != numel(shape))
    throw shape_error("tensor data length " + std::to_string(values.size()) +
                      " does not match shape " + shape_str(shape));
  for (int dim : shape)
    if (dim <= 0) throw shape_error("non-positive dimension in " + shape_str(shape));
  d->shape = std::move(shape);
  d->values = std::move(values);
  d->requires_grad = requires_grad;
  d->id = g_next_id.fetch_add(1);
  return d;
}

// Returns the grad buffer to accumulate into, or nullptr when this tensor
// should not receive gradients (no requires_grad, or gated off).
double* grad_sink(TensorData& td) {
  if (!td.requires_grad || td.grad_blocked) return nullptr;
  if (td.grad.empty()) td.grad.assign(td.values.size(), 0.0);
  return td.grad.data();
}

bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts)
    if (t->requires_grad()) return true;
  return false;
}

void record(OpKind kind, std::vector<std::shared_ptr<TensorData>> inputs,
            const Tensor& out, std::function<void()> bwd) {
  if (Tape* t = Tape::current()) {
    t->record(TapeNode{kind, std::move(inputs), out.data_ptr(), std::move(bwd)});
  }
}

bool tracing(std::initializer_list<const Tensor*> ts) {
  return Tape::current() != nullptr && any_requires_grad(ts);
}

Tensor make_output(OpKind kind, Shape shape, std::vector<double> values,
                   bool requires_grad) {
  check_finite(values, kind, "output");
  auto t = Tensor::from(std::move(shape), std::move(values), requires_grad);
  t.data_ptr()->finite_checked = true;
  return t;
}

void check_inputs(OpKind k, std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts) {
    if (!t->defined())
      throw contract_error(std::string("undefined input to op ") + op_name(k));
    TensorData& td = *t->data_ptr();
    if (td.finite_checked) continue;
    if (!all_finite(td.values.data(), td.values.size()))
      throw numeric_error(std::string("non-finite input in op ") + op_name(k));
    td.finite_checked = true;
  }
}

// broadcast rule: b.shape equals the trailing dims of a.shape
bool trailing_match(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  for (std::size_t i = 0; i < b.size(); ++i)
    if (b[b.size() - 1 - i] != a[a.size() - 1 - i]) return false;
  return true;
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Matmul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::Relu: return "relu";
    case OpKind::Gelu: return "gelu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Softmax: return "softmax";
    case OpKind::Log: return "log";
    case OpKind::Exp: return "exp";
    case OpKind::LayerNorm: return "layer-norm";
    case OpKind::Embedding: return "embedding-lookup";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
    case OpKind::Transpose: return "transpose";
    case OpKind::Reshape: return "reshape";
    case OpKind::Mean: return "mean";
    case OpKind::MeanDim: return "mean-dim";
    case OpKind::Sum: return "sum";
    case OpKind::CrossEntropyLogits: return "cross-entropy-with-logits";
    case OpKind::Mse: return "mse";
  }
  return "?";
}

// ---- Tensor ------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::size_t n = numel(shape);
  return Tensor(make_data(std::move(shape), std::vector<double>(n, 0.0),
                          requires_grad));
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  std::size_t n = numel(shape);
  return Tensor(make_data(std::move(shape), std::vector<double>(n, v),
                          requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values,
                    bool requires_grad) {
  return Tensor(make_data(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double v) { return from({1}, {v}, false); }

Tensor Tensor::param(Shape shape, std::vector<double> values) {
  auto t = from(std::move(shape), std::move(values), true);
  t.d_->is_param = true;
  return t;
}

double Tensor::item() const {
  if (size() != 1) throw contract_error("item() on non-scalar tensor " + shape_str(shape()));
  return d_->values[0];
}

std::vector<double>& Tensor::grad() {
  if (d_->grad.empty()) d_->grad.assign(d_->values.size(), 0.0);
  return d_->grad;
}

const std::vector<double>& Tensor::grad() const {
  if (d_->grad.empty())
    throw contract_error("grad accessed but never populated");
  return d_->grad;
}

// ---- Tape ----------------------------------------------------------------

Tape::Tape() : prev_(g_tape) { g_tape = this; }
Tape::~Tape() { g_tape = prev_; }
Tape* Tape::current() { return g_tape; }

// ---- matmul ----------------------------------------------------------------

namespace {

// Row-invariant GEMM: every output row is produced by the same axpy sweep, so
// identical input rows yield bitwise-identical output rows regardless of
// their position in the batch. Packed GEMM kernels do not guarantee that.
// C must be zero-filled on entry.
void gemm_forward(const double* A, const double* B, double* C, std::size_t m,
                  std::size_t k, std::size_t n) {
  auto rows = [=](std::size_t lo, std::size_t hi) {
    for (std::size_t r = lo; r < hi; ++r) {
      double* dst = C + r * n;
      const double* arow = A + r * k;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const double av = arow[kk];
        const double* brow = B + kk * n;
        for (std::size_t j = 0; j < n; ++j) dst[j] += av * brow[j];
      }
    }
  };
  if (m * k * n >= 1u << 20)
    parallel_for(m, rows);
  else
    rows(0, m);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_inputs(OpKind::Matmul, {&a, &b});
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2)
    throw shape_error("matmul needs >=2-d operands, got " + shape_str(sa) +
                      " x " + shape_str(sb));
  const int m = sa[sa.size() - 2], k = sa[sa.size() - 1];
  const int kb = sb[sb.size() - 2], n = sb[sb.size() - 1];
  if (k != kb)
    throw shape_error("matmul inner dims differ: " + shape_str(sa) + " x " +
                      shape_str(sb));

  Shape out_shape;
  std::size_t batch = 1;
  bool batched_rhs = false;
  if (sb.size() == 2) {
    // [..., m, k] x [k, n]: fold leading dims into rows of one GEMM
    out_shape = sa;
    out_shape.back() = n;
    for (std::size_t i = 0; i + 2 < sa.size(); ++i) batch *= std::size_t(sa[i]);
  } else {
    // leading dims must match elementwise
    if (sa.size() != sb.size())
      throw shape_error("matmul rank mismatch: " + shape_str(sa) + " x " +
                        shape_str(sb));
    for (std::size_t i = 0; i + 2 < sa.size(); ++i) {
      if (sa[i] != sb[i])
        throw shape_error("matmul batch dims differ: " + shape_str(sa) +
                          " x " + shape_str(sb));
      batch *= std::size_t(sa[i]);
    }
    out_shape = sa;
    out_shape.back() = n;
    batched_rhs = true;
  }

  std::vector<double> out(batch * std::size_t(m) * std::size_t(n));
  if (!batched_rhs) {
    gemm_forward(a.values().data(), b.values().data(), out.data(),
                 batch * std::size_t(m), std::size_t(k), std::size_t(n));
  } else {
    for (std::size_t i = 0; i < batch; ++i) {
      gemm_forward(a.values().data() + i * std::size_t(m) * k,
                   b.values().data() + i * std::size_t(k) * n,
                   out.data() + i * std::size_t(m) * n, std::size_t(m),
                   std::size_t(k), std::size_t(n));
    }
  }

  bool trace = tracing({&a, &b});
  Tensor y = make_output(OpKind::Matmul, out_shape, std::move(out), trace);
  if (trace) {
    auto da = a.data_ptr();
    auto db = b.data_ptr();
    auto dy = y.data_ptr();
    record(OpKind::Matmul, {da, db}, y,
           [da, db, dy, m, k, n, batch, batched_rhs] {
             const double* g = dy->grad.data();
             double* ga = grad_sink(*da);
             double* gb = grad_sink(*db);
             if (!batched_rhs) {
               // dA and dB write disjoint buffers; run them as two tasks
               auto task_a = [&] {
                 if (!ga) return;
                 ConstMatMap G(g, Eigen::Index(batch) * m, n);
                 ConstMatMap B(db->values.data(), k, n);
                 MatMap GA(ga, Eigen::Index(batch) * m, k);
                 GA.noalias() += G * B.transpose();
               };
               auto task_b = [&] {
                 if (!gb) return;
                 ConstMatMap A(da->values.data(), Eigen::Index(batch) * m, k);
                 ConstMatMap G(g, Eigen::Index(batch) * m, n);
                 MatMap GB(gb, k, n);
                 GB.noalias() += A.transpose() * G;
               };
               const std::size_t work = batch * std::size_t(m) * k * n;
               if (ga && gb && num_threads() > 1 && work >= 1u << 20) {
                 std::thread th(task_b);
                 task_a();
                 th.join();
               } else {
                 task_a();
                 task_b();
               }
             } else {
               parallel_for(batch, [&](std::size_t lo, std::size_t hi) {
                 for (std::size_t i = lo; i < hi; ++i) {
                   ConstMatMap G(g + i * std::size_t(m) * n, m, n);
                   if (ga) {
                     ConstMatMap B(db->values.data() + i * std::size_t(k) * n,
                                   k, n);
                     MatMap GA(ga + i * std::size_t(m) * k, m, k);
                     GA.noalias() += G * B.transpose();
                   }
                   if (gb) {
                     ConstMatMap A(da->values.data() + i * std::size_t(m) * k,
                                   m, k);
                     MatMap GB(gb + i * std::size_t(k) * n, k, n);
                     GB.noalias() += A.transpose() * G;
                   }
                 }
               });
             }
           });
  }
  return y;
}

// ---- elementwise with trailing broadcast -----------------------------------

namespace {

void check_broadcast(OpKind kind, const Tensor& a, const Tensor& b) {
  check_inputs(kind, {&a, &b});
  if (!trailing_match(a.shape(), b.shape()))
    throw shape_error(std::string(op_name(kind)) + ": shape " +
                      shape_str(b.shape()) + " does not broadcast onto " +
                      shape_str(a.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_broadcast(OpKind::Add, a, b);
  const std::size_t na = a.size(), nb = b.size();
  std::vector<double> out(na);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  if (na == nb) {
    for (std::size_t i = 0; i < na; ++i) out[i] = av[i] + bv[i];
  } else {
    for (std::size_t o = 0; o < na; o += nb)
      for (std::size_t i = 0; i < nb; ++i) out[o + i] = av[o + i] + bv[i];
  }
  bool trace = tracing({&a, &b});
  Tensor y = make_output(OpKind::Add, a.shape(), std::move(out), trace);
  if (trace) {
    auto da = a.data_ptr();
    auto db = b.data_ptr();
    auto dy = y.data_ptr();
    record(OpKind::Add, {da, db}, y, [da, db, dy, na, nb] {
      const double* g = dy->grad.data();
      if (double* ga = grad_sink(*da))
        for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
      if (double* gb = grad_sink(*db)) {
        if (na == nb) {
          for (std::size_t i = 0; i < nb; ++i) gb[i] += g[i];
        } else {
          for (std::size_t o = 0; o < na; o += nb)
            for (std::size_t i = 0; i < nb; ++i) gb[i] += g[o + i];
        }
      }
    });
  }
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_broadcast(OpKind::Mul, a, b);
  const std::size_t na = a.size(), nb = b.size();
  std::vector<double> out(na);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  if (na == nb) {
    for (std::size_t i = 0; i < na; ++i) out[i] = av[i] * bv[i];
  } else {
    for (std::size_t o = 0; o < na; o += nb)
      for (std::size_t i = 0; i < nb; ++i) out[o + i] = av[o + i] * bv[i];
  }
  bool trace = tracing({&a, &b});
  Tensor y = make_output(OpKind::Mul, a.shape(), std::move(out), trace);
  if (trace) {
    auto da = a.data_ptr();
    auto db = b.data_ptr();
    auto dy = y.data_ptr();
    record(OpKind::Mul, {da, db}, y, [da, db, dy, na, nb] {
      const double* g = dy->grad.data();
      double* ga = grad_sink(*da);
      double* gb = grad_sink(*db);
      if (ga) {
        if (na == nb) {
          for (std::size_t i = 0; i < na; ++i) ga[i] += g[i] * db->values[i];
        } else {
          for (std::size_t o = 0; o < na; o += nb)
            for (std::size_t i = 0; i < nb; ++i)
              ga[o + i] += g[o + i] * db->values[i];
        }
      }
      if (gb) {
        if (na == nb) {
          for (std::size_t i = 0; i < nb; ++i) gb[i] += g[i] * da->values[i];
        } else {
          for (std::size_t o = 0; o < na; o += nb)
            for (std::size_t i = 0; i < nb; ++i)
              gb[i] += g[o + i] * da->values[o + i];
        }
      }
    });
  }
  return y;
}

// ---- unary elementwise -----------------------------------------------------

namespace {

Tensor unary_op(OpKind kind, const Tensor& x, double (*fwd)(double),
                double (*dfdx)(double)) {
  check_inputs(kind, {&x});
  std::vector<double> out(x.size());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  bool trace = tracing({&x});
  Tensor y = make_output(kind, x.shape(), std::move(out), trace);
  if (trace) {
    auto dx = x.data_ptr();
    auto dy = y.data_ptr();
    record(kind, {dx}, y, [dx, dy, dfdx] {
      if (double* gx = grad_sink(*dx)) {
        const double* g = dy->grad.data();
        for (std::size_t i = 0; i < dx->values.size(); ++i)
          gx[i] += g[i] * dfdx(dx->values[i]);
      }
    });
  }
  return y;
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

Tensor scale(const Tensor& x, double c) {
  check_inputs(OpKind::Scale, {&x});
  if (!std::isfinite(c)) throw numeric_error("non-finite scale factor");
  std::vector<double> out(x.size());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * xv[i];
  bool trace = tracing({&x});
  Tensor y = make_output(OpKind::Scale, x.shape(), std::move(out), trace);
  if (trace) {
    auto dx = x.data_ptr();
    auto dy = y.data_ptr();
    record(OpKind::Scale, {dx}, y, [dx, dy, c] {
      if (double* gx = grad_sink(*dx)) {
        const double* g = dy->grad.data();
        for (std::size_t i = 0; i < dx->values.size(); ++i) gx[i] += c * g[i];
      }
    });
  }
  return y;
}

Tensor relu(const Tensor& x) {
  return unary_op(
      OpKind::Relu, x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  return unary_op(
      OpKind::Gelu, x,
      [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v) {
        const double phi = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        const double Phi = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        return Phi + v * phi;
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      OpKind::Sigmoid, x,
      [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double v) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 - s);
      });
}

Tensor log_guarded(const Tensor& x) {
  return unary_op(
      OpKind::Log, x,
      [](double v) { return std::log(v < 1e-12 ? 1e-12 : v); },
      [](double v) { return 1.0 / (v < 1e-12 ? 1e-12 : v); });
}

Tensor exp(const Tensor& x) {
  return unary_op(OpKind::Exp, x, [](double v) { return std::exp(v); },
                  [](double v) { return std::exp(v); });
}

// ---- softmax ---------------------------------------------------------------

Tensor softmax(const Tensor& x) {
  check_inputs(OpKind::Softmax, {&x});
  const int d = x.shape().back();
  const std::size_t rows = x.size() / std::size_t(d);
  std::vector<double> out(x.size());
  const auto& xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double* o = out.data() + r * d;
    double mx = row[0];
    for (int i = 1; i < d; ++i) mx = std::max(mx, row[i]);
    double z = 0.0;
    for (int i = 0; i < d; ++i) {
      o[i] = std::exp(row[i] - mx);
      z += o[i];
    }
    const double inv = 1.0 / z;
    for (int i = 0; i < d; ++i) o[i] *= inv;
  }
  bool trace = tracing({&x});
  Tensor y = make_output(OpKind::Softmax, x.shape(), std::move(out), trace);
  if (trace) {
    auto dx = x.data_ptr();
    auto dy = y.data_ptr();
    record(OpKind::Softmax, {dx}, y, [dx, dy, d, rows] {
      if (double* gx = grad_sink(*dx)) {
        const double* g = dy->grad.data();
        const double* yv = dy->values.data();
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g + r * d;
          const double* yr = yv + r * d;
          double dot = 0.0;
          for (int i = 0; i < d; ++i) dot += gr[i] * yr[i];
          double* gxr = gx + r * d;
          for (int i = 0; i < d; ++i) gxr[i] += yr[i] * (gr[i] - dot);
        }
      }
    });
  }
  return y;
}

// ---- layer norm ------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  check_inputs(OpKind::LayerNorm, {&x, &gain, &bias});
  const int d = x.shape().back();
  if (gain.ndim() != 1 || gain.dim(0) != d || bias.ndim() != 1 ||
      bias.dim(0) != d)
    throw shape_error("layer-norm gain/bias must be [" + std::to_string(d) +
                      "]");
  const std::size_t rows = x.size() / std::size_t(d);
  std::vector<double> out(x.size());
  std::vector<double> inv_std(rows), mu(rows);
  const auto& xv = x.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double m = 0.0;
    for (int i = 0; i < d; ++i) m += row[i];
    m /= d;
    double var = 0.0;
    for (int i = 0; i < d; ++i) {
      const double c = row[i] - m;
      var += c * c;
    }
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    mu[r] = m;
    inv_std[r] = is;
    double* o = out.data() + r * d;
    for (int i = 0; i < d; ++i) o[i] = (row[i] - m) * is * gv[i] + bv[i];
  }
  bool trace = tracing({&x, &gain, &bias});
  Tensor y = make_output(OpKind::LayerNorm, x.shape(), std::move(out), trace);
  if (trace) {
    auto dx = x.data_ptr();
    auto dg = gain.data_ptr();
    auto db = bias.data_ptr();
    auto dy = y.data_ptr();
    record(OpKind::LayerNorm, {dx, dg, db}, y,
           [dx, dg, db, dy, d, rows, mu, inv_std] {
             const double* g = dy->grad.data();
             double* gx = grad_sink(*dx);
             double* gg = grad_sink(*dg);
             double* gb = grad_sink(*db);
             for (std::size_t r = 0; r < rows; ++r) {
               const double* xr = dx->values.data() + r * d;
               const double* gr = g + r * d;
               const double is = inv_std[r];
               const double m = mu[r];
               // xhat_i = (x_i - m) * is ; y_i = xhat_i * gain_i + bias_i
               if (gg || gb) {
                 for (int i = 0; i < d; ++i) {
                   const double xhat = (xr[i] - m) * is;
                   if (gg) gg[i] += gr[i] * xhat;
                   if (gb) gb[i] += gr[i];
                 }
               }
               if (gx) {
                 // dL/dxhat_i = g_i * gain_i; standard layer-norm backward
                 double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                 for (int i = 0; i < d; ++i) {
                   const double dxh = gr[i] * dg->values[i];
                   const double xhat = (xr[i] - m) * is;
                   sum_dxhat += dxh;
                   sum_dxhat_xhat += dxh * xhat;
                 }
                 double* gxr = gx + r * d;
                 for (int i = 0; i < d; ++i) {
                   const double dxh = gr[i] * dg->values[i];
                   const double xhat = (xr[i] - m) * is;
                   gxr[i] += is * (dxh - sum_dxhat / d -
                                   xhat * sum_dxhat_xhat / d);
                 }
               }
             }
           });
  }
  return y;
}

// ---- embedding -------------------------------------------------------------

Tensor embedding(const Tensor& table, const std::vector<int>& ids,
                 const Shape& lead) {
  check_inputs(OpKind::Embedding, {&table});
  if (table.ndim() != 2) throw shape_error("embedding table must be 2-d");
  const int V = table.dim(0), d = table.dim(1);
  if (ids.size() != numel(lead))
    throw shape_error("embedding ids length does not match lead shape " +
                      shape_str(lead));
  for (int id : ids)
    if (id < 0 || id >= V)
      throw vocab_error("embedding id " + std::to_string(id) +
                        " out of range [0," + std::to_string(V) + ")");
  Shape out_shape = lead;
  out_shape.push_back(d);
  std::vector<double> out(ids.size() * std::size_t(d));
  const auto& tv = table.values();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(tv.data() + std::size_t(ids[i]) * d, d,
                out.data() + i * std::size_t(d));
  bool trace = tracing({&table});
  Tensor y = make_output(OpKind::Embedding, out_shape, std::move(out), trace);
  if (trace) {
    auto dt = table.data_ptr();
    auto dy = y.data_ptr();
    record(OpKind::Embedding, {dt}, y, [dt, dy, ids, d] {
      if (double* gt = grad_sink(*dt)) {
        const double* g = dy->grad.data();
        for (std::size_t i = 0; i < ids.size(); ++i) {
          double* row = gt + std::size_t(ids[i]) * d;
          const double* gr = g + i * std::size_t(d);
          for (int j = 0; j < d; ++j) row[j] += gr[j];
        }
      }
    });
  }
  return y;
}

// ---- concat / slice / transpose / reshape -----------------------------------

Tensor concat(const std::vector<Tensor>& xs, int dim) {
  if (xs.empty()) throw contract_error("concat of zero tensors");
  for (const auto& x : xs) check_inputs(OpKind::Concat, {&x});
  const Shape& s0 = xs[0].shape();
  if (dim < 0 || dim >= int(s0.size()))
    throw shape_error("concat dim out of range");
  Shape out_shape = s0;
  int total = 0;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    if (s.size() != s0.size()) throw shape_error("concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (int(i) != dim && s[i] != s0[i])
        throw shape_error("concat shapes differ outside dim " +
                          std::to_string(dim));
    total += s[std::size_t(dim)];
  }
  out_shape[std::size_t(dim)] = total;

  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < dim; ++i) outer *= std::size_t(s0[std::size_t(i)]);
  for (std::size_t i = std::size_t(dim) + 1; i < s0.size(); ++i)
    inner *= std::size_t(s0[i]);

  std::vector<double> out(numel(out_shape));
  std::size_t dst_stride = std::size_t(total) * inner;
  std::size_t offset = 0;
  for (const auto& x : xs) {
    const std::size_t len = std::size_t(x.shape()[std::size_t(dim)]) * inner;
    const auto& xv = x.values();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(xv.data() + o * len, len,
                  out.data() + o * dst_stride + offset);
    offset += len;
  }

  bool trace = false;
  for (const auto& x : xs) trace = trace || x.requires_grad();
  trace = trace && Tape::current() != nullptr;
  Tensor y = make_output(OpKind::Concat, out_shape, std::move(out), trace);
  if (trace) {
    std::vector<std::shared_ptr<TensorData>> ins;
    for (const auto& x : xs) ins.push_back(x.data_ptr());
    auto dy = y.data_ptr();
    record(OpKind::Concat, ins, y, [ins, dy, outer, inner, dst_stride, dim] {
      const double* g = dy->grad.data();
      std::size_t offset = 0;
      for (const auto& in : ins) {
        const std::size_t len =
            std::size_t(in->shape[std::size_t(dim)]) * inner;
        if (double* gi = grad_sink(*in)) {
          for (std::size_t o = 0; o < outer; ++o) {
            const double* src = g + o * dst_stride + offset;
            double* dst = gi + o * len;
            for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
          }
        }
        offset += len;
      }
    });
  }
  return y;
}

Tensor slice(const Tensor& x, int dim, int start, int len) {
  check_inputs(OpKind::Slice, {&x});
  const Shape& s = x.shape();
  if (dim < 0 || dim >= int(s.size())) throw shape_error("slice dim out of range");
  if (start < 0 || len <= 0 || start + len > s[std::size_t(dim)])
    throw shape_error("slice [" + std::to_string(start) + "," +
                      std::to_string(start + len) + ") out of range for " +
                      shape_str(s));
  Shape out_shape = s;
  out_shape[std::size_t(dim)] = len;
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < dim; ++i) outer *= std::size_t(s[std::size_t(i)]);
  for (std::size_t i = std::size_t(dim) + 1; i < s.size(); ++i)
    inner *= std::size_t(s[i]);
  const std::size_t src_stride = std::size_t(s[std::size_t(dim)]) * inner;
  const std::size_t dst_stride = std::size_t(len) * inner;
  const std::size_t src_off = std::size_t(start) * inner;

  std::vector<double> out(numel(out_shape));
  const auto& xv = x.values();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xv.data() + o * src_stride + src_off, dst_stride,
                out.data() + o * dst_stride);

  bool trace = tracing({&x});
  Tensor y = make_output(OpKind::Slice, out_shape, std::move(out), trace);
  if (trace) {
    auto dx = x.data_ptr();
    auto dy = y.data_ptr();
    record(OpKind::Slice, {dx}, y,
           [dx, dy, outer, src_stride, dst_stride, src_off] {
             if (double* gx = grad_sink(*dx)) {
               const double* g = dy->grad.data();
               for (std::size_t o = 0; o < outer; ++o) {
                 double* dst = gx + o * src_stride + src_off;
                 const double* src = g + o * dst_stride;
                 for (std::size_t i = 0; i < dst_stride; ++i) dst[i] += src[i];
               }
             }
           });
  }
  return y;
}

namespace {

// strides for row-major shape
std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size());
  std::size_t acc = 1;
  for (int i = int(s.size()) - 1; i >= 0; --i) {
    st[std::size_t(i)] = acc;
    acc *= std::size_t(s[std::size_t(i)]);
  }
  return st;
}

void permute_two(const Shape& in_shape, int a, int b, const double* src,
                 double* dst, bool add_into) {
  Shape out_shape = in_shape;
  std::swap(out_shape[std::size_t(a)], out_shape[std::size_t(b)]);
  const auto in_st = strides_of(in_shape);
  const std::size_t n = numel(in_shape);
  const std::size_t nd = in_shape.size();
  std::vector<std::size_t> out_st_for_in(nd);
  {
    const auto out_st = strides_of(out_shape);
    // axis i of input maps to axis (i with a<->b swapped) of output
    for (std::size_t i = 0; i < nd; ++i) {
      std::size_t j = i;
      if (int(i) == a) j = std::size_t(b);
      else if (int(i) == b) j = std::size_t(a);
      out_st_for_in[i] = out_st[j];
    }
  }
  for (std::size_t idx = 0; idx < n; ++idx) {
    std::size_t rem = idx, out_idx = 0;
    for (std::size_t i = 0; i < nd; ++i) {
      const std::size_t c = rem / in_st[i];
      rem %= in_st[i];
      out_idx += c * out_st_for_in[i];
    }
    if (add_into)
      dst[out_idx] += src[idx];
    else
      dst[out_idx] = src[idx];
  }
}

}  // namespace

Tensor transpose(const Tensor& x, int dim_a, int dim_b) {
  check_inputs(OpKind::Transpose, {&x});
  const Shape& s = x.shape();
  if (dim_a < 0 || dim_a >= int(s.size()) || dim_b < 0 ||
      dim_b >= int(s.size()))
    throw shape_error("transpose dims out of range for " + shape_str(s));
  Shape out_shape = s;
  std::swap(out_shape[std::size_t(dim_a)], out_shape[std::size_t(dim_b)]);
  std::vector<double> out(x.size());
  permute_two(s, dim_a, dim_b, x.values().data(), out.data(), false);

  bool trace = tracing({&x});
  Tensor y = make_output(OpKind::Transpose, out_shape, std::move(out), trace);
  if (trace) {
    auto dx = x.data_ptr();
    auto dy = y.data_ptr();
    Shape ys = y.shape();
    record(OpKind::Transpose, {dx}, y, [dx, dy, ys, dim_a, dim_b] {
      if (grad_sink(*dx)) {
        permute_two(ys, dim_a, dim_b, dy->grad.data(), dx->grad.data(), true);
      }
    });
  }
  return y;
}

Tensor reshape(const Tensor& x, Shape shape) {
  check_inputs(OpKind::Reshape, {&x});
  if (numel(shape) != x.size())
    throw shape_error("reshape " + shape_str(x.shape()) + " -> " +
                      shape_str(shape) + " changes element count");
  std::vector<double> out = x.values();
  bool trace = tracing({&x});
  Tensor y = make_output(OpKind::Reshape, std::move(shape), std::move(out), trace);
  if (trace) {
    auto dx = x.data_ptr();
    auto dy = y.data_ptr();
    record(OpKind::Reshape, {dx}, y, [dx, dy] {
      if (double* gx = grad_sink(*dx)) {
        const double* g = dy->grad.data();
        for (std::size_t i = 0; i < dx->values.size(); ++i) gx[i] += g[i];
      }
    });
  }
  return y;
}

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& x) {
  check_inputs(OpKind::Sum, {&x});
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  bool trace = tracing({&x});
  Tensor y = make_output(OpKind::Sum, {1}, {acc}, trace);
  if (trace) {
    auto dx = x.data_ptr();
    auto dy = y.data_ptr();
    record(OpKind::Sum, {dx}, y, [dx, dy] {
      if (double* gx = grad_sink(*dx)) {
        const double g = dy->grad[0];
        for (std::size_t i = 0; i < dx->values.size(); ++i) gx[i] += g;
      }
    });
  }
  return y;
}

Tensor mean(const Tensor& x) {
  check_inputs(OpKind::Mean, {&x});
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  const double inv = 1.0 / double(x.size());
  bool trace = tracing({&x});
  Tensor y = make_output(OpKind::Mean, {1}, {acc * inv}, trace);
  if (trace) {
    auto dx = x.data_ptr();
    auto dy = y.data_ptr();
    record(OpKind::Mean, {dx}, y, [dx, dy, inv] {
      if (double* gx = grad_sink(*dx)) {
        const double g = dy->grad[0] * inv;
        for (std::size_t i = 0; i < dx->values.size(); ++i) gx[i] += g;
      }
    });
  }
  return y;
}

Tensor mean_dim(const Tensor& x, int dim) {
  check_inputs(OpKind::MeanDim, {&x});
  const Shape& s = x.shape();
  if (dim < 0 || dim >= int(s.size()))
    throw shape_error("mean-dim dim out of range");
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (int(i) != dim) out_shape.push_back(s[i]);
  if (out_shape.empty()) out_shape.push_back(1);

  std::size_t outer = 1, inner = 1;
  const std::size_t k = std::size_t(s[std::size_t(dim)]);
  for (int i = 0; i < dim; ++i) outer *= std::size_t(s[std::size_t(i)]);
  for (std::size_t i = std::size_t(dim) + 1; i < s.size(); ++i)
    inner *= std::size_t(s[i]);
  const double inv = 1.0 / double(k);

  std::vector<double> out(outer * inner, 0.0);
  const auto& xv = x.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < k; ++j) {
      const double* src = xv.data() + (o * k + j) * inner;
      double* dst = out.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  for (double& v : out) v *= inv;

  bool trace = tracing({&x});
  Tensor y = make_output(OpKind::MeanDim, out_shape, std::move(out), trace);
  if (trace) {
    auto dx = x.data_ptr();
    auto dy = y.data_ptr();
    record(OpKind::MeanDim, {dx}, y, [dx, dy, outer, inner, k, inv] {
      if (double* gx = grad_sink(*dx)) {
        const double* g = dy->grad.data();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < k; ++j) {
            double* dst = gx + (o * k + j) * inner;
            const double* src = g + o * inner;
            for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i] * inv;
          }
      }
    });
  }
  return y;
}

// ---- losses ----------------------------------------------------------------

Tensor cross_entropy_with_logits(const Tensor& logits,
                                 const std::vector<int>& targets) {
  check_inputs(OpKind::CrossEntropyLogits, {&logits});
  if (logits.ndim() < 1) throw shape_error("cross-entropy on scalar logits");
  const int V = logits.shape().back();
  const std::size_t rows = logits.size() / std::size_t(V);
  if (targets.size() != rows)
    throw shape_error("cross-entropy targets length " +
                      std::to_string(targets.size()) + " != rows " +
                      std::to_string(rows));
  for (int t : targets)
    if (t < 0 || t >= V)
      throw vocab_error("cross-entropy target " + std::to_string(t) +
                        " out of vocab range");

  Shape out_shape(logits.shape().begin(), logits.shape().end() - 1);
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<double> out(rows);
  std::vector<double> lse(rows);
  const auto& lv = logits.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = lv.data() + r * V;
    double mx = row[0];
    for (int i = 1; i < V; ++i) mx = std::max(mx, row[i]);
    double z = 0.0;
    for (int i = 0; i < V; ++i) z += std::exp(row[i] - mx);
    lse[r] = mx + std::log(z);
    out[r] = lse[r] - row[targets[r]];
  }
  bool trace = tracing({&logits});
  Tensor y = make_output(OpKind::CrossEntropyLogits, out_shape, std::move(out),
                         trace);
  if (trace) {
    auto dl = logits.data_ptr();
    auto dy = y.data_ptr();
    record(OpKind::CrossEntropyLogits, {dl}, y,
           [dl, dy, targets, V, rows, lse] {
             if (double* gl = grad_sink(*dl)) {
               const double* g = dy->grad.data();
               for (std::size_t r = 0; r < rows; ++r) {
                 const double* row = dl->values.data() + r * V;
                 double* gr = gl + r * V;
                 const double gi = g[r];
                 for (int i = 0; i < V; ++i)
                   gr[i] += gi * std::exp(row[i] - lse[r]);
                 gr[targets[r]] -= gi;
               }
             }
           });
  }
  return y;
}

Tensor mse(const Tensor& pred, const Tensor& target) {
  check_inputs(OpKind::Mse, {&pred, &target});
  if (pred.shape() != target.shape())
    throw shape_error("mse shape mismatch: " + shape_str(pred.shape()) +
                      " vs " + shape_str(target.shape()));
  const std::size_t n = pred.size();
  double acc = 0.0;
  const auto& pv = pred.values();
  const auto& tv = target.values();
  for (std::size_t i = 0; i < n; ++i) {
    const double d = pv[i] - tv[i];
    acc += d * d;
  }
  const double inv = 1.0 / double(n);
  bool trace = tracing({&pred, &target});
  Tensor y = make_output(OpKind::Mse, {1}, {acc * inv}, trace);
  if (trace) {
    auto dp = pred.data_ptr();
    auto dt = target.data_ptr();
    auto dy = y.data_ptr();
    record(OpKind::Mse, {dp, dt}, y, [dp, dt, dy, n, inv] {
      const double g = dy->grad[0] * 2.0 * inv;
      double* gp = grad_sink(*dp);
      double* gt = grad_sink(*dt);
      for (std::size_t i = 0; i < n; ++i) {
        const double d = dp->values[i] - dt->values[i];
        if (gp) gp[i] += g * d;
        if (gt) gt[i] -= g * d;
      }
    });
  }
  return y;
}

// ---- fused attention ---------------------------------------------------------

Tensor fused_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                       int n_heads, bool causal) {
  check_inputs(OpKind::FusedAttention, {&q, &k, &v});
  if (q.ndim() != 3 || q.shape() != k.shape() || k.shape() != v.shape())
    throw shape_error("fused-attention expects equal [B,S,d] q/k/v");
  const int B = q.dim(0), S = q.dim(1), d = q.dim(2);
  if (d % n_heads != 0)
    throw shape_error("fused-attention: d_model not divisible by n_heads");
  const int H = n_heads, dk = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(double(dk));

  // attention probabilities are kept for the backward pass; masked upper
  // triangle entries are never written (stay zero)
  auto probs = std::make_shared<std::vector<double>>(
      std::size_t(B) * H * S * S, 0.0);
  std::vector<double> out(q.size(), 0.0);
  const double* qv = q.values().data();
  const double* kv = k.values().data();
  const double* vv = v.values().data();

  double* outp = out.data();
  parallel_for(std::size_t(B) * H, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t bh = lo; bh < hi; ++bh) {
      const int b = int(bh / std::size_t(H));
      const int h = int(bh % std::size_t(H));
      const int col = h * dk;
      double* pr = probs->data() + bh * S * S;
      for (int s = 0; s < S; ++s) {
        const int lim = causal ? s + 1 : S;
        const double* qrow = qv + (std::size_t(b) * S + s) * d + col;
        double* prow = pr + std::size_t(s) * S;
        double mx = -1e300;
        for (int t = 0; t < lim; ++t) {
          const double* krow = kv + (std::size_t(b) * S + t) * d + col;
          double dot = 0.0;
          for (int j = 0; j < dk; ++j) dot += qrow[j] * krow[j];
          prow[t] = dot * inv_sqrt;
          mx = std::max(mx, prow[t]);
        }
        double z = 0.0;
        for (int t = 0; t < lim; ++t) {
          prow[t] = std::exp(prow[t] - mx);
          z += prow[t];
        }
        const double inv_z = 1.0 / z;
        double* orow = outp + (std::size_t(b) * S + s) * d + col;
        for (int t = 0; t < lim; ++t) {
          prow[t] *= inv_z;
          const double* vrow = vv + (std::size_t(b) * S + t) * d + col;
          const double p = prow[t];
          for (int j = 0; j < dk; ++j) orow[j] += p * vrow[j];
        }
      }
    }
  });

  bool trace = tracing({&q, &k, &v});
  Tensor y = make_output(OpKind::FusedAttention, q.shape(), std::move(out),
                         trace);
  if (trace) {
    auto dq = q.data_ptr();
    auto dkp = k.data_ptr();
    auto dv = v.data_ptr();
    auto dy = y.data_ptr();
    record(OpKind::FusedAttention, {dq, dkp, dv}, y,
           [dq, dkp, dv, dy, probs, B, H, S, d, dk, causal, inv_sqrt] {
             double* gq = grad_sink(*dq);
             double* gk = grad_sink(*dkp);
             double* gv = grad_sink(*dv);
             const double* g = dy->grad.data();
             const double* qv = dq->values.data();
             const double* kv = dkp->values.data();
             const double* vv = dv->values.data();
             // (b,h) pairs touch disjoint rows/columns of the grads, so the
             // parallel split below cannot race or reorder accumulation
             parallel_for(std::size_t(B) * H, [&](std::size_t lo,
                                                  std::size_t hi) {
               auto datt = std::vector<double>(std::size_t(S));
               for (std::size_t bh = lo; bh < hi; ++bh) {
                 const int b = int(bh / std::size_t(H));
                 const int h = int(bh % std::size_t(H));
                 const int col = h * dk;
                 const double* pr = probs->data() + bh * S * S;
                 for (int s = 0; s < S; ++s) {
                   const int lim = causal ? s + 1 : S;
                   const double* grow =
                       g + (std::size_t(b) * S + s) * d + col;
                   const double* prow = pr + std::size_t(s) * S;
                   // datt_t = dout . v_t ; dv_t += p_t * dout
                   for (int t = 0; t < lim; ++t) {
                     const double* vrow =
                         vv + (std::size_t(b) * S + t) * d + col;
                     double dot = 0.0;
                     for (int j = 0; j < dk; ++j) dot += grow[j] * vrow[j];
                     datt[std::size_t(t)] = dot;
                     if (gv) {
                       double* gvrow =
                           gv + (std::size_t(b) * S + t) * d + col;
                       const double p = prow[t];
                       for (int j = 0; j < dk; ++j) gvrow[j] += p * grow[j];
                     }
                   }
                   // softmax backward within the visible range
                   double mixed = 0.0;
                   for (int t = 0; t < lim; ++t)
                     mixed += datt[std::size_t(t)] * prow[t];
                   const double* qrow =
                       qv + (std::size_t(b) * S + s) * d + col;
                   double* gqrow =
                       gq ? gq + (std::size_t(b) * S + s) * d + col : nullptr;
                   for (int t = 0; t < lim; ++t) {
                     const double ds =
                         prow[t] * (datt[std::size_t(t)] - mixed) * inv_sqrt;
                     if (ds == 0.0) continue;
                     const double* krow =
                         kv + (std::size_t(b) * S + t) * d + col;
                     if (gqrow)
                       for (int j = 0; j < dk; ++j) gqrow[j] += ds * krow[j];
                     if (gk) {
                       double* gkrow =
                           gk + (std::size_t(b) * S + t) * d + col;
                       for (int j = 0; j < dk; ++j) gkrow[j] += ds * qrow[j];
                     }
                   }
                 }
               }
             });
           });
  }
  return y;
}

// ---- backward --------------------------------------------------------------

namespace {

void run_backward(const Tensor& loss, const std::vector<Tensor>& frozen,
                  bool gated) {
  Tape* tape = Tape::current();
  if (!tape) throw contract_error("backward without an active tape");
  if (loss.size() != 1)
    throw contract_error("backward on non-scalar loss " +
                         shape_str(loss.shape()));
  const auto& nodes = tape->nodes();
  bool produced = false;
  for (const auto& n : nodes)
    if (n.output == loss.data_ptr()) {
      produced = true;
      break;
    }
  if (!produced)
    throw contract_error("loss tensor was not produced by the active tape");

  if (gated) {
    for (const auto& t : frozen) {
      if (!t.defined() || !t.is_param() || !t.requires_grad())
        throw contract_error(
            "gated_backward: frozen set contains a non-parameter tensor");
      t.data_ptr()->grad_blocked = true;
    }
  }

  loss.data_ptr()->grad.assign(1, 1.0);
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // nothing flowed here
    it->backward();
  }

  if (gated) {
    for (const auto& t : frozen) t.data_ptr()->grad_blocked = false;
  }

  // post-pass finiteness of everything the pass touched
  for (const auto& n : nodes) {
    for (const auto& in : n.inputs) {
      if (in->grad.empty()) continue;
      for (double v : in->grad)
        if (!std::isfinite(v))
          throw numeric_error(std::string("non-finite gradient out of op ") +
                              op_name(n.kind));
    }
  }
}

}  // namespace

void backward(const Tensor& loss) { run_backward(loss, {}, false); }

void gated_backward(const Tensor& loss, const std::vector<Tensor>& frozen) {
  run_backward(loss, frozen, true);
}

void zero_grads(std::vector<Tensor>& params) {
  for (auto& p : params) p.zero_grad();
}

std::uint64_t params_hash(const std::vector<Tensor>& params) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& p : params)
    h = fnv1a(p.values().data(), p.values().size() * sizeof(double), h);
  return h;
}

}  // namespace coc
