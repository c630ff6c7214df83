#include "ralign/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace ralign {

namespace {

thread_local Tape* g_active_tape = nullptr;
u64 g_tape_epoch_counter = 1;

std::vector<size_t> strides_of(const std::vector<int>& shape) {
  std::vector<size_t> s(shape.size());
  size_t acc = 1;
  for (int d = static_cast<int>(shape.size()) - 1; d >= 0; --d) {
    s[static_cast<size_t>(d)] = acc;
    acc *= static_cast<size_t>(shape[static_cast<size_t>(d)]);
  }
  return s;
}

int norm_axis(int axis, int rank, const char* op) {
  int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank)
    throw std::invalid_argument(std::string(op) + ": axis " + std::to_string(axis) +
                                " out of range for rank " + std::to_string(rank));
  return a;
}

// Trailing-dimension broadcast of two shapes; throws on mismatch.
std::vector<int> broadcast_shape(const std::vector<int>& a, const std::vector<int>& b,
                                 const char* op) {
  size_t ra = a.size(), rb = b.size();
  size_t r = std::max(ra, rb);
  std::vector<int> out(r);
  for (size_t i = 0; i < r; ++i) {
    int da = i < r - ra ? 1 : a[i - (r - ra)];
    int db = i < r - rb ? 1 : b[i - (r - rb)];
    if (da != db && da != 1 && db != 1)
      throw std::invalid_argument(std::string(op) + ": shapes not broadcastable " +
                                  shape_str(a) + " vs " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `shape` aligned to `out` rank, zeroed on broadcast dimensions.
std::vector<size_t> bcast_strides(const std::vector<int>& shape, const std::vector<int>& out) {
  std::vector<size_t> base = strides_of(shape);
  size_t pad = out.size() - shape.size();
  std::vector<size_t> s(out.size(), 0);
  for (size_t i = 0; i < shape.size(); ++i) {
    s[pad + i] = (shape[i] == 1 && out[pad + i] != 1) ? 0 : base[i];
  }
  return s;
}

// Odometer walk over `out_shape`, producing offsets into two broadcast inputs.
template <typename Body>
void for_broadcast(const std::vector<int>& out_shape, const std::vector<size_t>& sa,
                   const std::vector<size_t>& sb, Body&& body) {
  size_t n = shape_numel(out_shape);
  int rank = static_cast<int>(out_shape.size());
  std::vector<int> idx(static_cast<size_t>(rank), 0);
  size_t oa = 0, ob = 0;
  for (size_t i = 0; i < n; ++i) {
    body(i, oa, ob);
    for (int d = rank - 1; d >= 0; --d) {
      size_t ud = static_cast<size_t>(d);
      idx[ud]++;
      oa += sa[ud];
      ob += sb[ud];
      if (idx[ud] < out_shape[ud]) break;
      oa -= sa[ud] * static_cast<size_t>(out_shape[ud]);
      ob -= sb[ud] * static_cast<size_t>(out_shape[ud]);
      idx[ud] = 0;
    }
  }
}

struct OpCtx {
  Tape* tape = Tape::active();
  std::vector<int> parents;
  bool any_grad_input = false;
  bool recording = false;

  void add_input(const Tensor& t) {
    if (t.requires_grad) any_grad_input = true;
    if (!tape) {
      parents.push_back(-1);
      return;
    }
    int id = -1;
    if (t.node >= 0 && t.tape_epoch == tape->epoch()) {
      id = t.node;
    } else if (t.requires_grad) {
      id = tape->leaf_id(t);
    }
    if (id >= 0) recording = true;
    parents.push_back(id);
  }

  void finish(Tensor& out, std::function<void(Tape&, const Tensor&)> bw) {
    out.requires_grad = any_grad_input;
    if (tape && recording) {
      out.node = tape->record(out.shape, parents, std::move(bw));
      out.tape_epoch = tape->epoch();
    }
  }
};

// f64 accumulating matmul kernels; C (double) is zero-initialized by callers.
void mm_nn(const float* A, const float* B, double* C, int M, int N, int K) {
  for (int i = 0; i < M; ++i) {
    double* c = C + static_cast<size_t>(i) * N;
    const float* a = A + static_cast<size_t>(i) * K;
    for (int k = 0; k < K; ++k) {
      double av = a[k];
      const float* b = B + static_cast<size_t>(k) * N;
      for (int j = 0; j < N; ++j) c[j] += av * static_cast<double>(b[j]);
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
void mm_nt(const float* A, const float* B, double* C, int M, int N, int K) {
  for (int i = 0; i < M; ++i) {
    const float* a = A + static_cast<size_t>(i) * K;
    double* c = C + static_cast<size_t>(i) * N;
    for (int j = 0; j < N; ++j) {
      const float* b = B + static_cast<size_t>(j) * K;
      double acc = 0.0;
      for (int k = 0; k < K; ++k) acc += static_cast<double>(a[k]) * static_cast<double>(b[k]);
      c[j] += acc;
    }
  }
}

// C[K,N] += A[M,K]^T * B[M,N]
void mm_tn(const float* A, const float* B, double* C, int M, int N, int K) {
  for (int i = 0; i < M; ++i) {
    const float* a = A + static_cast<size_t>(i) * K;
    const float* b = B + static_cast<size_t>(i) * N;
    for (int k = 0; k < K; ++k) {
      double av = a[k];
      double* c = C + static_cast<size_t>(k) * N;
      for (int j = 0; j < N; ++j) c[j] += av * static_cast<double>(b[j]);
    }
  }
}

void store_f32(const std::vector<double>& src, float* dst) {
  for (size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<float>(src[i]);
}

double exact_of(const Tensor& t) {
  return t.has_exact ? t.exact : static_cast<double>((*t.data)[0]);
}

using UnaryFwd = double (*)(double);
using UnaryGrad = double (*)(double /*x*/, double /*y*/);

Tensor unary_op(const Tensor& a, const char* /*name*/, UnaryFwd f, UnaryGrad df) {
  OpCtx ctx;
  ctx.add_input(a);
  Tensor out = Tensor::zeros(a.shape);
  size_t n = a.numel();
  const float* ap = a.ptr();
  float* op = out.ptr();
  for (size_t i = 0; i < n; ++i) op[i] = static_cast<float>(f(ap[i]));
  if (out.rank() == 0) {
    out.exact = f(exact_of(a));
    out.has_exact = true;
  }
  int pa = ctx.parents.empty() ? -1 : ctx.parents[0];
  ctx.finish(out, [pa, a, out, df](Tape& tp, const Tensor& g) {
    if (pa < 0) return;
    Tensor ga = Tensor::zeros(a.shape);
    size_t n2 = a.numel();
    const float* ap2 = a.ptr();
    const float* yp = out.ptr();
    const float* gp = g.ptr();
    float* gap = ga.ptr();
    for (size_t i = 0; i < n2; ++i)
      gap[i] = static_cast<float>(df(ap2[i], yp[i]) * static_cast<double>(gp[i]));
    tp.accumulate(pa, ga);
  });
  return out;
}

using BinFwd = double (*)(double, double);

Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, BinFwd f,
                 BinFwd dfa, BinFwd dfb) {
  std::vector<int> out_shape = broadcast_shape(a.shape, b.shape, name);
  std::vector<size_t> sa = bcast_strides(a.shape, out_shape);
  std::vector<size_t> sb = bcast_strides(b.shape, out_shape);
  OpCtx ctx;
  ctx.add_input(a);
  ctx.add_input(b);
  Tensor out = Tensor::zeros(out_shape);
  {
    const float* ap = a.ptr();
    const float* bp = b.ptr();
    float* op = out.ptr();
    for_broadcast(out_shape, sa, sb, [&](size_t i, size_t oa, size_t ob) {
      op[i] = static_cast<float>(f(ap[oa], bp[ob]));
    });
    if (out.rank() == 0) {
      out.exact = f(exact_of(a), exact_of(b));
      out.has_exact = true;
    }
  }
  int pa = ctx.parents[0], pb = ctx.parents[1];
  ctx.finish(out, [pa, pb, a, b, out_shape, sa, sb, dfa, dfb](Tape& tp, const Tensor& g) {
    const float* ap = a.ptr();
    const float* bp = b.ptr();
    const float* gp = g.ptr();
    if (pa >= 0) {
      std::vector<double> ga(a.numel(), 0.0);
      for_broadcast(out_shape, sa, sb, [&](size_t i, size_t oa, size_t ob) {
        ga[oa] += dfa(ap[oa], bp[ob]) * static_cast<double>(gp[i]);
      });
      Tensor gt = Tensor::zeros(a.shape);
      store_f32(ga, gt.ptr());
      tp.accumulate(pa, gt);
    }
    if (pb >= 0) {
      std::vector<double> gb(b.numel(), 0.0);
      for_broadcast(out_shape, sa, sb, [&](size_t i, size_t oa, size_t ob) {
        gb[ob] += dfb(ap[oa], bp[ob]) * static_cast<double>(gp[i]);
      });
      Tensor gt = Tensor::zeros(b.shape);
      store_f32(gb, gt.ptr());
      tp.accumulate(pb, gt);
    }
  });
  return out;
}

// Decomposition for reductions along one axis: (outer, n, inner).
struct AxisSplit {
  size_t outer, n, inner;
};

AxisSplit axis_split(const std::vector<int>& shape, int axis) {
  AxisSplit s{1, static_cast<size_t>(shape[static_cast<size_t>(axis)]), 1};
  for (int i = 0; i < axis; ++i) s.outer *= static_cast<size_t>(shape[static_cast<size_t>(i)]);
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i)
    s.inner *= static_cast<size_t>(shape[i]);
  return s;
}

std::vector<int> reduce_shape(const std::vector<int>& shape, int axis, bool keepdim) {
  std::vector<int> out = shape;
  if (keepdim) {
    out[static_cast<size_t>(axis)] = 1;
  } else {
    out.erase(out.begin() + axis);
  }
  return out;
}

}  // namespace

size_t shape_numel(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor shape has non-positive extent " + shape_str(shape));
    n *= static_cast<size_t>(d);
  }
  return n;
}

size_t Tensor::numel() const { return shape_numel(shape); }

double Tensor::scalar() const {
  if (numel() != 1)
    throw std::invalid_argument("scalar: tensor has shape " + shape_str(shape));
  if (has_exact) return exact;
  return static_cast<double>((*data)[0]);
}

Tensor Tensor::zeros(const std::vector<int>& shape) {
  Tensor t;
  t.shape = shape;
  t.data = std::make_shared<std::vector<float>>(shape_numel(shape), 0.0f);
  return t;
}

Tensor Tensor::full(const std::vector<int>& shape, float value) {
  Tensor t = zeros(shape);
  std::fill(t.data->begin(), t.data->end(), value);
  return t;
}

Tensor Tensor::from(const std::vector<int>& shape, std::vector<float> values) {
  if (values.size() != shape_numel(shape))
    throw std::invalid_argument("from: " + std::to_string(values.size()) +
                                " values for shape " + shape_str(shape));
  Tensor t;
  t.shape = shape;
  t.data = std::make_shared<std::vector<float>>(std::move(values));
  return t;
}

Tensor Tensor::scalar_value(float v) { return from({}, {v}); }

Tensor Tensor::randn(const std::vector<int>& shape, Rng& rng, double sigma) {
  Tensor t = zeros(shape);
  for (float& x : *t.data) x = static_cast<float>(rng.normal(0.0, sigma));
  return t;
}

Tensor Tensor::with_grad(bool rg) const {
  Tensor t = *this;
  t.requires_grad = rg;
  return t;
}

Tensor Tensor::detached_copy() const {
  Tensor t;
  t.shape = shape;
  t.data = std::make_shared<std::vector<float>>(*data);
  return t;
}

// ---- Tape ------------------------------------------------------------------

Tape::Tape() : epoch_(g_tape_epoch_counter++) {}

Tape* Tape::active() { return g_active_tape; }

int Tape::leaf_id(const Tensor& t) {
  if (!t.requires_grad)
    throw std::runtime_error("tape: leaf registration for a tensor without requires_grad");
  const void* key = t.data.get();
  auto it = leaves_.find(key);
  if (it != leaves_.end()) return it->second;
  Node n;
  n.shape = t.shape;
  int id = static_cast<int>(nodes_.size());
  nodes_.push_back(std::move(n));
  leaves_.emplace(key, id);
  return id;
}

int Tape::record(const std::vector<int>& shape, std::vector<int> parents,
                 std::function<void(Tape&, const Tensor&)> backward) {
  int id = static_cast<int>(nodes_.size());
  for (int p : parents) {
    if (p >= id) throw std::runtime_error("tape: parent recorded after child");
  }
  Node n;
  n.shape = shape;
  n.parents = std::move(parents);
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return id;
}

int Tape::id_of(const Tensor& t) const {
  if (t.node >= 0 && t.tape_epoch == epoch_) return t.node;
  auto it = leaves_.find(t.data.get());
  if (it != leaves_.end()) return it->second;
  return -1;
}

void Tape::accumulate(int id, const Tensor& g) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (g.shape != n.shape)
    throw std::runtime_error("tape: gradient shape " + shape_str(g.shape) +
                             " does not match node shape " + shape_str(n.shape));
  if (static_cast<size_t>(id) >= grads_.size()) grads_.resize(nodes_.size());
  if (!grads_[static_cast<size_t>(id)]) {
    grads_[static_cast<size_t>(id)] = g.detached_copy();
    return;
  }
  Tensor& acc = *grads_[static_cast<size_t>(id)];
  float* ap = acc.ptr();
  const float* gp = g.ptr();
  size_t n2 = acc.numel();
  for (size_t i = 0; i < n2; ++i)
    ap[i] = static_cast<float>(static_cast<double>(ap[i]) + static_cast<double>(gp[i]));
}

void Tape::backward(const Tensor& root) {
  int rid = id_of(root);
  if (rid < 0) throw std::runtime_error("backward: root is not recorded on this tape");
  if (root.rank() != 0)
    throw std::invalid_argument("backward: root must be rank-0, got shape " +
                                shape_str(root.shape));
  grads_.assign(nodes_.size(), std::nullopt);
  std::vector<char> reach(nodes_.size(), 0);
  reach[static_cast<size_t>(rid)] = 1;
  for (int i = rid; i >= 0; --i) {
    if (!reach[static_cast<size_t>(i)]) continue;
    for (int p : nodes_[static_cast<size_t>(i)].parents)
      if (p >= 0) reach[static_cast<size_t>(p)] = 1;
  }
  grads_[static_cast<size_t>(rid)] = Tensor::full({}, 1.0f);
  for (int i = rid; i >= 0; --i) {
    size_t ui = static_cast<size_t>(i);
    if (!reach[ui] || !grads_[ui] || !nodes_[ui].backward) continue;
    nodes_[ui].backward(*this, *grads_[ui]);
  }
}

const Tensor* Tape::grad_of(const Tensor& t) const {
  int id = id_of(t);
  if (id < 0 || static_cast<size_t>(id) >= grads_.size()) return nullptr;
  const auto& g = grads_[static_cast<size_t>(id)];
  return g ? &*g : nullptr;
}

TapeGuard::TapeGuard(Tape& t) : prev_(g_active_tape) { g_active_tape = &t; }
TapeGuard::~TapeGuard() { g_active_tape = prev_; }

// ---- elementwise ops ---------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

namespace {
Tensor exact_scalar_tensor(double s) {
  Tensor t = Tensor::scalar_value(static_cast<float>(s));
  t.exact = s;
  t.has_exact = true;
  return t;
}
}  // namespace

Tensor add_scalar(const Tensor& a, double s) {
  return binary_op(
      a, exact_scalar_tensor(s), "add_scalar",
      [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return binary_op(
      a, exact_scalar_tensor(s), "mul_scalar",
      [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor pow_scalar(const Tensor& a, double p) {
  OpCtx ctx;
  ctx.add_input(a);
  Tensor out = Tensor::zeros(a.shape);
  const float* ap = a.ptr();
  float* op = out.ptr();
  size_t n = a.numel();
  for (size_t i = 0; i < n; ++i) op[i] = static_cast<float>(std::pow(ap[i], p));
  if (out.rank() == 0) {
    out.exact = std::pow(exact_of(a), p);
    out.has_exact = true;
  }
  int pa = ctx.parents[0];
  ctx.finish(out, [pa, a, p](Tape& tp, const Tensor& g) {
    if (pa < 0) return;
    Tensor ga = Tensor::zeros(a.shape);
    const float* ap2 = a.ptr();
    const float* gp = g.ptr();
    float* gap = ga.ptr();
    size_t n2 = a.numel();
    for (size_t i = 0; i < n2; ++i)
      gap[i] = static_cast<float>(p * std::pow(ap2[i], p - 1.0) * static_cast<double>(gp[i]));
    tp.accumulate(pa, ga);
  });
  return out;
}

Tensor exp(const Tensor& a) {
  return unary_op(
      a, "exp", [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op(
      a, "log", [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor abs(const Tensor& a) {
  return unary_op(
      a, "abs", [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a, "sigmoid", [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& a) {
  return unary_op(
      a, "gelu",
      [](double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); },
      [](double x, double) {
        double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
        double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
        return cdf + x * pdf;
      });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
  OpCtx ctx;
  ctx.add_input(a);
  Tensor out = Tensor::zeros(a.shape);
  const float* ap = a.ptr();
  float* op = out.ptr();
  size_t n = a.numel();
  for (size_t i = 0; i < n; ++i)
    op[i] = static_cast<float>(std::min(hi, std::max(lo, static_cast<double>(ap[i]))));
  if (out.rank() == 0) {
    out.exact = std::min(hi, std::max(lo, exact_of(a)));
    out.has_exact = true;
  }
  int pa = ctx.parents[0];
  ctx.finish(out, [pa, a, lo, hi](Tape& tp, const Tensor& g) {
    if (pa < 0) return;
    Tensor ga = Tensor::zeros(a.shape);
    const float* ap2 = a.ptr();
    const float* gp = g.ptr();
    float* gap = ga.ptr();
    size_t n2 = a.numel();
    for (size_t i = 0; i < n2; ++i) {
      double x = ap2[i];
      gap[i] = (x > lo && x < hi) ? gp[i] : 0.0f;
    }
    tp.accumulate(pa, ga);
  });
  return out;
}

// ---- matmul ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || a.rank() > 3 || b.rank() < 2 || b.rank() > 3)
    throw std::invalid_argument("matmul: ranks must be 2 or 3, got " + shape_str(a.shape) +
                                " x " + shape_str(b.shape));
  int Ba = a.rank() == 3 ? a.shape[0] : 1;
  int Bb = b.rank() == 3 ? b.shape[0] : 1;
  int M = a.shape[a.rank() - 2], Ka = a.shape[a.rank() - 1];
  int Kb = b.shape[b.rank() - 2], N = b.shape[b.rank() - 1];
  if (Ka != Kb)
    throw std::invalid_argument("matmul: inner dimensions mismatch " + shape_str(a.shape) +
                                " x " + shape_str(b.shape));
  if (Ba != Bb && Ba != 1 && Bb != 1)
    throw std::invalid_argument("matmul: batch dimensions mismatch " + shape_str(a.shape) +
                                " x " + shape_str(b.shape));
  int B = std::max(Ba, Bb);
  bool batched_out = a.rank() == 3 || b.rank() == 3;
  std::vector<int> out_shape = batched_out ? std::vector<int>{B, M, N} : std::vector<int>{M, N};

  OpCtx ctx;
  ctx.add_input(a);
  ctx.add_input(b);
  Tensor out = Tensor::zeros(out_shape);
  size_t a_batch_stride = Ba == 1 ? 0 : static_cast<size_t>(M) * Ka;
  size_t b_batch_stride = Bb == 1 ? 0 : static_cast<size_t>(Kb) * N;
  {
    std::vector<double> tmp(static_cast<size_t>(M) * N);
    for (int bi = 0; bi < B; ++bi) {
      std::fill(tmp.begin(), tmp.end(), 0.0);
      mm_nn(a.ptr() + a_batch_stride * bi, b.ptr() + b_batch_stride * bi, tmp.data(), M, N, Ka);
      store_f32(tmp, out.ptr() + static_cast<size_t>(M) * N * bi);
    }
  }
  int pa = ctx.parents[0], pb = ctx.parents[1];
  int K = Ka;
  ctx.finish(out, [pa, pb, a, b, B, M, N, K, a_batch_stride, b_batch_stride](Tape& tp,
                                                                             const Tensor& g) {
    size_t g_batch_stride = static_cast<size_t>(M) * N;
    if (pa >= 0) {
      // dA = g * B^T, reduced over batch when A was broadcast
      bool reduce = a_batch_stride == 0 && B > 1;
      std::vector<double> tmp(static_cast<size_t>(M) * K, 0.0);
      Tensor ga = Tensor::zeros(a.shape);
      for (int bi = 0; bi < B; ++bi) {
        if (!reduce) std::fill(tmp.begin(), tmp.end(), 0.0);
        mm_nt(g.ptr() + g_batch_stride * bi, b.ptr() + b_batch_stride * bi, tmp.data(), M, K, N);
        if (!reduce) store_f32(tmp, ga.ptr() + a_batch_stride * bi);
      }
      if (reduce) store_f32(tmp, ga.ptr());
      tp.accumulate(pa, ga);
    }
    if (pb >= 0) {
      // dB = A^T * g, reduced over batch when B was broadcast
      bool reduce = b_batch_stride == 0 && B > 1;
      std::vector<double> tmp(static_cast<size_t>(K) * N, 0.0);
      Tensor gb = Tensor::zeros(b.shape);
      for (int bi = 0; bi < B; ++bi) {
        if (!reduce) std::fill(tmp.begin(), tmp.end(), 0.0);
        mm_tn(a.ptr() + a_batch_stride * bi, g.ptr() + g_batch_stride * bi, tmp.data(), M, N, K);
        if (!reduce) store_f32(tmp, gb.ptr() + b_batch_stride * bi);
      }
      if (reduce) store_f32(tmp, gb.ptr());
      tp.accumulate(pb, gb);
    }
  });
  return out;
}

// ---- reductions ----------------------------------------------------------------

Tensor sum(const Tensor& a) {
  OpCtx ctx;
  ctx.add_input(a);
  double acc = 0.0;
  const float* ap = a.ptr();
  size_t n = a.numel();
  for (size_t i = 0; i < n; ++i) acc += static_cast<double>(ap[i]);
  Tensor out = Tensor::scalar_value(static_cast<float>(acc));
  out.exact = acc;
  out.has_exact = true;
  int pa = ctx.parents[0];
  ctx.finish(out, [pa, a](Tape& tp, const Tensor& g) {
    if (pa < 0) return;
    Tensor ga = Tensor::full(a.shape, g.at(0));
    tp.accumulate(pa, ga);
  });
  return out;
}

Tensor sum(const Tensor& a, int axis, bool keepdim) {
  int ax = norm_axis(axis, a.rank(), "sum");
  AxisSplit sp = axis_split(a.shape, ax);
  std::vector<int> out_shape = reduce_shape(a.shape, ax, keepdim);
  OpCtx ctx;
  ctx.add_input(a);
  Tensor out = Tensor::zeros(out_shape);
  const float* ap = a.ptr();
  float* op = out.ptr();
  for (size_t o = 0; o < sp.outer; ++o) {
    for (size_t r = 0; r < sp.inner; ++r) {
      double acc = 0.0;
      for (size_t i = 0; i < sp.n; ++i) acc += static_cast<double>(ap[(o * sp.n + i) * sp.inner + r]);
      op[o * sp.inner + r] = static_cast<float>(acc);
      if (out.rank() == 0) {
        out.exact = acc;
        out.has_exact = true;
      }
    }
  }
  int pa = ctx.parents[0];
  ctx.finish(out, [pa, a, sp](Tape& tp, const Tensor& g) {
    if (pa < 0) return;
    Tensor ga = Tensor::zeros(a.shape);
    const float* gp = g.ptr();
    float* gap = ga.ptr();
    for (size_t o = 0; o < sp.outer; ++o)
      for (size_t i = 0; i < sp.n; ++i)
        for (size_t r = 0; r < sp.inner; ++r)
          gap[(o * sp.n + i) * sp.inner + r] = gp[o * sp.inner + r];
    tp.accumulate(pa, ga);
  });
  return out;
}

Tensor mean(const Tensor& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor mean(const Tensor& a, int axis, bool keepdim) {
  int ax = norm_axis(axis, a.rank(), "mean");
  double n = static_cast<double>(a.shape[static_cast<size_t>(ax)]);
  return mul_scalar(sum(a, axis, keepdim), 1.0 / n);
}

Tensor max(const Tensor& a, int axis, bool keepdim) {
  int ax = norm_axis(axis, a.rank(), "max");
  AxisSplit sp = axis_split(a.shape, ax);
  std::vector<int> out_shape = reduce_shape(a.shape, ax, keepdim);
  OpCtx ctx;
  ctx.add_input(a);
  Tensor out = Tensor::zeros(out_shape);
  auto argmax = std::make_shared<std::vector<size_t>>(sp.outer * sp.inner);
  const float* ap = a.ptr();
  float* op = out.ptr();
  for (size_t o = 0; o < sp.outer; ++o) {
    for (size_t r = 0; r < sp.inner; ++r) {
      size_t best = 0;
      float bv = ap[(o * sp.n + 0) * sp.inner + r];
      for (size_t i = 1; i < sp.n; ++i) {
        float v = ap[(o * sp.n + i) * sp.inner + r];
        if (v > bv) {
          bv = v;
          best = i;
        }
      }
      op[o * sp.inner + r] = bv;
      (*argmax)[o * sp.inner + r] = best;
    }
  }
  int pa = ctx.parents[0];
  ctx.finish(out, [pa, a, sp, argmax](Tape& tp, const Tensor& g) {
    if (pa < 0) return;
    Tensor ga = Tensor::zeros(a.shape);
    const float* gp = g.ptr();
    float* gap = ga.ptr();
    for (size_t o = 0; o < sp.outer; ++o)
      for (size_t r = 0; r < sp.inner; ++r) {
        size_t i = (*argmax)[o * sp.inner + r];
        gap[(o * sp.n + i) * sp.inner + r] = gp[o * sp.inner + r];
      }
    tp.accumulate(pa, ga);
  });
  return out;
}

// ---- shape ops -----------------------------------------------------------------

Tensor reshape(const Tensor& a, const std::vector<int>& shape) {
  if (shape_numel(shape) != a.numel())
    throw std::invalid_argument("reshape: cannot reshape " + shape_str(a.shape) + " to " +
                                shape_str(shape));
  OpCtx ctx;
  ctx.add_input(a);
  Tensor out;
  out.shape = shape;
  out.data = std::make_shared<std::vector<float>>(*a.data);
  int pa = ctx.parents[0];
  std::vector<int> orig = a.shape;
  ctx.finish(out, [pa, orig](Tape& tp, const Tensor& g) {
    if (pa < 0) return;
    Tensor ga;
    ga.shape = orig;
    ga.data = std::make_shared<std::vector<float>>(*g.data);
    tp.accumulate(pa, ga);
  });
  return out;
}

namespace {
Tensor transpose_raw(const Tensor& a, int d0, int d1) {
  std::vector<int> out_shape = a.shape;
  std::swap(out_shape[static_cast<size_t>(d0)], out_shape[static_cast<size_t>(d1)]);
  Tensor out = Tensor::zeros(out_shape);
  std::vector<size_t> as = strides_of(a.shape);
  std::vector<size_t> perm_strides = as;
  std::swap(perm_strides[static_cast<size_t>(d0)], perm_strides[static_cast<size_t>(d1)]);
  // walk output linearly; read input via permuted strides
  int rank = a.rank();
  std::vector<int> idx(static_cast<size_t>(rank), 0);
  size_t off = 0;
  const float* ap = a.ptr();
  float* op = out.ptr();
  size_t n = a.numel();
  for (size_t i = 0; i < n; ++i) {
    op[i] = ap[off];
    for (int d = rank - 1; d >= 0; --d) {
      size_t ud = static_cast<size_t>(d);
      idx[ud]++;
      off += perm_strides[ud];
      if (idx[ud] < out_shape[ud]) break;
      off -= perm_strides[ud] * static_cast<size_t>(out_shape[ud]);
      idx[ud] = 0;
    }
  }
  return out;
}
}  // namespace

Tensor transpose(const Tensor& a, int d0, int d1) {
  int r = a.rank();
  int a0 = norm_axis(d0, r, "transpose");
  int a1 = norm_axis(d1, r, "transpose");
  OpCtx ctx;
  ctx.add_input(a);
  Tensor out = transpose_raw(a, a0, a1);
  int pa = ctx.parents[0];
  ctx.finish(out, [pa, a0, a1](Tape& tp, const Tensor& g) {
    if (pa < 0) return;
    tp.accumulate(pa, transpose_raw(g, a0, a1));
  });
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: empty input list");
  int rank = parts[0].rank();
  int ax = norm_axis(axis, rank, "concat");
  std::vector<int> out_shape = parts[0].shape;
  int total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != rank) throw std::invalid_argument("concat: rank mismatch");
    for (int d = 0; d < rank; ++d) {
      if (d != ax && p.shape[static_cast<size_t>(d)] != out_shape[static_cast<size_t>(d)])
        throw std::invalid_argument("concat: shape mismatch " + shape_str(p.shape) + " vs " +
                                    shape_str(out_shape) + " on axis " + std::to_string(d));
    }
    total += p.shape[static_cast<size_t>(ax)];
  }
  out_shape[static_cast<size_t>(ax)] = total;

  OpCtx ctx;
  for (const Tensor& p : parts) ctx.add_input(p);
  Tensor out = Tensor::zeros(out_shape);
  AxisSplit osp = axis_split(out_shape, ax);
  float* op = out.ptr();
  size_t pos = 0;
  for (const Tensor& p : parts) {
    size_t pn = static_cast<size_t>(p.shape[static_cast<size_t>(ax)]);
    const float* pp = p.ptr();
    for (size_t o = 0; o < osp.outer; ++o)
      for (size_t i = 0; i < pn; ++i)
        std::memcpy(op + ((o * osp.n + pos + i) * osp.inner),
                    pp + ((o * pn + i) * osp.inner), osp.inner * sizeof(float));
    pos += pn;
  }
  std::vector<int> parents = ctx.parents;
  std::vector<Tensor> saved = parts;
  ctx.finish(out, [parents, saved, osp, ax](Tape& tp, const Tensor& g) {
    const float* gp = g.ptr();
    size_t pos2 = 0;
    for (size_t pi = 0; pi < saved.size(); ++pi) {
      size_t pn = static_cast<size_t>(saved[pi].shape[static_cast<size_t>(ax)]);
      if (parents[pi] >= 0) {
        Tensor gpart = Tensor::zeros(saved[pi].shape);
        float* dst = gpart.ptr();
        for (size_t o = 0; o < osp.outer; ++o)
          for (size_t i = 0; i < pn; ++i)
            std::memcpy(dst + ((o * pn + i) * osp.inner),
                        gp + ((o * osp.n + pos2 + i) * osp.inner), osp.inner * sizeof(float));
        tp.accumulate(parents[pi], gpart);
      }
      pos2 += pn;
    }
  });
  return out;
}

Tensor slice(const Tensor& a, int axis, int start, int len) {
  int ax = norm_axis(axis, a.rank(), "slice");
  int extent = a.shape[static_cast<size_t>(ax)];
  if (start < 0 || len <= 0 || start + len > extent)
    throw std::invalid_argument("slice: range [" + std::to_string(start) + "," +
                                std::to_string(start + len) + ") out of bounds for extent " +
                                std::to_string(extent));
  AxisSplit sp = axis_split(a.shape, ax);
  std::vector<int> out_shape = a.shape;
  out_shape[static_cast<size_t>(ax)] = len;
  OpCtx ctx;
  ctx.add_input(a);
  Tensor out = Tensor::zeros(out_shape);
  const float* ap = a.ptr();
  float* op = out.ptr();
  for (size_t o = 0; o < sp.outer; ++o)
    for (int i = 0; i < len; ++i)
      std::memcpy(op + ((o * static_cast<size_t>(len) + static_cast<size_t>(i)) * sp.inner),
                  ap + ((o * sp.n + static_cast<size_t>(start + i)) * sp.inner),
                  sp.inner * sizeof(float));
  int pa = ctx.parents[0];
  std::vector<int> orig = a.shape;
  ctx.finish(out, [pa, orig, sp, start, len](Tape& tp, const Tensor& g) {
    if (pa < 0) return;
    Tensor ga = Tensor::zeros(orig);
    float* gap = ga.ptr();
    const float* gp = g.ptr();
    for (size_t o = 0; o < sp.outer; ++o)
      for (int i = 0; i < len; ++i)
        std::memcpy(gap + ((o * sp.n + static_cast<size_t>(start + i)) * sp.inner),
                    gp + ((o * static_cast<size_t>(len) + static_cast<size_t>(i)) * sp.inner),
                    sp.inner * sizeof(float));
    tp.accumulate(pa, ga);
  });
  return out;
}

Tensor broadcast_to(const Tensor& a, const std::vector<int>& shape) {
  std::vector<int> check = broadcast_shape(a.shape, shape, "broadcast_to");
  if (check != shape)
    throw std::invalid_argument("broadcast_to: cannot broadcast " + shape_str(a.shape) +
                                " to " + shape_str(shape));
  std::vector<size_t> sa = bcast_strides(a.shape, shape);
  std::vector<size_t> sb(shape.size(), 0);
  OpCtx ctx;
  ctx.add_input(a);
  Tensor out = Tensor::zeros(shape);
  const float* ap = a.ptr();
  float* op = out.ptr();
  for_broadcast(shape, sa, sb, [&](size_t i, size_t oa, size_t) { op[i] = ap[oa]; });
  int pa = ctx.parents[0];
  ctx.finish(out, [pa, a, shape, sa, sb](Tape& tp, const Tensor& g) {
    if (pa < 0) return;
    std::vector<double> acc(a.numel(), 0.0);
    const float* gp = g.ptr();
    for_broadcast(shape, sa, sb,
                  [&](size_t i, size_t oa, size_t) { acc[oa] += static_cast<double>(gp[i]); });
    Tensor ga = Tensor::zeros(a.shape);
    store_f32(acc, ga.ptr());
    tp.accumulate(pa, ga);
  });
  return out;
}

Tensor masked_fill(const Tensor& a, const Tensor& mask, double value) {
  std::vector<int> bshape = broadcast_shape(a.shape, mask.shape, "masked_fill");
  if (bshape != a.shape)
    throw std::invalid_argument("masked_fill: mask " + shape_str(mask.shape) +
                                " does not broadcast onto " + shape_str(a.shape));
  std::vector<size_t> sa = bcast_strides(a.shape, a.shape);
  std::vector<size_t> sm = bcast_strides(mask.shape, a.shape);
  OpCtx ctx;
  ctx.add_input(a);
  Tensor out = Tensor::zeros(a.shape);
  const float* ap = a.ptr();
  const float* mp = mask.ptr();
  float* op = out.ptr();
  float fv = static_cast<float>(value);
  for_broadcast(a.shape, sa, sm, [&](size_t i, size_t oa, size_t om) {
    op[i] = mp[om] != 0.0f ? fv : ap[oa];
  });
  int pa = ctx.parents[0];
  Tensor msk = mask;
  std::vector<int> ashape = a.shape;
  ctx.finish(out, [pa, msk, ashape, sa, sm](Tape& tp, const Tensor& g) {
    if (pa < 0) return;
    Tensor ga = Tensor::zeros(ashape);
    const float* gp = g.ptr();
    const float* mp2 = msk.ptr();
    float* gap = ga.ptr();
    for_broadcast(ashape, sa, sm, [&](size_t i, size_t oa, size_t om) {
      if (mp2[om] == 0.0f) gap[oa] = gp[i];
    });
    tp.accumulate(pa, ga);
  });
  return out;
}

// ---- softmax -------------------------------------------------------------------

Tensor softmax(const Tensor& a, int axis) {
  int ax = norm_axis(axis, a.rank(), "softmax");
  AxisSplit sp = axis_split(a.shape, ax);
  OpCtx ctx;
  ctx.add_input(a);
  Tensor out = Tensor::zeros(a.shape);
  const float* ap = a.ptr();
  float* op = out.ptr();
  for (size_t o = 0; o < sp.outer; ++o) {
    for (size_t r = 0; r < sp.inner; ++r) {
      double m = -HUGE_VAL;
      for (size_t i = 0; i < sp.n; ++i)
        m = std::max(m, static_cast<double>(ap[(o * sp.n + i) * sp.inner + r]));
      double z = 0.0;
      for (size_t i = 0; i < sp.n; ++i)
        z += std::exp(static_cast<double>(ap[(o * sp.n + i) * sp.inner + r]) - m);
      for (size_t i = 0; i < sp.n; ++i) {
        size_t off = (o * sp.n + i) * sp.inner + r;
        op[off] = static_cast<float>(std::exp(static_cast<double>(ap[off]) - m) / z);
      }
    }
  }
  int pa = ctx.parents[0];
  ctx.finish(out, [pa, out, sp](Tape& tp, const Tensor& g) {
    if (pa < 0) return;
    Tensor ga = Tensor::zeros(out.shape);
    const float* sp_ = out.ptr();
    const float* gp = g.ptr();
    float* gap = ga.ptr();
    for (size_t o = 0; o < sp.outer; ++o) {
      for (size_t r = 0; r < sp.inner; ++r) {
        double dot = 0.0;
        for (size_t i = 0; i < sp.n; ++i) {
          size_t off = (o * sp.n + i) * sp.inner + r;
          dot += static_cast<double>(gp[off]) * static_cast<double>(sp_[off]);
        }
        for (size_t i = 0; i < sp.n; ++i) {
          size_t off = (o * sp.n + i) * sp.inner + r;
          gap[off] = static_cast<float>(static_cast<double>(sp_[off]) *
                                        (static_cast<double>(gp[off]) - dot));
        }
      }
    }
    tp.accumulate(pa, ga);
  });
  return out;
}

Tensor log_softmax(const Tensor& a, int axis) {
  int ax = norm_axis(axis, a.rank(), "log_softmax");
  AxisSplit sp = axis_split(a.shape, ax);
  OpCtx ctx;
  ctx.add_input(a);
  Tensor out = Tensor::zeros(a.shape);
  const float* ap = a.ptr();
  float* op = out.ptr();
  for (size_t o = 0; o < sp.outer; ++o) {
    for (size_t r = 0; r < sp.inner; ++r) {
      double m = -HUGE_VAL;
      for (size_t i = 0; i < sp.n; ++i)
        m = std::max(m, static_cast<double>(ap[(o * sp.n + i) * sp.inner + r]));
      double z = 0.0;
      for (size_t i = 0; i < sp.n; ++i)
        z += std::exp(static_cast<double>(ap[(o * sp.n + i) * sp.inner + r]) - m);
      double lz = m + std::log(z);
      for (size_t i = 0; i < sp.n; ++i) {
        size_t off = (o * sp.n + i) * sp.inner + r;
        op[off] = static_cast<float>(static_cast<double>(ap[off]) - lz);
      }
    }
  }
  int pa = ctx.parents[0];
  ctx.finish(out, [pa, out, sp](Tape& tp, const Tensor& g) {
    if (pa < 0) return;
    Tensor ga = Tensor::zeros(out.shape);
    const float* yp = out.ptr();
    const float* gp = g.ptr();
    float* gap = ga.ptr();
    for (size_t o = 0; o < sp.outer; ++o) {
      for (size_t r = 0; r < sp.inner; ++r) {
        double gsum = 0.0;
        for (size_t i = 0; i < sp.n; ++i)
          gsum += static_cast<double>(gp[(o * sp.n + i) * sp.inner + r]);
        for (size_t i = 0; i < sp.n; ++i) {
          size_t off = (o * sp.n + i) * sp.inner + r;
          double smax = std::exp(static_cast<double>(yp[off]));
          gap[off] = static_cast<float>(static_cast<double>(gp[off]) - smax * gsum);
        }
      }
    }
    tp.accumulate(pa, ga);
  });
  return out;
}

// ---- embedding ------------------------------------------------------------------

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  if (table.rank() != 2)
    throw std::invalid_argument("embedding: table must be rank-2, got " + shape_str(table.shape));
  int V = table.shape[0], d = table.shape[1];
  for (int id : ids)
    if (id < 0 || id >= V)
      throw std::invalid_argument("embedding: id " + std::to_string(id) +
                                  " out of range for table with " + std::to_string(V) + " rows");
  OpCtx ctx;
  ctx.add_input(table);
  Tensor out = Tensor::zeros({static_cast<int>(ids.size()), d});
  const float* tp_ = table.ptr();
  float* op = out.ptr();
  for (size_t i = 0; i < ids.size(); ++i)
    std::memcpy(op + i * static_cast<size_t>(d),
                tp_ + static_cast<size_t>(ids[i]) * static_cast<size_t>(d),
                static_cast<size_t>(d) * sizeof(float));
  int pa = ctx.parents[0];
  std::vector<int> saved_ids = ids;
  std::vector<int> tshape = table.shape;
  ctx.finish(out, [pa, saved_ids, tshape, d](Tape& tp, const Tensor& g) {
    if (pa < 0) return;
    Tensor gt = Tensor::zeros(tshape);
    float* gtp = gt.ptr();
    const float* gp = g.ptr();
    for (size_t i = 0; i < saved_ids.size(); ++i) {
      float* row = gtp + static_cast<size_t>(saved_ids[i]) * static_cast<size_t>(d);
      const float* grow = gp + i * static_cast<size_t>(d);
      for (int j = 0; j < d; ++j)
        row[j] = static_cast<float>(static_cast<double>(row[j]) + static_cast<double>(grow[j]));
    }
    tp.accumulate(pa, gt);
  });
  return out;
}

Tensor normalize_rows(const Tensor& a, double eps) {
  Tensor sq = mul(a, a);
  Tensor norms = pow_scalar(add_scalar(sum(sq, -1, true), eps), 0.5);
  return div(a, norms);
}

// ---- grad check ------------------------------------------------------------------

double GradCheckReport::max_rel_err() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_err);
  return m;
}

GradCheckReport grad_check(const std::function<Tensor()>& f,
                           const std::vector<std::pair<std::string, Tensor>>& params,
                           double h, double tol) {
  GradCheckReport report;
  report.tol = tol;

  std::vector<Tensor> analytic;
  {
    Tape tape;
    TapeGuard guard(tape);
    Tensor loss = f();
    if (!std::isfinite(loss.scalar()))
      throw std::runtime_error("grad_check: non-finite loss in analytic pass");
    tape.backward(loss);
    for (const auto& [name, p] : params) {
      const Tensor* g = tape.grad_of(p);
      analytic.push_back(g ? g->detached_copy() : Tensor::zeros(p.shape));
    }
  }

  for (size_t pi = 0; pi < params.size(); ++pi) {
    const auto& [name, p] = params[pi];
    GradCheckReport::Entry entry;
    entry.name = name;
    float* buf = p.data->data();
    size_t n = p.numel();
    for (size_t c = 0; c < n; ++c) {
      float orig = buf[c];
      float fp = static_cast<float>(static_cast<double>(orig) + h);
      float fm = static_cast<float>(static_cast<double>(orig) - h);
      buf[c] = fp;
      double lp = f().scalar();
      buf[c] = fm;
      double lm = f().scalar();
      buf[c] = orig;
      if (!std::isfinite(lp) || !std::isfinite(lm))
        throw std::runtime_error("grad_check: non-finite loss while perturbing " + name);
      double dh = static_cast<double>(fp) - static_cast<double>(fm);
      double numeric = (lp - lm) / dh;
      double a = static_cast<double>(analytic[pi].at(c));
      double rel = std::fabs(a - numeric) / std::max(1e-8, std::fabs(a) + std::fabs(numeric));
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
    }
    report.entries.push_back(entry);
  }
  report.pass = true;
  for (const auto& e : report.entries)
    if (!(e.max_rel_err < tol)) report.pass = false;
  return report;
}

}  // namespace ralign
