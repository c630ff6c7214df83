#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "ralign/common.hpp"

namespace ralign {

// Dense row-major tensor. Storage is f32; op arithmetic runs in f64 and
// rounds once on store. Buffers are treated as immutable once produced by an
// op; the optimizer is the only code that writes into parameter buffers, and
// it does so between tapes.
struct Tensor {
  std::vector<int> shape;
  std::shared_ptr<std::vector<float>> data;
  bool requires_grad = false;

  // Rank-0 results carry the f64 value of their reduction/combination so the
  // final scalar of a loss graph is not re-rounded to f32; scalar() prefers
  // it. Buffers themselves stay f32.
  double exact = 0.0;
  bool has_exact = false;

  // Tape bookkeeping: id of the node that produced this tensor, valid only
  // for the tape whose epoch matches. Leaf parameters keep node == -1 and are
  // identified on the tape by buffer address.
  int node = -1;
  u64 tape_epoch = 0;

  Tensor() = default;

  size_t numel() const;
  int rank() const { return static_cast<int>(shape.size()); }
  float* ptr() { return data->data(); }
  const float* ptr() const { return data->data(); }
  float at(size_t i) const { return (*data)[i]; }
  double scalar() const;  // requires rank 0 or numel 1

  static Tensor zeros(const std::vector<int>& shape);
  static Tensor full(const std::vector<int>& shape, float value);
  static Tensor from(const std::vector<int>& shape, std::vector<float> values);
  static Tensor scalar_value(float v);
  static Tensor randn(const std::vector<int>& shape, Rng& rng, double sigma);

  Tensor with_grad(bool rg = true) const;  // same buffer, requires_grad flag set
  Tensor detached_copy() const;            // fresh buffer, no grad
};

size_t shape_numel(const std::vector<int>& shape);

// Reverse-mode tape. Rebuilt per training step; single-threaded by contract.
// Nodes are recorded in topological order (parents always precede children).
class Tape {
 public:
  struct Node {
    std::vector<int> parents;
    std::vector<int> shape;
    // Accumulates into parent gradients; receives gradient of this node.
    std::function<void(Tape&, const Tensor& gout)> backward;
  };

  Tape();

  static Tape* active();

  u64 epoch() const { return epoch_; }
  int node_count() const { return static_cast<int>(nodes_.size()); }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }

  // Find-or-create the leaf node for a parameter tensor (keyed by buffer).
  int leaf_id(const Tensor& t);
  // Record an interior op node; parents must already exist on this tape.
  int record(const std::vector<int>& shape, std::vector<int> parents,
             std::function<void(Tape&, const Tensor&)> backward);

  // Id of `t` on this tape: its recorded node, its leaf entry, or -1.
  int id_of(const Tensor& t) const;

  // Runs reverse accumulation from a recorded rank-0 root.
  void backward(const Tensor& root);

  // Gradient of a tensor after backward(); nullptr when none was populated.
  const Tensor* grad_of(const Tensor& t) const;

  void accumulate(int id, const Tensor& g);

 private:
  std::vector<Node> nodes_;
  std::vector<std::optional<Tensor>> grads_;
  std::unordered_map<const void*, int> leaves_;
  u64 epoch_;
};

// Installs `t` as the active tape for the current scope.
struct TapeGuard {
  explicit TapeGuard(Tape& t);
  ~TapeGuard();
  TapeGuard(const TapeGuard&) = delete;
  TapeGuard& operator=(const TapeGuard&) = delete;

 private:
  Tape* prev_;
};

// ---- op suite -------------------------------------------------------------
// Binary elementwise ops broadcast with trailing-dimension alignment.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor pow_scalar(const Tensor& a, double p);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);

// 2-D x 2-D, 3-D x 3-D (equal batch), and mixed 2-D/3-D with batch broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor sum(const Tensor& a);                                   // all elements -> rank 0
Tensor sum(const Tensor& a, int axis, bool keepdim = false);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, int axis, bool keepdim = false);
Tensor max(const Tensor& a, int axis, bool keepdim = false);   // ties -> lowest index

Tensor reshape(const Tensor& a, const std::vector<int>& shape);
Tensor transpose(const Tensor& a, int d0, int d1);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, int start, int len);
Tensor broadcast_to(const Tensor& a, const std::vector<int>& shape);

// Where mask != 0 the output takes `value`; no gradient flows through the
// mask and none through filled positions.
Tensor masked_fill(const Tensor& a, const Tensor& mask, double value);

Tensor softmax(const Tensor& a, int axis);
Tensor log_softmax(const Tensor& a, int axis);

// Gathers rows of a [V, d] table; gradient scatter-adds into the table.
Tensor embedding(const Tensor& table, const std::vector<int>& ids);

// Composite helpers (built from the primitives above).
Tensor normalize_rows(const Tensor& a, double eps = 1e-12);  // L2 over last axis

// ---- gradient checking ------------------------------------------------------

struct GradCheckReport {
  struct Entry {
    std::string name;
    double max_rel_err = 0.0;
  };
  std::vector<Entry> entries;
  double tol = 0.0;
  bool pass = false;
  double max_rel_err() const;
};

// Central finite differences against tape gradients. `f` must be a
// deterministic function of the parameter buffers and yield a finite scalar.
// Relative error |a - n| / max(1e-8, |a| + |n|), maxed per parameter.
GradCheckReport grad_check(const std::function<Tensor()>& f,
                           const std::vector<std::pair<std::string, Tensor>>& params,
                           double h = 1e-3, double tol = 1e-3);

}  // namespace ralign
