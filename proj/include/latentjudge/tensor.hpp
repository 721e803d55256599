#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "latentjudge/common.hpp"

namespace lj {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);

// vector allocator that default-initializes doubles: resize() skips the
// zero-fill, which matters for op outputs that are fully overwritten
template <typename T>
struct DefaultInitAllocator : std::allocator<T> {
  template <typename U>
  struct rebind {
    using other = DefaultInitAllocator<U>;
  };
  template <typename U, typename... Args>
  void construct(U* ptr, Args&&... args) {
    ::new (static_cast<void*>(ptr)) U(std::forward<Args>(args)...);
  }
  template <typename U>
  void construct(U* ptr) {
    ::new (static_cast<void*>(ptr)) U;
  }
};

using Buffer = std::vector<double, DefaultInitAllocator<double>>;

inline bool operator==(const Buffer& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

// ---------------------------------------------------------------------------
// Dense 64-bit float tensor. Row-major. Rank is arbitrary in storage but all
// operations in this project work on rank-2 values (scalars are 1x1).
// ---------------------------------------------------------------------------

struct TensorData {
  Shape shape;
  Buffer value;
  Buffer grad;  // empty until first use
  bool requires_grad = false;

  TensorData(Shape s, Buffer v);
  ~TensorData();
  TensorData(const TensorData&) = delete;
  TensorData& operator=(const TensorData&) = delete;

  std::int64_t size() const { return static_cast<std::int64_t>(value.size()); }
  void ensure_grad();  // allocate zero-filled grad buffer
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor uninitialized(Shape shape, bool requires_grad = false);  // for fully-overwritten outputs
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor matrix(std::int64_t rows, std::int64_t cols, std::vector<double> data,
                       bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor row(std::vector<double> data, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false);
  static Tensor identity(std::int64_t n, bool requires_grad = false);

  bool valid() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  std::int64_t size() const { return d_->size(); }
  std::int64_t rows() const;
  std::int64_t cols() const;

  double item() const;
  double at(std::int64_t i, std::int64_t j) const;
  double& at(std::int64_t i, std::int64_t j);

  Buffer& values() { return d_->value; }
  const Buffer& values() const { return d_->value; }
  Buffer& grad();
  const Buffer& grad() const;
  bool has_grad() const { return !d_->grad.empty(); }
  void zero_grad();

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool v) { d_->requires_grad = v; }

  Tensor clone() const;  // deep, detached copy

  const std::shared_ptr<TensorData>& ptr() const { return d_; }

 private:
  std::shared_ptr<TensorData> d_;
};

struct NamedTensor {
  std::string name;
  Tensor t;
};

// ---------------------------------------------------------------------------
// Define-by-run computation tape. Operations executed while a tape is active
// append one node each, in topological (creation) order. backward() runs the
// reverse sweep; replay() recomputes every recorded output from current leaf
// values, which is what the finite-difference checks perturb against.
// ---------------------------------------------------------------------------

struct TapeNode {
  const char* op;
  std::vector<std::shared_ptr<TensorData>> inputs;
  std::shared_ptr<TensorData> output;
  std::function<void()> replay;
  std::function<void()> backward;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(TapeNode node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<TapeNode>& nodes() const { return nodes_; }
  void clear() { nodes_.clear(); }

  // Reverse sweep from a scalar loss. Intermediate grads are zeroed first;
  // leaf grads accumulate across calls (mini-batch accumulation) until the
  // caller zeroes them. `seed` is dLoss/dLoss, typically 1 or 1/batch.
  void backward(const Tensor& loss, double seed = 1.0);

  // Recompute every recorded output value, in order, from current inputs.
  void replay();

  static Tape* active();

 private:
  std::vector<TapeNode> nodes_;
};

// RAII scope that makes `tape` the active recorder on this thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

// RAII scope that disables recording (inference inside a training loop).
class NoTapeScope {
 public:
  NoTapeScope();
  ~NoTapeScope();
  NoTapeScope(const NoTapeScope&) = delete;

 private:
  Tape* prev_;
};

// ---------------------------------------------------------------------------
// Operations. Every op validates shapes, computes the forward value eagerly
// and, if a tape is active, records replay/backward closures.
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor add_row_vector(const Tensor& a, const Tensor& v);  // v is 1 x cols
Tensor mul(const Tensor& a, const Tensor& b);             // elementwise
Tensor scale(const Tensor& a, double c);
Tensor softmax_rows(const Tensor& a);
Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, std::int64_t begin, std::int64_t count);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& a, std::int64_t begin, std::int64_t count);
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);

// Fused multi-head causal attention over already-projected q/k/v (n x d each,
// d split into n_heads column blocks): per head, masked-softmax scores scaled
// by 1/sqrt(head_dim), then the value aggregation. `allowed` is the n*n
// row-major mask; disallowed positions contribute exactly zero weight.
Tensor attention_heads(const Tensor& q, const Tensor& k, const Tensor& v, std::int64_t n_heads,
                       std::shared_ptr<const std::vector<std::uint8_t>> allowed);

Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor sum_all(const Tensor& a);

// Binary cross entropy on a scalar probability, clamped to [1e-12, 1-1e-12].
Tensor bce_loss(const Tensor& p, int label);

// Mean next-token cross entropy over rows of logits (stable log-sum-exp).
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets);

// Central finite-difference derivative of `loss_value()` w.r.t. one element
// of `leaf`, restoring the perturbed entry afterwards.
double finite_difference(Tensor leaf, std::int64_t index, double step,
                         const std::function<double()>& loss_value);

// max relative error between analytic grad of `leaf` and central differences
// over up to `max_coords` sampled coordinates (all if the tensor is small).
double gradcheck_max_rel_err(Tensor leaf, Tape& tape, const Tensor& loss, double step,
                             Rng& rng, std::int64_t max_coords = 16);

}  // namespace lj
