#include "latentjudge/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace lj {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

thread_local Tape* g_active_tape = nullptr;

std::int64_t shape_product(const Shape& s) {
  std::int64_t p = 1;
  for (auto d : s) p *= d;
  return p;
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.shape().size() > 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_str(t.shape()));
  }
}

void record(const char* op, std::vector<Tensor> inputs, const Tensor& output,
            std::function<void()> replay, std::function<void()> backward) {
  Tape* tape = Tape::active();
  if (!tape) return;
  TapeNode node;
  node.op = op;
  node.inputs.reserve(inputs.size());
  for (auto& t : inputs) node.inputs.push_back(t.ptr());
  node.output = output.ptr();
  node.replay = std::move(replay);
  node.backward = std::move(backward);
  tape->record(std::move(node));
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

// ---------------------------------------------------------------------------
// TensorData / Tensor
// ---------------------------------------------------------------------------

TensorData::TensorData(Shape s, Buffer v) : shape(std::move(s)), value(std::move(v)) {
  for (auto d : shape) {
    if (d < 0) throw ShapeError("tensor dimension must be non-negative, got shape " + shape_str(shape));
  }
  if (shape_product(shape) != static_cast<std::int64_t>(value.size())) {
    throw ShapeError("tensor data length " + std::to_string(value.size()) +
                     " does not match shape " + shape_str(shape));
  }
  MemStats::add(static_cast<std::int64_t>(value.capacity() * sizeof(double)));
}

TensorData::~TensorData() {
  MemStats::sub(static_cast<std::int64_t>((value.capacity() + grad.capacity()) * sizeof(double)));
}

void TensorData::ensure_grad() {
  if (grad.empty() && !value.empty()) {
    grad.assign(value.size(), 0.0);
    MemStats::add(static_cast<std::int64_t>(grad.capacity() * sizeof(double)));
  }
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::int64_t n = shape_product(shape);
  auto d = std::make_shared<TensorData>(std::move(shape), Buffer(static_cast<std::size_t>(n), 0.0));
  d->requires_grad = requires_grad;
  return Tensor(std::move(d));
}

Tensor Tensor::uninitialized(Shape shape, bool requires_grad) {
  std::int64_t n = shape_product(shape);
  Buffer buf;
  buf.resize(static_cast<std::size_t>(n));  // default-init, no fill
  auto d = std::make_shared<TensorData>(std::move(shape), std::move(buf));
  d->requires_grad = requires_grad;
  return Tensor(std::move(d));
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  Tensor t = uninitialized(std::move(shape), requires_grad);
  std::fill(t.values().begin(), t.values().end(), v);
  return t;
}

Tensor Tensor::matrix(std::int64_t rows, std::int64_t cols, std::vector<double> data, bool requires_grad) {
  auto d = std::make_shared<TensorData>(Shape{rows, cols}, Buffer(data.begin(), data.end()));
  d->requires_grad = requires_grad;
  return Tensor(std::move(d));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return matrix(1, 1, {v}, requires_grad); }

Tensor Tensor::row(std::vector<double> data, bool requires_grad) {
  auto n = static_cast<std::int64_t>(data.size());
  return matrix(1, n, std::move(data), requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (auto& v : t.values()) v = stddev * rng.normal();
  return t;
}

Tensor Tensor::identity(std::int64_t n, bool requires_grad) {
  Tensor t = zeros({n, n}, requires_grad);
  for (std::int64_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

std::int64_t Tensor::rows() const {
  const Shape& s = d_->shape;
  if (s.size() == 2) return s[0];
  if (s.size() == 1) return 1;
  throw ShapeError("rows(): tensor of shape " + shape_str(s) + " is not a matrix");
}

std::int64_t Tensor::cols() const {
  const Shape& s = d_->shape;
  if (s.size() == 2) return s[1];
  if (s.size() == 1) return s[0];
  throw ShapeError("cols(): tensor of shape " + shape_str(s) + " is not a matrix");
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item(): tensor of shape " + shape_str(shape()) + " is not scalar");
  return d_->value[0];
}

double Tensor::at(std::int64_t i, std::int64_t j) const {
  return d_->value[static_cast<std::size_t>(i * cols() + j)];
}

double& Tensor::at(std::int64_t i, std::int64_t j) {
  return d_->value[static_cast<std::size_t>(i * cols() + j)];
}

Buffer& Tensor::grad() {
  d_->ensure_grad();
  return d_->grad;
}

const Buffer& Tensor::grad() const {
  d_->ensure_grad();
  return d_->grad;
}

void Tensor::zero_grad() {
  if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  auto d = std::make_shared<TensorData>(d_->shape, d_->value);
  d->requires_grad = d_->requires_grad;
  return Tensor(std::move(d));
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape* Tape::active() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = prev_; }

NoTapeScope::NoTapeScope() : prev_(g_active_tape) { g_active_tape = nullptr; }
NoTapeScope::~NoTapeScope() { g_active_tape = prev_; }

void Tape::backward(const Tensor& loss, double seed) {
  if (loss.size() != 1) {
    throw UsageError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  bool on_tape = false;
  for (const auto& n : nodes_) {
    if (n.output == loss.ptr()) {
      on_tape = true;
      break;
    }
  }
  if (!on_tape) throw UsageError("backward: loss tensor is not an output recorded on this tape");

  // zero intermediate grads; leaf grads accumulate until the caller clears them
  for (auto& n : nodes_) {
    n.output->ensure_grad();
    std::fill(n.output->grad.begin(), n.output->grad.end(), 0.0);
  }
  for (auto& n : nodes_) {
    for (auto& in : n.inputs) {
      if (in->requires_grad) in->ensure_grad();
    }
  }
  loss.ptr()->grad[0] = seed;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->backward && it->output->requires_grad) it->backward();
  }
}

void Tape::replay() {
  for (auto& n : nodes_) n.replay();
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  std::int64_t m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions mismatch " + shape_str({m, k}) + " vs " + shape_str({k2, n}));
  }
  bool rg = a.requires_grad() || b.requires_grad();
  Tensor out = Tensor::uninitialized({m, n}, rg);
  auto A = a.ptr(), B = b.ptr(), C = out.ptr();
  auto fwd = [A, B, C, m, k, n]() {
    if (m == 0 || n == 0) return;
    ConstMap ma(A->value.data(), m, k);
    ConstMap mb(B->value.data(), k, n);
    MutMap mc(C->value.data(), m, n);
    if (k == 0) {
      mc.setZero();
    } else {
      mc.noalias() = ma * mb;
    }
  };
  fwd();
  record("matmul", {a, b}, out, fwd, [A, B, C, m, k, n]() {
    if (m == 0 || n == 0 || k == 0) return;
    ConstMap gc(C->grad.data(), m, n);
    if (A->requires_grad) {
      A->ensure_grad();
      MutMap ga(A->grad.data(), m, k);
      ConstMap mb(B->value.data(), k, n);
      ga.noalias() += gc * mb.transpose();
    }
    if (B->requires_grad) {
      B->ensure_grad();
      MutMap gb(B->grad.data(), k, n);
      ConstMap ma(A->value.data(), m, k);
      gb.noalias() += ma.transpose() * gc;
    }
  });
  return out;
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  std::int64_t m = a.rows(), n = a.cols();
  Tensor out = Tensor::uninitialized({n, m}, a.requires_grad());
  auto A = a.ptr(), C = out.ptr();
  auto fwd = [A, C, m, n]() {
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j)
        C->value[static_cast<std::size_t>(j * m + i)] = A->value[static_cast<std::size_t>(i * n + j)];
  };
  fwd();
  record("transpose", {a}, out, fwd, [A, C, m, n]() {
    if (!A->requires_grad) return;
    A->ensure_grad();
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j)
        A->grad[static_cast<std::size_t>(i * n + j)] += C->grad[static_cast<std::size_t>(j * m + i)];
  });
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  bool rg = a.requires_grad() || b.requires_grad();
  Tensor out = Tensor::uninitialized(a.shape(), rg);
  auto A = a.ptr(), B = b.ptr(), C = out.ptr();
  auto fwd = [A, B, C]() {
    for (std::size_t i = 0; i < C->value.size(); ++i) C->value[i] = A->value[i] + B->value[i];
  };
  fwd();
  record("add", {a, b}, out, fwd, [A, B, C]() {
    if (A->requires_grad) {
      A->ensure_grad();
      for (std::size_t i = 0; i < C->grad.size(); ++i) A->grad[i] += C->grad[i];
    }
    if (B->requires_grad) {
      B->ensure_grad();
      for (std::size_t i = 0; i < C->grad.size(); ++i) B->grad[i] += C->grad[i];
    }
  });
  return out;
}

Tensor add_row_vector(const Tensor& a, const Tensor& v) {
  require_rank2(a, "add_row_vector");
  std::int64_t m = a.rows(), n = a.cols();
  if (v.size() != n) {
    throw ShapeError("add_row_vector: vector shape " + shape_str(v.shape()) + " does not match columns of " +
                     shape_str(a.shape()));
  }
  bool rg = a.requires_grad() || v.requires_grad();
  Tensor out = Tensor::uninitialized({m, n}, rg);
  auto A = a.ptr(), V = v.ptr(), C = out.ptr();
  auto fwd = [A, V, C, m, n]() {
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j)
        C->value[static_cast<std::size_t>(i * n + j)] =
            A->value[static_cast<std::size_t>(i * n + j)] + V->value[static_cast<std::size_t>(j)];
  };
  fwd();
  record("add_row_vector", {a, v}, out, fwd, [A, V, C, m, n]() {
    if (A->requires_grad) {
      A->ensure_grad();
      for (std::size_t i = 0; i < C->grad.size(); ++i) A->grad[i] += C->grad[i];
    }
    if (V->requires_grad) {
      V->ensure_grad();
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j)
          V->grad[static_cast<std::size_t>(j)] += C->grad[static_cast<std::size_t>(i * n + j)];
    }
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  bool rg = a.requires_grad() || b.requires_grad();
  Tensor out = Tensor::uninitialized(a.shape(), rg);
  auto A = a.ptr(), B = b.ptr(), C = out.ptr();
  auto fwd = [A, B, C]() {
    for (std::size_t i = 0; i < C->value.size(); ++i) C->value[i] = A->value[i] * B->value[i];
  };
  fwd();
  record("mul", {a, b}, out, fwd, [A, B, C]() {
    if (A->requires_grad) {
      A->ensure_grad();
      for (std::size_t i = 0; i < C->grad.size(); ++i) A->grad[i] += C->grad[i] * B->value[i];
    }
    if (B->requires_grad) {
      B->ensure_grad();
      for (std::size_t i = 0; i < C->grad.size(); ++i) B->grad[i] += C->grad[i] * A->value[i];
    }
  });
  return out;
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = Tensor::uninitialized(a.shape(), a.requires_grad());
  auto A = a.ptr(), C = out.ptr();
  auto fwd = [A, C, c]() {
    for (std::size_t i = 0; i < C->value.size(); ++i) C->value[i] = c * A->value[i];
  };
  fwd();
  record("scale", {a}, out, fwd, [A, C, c]() {
    if (!A->requires_grad) return;
    A->ensure_grad();
    for (std::size_t i = 0; i < C->grad.size(); ++i) A->grad[i] += c * C->grad[i];
  });
  return out;
}

Tensor softmax_rows(const Tensor& a) {
  require_rank2(a, "softmax_rows");
  std::int64_t m = a.rows(), n = a.cols();
  if (n == 0) throw ShapeError("softmax_rows: empty rows in shape " + shape_str(a.shape()));
  for (double v : a.values()) {
    if (std::isnan(v)) throw NumericError("softmax_rows: NaN in input");
  }
  Tensor out = Tensor::uninitialized({m, n}, a.requires_grad());
  auto A = a.ptr(), C = out.ptr();
  auto fwd = [A, C, m, n]() {
    for (std::int64_t i = 0; i < m; ++i) {
      const double* x = A->value.data() + i * n;
      double* y = C->value.data() + i * n;
      double mx = x[0];
      for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
      double sum = 0.0;
      for (std::int64_t j = 0; j < n; ++j) {
        y[j] = std::exp(x[j] - mx);
        sum += y[j];
      }
      for (std::int64_t j = 0; j < n; ++j) y[j] /= sum;
    }
  };
  fwd();
  record("softmax_rows", {a}, out, fwd, [A, C, m, n]() {
    if (!A->requires_grad) return;
    A->ensure_grad();
    for (std::int64_t i = 0; i < m; ++i) {
      const double* p = C->value.data() + i * n;
      const double* go = C->grad.data() + i * n;
      double* gi = A->grad.data() + i * n;
      double dot = 0.0;
      for (std::int64_t j = 0; j < n; ++j) dot += go[j] * p[j];
      for (std::int64_t j = 0; j < n; ++j) gi[j] += p[j] * (go[j] - dot);
    }
  });
  return out;
}

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps) {
  require_rank2(a, "layer_norm");
  std::int64_t m = a.rows(), d = a.cols();
  if (d < 1) throw ShapeError("layer_norm: empty feature dimension in " + shape_str(a.shape()));
  if (eps <= 0.0) throw UsageError("layer_norm: eps must be positive");
  if (gain.size() != d || bias.size() != d) {
    throw ShapeError("layer_norm: gain/bias shapes " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                     " do not match feature dim of " + shape_str(a.shape()));
  }
  bool rg = a.requires_grad() || gain.requires_grad() || bias.requires_grad();
  Tensor out = Tensor::uninitialized({m, d}, rg);
  auto A = a.ptr(), G = gain.ptr(), B = bias.ptr(), C = out.ptr();
  auto fwd = [A, G, B, C, m, d, eps]() {
    for (std::int64_t i = 0; i < m; ++i) {
      const double* x = A->value.data() + i * d;
      double* y = C->value.data() + i * d;
      double mean = 0.0;
      for (std::int64_t j = 0; j < d; ++j) mean += x[j];
      mean /= static_cast<double>(d);
      double var = 0.0;
      for (std::int64_t j = 0; j < d; ++j) var += (x[j] - mean) * (x[j] - mean);
      var /= static_cast<double>(d);
      double inv = 1.0 / std::sqrt(var + eps);
      for (std::int64_t j = 0; j < d; ++j) {
        y[j] = (x[j] - mean) * inv * G->value[static_cast<std::size_t>(j)] + B->value[static_cast<std::size_t>(j)];
      }
    }
  };
  fwd();
  record("layer_norm", {a, gain, bias}, out, fwd, [A, G, B, C, m, d, eps]() {
    for (std::int64_t i = 0; i < m; ++i) {
      const double* x = A->value.data() + i * d;
      const double* go = C->grad.data() + i * d;
      double mean = 0.0;
      for (std::int64_t j = 0; j < d; ++j) mean += x[j];
      mean /= static_cast<double>(d);
      double var = 0.0;
      for (std::int64_t j = 0; j < d; ++j) var += (x[j] - mean) * (x[j] - mean);
      var /= static_cast<double>(d);
      double inv = 1.0 / std::sqrt(var + eps);
      if (G->requires_grad) G->ensure_grad();
      if (B->requires_grad) B->ensure_grad();
      double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
      for (std::int64_t j = 0; j < d; ++j) {
        double xhat = (x[j] - mean) * inv;
        double dxhat = go[j] * G->value[static_cast<std::size_t>(j)];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
        if (G->requires_grad) G->grad[static_cast<std::size_t>(j)] += go[j] * xhat;
        if (B->requires_grad) B->grad[static_cast<std::size_t>(j)] += go[j];
      }
      if (A->requires_grad) {
        A->ensure_grad();
        double* gi = A->grad.data() + i * d;
        for (std::int64_t j = 0; j < d; ++j) {
          double xhat = (x[j] - mean) * inv;
          double dxhat = go[j] * G->value[static_cast<std::size_t>(j)];
          gi[j] += inv * (dxhat - sum_dxhat / static_cast<double>(d) -
                          xhat * sum_dxhat_xhat / static_cast<double>(d));
        }
      }
    }
  });
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw UsageError("concat_rows: empty part list");
  std::int64_t n = parts[0].cols();
  std::int64_t total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    require_rank2(p, "concat_rows");
    if (p.cols() != n) {
      throw ShapeError("concat_rows: column mismatch " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    total += p.rows();
    rg = rg || p.requires_grad();
  }
  Tensor out = Tensor::uninitialized({total, n}, rg);
  std::vector<std::shared_ptr<TensorData>> ptrs;
  for (const auto& p : parts) ptrs.push_back(p.ptr());
  auto C = out.ptr();
  auto fwd = [ptrs, C]() {
    std::size_t off = 0;
    for (const auto& p : ptrs) {
      std::copy(p->value.begin(), p->value.end(), C->value.begin() + static_cast<std::ptrdiff_t>(off));
      off += p->value.size();
    }
  };
  fwd();
  record("concat_rows", parts, out, fwd, [ptrs, C]() {
    std::size_t off = 0;
    for (const auto& p : ptrs) {
      if (p->requires_grad) {
        p->ensure_grad();
        for (std::size_t i = 0; i < p->value.size(); ++i) p->grad[i] += C->grad[off + i];
      }
      off += p->value.size();
    }
  });
  return out;
}

Tensor slice_rows(const Tensor& a, std::int64_t begin, std::int64_t count) {
  require_rank2(a, "slice_rows");
  std::int64_t m = a.rows(), n = a.cols();
  if (begin < 0 || count < 0 || begin + count > m) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of bounds for " + shape_str(a.shape()));
  }
  Tensor out = Tensor::uninitialized({count, n}, a.requires_grad());
  auto A = a.ptr(), C = out.ptr();
  auto fwd = [A, C, begin, count, n]() {
    std::copy(A->value.begin() + begin * n, A->value.begin() + (begin + count) * n, C->value.begin());
  };
  fwd();
  record("slice_rows", {a}, out, fwd, [A, C, begin, count, n]() {
    if (!A->requires_grad) return;
    A->ensure_grad();
    for (std::int64_t i = 0; i < count * n; ++i)
      A->grad[static_cast<std::size_t>(begin * n + i)] += C->grad[static_cast<std::size_t>(i)];
  });
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw UsageError("concat_cols: empty part list");
  std::int64_t m = parts[0].rows();
  std::int64_t total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    require_rank2(p, "concat_cols");
    if (p.rows() != m) {
      throw ShapeError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    }
    total += p.cols();
    rg = rg || p.requires_grad();
  }
  Tensor out = Tensor::uninitialized({m, total}, rg);
  std::vector<std::shared_ptr<TensorData>> ptrs;
  std::vector<std::int64_t> widths, offsets;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    ptrs.push_back(p.ptr());
    widths.push_back(p.cols());
    offsets.push_back(off);
    off += p.cols();
  }
  auto C = out.ptr();
  auto fwd = [ptrs, widths, offsets, C, m, total]() {
    for (std::size_t k = 0; k < ptrs.size(); ++k) {
      std::int64_t w = widths[k], o = offsets[k];
      for (std::int64_t i = 0; i < m; ++i)
        std::copy(ptrs[k]->value.begin() + i * w, ptrs[k]->value.begin() + (i + 1) * w,
                  C->value.begin() + i * total + o);
    }
  };
  fwd();
  record("concat_cols", parts, out, fwd, [ptrs, widths, offsets, C, m, total]() {
    for (std::size_t k = 0; k < ptrs.size(); ++k) {
      if (!ptrs[k]->requires_grad) continue;
      ptrs[k]->ensure_grad();
      std::int64_t w = widths[k], o = offsets[k];
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < w; ++j)
          ptrs[k]->grad[static_cast<std::size_t>(i * w + j)] += C->grad[static_cast<std::size_t>(i * total + o + j)];
    }
  });
  return out;
}

Tensor slice_cols(const Tensor& a, std::int64_t begin, std::int64_t count) {
  require_rank2(a, "slice_cols");
  std::int64_t m = a.rows(), n = a.cols();
  if (begin < 0 || count < 0 || begin + count > n) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of bounds for " + shape_str(a.shape()));
  }
  Tensor out = Tensor::uninitialized({m, count}, a.requires_grad());
  auto A = a.ptr(), C = out.ptr();
  auto fwd = [A, C, begin, count, m, n]() {
    for (std::int64_t i = 0; i < m; ++i)
      std::copy(A->value.begin() + i * n + begin, A->value.begin() + i * n + begin + count,
                C->value.begin() + i * count);
  };
  fwd();
  record("slice_cols", {a}, out, fwd, [A, C, begin, count, m, n]() {
    if (!A->requires_grad) return;
    A->ensure_grad();
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < count; ++j)
        A->grad[static_cast<std::size_t>(i * n + begin + j)] += C->grad[static_cast<std::size_t>(i * count + j)];
  });
  return out;
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  require_rank2(table, "gather_rows");
  std::int64_t v = table.rows(), d = table.cols();
  for (int id : ids) {
    if (id < 0 || id >= v) {
      throw InputError("gather_rows: id " + std::to_string(id) + " out of range [0, " + std::to_string(v) + ")");
    }
  }
  auto m = static_cast<std::int64_t>(ids.size());
  Tensor out = Tensor::uninitialized({m, d}, table.requires_grad());
  auto T = table.ptr(), C = out.ptr();
  auto fwd = [T, C, ids, d]() {
    for (std::size_t i = 0; i < ids.size(); ++i)
      std::copy(T->value.begin() + static_cast<std::ptrdiff_t>(ids[i]) * d,
                T->value.begin() + (static_cast<std::ptrdiff_t>(ids[i]) + 1) * d,
                C->value.begin() + static_cast<std::ptrdiff_t>(i) * d);
  };
  fwd();
  record("gather_rows", {table}, out, fwd, [T, C, ids, d]() {
    if (!T->requires_grad) return;
    T->ensure_grad();
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::int64_t j = 0; j < d; ++j)
        T->grad[static_cast<std::size_t>(ids[i] * d + j)] += C->grad[i * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)];
  });
  return out;
}

namespace {

using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

// softmax over allowed entries of one score row; disallowed entries end up 0
void masked_softmax_row(double* row, const std::uint8_t* allow, std::int64_t n) {
  // causal masks allow a contiguous prefix, which vectorizes cleanly
  std::int64_t prefix = 0;
  while (prefix < n && allow[prefix]) ++prefix;
  bool is_prefix = true;
  for (std::int64_t j = prefix; j < n; ++j) {
    if (allow[j]) {
      is_prefix = false;
      break;
    }
  }
  // scalar exp throughout: SIMD exp paths vary with buffer alignment and
  // would break bitwise run-to-run determinism
  if (is_prefix && prefix > 0) {
    double mx = row[0];
    for (std::int64_t j = 1; j < prefix; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::int64_t j = 0; j < prefix; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    double inv = 1.0 / sum;
    for (std::int64_t j = 0; j < prefix; ++j) row[j] *= inv;
    std::fill(row + prefix, row + n, 0.0);
    return;
  }
  double mx = -1e300;
  for (std::int64_t j = 0; j < n; ++j) {
    if (allow[j]) mx = std::max(mx, row[j]);
  }
  double sum = 0.0;
  for (std::int64_t j = 0; j < n; ++j) {
    if (allow[j]) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    } else {
      row[j] = 0.0;
    }
  }
  double inv = 1.0 / sum;
  for (std::int64_t j = 0; j < n; ++j) row[j] *= inv;
}

}  // namespace

Tensor attention_heads(const Tensor& q, const Tensor& k, const Tensor& v, std::int64_t n_heads,
                       std::shared_ptr<const std::vector<std::uint8_t>> allowed) {
  require_rank2(q, "attention_heads");
  std::int64_t n = q.rows(), d = q.cols();
  if (k.rows() != n || k.cols() != d || v.rows() != n || v.cols() != d) {
    throw ShapeError("attention_heads: q/k/v shapes differ: " + shape_str(q.shape()) + " vs " +
                     shape_str(k.shape()) + " vs " + shape_str(v.shape()));
  }
  if (n_heads < 1 || d % n_heads != 0) {
    throw ShapeError("attention_heads: width " + std::to_string(d) + " not divisible into " +
                     std::to_string(n_heads) + " heads");
  }
  if (static_cast<std::int64_t>(allowed->size()) != n * n) {
    throw ShapeError("attention_heads: mask covers " + std::to_string(allowed->size()) + " entries, expected " +
                     std::to_string(n * n));
  }
  std::int64_t hd = d / n_heads;
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  bool rg = q.requires_grad() || k.requires_grad() || v.requires_grad();
  Tensor out = Tensor::uninitialized({n, d}, rg);
  auto Q = q.ptr(), K = k.ptr(), V = v.ptr(), C = out.ptr();
  // attention probabilities per head, kept for the backward sweep
  auto probs = std::make_shared<Buffer>();
  probs->resize(static_cast<std::size_t>(n_heads * n * n));

  auto fwd = [Q, K, V, C, probs, allowed, n, d, hd, n_heads, inv_sqrt]() {
    for (std::int64_t h = 0; h < n_heads; ++h) {
      ConstStridedMap qh(Q->value.data() + h * hd, n, hd, Eigen::OuterStride<>(d));
      ConstStridedMap kh(K->value.data() + h * hd, n, hd, Eigen::OuterStride<>(d));
      ConstStridedMap vh(V->value.data() + h * hd, n, hd, Eigen::OuterStride<>(d));
      MutMap a(probs->data() + h * n * n, n, n);
      a.noalias() = qh * kh.transpose() * inv_sqrt;
      for (std::int64_t i = 0; i < n; ++i) {
        masked_softmax_row(probs->data() + h * n * n + i * n, allowed->data() + i * n, n);
      }
      StridedMap ch(C->value.data() + h * hd, n, hd, Eigen::OuterStride<>(d));
      ch.noalias() = a * vh;
    }
  };
  fwd();
  record("attention_heads", {q, k, v}, out, fwd, [Q, K, V, C, probs, allowed, n, d, hd, n_heads, inv_sqrt]() {
    Buffer dscore;
    dscore.resize(static_cast<std::size_t>(n * n));
    for (std::int64_t h = 0; h < n_heads; ++h) {
      ConstMap a(probs->data() + h * n * n, n, n);
      ConstStridedMap go(C->grad.data() + h * hd, n, hd, Eigen::OuterStride<>(d));
      ConstStridedMap qh(Q->value.data() + h * hd, n, hd, Eigen::OuterStride<>(d));
      ConstStridedMap kh(K->value.data() + h * hd, n, hd, Eigen::OuterStride<>(d));
      ConstStridedMap vh(V->value.data() + h * hd, n, hd, Eigen::OuterStride<>(d));
      if (V->requires_grad) {
        V->ensure_grad();
        StridedMap gv(V->grad.data() + h * hd, n, hd, Eigen::OuterStride<>(d));
        gv.noalias() += a.transpose() * go;
      }
      if (Q->requires_grad || K->requires_grad) {
        MutMap ds(dscore.data(), n, n);
        ds.noalias() = go * vh.transpose();
        // masked softmax backward: rows of ds -> rows of dscore in place
        for (std::int64_t i = 0; i < n; ++i) {
          double* dsr = dscore.data() + i * n;
          const double* ar = probs->data() + h * n * n + i * n;
          const std::uint8_t* allow = allowed->data() + i * n;
          double dot = 0.0;
          for (std::int64_t j = 0; j < n; ++j) {
            if (allow[j]) dot += dsr[j] * ar[j];
          }
          for (std::int64_t j = 0; j < n; ++j) {
            dsr[j] = allow[j] ? ar[j] * (dsr[j] - dot) * inv_sqrt : 0.0;
          }
        }
        if (Q->requires_grad) {
          Q->ensure_grad();
          StridedMap gq(Q->grad.data() + h * hd, n, hd, Eigen::OuterStride<>(d));
          gq.noalias() += ds * kh;
        }
        if (K->requires_grad) {
          K->ensure_grad();
          StridedMap gk(K->grad.data() + h * hd, n, hd, Eigen::OuterStride<>(d));
          gk.noalias() += ds.transpose() * qh;
        }
      }
    }
  });
  return out;
}

namespace {
constexpr double kGeluC = 0.7978845608028653558798921198687;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& a) {
  Tensor out = Tensor::uninitialized(a.shape(), a.requires_grad());
  auto A = a.ptr(), C = out.ptr();
  auto fwd = [A, C]() {
    for (std::size_t i = 0; i < C->value.size(); ++i) {
      double x = A->value[i];
      double u = kGeluC * (x + kGeluA * x * x * x);
      C->value[i] = 0.5 * x * (1.0 + std::tanh(u));
    }
  };
  fwd();
  record("gelu", {a}, out, fwd, [A, C]() {
    if (!A->requires_grad) return;
    A->ensure_grad();
    for (std::size_t i = 0; i < C->grad.size(); ++i) {
      double x = A->value[i];
      double u = kGeluC * (x + kGeluA * x * x * x);
      double t = std::tanh(u);
      double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
      double dydx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      A->grad[i] += C->grad[i] * dydx;
    }
  });
  return out;
}

Tensor sigmoid(const Tensor& a) {
  Tensor out = Tensor::uninitialized(a.shape(), a.requires_grad());
  auto A = a.ptr(), C = out.ptr();
  auto fwd = [A, C]() {
    for (std::size_t i = 0; i < C->value.size(); ++i) {
      double x = A->value[i];
      if (x >= 0.0) {
        C->value[i] = 1.0 / (1.0 + std::exp(-x));
      } else {
        double e = std::exp(x);
        C->value[i] = e / (1.0 + e);
      }
    }
  };
  fwd();
  record("sigmoid", {a}, out, fwd, [A, C]() {
    if (!A->requires_grad) return;
    A->ensure_grad();
    for (std::size_t i = 0; i < C->grad.size(); ++i) {
      double y = C->value[i];
      A->grad[i] += C->grad[i] * y * (1.0 - y);
    }
  });
  return out;
}

Tensor sum_all(const Tensor& a) {
  Tensor out = Tensor::uninitialized({1, 1}, a.requires_grad());
  auto A = a.ptr(), C = out.ptr();
  auto fwd = [A, C]() {
    double s = 0.0;
    for (double v : A->value) s += v;
    C->value[0] = s;
  };
  fwd();
  record("sum_all", {a}, out, fwd, [A, C]() {
    if (!A->requires_grad) return;
    A->ensure_grad();
    for (std::size_t i = 0; i < A->grad.size(); ++i) A->grad[i] += C->grad[0];
  });
  return out;
}

namespace {
constexpr double kProbClamp = 1e-12;
}

Tensor bce_loss(const Tensor& p, int label) {
  if (p.size() != 1) throw ShapeError("bce_loss: probability must be scalar, got " + shape_str(p.shape()));
  if (label != 0 && label != 1) throw UsageError("bce_loss: label must be 0 or 1, got " + std::to_string(label));
  Tensor out = Tensor::uninitialized({1, 1}, p.requires_grad());
  auto P = p.ptr(), C = out.ptr();
  double y = static_cast<double>(label);
  auto fwd = [P, C, y]() {
    double q = std::clamp(P->value[0], kProbClamp, 1.0 - kProbClamp);
    C->value[0] = -(y * std::log(q) + (1.0 - y) * std::log(1.0 - q));
  };
  fwd();
  record("bce_loss", {p}, out, fwd, [P, C, y]() {
    if (!P->requires_grad) return;
    P->ensure_grad();
    double q = std::clamp(P->value[0], kProbClamp, 1.0 - kProbClamp);
    P->grad[0] += C->grad[0] * (-y / q + (1.0 - y) / (1.0 - q));
  });
  return out;
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets) {
  require_rank2(logits, "cross_entropy_rows");
  std::int64_t m = logits.rows(), v = logits.cols();
  if (static_cast<std::int64_t>(targets.size()) != m) {
    throw ShapeError("cross_entropy_rows: " + std::to_string(targets.size()) + " targets for " +
                     shape_str(logits.shape()));
  }
  for (int t : targets) {
    if (t < 0 || t >= v) {
      throw InputError("cross_entropy_rows: target " + std::to_string(t) + " out of range [0, " +
                       std::to_string(v) + ")");
    }
  }
  if (m == 0) throw UsageError("cross_entropy_rows: empty batch");
  Tensor out = Tensor::uninitialized({1, 1}, logits.requires_grad());
  auto Z = logits.ptr(), C = out.ptr();
  auto fwd = [Z, C, targets, m, v]() {
    double total = 0.0;
    for (std::int64_t i = 0; i < m; ++i) {
      const double* z = Z->value.data() + i * v;
      double mx = z[0];
      for (std::int64_t j = 1; j < v; ++j) mx = std::max(mx, z[j]);
      double s = 0.0;
      for (std::int64_t j = 0; j < v; ++j) s += std::exp(z[j] - mx);
      total += (mx + std::log(s)) - z[targets[static_cast<std::size_t>(i)]];
    }
    C->value[0] = total / static_cast<double>(m);
  };
  fwd();
  record("cross_entropy_rows", {logits}, out, fwd, [Z, C, targets, m, v]() {
    if (!Z->requires_grad) return;
    Z->ensure_grad();
    double g = C->grad[0] / static_cast<double>(m);
    for (std::int64_t i = 0; i < m; ++i) {
      const double* z = Z->value.data() + i * v;
      double* gz = Z->grad.data() + i * v;
      double mx = z[0];
      for (std::int64_t j = 1; j < v; ++j) mx = std::max(mx, z[j]);
      double s = 0.0;
      for (std::int64_t j = 0; j < v; ++j) s += std::exp(z[j] - mx);
      for (std::int64_t j = 0; j < v; ++j) {
        double p = std::exp(z[j] - mx) / s;
        gz[j] += g * (p - (j == targets[static_cast<std::size_t>(i)] ? 1.0 : 0.0));
      }
    }
  });
  return out;
}

double finite_difference(Tensor leaf, std::int64_t index, double step,
                         const std::function<double()>& loss_value) {
  double saved = leaf.values()[static_cast<std::size_t>(index)];
  leaf.values()[static_cast<std::size_t>(index)] = saved + step;
  double up = loss_value();
  leaf.values()[static_cast<std::size_t>(index)] = saved - step;
  double down = loss_value();
  leaf.values()[static_cast<std::size_t>(index)] = saved;
  return (up - down) / (2.0 * step);
}

double gradcheck_max_rel_err(Tensor leaf, Tape& tape, const Tensor& loss, double step, Rng& rng,
                             std::int64_t max_coords) {
  std::vector<std::int64_t> coords;
  if (leaf.size() <= max_coords) {
    coords.resize(static_cast<std::size_t>(leaf.size()));
    std::iota(coords.begin(), coords.end(), 0);
  } else {
    for (std::int64_t i = 0; i < max_coords; ++i) coords.push_back(rng.randint(0, leaf.size() - 1));
  }
  auto eval = [&]() {
    tape.replay();
    return loss.item();
  };
  double worst = 0.0;
  for (auto idx : coords) {
    double fd = finite_difference(leaf, idx, step, eval);
    double an = leaf.grad()[static_cast<std::size_t>(idx)];
    double denom = std::max({1e-6, std::abs(fd), std::abs(an)});
    worst = std::max(worst, std::abs(fd - an) / denom);
  }
  // restore values recomputed during perturbation
  tape.replay();
  return worst;
}

}  // namespace lj
