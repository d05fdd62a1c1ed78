#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ctrlseq/errors.hpp"
#include "ctrlseq/rng.hpp"

namespace ctrlseq {

// Dense row-major f64 tensor participating in reverse-mode differentiation.
// A Tensor is a cheap handle; copies alias the same storage, clone() deep
// copies. The whole library runs on doubles: this is a correctness
// laboratory, and f64 keeps the finite-difference tolerances tight.
class Tensor {
 public:
  Tensor() : impl_(std::make_shared<Impl>()) {}

  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0)
      : impl_(std::make_shared<Impl>()) {
    impl_->shape = std::move(shape);
    impl_->data.assign(count(impl_->shape), fill);
  }

  static Tensor scalar(double v) {
    Tensor t({1});
    t.impl_->data[0] = v;
    return t;
  }

  static Tensor from(std::vector<std::size_t> shape, std::vector<double> data) {
    Tensor t;
    if (count(shape) != data.size())
      throw DimensionError("Tensor::from: shape does not match data length");
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    return t;
  }

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape()); }

  static Tensor randn(std::vector<std::size_t> shape, Rng& rng, double stddev) {
    Tensor t(std::move(shape));
    for (double& v : t.impl_->data) v = rng.normal(0.0, stddev);
    return t;
  }

  const std::vector<std::size_t>& shape() const { return impl_->shape; }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t size() const { return impl_->data.size(); }

  // 2-D accessors; a 1-D tensor behaves as a single row.
  std::size_t rows() const { return ndim() <= 1 ? 1 : impl_->shape[0]; }
  std::size_t cols() const {
    if (ndim() == 0) return 0;
    return impl_->shape[ndim() - 1];
  }

  std::vector<double>& data() { return impl_->data; }
  const std::vector<double>& data() const { return impl_->data; }

  double& at(std::size_t i) { return impl_->data[i]; }
  double at(std::size_t i) const { return impl_->data[i]; }
  double& at(std::size_t r, std::size_t c) { return impl_->data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }

  double value() const {
    if (size() != 1) throw ContractError("Tensor::value: tensor is not scalar");
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    impl_->requires_grad = flag;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  // Gradient buffers live behind the shared handle, so they are reachable
  // from const views too (backward rules hold const copies of their inputs).
  std::vector<double>& grad() const {
    if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
  }
  void zero_grad() const { impl_->grad.assign(impl_->data.size(), 0.0); }

  Tensor clone() const {
    Tensor t;
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    t.impl_->requires_grad = impl_->requires_grad;
    return t;
  }

  // Deep copy that never participates in gradient flow.
  Tensor detached() const { return clone().set_requires_grad(false); }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  bool all_finite() const {
    for (double v : impl_->data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::string shape_string() const {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < impl_->shape.size(); ++i)
      os << (i ? "," : "") << impl_->shape[i];
    os << ")";
    return os.str();
  }

  static std::size_t count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t s : shape) n *= s;
    return shape.empty() ? 0 : n;
  }

 private:
  struct Impl {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

// Reverse-mode tape. Operations are recorded in forward order, which is a
// topological order by construction; backward() replays the rules in reverse.
// A tape lives for one training/steering step and is confined to its thread.
class Tape {
 public:
  Tape() : prev_(active_) { active_ = this; }
  ~Tape() { active_ = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  void record(std::vector<Tensor> inputs, Tensor output, std::function<void()> rule) {
    nodes_.push_back(Node{std::move(inputs), std::move(output), std::move(rule)});
  }

  std::size_t op_count() const { return nodes_.size(); }

  // Populates grad for every requires_grad tensor reachable from `loss`;
  // unreachable tensors end with zero gradients. Deterministic: grads are
  // reset before replay, so repeated calls give bitwise-identical results.
  void backward(Tensor loss) {
    if (loss.size() != 1) throw ContractError("backward: loss must be a scalar");
    for (auto& node : nodes_) {
      for (auto& t : node.inputs) t.zero_grad();
      node.output.zero_grad();
    }
    loss.zero_grad();
    loss.grad()[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->rule();
  }

 private:
  struct Node {
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> rule;
  };
  std::vector<Node> nodes_;
  Tape* prev_;
  static inline thread_local Tape* active_ = nullptr;
};

namespace detail {

inline bool want_grad(std::initializer_list<const Tensor*> inputs) {
  if (Tape::active() == nullptr) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

inline void mark_and_record(std::initializer_list<const Tensor*> inputs, Tensor& out,
                            std::function<void()> rule) {
  bool rg = false;
  for (const Tensor* t : inputs) rg = rg || t->requires_grad();
  out.set_requires_grad(rg);
  if (rg && Tape::active() != nullptr) {
    std::vector<Tensor> in;
    in.reserve(inputs.size());
    for (const Tensor* t : inputs) in.push_back(*t);
    Tape::active()->record(std::move(in), out, std::move(rule));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                         b.shape_string());
}

}  // namespace detail

// ---- elementwise arithmetic -------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  // Same shape, or b broadcast as a row vector across a's rows.
  if (a.shape() == b.shape()) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.at(i) = a.at(i) + b.at(i);
    detail::mark_and_record({&a, &b}, out, [a, b, out]() mutable {
      const auto& g = out.grad();
      if (a.requires_grad()) {
        auto& ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
    return out;
  }
  if (b.ndim() == 1 && a.ndim() == 2 && b.size() == a.cols()) {
    Tensor out(a.shape());
    std::size_t r = a.rows(), c = a.cols();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out.at(i, j) = a.at(i, j) + b.at(j);
    detail::mark_and_record({&a, &b}, out, [a, b, out, r, c]() mutable {
      const auto& g = out.grad();
      if (a.requires_grad()) {
        auto& ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
      }
    });
    return out;
  }
  throw DimensionError("add: incompatible shapes " + a.shape_string() + " vs " +
                       b.shape_string());
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out.at(i) = a.at(i) * b.at(i);
  detail::mark_and_record({&a, &b}, out, [a, b, out]() mutable {
    const auto& g = out.grad();
    if (a.requires_grad()) {
      auto& ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.at(i);
    }
    if (b.requires_grad()) {
      auto& gb = b.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.at(i);
    }
  });
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out.at(i) = a.at(i) * c;
  detail::mark_and_record({&a}, out, [a, out, c]() mutable {
    const auto& g = out.grad();
    auto& ga = a.grad();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
  });
  return out;
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, neg(b)); }

// ---- matrix ops -------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() > 2 || b.ndim() > 2)
    throw DimensionError("matmul: expects 1-D or 2-D tensors");
  std::size_t m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
  if (k != k2)
    throw DimensionError("matmul: inner dimensions disagree " + a.shape_string() + " vs " +
                         b.shape_string());
  Tensor out({m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = out.data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t l = 0; l < k; ++l) {
      double av = pa[i * k + l];
      if (av == 0.0) continue;
      const double* brow = pb + l * n;
      double* crow = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  detail::mark_and_record({&a, &b}, out, [a, b, out, m, k, n]() mutable {
    const auto& g = out.grad();
    if (a.requires_grad()) {  // dA = dC * B^T
      auto& ga = a.grad();
      const auto& pb2 = b.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t l = 0; l < k; ++l) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * pb2[l * n + j];
          ga[i * k + l] += acc;
        }
    }
    if (b.requires_grad()) {  // dB = A^T * dC
      auto& gb = b.grad();
      const auto& pa2 = a.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t l = 0; l < k; ++l) {
          double av = pa2[i * k + l];
          if (av == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gb[l * n + j] += av * g[i * n + j];
        }
    }
  });
  return out;
}

inline Tensor transpose(const Tensor& a) {
  std::size_t r = a.rows(), c = a.cols();
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = a.at(i, j);
  detail::mark_and_record({&a}, out, [a, out, r, c]() mutable {
    const auto& g = out.grad();
    auto& ga = a.grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
  return out;
}

// ---- structural ops ---------------------------------------------------------

inline Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& ids) {
  std::size_t c = table.cols();
  for (std::size_t id : ids)
    if (id >= table.rows())
      throw IndexError("gather_rows: id " + std::to_string(id) + " out of range");
  Tensor out({ids.size(), c});
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) = table.at(ids[i], j);
  detail::mark_and_record({&table}, out, [table, out, ids, c]() mutable {
    const auto& g = out.grad();
    auto& gt = table.grad();
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) gt[ids[i] * c + j] += g[i * c + j];
  });
  return out;
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.size() == 0) return b;
  if (b.size() == 0) return a;
  if (a.cols() != b.cols()) throw DimensionError("concat_rows: column mismatch");
  std::size_t ra = a.rows(), rb = b.rows(), c = a.cols();
  Tensor out({ra + rb, c});
  for (std::size_t i = 0; i < ra * c; ++i) out.at(i) = a.at(i);
  for (std::size_t i = 0; i < rb * c; ++i) out.at(ra * c + i) = b.at(i);
  detail::mark_and_record({&a, &b}, out, [a, b, out, ra, rb, c]() mutable {
    const auto& g = out.grad();
    if (a.requires_grad()) {
      auto& ga = a.grad();
      for (std::size_t i = 0; i < ra * c; ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.grad();
      for (std::size_t i = 0; i < rb * c; ++i) gb[i] += g[ra * c + i];
    }
  });
  return out;
}

inline Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
  if (c1 > a.cols() || c0 >= c1) throw DimensionError("slice_cols: bad range");
  std::size_t r = a.rows(), c = a.cols(), w = c1 - c0;
  Tensor out({r, w});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out.at(i, j) = a.at(i, c0 + j);
  detail::mark_and_record({&a}, out, [a, out, r, c, c0, w]() mutable {
    const auto& g = out.grad();
    auto& ga = a.grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) ga[i * c + c0 + j] += g[i * w + j];
  });
  return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no parts");
  std::size_t r = parts[0].rows(), total = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) throw DimensionError("concat_cols: row mismatch");
    total += p.cols();
  }
  Tensor out({r, total});
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out.at(i, off + j) = p.at(i, j);
    off += p.cols();
  }
  bool rg = false;
  for (const auto& p : parts) rg = rg || p.requires_grad();
  out.set_requires_grad(rg);
  if (rg && Tape::active() != nullptr) {
    std::vector<Tensor> inputs = parts;
    Tape::active()->record(inputs, out, [parts, out, r, total]() mutable {
      const auto& g = out.grad();
      std::size_t off2 = 0;
      for (auto& p : parts) {
        if (p.requires_grad()) {
          auto& gp = p.grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < p.cols(); ++j) gp[i * p.cols() + j] += g[i * total + off2 + j];
        }
        off2 += p.cols();
      }
    });
  }
  return out;
}

inline Tensor row(const Tensor& a, std::size_t i) {
  if (i >= a.rows()) throw IndexError("row: index out of range");
  std::size_t c = a.cols();
  Tensor out({1, c});
  for (std::size_t j = 0; j < c; ++j) out.at(j) = a.at(i, j);
  detail::mark_and_record({&a}, out, [a, out, i, c]() mutable {
    const auto& g = out.grad();
    auto& ga = a.grad();
    for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j];
  });
  return out;
}

// ---- nonlinearities ---------------------------------------------------------

enum class Act { Relu, Sigmoid, Tanh };

inline Act activation_from_string(const std::string& name) {
  if (name == "relu") return Act::Relu;
  if (name == "sigmoid") return Act::Sigmoid;
  if (name == "tanh") return Act::Tanh;
  throw ConfigError("unknown activation kind: " + name);
}

inline Tensor activation(const Tensor& x, Act kind) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double v = x.at(i);
    switch (kind) {
      case Act::Relu: out.at(i) = v > 0.0 ? v : 0.0; break;
      case Act::Sigmoid: out.at(i) = 1.0 / (1.0 + std::exp(-v)); break;
      case Act::Tanh: out.at(i) = std::tanh(v); break;
    }
  }
  detail::mark_and_record({&x}, out, [x, out, kind]() mutable {
    const auto& g = out.grad();
    auto& gx = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      double y = out.at(i);
      double d = 0.0;
      switch (kind) {
        case Act::Relu: d = x.at(i) > 0.0 ? 1.0 : 0.0; break;
        case Act::Sigmoid: d = y * (1.0 - y); break;
        case Act::Tanh: d = 1.0 - y * y; break;
      }
      gx[i] += g[i] * d;
    }
  });
  return out;
}

inline Tensor relu(const Tensor& x) { return activation(x, Act::Relu); }
inline Tensor sigmoid(const Tensor& x) { return activation(x, Act::Sigmoid); }
inline Tensor tanh_op(const Tensor& x) { return activation(x, Act::Tanh); }

// Natural log clamped at 1e-12; used on probabilities.
inline Tensor log_op(const Tensor& x) {
  Tensor out(x.shape());
  constexpr double kFloor = 1e-12;
  for (std::size_t i = 0; i < x.size(); ++i) out.at(i) = std::log(x.at(i) < kFloor ? kFloor : x.at(i));
  detail::mark_and_record({&x}, out, [x, out]() mutable {
    const auto& g = out.grad();
    auto& gx = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      double v = x.at(i) < kFloor ? kFloor : x.at(i);
      gx[i] += g[i] / v;
    }
  });
  return out;
}

// ---- softmax family ---------------------------------------------------------

// Row-stabilized softmax over the last axis. The textbook definition
// overflows for large inputs; subtracting the row max is mandatory.
inline Tensor softmax(const Tensor& x) {
  if (x.cols() == 0) throw DimensionError("softmax: empty last axis");
  std::size_t r = x.rows(), c = x.cols();
  Tensor out(x.ndim() == 1 ? std::vector<std::size_t>{c} : std::vector<std::size_t>{r, c});
  for (std::size_t i = 0; i < r; ++i) {
    double mx = x.at(i * c);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x.at(i * c + j));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      double e = std::exp(x.at(i * c + j) - mx);
      out.at(i * c + j) = e;
      z += e;
    }
    for (std::size_t j = 0; j < c; ++j) out.at(i * c + j) /= z;
  }
  detail::mark_and_record({&x}, out, [x, out, r, c]() mutable {
    const auto& g = out.grad();
    auto& gx = x.grad();
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * out.at(i * c + j);
      for (std::size_t j = 0; j < c; ++j)
        gx[i * c + j] += out.at(i * c + j) * (g[i * c + j] - dot);
    }
  });
  return out;
}

inline Tensor log_softmax(const Tensor& x) {
  if (x.cols() == 0) throw DimensionError("log_softmax: empty last axis");
  std::size_t r = x.rows(), c = x.cols();
  Tensor out(x.ndim() == 1 ? std::vector<std::size_t>{c} : std::vector<std::size_t>{r, c});
  for (std::size_t i = 0; i < r; ++i) {
    double mx = x.at(i * c);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x.at(i * c + j));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(x.at(i * c + j) - mx);
    double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) out.at(i * c + j) = x.at(i * c + j) - lse;
  }
  detail::mark_and_record({&x}, out, [x, out, r, c]() mutable {
    const auto& g = out.grad();
    auto& gx = x.grad();
    for (std::size_t i = 0; i < r; ++i) {
      double gsum = 0.0;
      for (std::size_t j = 0; j < c; ++j) gsum += g[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        gx[i * c + j] += g[i * c + j] - std::exp(out.at(i * c + j)) * gsum;
    }
  });
  return out;
}

// Additive causal mask: row i may attend to keys 0..i+offset, where offset is
// the number of already-cached positions. A large negative constant rather
// than -inf keeps subsequent arithmetic finite.
inline Tensor causal_masked(const Tensor& scores, std::size_t offset) {
  constexpr double kMaskValue = -1e30;
  std::size_t r = scores.rows(), c = scores.cols();
  Tensor out(scores.shape());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      out.at(i, j) = (j > i + offset) ? kMaskValue : scores.at(i, j);
  detail::mark_and_record({&scores}, out, [scores, out, r, c, offset]() mutable {
    const auto& g = out.grad();
    auto& gs = scores.grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j <= std::min(i + offset, c - 1); ++j) gs[i * c + j] += g[i * c + j];
  });
  return out;
}

// ---- normalization ----------------------------------------------------------

inline Tensor layer_norm(const Tensor& h, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  if (eps <= 0.0) throw ConfigError("layer_norm: eps must be positive");
  std::size_t r = h.rows(), c = h.cols();
  if (gamma.size() != c || beta.size() != c)
    throw DimensionError("layer_norm: scale/shift must have width " + std::to_string(c));
  Tensor out(h.shape());
  std::vector<double> mean(r), inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += h.at(i, j);
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      double d = h.at(i, j) - mu;
      var += d * d;
    }
    var /= static_cast<double>(c);
    mean[i] = mu;
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j)
      out.at(i, j) = (h.at(i, j) - mu) * inv_std[i] * gamma.at(j) + beta.at(j);
  }
  detail::mark_and_record({&h, &gamma, &beta}, out,
                          [h, gamma, beta, out, r, c, mean, inv_std]() mutable {
    const auto& g = out.grad();
    for (std::size_t i = 0; i < r; ++i) {
      // x_hat = (x - mu) * inv_std
      if (h.requires_grad()) {
        auto& gh = h.grad();
        double sum_gy = 0.0, sum_gy_xhat = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          double xhat = (h.at(i, j) - mean[i]) * inv_std[i];
          double gy = g[i * c + j] * gamma.at(j);
          sum_gy += gy;
          sum_gy_xhat += gy * xhat;
        }
        double n = static_cast<double>(c);
        for (std::size_t j = 0; j < c; ++j) {
          double xhat = (h.at(i, j) - mean[i]) * inv_std[i];
          double gy = g[i * c + j] * gamma.at(j);
          gh[i * c + j] += inv_std[i] * (gy - sum_gy / n - xhat * sum_gy_xhat / n);
        }
      }
      if (gamma.requires_grad()) {
        auto& gg = gamma.grad();
        for (std::size_t j = 0; j < c; ++j)
          gg[j] += g[i * c + j] * (h.at(i, j) - mean[i]) * inv_std[i];
      }
      if (beta.requires_grad()) {
        auto& gb = beta.grad();
        for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
      }
    }
  });
  return out;
}

// ---- reductions -------------------------------------------------------------

inline Tensor sum(const Tensor& x) {
  Tensor out = Tensor::scalar(std::accumulate(x.data().begin(), x.data().end(), 0.0));
  detail::mark_and_record({&x}, out, [x, out]() mutable {
    double g = out.grad()[0];
    auto& gx = x.grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
  return out;
}

inline Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

// Column means over rows: [t x d] -> [d]. Gradient spreads evenly.
inline Tensor mean_rows(const Tensor& x) {
  std::size_t r = x.rows(), c = x.cols();
  if (r == 0) throw DimensionError("mean_rows: no rows");
  Tensor out({c});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j) += x.at(i, j);
  for (std::size_t j = 0; j < c; ++j) out.at(j) /= static_cast<double>(r);
  detail::mark_and_record({&x}, out, [x, out, r, c]() mutable {
    const auto& g = out.grad();
    auto& gx = x.grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j] / static_cast<double>(r);
  });
  return out;
}

inline Tensor pick(const Tensor& x, std::size_t index) {
  if (index >= x.size()) throw IndexError("pick: index out of range");
  Tensor out = Tensor::scalar(x.at(index));
  detail::mark_and_record({&x}, out, [x, out, index]() mutable {
    x.grad()[index] += out.grad()[0];
  });
  return out;
}

// ---- losses -----------------------------------------------------------------

// Mean NLL over the rows selected by `mask` (empty mask = all rows).
// Backward uses the (softmax - onehot) / n identity.
inline Tensor nll_masked(const Tensor& logits, const std::vector<std::size_t>& targets,
                         const std::vector<bool>& mask = {}) {
  std::size_t r = logits.rows(), c = logits.cols();
  if (targets.size() != r) throw DimensionError("nll_masked: one target per row required");
  if (!mask.empty() && mask.size() != r) throw DimensionError("nll_masked: bad mask length");
  std::size_t active = 0;
  for (std::size_t i = 0; i < r; ++i)
    if (mask.empty() || mask[i]) ++active;
  if (active == 0) throw ContractError("nll_masked: no unmasked positions");
  for (std::size_t i = 0; i < r; ++i)
    if ((mask.empty() || mask[i]) && targets[i] >= c)
      throw IndexError("nll_masked: target " + std::to_string(targets[i]) + " out of range");

  auto probs = std::make_shared<std::vector<double>>(r * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    double mx = logits.at(i * c);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits.at(i * c + j));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      double e = std::exp(logits.at(i * c + j) - mx);
      (*probs)[i * c + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < c; ++j) (*probs)[i * c + j] /= z;
    if (mask.empty() || mask[i]) loss -= logits.at(i * c + targets[i]) - mx - std::log(z);
  }
  Tensor out = Tensor::scalar(loss / static_cast<double>(active));
  detail::mark_and_record({&logits}, out, [logits, out, targets, mask, probs, r, c, active]() mutable {
    double g = out.grad()[0] / static_cast<double>(active);
    auto& gl = logits.grad();
    for (std::size_t i = 0; i < r; ++i) {
      if (!mask.empty() && !mask[i]) continue;
      for (std::size_t j = 0; j < c; ++j) gl[i * c + j] += g * (*probs)[i * c + j];
      gl[i * c + targets[i]] -= g;
    }
  });
  return out;
}

enum class PredKind { Logits, Probabilities };

// Mean cross-entropy between per-row predictions and integer targets.
inline Tensor cross_entropy(const Tensor& pred, const std::vector<std::size_t>& targets,
                            PredKind kind = PredKind::Logits) {
  if (kind == PredKind::Logits) return nll_masked(pred, targets);
  std::size_t r = pred.rows(), c = pred.cols();
  if (targets.size() != r) throw DimensionError("cross_entropy: one target per row required");
  for (std::size_t t : targets)
    if (t >= c) throw IndexError("cross_entropy: target out of range");
  constexpr double kFloor = 1e-12;
  double loss = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    double p = pred.at(i, targets[i]);
    loss -= std::log(p < kFloor ? kFloor : p);
  }
  Tensor out = Tensor::scalar(loss / static_cast<double>(r));
  detail::mark_and_record({&pred}, out, [pred, out, targets, r, c]() mutable {
    double g = out.grad()[0] / static_cast<double>(r);
    auto& gp = pred.grad();
    for (std::size_t i = 0; i < r; ++i) {
      double p = pred.at(i, targets[i]);
      gp[i * c + targets[i]] += g * (-1.0 / (p < kFloor ? kFloor : p));
    }
  });
  return out;
}

// ---- finite-difference oracle -------------------------------------------------

// Central-difference check of d(f)/d(params) against the tape. Returns the
// max over all parameter entries of |analytic - cd| / max(|analytic|, |cd|, 1e-8).
inline double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                         double h = 1e-5) {
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    for (auto& p : params) p.set_requires_grad(true);
    Tensor loss = f();
    if (!std::isfinite(loss.value())) throw NumericError("grad_check: non-finite loss");
    tape.backward(loss);
    for (auto& p : params) analytic.push_back(p.grad());
  }
  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    for (std::size_t i = 0; i < p.size(); ++i) {
      double saved = p.at(i);
      p.at(i) = saved + h;
      double up = f().value();
      p.at(i) = saved - h;
      double dn = f().value();
      p.at(i) = saved;
      if (!std::isfinite(up) || !std::isfinite(dn))
        throw NumericError("grad_check: non-finite evaluation");
      double cd = (up - dn) / (2.0 * h);
      double a = analytic[pi][i];
      double err = std::fabs(a - cd) / std::max({std::fabs(a), std::fabs(cd), 1e-8});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace ctrlseq
