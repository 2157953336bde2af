#pragma once

// Reverse-mode autodiff substrate: dense 64-bit float tensors on a dynamic
// tape, the op set needed by the adapters (linear algebra, softmax, masked
// attention, gathers), and a central-finite-difference gradient checker.
//
// Graphs are built forward, freed after backward(). A graph is confined to
// one thread; tensors are immutable once created except for leaf values,
// which an optimizer may rewrite between graphs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fdta::ad {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d < 0) throw std::invalid_argument("negative dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

// Additive logit penalty for blocked attention positions. Large enough that
// exp(x - rowmax) underflows to exactly +0.0, so masked slots cannot perturb
// unmasked outputs even in the last bit.
inline constexpr double kMaskPenalty = 1e30;

// Binary square mask over a token sequence; 1 = blocked. Diagonal must stay
// open.
struct AttentionMask {
  int t = 0;
  std::vector<std::uint8_t> blocked;  // row-major t*t

  AttentionMask() = default;
  explicit AttentionMask(int t_) : t(t_), blocked(static_cast<std::size_t>(t_) * t_, 0) {
    if (t_ < 1) throw std::invalid_argument("AttentionMask: t must be >= 1");
  }

  std::uint8_t& at(int j, int k) { return blocked[static_cast<std::size_t>(j) * t + k]; }
  std::uint8_t at(int j, int k) const { return blocked[static_cast<std::size_t>(j) * t + k]; }

  void validate() const {
    for (int j = 0; j < t; ++j) {
      if (at(j, j) != 0) throw std::invalid_argument("AttentionMask: diagonal must be unmasked");
      for (int k = 0; k < t; ++k)
        if (at(j, k) > 1) throw std::invalid_argument("AttentionMask: entries must be binary");
    }
  }
};

// Global tape switch. Inference paths disable it to skip closure creation.
class GradMode {
 public:
  static bool& enabled() {
    static bool flag = true;
    return flag;
  }
};

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(GradMode::enabled()) { GradMode::enabled() = false; }
  ~NoGradGuard() { GradMode::enabled() = prev; }
};

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on demand during backward
  bool requires_grad = false;
  std::uint64_t stamp = 0;  // creation order == topological order
  std::uint64_t mark = 0;   // visit tag for graph traversal
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward;

  std::size_t numel() const { return value.size(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

inline std::uint64_t next_stamp() {
  static std::uint64_t counter = 0;
  return ++counter;
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor leaf(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size())
      throw std::invalid_argument("Tensor::leaf: shape/value size mismatch");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    n->stamp = next_stamp();
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape), 0.0);
    return leaf(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape), value);
    return leaf(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return leaf({1}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return node().shape; }
  int dim(std::size_t i) const { return node().shape.at(i); }
  int rank() const { return static_cast<int>(node().shape.size()); }
  std::size_t numel() const { return node().value.size(); }
  const std::vector<double>& values() const& { return node().value; }
  std::vector<double> values() && { return node().value; }  // rvalue: copy out
  double value_at(std::size_t i) const { return node().value.at(i); }

  double scalar_value() const {
    if (numel() != 1) throw std::invalid_argument("scalar_value: tensor is not scalar");
    return node().value[0];
  }

  bool requires_grad() const { return node().requires_grad; }

  // Leaf mutation hook for optimizers / finite differences.
  std::vector<double>& mutable_values() {
    if (!node().parents.empty())
      throw std::logic_error("mutable_values: only leaves may be rewritten");
    return node().value;
  }

  const std::vector<double>& grad() const& {
    if (node().grad.size() != node().value.size())
      throw std::logic_error("grad: not populated (run backward first)");
    return node().grad;
  }
  std::vector<double> grad() && {
    if (node().grad.size() != node().value.size())
      throw std::logic_error("grad: not populated (run backward first)");
    return node().grad;
  }

  void zero_grad() { node().grad.assign(node().value.size(), 0.0); }

  // Reverse pass from a scalar root. Frees the interior of the graph after
  // use; leaves keep values and accumulated grads.
  void backward() {
    Node& root = node();
    if (root.numel() != 1) throw std::invalid_argument("backward: root must be scalar");
    if (!std::isfinite(root.value[0]))
      throw std::runtime_error("backward: non-finite loss value");

    std::vector<NodePtr> order;
    collect(n_, order);
    std::sort(order.begin(), order.end(),
              [](const NodePtr& a, const NodePtr& b) { return a->stamp > b->stamp; });

    root.ensure_grad();
    root.grad[0] = 1.0;
    for (auto& np : order) {
      if (!np->backward) continue;
      np->ensure_grad();
      for (auto& p : np->parents) p->ensure_grad();
      np->backward(*np);
      np->backward = nullptr;
      np->parents.clear();
    }
  }

  Node& node() const {
    if (!n_) throw std::logic_error("use of undefined Tensor");
    return *n_;
  }
  const NodePtr& ptr() const { return n_; }

  explicit Tensor(NodePtr n) : n_(std::move(n)) {}

 private:
  static void collect(const NodePtr& n, std::vector<NodePtr>& order) {
    // Iterative DFS; graphs can share subtrees, so tag visited nodes.
    static std::uint64_t tag_counter = 0;
    const std::uint64_t tag = ++tag_counter;
    std::vector<NodePtr> stack{n};
    while (!stack.empty()) {
      NodePtr cur = stack.back();
      stack.pop_back();
      if (cur->mark == tag) continue;
      cur->mark = tag;
      order.push_back(cur);
      for (auto& p : cur->parents) stack.push_back(p);
    }
  }

  NodePtr n_;
};

namespace detail {

inline Tensor make_op(Shape shape, std::vector<double> value,
                      std::vector<NodePtr> parents,
                      std::function<void(Node&)> backward) {
  for (double x : value)
    if (!std::isfinite(x)) throw std::runtime_error("op produced non-finite value");
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->stamp = next_stamp();
  bool rg = false;
  for (auto& p : parents) rg = rg || p->requires_grad;
  n->requires_grad = rg && GradMode::enabled();
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] + b.values()[i];
  return detail::make_op(a.shape(), std::move(v), {a.ptr(), b.ptr()}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i];
      if (pb.requires_grad) pb.grad[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] - b.values()[i];
  return detail::make_op(a.shape(), std::move(v), {a.ptr(), b.ptr()}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i];
      if (pb.requires_grad) pb.grad[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * b.values()[i];
  return detail::make_op(a.shape(), std::move(v), {a.ptr(), b.ptr()}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i] * pb.value[i];
      if (pb.requires_grad) pb.grad[i] += self.grad[i] * pa.value[i];
    }
  });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "div");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (b.values()[i] == 0.0) throw std::invalid_argument("div: zero denominator");
    v[i] = a.values()[i] / b.values()[i];
  }
  return detail::make_op(a.shape(), std::move(v), {a.ptr(), b.ptr()}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double inv = 1.0 / pb.value[i];
      if (pa.requires_grad) pa.grad[i] += self.grad[i] * inv;
      if (pb.requires_grad) pb.grad[i] -= self.grad[i] * pa.value[i] * inv * inv;
    }
  });
}

inline Tensor neg(const Tensor& a) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = -a.values()[i];
  return detail::make_op(a.shape(), std::move(v), {a.ptr()}, [](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] -= self.grad[i];
  });
}

inline Tensor smul(const Tensor& a, double c) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * c;
  return detail::make_op(a.shape(), std::move(v), {a.ptr()}, [c](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * c;
  });
}

inline Tensor sadd(const Tensor& a, double c) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] + c;
  return detail::make_op(a.shape(), std::move(v), {a.ptr()}, [](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

// Adds a same-size constant array (no gradient into the constant).
inline Tensor add_const(const Tensor& a, const std::vector<double>& c) {
  if (c.size() != a.numel()) throw std::invalid_argument("add_const: size mismatch");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] + c[i];
  return detail::make_op(a.shape(), std::move(v), {a.ptr()}, [](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities

inline Tensor relu(const Tensor& a) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] > 0.0 ? a.values()[i] : 0.0;
  return detail::make_op(a.shape(), std::move(v), {a.ptr()}, [](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (p.value[i] > 0.0) p.grad[i] += self.grad[i];
  });
}

inline Tensor sigmoid(const Tensor& a) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 1.0 / (1.0 + std::exp(-a.values()[i]));
  return detail::make_op(a.shape(), std::move(v), {a.ptr()}, [](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double y = self.value[i];
      p.grad[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

inline Tensor log_t(const Tensor& a) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (a.values()[i] <= 0.0) throw std::invalid_argument("log: nonpositive input");
    v[i] = std::log(a.values()[i]);
  }
  return detail::make_op(a.shape(), std::move(v), {a.ptr()}, [](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      p.grad[i] += self.grad[i] / p.value[i];
  });
}

inline Tensor exp_t(const Tensor& a) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::exp(a.values()[i]);
  return detail::make_op(a.shape(), std::move(v), {a.ptr()}, [](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      p.grad[i] += self.grad[i] * self.value[i];
  });
}

// Elementwise a^p, p constant; inputs must be nonnegative.
inline Tensor pow_t(const Tensor& a, double p) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (a.values()[i] < 0.0) throw std::invalid_argument("pow: negative base");
    v[i] = std::pow(a.values()[i], p);
  }
  return detail::make_op(a.shape(), std::move(v), {a.ptr()}, [p](Node& self) {
    Node& pa = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double d = pa.value[i] == 0.0 && p < 1.0 ? 0.0 : p * std::pow(pa.value[i], p - 1.0);
      pa.grad[i] += self.grad[i] * d;
    }
  });
}

inline Tensor abs_t(const Tensor& a) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::fabs(a.values()[i]);
  return detail::make_op(a.shape(), std::move(v), {a.ptr()}, [](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double s = p.value[i] > 0.0 ? 1.0 : (p.value[i] < 0.0 ? -1.0 : 0.0);
      p.grad[i] += self.grad[i] * s;
    }
  });
}

// Clamp below at constant c; gradient flows only where a > c.
inline Tensor clamp_min(const Tensor& a, double c) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::max(a.values()[i], c);
  return detail::make_op(a.shape(), std::move(v), {a.ptr()}, [c](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (p.value[i] > c) p.grad[i] += self.grad[i];
  });
}

// Elementwise min/max of two tensors; ties route gradient to the first arg.
inline Tensor max_el(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "max_el");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::max(a.values()[i], b.values()[i]);
  return detail::make_op(a.shape(), std::move(v), {a.ptr(), b.ptr()}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.value[i] >= pb.value[i]) {
        if (pa.requires_grad) pa.grad[i] += self.grad[i];
      } else if (pb.requires_grad) {
        pb.grad[i] += self.grad[i];
      }
    }
  });
}

inline Tensor min_el(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "min_el");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::min(a.values()[i], b.values()[i]);
  return detail::make_op(a.shape(), std::move(v), {a.ptr(), b.ptr()}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.value[i] <= pb.value[i]) {
        if (pa.requires_grad) pa.grad[i] += self.grad[i];
      } else if (pb.requires_grad) {
        pb.grad[i] += self.grad[i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and shape ops

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  return detail::make_op({1}, {s}, {a.ptr()}, [](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw std::invalid_argument("mean: empty tensor");
  return smul(sum(a), 1.0 / static_cast<double>(a.numel()));
}

inline Tensor dot(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a.values()[i] * b.values()[i];
  return detail::make_op({1}, {s}, {a.ptr(), b.ptr()}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const double g = self.grad[0];
    for (std::size_t i = 0; i < pa.value.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += g * pb.value[i];
      if (pb.requires_grad) pb.grad[i] += g * pa.value[i];
    }
  });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) throw std::invalid_argument("reshape: numel mismatch");
  std::vector<double> v = a.values();
  return detail::make_op(std::move(shape), std::move(v), {a.ptr()}, [](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

inline Tensor gather(const Tensor& a, std::vector<std::size_t> idx) {
  std::vector<double> v(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= a.numel()) throw std::out_of_range("gather: index out of range");
    v[i] = a.values()[idx[i]];
  }
  const int n = static_cast<int>(idx.size());
  return detail::make_op({n}, std::move(v), {a.ptr()}, [idx = std::move(idx)](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < idx.size(); ++i) p.grad[idx[i]] += self.grad[i];
  });
}

inline Tensor concat_vec(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_vec: no parts");
  std::vector<double> v;
  std::vector<NodePtr> parents;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    v.insert(v.end(), p.values().begin(), p.values().end());
    parents.push_back(p.ptr());
    sizes.push_back(p.numel());
  }
  const int n = static_cast<int>(v.size());
  return detail::make_op({n}, std::move(v), std::move(parents),
                         [sizes = std::move(sizes)](Node& self) {
                           std::size_t off = 0;
                           for (std::size_t k = 0; k < sizes.size(); ++k) {
                             Node& p = *self.parents[k];
                             if (p.requires_grad)
                               for (std::size_t i = 0; i < sizes[k]; ++i)
                                 p.grad[i] += self.grad[off + i];
                             off += sizes[k];
                           }
                         });
}

// Stacks 1-D rows and/or matrices sharing a column count into one matrix.
inline Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  int cols = parts.front().rank() == 1 ? parts.front().dim(0) : parts.front().dim(1);
  int rows = 0;
  std::vector<double> v;
  std::vector<NodePtr> parents;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    const int pc = p.rank() == 1 ? p.dim(0) : p.dim(1);
    if (p.rank() > 2 || pc != cols)
      throw std::invalid_argument("concat_rows: incompatible part shape");
    rows += p.rank() == 1 ? 1 : p.dim(0);
    v.insert(v.end(), p.values().begin(), p.values().end());
    parents.push_back(p.ptr());
    sizes.push_back(p.numel());
  }
  return detail::make_op({rows, cols}, std::move(v), std::move(parents),
                         [sizes = std::move(sizes)](Node& self) {
                           std::size_t off = 0;
                           for (std::size_t k = 0; k < sizes.size(); ++k) {
                             Node& p = *self.parents[k];
                             if (p.requires_grad)
                               for (std::size_t i = 0; i < sizes[k]; ++i)
                                 p.grad[i] += self.grad[off + i];
                             off += sizes[k];
                           }
                         });
}

inline Tensor pick_row(const Tensor& m, int r) {
  if (m.rank() != 2) throw std::invalid_argument("pick_row: matrix expected");
  const int rows = m.dim(0), cols = m.dim(1);
  if (r < 0 || r >= rows) throw std::out_of_range("pick_row: row out of range");
  std::vector<double> v(m.values().begin() + static_cast<std::size_t>(r) * cols,
                        m.values().begin() + static_cast<std::size_t>(r + 1) * cols);
  return detail::make_op({cols}, std::move(v), {m.ptr()}, [r, cols](Node& self) {
    Node& p = *self.parents[0];
    for (int c = 0; c < cols; ++c)
      p.grad[static_cast<std::size_t>(r) * cols + c] += self.grad[c];
  });
}

inline Tensor slice_cols(const Tensor& m, int c0, int len) {
  if (m.rank() != 2) throw std::invalid_argument("slice_cols: matrix expected");
  const int rows = m.dim(0), cols = m.dim(1);
  if (c0 < 0 || len <= 0 || c0 + len > cols) throw std::out_of_range("slice_cols: bad range");
  std::vector<double> v(static_cast<std::size_t>(rows) * len);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < len; ++c)
      v[static_cast<std::size_t>(r) * len + c] =
          m.values()[static_cast<std::size_t>(r) * cols + c0 + c];
  return detail::make_op({rows, len}, std::move(v), {m.ptr()}, [rows, cols, c0, len](Node& self) {
    Node& p = *self.parents[0];
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < len; ++c)
        p.grad[static_cast<std::size_t>(r) * cols + c0 + c] +=
            self.grad[static_cast<std::size_t>(r) * len + c];
  });
}

inline Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  const int rows = parts.front().dim(0);
  int cols = 0;
  std::vector<NodePtr> parents;
  std::vector<int> widths;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != rows)
      throw std::invalid_argument("concat_cols: incompatible part shape");
    cols += p.dim(1);
    parents.push_back(p.ptr());
    widths.push_back(p.dim(1));
  }
  std::vector<double> v(static_cast<std::size_t>(rows) * cols);
  int off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const int w = widths[k];
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < w; ++c)
        v[static_cast<std::size_t>(r) * cols + off + c] =
            parts[k].values()[static_cast<std::size_t>(r) * w + c];
    off += w;
  }
  return detail::make_op({rows, cols}, std::move(v), std::move(parents),
                         [rows, cols, widths = std::move(widths)](Node& self) {
                           int off2 = 0;
                           for (std::size_t k = 0; k < widths.size(); ++k) {
                             Node& p = *self.parents[k];
                             const int w = widths[k];
                             if (p.requires_grad)
                               for (int r = 0; r < rows; ++r)
                                 for (int c = 0; c < w; ++c)
                                   p.grad[static_cast<std::size_t>(r) * w + c] +=
                                       self.grad[static_cast<std::size_t>(r) * cols + off2 + c];
                             off2 += w;
                           }
                         });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: dimension mismatch");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> v(static_cast<std::size_t>(m) * n, 0.0);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      const double aip = av[static_cast<std::size_t>(i) * k + p];
      if (aip == 0.0) continue;
      const std::size_t brow = static_cast<std::size_t>(p) * n;
      const std::size_t crow = static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) v[crow + j] += aip * bv[brow + j];
    }
  return detail::make_op({m, n}, std::move(v), {a.ptr(), b.ptr()}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      // dA = dC * B^T
      for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
          double s = 0.0;
          const std::size_t crow = static_cast<std::size_t>(i) * n;
          const std::size_t brow = static_cast<std::size_t>(p) * n;
          for (int j = 0; j < n; ++j) s += self.grad[crow + j] * pb.value[brow + j];
          pa.grad[static_cast<std::size_t>(i) * k + p] += s;
        }
    }
    if (pb.requires_grad) {
      // dB = A^T * dC
      for (int i = 0; i < m; ++i) {
        const std::size_t arow = static_cast<std::size_t>(i) * k;
        const std::size_t crow = static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
          const double aip = pa.value[arow + p];
          if (aip == 0.0) continue;
          const std::size_t brow = static_cast<std::size_t>(p) * n;
          for (int j = 0; j < n; ++j) pb.grad[brow + j] += aip * self.grad[crow + j];
        }
      }
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose: matrix expected");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> v(a.numel());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      v[static_cast<std::size_t>(j) * m + i] = a.values()[static_cast<std::size_t>(i) * n + j];
  return detail::make_op({n, m}, std::move(v), {a.ptr()}, [m, n](Node& self) {
    Node& p = *self.parents[0];
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        p.grad[static_cast<std::size_t>(i) * n + j] +=
            self.grad[static_cast<std::size_t>(j) * m + i];
  });
}

// Adds a row vector to every row of a matrix (bias broadcast).
inline Tensor add_rowvec(const Tensor& m, const Tensor& v) {
  if (m.rank() != 2 || v.rank() != 1 || m.dim(1) != v.dim(0))
    throw std::invalid_argument("add_rowvec: shape mismatch");
  const int rows = m.dim(0), cols = m.dim(1);
  std::vector<double> out(m.numel());
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      out[static_cast<std::size_t>(r) * cols + c] =
          m.values()[static_cast<std::size_t>(r) * cols + c] + v.values()[c];
  return detail::make_op(m.shape(), std::move(out), {m.ptr(), v.ptr()}, [rows, cols](Node& self) {
    Node& pm = *self.parents[0];
    Node& pv = *self.parents[1];
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        const double g = self.grad[static_cast<std::size_t>(r) * cols + c];
        if (pm.requires_grad) pm.grad[static_cast<std::size_t>(r) * cols + c] += g;
        if (pv.requires_grad) pv.grad[c] += g;
      }
  });
}

// ---------------------------------------------------------------------------
// Softmax family

namespace detail {
inline void softmax_rows_raw(const std::vector<double>& in, int rows, int cols,
                             std::vector<double>& out) {
  out.resize(in.size());
  for (int r = 0; r < rows; ++r) {
    const std::size_t off = static_cast<std::size_t>(r) * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < cols; ++c) mx = std::max(mx, in[off + c]);
    double s = 0.0;
    for (int c = 0; c < cols; ++c) {
      out[off + c] = std::exp(in[off + c] - mx);
      s += out[off + c];
    }
    const double inv = 1.0 / s;
    for (int c = 0; c < cols; ++c) out[off + c] *= inv;
  }
}
}  // namespace detail

inline Tensor softmax_rows(const Tensor& a) {
  if (a.rank() != 2) throw std::invalid_argument("softmax_rows: matrix expected");
  const int rows = a.dim(0), cols = a.dim(1);
  if (cols == 0) throw std::invalid_argument("softmax_rows: empty rows");
  std::vector<double> v;
  detail::softmax_rows_raw(a.values(), rows, cols, v);
  return detail::make_op(a.shape(), std::move(v), {a.ptr()}, [rows, cols](Node& self) {
    Node& p = *self.parents[0];
    for (int r = 0; r < rows; ++r) {
      const std::size_t off = static_cast<std::size_t>(r) * cols;
      double acc = 0.0;
      for (int c = 0; c < cols; ++c) acc += self.grad[off + c] * self.value[off + c];
      for (int c = 0; c < cols; ++c)
        p.grad[off + c] += self.value[off + c] * (self.grad[off + c] - acc);
    }
  });
}

inline Tensor softmax(const Tensor& v) {
  if (v.rank() != 1) throw std::invalid_argument("softmax: vector expected");
  if (v.numel() == 0) throw std::invalid_argument("softmax: empty vector");
  Tensor m = reshape(v, {1, v.dim(0)});
  return reshape(softmax_rows(m), {v.dim(0)});
}

inline Tensor logsumexp(const Tensor& v) {
  if (v.rank() != 1 || v.numel() == 0) throw std::invalid_argument("logsumexp: nonempty vector expected");
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : v.values()) mx = std::max(mx, x);
  double s = 0.0;
  for (double x : v.values()) s += std::exp(x - mx);
  const double y = mx + std::log(s);
  return detail::make_op({1}, {y}, {v.ptr()}, [mx, s](Node& self) {
    Node& p = *self.parents[0];
    const double g = self.grad[0];
    for (std::size_t i = 0; i < p.value.size(); ++i)
      p.grad[i] += g * std::exp(p.value[i] - mx) / s;
  });
}

// ---------------------------------------------------------------------------
// Normalization

// L2-normalizes a vector; errors on (near-)zero input.
inline Tensor l2_normalize(const Tensor& v) {
  if (v.rank() != 1) throw std::invalid_argument("l2_normalize: vector expected");
  double n2 = 0.0;
  for (double x : v.values()) n2 += x * x;
  const double r = std::sqrt(n2);
  if (r < 1e-12) throw std::invalid_argument("l2_normalize: zero vector");
  std::vector<double> out(v.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v.values()[i] / r;
  return detail::make_op(v.shape(), std::move(out), {v.ptr()}, [r](Node& self) {
    Node& p = *self.parents[0];
    double zg = 0.0;
    for (std::size_t i = 0; i < self.value.size(); ++i) zg += self.value[i] * self.grad[i];
    for (std::size_t i = 0; i < self.value.size(); ++i)
      p.grad[i] += (self.grad[i] - self.value[i] * zg) / r;
  });
}

// Row-wise L2 normalization of a matrix.
inline Tensor l2_normalize_rows(const Tensor& m) {
  if (m.rank() != 2) throw std::invalid_argument("l2_normalize_rows: matrix expected");
  const int rows = m.dim(0), cols = m.dim(1);
  std::vector<double> out(m.numel());
  std::vector<double> norms(rows);
  for (int r = 0; r < rows; ++r) {
    double n2 = 0.0;
    const std::size_t off = static_cast<std::size_t>(r) * cols;
    for (int c = 0; c < cols; ++c) n2 += m.values()[off + c] * m.values()[off + c];
    norms[r] = std::sqrt(n2);
    if (norms[r] < 1e-12) throw std::invalid_argument("l2_normalize_rows: zero row");
    for (int c = 0; c < cols; ++c) out[off + c] = m.values()[off + c] / norms[r];
  }
  return detail::make_op(m.shape(), std::move(out), {m.ptr()},
                         [rows, cols, norms = std::move(norms)](Node& self) {
                           Node& p = *self.parents[0];
                           for (int r = 0; r < rows; ++r) {
                             const std::size_t off = static_cast<std::size_t>(r) * cols;
                             double zg = 0.0;
                             for (int c = 0; c < cols; ++c) zg += self.value[off + c] * self.grad[off + c];
                             for (int c = 0; c < cols; ++c)
                               p.grad[off + c] +=
                                   (self.grad[off + c] - self.value[off + c] * zg) / norms[r];
                           }
                         });
}

// Row-wise layer normalization with learned gain/bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  if (x.rank() != 2 || gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != x.dim(1) ||
      bias.dim(0) != x.dim(1))
    throw std::invalid_argument("layer_norm: shape mismatch");
  const int rows = x.dim(0), cols = x.dim(1);
  std::vector<double> out(x.numel());
  std::vector<double> mu(rows), sig(rows);
  for (int r = 0; r < rows; ++r) {
    const std::size_t off = static_cast<std::size_t>(r) * cols;
    double m = 0.0;
    for (int c = 0; c < cols; ++c) m += x.values()[off + c];
    m /= cols;
    double var = 0.0;
    for (int c = 0; c < cols; ++c) {
      const double d = x.values()[off + c] - m;
      var += d * d;
    }
    var /= cols;
    mu[r] = m;
    sig[r] = std::sqrt(var + eps);
    for (int c = 0; c < cols; ++c)
      out[off + c] = (x.values()[off + c] - m) / sig[r] * gain.values()[c] + bias.values()[c];
  }
  return detail::make_op(
      x.shape(), std::move(out), {x.ptr(), gain.ptr(), bias.ptr()},
      [rows, cols, mu = std::move(mu), sig = std::move(sig)](Node& self) {
        Node& px = *self.parents[0];
        Node& pg = *self.parents[1];
        Node& pb = *self.parents[2];
        for (int r = 0; r < rows; ++r) {
          const std::size_t off = static_cast<std::size_t>(r) * cols;
          // xhat_c = (x - mu) / sig ; dy flows through gain.
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (int c = 0; c < cols; ++c) {
            const double xhat = (px.value[off + c] - mu[r]) / sig[r];
            const double dxhat = self.grad[off + c] * pg.value[c];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            if (pg.requires_grad) pg.grad[c] += self.grad[off + c] * xhat;
            if (pb.requires_grad) pb.grad[c] += self.grad[off + c];
          }
          if (px.requires_grad) {
            for (int c = 0; c < cols; ++c) {
              const double xhat = (px.value[off + c] - mu[r]) / sig[r];
              const double dxhat = self.grad[off + c] * pg.value[c];
              px.grad[off + c] +=
                  (dxhat - (sum_dxhat + xhat * sum_dxhat_xhat) / cols) / sig[r];
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Grids (H x W x C feature maps)

// Bilinear upsample by an integer factor, half-pixel centers, edge clamped.
inline Tensor upsample_bilinear(const Tensor& g, int factor) {
  if (g.rank() != 3) throw std::invalid_argument("upsample_bilinear: HxWxC grid expected");
  if (factor < 1) throw std::invalid_argument("upsample_bilinear: factor must be >= 1");
  const int h = g.dim(0), w = g.dim(1), ch = g.dim(2);
  const int oh = h * factor, ow = w * factor;
  struct Tap {
    int lo, hi;
    double frac;
  };
  auto taps = [factor](int out, int n) {
    const double src = (out + 0.5) / factor - 0.5;
    double flo = std::floor(src);
    double frac = src - flo;
    int lo = static_cast<int>(flo);
    int hi = lo + 1;
    if (lo < 0) { lo = 0; hi = 0; frac = 0.0; }
    if (hi > n - 1) { hi = n - 1; lo = n - 1; frac = 0.0; }
    return Tap{lo, hi, frac};
  };
  std::vector<Tap> rt(oh), ct(ow);
  for (int i = 0; i < oh; ++i) rt[i] = taps(i, h);
  for (int j = 0; j < ow; ++j) ct[j] = taps(j, w);
  std::vector<double> out(static_cast<std::size_t>(oh) * ow * ch);
  auto src_at = [&](int i, int j, int c) {
    return g.values()[(static_cast<std::size_t>(i) * w + j) * ch + c];
  };
  for (int i = 0; i < oh; ++i)
    for (int j = 0; j < ow; ++j)
      for (int c = 0; c < ch; ++c) {
        const Tap &a = rt[i], &b = ct[j];
        const double v = (1 - a.frac) * ((1 - b.frac) * src_at(a.lo, b.lo, c) +
                                         b.frac * src_at(a.lo, b.hi, c)) +
                         a.frac * ((1 - b.frac) * src_at(a.hi, b.lo, c) +
                                   b.frac * src_at(a.hi, b.hi, c));
        out[(static_cast<std::size_t>(i) * ow + j) * ch + c] = v;
      }
  return detail::make_op({oh, ow, ch}, std::move(out), {g.ptr()},
                         [w, ch, ow, oh, rt = std::move(rt), ct = std::move(ct)](Node& self) {
                           Node& p = *self.parents[0];
                           auto add = [&](int i, int j, int c, double g2) {
                             p.grad[(static_cast<std::size_t>(i) * w + j) * ch + c] += g2;
                           };
                           for (int i = 0; i < oh; ++i)
                             for (int j = 0; j < ow; ++j)
                               for (int c = 0; c < ch; ++c) {
                                 const double g2 =
                                     self.grad[(static_cast<std::size_t>(i) * ow + j) * ch + c];
                                 const auto &a = rt[i], &b = ct[j];
                                 add(a.lo, b.lo, c, (1 - a.frac) * (1 - b.frac) * g2);
                                 add(a.lo, b.hi, c, (1 - a.frac) * b.frac * g2);
                                 add(a.hi, b.lo, c, a.frac * (1 - b.frac) * g2);
                                 add(a.hi, b.hi, c, a.frac * b.frac * g2);
                               }
                         });
}

// Rearranges an HxWxC grid into (H/p * W/p) rows of p*p*C patch features.
inline Tensor patchify(const Tensor& g, int p) {
  if (g.rank() != 3) throw std::invalid_argument("patchify: HxWxC grid expected");
  const int h = g.dim(0), w = g.dim(1), ch = g.dim(2);
  if (p < 1 || h % p != 0 || w % p != 0)
    throw std::invalid_argument("patchify: patch size must divide grid dims");
  const int qh = h / p, qw = w / p;
  const int rows = qh * qw, cols = p * p * ch;
  std::vector<double> out(static_cast<std::size_t>(rows) * cols);
  std::vector<std::size_t> src(out.size());
  std::size_t k = 0;
  for (int qi = 0; qi < qh; ++qi)
    for (int qj = 0; qj < qw; ++qj)
      for (int pi = 0; pi < p; ++pi)
        for (int pj = 0; pj < p; ++pj)
          for (int c = 0; c < ch; ++c) {
            src[k] = (static_cast<std::size_t>(qi * p + pi) * w + (qj * p + pj)) * ch + c;
            out[k] = g.values()[src[k]];
            ++k;
          }
  return detail::make_op({rows, cols}, std::move(out), {g.ptr()},
                         [src = std::move(src)](Node& self) {
                           Node& pnode = *self.parents[0];
                           for (std::size_t i = 0; i < src.size(); ++i)
                             pnode.grad[src[i]] += self.grad[i];
                         });
}

// ---------------------------------------------------------------------------
// Attention

namespace detail {
inline std::vector<double> mask_bias(const AttentionMask& mask) {
  std::vector<double> bias(mask.blocked.size(), 0.0);
  for (std::size_t i = 0; i < bias.size(); ++i)
    if (mask.blocked[i]) bias[i] = -kMaskPenalty;
  return bias;
}
}  // namespace detail

// Scaled dot-product attention. Masked positions receive a -1e30 logit
// penalty before the softmax.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const AttentionMask* mask = nullptr) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
    throw std::invalid_argument("attention: matrices expected");
  if (q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0))
    throw std::invalid_argument("attention: dimension mismatch");
  Tensor scores = smul(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(q.dim(1))));
  if (mask != nullptr) {
    if (mask->t != q.dim(0) || mask->t != k.dim(0))
      throw std::invalid_argument("attention: mask size mismatch");
    scores = add_const(scores, detail::mask_bias(*mask));
  }
  return matmul(softmax_rows(scores), v);
}

// Cross-attention variant with an arbitrary additive bias matrix.
inline Tensor attention_biased(const Tensor& q, const Tensor& k, const Tensor& v,
                               const std::vector<double>* bias) {
  if (q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0))
    throw std::invalid_argument("attention_biased: dimension mismatch");
  Tensor scores = smul(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(q.dim(1))));
  if (bias != nullptr) scores = add_const(scores, *bias);
  return matmul(softmax_rows(scores), v);
}

// ---------------------------------------------------------------------------
// Positional encoding

// Standard sin/cos interleave with base 10000; entries in [-1, 1].
inline std::vector<double> sinusoidal_pe(int position, int dim) {
  if (dim <= 0 || dim % 2 != 0) throw std::invalid_argument("sinusoidal_pe: dim must be even");
  if (position < 0) throw std::invalid_argument("sinusoidal_pe: position must be >= 0");
  std::vector<double> pe(dim);
  for (int i = 0; i < dim / 2; ++i) {
    const double angle = position / std::pow(10000.0, (2.0 * i) / dim);
    pe[2 * i] = std::sin(angle);
    pe[2 * i + 1] = std::cos(angle);
  }
  return pe;
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_coord = 0;
  double analytic = 0.0;
  double numeric = 0.0;

  bool ok(double tol) const { return max_rel_err < tol; }
};

// Compares reverse-mode gradients of a scalar function against central
// finite differences, coordinate by coordinate. The function must rebuild
// its graph from the current parameter values on every call.
inline GradCheckReport grad_check(const std::function<Tensor()>& f,
                                  std::span<Tensor> params, double epsilon = 1e-5) {
  if (epsilon < 1e-7 || epsilon > 1e-3)
    throw std::invalid_argument("grad_check: epsilon out of [1e-7, 1e-3]");
  for (auto& p : params) p.zero_grad();
  Tensor loss = f();
  if (!std::isfinite(loss.scalar_value()))
    throw std::runtime_error("grad_check: non-finite function value");
  loss.backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.grad());

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& vals = params[pi].mutable_values();
    for (std::size_t ci = 0; ci < vals.size(); ++ci) {
      const double keep = vals[ci];
      vals[ci] = keep + epsilon;
      const double fp = f().scalar_value();
      vals[ci] = keep - epsilon;
      const double fm = f().scalar_value();
      vals[ci] = keep;
      const double fd = (fp - fm) / (2.0 * epsilon);
      const double g = analytic[pi][ci];
      const double denom = std::max({1.0, std::fabs(g), std::fabs(fd)});
      const double rel = std::fabs(g - fd) / denom;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = pi;
        report.worst_coord = ci;
        report.analytic = g;
        report.numeric = fd;
      }
    }
  }
  return report;
}

}  // namespace fdta::ad
