// reslab: dense tensors with reverse-mode autodiff.
//
// Tensors are immutable after creation except for gradient accumulation.
// Every op that produces a grad-requiring output records a closure on the
// output node; backward() walks the recorded graph in reverse topological
// order. One graph per forward pass, confined to a single thread.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_set>
#include <vector>

namespace reslab {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

// Thread count for internal matmul parallelism. Partitioning is by output
// row, so results are bitwise identical for any fixed thread count.
inline int reslab_threads() {
  static int n = [] {
    if (const char* e = std::getenv("RESLAB_THREADS")) {
      int v = std::atoi(e);
      if (v >= 1) return v;
    }
    return 1;
  }();
  return n;
}

// Scoped suppression of graph recording (evaluation-only forwards).
struct NoGrad {
  NoGrad() { ++depth(); }
  ~NoGrad() { --depth(); }
  static int& depth() {
    thread_local int d = 0;
    return d;
  }
  static bool active() { return depth() > 0; }
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  bool requires_grad = false;
  std::vector<T> grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backprop;  // reads this->grad, accumulates parents'
  std::string name;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> n) : p_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value.assign(numel(shape), T(0));
    n->shape = std::move(shape);
    n->requires_grad = requires_grad && !NoGrad::active();
    return Tensor(std::move(n));
  }
  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.data().begin(), t.data().end(), v);
    return t;
  }
  static Tensor from(Shape shape, std::vector<T> vals, bool requires_grad = false) {
    if (numel(shape) != static_cast<int64_t>(vals.size()))
      throw ShapeError("tensor init: " + shape_str(shape) + " holds " +
                       std::to_string(numel(shape)) + " elements, got " +
                       std::to_string(vals.size()));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(vals);
    n->requires_grad = requires_grad && !NoGrad::active();
    return Tensor(std::move(n));
  }
  static Tensor scalar(T v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(p_); }
  const Shape& shape() const { return p_->shape; }
  int64_t size() const { return static_cast<int64_t>(p_->value.size()); }
  int64_t rows() const { return p_->shape.size() == 2 ? p_->shape[0] : p_->shape[0]; }
  int64_t cols() const {
    return p_->shape.size() == 2 ? p_->shape[1] : int64_t(1);
  }
  bool is_matrix() const { return p_->shape.size() == 2; }
  bool is_scalar() const { return size() == 1; }

  std::vector<T>& data() { return p_->value; }
  const std::vector<T>& data() const { return p_->value; }
  T item() const {
    if (!is_scalar()) throw UsageError("item() on non-scalar tensor " + shape_str(shape()));
    return p_->value[0];
  }

  bool requires_grad() const { return p_->requires_grad; }
  void set_requires_grad(bool b) { p_->requires_grad = b; }
  bool has_grad() const { return !p_->grad.empty(); }
  const std::vector<T>& grad() const { return p_->grad; }
  std::vector<T>& grad() { return p_->grad; }
  void zero_grad() { p_->grad.clear(); }

  const std::string& name() const { return p_->name; }
  void set_name(std::string n) { p_->name = std::move(n); }

  std::shared_ptr<Node<T>> node() const { return p_; }

  // Detached copy: same values, no graph linkage.
  Tensor detach() const {
    return from(p_->shape, p_->value, false);
  }

 private:
  std::shared_ptr<Node<T>> p_;
};

namespace detail {

// C (m x p) += opA(A) * opB(B)
template <typename T>
void gemm_acc(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t p,
              bool ta, bool tb) {
  auto body = [&](int64_t r0, int64_t r1) {
    for (int64_t i = r0; i < r1; ++i) {
      for (int64_t x = 0; x < k; ++x) {
        T a = ta ? A[x * m + i] : A[i * k + x];
        if (a == T(0)) continue;
        const T* brow;
        if (!tb) {
          brow = B + x * p;
          T* crow = C + i * p;
          for (int64_t j = 0; j < p; ++j) crow[j] += a * brow[j];
        } else {
          T* crow = C + i * p;
          for (int64_t j = 0; j < p; ++j) crow[j] += a * B[j * k + x];
        }
      }
    }
  };
  int nt = reslab_threads();
  if (nt <= 1 || m < 2 * nt) {
    body(0, m);
    return;
  }
  std::vector<std::thread> ts;
  int64_t chunk = (m + nt - 1) / nt;
  for (int t = 0; t < nt; ++t) {
    int64_t r0 = t * chunk, r1 = std::min<int64_t>(m, r0 + chunk);
    if (r0 >= r1) break;
    ts.emplace_back(body, r0, r1);
  }
  for (auto& th : ts) th.join();
}

template <typename T>
std::shared_ptr<Node<T>> make_node(Shape shape, std::vector<T> value,
                                   std::vector<Tensor<T>> inputs) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool rg = false;
  for (const auto& in : inputs) rg = rg || in.requires_grad();
  n->requires_grad = rg && !NoGrad::active();
  if (n->requires_grad)
    for (const auto& in : inputs) n->parents.push_back(in.node());
  return n;
}

}  // namespace detail

// ---- elementwise ----

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> v(a.size());
  for (int64_t i = 0; i < a.size(); ++i) v[i] = a.data()[i] + b.data()[i];
  auto n = detail::make_node<T>(a.shape(), std::move(v), {a, b});
  if (n->requires_grad) {
    auto an = a.node(), bn = b.node();
    Node<T>* self = n.get();
    n->backprop = [self, an, bn] {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < self->grad.size(); ++i) an->grad[i] += self->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < self->grad.size(); ++i) bn->grad[i] += self->grad[i];
      }
    };
  }
  return Tensor<T>(n);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> v(a.size());
  for (int64_t i = 0; i < a.size(); ++i) v[i] = a.data()[i] - b.data()[i];
  auto n = detail::make_node<T>(a.shape(), std::move(v), {a, b});
  if (n->requires_grad) {
    auto an = a.node(), bn = b.node();
    Node<T>* self = n.get();
    n->backprop = [self, an, bn] {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < self->grad.size(); ++i) an->grad[i] += self->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < self->grad.size(); ++i) bn->grad[i] -= self->grad[i];
      }
    };
  }
  return Tensor<T>(n);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> v(a.size());
  for (int64_t i = 0; i < a.size(); ++i) v[i] = a.data()[i] * b.data()[i];
  auto n = detail::make_node<T>(a.shape(), std::move(v), {a, b});
  if (n->requires_grad) {
    auto an = a.node(), bn = b.node();
    Node<T>* self = n.get();
    n->backprop = [self, an, bn] {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < self->grad.size(); ++i)
          an->grad[i] += self->grad[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < self->grad.size(); ++i)
          bn->grad[i] += self->grad[i] * an->value[i];
      }
    };
  }
  return Tensor<T>(n);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, double c) {
  std::vector<T> v(a.size());
  for (int64_t i = 0; i < a.size(); ++i) v[i] = a.data()[i] * static_cast<T>(c);
  auto n = detail::make_node<T>(a.shape(), std::move(v), {a});
  if (n->requires_grad) {
    auto an = a.node();
    Node<T>* self = n.get();
    T cc = static_cast<T>(c);
    n->backprop = [self, an, cc] {
      an->ensure_grad();
      for (size_t i = 0; i < self->grad.size(); ++i) an->grad[i] += cc * self->grad[i];
    };
  }
  return Tensor<T>(n);
}

// y = s * x with s a trainable scalar tensor (shape {1}).
template <typename T>
Tensor<T> scalar_mul(const Tensor<T>& s, const Tensor<T>& x) {
  if (!s.is_scalar()) throw ShapeError("scalar_mul: coefficient must be scalar");
  T c = s.data()[0];
  std::vector<T> v(x.size());
  for (int64_t i = 0; i < x.size(); ++i) v[i] = c * x.data()[i];
  auto n = detail::make_node<T>(x.shape(), std::move(v), {s, x});
  if (n->requires_grad) {
    auto sn = s.node(), xn = x.node();
    Node<T>* self = n.get();
    n->backprop = [self, sn, xn] {
      if (sn->requires_grad) {
        sn->ensure_grad();
        T acc = 0;
        for (size_t i = 0; i < self->grad.size(); ++i)
          acc += self->grad[i] * xn->value[i];
        sn->grad[0] += acc;
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        T c2 = sn->value[0];
        for (size_t i = 0; i < self->grad.size(); ++i)
          xn->grad[i] += c2 * self->grad[i];
      }
    };
  }
  return Tensor<T>(n);
}

// ---- matmul ----

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.is_matrix() || !b.is_matrix() || a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  int64_t m = a.shape()[0], k = a.shape()[1], p = b.shape()[1];
  std::vector<T> v(m * p, T(0));
  detail::gemm_acc(a.data().data(), b.data().data(), v.data(), m, k, p, false, false);
  auto n = detail::make_node<T>({m, p}, std::move(v), {a, b});
  if (n->requires_grad) {
    auto an = a.node(), bn = b.node();
    Node<T>* self = n.get();
    n->backprop = [self, an, bn, m, k, p] {
      if (an->requires_grad) {
        an->ensure_grad();
        // dA = G * B^T : (m x p)(p x k)
        detail::gemm_acc(self->grad.data(), bn->value.data(), an->grad.data(), m, p,
                         k, false, true);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        // dB = A^T * G : (k x m)(m x p)
        detail::gemm_acc(an->value.data(), self->grad.data(), bn->grad.data(), k, m,
                         p, true, false);
      }
    };
  }
  return Tensor<T>(n);
}

// a * b^T
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.is_matrix() || !b.is_matrix() || a.shape()[1] != b.shape()[1])
    throw ShapeError("matmul_nt: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  int64_t m = a.shape()[0], k = a.shape()[1], p = b.shape()[0];
  std::vector<T> v(m * p, T(0));
  detail::gemm_acc(a.data().data(), b.data().data(), v.data(), m, k, p, false, true);
  auto n = detail::make_node<T>({m, p}, std::move(v), {a, b});
  if (n->requires_grad) {
    auto an = a.node(), bn = b.node();
    Node<T>* self = n.get();
    n->backprop = [self, an, bn, m, k, p] {
      if (an->requires_grad) {
        an->ensure_grad();
        // dA = G * B : (m x p)(p x k)
        detail::gemm_acc(self->grad.data(), bn->value.data(), an->grad.data(), m, p,
                         k, false, false);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        // dB = G^T * A : (p x m)(m x k)
        detail::gemm_acc(self->grad.data(), an->value.data(), bn->grad.data(), p, m,
                         k, true, false);
      }
    };
  }
  return Tensor<T>(n);
}

// ---- reductions ----

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  auto n = detail::make_node<T>({1}, {acc}, {x});
  if (n->requires_grad) {
    auto xn = x.node();
    Node<T>* self = n.get();
    n->backprop = [self, xn] {
      xn->ensure_grad();
      for (auto& g : xn->grad) g += self->grad[0];
    };
  }
  return Tensor<T>(n);
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

// ---- activations ----

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  std::vector<T> v(x.size());
  for (int64_t i = 0; i < x.size(); ++i) {
    T z = x.data()[i];
    v[i] = z / (T(1) + std::exp(-z));
  }
  auto n = detail::make_node<T>(x.shape(), std::move(v), {x});
  if (n->requires_grad) {
    auto xn = x.node();
    Node<T>* self = n.get();
    n->backprop = [self, xn] {
      xn->ensure_grad();
      for (size_t i = 0; i < self->grad.size(); ++i) {
        T z = xn->value[i];
        T s = T(1) / (T(1) + std::exp(-z));
        xn->grad[i] += self->grad[i] * (s * (T(1) + z * (T(1) - s)));
      }
    };
  }
  return Tensor<T>(n);
}

// ---- softmaxes ----

// Causal softmax over an l x l score matrix: entries above the diagonal are
// exactly zero, rows normalized over the prefix with max subtraction.
template <typename T>
Tensor<T> causal_softmax(const Tensor<T>& scores) {
  if (!scores.is_matrix() || scores.shape()[0] != scores.shape()[1])
    throw ShapeError("causal_softmax: expected square matrix, got " +
                     shape_str(scores.shape()));
  int64_t l = scores.shape()[0];
  std::vector<T> v(l * l, T(0));
  for (int64_t r = 0; r < l; ++r) {
    const T* row = scores.data().data() + r * l;
    T mx = row[0];
    for (int64_t j = 1; j <= r; ++j) mx = std::max(mx, row[j]);
    T z = 0;
    for (int64_t j = 0; j <= r; ++j) {
      v[r * l + j] = std::exp(row[j] - mx);
      z += v[r * l + j];
    }
    for (int64_t j = 0; j <= r; ++j) v[r * l + j] /= z;
  }
  auto n = detail::make_node<T>(scores.shape(), std::move(v), {scores});
  if (n->requires_grad) {
    auto xn = scores.node();
    Node<T>* self = n.get();
    n->backprop = [self, xn, l] {
      xn->ensure_grad();
      for (int64_t r = 0; r < l; ++r) {
        const T* a = self->value.data() + r * l;
        const T* g = self->grad.data() + r * l;
        T dot = 0;
        for (int64_t j = 0; j <= r; ++j) dot += g[j] * a[j];
        T* gx = xn->grad.data() + r * l;
        for (int64_t j = 0; j <= r; ++j) gx[j] += a[j] * (g[j] - dot);
      }
    };
  }
  return Tensor<T>(n);
}

// Softmax over an l x 2l score matrix whose columns are two stacked causal
// key sets: row r normalizes over columns {0..r} and {l..l+r}.
template <typename T>
Tensor<T> concat_causal_softmax(const Tensor<T>& scores) {
  if (!scores.is_matrix() || scores.shape()[1] != 2 * scores.shape()[0])
    throw ShapeError("concat_causal_softmax: expected l x 2l, got " +
                     shape_str(scores.shape()));
  int64_t l = scores.shape()[0], w = 2 * l;
  std::vector<T> v(l * w, T(0));
  auto valid = [l](int64_t r, int64_t j) { return j < l ? j <= r : (j - l) <= r; };
  for (int64_t r = 0; r < l; ++r) {
    const T* row = scores.data().data() + r * w;
    T mx = -std::numeric_limits<T>::infinity();
    for (int64_t j = 0; j < w; ++j)
      if (valid(r, j)) mx = std::max(mx, row[j]);
    T z = 0;
    for (int64_t j = 0; j < w; ++j)
      if (valid(r, j)) {
        v[r * w + j] = std::exp(row[j] - mx);
        z += v[r * w + j];
      }
    for (int64_t j = 0; j < w; ++j)
      if (valid(r, j)) v[r * w + j] /= z;
  }
  auto n = detail::make_node<T>(scores.shape(), std::move(v), {scores});
  if (n->requires_grad) {
    auto xn = scores.node();
    Node<T>* self = n.get();
    n->backprop = [self, xn, l, w, valid] {
      xn->ensure_grad();
      for (int64_t r = 0; r < l; ++r) {
        const T* a = self->value.data() + r * w;
        const T* g = self->grad.data() + r * w;
        T dot = 0;
        for (int64_t j = 0; j < w; ++j)
          if (valid(r, j)) dot += g[j] * a[j];
        T* gx = xn->grad.data() + r * w;
        for (int64_t j = 0; j < w; ++j)
          if (valid(r, j)) gx[j] += a[j] * (g[j] - dot);
      }
    };
  }
  return Tensor<T>(n);
}

// Full softmax over a length-N vector (lambda reparameterization).
template <typename T>
Tensor<T> softmax_vec(const Tensor<T>& x) {
  if (x.shape().size() != 1)
    throw ShapeError("softmax_vec: expected vector, got " + shape_str(x.shape()));
  int64_t l = x.size();
  std::vector<T> v(l);
  T mx = *std::max_element(x.data().begin(), x.data().end());
  T z = 0;
  for (int64_t i = 0; i < l; ++i) {
    v[i] = std::exp(x.data()[i] - mx);
    z += v[i];
  }
  for (auto& e : v) e /= z;
  auto n = detail::make_node<T>(x.shape(), std::move(v), {x});
  if (n->requires_grad) {
    auto xn = x.node();
    Node<T>* self = n.get();
    n->backprop = [self, xn, l] {
      xn->ensure_grad();
      T dot = 0;
      for (int64_t i = 0; i < l; ++i) dot += self->grad[i] * self->value[i];
      for (int64_t i = 0; i < l; ++i)
        xn->grad[i] += self->value[i] * (self->grad[i] - dot);
    };
  }
  return Tensor<T>(n);
}

// Element i of a vector as a scalar tensor.
template <typename T>
Tensor<T> at(const Tensor<T>& x, int64_t i) {
  if (i < 0 || i >= x.size())
    throw UsageError("at: index " + std::to_string(i) + " out of range");
  auto n = detail::make_node<T>({1}, {x.data()[i]}, {x});
  if (n->requires_grad) {
    auto xn = x.node();
    Node<T>* self = n.get();
    n->backprop = [self, xn, i] {
      xn->ensure_grad();
      xn->grad[i] += self->grad[0];
    };
  }
  return Tensor<T>(n);
}

// ---- normalization ----

// y = x / sqrt(mean(x^2) + eps) * gain, rowwise over the last extent.
template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, double eps) {
  if (eps <= 0) throw ConfigError("rms_norm: eps must be positive");
  int64_t d = x.shape().back();
  if (gain.size() != d)
    throw ShapeError("rms_norm: gain " + shape_str(gain.shape()) +
                     " vs last extent " + std::to_string(d));
  int64_t rows = x.size() / d;
  std::vector<T> v(x.size());
  std::vector<T> rinv(rows);
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * d;
    T ss = 0;
    for (int64_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
    T inv = T(1) / std::sqrt(ss / static_cast<T>(d) + static_cast<T>(eps));
    rinv[r] = inv;
    for (int64_t j = 0; j < d; ++j) v[r * d + j] = xr[j] * inv * gain.data()[j];
  }
  auto n = detail::make_node<T>(x.shape(), std::move(v), {x, gain});
  if (n->requires_grad) {
    auto xn = x.node(), gn = gain.node();
    Node<T>* self = n.get();
    n->backprop = [self, xn, gn, rows, d, rinv] {
      for (int64_t r = 0; r < rows; ++r) {
        const T* xr = xn->value.data() + r * d;
        const T* g = self->grad.data() + r * d;
        T inv = rinv[r];
        if (xn->requires_grad) {
          xn->ensure_grad();
          T dot = 0;  // sum_j g_j * gain_j * x_j
          for (int64_t j = 0; j < d; ++j) dot += g[j] * gn->value[j] * xr[j];
          T c = dot * inv * inv * inv / static_cast<T>(d);
          T* gx = xn->grad.data() + r * d;
          for (int64_t j = 0; j < d; ++j)
            gx[j] += g[j] * gn->value[j] * inv - xr[j] * c;
        }
        if (gn->requires_grad) {
          gn->ensure_grad();
          for (int64_t j = 0; j < d; ++j) gn->grad[j] += g[j] * xr[j] * inv;
        }
      }
    };
  }
  return Tensor<T>(n);
}

// ---- SwiGLU ----

template <typename T>
Tensor<T> swiglu(const Tensor<T>& x, const Tensor<T>& w_gate, const Tensor<T>& w_up,
                 const Tensor<T>& w_down) {
  return matmul(mul(silu(matmul(x, w_gate)), matmul(x, w_up)), w_down);
}

// ---- rotary position embedding ----

// Pairwise rotation of channel pairs within each head, frequencies
// base^(-2i/d_h); position is the row index.
template <typename T>
Tensor<T> rope_apply(const Tensor<T>& x, int n_heads, double base) {
  if (!x.is_matrix()) throw ShapeError("rope_apply: expected matrix");
  int64_t l = x.shape()[0], d = x.shape()[1];
  if (d % n_heads != 0)
    throw ConfigError("rope_apply: width " + std::to_string(d) +
                      " not divisible by " + std::to_string(n_heads) + " heads");
  int64_t dh = d / n_heads;
  if (dh % 2 != 0)
    throw ConfigError("rope_apply: head dim " + std::to_string(dh) + " must be even");
  // Precompute cos/sin per (position, pair) once; shared with backward.
  int64_t np = dh / 2;
  auto trig = std::make_shared<std::vector<T>>(2 * l * np);
  for (int64_t pos = 0; pos < l; ++pos)
    for (int64_t i = 0; i < np; ++i) {
      double theta = pos * std::pow(base, -2.0 * static_cast<double>(i) /
                                              static_cast<double>(dh));
      (*trig)[2 * (pos * np + i)] = static_cast<T>(std::cos(theta));
      (*trig)[2 * (pos * np + i) + 1] = static_cast<T>(std::sin(theta));
    }
  std::vector<T> v(x.size());
  for (int64_t pos = 0; pos < l; ++pos)
    for (int h = 0; h < n_heads; ++h)
      for (int64_t i = 0; i < np; ++i) {
        T c = (*trig)[2 * (pos * np + i)];
        T s = (*trig)[2 * (pos * np + i) + 1];
        int64_t o = pos * d + h * dh + 2 * i;
        T a = x.data()[o], b = x.data()[o + 1];
        v[o] = a * c - b * s;
        v[o + 1] = a * s + b * c;
      }
  auto n = detail::make_node<T>(x.shape(), std::move(v), {x});
  if (n->requires_grad) {
    auto xn = x.node();
    Node<T>* self = n.get();
    n->backprop = [self, xn, l, d, dh, np, n_heads, trig] {
      xn->ensure_grad();
      for (int64_t pos = 0; pos < l; ++pos)
        for (int h = 0; h < n_heads; ++h)
          for (int64_t i = 0; i < np; ++i) {
            T c = (*trig)[2 * (pos * np + i)];
            T s = (*trig)[2 * (pos * np + i) + 1];
            int64_t o = pos * d + h * dh + 2 * i;
            T ga = self->grad[o], gb = self->grad[o + 1];
            xn->grad[o] += ga * c + gb * s;
            xn->grad[o + 1] += -ga * s + gb * c;
          }
    };
  }
  return Tensor<T>(n);
}

// ---- cross entropy ----

// Mean over positions of -log softmax(logits)[target].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<uint32_t>& targets) {
  if (!logits.is_matrix()) throw ShapeError("cross_entropy: expected l x V logits");
  int64_t l = logits.shape()[0], V = logits.shape()[1];
  if (static_cast<int64_t>(targets.size()) != l)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(l) + " positions");
  for (int64_t r = 0; r < l; ++r)
    if (targets[r] >= static_cast<uint32_t>(V))
      throw DataError("cross_entropy: target " + std::to_string(targets[r]) +
                      " out of range at position " + std::to_string(r));
  T loss = 0;
  std::vector<T> lse(l);
  for (int64_t r = 0; r < l; ++r) {
    const T* row = logits.data().data() + r * V;
    T mx = row[0];
    for (int64_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
    T z = 0;
    for (int64_t j = 0; j < V; ++j) z += std::exp(row[j] - mx);
    lse[r] = mx + std::log(z);
    loss += lse[r] - row[targets[r]];
  }
  loss /= static_cast<T>(l);
  auto n = detail::make_node<T>({1}, {loss}, {logits});
  if (n->requires_grad) {
    auto xn = logits.node();
    Node<T>* self = n.get();
    auto tg = targets;
    n->backprop = [self, xn, l, V, lse, tg] {
      xn->ensure_grad();
      T g = self->grad[0] / static_cast<T>(l);
      for (int64_t r = 0; r < l; ++r) {
        const T* row = xn->value.data() + r * V;
        T* gx = xn->grad.data() + r * V;
        for (int64_t j = 0; j < V; ++j) gx[j] += g * std::exp(row[j] - lse[r]);
        gx[tg[r]] -= g;
      }
    };
  }
  return Tensor<T>(n);
}

// ---- embedding ----

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<uint32_t>& ids) {
  if (!table.is_matrix()) throw ShapeError("embedding: expected V x d table");
  int64_t V = table.shape()[0], d = table.shape()[1];
  int64_t l = static_cast<int64_t>(ids.size());
  for (int64_t r = 0; r < l; ++r)
    if (ids[r] >= static_cast<uint32_t>(V))
      throw DataError("embedding: id " + std::to_string(ids[r]) +
                      " out of range at position " + std::to_string(r));
  std::vector<T> v(l * d);
  for (int64_t r = 0; r < l; ++r)
    std::copy_n(table.data().data() + ids[r] * d, d, v.data() + r * d);
  auto n = detail::make_node<T>({l, d}, std::move(v), {table});
  if (n->requires_grad) {
    auto tn = table.node();
    Node<T>* self = n.get();
    auto idc = ids;
    n->backprop = [self, tn, l, d, idc] {
      tn->ensure_grad();
      for (int64_t r = 0; r < l; ++r) {
        T* dst = tn->grad.data() + idc[r] * d;
        const T* src = self->grad.data() + r * d;
        for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    };
  }
  return Tensor<T>(n);
}

// ---- slicing / concatenation (head split and merge) ----

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, int64_t c0, int64_t c1) {
  if (!x.is_matrix() || c0 < 0 || c1 > x.shape()[1] || c0 >= c1)
    throw ShapeError("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) +
                     ") of " + shape_str(x.shape()));
  int64_t rows = x.shape()[0], cols = x.shape()[1], w = c1 - c0;
  std::vector<T> v(rows * w);
  for (int64_t r = 0; r < rows; ++r)
    std::copy_n(x.data().data() + r * cols + c0, w, v.data() + r * w);
  auto n = detail::make_node<T>({rows, w}, std::move(v), {x});
  if (n->requires_grad) {
    auto xn = x.node();
    Node<T>* self = n.get();
    n->backprop = [self, xn, rows, cols, c0, w] {
      xn->ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        const T* src = self->grad.data() + r * w;
        T* dst = xn->grad.data() + r * cols + c0;
        for (int64_t j = 0; j < w; ++j) dst[j] += src[j];
      }
    };
  }
  return Tensor<T>(n);
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw UsageError("concat_cols: empty input");
  int64_t rows = xs[0].shape()[0], total = 0;
  for (const auto& x : xs) {
    if (!x.is_matrix() || x.shape()[0] != rows)
      throw ShapeError("concat_cols: row mismatch");
    total += x.shape()[1];
  }
  std::vector<T> v(rows * total);
  int64_t off = 0;
  for (const auto& x : xs) {
    int64_t w = x.shape()[1];
    for (int64_t r = 0; r < rows; ++r)
      std::copy_n(x.data().data() + r * w, w, v.data() + r * total + off);
    off += w;
  }
  auto n = detail::make_node<T>({rows, total}, std::move(v), xs);
  if (n->requires_grad) {
    Node<T>* self = n.get();
    std::vector<std::shared_ptr<Node<T>>> ps;
    for (const auto& x : xs) ps.push_back(x.node());
    n->backprop = [self, ps, rows, total] {
      int64_t o = 0;
      for (auto& p : ps) {
        int64_t w = p->shape[1];
        if (p->requires_grad) {
          p->ensure_grad();
          for (int64_t r = 0; r < rows; ++r) {
            const T* src = self->grad.data() + r * total + o;
            T* dst = p->grad.data() + r * w;
            for (int64_t j = 0; j < w; ++j) dst[j] += src[j];
          }
        }
        o += w;
      }
    };
  }
  return Tensor<T>(n);
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw UsageError("concat_rows: empty input");
  int64_t cols = xs[0].shape()[1], total = 0;
  for (const auto& x : xs) {
    if (!x.is_matrix() || x.shape()[1] != cols)
      throw ShapeError("concat_rows: column mismatch");
    total += x.shape()[0];
  }
  std::vector<T> v;
  v.reserve(total * cols);
  for (const auto& x : xs) v.insert(v.end(), x.data().begin(), x.data().end());
  auto n = detail::make_node<T>({total, cols}, std::move(v), xs);
  if (n->requires_grad) {
    Node<T>* self = n.get();
    std::vector<std::shared_ptr<Node<T>>> ps;
    for (const auto& x : xs) ps.push_back(x.node());
    n->backprop = [self, ps, cols] {
      int64_t o = 0;
      for (auto& p : ps) {
        int64_t sz = p->shape[0] * cols;
        if (p->requires_grad) {
          p->ensure_grad();
          for (int64_t i = 0; i < sz; ++i) p->grad[i] += self->grad[o + i];
        }
        o += sz;
      }
    };
  }
  return Tensor<T>(n);
}

// ---- per-row norm rescaling ----

// y_r = (||ref_r|| / ||mix_r||) * mix_r. Rows whose mix norm is ~0 are left
// unscaled; their count is reported through *zero_rows when non-null.
template <typename T>
Tensor<T> rescale_rows(const Tensor<T>& mix, const Tensor<T>& ref,
                       int* zero_rows = nullptr) {
  if (mix.shape() != ref.shape() || !mix.is_matrix())
    throw ShapeError("rescale_rows: " + shape_str(mix.shape()) + " vs " +
                     shape_str(ref.shape()));
  int64_t rows = mix.shape()[0], d = mix.shape()[1];
  std::vector<T> v(mix.size());
  std::vector<T> as(rows), bs(rows);
  int zc = 0;
  for (int64_t r = 0; r < rows; ++r) {
    const T* mr = mix.data().data() + r * d;
    const T* rr = ref.data().data() + r * d;
    T a = 0, b = 0;
    for (int64_t j = 0; j < d; ++j) {
      a += rr[j] * rr[j];
      b += mr[j] * mr[j];
    }
    a = std::sqrt(a);
    b = std::sqrt(b);
    as[r] = a;
    bs[r] = b;
    if (b <= std::numeric_limits<T>::min()) {
      ++zc;
      for (int64_t j = 0; j < d; ++j) v[r * d + j] = mr[j];
    } else {
      T s = a / b;
      for (int64_t j = 0; j < d; ++j) v[r * d + j] = s * mr[j];
    }
  }
  if (zero_rows) *zero_rows = zc;
  auto n = detail::make_node<T>(mix.shape(), std::move(v), {mix, ref});
  if (n->requires_grad) {
    auto mn = mix.node(), rn = ref.node();
    Node<T>* self = n.get();
    n->backprop = [self, mn, rn, rows, d, as, bs] {
      for (int64_t r = 0; r < rows; ++r) {
        const T* mr = mn->value.data() + r * d;
        const T* rr = rn->value.data() + r * d;
        const T* g = self->grad.data() + r * d;
        T a = as[r], b = bs[r];
        if (b <= std::numeric_limits<T>::min()) {
          if (mn->requires_grad) {
            mn->ensure_grad();
            T* gm = mn->grad.data() + r * d;
            for (int64_t j = 0; j < d; ++j) gm[j] += g[j];
          }
          continue;
        }
        T gm_dot = 0;
        for (int64_t j = 0; j < d; ++j) gm_dot += g[j] * mr[j];
        if (mn->requires_grad) {
          mn->ensure_grad();
          T* gm = mn->grad.data() + r * d;
          T s = a / b, c = a * gm_dot / (b * b * b);
          for (int64_t j = 0; j < d; ++j) gm[j] += s * g[j] - c * mr[j];
        }
        if (rn->requires_grad && a > std::numeric_limits<T>::min()) {
          rn->ensure_grad();
          T* gr = rn->grad.data() + r * d;
          T c = gm_dot / (b * a);
          for (int64_t j = 0; j < d; ++j) gr[j] += c * rr[j];
        }
      }
    };
  }
  return Tensor<T>(n);
}

// ---- backward ----

// The Graph: topologically ordered record of the ops reaching `loss`.
template <typename T>
std::vector<Node<T>*> toposort(const Tensor<T>& root) {
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  // Iterative post-order DFS.
  struct Frame {
    Node<T>* n;
    size_t next;
  };
  std::vector<Frame> stack;
  if (root.node()->requires_grad) stack.push_back({root.node().get(), 0});
  seen.insert(root.node().get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      Node<T>* p = f.n->parents[f.next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }
  return order;  // parents before children
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.is_scalar())
    throw UsageError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad())
    throw UsageError("backward: loss does not require grad");
  auto order = toposort(loss);
  loss.node()->grad.assign(1, T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backprop) (*it)->backprop();
}

// ---- gradient checking ----

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool pass = true;
  double worst = 0;
  std::string worst_name;
};

// Central-difference check of autodiff gradients; 64-bit only.
inline GradCheckReport grad_check(const std::function<Tensor<double>()>& loss_fn,
                                  std::vector<Tensor<double>> params,
                                  double step = 1e-5, double tol = 1e-4) {
  for (auto& p : params) p.zero_grad();
  Tensor<double> loss = loss_fn();
  backward(loss);
  GradCheckReport report;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    std::string pname = p.name().empty() ? "param" + std::to_string(pi) : p.name();
    std::vector<double> ad(p.size(), 0.0);
    if (p.has_grad()) ad = p.grad();
    GradCheckEntry e;
    e.name = pname;
    for (int64_t i = 0; i < p.size(); ++i) {
      double orig = p.data()[i];
      p.data()[i] = orig + step;
      double up = loss_fn().item();
      p.data()[i] = orig - step;
      double dn = loss_fn().item();
      p.data()[i] = orig;
      double fd = (up - dn) / (2 * step);
      if (!std::isfinite(fd) || !std::isfinite(ad[i]))
        throw NumericError("grad_check: non-finite value in " + pname);
      double denom = std::max(std::abs(fd), std::abs(ad[i]));
      double err = denom < 1e-7 ? std::abs(fd - ad[i]) : std::abs(fd - ad[i]) / denom;
      e.max_rel_err = std::max(e.max_rel_err, err);
    }
    e.pass = e.max_rel_err < tol;
    if (e.max_rel_err > report.worst) {
      report.worst = e.max_rel_err;
      report.worst_name = e.name;
    }
    report.pass = report.pass && e.pass;
    report.entries.push_back(std::move(e));
  }
  return report;
}

}  // namespace reslab
