// Dense tensors with a reverse-mode autodiff tape.
//
// Tensors are value handles over shared row-major storage. Ops record onto a
// thread-local Graph (tape) when one is active and any operand is on the
// gradient path; without an active graph every op runs forward-only.
// Shapes are static per tensor; the only implicit broadcast is
// scalar-vs-tensor, everything else goes through explicit alignment ops
// (add_rowvec, mul_colvec, ...).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace coc {

struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct shape_error : error {
  using error::error;
};
struct config_error : error {
  using error::error;
};
struct format_error : error {
  using error::error;
};
struct index_error : error {
  using error::error;
};
struct checkpoint_error : error {
  using error::error;
};
struct numeric_error : error {
  using error::error;
};
struct contract_error : error {
  using error::error;
};

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

// Multiply-accumulate counters, per thread. matmul covers every linear
// projection; similarity counts the cosine-similarity dot products only
// (it feeds the region-partition cost accounting).
struct MacCounters {
  unsigned long long matmul = 0;
  unsigned long long similarity = 0;
  void reset() { matmul = similarity = 0; }
  unsigned long long total() const { return matmul + similarity; }
};

inline MacCounters& mac_counters() {
  thread_local MacCounters c;
  return c;
}

template <class S>
class Graph;

namespace detail {

template <class S>
struct Storage {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;  // allocated lazily, same length as data
  bool requires_grad = false;
  int node = -1;               // producing node id in `tag`'s graph
  const void* tag = nullptr;   // graph identity; node is only valid under it
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), S(0));
  }
};

}  // namespace detail

template <class S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return Tensor(std::move(shape), std::vector<S>{});
  }
  static Tensor full(Shape shape, S v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.st_->data.begin(), t.st_->data.end(), v);
    return t;
  }
  static Tensor from_data(Shape shape, std::vector<S> data) {
    if (static_cast<std::int64_t>(data.size()) != numel(shape))
      throw shape_error("from_data: " + shape_str(shape) + " needs " +
                        std::to_string(numel(shape)) + " values, got " +
                        std::to_string(data.size()));
    Tensor t;
    t.st_ = std::make_shared<detail::Storage<S>>();
    t.st_->shape = std::move(shape);
    t.st_->data = std::move(data);
    return t;
  }
  static Tensor scalar(S v) { return from_data({1}, {v}); }

  bool valid() const { return st_ != nullptr; }
  const Shape& shape() const { return st_->shape; }
  int rank() const { return static_cast<int>(st_->shape.size()); }
  std::int64_t size() const { return static_cast<std::int64_t>(st_->data.size()); }
  int dim(int i) const { return st_->shape[i]; }
  int rows() const { return st_->shape[0]; }
  int cols() const { return st_->shape[1]; }

  S* data() { return st_->data.data(); }
  const S* data() const { return st_->data.data(); }
  std::vector<S>& values() { return st_->data; }
  const std::vector<S>& values() const { return st_->data; }

  S item() const {
    if (size() != 1) throw contract_error("item(): tensor is not scalar, shape " + shape_str(shape()));
    return st_->data[0];
  }
  S at(int i, int j) const { return st_->data[static_cast<std::size_t>(i) * cols() + j]; }
  S& at(int i, int j) { return st_->data[static_cast<std::size_t>(i) * cols() + j]; }

  Tensor& set_requires_grad(bool b = true) {
    st_->requires_grad = b;
    return *this;
  }
  bool requires_grad() const { return st_->requires_grad; }

  bool has_grad() const { return st_ && st_->grad.size() == st_->data.size(); }
  // Zeros when no gradient ever reached this tensor.
  std::vector<S> grad() const {
    if (!has_grad()) return std::vector<S>(st_->data.size(), S(0));
    return st_->grad;
  }
  S* grad_data() {
    st_->ensure_grad();
    return st_->grad.data();
  }
  void zero_grad() {
    if (has_grad()) std::fill(st_->grad.begin(), st_->grad.end(), S(0));
  }

  // Fresh storage, same values; detached from any graph.
  Tensor clone() const {
    return Tensor::from_data(st_->shape, st_->data);
  }

  std::shared_ptr<detail::Storage<S>> storage() const { return st_; }

 private:
  Tensor(Shape shape, std::vector<S>) {
    st_ = std::make_shared<detail::Storage<S>>();
    std::int64_t n = numel(shape);
    st_->shape = std::move(shape);
    st_->data.assign(static_cast<std::size_t>(n), S(0));
  }
  std::shared_ptr<detail::Storage<S>> st_;
};

// Append-only tape. Node order is topological by construction; backward
// replays it once, in reverse. A tape is single-use: backward() consumes it.
template <class S>
class Graph {
 public:
  struct Node {
    const char* kind;
    std::vector<int> inputs;  // producing node ids of inputs, -1 for leaves
    std::function<void()> backward;
  };

  int record(const char* kind, std::vector<int> inputs, std::function<void()> fn) {
    nodes_.push_back(Node{kind, std::move(inputs), std::move(fn)});
    return static_cast<int>(nodes_.size()) - 1;
  }
  std::size_t size() const { return nodes_.size(); }
  const Node& node(int i) const { return nodes_[static_cast<std::size_t>(i)]; }

  void run_backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
    nodes_.clear();
  }

 private:
  std::vector<Node> nodes_;
};

template <class S>
inline Graph<S>*& active_graph() {
  thread_local Graph<S>* g = nullptr;
  return g;
}

// RAII: make `g` the recording tape for this thread.
template <class S>
class AutodiffScope {
 public:
  explicit AutodiffScope(Graph<S>& g) : prev_(active_graph<S>()) { active_graph<S>() = &g; }
  ~AutodiffScope() { active_graph<S>() = prev_; }
  AutodiffScope(const AutodiffScope&) = delete;
  AutodiffScope& operator=(const AutodiffScope&) = delete;

 private:
  Graph<S>* prev_;
};

namespace detail {

template <class S>
bool on_grad_path(const Tensor<S>& t, const Graph<S>* g) {
  const auto& st = *t.storage();
  return st.requires_grad || (st.node >= 0 && st.tag == g);
}

// Wire `out` into the active tape if any input carries gradient.
// `bw` runs with out->grad already populated by downstream nodes.
template <class S>
void record_op(const char* kind, std::initializer_list<const Tensor<S>*> inputs,
               Tensor<S>& out, std::function<void()> bw) {
  Graph<S>* g = active_graph<S>();
  if (!g) return;
  bool any = false;
  std::vector<int> in_ids;
  in_ids.reserve(inputs.size());
  for (const Tensor<S>* in : inputs) {
    any = any || on_grad_path(*in, g);
    const auto& st = *in->storage();
    in_ids.push_back(st.tag == g ? st.node : -1);
  }
  if (!any) return;
  auto st = out.storage();
  st->node = g->record(kind, std::move(in_ids), std::move(bw));
  st->tag = g;
}

template <class S>
bool wants_grad(const Tensor<S>& t) {
  // Evaluated at record time; capture the result, not the call.
  return on_grad_path(t, active_graph<S>());
}

}  // namespace detail

// Populates gradients of everything reachable from `loss` on the tape that
// produced it. Leaves off the path keep (or report) zero gradients. The
// tape is cleared afterwards.
template <class S>
inline void backward(Tensor<S>& loss) {
  if (loss.size() != 1) throw contract_error("backward: loss must be scalar, got " + shape_str(loss.shape()));
  auto st = loss.storage();
  Graph<S>* g = active_graph<S>();
  if (!g || st->tag != g)
    throw contract_error("backward: loss was not recorded on the active graph");
  st->ensure_grad();
  st->grad[0] = S(1);
  g->run_backward();
}

// ---------------------------------------------------------------------------
// Construction helpers
// ---------------------------------------------------------------------------

// Deterministic across standard libraries (std distributions are not).
inline double rng_uniform01(std::mt19937& g) {
  return (g() >> 8) * (1.0 / 16777216.0);
}
inline double rng_uniform(std::mt19937& g, double lo, double hi) {
  return lo + (hi - lo) * rng_uniform01(g);
}
inline double rng_normal(std::mt19937& g) {
  // Box-Muller; avoids log(0) by offsetting into (0,1].
  double u1 = (g() + 1.0) * (1.0 / 4294967296.0);
  double u2 = rng_uniform01(g);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

template <class S>
Tensor<S> rand_uniform(Shape shape, double lo, double hi, std::mt19937& g) {
  Tensor<S> t = Tensor<S>::zeros(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] = static_cast<S>(rng_uniform(g, lo, hi));
  return t;
}

template <class S>
Tensor<S> rand_normal(Shape shape, double mean, double sd, std::mt19937& g) {
  Tensor<S> t = Tensor<S>::zeros(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] = static_cast<S>(mean + sd * rng_normal(g));
  return t;
}

template <class S>
bool all_finite(const Tensor<S>& t) {
  for (std::int64_t i = 0; i < t.size(); ++i)
    if (!std::isfinite(static_cast<double>(t.data()[i]))) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

namespace detail {
template <class S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using EMap = Eigen::Map<EMat<S>>;
template <class S>
using ECMap = Eigen::Map<const EMat<S>>;

template <class S>
void require_rank2(const Tensor<S>& t, const char* who) {
  if (t.rank() != 2) throw shape_error(std::string(who) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
}
}  // namespace detail

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const int m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw shape_error("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor<S> out = Tensor<S>::zeros({m, n});
  detail::ECMap<S> A(a.data(), m, k), B(b.data(), k, n);
  detail::EMap<S>(out.data(), m, n).noalias() = A * B;
  mac_counters().matmul += static_cast<unsigned long long>(m) * k * n;

  bool ga = detail::wants_grad(a), gb = detail::wants_grad(b);
  auto sa = a.storage(), sb = b.storage(), so = out.storage();
  detail::record_op<S>("matmul", {&a, &b}, out, [sa, sb, so, ga, gb, m, k, n] {
    if (so->grad.empty()) return;
    detail::ECMap<S> dC(so->grad.data(), m, n);
    if (ga) {
      sa->ensure_grad();
      detail::ECMap<S> B(sb->data.data(), k, n);
      detail::EMap<S>(sa->grad.data(), m, k).noalias() += dC * B.transpose();
    }
    if (gb) {
      sb->ensure_grad();
      detail::ECMap<S> A(sa->data.data(), m, k);
      detail::EMap<S>(sb->grad.data(), k, n).noalias() += A.transpose() * dC;
    }
  });
  return out;
}

namespace detail {

// add/sub/mul/div share the shape contract: equal shapes, or one operand a
// one-element scalar tensor.
enum class EwKind { Add, Sub, Mul, Div };

template <class S>
Tensor<S> elementwise_binary(EwKind kind, const char* name, const Tensor<S>& a, const Tensor<S>& b) {
  const bool sa = a.size() == 1, sb = b.size() == 1;
  if (!sa && !sb && a.shape() != b.shape())
    throw shape_error(std::string(name) + ": incompatible shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const Tensor<S>& big = sa && !sb ? b : a;
  Tensor<S> out = Tensor<S>::zeros(big.shape());
  const std::int64_t n = out.size();
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (std::int64_t i = 0; i < n; ++i) {
    const S x = pa[sa ? 0 : i], y = pb[sb ? 0 : i];
    switch (kind) {
      case EwKind::Add: po[i] = x + y; break;
      case EwKind::Sub: po[i] = x - y; break;
      case EwKind::Mul: po[i] = x * y; break;
      case EwKind::Div: po[i] = x / y; break;
    }
  }
  bool ga = wants_grad(a), gb = wants_grad(b);
  auto sta = a.storage(), stb = b.storage(), sto = out.storage();
  record_op<S>(name, {&a, &b}, out, [kind, sta, stb, sto, ga, gb, sa, sb, n] {
    if (sto->grad.empty()) return;
    const S* d = sto->grad.data();
    if (ga) {
      sta->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) {
        S g = d[i];
        if (kind == EwKind::Div) g /= stb->data[sb ? 0 : i];
        sta->grad[sa ? 0 : i] += g;
      }
    }
    if (gb) {
      stb->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) {
        S g{};
        const S x = sta->data[sa ? 0 : i], y = stb->data[sb ? 0 : i];
        switch (kind) {
          case EwKind::Add: g = d[i]; break;
          case EwKind::Sub: g = -d[i]; break;
          case EwKind::Mul: g = d[i] * x; break;
          case EwKind::Div: g = -d[i] * x / (y * y); break;
        }
        stb->grad[sb ? 0 : i] += g;
      }
    }
  });
  return out;
}

}  // namespace detail

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::elementwise_binary(detail::EwKind::Add, "add", a, b);
}
template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::elementwise_binary(detail::EwKind::Sub, "sub", a, b);
}
template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::elementwise_binary(detail::EwKind::Mul, "mul", a, b);
}
template <class S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::elementwise_binary(detail::EwKind::Div, "div", a, b);
}

// Multiply by a compile-time constant (not a learnable scalar).
template <class S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  for (std::int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * c;
  bool ga = detail::wants_grad(a);
  auto sa = a.storage(), so = out.storage();
  detail::record_op<S>("scale", {&a}, out, [sa, so, ga, c] {
    if (so->grad.empty() || !ga) return;
    sa->ensure_grad();
    for (std::size_t i = 0; i < so->grad.size(); ++i) sa->grad[i] += so->grad[i] * c;
  });
  return out;
}

// out[i,j] = m[i,j] + v[j]
template <class S>
Tensor<S> add_rowvec(const Tensor<S>& m, const Tensor<S>& v) {
  detail::require_rank2(m, "add_rowvec");
  if (v.rank() != 1 || v.dim(0) != m.cols())
    throw shape_error("add_rowvec: vector " + shape_str(v.shape()) + " does not match columns of " + shape_str(m.shape()));
  const int r = m.rows(), c = m.cols();
  Tensor<S> out = Tensor<S>::zeros({r, c});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.at(i, j) = m.at(i, j) + v.data()[j];
  bool gm = detail::wants_grad(m), gv = detail::wants_grad(v);
  auto sm = m.storage(), sv = v.storage(), so = out.storage();
  detail::record_op<S>("add_rowvec", {&m, &v}, out, [sm, sv, so, gm, gv, r, c] {
    if (so->grad.empty()) return;
    if (gm) {
      sm->ensure_grad();
      for (std::size_t i = 0; i < so->grad.size(); ++i) sm->grad[i] += so->grad[i];
    }
    if (gv) {
      sv->ensure_grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) sv->grad[j] += so->grad[static_cast<std::size_t>(i) * c + j];
    }
  });
  return out;
}

namespace detail {
template <class S>
Tensor<S> rowwise_scale(const char* name, bool divide, const Tensor<S>& m, const Tensor<S>& v) {
  require_rank2(m, name);
  if (v.rank() != 1 || v.dim(0) != m.rows())
    throw shape_error(std::string(name) + ": vector " + shape_str(v.shape()) + " does not match rows of " + shape_str(m.shape()));
  const int r = m.rows(), c = m.cols();
  Tensor<S> out = Tensor<S>::zeros({r, c});
  for (int i = 0; i < r; ++i) {
    const S s = divide ? S(1) / v.data()[i] : v.data()[i];
    for (int j = 0; j < c; ++j) out.at(i, j) = m.at(i, j) * s;
  }
  bool gm = wants_grad(m), gv = wants_grad(v);
  auto sm = m.storage(), sv = v.storage(), so = out.storage();
  record_op<S>(name, {&m, &v}, out, [sm, sv, so, gm, gv, divide, r, c] {
    if (so->grad.empty()) return;
    for (int i = 0; i < r; ++i) {
      const S vi = sv->data[i];
      const S s = divide ? S(1) / vi : vi;
      for (int j = 0; j < c; ++j) {
        const std::size_t k = static_cast<std::size_t>(i) * c + j;
        const S d = so->grad[k];
        if (gm) {
          sm->ensure_grad();
          sm->grad[k] += d * s;
        }
        if (gv) {
          sv->ensure_grad();
          // d(m*v)/dv = m ; d(m/v)/dv = -m/v^2
          sv->grad[i] += divide ? -d * sm->data[k] / (vi * vi) : d * sm->data[k];
        }
      }
    }
  });
  return out;
}
}  // namespace detail

// out[i,j] = m[i,j] * v[i]
template <class S>
Tensor<S> mul_colvec(const Tensor<S>& m, const Tensor<S>& v) {
  return detail::rowwise_scale("mul_colvec", false, m, v);
}
// out[i,j] = m[i,j] / v[i]
template <class S>
Tensor<S> div_colvec(const Tensor<S>& m, const Tensor<S>& v) {
  return detail::rowwise_scale("div_colvec", true, m, v);
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& t) {
  Tensor<S> out = Tensor<S>::zeros(t.shape());
  for (std::int64_t i = 0; i < t.size(); ++i) {
    const S x = t.data()[i];
    // Split on sign keeps exp() bounded; output stays strictly inside (0,1).
    out.data()[i] = x >= S(0) ? S(1) / (S(1) + std::exp(-x))
                              : std::exp(x) / (S(1) + std::exp(x));
  }
  bool g = detail::wants_grad(t);
  auto st = t.storage(), so = out.storage();
  detail::record_op<S>("sigmoid", {&t}, out, [st, so, g] {
    if (so->grad.empty() || !g) return;
    st->ensure_grad();
    for (std::size_t i = 0; i < so->grad.size(); ++i) {
      const S y = so->data[i];
      st->grad[i] += so->grad[i] * y * (S(1) - y);
    }
  });
  return out;
}

template <class S>
Tensor<S> gelu(const Tensor<S>& t) {
  Tensor<S> out = Tensor<S>::zeros(t.shape());
  const S inv_sqrt2 = static_cast<S>(0.7071067811865475244);
  for (std::int64_t i = 0; i < t.size(); ++i) {
    const S x = t.data()[i];
    out.data()[i] = S(0.5) * x * (S(1) + std::erf(x * inv_sqrt2));
  }
  bool g = detail::wants_grad(t);
  auto st = t.storage(), so = out.storage();
  detail::record_op<S>("gelu", {&t}, out, [st, so, g, inv_sqrt2] {
    if (so->grad.empty() || !g) return;
    st->ensure_grad();
    const S inv_sqrt2pi = static_cast<S>(0.3989422804014326779);
    for (std::size_t i = 0; i < so->grad.size(); ++i) {
      const S x = st->data[i];
      const S cdf = S(0.5) * (S(1) + std::erf(x * inv_sqrt2));
      const S pdf = inv_sqrt2pi * std::exp(S(-0.5) * x * x);
      st->grad[i] += so->grad[i] * (cdf + x * pdf);
    }
  });
  return out;
}

template <class S>
Tensor<S> sum_all(const Tensor<S>& t) {
  S acc = std::accumulate(t.data(), t.data() + t.size(), S(0));
  Tensor<S> out = Tensor<S>::scalar(acc);
  bool g = detail::wants_grad(t);
  auto st = t.storage(), so = out.storage();
  detail::record_op<S>("sum", {&t}, out, [st, so, g] {
    if (so->grad.empty() || !g) return;
    st->ensure_grad();
    for (auto& gr : st->grad) gr += so->grad[0];
  });
  return out;
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& t) {
  if (t.size() == 0) throw error("mean: empty tensor");
  return scale(sum_all(t), S(1) / static_cast<S>(t.size()));
}

namespace detail {
template <class S>
void check_axis(const Tensor<S>& t, int axis, const char* who) {
  if (t.rank() != 2) throw shape_error(std::string(who) + ": axis reduce needs rank-2, got " + shape_str(t.shape()));
  if (axis != 0 && axis != 1) throw error(std::string(who) + ": axis out of range");
  if (t.dim(axis) == 0) throw error(std::string(who) + ": empty reduction axis");
}
}  // namespace detail

// Reduce along `axis` of a rank-2 tensor; the axis is eliminated.
template <class S>
Tensor<S> sum(const Tensor<S>& t, int axis) {
  detail::check_axis(t, axis, "sum");
  const int r = t.rows(), c = t.cols();
  const int keep = axis == 0 ? c : r;
  Tensor<S> out = Tensor<S>::zeros({keep});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.data()[axis == 0 ? j : i] += t.at(i, j);
  bool g = detail::wants_grad(t);
  auto st = t.storage(), so = out.storage();
  detail::record_op<S>("sum_axis", {&t}, out, [st, so, g, r, c, axis] {
    if (so->grad.empty() || !g) return;
    st->ensure_grad();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        st->grad[static_cast<std::size_t>(i) * c + j] += so->grad[axis == 0 ? j : i];
  });
  return out;
}

template <class S>
Tensor<S> mean(const Tensor<S>& t, int axis) {
  detail::check_axis(t, axis, "mean");
  return scale(sum(t, axis), S(1) / static_cast<S>(t.dim(axis)));
}

// Reduce along `axis`; ties resolve to the lowest index (deterministic, the
// cluster assignment relies on it). Gradient routes to the winner.
template <class S>
std::pair<Tensor<S>, std::vector<int>> max_with_argmax(const Tensor<S>& t, int axis) {
  detail::check_axis(t, axis, "max_with_argmax");
  const int r = t.rows(), c = t.cols();
  const int keep = axis == 0 ? c : r, red = axis == 0 ? r : c;
  Tensor<S> out = Tensor<S>::zeros({keep});
  std::vector<int> idx(static_cast<std::size_t>(keep), 0);
  for (int k = 0; k < keep; ++k) {
    S best = axis == 0 ? t.at(0, k) : t.at(k, 0);
    int bi = 0;
    for (int l = 1; l < red; ++l) {
      const S v = axis == 0 ? t.at(l, k) : t.at(k, l);
      if (v > best) {
        best = v;
        bi = l;
      }
    }
    out.data()[k] = best;
    idx[static_cast<std::size_t>(k)] = bi;
  }
  bool g = detail::wants_grad(t);
  auto st = t.storage(), so = out.storage();
  auto idx_copy = idx;
  detail::record_op<S>("max", {&t}, out, [st, so, g, idx_copy, c, axis] {
    if (so->grad.empty() || !g) return;
    st->ensure_grad();
    for (std::size_t k = 0; k < idx_copy.size(); ++k) {
      const std::size_t pos = axis == 0
                                  ? static_cast<std::size_t>(idx_copy[k]) * c + k
                                  : k * c + static_cast<std::size_t>(idx_copy[k]);
      st->grad[pos] += so->grad[k];
    }
  });
  return {out, std::move(idx)};
}

template <class S>
Tensor<S> reshape(const Tensor<S>& t, Shape shape) {
  if (numel(shape) != t.size())
    throw shape_error("reshape: cannot view " + shape_str(t.shape()) + " as " + shape_str(shape));
  Tensor<S> out = Tensor<S>::from_data(std::move(shape), t.values());
  bool g = detail::wants_grad(t);
  auto st = t.storage(), so = out.storage();
  detail::record_op<S>("reshape", {&t}, out, [st, so, g] {
    if (so->grad.empty() || !g) return;
    st->ensure_grad();
    for (std::size_t i = 0; i < so->grad.size(); ++i) st->grad[i] += so->grad[i];
  });
  return out;
}

template <class S>
Tensor<S> transpose(const Tensor<S>& t) {
  detail::require_rank2(t, "transpose");
  const int r = t.rows(), c = t.cols();
  Tensor<S> out = Tensor<S>::zeros({c, r});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.at(j, i) = t.at(i, j);
  bool g = detail::wants_grad(t);
  auto st = t.storage(), so = out.storage();
  detail::record_op<S>("transpose", {&t}, out, [st, so, g, r, c] {
    if (so->grad.empty() || !g) return;
    st->ensure_grad();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        st->grad[static_cast<std::size_t>(i) * c + j] += so->grad[static_cast<std::size_t>(j) * r + i];
  });
  return out;
}

// axis 0 stacks rows, axis 1 stacks columns; rank-2 only.
template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
  if (parts.empty()) throw error("concat: no inputs");
  for (const auto& p : parts) detail::require_rank2(p, "concat");
  if (axis != 0 && axis != 1) throw error("concat: axis out of range");
  int r = parts[0].rows(), c = parts[0].cols();
  int total = axis == 0 ? r : c;
  for (std::size_t i = 1; i < parts.size(); ++i) {
    if (axis == 0 && parts[i].cols() != c)
      throw shape_error("concat: column mismatch");
    if (axis == 1 && parts[i].rows() != r)
      throw shape_error("concat: row mismatch");
    total += axis == 0 ? parts[i].rows() : parts[i].cols();
  }
  const int R = axis == 0 ? total : r, C = axis == 0 ? c : total;
  Tensor<S> out = Tensor<S>::zeros({R, C});
  int off = 0;
  for (const auto& p : parts) {
    for (int i = 0; i < p.rows(); ++i)
      for (int j = 0; j < p.cols(); ++j) {
        if (axis == 0)
          out.at(off + i, j) = p.at(i, j);
        else
          out.at(i, off + j) = p.at(i, j);
      }
    off += axis == 0 ? p.rows() : p.cols();
  }
  Graph<S>* g = active_graph<S>();
  bool any = false;
  std::vector<int> ids;
  std::vector<std::shared_ptr<detail::Storage<S>>> sts;
  std::vector<bool> gs;
  for (const auto& p : parts) {
    any = any || detail::on_grad_path(p, g);
    gs.push_back(detail::on_grad_path(p, g));
    sts.push_back(p.storage());
    ids.push_back(p.storage()->tag == g ? p.storage()->node : -1);
  }
  if (g && any) {
    auto so = out.storage();
    so->node = g->record("concat", ids, [sts, gs, so, axis, C] {
      if (so->grad.empty()) return;
      int off2 = 0;
      for (std::size_t p = 0; p < sts.size(); ++p) {
        const int pr = sts[p]->shape[0], pc = sts[p]->shape[1];
        if (gs[p]) {
          sts[p]->ensure_grad();
          for (int i = 0; i < pr; ++i)
            for (int j = 0; j < pc; ++j) {
              const std::size_t src = axis == 0
                                          ? static_cast<std::size_t>(off2 + i) * C + j
                                          : static_cast<std::size_t>(i) * C + (off2 + j);
              sts[p]->grad[static_cast<std::size_t>(i) * pc + j] += so->grad[src];
            }
        }
        off2 += axis == 0 ? pr : pc;
      }
    });
    so->tag = g;
  }
  return out;
}

// Inverse of concat for the given sizes.
template <class S>
std::vector<Tensor<S>> split(const Tensor<S>& t, const std::vector<int>& sizes, int axis) {
  detail::require_rank2(t, "split");
  if (axis != 0 && axis != 1) throw error("split: axis out of range");
  int total = 0;
  for (int s : sizes) total += s;
  if (total != t.dim(axis)) throw shape_error("split: sizes do not cover axis");
  std::vector<Tensor<S>> outs;
  int off = 0;
  for (int s : sizes) {
    const int R = axis == 0 ? s : t.rows();
    const int C = axis == 0 ? t.cols() : s;
    Tensor<S> part = Tensor<S>::zeros({R, C});
    for (int i = 0; i < R; ++i)
      for (int j = 0; j < C; ++j)
        part.at(i, j) = axis == 0 ? t.at(off + i, j) : t.at(i, off + j);
    bool g = detail::wants_grad(t);
    auto st = t.storage(), so = part.storage();
    const int o = off, tc = t.cols();
    detail::record_op<S>("split", {&t}, part, [st, so, g, o, axis, R, C, tc] {
      if (so->grad.empty() || !g) return;
      st->ensure_grad();
      for (int i = 0; i < R; ++i)
        for (int j = 0; j < C; ++j) {
          const std::size_t dst = axis == 0
                                      ? static_cast<std::size_t>(o + i) * tc + j
                                      : static_cast<std::size_t>(i) * tc + (o + j);
          st->grad[dst] += so->grad[static_cast<std::size_t>(i) * C + j];
        }
    });
    outs.push_back(std::move(part));
    off += s;
  }
  return outs;
}

// out[i,:] = t[idx[i],:]; backward is scatter-add.
template <class S>
Tensor<S> gather_rows(const Tensor<S>& t, const std::vector<int>& idx) {
  detail::require_rank2(t, "gather_rows");
  const int c = t.cols();
  for (int i : idx)
    if (i < 0 || i >= t.rows()) throw index_error("gather_rows: row index " + std::to_string(i) + " out of range");
  Tensor<S> out = Tensor<S>::zeros({static_cast<int>(idx.size()), c});
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(t.data() + static_cast<std::size_t>(idx[i]) * c, c, out.data() + i * c);
  bool g = detail::wants_grad(t);
  auto st = t.storage(), so = out.storage();
  auto idc = idx;
  detail::record_op<S>("gather_rows", {&t}, out, [st, so, g, idc, c] {
    if (so->grad.empty() || !g) return;
    st->ensure_grad();
    for (std::size_t i = 0; i < idc.size(); ++i)
      for (int j = 0; j < c; ++j)
        st->grad[static_cast<std::size_t>(idc[i]) * c + j] += so->grad[i * c + j];
  });
  return out;
}

// out starts at zero; out[idx[i],:] += src[i,:]. With unique indices this is
// the exact inverse placement of gather_rows.
template <class S>
Tensor<S> scatter_rows(const Tensor<S>& src, const std::vector<int>& idx, int out_rows) {
  detail::require_rank2(src, "scatter_rows");
  if (static_cast<int>(idx.size()) != src.rows()) throw shape_error("scatter_rows: index count != rows");
  const int c = src.cols();
  for (int i : idx)
    if (i < 0 || i >= out_rows) throw index_error("scatter_rows: row index " + std::to_string(i) + " out of range");
  Tensor<S> out = Tensor<S>::zeros({out_rows, c});
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (int j = 0; j < c; ++j) out.at(idx[i], j) += src.at(static_cast<int>(i), j);
  bool g = detail::wants_grad(src);
  auto st = src.storage(), so = out.storage();
  auto idc = idx;
  detail::record_op<S>("scatter_rows", {&src}, out, [st, so, g, idc, c] {
    if (so->grad.empty() || !g) return;
    st->ensure_grad();
    for (std::size_t i = 0; i < idc.size(); ++i)
      for (int j = 0; j < c; ++j)
        st->grad[i * c + j] += so->grad[static_cast<std::size_t>(idc[i]) * c + j];
  });
  return out;
}

// out[i] = t[i, idx[i]]
template <class S>
Tensor<S> take_per_row(const Tensor<S>& t, const std::vector<int>& idx) {
  detail::require_rank2(t, "take_per_row");
  if (static_cast<int>(idx.size()) != t.rows()) throw shape_error("take_per_row: index count != rows");
  const int c = t.cols();
  for (int i : idx)
    if (i < 0 || i >= c) throw index_error("take_per_row: column index out of range");
  Tensor<S> out = Tensor<S>::zeros({t.rows()});
  for (int i = 0; i < t.rows(); ++i) out.data()[i] = t.at(i, idx[static_cast<std::size_t>(i)]);
  bool g = detail::wants_grad(t);
  auto st = t.storage(), so = out.storage();
  auto idc = idx;
  detail::record_op<S>("take_per_row", {&t}, out, [st, so, g, idc, c] {
    if (so->grad.empty() || !g) return;
    st->ensure_grad();
    for (std::size_t i = 0; i < idc.size(); ++i)
      st->grad[i * c + static_cast<std::size_t>(idc[i])] += so->grad[i];
  });
  return out;
}

// Per-group mean of rows: out[g,:] = mean over {i : group[i]==g} of t[i,:].
// A group with no members takes its row from `fallback` (used by iterative
// center updates, where an empty cluster keeps its previous center).
template <class S>
Tensor<S> mean_rows_by_group(const Tensor<S>& t, const std::vector<int>& group, int n_groups,
                             const Tensor<S>* fallback = nullptr) {
  detail::require_rank2(t, "mean_rows_by_group");
  if (static_cast<int>(group.size()) != t.rows()) throw shape_error("mean_rows_by_group: group count != rows");
  const int c = t.cols();
  std::vector<int> counts(static_cast<std::size_t>(n_groups), 0);
  for (int gi : group) {
    if (gi < 0 || gi >= n_groups) throw index_error("mean_rows_by_group: group id out of range");
    counts[static_cast<std::size_t>(gi)]++;
  }
  for (int g = 0; g < n_groups; ++g)
    if (counts[static_cast<std::size_t>(g)] == 0 && !fallback)
      throw contract_error("mean_rows_by_group: empty group " + std::to_string(g) + " without fallback");
  if (fallback && (fallback->rank() != 2 || fallback->rows() != n_groups || fallback->cols() != c))
    throw shape_error("mean_rows_by_group: fallback shape mismatch");

  Tensor<S> out = Tensor<S>::zeros({n_groups, c});
  for (int i = 0; i < t.rows(); ++i)
    for (int j = 0; j < c; ++j) out.at(group[static_cast<std::size_t>(i)], j) += t.at(i, j);
  for (int g = 0; g < n_groups; ++g) {
    const int m = counts[static_cast<std::size_t>(g)];
    for (int j = 0; j < c; ++j) {
      if (m > 0)
        out.at(g, j) /= static_cast<S>(m);
      else
        out.at(g, j) = fallback->at(g, j);
    }
  }
  bool gt = detail::wants_grad(t);
  bool gf = fallback && detail::wants_grad(*fallback);
  auto st = t.storage(), so = out.storage();
  auto sf = fallback ? fallback->storage() : nullptr;
  auto grp = group;
  std::function<void()> bw = [st, so, sf, gt, gf, grp, counts, c, n_groups] {
    if (so->grad.empty()) return;
    if (gt) {
      st->ensure_grad();
      for (std::size_t i = 0; i < grp.size(); ++i) {
        const int g = grp[i];
        const S inv = S(1) / static_cast<S>(counts[static_cast<std::size_t>(g)]);
        for (int j = 0; j < c; ++j)
          st->grad[i * c + j] += so->grad[static_cast<std::size_t>(g) * c + j] * inv;
      }
    }
    if (gf) {
      sf->ensure_grad();
      for (int g = 0; g < n_groups; ++g)
        if (counts[static_cast<std::size_t>(g)] == 0)
          for (int j = 0; j < c; ++j)
            sf->grad[static_cast<std::size_t>(g) * c + j] += so->grad[static_cast<std::size_t>(g) * c + j];
    }
  };
  if (fallback)
    detail::record_op<S>("mean_rows_by_group", {&t, fallback}, out, std::move(bw));
  else
    detail::record_op<S>("mean_rows_by_group", {&t}, out, std::move(bw));
  return out;
}

// Per-row, per-group normalization with affine transform.
// Within each group of channels: zero mean, unit variance, then gamma/beta.
template <class S>
Tensor<S> group_norm(const Tensor<S>& t, int groups, const Tensor<S>& gamma, const Tensor<S>& beta,
                     S eps = static_cast<S>(1e-5)) {
  detail::require_rank2(t, "group_norm");
  const int n = t.rows(), d = t.cols();
  if (groups < 1 || d % groups != 0)
    throw config_error("group_norm: " + std::to_string(d) + " channels not divisible into " + std::to_string(groups) + " groups");
  if (gamma.size() != d || beta.size() != d) throw shape_error("group_norm: affine params must have d elements");
  const int gs = d / groups;

  Tensor<S> out = Tensor<S>::zeros({n, d});
  // saved for backward: per (row, group) inv_std, and x_hat implicitly via out
  std::vector<S> inv_std(static_cast<std::size_t>(n) * groups);
  std::vector<S> xhat(static_cast<std::size_t>(n) * d);
  for (int i = 0; i < n; ++i) {
    for (int g = 0; g < groups; ++g) {
      const S* x = t.data() + static_cast<std::size_t>(i) * d + static_cast<std::size_t>(g) * gs;
      S mu = 0;
      for (int j = 0; j < gs; ++j) mu += x[j];
      mu /= static_cast<S>(gs);
      S var = 0;
      for (int j = 0; j < gs; ++j) var += (x[j] - mu) * (x[j] - mu);
      var /= static_cast<S>(gs);
      const S is = S(1) / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(i) * groups + g] = is;
      for (int j = 0; j < gs; ++j) {
        const int col = g * gs + j;
        const S xh = (x[j] - mu) * is;
        xhat[static_cast<std::size_t>(i) * d + col] = xh;
        out.at(i, col) = gamma.data()[col] * xh + beta.data()[col];
      }
    }
  }
  bool gt = detail::wants_grad(t), gg = detail::wants_grad(gamma), gb = detail::wants_grad(beta);
  auto st = t.storage(), sg = gamma.storage(), sb = beta.storage(), so = out.storage();
  detail::record_op<S>("group_norm", {&t, &gamma, &beta}, out,
                       [st, sg, sb, so, gt, gg, gb, inv_std, xhat, n, d, gs, groups] {
    if (so->grad.empty()) return;
    if (gg) sg->ensure_grad();
    if (gb) sb->ensure_grad();
    if (gt) st->ensure_grad();
    for (int i = 0; i < n; ++i) {
      for (int g = 0; g < groups; ++g) {
        const std::size_t base = static_cast<std::size_t>(i) * d + static_cast<std::size_t>(g) * gs;
        // dL/dxhat = dy * gamma; reduce to the two means the norm backward needs
        S mean_dxhat = 0, mean_dxhat_xhat = 0;
        for (int j = 0; j < gs; ++j) {
          const int col = g * gs + j;
          const S dy = so->grad[base + j];
          if (gg) sg->grad[col] += dy * xhat[base + j];
          if (gb) sb->grad[col] += dy;
          const S dxh = dy * sg->data[col];
          mean_dxhat += dxh;
          mean_dxhat_xhat += dxh * xhat[base + j];
        }
        if (!gt) continue;
        mean_dxhat /= static_cast<S>(gs);
        mean_dxhat_xhat /= static_cast<S>(gs);
        const S is = inv_std[static_cast<std::size_t>(i) * groups + g];
        for (int j = 0; j < gs; ++j) {
          const int col = g * gs + j;
          const S dxh = so->grad[base + j] * sg->data[col];
          st->grad[base + j] += is * (dxh - mean_dxhat - xhat[base + j] * mean_dxhat_xhat);
        }
      }
    }
  });
  return out;
}

}  // namespace coc
