#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "dedn/errors.hpp"
#include "dedn/tensor.hpp"

namespace dedn {

/// Reverse-mode differentiation tape. One tape records one forward pass;
/// every primitive appends a node whose inputs already live on the tape, so
/// node order is a topological order. backward() from a scalar node returns
/// gradients for every node, keyed by node id; unreached nodes keep a zero
/// gradient of their value's shape.
///
/// Tapes are single-threaded. Tensors returned by tape methods carry this
/// tape's id; feeding them to another tape is a contract error.
template <typename T>
class TapeT {
 public:
  using Grads = std::vector<TensorT<T>>;

  TapeT() : id_(next_id()) {}
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return nodes_.size(); }

  const TensorT<T>& value(int node) const { return nodes_[node].value; }

  /// Register a differentiable input (model parameter).
  TensorT<T> leaf(const TensorT<T>& value) { return push(value, {}, nullptr); }

  /// Register a non-learned input. Mechanically identical to leaf(); its
  /// gradient is computed but never consumed.
  TensorT<T> constant(const TensorT<T>& value) {
    return push(value, {}, nullptr);
  }

  TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    require(a, "matmul");
    require(b, "matmul");
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
      throw ShapeError("matmul: " + shape_string(a.shape()) +
                       " incompatible with " + shape_string(b.shape()));
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    TensorT<T> out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const T aip = a(i, p);
        for (std::size_t j = 0; j < n; ++j) out(i, j) += aip * b(p, j);
      }
    }
    const int ia = a.node(), ib = b.node();
    return push(std::move(out), {ia, ib},
                [ia, ib, m, k, n](const TensorT<T>& g, const TapeT& t,
                                  Grads& grads) {
                  const TensorT<T>& av = t.value(ia);
                  const TensorT<T>& bv = t.value(ib);
                  TensorT<T>& ga = grads[ia];
                  TensorT<T>& gb = grads[ib];
                  // ga += g * b^T ; gb += a^T * g
                  for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                      const T gij = g(i, j);
                      for (std::size_t p = 0; p < k; ++p) {
                        ga(i, p) += gij * bv(p, j);
                        gb(p, j) += av(i, p) * gij;
                      }
                    }
                  }
                });
  }

  /// M-vector result of (M x N) matrix times N-vector.
  TensorT<T> matvec(const TensorT<T>& a, const TensorT<T>& x) {
    require(a, "matvec");
    require(x, "matvec");
    if (a.rank() != 2 || x.rank() != 1 || a.cols() != x.size()) {
      throw ShapeError("matvec: " + shape_string(a.shape()) +
                       " incompatible with " + shape_string(x.shape()));
    }
    const std::size_t m = a.rows(), n = a.cols();
    TensorT<T> out({m});
    for (std::size_t i = 0; i < m; ++i) {
      T acc{};
      for (std::size_t j = 0; j < n; ++j) acc += a(i, j) * x(j);
      out(i) = acc;
    }
    const int ia = a.node(), ix = x.node();
    return push(std::move(out), {ia, ix},
                [ia, ix, m, n](const TensorT<T>& g, const TapeT& t,
                               Grads& grads) {
                  const TensorT<T>& av = t.value(ia);
                  const TensorT<T>& xv = t.value(ix);
                  for (std::size_t i = 0; i < m; ++i) {
                    const T gi = g(i);
                    for (std::size_t j = 0; j < n; ++j) {
                      grads[ia](i, j) += gi * xv(j);
                      grads[ix](j) += av(i, j) * gi;
                    }
                  }
                });
  }

  TensorT<T> transpose(const TensorT<T>& a) {
    require(a, "transpose");
    if (a.rank() != 2) {
      throw ShapeError("transpose: rank-2 required, have " +
                       shape_string(a.shape()));
    }
    const std::size_t m = a.rows(), n = a.cols();
    TensorT<T> out({n, m});
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) out(j, i) = a(i, j);
    }
    const int ia = a.node();
    return push(std::move(out), {ia},
                [ia, m, n](const TensorT<T>& g, const TapeT&, Grads& grads) {
                  for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                      grads[ia](i, j) += g(j, i);
                    }
                  }
                });
  }

  TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    return elementwise(a, b, "add", [](T x, T y) { return x + y; },
                       [](const TensorT<T>& g, TensorT<T>& ga, TensorT<T>& gb) {
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           ga(i) += g(i);
                           gb(i) += g(i);
                         }
                       });
  }

  TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    return elementwise(a, b, "sub", [](T x, T y) { return x - y; },
                       [](const TensorT<T>& g, TensorT<T>& ga, TensorT<T>& gb) {
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           ga(i) += g(i);
                           gb(i) -= g(i);
                         }
                       });
  }

  /// Hadamard product.
  TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    require(a, "mul");
    require(b, "mul");
    if (!a.same_shape(b)) {
      throw ShapeError("mul: " + shape_string(a.shape()) + " vs " +
                       shape_string(b.shape()));
    }
    TensorT<T> out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out(i) = a(i) * b(i);
    const int ia = a.node(), ib = b.node();
    return push(std::move(out), {ia, ib},
                [ia, ib](const TensorT<T>& g, const TapeT& t, Grads& grads) {
                  const TensorT<T>& av = t.value(ia);
                  const TensorT<T>& bv = t.value(ib);
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    grads[ia](i) += g(i) * bv(i);
                    grads[ib](i) += g(i) * av(i);
                  }
                });
  }

  /// Multiply by a compile-time-known constant factor.
  TensorT<T> scale(const TensorT<T>& a, T factor) {
    require(a, "scale");
    TensorT<T> out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out(i) = a(i) * factor;
    const int ia = a.node();
    return push(std::move(out), {ia},
                [ia, factor](const TensorT<T>& g, const TapeT&, Grads& grads) {
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    grads[ia](i) += g(i) * factor;
                  }
                });
  }

  /// Add a constant (non-differentiated) shift, elementwise.
  TensorT<T> offset(const TensorT<T>& a, const TensorT<T>& shift) {
    require(a, "offset");
    if (!a.same_shape(shift)) {
      throw ShapeError("offset: " + shape_string(a.shape()) + " vs " +
                       shape_string(shift.shape()));
    }
    TensorT<T> out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out(i) = a(i) + shift(i);
    const int ia = a.node();
    return push(std::move(out), {ia},
                [ia](const TensorT<T>& g, const TapeT&, Grads& grads) {
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    grads[ia](i) += g(i);
                  }
                });
  }

  /// Row sums of a matrix: (M x N) -> M.
  TensorT<T> row_sum(const TensorT<T>& a) {
    require(a, "row_sum");
    if (a.rank() != 2) {
      throw ShapeError("row_sum: rank-2 required, have " +
                       shape_string(a.shape()));
    }
    const std::size_t m = a.rows(), n = a.cols();
    TensorT<T> out({m});
    for (std::size_t i = 0; i < m; ++i) {
      T acc{};
      for (std::size_t j = 0; j < n; ++j) acc += a(i, j);
      out(i) = acc;
    }
    const int ia = a.node();
    return push(std::move(out), {ia},
                [ia, m, n](const TensorT<T>& g, const TapeT&, Grads& grads) {
                  for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                      grads[ia](i, j) += g(i);
                    }
                  }
                });
  }

  /// Sum of all elements -> scalar.
  TensorT<T> sum(const TensorT<T>& a) {
    require(a, "sum");
    T acc{};
    for (std::size_t i = 0; i < a.size(); ++i) acc += a(i);
    const int ia = a.node();
    return push(TensorT<T>::scalar(acc), {ia},
                [ia](const TensorT<T>& g, const TapeT&, Grads& grads) {
                  const T gv = g.item();
                  for (std::size_t i = 0; i < grads[ia].size(); ++i) {
                    grads[ia](i) += gv;
                  }
                });
  }

  /// Row-wise softmax with max shift: each row of the result sums to 1.
  TensorT<T> softmax_rows(const TensorT<T>& a) {
    require(a, "softmax_rows");
    if (a.rank() != 2) {
      throw ShapeError("softmax_rows: rank-2 required, have " +
                       shape_string(a.shape()));
    }
    const std::size_t m = a.rows(), n = a.cols();
    TensorT<T> out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
      softmax_fill(&a(i, 0), &out(i, 0), n);
    }
    const int self = static_cast<int>(nodes_.size());
    const int ia = a.node();
    return push(std::move(out), {ia},
                [ia, self, m, n](const TensorT<T>& g, const TapeT& t,
                                 Grads& grads) {
                  const TensorT<T>& s = t.value(self);
                  for (std::size_t i = 0; i < m; ++i) {
                    T dot{};
                    for (std::size_t j = 0; j < n; ++j) dot += g(i, j) * s(i, j);
                    for (std::size_t j = 0; j < n; ++j) {
                      grads[ia](i, j) += s(i, j) * (g(i, j) - dot);
                    }
                  }
                });
  }

  /// Softmax of a 1-D vector.
  TensorT<T> softmax(const TensorT<T>& v) {
    require(v, "softmax");
    if (v.rank() != 1) {
      throw ShapeError("softmax: rank-1 required, have " +
                       shape_string(v.shape()));
    }
    const std::size_t n = v.size();
    TensorT<T> out({n});
    softmax_fill(&v(0), &out(0), n);
    const int self = static_cast<int>(nodes_.size());
    const int iv = v.node();
    return push(std::move(out), {iv},
                [iv, self, n](const TensorT<T>& g, const TapeT& t,
                              Grads& grads) {
                  const TensorT<T>& s = t.value(self);
                  T dot{};
                  for (std::size_t j = 0; j < n; ++j) dot += g(j) * s(j);
                  for (std::size_t j = 0; j < n; ++j) {
                    grads[iv](j) += s(j) * (g(j) - dot);
                  }
                });
  }

  /// log(sum(exp(v))) of a 1-D vector, max-shifted.
  TensorT<T> logsumexp(const TensorT<T>& v) {
    require(v, "logsumexp");
    if (v.rank() != 1 || v.size() == 0) {
      throw ShapeError("logsumexp: non-empty rank-1 required, have " +
                       shape_string(v.shape()));
    }
    const std::size_t n = v.size();
    T mx = v(0);
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, v(i));
    T acc{};
    for (std::size_t i = 0; i < n; ++i) acc += std::exp(v(i) - mx);
    const int iv = v.node();
    return push(TensorT<T>::scalar(mx + std::log(acc)), {iv},
                [iv, n](const TensorT<T>& g, const TapeT& t, Grads& grads) {
                  const TensorT<T>& vv = t.value(iv);
                  const T gv = g.item();
                  T mx = vv(0);
                  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, vv(i));
                  T z{};
                  for (std::size_t i = 0; i < n; ++i) z += std::exp(vv(i) - mx);
                  for (std::size_t i = 0; i < n; ++i) {
                    grads[iv](i) += gv * std::exp(vv(i) - mx) / z;
                  }
                });
  }

  /// Select one element of a 1-D vector -> scalar.
  TensorT<T> pick(const TensorT<T>& v, std::size_t index) {
    require(v, "pick");
    if (v.rank() != 1 || index >= v.size()) {
      throw ShapeError("pick: index " + std::to_string(index) +
                       " out of range for " + shape_string(v.shape()));
    }
    const int iv = v.node();
    return push(TensorT<T>::scalar(v(index)), {iv},
                [iv, index](const TensorT<T>& g, const TapeT&, Grads& grads) {
                  grads[iv](index) += g.item();
                });
  }

  /// Kullback-Leibler divergence sum(p * log(p/q)) between 1-D probability
  /// vectors. Both sides of the ratio are floored at kProbFloor so that
  /// kl_div(p, p) is exactly zero; terms with p == 0 contribute zero.
  TensorT<T> kl_div(const TensorT<T>& p, const TensorT<T>& q) {
    require(p, "kl_div");
    require(q, "kl_div");
    if (p.rank() != 1 || q.rank() != 1 || p.size() != q.size()) {
      throw ShapeError("kl_div: " + shape_string(p.shape()) + " vs " +
                       shape_string(q.shape()));
    }
    check_distribution(p, "kl_div: p");
    check_distribution(q, "kl_div: q");
    const std::size_t n = p.size();
    T acc{};
    for (std::size_t i = 0; i < n; ++i) {
      if (p(i) > T{0}) {
        acc += p(i) * std::log(floored(p(i)) / floored(q(i)));
      }
    }
    const int ip = p.node(), iq = q.node();
    return push(TensorT<T>::scalar(acc), {ip, iq},
                [ip, iq, n](const TensorT<T>& g, const TapeT& t,
                            Grads& grads) {
                  const TensorT<T>& pv = t.value(ip);
                  const TensorT<T>& qv = t.value(iq);
                  const T gv = g.item();
                  for (std::size_t i = 0; i < n; ++i) {
                    if (pv(i) <= T{0}) continue;
                    const T pf = floored(pv(i));
                    const T qf = floored(qv(i));
                    grads[ip](i) += gv * (std::log(pf / qf) + T{1});
                    if (qv(i) > kProbFloor()) {
                      grads[iq](i) -= gv * pv(i) / qf;
                    }
                  }
                });
  }

  /// Un-averaged squared L2 distance sum((x - y)^2) -> scalar.
  TensorT<T> mse(const TensorT<T>& x, const TensorT<T>& y) {
    require(x, "mse");
    require(y, "mse");
    if (!x.same_shape(y)) {
      throw ShapeError("mse: " + shape_string(x.shape()) + " vs " +
                       shape_string(y.shape()));
    }
    T acc{};
    for (std::size_t i = 0; i < x.size(); ++i) {
      const T d = x(i) - y(i);
      acc += d * d;
    }
    const int ix = x.node(), iy = y.node();
    return push(TensorT<T>::scalar(acc), {ix, iy},
                [ix, iy](const TensorT<T>& g, const TapeT& t, Grads& grads) {
                  const TensorT<T>& xv = t.value(ix);
                  const TensorT<T>& yv = t.value(iy);
                  const T gv = g.item();
                  for (std::size_t i = 0; i < xv.size(); ++i) {
                    const T d = T{2} * (xv(i) - yv(i)) * gv;
                    grads[ix](i) += d;
                    grads[iy](i) -= d;
                  }
                });
  }

  /// Scatter 1-D parts into a length-`dim` vector: out[lists[q][j]] =
  /// parts[q][j]. The index lists must form a disjoint cover of [0, dim).
  TensorT<T> scatter(const std::vector<TensorT<T>>& parts,
                     const std::vector<std::vector<std::size_t>>& index_lists,
                     std::size_t dim) {
    if (parts.size() != index_lists.size()) {
      throw ContractError("scatter: " + std::to_string(parts.size()) +
                          " parts vs " + std::to_string(index_lists.size()) +
                          " index lists");
    }
    TensorT<T> out({dim});
    std::vector<char> hit(dim, 0);
    std::vector<int> inputs;
    inputs.reserve(parts.size());
    for (std::size_t q = 0; q < parts.size(); ++q) {
      require(parts[q], "scatter");
      if (parts[q].rank() != 1 || parts[q].size() != index_lists[q].size()) {
        throw ShapeError("scatter: part " + std::to_string(q) + " is " +
                         shape_string(parts[q].shape()) + ", index list has " +
                         std::to_string(index_lists[q].size()) + " entries");
      }
      inputs.push_back(parts[q].node());
      for (std::size_t j = 0; j < index_lists[q].size(); ++j) {
        const std::size_t at = index_lists[q][j];
        if (at >= dim || hit[at]) {
          throw ContractError("scatter: index " + std::to_string(at) +
                              " out of range or duplicated");
        }
        hit[at] = 1;
        out(at) = parts[q](j);
      }
    }
    for (std::size_t i = 0; i < dim; ++i) {
      if (!hit[i]) {
        throw ContractError("scatter: index " + std::to_string(i) +
                            " not covered");
      }
    }
    auto lists = index_lists;
    auto ins = inputs;
    return push(std::move(out), std::move(inputs),
                [ins, lists](const TensorT<T>& g, const TapeT&, Grads& grads) {
                  for (std::size_t q = 0; q < ins.size(); ++q) {
                    for (std::size_t j = 0; j < lists[q].size(); ++j) {
                      grads[ins[q]](j) += g(lists[q][j]);
                    }
                  }
                });
  }

  /// Gradients of a scalar loss node with respect to every node on the tape.
  Grads backward(const TensorT<T>& loss) const {
    require(loss, "backward");
    if (loss.size() != 1) {
      throw ContractError("backward: loss must be scalar, have " +
                          shape_string(loss.shape()));
    }
    Grads grads;
    grads.reserve(nodes_.size());
    for (const Node& n : nodes_) grads.emplace_back(n.value.shape());
    std::vector<char> touched(nodes_.size(), 0);
    const int root = loss.node();
    grads[root](0) = T{1};
    touched[root] = 1;
    for (int i = root; i >= 0; --i) {
      if (!touched[i] || !nodes_[i].backprop) continue;
      for (int in : nodes_[i].inputs) touched[in] = 1;
      nodes_[i].backprop(grads[i], *this, grads);
    }
    return grads;
  }

  static constexpr T kProbFloor() { return static_cast<T>(1e-12); }

 private:
  struct Node {
    TensorT<T> value;
    std::vector<int> inputs;
    std::function<void(const TensorT<T>&, const TapeT&, Grads&)> backprop;
  };

  template <typename ValueFn, typename GradFn>
  TensorT<T> elementwise(const TensorT<T>& a, const TensorT<T>& b,
                         const char* op, ValueFn value_fn, GradFn grad_fn) {
    require(a, op);
    require(b, op);
    if (!a.same_shape(b)) {
      throw ShapeError(std::string(op) + ": " + shape_string(a.shape()) +
                       " vs " + shape_string(b.shape()));
    }
    TensorT<T> out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out(i) = value_fn(a(i), b(i));
    const int ia = a.node(), ib = b.node();
    return push(std::move(out), {ia, ib},
                [ia, ib, grad_fn](const TensorT<T>& g, const TapeT&,
                                  Grads& grads) {
                  grad_fn(g, grads[ia], grads[ib]);
                });
  }

  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
  }

  static T floored(T x) { return std::max(x, kProbFloor()); }

  static void softmax_fill(const T* in, T* out, std::size_t n) {
    T mx = in[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
    T z{};
    for (std::size_t j = 0; j < n; ++j) {
      out[j] = std::exp(in[j] - mx);
      z += out[j];
    }
    for (std::size_t j = 0; j < n; ++j) out[j] /= z;
  }

  static void check_distribution(const TensorT<T>& p, const char* what) {
    T total{};
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p(i) < T{0}) {
        throw ContractError(std::string(what) + " has a negative entry");
      }
      total += p(i);
    }
    if (std::abs(total - T{1}) > static_cast<T>(1e-5)) {
      throw ContractError(std::string(what) + " does not sum to 1");
    }
  }

  void require(const TensorT<T>& t, const char* op) const {
    if (!t.on_tape() || t.tape_id() != id_ ||
        t.node() >= static_cast<int>(nodes_.size())) {
      throw ContractError(std::string(op) +
                          ": operand is not a value of this tape");
    }
  }

  TensorT<T> push(TensorT<T> value, std::vector<int> inputs,
                  std::function<void(const TensorT<T>&, const TapeT&, Grads&)>
                      backprop) {
    value.detach();
    const int node = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{std::move(value), std::move(inputs),
                          std::move(backprop)});
    TensorT<T> out = nodes_.back().value;
    out.attach(id_, node);
    return out;
  }

  std::uint64_t id_;
  std::vector<Node> nodes_;
};

using Tape = TapeT<float>;

}  // namespace dedn
