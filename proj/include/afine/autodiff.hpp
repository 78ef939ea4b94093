#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "afine/errors.hpp"
#include "afine/tensor.hpp"

// Reverse-mode automatic differentiation on a tape of Tensor-valued nodes.
// Every scoring and training computation in the library is expressed through
// these ops, so analytic gradients are available for any parameter subset.
// A tape built with track_gradients = false records values only, which is the
// inference path.

namespace afine {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape {
 public:
  explicit Tape(bool track_gradients = true) : track_(track_gradients) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool tracking() const { return track_; }

  Var leaf(Tensor value, bool requires_grad) {
    return push(std::move(value), requires_grad && track_, nullptr);
  }

  Var constant(Tensor value) { return push(std::move(value), false, nullptr); }
  Var constant(double v) { return constant(Tensor::scalar(v)); }

  const Tensor& value(Var v) const { return nodes_[check(v)].value; }
  const Tensor& grad(Var v) const { return nodes_[check(v)].grad; }
  bool requires_grad(Var v) const { return nodes_[check(v)].requires_grad; }

  // Propagates d(root)/d(node) into every node with requires_grad. The root
  // must be a scalar.
  void backward(Var root) {
    std::size_t r = check(root);
    if (nodes_[r].value.size() != 1) throw DimensionError("backward root must be scalar");
    if (!track_) throw NumericError("backward on a non-tracking tape");
    for (auto& n : nodes_)
      if (n.requires_grad) std::fill(n.grad.data.begin(), n.grad.data.end(), 0.0);
    if (!nodes_[r].requires_grad) return;  // constant graph
    nodes_[r].grad.data[0] = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;)
      if (nodes_[i].backprop) nodes_[i].backprop();
  }

  std::size_t node_count() const { return nodes_.size(); }

  // --- op construction helpers (used by the free-function ops below) ---

  Var make(Tensor value, std::initializer_list<Var> parents,
           std::function<void(Tape&, std::size_t)> backprop) {
    bool need = false;
    if (track_)
      for (Var p : parents) need = need || nodes_[check(p)].requires_grad;
    Var out = push(std::move(value), need, nullptr);
    if (need) {
      std::size_t id = static_cast<std::size_t>(out.id);
      nodes_[id].backprop = [this, id, fn = std::move(backprop)]() { fn(*this, id); };
    }
    return out;
  }

  Var make(Tensor value, const std::vector<Var>& parents,
           std::function<void(Tape&, std::size_t)> backprop) {
    bool need = false;
    if (track_)
      for (Var p : parents) need = need || nodes_[check(p)].requires_grad;
    Var out = push(std::move(value), need, nullptr);
    if (need) {
      std::size_t id = static_cast<std::size_t>(out.id);
      nodes_[id].backprop = [this, id, fn = std::move(backprop)]() { fn(*this, id); };
    }
    return out;
  }

  // Accumulation target for parent gradients; no-op tensor when the parent
  // does not require gradients (callers may still write into it).
  Tensor& grad_sink(Var v) {
    auto& n = nodes_[check(v)];
    if (n.grad.data.empty() && !n.value.data.empty())
      n.grad = Tensor(n.value.shape, 0.0);
    return n.grad;
  }

  bool wants_grad(Var v) const { return nodes_[check(v)].requires_grad; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::function<void()> backprop;
  };

  std::size_t check(Var v) const {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw DimensionError("invalid tape variable");
    return static_cast<std::size_t>(v.id);
  }

  Var push(Tensor value, bool requires_grad, std::function<void()> backprop) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.grad = Tensor(n.value.shape, 0.0);
    n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
  bool track_;
};

namespace ops {

inline const Tensor& val(Tape& t, Var v) { return t.value(v); }

// ---- elementwise ----

inline Var add(Tape& t, Var a, Var b) {
  const Tensor& ta = t.value(a);
  const Tensor& tb = t.value(b);
  if (!ta.same_shape(tb)) throw DimensionError("add: shape mismatch");
  Tensor out = ta;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += tb[i];
  return t.make(std::move(out), {a, b}, [a, b](Tape& t, std::size_t id) {
    const Tensor& g = t.grad(Var{(int)id});
    if (t.wants_grad(a)) {
      Tensor& ga = t.grad_sink(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.wants_grad(b)) {
      Tensor& gb = t.grad_sink(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

inline Var sub(Tape& t, Var a, Var b) {
  const Tensor& ta = t.value(a);
  const Tensor& tb = t.value(b);
  if (!ta.same_shape(tb)) throw DimensionError("sub: shape mismatch");
  Tensor out = ta;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= tb[i];
  return t.make(std::move(out), {a, b}, [a, b](Tape& t, std::size_t id) {
    const Tensor& g = t.grad(Var{(int)id});
    if (t.wants_grad(a)) {
      Tensor& ga = t.grad_sink(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.wants_grad(b)) {
      Tensor& gb = t.grad_sink(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Var mul(Tape& t, Var a, Var b) {
  const Tensor& ta = t.value(a);
  const Tensor& tb = t.value(b);
  if (!ta.same_shape(tb)) throw DimensionError("mul: shape mismatch");
  Tensor out = ta;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= tb[i];
  return t.make(std::move(out), {a, b}, [a, b](Tape& t, std::size_t id) {
    const Tensor& g = t.grad(Var{(int)id});
    const Tensor& va = t.value(a);
    const Tensor& vb = t.value(b);
    if (t.wants_grad(a)) {
      Tensor& ga = t.grad_sink(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
    }
    if (t.wants_grad(b)) {
      Tensor& gb = t.grad_sink(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
    }
  });
}

// a*x + b, elementwise with scalar coefficients.
inline Var axpb(Tape& t, Var x, double a, double b) {
  Tensor out = t.value(x);
  for (double& v : out.data) v = a * v + b;
  return t.make(std::move(out), {x}, [x, a](Tape& t, std::size_t id) {
    if (!t.wants_grad(x)) return;
    const Tensor& g = t.grad(Var{(int)id});
    Tensor& gx = t.grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += a * g[i];
  });
}

inline Var neg(Tape& t, Var x) { return axpb(t, x, -1.0, 0.0); }

inline Var exp_(Tape& t, Var x) {
  Tensor out = t.value(x);
  for (double& v : out.data) v = std::exp(v);
  return t.make(std::move(out), {x}, [x](Tape& t, std::size_t id) {
    if (!t.wants_grad(x)) return;
    const Tensor& g = t.grad(Var{(int)id});
    const Tensor& y = t.value(Var{(int)id});
    Tensor& gx = t.grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i];
  });
}

inline Var sqrt_(Tape& t, Var x) {
  Tensor out = t.value(x);
  for (double& v : out.data) v = std::sqrt(v);
  return t.make(std::move(out), {x}, [x](Tape& t, std::size_t id) {
    if (!t.wants_grad(x)) return;
    const Tensor& g = t.grad(Var{(int)id});
    const Tensor& y = t.value(Var{(int)id});
    Tensor& gx = t.grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * 0.5 / y[i];
  });
}

inline Var reciprocal(Tape& t, Var x) {
  Tensor out = t.value(x);
  for (double& v : out.data) v = 1.0 / v;
  return t.make(std::move(out), {x}, [x](Tape& t, std::size_t id) {
    if (!t.wants_grad(x)) return;
    const Tensor& g = t.grad(Var{(int)id});
    const Tensor& y = t.value(Var{(int)id});
    Tensor& gx = t.grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] -= g[i] * y[i] * y[i];
  });
}

inline Var abs_(Tape& t, Var x) {
  Tensor out = t.value(x);
  for (double& v : out.data) v = std::fabs(v);
  return t.make(std::move(out), {x}, [x](Tape& t, std::size_t id) {
    if (!t.wants_grad(x)) return;
    const Tensor& g = t.grad(Var{(int)id});
    const Tensor& vx = t.value(x);
    Tensor& gx = t.grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i)
      gx[i] += g[i] * (vx[i] > 0.0 ? 1.0 : (vx[i] < 0.0 ? -1.0 : 0.0));
  });
}

inline double normal_pdf(double x) {
  return std::exp(-0.5 * x * x) * 0.3989422804014326779;  // 1/sqrt(2*pi)
}

inline double normal_cdf_value(double x) { return 0.5 * std::erfc(-x * 0.7071067811865475244); }

inline Var normal_cdf(Tape& t, Var x) {
  Tensor out = t.value(x);
  for (double& v : out.data) v = normal_cdf_value(v);
  return t.make(std::move(out), {x}, [x](Tape& t, std::size_t id) {
    if (!t.wants_grad(x)) return;
    const Tensor& g = t.grad(Var{(int)id});
    const Tensor& vx = t.value(x);
    Tensor& gx = t.grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * normal_pdf(vx[i]);
  });
}

// Exact GELU, x * Phi(x).
inline Var gelu(Tape& t, Var x) {
  Tensor out = t.value(x);
  for (double& v : out.data) v = v * normal_cdf_value(v);
  return t.make(std::move(out), {x}, [x](Tape& t, std::size_t id) {
    if (!t.wants_grad(x)) return;
    const Tensor& g = t.grad(Var{(int)id});
    const Tensor& vx = t.value(x);
    Tensor& gx = t.grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      double v = vx[i];
      gx[i] += g[i] * (normal_cdf_value(v) + v * normal_pdf(v));
    }
  });
}

inline double softplus_value(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

inline Var softplus_(Tape& t, Var x) {
  Tensor out = t.value(x);
  for (double& v : out.data) v = softplus_value(v);
  return t.make(std::move(out), {x}, [x](Tape& t, std::size_t id) {
    if (!t.wants_grad(x)) return;
    const Tensor& g = t.grad(Var{(int)id});
    const Tensor& vx = t.value(x);
    Tensor& gx = t.grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / (1.0 + std::exp(-vx[i]));
  });
}

// ---- reductions and vector ops ----

inline Var sum_(Tape& t, Var x) {
  double s = 0.0;
  for (double v : t.value(x).data) s += v;
  return t.make(Tensor::scalar(s), {x}, [x](Tape& t, std::size_t id) {
    if (!t.wants_grad(x)) return;
    double g = t.grad(Var{(int)id})[0];
    Tensor& gx = t.grad_sink(x);
    for (double& v : gx.data) v += g;
  });
}

inline Var dot(Tape& t, Var a, Var b) {
  const Tensor& ta = t.value(a);
  const Tensor& tb = t.value(b);
  if (ta.size() != tb.size()) throw DimensionError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < ta.size(); ++i) s += ta[i] * tb[i];
  return t.make(Tensor::scalar(s), {a, b}, [a, b](Tape& t, std::size_t id) {
    double g = t.grad(Var{(int)id})[0];
    const Tensor& va = t.value(a);
    const Tensor& vb = t.value(b);
    if (t.wants_grad(a)) {
      Tensor& ga = t.grad_sink(a);
      for (std::size_t i = 0; i < va.size(); ++i) ga[i] += g * vb[i];
    }
    if (t.wants_grad(b)) {
      Tensor& gb = t.grad_sink(b);
      for (std::size_t i = 0; i < vb.size(); ++i) gb[i] += g * va[i];
    }
  });
}

inline Var sum_list(Tape& t, const std::vector<Var>& xs) {
  if (xs.empty()) throw DimensionError("sum_list: empty");
  double s = 0.0;
  for (Var x : xs) {
    if (t.value(x).size() != 1) throw DimensionError("sum_list: scalar inputs required");
    s += t.value(x)[0];
  }
  return t.make(Tensor::scalar(s), xs, [xs](Tape& t, std::size_t id) {
    double g = t.grad(Var{(int)id})[0];
    for (Var x : xs)
      if (t.wants_grad(x)) t.grad_sink(x)[0] += g;
  });
}

inline Var concat_vec(Tape& t, const std::vector<Var>& xs) {
  std::size_t n = 0;
  for (Var x : xs) n += t.value(x).size();
  Tensor out({n});
  std::size_t at = 0;
  for (Var x : xs) {
    const Tensor& v = t.value(x);
    std::copy(v.data.begin(), v.data.end(), out.data.begin() + at);
    at += v.size();
  }
  return t.make(std::move(out), xs, [xs](Tape& t, std::size_t id) {
    const Tensor& g = t.grad(Var{(int)id});
    std::size_t at = 0;
    for (Var x : xs) {
      std::size_t n = t.value(x).size();
      if (t.wants_grad(x)) {
        Tensor& gx = t.grad_sink(x);
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[at + i];
      }
      at += n;
    }
  });
}

inline Var slice_vec(Tape& t, Var x, std::size_t begin, std::size_t end) {
  const Tensor& v = t.value(x);
  if (end > v.size() || begin > end) throw DimensionError("slice_vec: bad range");
  Tensor out({end - begin});
  std::copy(v.data.begin() + begin, v.data.begin() + end, out.data.begin());
  return t.make(std::move(out), {x}, [x, begin](Tape& t, std::size_t id) {
    if (!t.wants_grad(x)) return;
    const Tensor& g = t.grad(Var{(int)id});
    Tensor& gx = t.grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[begin + i] += g[i];
  });
}

inline Var softmax_vec(Tape& t, Var x) {
  Tensor out = t.value(x);
  double mx = out[0];
  for (double v : out.data) mx = std::max(mx, v);
  double z = 0.0;
  for (double& v : out.data) {
    v = std::exp(v - mx);
    z += v;
  }
  for (double& v : out.data) v /= z;
  return t.make(std::move(out), {x}, [x](Tape& t, std::size_t id) {
    if (!t.wants_grad(x)) return;
    const Tensor& g = t.grad(Var{(int)id});
    const Tensor& y = t.value(Var{(int)id});
    double gy = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) gy += g[i] * y[i];
    Tensor& gx = t.grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += y[i] * (g[i] - gy);
  });
}

// ---- matrix ops (row-major [rows, cols]) ----

inline Var matmul(Tape& t, Var a, Var b) {
  const Tensor& ta = t.value(a);
  const Tensor& tb = t.value(b);
  if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0))
    throw DimensionError("matmul: shape mismatch");
  std::size_t m = ta.dim(0), k = ta.dim(1), n = tb.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      double av = ta[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * tb[p * n + j];
    }
  return t.make(std::move(out), {a, b}, [a, b, m, k, n](Tape& t, std::size_t id) {
    const Tensor& g = t.grad(Var{(int)id});
    const Tensor& va = t.value(a);
    const Tensor& vb = t.value(b);
    if (t.wants_grad(a)) {  // dA = G * B^T
      Tensor& ga = t.grad_sink(a);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          double gv = g[i * n + j];
          for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += gv * vb[p * n + j];
        }
    }
    if (t.wants_grad(b)) {  // dB = A^T * G
      Tensor& gb = t.grad_sink(b);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double av = va[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
        }
    }
  });
}

// A[m,k] * B[n,k]^T -> [m,n]; the natural layout for weight matrices stored
// as [out, in].
inline Var matmul_nt(Tape& t, Var a, Var b) {
  const Tensor& ta = t.value(a);
  const Tensor& tb = t.value(b);
  if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(1))
    throw DimensionError("matmul_nt: shape mismatch");
  std::size_t m = ta.dim(0), k = ta.dim(1), n = tb.dim(0);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ta[i * k + p] * tb[j * k + p];
      out[i * n + j] = s;
    }
  return t.make(std::move(out), {a, b}, [a, b, m, k, n](Tape& t, std::size_t id) {
    const Tensor& g = t.grad(Var{(int)id});
    const Tensor& va = t.value(a);
    const Tensor& vb = t.value(b);
    if (t.wants_grad(a)) {  // dA = G * B
      Tensor& ga = t.grad_sink(a);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          double gv = g[i * n + j];
          for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += gv * vb[j * k + p];
        }
    }
    if (t.wants_grad(b)) {  // dB = G^T * A
      Tensor& gb = t.grad_sink(b);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          double gv = g[i * n + j];
          for (std::size_t p = 0; p < k; ++p) gb[j * k + p] += gv * va[i * k + p];
        }
    }
  });
}

// y = W x + b for W [out, in], x [in], optional b [out].
inline Var linear(Tape& t, Var w, Var x, Var b = Var{}) {
  const Tensor& tw = t.value(w);
  const Tensor& tx = t.value(x);
  if (tw.rank() != 2 || tw.dim(1) != tx.size()) throw DimensionError("linear: shape mismatch");
  std::size_t out_n = tw.dim(0), in_n = tw.dim(1);
  Tensor out({out_n});
  for (std::size_t o = 0; o < out_n; ++o) {
    double s = 0.0;
    for (std::size_t i = 0; i < in_n; ++i) s += tw[o * in_n + i] * tx[i];
    out[o] = s;
  }
  if (b.valid()) {
    const Tensor& tb = t.value(b);
    if (tb.size() != out_n) throw DimensionError("linear: bias mismatch");
    for (std::size_t o = 0; o < out_n; ++o) out[o] += tb[o];
  }
  std::vector<Var> parents{w, x};
  if (b.valid()) parents.push_back(b);
  return t.make(std::move(out), parents, [w, x, b, out_n, in_n](Tape& t, std::size_t id) {
    const Tensor& g = t.grad(Var{(int)id});
    const Tensor& vw = t.value(w);
    const Tensor& vx = t.value(x);
    if (t.wants_grad(w)) {
      Tensor& gw = t.grad_sink(w);
      for (std::size_t o = 0; o < out_n; ++o)
        for (std::size_t i = 0; i < in_n; ++i) gw[o * in_n + i] += g[o] * vx[i];
    }
    if (t.wants_grad(x)) {
      Tensor& gx = t.grad_sink(x);
      for (std::size_t o = 0; o < out_n; ++o)
        for (std::size_t i = 0; i < in_n; ++i) gx[i] += g[o] * vw[o * in_n + i];
    }
    if (b.valid() && t.wants_grad(b)) {
      Tensor& gb = t.grad_sink(b);
      for (std::size_t o = 0; o < out_n; ++o) gb[o] += g[o];
    }
  });
}

inline Var softmax_rows(Tape& t, Var x) {
  const Tensor& tx = t.value(x);
  if (tx.rank() != 2) throw DimensionError("softmax_rows: matrix required");
  std::size_t r = tx.dim(0), c = tx.dim(1);
  Tensor out = tx;
  for (std::size_t i = 0; i < r; ++i) {
    double mx = out[i * c];
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, out[i * c + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      out[i * c + j] = std::exp(out[i * c + j] - mx);
      z += out[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
  }
  return t.make(std::move(out), {x}, [x, r, c](Tape& t, std::size_t id) {
    if (!t.wants_grad(x)) return;
    const Tensor& g = t.grad(Var{(int)id});
    const Tensor& y = t.value(Var{(int)id});
    Tensor& gx = t.grad_sink(x);
    for (std::size_t i = 0; i < r; ++i) {
      double gy = 0.0;
      for (std::size_t j = 0; j < c; ++j) gy += g[i * c + j] * y[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        gx[i * c + j] += y[i * c + j] * (g[i * c + j] - gy);
    }
  });
}

inline Var add_rowvec(Tape& t, Var x, Var v) {
  const Tensor& tx = t.value(x);
  const Tensor& tv = t.value(v);
  if (tx.rank() != 2 || tv.size() != tx.dim(1)) throw DimensionError("add_rowvec: shape mismatch");
  std::size_t r = tx.dim(0), c = tx.dim(1);
  Tensor out = tx;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += tv[j];
  return t.make(std::move(out), {x, v}, [x, v, r, c](Tape& t, std::size_t id) {
    const Tensor& g = t.grad(Var{(int)id});
    if (t.wants_grad(x)) {
      Tensor& gx = t.grad_sink(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.wants_grad(v)) {
      Tensor& gv = t.grad_sink(v);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gv[j] += g[i * c + j];
    }
  });
}

inline Var slice_rows(Tape& t, Var x, std::size_t r0, std::size_t r1) {
  const Tensor& tx = t.value(x);
  if (tx.rank() != 2 || r1 > tx.dim(0) || r0 > r1) throw DimensionError("slice_rows: bad range");
  std::size_t c = tx.dim(1);
  Tensor out({r1 - r0, c});
  std::copy(tx.data.begin() + r0 * c, tx.data.begin() + r1 * c, out.data.begin());
  return t.make(std::move(out), {x}, [x, r0, c](Tape& t, std::size_t id) {
    if (!t.wants_grad(x)) return;
    const Tensor& g = t.grad(Var{(int)id});
    Tensor& gx = t.grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[r0 * c + i] += g[i];
  });
}

inline Var slice_cols(Tape& t, Var x, std::size_t c0, std::size_t c1) {
  const Tensor& tx = t.value(x);
  if (tx.rank() != 2 || c1 > tx.dim(1) || c0 > c1) throw DimensionError("slice_cols: bad range");
  std::size_t r = tx.dim(0), c = tx.dim(1), w = c1 - c0;
  Tensor out({r, w});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = tx[i * c + c0 + j];
  return t.make(std::move(out), {x}, [x, r, c, c0, w](Tape& t, std::size_t id) {
    if (!t.wants_grad(x)) return;
    const Tensor& g = t.grad(Var{(int)id});
    Tensor& gx = t.grad_sink(x);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) gx[i * c + c0 + j] += g[i * w + j];
  });
}

inline Var concat_cols(Tape& t, const std::vector<Var>& xs) {
  if (xs.empty()) throw DimensionError("concat_cols: empty");
  std::size_t r = t.value(xs[0]).dim(0), c = 0;
  for (Var x : xs) {
    const Tensor& v = t.value(x);
    if (v.rank() != 2 || v.dim(0) != r) throw DimensionError("concat_cols: row mismatch");
    c += v.dim(1);
  }
  Tensor out({r, c});
  std::size_t at = 0;
  for (Var x : xs) {
    const Tensor& v = t.value(x);
    std::size_t w = v.dim(1);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * c + at + j] = v[i * w + j];
    at += w;
  }
  return t.make(std::move(out), xs, [xs, r, c](Tape& t, std::size_t id) {
    const Tensor& g = t.grad(Var{(int)id});
    std::size_t at = 0;
    for (Var x : xs) {
      std::size_t w = t.value(x).dim(1);
      if (t.wants_grad(x)) {
        Tensor& gx = t.grad_sink(x);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < w; ++j) gx[i * w + j] += g[i * c + at + j];
      }
      at += w;
    }
  });
}

inline Var concat_rows(Tape& t, const std::vector<Var>& xs) {
  if (xs.empty()) throw DimensionError("concat_rows: empty");
  std::size_t c = t.value(xs[0]).dim(1), r = 0;
  for (Var x : xs) {
    const Tensor& v = t.value(x);
    if (v.rank() != 2 || v.dim(1) != c) throw DimensionError("concat_rows: col mismatch");
    r += v.dim(0);
  }
  Tensor out({r, c});
  std::size_t at = 0;
  for (Var x : xs) {
    const Tensor& v = t.value(x);
    std::copy(v.data.begin(), v.data.end(), out.data.begin() + at);
    at += v.size();
  }
  return t.make(std::move(out), xs, [xs](Tape& t, std::size_t id) {
    const Tensor& g = t.grad(Var{(int)id});
    std::size_t at = 0;
    for (Var x : xs) {
      std::size_t n = t.value(x).size();
      if (t.wants_grad(x)) {
        Tensor& gx = t.grad_sink(x);
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[at + i];
      }
      at += n;
    }
  });
}

inline Var reshape(Tape& t, Var x, std::vector<std::size_t> shape) {
  const Tensor& tx = t.value(x);
  if (Tensor::numel(shape) != tx.size()) throw DimensionError("reshape: numel mismatch");
  Tensor out;
  out.shape = std::move(shape);
  out.data = tx.data;
  return t.make(std::move(out), {x}, [x](Tape& t, std::size_t id) {
    if (!t.wants_grad(x)) return;
    const Tensor& g = t.grad(Var{(int)id});
    Tensor& gx = t.grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

inline Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double eps = 1e-5) {
  const Tensor& tx = t.value(x);
  if (tx.rank() != 2) throw DimensionError("layer_norm: matrix required");
  std::size_t r = tx.dim(0), c = tx.dim(1);
  if (t.value(gamma).size() != c || t.value(beta).size() != c)
    throw DimensionError("layer_norm: affine param mismatch");
  const Tensor& g_ = t.value(gamma);
  const Tensor& b_ = t.value(beta);
  Tensor out({r, c});
  for (std::size_t i = 0; i < r; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += tx[i * c + j];
    mu /= double(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      double d = tx[i * c + j] - mu;
      var += d * d;
    }
    var /= double(c);
    double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j)
      out[i * c + j] = (tx[i * c + j] - mu) * inv * g_[j] + b_[j];
  }
  return t.make(std::move(out), {x, gamma, beta},
                [x, gamma, beta, r, c, eps](Tape& t, std::size_t id) {
    const Tensor& g = t.grad(Var{(int)id});
    const Tensor& vx = t.value(x);
    const Tensor& vg = t.value(gamma);
    for (std::size_t i = 0; i < r; ++i) {
      double mu = 0.0;
      for (std::size_t j = 0; j < c; ++j) mu += vx[i * c + j];
      mu /= double(c);
      double var = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        double d = vx[i * c + j] - mu;
        var += d * d;
      }
      var /= double(c);
      double inv = 1.0 / std::sqrt(var + eps);
      double m1 = 0.0, m2 = 0.0;  // mean(g*gamma), mean(g*gamma*xhat)
      for (std::size_t j = 0; j < c; ++j) {
        double xh = (vx[i * c + j] - mu) * inv;
        double gg = g[i * c + j] * vg[j];
        m1 += gg;
        m2 += gg * xh;
      }
      m1 /= double(c);
      m2 /= double(c);
      if (t.wants_grad(x)) {
        Tensor& gx = t.grad_sink(x);
        for (std::size_t j = 0; j < c; ++j) {
          double xh = (vx[i * c + j] - mu) * inv;
          double gg = g[i * c + j] * vg[j];
          gx[i * c + j] += (gg - m1 - xh * m2) * inv;
        }
      }
      if (t.wants_grad(gamma)) {
        Tensor& gga = t.grad_sink(gamma);
        for (std::size_t j = 0; j < c; ++j)
          gga[j] += g[i * c + j] * (vx[i * c + j] - mu) * inv;
      }
      if (t.wants_grad(beta)) {
        Tensor& gb = t.grad_sink(beta);
        for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
      }
    }
  });
}

// ---- spatial ops on [C, H, W] maps ----

inline Var conv2d(Tape& t, Var x, Var w, Var b, int stride, int pad) {
  const Tensor& tx = t.value(x);
  const Tensor& tw = t.value(w);
  if (tx.rank() != 3 || tw.rank() != 4 || tw.dim(1) != tx.dim(0))
    throw DimensionError("conv2d: shape mismatch");
  std::size_t C = tx.dim(0), H = tx.dim(1), W = tx.dim(2);
  std::size_t O = tw.dim(0), KH = tw.dim(2), KW = tw.dim(3);
  if (H + 2 * pad < KH || W + 2 * pad < KW) throw DimensionError("conv2d: input smaller than kernel");
  std::size_t OH = (H + 2 * pad - KH) / stride + 1;
  std::size_t OW = (W + 2 * pad - KW) / stride + 1;
  const Tensor* tb = b.valid() ? &t.value(b) : nullptr;
  if (tb && tb->size() != O) throw DimensionError("conv2d: bias mismatch");
  Tensor out({O, OH, OW});
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t oh = 0; oh < OH; ++oh)
      for (std::size_t ow = 0; ow < OW; ++ow) {
        double s = tb ? (*tb)[o] : 0.0;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t kh = 0; kh < KH; ++kh) {
            long ih = long(oh) * stride - pad + long(kh);
            if (ih < 0 || ih >= long(H)) continue;
            for (std::size_t kw = 0; kw < KW; ++kw) {
              long iw = long(ow) * stride - pad + long(kw);
              if (iw < 0 || iw >= long(W)) continue;
              s += tx[(c * H + ih) * W + iw] * tw[((o * C + c) * KH + kh) * KW + kw];
            }
          }
        out[(o * OH + oh) * OW + ow] = s;
      }
  std::vector<Var> parents{x, w};
  if (b.valid()) parents.push_back(b);
  return t.make(std::move(out), parents,
                [x, w, b, C, H, W, O, KH, KW, OH, OW, stride, pad](Tape& t, std::size_t id) {
    const Tensor& g = t.grad(Var{(int)id});
    const Tensor& vx = t.value(x);
    const Tensor& vw = t.value(w);
    bool gx_on = t.wants_grad(x), gw_on = t.wants_grad(w);
    bool gb_on = b.valid() && t.wants_grad(b);
    Tensor* gx = gx_on ? &t.grad_sink(x) : nullptr;
    Tensor* gw = gw_on ? &t.grad_sink(w) : nullptr;
    Tensor* gb = gb_on ? &t.grad_sink(b) : nullptr;
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t oh = 0; oh < OH; ++oh)
        for (std::size_t ow = 0; ow < OW; ++ow) {
          double gv = g[(o * OH + oh) * OW + ow];
          if (gv == 0.0) continue;
          if (gb_on) (*gb)[o] += gv;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t kh = 0; kh < KH; ++kh) {
              long ih = long(oh) * stride - pad + long(kh);
              if (ih < 0 || ih >= long(H)) continue;
              for (std::size_t kw = 0; kw < KW; ++kw) {
                long iw = long(ow) * stride - pad + long(kw);
                if (iw < 0 || iw >= long(W)) continue;
                std::size_t xi = (c * H + ih) * W + iw;
                std::size_t wi = ((o * C + c) * KH + kh) * KW + kw;
                if (gw_on) (*gw)[wi] += gv * vx[xi];
                if (gx_on) (*gx)[xi] += gv * vw[wi];
              }
            }
        }
  });
}

inline Var spatial_mean(Tape& t, Var x) {
  const Tensor& tx = t.value(x);
  if (tx.rank() != 3) throw DimensionError("spatial_mean: [C,H,W] required");
  std::size_t C = tx.dim(0), HW = tx.dim(1) * tx.dim(2);
  if (HW == 0) throw DimensionError("spatial_mean: empty grid");
  Tensor out({C});
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < HW; ++i) s += tx[c * HW + i];
    out[c] = s / double(HW);
  }
  return t.make(std::move(out), {x}, [x, C, HW](Tape& t, std::size_t id) {
    if (!t.wants_grad(x)) return;
    const Tensor& g = t.grad(Var{(int)id});
    Tensor& gx = t.grad_sink(x);
    for (std::size_t c = 0; c < C; ++c) {
      double gv = g[c] / double(HW);
      for (std::size_t i = 0; i < HW; ++i) gx[c * HW + i] += gv;
    }
  });
}

// x[C,H,W] - m[C] broadcast over the spatial grid.
inline Var sub_channel(Tape& t, Var x, Var m) {
  const Tensor& tx = t.value(x);
  const Tensor& tm = t.value(m);
  if (tx.rank() != 3 || tm.size() != tx.dim(0)) throw DimensionError("sub_channel: shape mismatch");
  std::size_t C = tx.dim(0), HW = tx.dim(1) * tx.dim(2);
  Tensor out = tx;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < HW; ++i) out[c * HW + i] -= tm[c];
  return t.make(std::move(out), {x, m}, [x, m, C, HW](Tape& t, std::size_t id) {
    const Tensor& g = t.grad(Var{(int)id});
    if (t.wants_grad(x)) {
      Tensor& gx = t.grad_sink(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.wants_grad(m)) {
      Tensor& gm = t.grad_sink(m);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < HW; ++i) gm[c] -= g[c * HW + i];
    }
  });
}

// Tokens [T, d] <-> grid [d, gh, gw] movement for transformer stages.
inline Var tokens_to_grid(Tape& t, Var x, std::size_t gh, std::size_t gw) {
  const Tensor& tx = t.value(x);
  if (tx.rank() != 2 || tx.dim(0) != gh * gw) throw DimensionError("tokens_to_grid: shape mismatch");
  std::size_t d = tx.dim(1);
  Tensor out({d, gh, gw});
  for (std::size_t tk = 0; tk < gh * gw; ++tk)
    for (std::size_t c = 0; c < d; ++c) out[c * gh * gw + tk] = tx[tk * d + c];
  return t.make(std::move(out), {x}, [x, gh, gw, d](Tape& t, std::size_t id) {
    if (!t.wants_grad(x)) return;
    const Tensor& g = t.grad(Var{(int)id});
    Tensor& gx = t.grad_sink(x);
    for (std::size_t tk = 0; tk < gh * gw; ++tk)
      for (std::size_t c = 0; c < d; ++c) gx[tk * d + c] += g[c * gh * gw + tk];
  });
}

inline Var grid_to_tokens(Tape& t, Var x) {
  const Tensor& tx = t.value(x);
  if (tx.rank() != 3) throw DimensionError("grid_to_tokens: [C,H,W] required");
  std::size_t d = tx.dim(0), hw = tx.dim(1) * tx.dim(2);
  Tensor out({hw, d});
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t tk = 0; tk < hw; ++tk) out[tk * d + c] = tx[c * hw + tk];
  return t.make(std::move(out), {x}, [x, d, hw](Tape& t, std::size_t id) {
    if (!t.wants_grad(x)) return;
    const Tensor& g = t.grad(Var{(int)id});
    Tensor& gx = t.grad_sink(x);
    for (std::size_t c = 0; c < d; ++c)
      for (std::size_t tk = 0; tk < hw; ++tk) gx[c * hw + tk] += g[tk * d + c];
  });
}

// Corner-aligned bilinear interpolation of a [h, w, d] grid of vectors to
// [H, W, d]. Corners map exactly onto corners; identity when sizes match.
inline Var interp_grid_bilinear(Tape& t, Var g_, std::size_t H, std::size_t W) {
  const Tensor& tg = t.value(g_);
  if (tg.rank() != 3) throw DimensionError("interp_grid: [h,w,d] required");
  std::size_t h = tg.dim(0), w = tg.dim(1), d = tg.dim(2);
  if (h < 2 || w < 2) throw DimensionError("interp_grid: source grid must be at least 2x2");
  if (H < 1 || W < 1) throw DimensionError("interp_grid: target must be at least 1x1");
  auto src_coord = [](std::size_t i, std::size_t n, std::size_t m) {
    return m == 1 ? 0.0 : double(i) * double(n - 1) / double(m - 1);
  };
  Tensor out({H, W, d});
  for (std::size_t i = 0; i < H; ++i) {
    double fy = src_coord(i, h, H);
    std::size_t y0 = std::min<std::size_t>(std::size_t(fy), h - 2);
    double ay = fy - double(y0);
    for (std::size_t j = 0; j < W; ++j) {
      double fx = src_coord(j, w, W);
      std::size_t x0 = std::min<std::size_t>(std::size_t(fx), w - 2);
      double ax = fx - double(x0);
      double w00 = (1 - ay) * (1 - ax), w01 = (1 - ay) * ax;
      double w10 = ay * (1 - ax), w11 = ay * ax;
      for (std::size_t k = 0; k < d; ++k) {
        out[(i * W + j) * d + k] = w00 * tg[(y0 * w + x0) * d + k] +
                                   w01 * tg[(y0 * w + x0 + 1) * d + k] +
                                   w10 * tg[((y0 + 1) * w + x0) * d + k] +
                                   w11 * tg[((y0 + 1) * w + x0 + 1) * d + k];
      }
    }
  }
  return t.make(std::move(out), {g_}, [g_, h, w, d, H, W](Tape& t, std::size_t id) {
    if (!t.wants_grad(g_)) return;
    const Tensor& g = t.grad(Var{(int)id});
    Tensor& gg = t.grad_sink(g_);
    auto src_coord = [](std::size_t i, std::size_t n, std::size_t m) {
      return m == 1 ? 0.0 : double(i) * double(n - 1) / double(m - 1);
    };
    for (std::size_t i = 0; i < H; ++i) {
      double fy = src_coord(i, h, H);
      std::size_t y0 = std::min<std::size_t>(std::size_t(fy), h - 2);
      double ay = fy - double(y0);
      for (std::size_t j = 0; j < W; ++j) {
        double fx = src_coord(j, w, W);
        std::size_t x0 = std::min<std::size_t>(std::size_t(fx), w - 2);
        double ax = fx - double(x0);
        double w00 = (1 - ay) * (1 - ax), w01 = (1 - ay) * ax;
        double w10 = ay * (1 - ax), w11 = ay * ax;
        for (std::size_t k = 0; k < d; ++k) {
          double gv = g[(i * W + j) * d + k];
          gg[(y0 * w + x0) * d + k] += w00 * gv;
          gg[(y0 * w + x0 + 1) * d + k] += w01 * gv;
          gg[((y0 + 1) * w + x0) * d + k] += w10 * gv;
          gg[((y0 + 1) * w + x0 + 1) * d + k] += w11 * gv;
        }
      }
    }
  });
}

}  // namespace ops
}  // namespace afine
