#pragma once

#include <cassert>
#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "gilab/tensor.hpp"

namespace gilab {

// Reverse-mode autodiff over a define-by-run tape. Values are computed
// eagerly at node creation; backward() walks the tape in reverse.
//
// Broadcasting is limited to leading expansion: the right operand's shape
// must equal a suffix of the left operand's shape. Anything else needs an
// explicit reshape/concat.

template <typename T> class Graph;

template <typename T> struct Var {
  Graph<T> *graph = nullptr;
  int id = -1;
  bool valid() const { return graph != nullptr && id >= 0; }
};

enum class MatmulKernel { fast, seq };

template <typename T> class Graph {
public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad; // allocated during backward when requires_grad
    bool requires_grad = false;
    std::function<void(Graph &, int)> backward;
  };

  Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
    return make(std::move(value), requires_grad, nullptr);
  }

  Var<T> constant(Tensor<T> value) { return make(std::move(value), false, nullptr); }

  const Tensor<T> &value(Var<T> v) const { return nodes_[std::size_t(v.id)].value; }
  const Tensor<T> &grad(Var<T> v) const {
    const Node &n = nodes_[std::size_t(v.id)];
    require(n.requires_grad && n.grad.size() > 0, "gradient not available; run backward() first");
    return n.grad;
  }
  bool requires_grad(Var<T> v) const { return nodes_[std::size_t(v.id)].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  void backward(Var<T> root) {
    Node &r = nodes_[std::size_t(root.id)];
    require(r.value.size() == 1, "backward root must be scalar, got shape ",
            shape_str(r.value.shape));
    for (Node &n : nodes_)
      if (n.requires_grad)
        n.grad = Tensor<T>::zeros(n.value.shape);
    require(r.requires_grad, "backward root does not depend on any tracked leaf");
    r.grad[0] = T(1);
    for (int i = int(nodes_.size()) - 1; i >= 0; --i) {
      Node &n = nodes_[std::size_t(i)];
      if (n.requires_grad && n.backward)
        n.backward(*this, i);
    }
#ifndef NDEBUG
    for (const Node &n : nodes_)
      if (n.requires_grad)
        assert(n.grad.all_finite() && "non-finite gradient");
#endif
  }

  // --- construction helpers used by the op functions below ---------------

  Var<T> make(Tensor<T> value, bool requires_grad, std::function<void(Graph &, int)> bw) {
#ifndef NDEBUG
    assert(value.all_finite() && "non-finite forward value");
#endif
    nodes_.push_back(Node{std::move(value), Tensor<T>{}, requires_grad, std::move(bw)});
    return Var<T>{this, int(nodes_.size()) - 1};
  }

  Node &node(int id) { return nodes_[std::size_t(id)]; }

private:
  std::vector<Node> nodes_;
};

namespace ad {

// rhs shape must equal a suffix of lhs shape; returns repeat count.
template <typename T>
std::int64_t broadcast_repeats(const Tensor<T> &a, const Tensor<T> &b, const char *opname) {
  require(b.rank() <= a.rank(), opname, ": shape mismatch ", shape_str(a.shape), " vs ",
          shape_str(b.shape));
  const int off = a.rank() - b.rank();
  for (int i = 0; i < b.rank(); ++i)
    require(a.shape[std::size_t(i + off)] == b.shape[std::size_t(i)], opname,
            ": shape mismatch ", shape_str(a.shape), " vs ", shape_str(b.shape));
  return b.size() ? a.size() / b.size() : 0;
}

// Sum `g` (shaped like lhs) down to rhs shape by folding leading repeats.
template <typename T>
void reduce_to(const Tensor<T> &g, Tensor<T> &target) {
  const std::int64_t bs = target.size();
  for (std::int64_t i = 0; i < g.size(); ++i)
    target[i % bs] += g[i];
}

template <typename T, typename FwdFn, typename DaFn, typename DbFn>
Var<T> binary_broadcast(Var<T> a, Var<T> b, const char *name, FwdFn fwd, DaFn da, DbFn db) {
  Graph<T> &g = *a.graph;
  const Tensor<T> &av = g.value(a), &bv = g.value(b);
  broadcast_repeats(av, bv, name);
  Tensor<T> out(av.shape);
  const std::int64_t bs = bv.size();
  if (bs == av.size()) {
    for (std::int64_t i = 0; i < av.size(); ++i)
      out[i] = fwd(av[i], bv[i]);
  } else {
    for (std::int64_t base = 0; base < av.size(); base += bs)
      for (std::int64_t i = 0; i < bs; ++i)
        out[base + i] = fwd(av[base + i], bv[i]);
  }
  const bool rg = g.requires_grad(a) || g.requires_grad(b);
  return g.make(std::move(out), rg, [=](Graph<T> &gr, int id) {
    auto &n = gr.node(id);
    const Tensor<T> &go = n.grad;
    const Tensor<T> &va = gr.value(a), &vb = gr.value(b);
    const std::int64_t m = vb.size();
    if (gr.requires_grad(a)) {
      auto &ga = gr.node(a.id).grad;
      if (m == go.size()) {
        for (std::int64_t i = 0; i < go.size(); ++i)
          ga[i] += go[i] * da(va[i], vb[i]);
      } else {
        for (std::int64_t base = 0; base < go.size(); base += m)
          for (std::int64_t i = 0; i < m; ++i)
            ga[base + i] += go[base + i] * da(va[base + i], vb[i]);
      }
    }
    if (gr.requires_grad(b)) {
      auto &gb = gr.node(b.id).grad;
      if (m == go.size()) {
        for (std::int64_t i = 0; i < go.size(); ++i)
          gb[i] += go[i] * db(va[i], vb[i]);
      } else {
        for (std::int64_t base = 0; base < go.size(); base += m)
          for (std::int64_t i = 0; i < m; ++i)
            gb[i] += go[base + i] * db(va[base + i], vb[i]);
      }
    }
  });
}

} // namespace ad

template <typename T> Var<T> add(Var<T> a, Var<T> b) {
  return ad::binary_broadcast<T>(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T> Var<T> sub(Var<T> a, Var<T> b) {
  return ad::binary_broadcast<T>(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T> Var<T> mul(Var<T> a, Var<T> b) {
  return ad::binary_broadcast<T>(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T> Var<T> div(Var<T> a, Var<T> b) {
  return ad::binary_broadcast<T>(
      a, b, "div", [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

template <typename T> Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <typename T> Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <typename T> Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }
template <typename T> Var<T> operator/(Var<T> a, Var<T> b) { return div(a, b); }

template <typename T, typename FwdFn, typename DerFn>
Var<T> unary_op(Var<T> a, FwdFn fwd, DerFn der) {
  Graph<T> &g = *a.graph;
  const Tensor<T> &av = g.value(a);
  Tensor<T> out(av.shape);
  for (std::int64_t i = 0; i < av.size(); ++i)
    out[i] = fwd(av[i]);
  return g.make(std::move(out), g.requires_grad(a), [=](Graph<T> &gr, int id) {
    if (!gr.requires_grad(a))
      return;
    const Tensor<T> &go = gr.node(id).grad;
    const Tensor<T> &ov = gr.node(id).value;
    const Tensor<T> &va = gr.value(a);
    auto &ga = gr.node(a.id).grad;
    for (std::int64_t i = 0; i < go.size(); ++i)
      ga[i] += go[i] * der(va[i], ov[i]);
  });
}

template <typename T> Var<T> scale(Var<T> a, T c) {
  return unary_op(a, [c](T x) { return c * x; }, [c](T, T) { return c; });
}

template <typename T> Var<T> add_scalar(Var<T> a, T c) {
  return unary_op(a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

namespace ad {
template <typename T> using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T> using ArrCMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;
} // namespace ad

template <typename T> Var<T> exp(Var<T> a) {
  Graph<T> &g = *a.graph;
  const Tensor<T> &av = g.value(a);
  Tensor<T> out(av.shape);
  ad::ArrMap<T>(out.data.data(), out.size()) =
      ad::ArrCMap<T>(av.data.data(), av.size()).exp();
  return g.make(std::move(out), g.requires_grad(a), [=](Graph<T> &gr, int id) {
    if (!gr.requires_grad(a))
      return;
    const Tensor<T> &go = gr.node(id).grad;
    const Tensor<T> &ov = gr.node(id).value;
    auto &ga = gr.node(a.id).grad;
    ad::ArrMap<T>(ga.data.data(), ga.size()) +=
        ad::ArrCMap<T>(go.data.data(), go.size()) *
        ad::ArrCMap<T>(ov.data.data(), ov.size());
  });
}

template <typename T> Var<T> sqrt(Var<T> a) {
  return unary_op(a, [](T x) { return std::sqrt(x); },
                  [](T, T y) { return T(0.5) / y; });
}

template <typename T> Var<T> pow(Var<T> a, T p) {
  return unary_op(a, [p](T x) { return std::pow(x, p); },
                  [p](T x, T) { return p * std::pow(x, p - T(1)); });
}

template <typename T> Var<T> sigmoid(Var<T> a) {
  Graph<T> &g = *a.graph;
  const Tensor<T> &av = g.value(a);
  Tensor<T> out(av.shape);
  // exp(-x) overflowing to inf drives the quotient to the correct 0 limit.
  ad::ArrMap<T>(out.data.data(), out.size()) =
      (T(1) + (-ad::ArrCMap<T>(av.data.data(), av.size())).exp()).inverse();
  return g.make(std::move(out), g.requires_grad(a), [=](Graph<T> &gr, int id) {
    if (!gr.requires_grad(a))
      return;
    const Tensor<T> &go = gr.node(id).grad;
    const Tensor<T> &ov = gr.node(id).value;
    auto &ga = gr.node(a.id).grad;
    ad::ArrCMap<T> s(ov.data.data(), ov.size());
    ad::ArrMap<T>(ga.data.data(), ga.size()) +=
        ad::ArrCMap<T>(go.data.data(), go.size()) * s * (T(1) - s);
  });
}

// Tanh-form GELU: 0.5 x (1 + tanh(c (x + 0.044715 x^3))), c = sqrt(2/pi).
template <typename T> Var<T> gelu(Var<T> a) {
  constexpr double kC = 0.79788456080286535588;
  constexpr double kA = 0.044715;
  Graph<T> &g = *a.graph;
  const Tensor<T> &av = g.value(a);
  Tensor<T> out(av.shape);
  Tensor<T> tanh_u(av.shape);
  {
    ad::ArrCMap<T> x(av.data.data(), av.size());
    ad::ArrMap<T> t(tanh_u.data.data(), tanh_u.size());
    t = (T(kC) * (x + T(kA) * x.cube())).tanh();
    ad::ArrMap<T>(out.data.data(), out.size()) = T(0.5) * x * (T(1) + t);
  }
  auto tu = std::make_shared<Tensor<T>>(std::move(tanh_u));
  return g.make(std::move(out), g.requires_grad(a), [=](Graph<T> &gr, int id) {
    if (!gr.requires_grad(a))
      return;
    const Tensor<T> &go = gr.node(id).grad;
    const Tensor<T> &av2 = gr.value(a);
    auto &ga = gr.node(a.id).grad;
    ad::ArrCMap<T> x(av2.data.data(), av2.size());
    ad::ArrCMap<T> t(tu->data.data(), tu->size());
    ad::ArrMap<T>(ga.data.data(), ga.size()) +=
        ad::ArrCMap<T>(go.data.data(), go.size()) *
        (T(0.5) * (T(1) + t) +
         T(0.5) * x * (T(1) - t.square()) * T(kC) * (T(1) + T(3 * kA) * x.square()));
  });
}

template <typename T> Var<T> matmul(Var<T> a, Var<T> b, MatmulKernel kernel = MatmulKernel::fast) {
  Graph<T> &g = *a.graph;
  const Tensor<T> &av = g.value(a), &bv = g.value(b);
  require(av.rank() == 2 && bv.rank() == 2 && av.shape[1] == bv.shape[0],
          "matmul: incompatible shapes ", shape_str(av.shape), " vs ", shape_str(bv.shape));
  const std::int64_t m = av.shape[0], k = av.shape[1], n = bv.shape[1];
  Tensor<T> out({m, n});
  if (kernel == MatmulKernel::seq)
    gemm_seq(av.data.data(), bv.data.data(), out.data.data(), m, k, n);
  else
    gemm(av.data.data(), bv.data.data(), out.data.data(), m, k, n);
  const bool rg = g.requires_grad(a) || g.requires_grad(b);
  return g.make(std::move(out), rg, [=](Graph<T> &gr, int id) {
    const Tensor<T> &go = gr.node(id).grad;
    EigenMatCMap<T> mgo(go.data.data(), m, n);
    if (gr.requires_grad(a)) {
      EigenMatCMap<T> mb(gr.value(b).data.data(), k, n);
      EigenMatMap<T> mga(gr.node(a.id).grad.data.data(), m, k);
      mga.noalias() += mgo * mb.transpose();
    }
    if (gr.requires_grad(b)) {
      EigenMatCMap<T> ma(gr.value(a).data.data(), m, k);
      EigenMatMap<T> mgb(gr.node(b.id).grad.data.data(), k, n);
      mgb.noalias() += ma.transpose() * mgo;
    }
  });
}

template <typename T> Var<T> reshape(Var<T> a, Shape shape) {
  Graph<T> &g = *a.graph;
  const Tensor<T> &av = g.value(a);
  require(shape_numel(shape) == av.size(), "reshape: size mismatch ", shape_str(av.shape),
          " -> ", shape_str(shape));
  Tensor<T> out(shape, av.data);
  return g.make(std::move(out), g.requires_grad(a), [=](Graph<T> &gr, int id) {
    if (!gr.requires_grad(a))
      return;
    const Tensor<T> &go = gr.node(id).grad;
    auto &ga = gr.node(a.id).grad;
    for (std::int64_t i = 0; i < go.size(); ++i)
      ga[i] += go[i];
  });
}

template <typename T> Var<T> transpose(Var<T> a) {
  Graph<T> &g = *a.graph;
  const Tensor<T> &av = g.value(a);
  require(av.rank() == 2, "transpose: rank-2 tensor required, got ", shape_str(av.shape));
  const std::int64_t m = av.shape[0], n = av.shape[1];
  Tensor<T> out({n, m});
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j)
      out.at(j, i) = av.at(i, j);
  return g.make(std::move(out), g.requires_grad(a), [=](Graph<T> &gr, int id) {
    if (!gr.requires_grad(a))
      return;
    const Tensor<T> &go = gr.node(id).grad;
    auto &ga = gr.node(a.id).grad;
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j)
        ga[std::size_t(i * n + j)] += go[std::size_t(j * m + i)];
  });
}

template <typename T> Var<T> concat(const std::vector<Var<T>> &parts, int axis) {
  require(!parts.empty(), "concat: no inputs");
  Graph<T> &g = *parts[0].graph;
  const Tensor<T> &first = g.value(parts[0]);
  const int rank = first.rank();
  require(axis >= 0 && axis < rank, "concat: bad axis ", axis);
  Shape out_shape = first.shape;
  std::int64_t axis_total = 0;
  for (const auto &p : parts) {
    const Tensor<T> &v = g.value(p);
    require(v.rank() == rank, "concat: rank mismatch");
    for (int i = 0; i < rank; ++i)
      require(i == axis || v.shape[std::size_t(i)] == first.shape[std::size_t(i)],
              "concat: shape mismatch ", shape_str(v.shape), " vs ", shape_str(first.shape));
    axis_total += v.shape[std::size_t(axis)];
  }
  out_shape[std::size_t(axis)] = axis_total;

  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i)
    outer *= first.shape[std::size_t(i)];
  for (int i = axis + 1; i < rank; ++i)
    inner *= first.shape[std::size_t(i)];

  Tensor<T> out(out_shape);
  const std::int64_t out_stride = axis_total * inner;
  std::int64_t offset = 0;
  bool rg = false;
  for (const auto &p : parts) {
    const Tensor<T> &v = g.value(p);
    const std::int64_t chunk = v.shape[std::size_t(axis)] * inner;
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(v.data.data() + o * chunk, chunk, out.data.data() + o * out_stride + offset);
    offset += chunk;
    rg = rg || g.requires_grad(p);
  }
  std::vector<Var<T>> captured = parts;
  return g.make(std::move(out), rg, [=](Graph<T> &gr, int id) {
    const Tensor<T> &go = gr.node(id).grad;
    std::int64_t off = 0;
    for (const auto &p : captured) {
      const Tensor<T> &v = gr.value(p);
      const std::int64_t chunk = v.shape[std::size_t(axis)] * inner;
      if (gr.requires_grad(p)) {
        auto &gp = gr.node(p.id).grad;
        for (std::int64_t o = 0; o < outer; ++o) {
          const T *src = go.data.data() + o * out_stride + off;
          T *dst = gp.data.data() + o * chunk;
          for (std::int64_t i = 0; i < chunk; ++i)
            dst[i] += src[i];
        }
      }
      off += chunk;
    }
  });
}

template <typename T> Var<T> slice(Var<T> a, int axis, std::int64_t start, std::int64_t len) {
  Graph<T> &g = *a.graph;
  const Tensor<T> &av = g.value(a);
  const int rank = av.rank();
  require(axis >= 0 && axis < rank, "slice: bad axis ", axis);
  require(start >= 0 && len > 0 && start + len <= av.shape[std::size_t(axis)],
          "slice: range [", start, ",", start + len, ") out of bounds for ",
          shape_str(av.shape));
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i)
    outer *= av.shape[std::size_t(i)];
  for (int i = axis + 1; i < rank; ++i)
    inner *= av.shape[std::size_t(i)];
  const std::int64_t src_stride = av.shape[std::size_t(axis)] * inner;
  Shape out_shape = av.shape;
  out_shape[std::size_t(axis)] = len;
  Tensor<T> out(out_shape);
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy_n(av.data.data() + o * src_stride + start * inner, len * inner,
                out.data.data() + o * len * inner);
  return g.make(std::move(out), g.requires_grad(a), [=](Graph<T> &gr, int id) {
    if (!gr.requires_grad(a))
      return;
    const Tensor<T> &go = gr.node(id).grad;
    auto &ga = gr.node(a.id).grad;
    for (std::int64_t o = 0; o < outer; ++o) {
      const T *src = go.data.data() + o * len * inner;
      T *dst = ga.data.data() + o * src_stride + start * inner;
      for (std::int64_t i = 0; i < len * inner; ++i)
        dst[i] += src[i];
    }
  });
}

template <typename T> Var<T> sum(Var<T> a) {
  Graph<T> &g = *a.graph;
  const Tensor<T> &av = g.value(a);
  T acc = T(0);
  for (std::int64_t i = 0; i < av.size(); ++i)
    acc += av[i];
  return g.make(Tensor<T>::scalar(acc), g.requires_grad(a), [=](Graph<T> &gr, int id) {
    if (!gr.requires_grad(a))
      return;
    const T go = gr.node(id).grad[0];
    auto &ga = gr.node(a.id).grad;
    for (std::int64_t i = 0; i < ga.size(); ++i)
      ga[i] += go;
  });
}

template <typename T> Var<T> mean(Var<T> a) {
  Graph<T> &g = *a.graph;
  const std::int64_t n = g.value(a).size();
  return scale(sum(a), T(1) / T(n));
}

// Softmax over the last axis.
template <typename T> Var<T> softmax(Var<T> a) {
  Graph<T> &g = *a.graph;
  const Tensor<T> &av = g.value(a);
  require(av.rank() >= 1, "softmax: rank >= 1 required");
  const std::int64_t d = av.shape.back();
  const std::int64_t rows = av.size() / d;
  Tensor<T> out(av.shape);
  for (std::int64_t r = 0; r < rows; ++r) {
    ad::ArrCMap<T> x(av.data.data() + r * d, d);
    ad::ArrMap<T> y(out.data.data() + r * d, d);
    y = (x - x.maxCoeff()).exp();
    y /= y.sum();
  }
  return g.make(std::move(out), g.requires_grad(a), [=](Graph<T> &gr, int id) {
    if (!gr.requires_grad(a))
      return;
    const Tensor<T> &go = gr.node(id).grad;
    const Tensor<T> &ov = gr.node(id).value;
    auto &ga = gr.node(a.id).grad;
    for (std::int64_t r = 0; r < rows; ++r) {
      ad::ArrCMap<T> s(ov.data.data() + r * d, d);
      ad::ArrCMap<T> gy(go.data.data() + r * d, d);
      ad::ArrMap<T> gx(ga.data.data() + r * d, d);
      const T dot = (gy * s).sum();
      gx += s * (gy - dot);
    }
  });
}

// Fused matmul + row-broadcast bias.
template <typename T> Var<T> linear(Var<T> x, Var<T> w, Var<T> b,
                                    MatmulKernel kernel = MatmulKernel::fast) {
  Graph<T> &g = *x.graph;
  const Tensor<T> &xv = g.value(x), &wv = g.value(w), &bv = g.value(b);
  require(xv.rank() == 2 && wv.rank() == 2 && xv.shape[1] == wv.shape[0] &&
              bv.size() == wv.shape[1],
          "linear: incompatible shapes ", shape_str(xv.shape), " x ", shape_str(wv.shape),
          " + ", shape_str(bv.shape));
  const std::int64_t m = xv.shape[0], k = xv.shape[1], n = wv.shape[1];
  Tensor<T> out({m, n});
  if (kernel == MatmulKernel::seq)
    gemm_seq(xv.data.data(), wv.data.data(), out.data.data(), m, k, n);
  else
    gemm(xv.data.data(), wv.data.data(), out.data.data(), m, k, n);
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j)
      out[i * n + j] += bv[j];
  const bool rg = g.requires_grad(x) || g.requires_grad(w) || g.requires_grad(b);
  return g.make(std::move(out), rg, [=](Graph<T> &gr, int id) {
    const Tensor<T> &go = gr.node(id).grad;
    EigenMatCMap<T> mgo(go.data.data(), m, n);
    if (gr.requires_grad(x)) {
      EigenMatCMap<T> mw(gr.value(w).data.data(), k, n);
      EigenMatMap<T> mgx(gr.node(x.id).grad.data.data(), m, k);
      mgx.noalias() += mgo * mw.transpose();
    }
    if (gr.requires_grad(w)) {
      EigenMatCMap<T> mx(gr.value(x).data.data(), m, k);
      EigenMatMap<T> mgw(gr.node(w.id).grad.data.data(), k, n);
      mgw.noalias() += mx.transpose() * mgo;
    }
    if (gr.requires_grad(b)) {
      auto &gb = gr.node(b.id).grad;
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j)
          gb[j] += go[i * n + j];
    }
  });
}

// Fused multi-head self-attention over packed (N, D) q/k/v projections.
// Per-head softmax(q kᵀ / sqrt(dh)) v with the attention matrices cached
// once for the backward pass.
template <typename T> Var<T> multihead_attention(Var<T> q, Var<T> k, Var<T> v, int heads) {
  Graph<T> &g = *q.graph;
  const Tensor<T> &qv = g.value(q);
  const std::int64_t n = qv.shape[0], d = qv.shape[1];
  require(d % heads == 0, "attention: dim ", d, " not divisible by ", heads, " heads");
  require(g.value(k).shape == qv.shape && g.value(v).shape == qv.shape,
          "attention: q/k/v shape mismatch");
  const std::int64_t dh = d / heads;
  const T inv_sqrt = T(1.0 / std::sqrt(double(dh)));

  // Head blocks are staged into contiguous buffers; strided GEMMs are much
  // slower than the copies they avoid.
  auto gather = [n, d, dh](const Tensor<T> &src, int h, Tensor<T> &dst) {
    for (std::int64_t r = 0; r < n; ++r)
      std::copy_n(src.data.data() + r * d + h * dh, dh, dst.data.data() + r * dh);
  };
  auto scatter_add = [n, d, dh](const Tensor<T> &src, int h, Tensor<T> &dst) {
    for (std::int64_t r = 0; r < n; ++r) {
      const T *s = src.data.data() + r * dh;
      T *o = dst.data.data() + r * d + h * dh;
      for (std::int64_t c = 0; c < dh; ++c)
        o[c] += s[c];
    }
  };

  auto attn_cache = std::make_shared<std::vector<Tensor<T>>>();
  attn_cache->reserve(std::size_t(heads));
  Tensor<T> out({n, d});
  {
    const Tensor<T> &kv = g.value(k), &vv = g.value(v);
    Tensor<T> qh({n, dh}), kh({n, dh}), vh({n, dh}), oh({n, dh});
    for (int h = 0; h < heads; ++h) {
      gather(qv, h, qh);
      gather(kv, h, kh);
      gather(vv, h, vh);
      Tensor<T> attn({n, n});
      EigenMatMap<T> ma(attn.data.data(), n, n);
      ma.noalias() = EigenMatCMap<T>(qh.data.data(), n, dh) *
                     EigenMatCMap<T>(kh.data.data(), n, dh).transpose() * inv_sqrt;
      for (std::int64_t r = 0; r < n; ++r) {
        ad::ArrMap<T> row(attn.data.data() + r * n, n);
        row = (row - row.maxCoeff()).exp();
        row /= row.sum();
      }
      EigenMatMap<T>(oh.data.data(), n, dh).noalias() =
          ma * EigenMatCMap<T>(vh.data.data(), n, dh);
      for (std::int64_t r = 0; r < n; ++r)
        std::copy_n(oh.data.data() + r * dh, dh, out.data.data() + r * d + h * dh);
      attn_cache->push_back(std::move(attn));
    }
  }
  const bool rg = g.requires_grad(q) || g.requires_grad(k) || g.requires_grad(v);
  return g.make(std::move(out), rg, [=](Graph<T> &gr, int id) {
    const Tensor<T> &go = gr.node(id).grad;
    const Tensor<T> &qv2 = gr.value(q), &kv2 = gr.value(k), &vv2 = gr.value(v);
    Tensor<T> dattn({n, n});
    Tensor<T> qh({n, dh}), kh({n, dh}), vh({n, dh}), goh({n, dh}), tmp({n, dh});
    for (int h = 0; h < heads; ++h) {
      const Tensor<T> &attn = (*attn_cache)[std::size_t(h)];
      EigenMatCMap<T> ma(attn.data.data(), n, n);
      gather(go, h, goh);
      gather(qv2, h, qh);
      gather(kv2, h, kh);
      gather(vv2, h, vh);
      EigenMatCMap<T> mgo(goh.data.data(), n, dh);
      if (gr.requires_grad(v)) {
        EigenMatMap<T>(tmp.data.data(), n, dh).noalias() = ma.transpose() * mgo;
        scatter_add(tmp, h, gr.node(v.id).grad);
      }
      if (gr.requires_grad(q) || gr.requires_grad(k)) {
        EigenMatMap<T> mda(dattn.data.data(), n, n);
        mda.noalias() = mgo * EigenMatCMap<T>(vh.data.data(), n, dh).transpose();
        // softmax backward row-wise, reusing the dattn buffer
        for (std::int64_t r = 0; r < n; ++r) {
          ad::ArrCMap<T> srow(attn.data.data() + r * n, n);
          ad::ArrMap<T> grow(dattn.data.data() + r * n, n);
          const T dot = (grow * srow).sum();
          grow = srow * (grow - dot) * inv_sqrt;
        }
        if (gr.requires_grad(q)) {
          EigenMatMap<T>(tmp.data.data(), n, dh).noalias() =
              mda * EigenMatCMap<T>(kh.data.data(), n, dh);
          scatter_add(tmp, h, gr.node(q.id).grad);
        }
        if (gr.requires_grad(k)) {
          EigenMatMap<T>(tmp.data.data(), n, dh).noalias() =
              mda.transpose() * EigenMatCMap<T>(qh.data.data(), n, dh);
          scatter_add(tmp, h, gr.node(k.id).grad);
        }
      }
    }
  });
}

// Layer normalization over the last axis with learnable gain and bias.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  Graph<T> &g = *x.graph;
  const Tensor<T> &xv = g.value(x);
  const std::int64_t d = xv.shape.back();
  require(g.value(gamma).size() == d && g.value(beta).size() == d,
          "layer_norm: gain/bias must have ", d, " entries");
  const std::int64_t rows = xv.size() / d;
  Tensor<T> out(xv.shape);
  Tensor<T> xhat(xv.shape);
  Tensor<T> inv_std({rows});
  const Tensor<T> &gv = g.value(gamma), &bv = g.value(beta);
  for (std::int64_t r = 0; r < rows; ++r) {
    const T *xr = xv.data.data() + r * d;
    T mu = T(0);
    for (std::int64_t i = 0; i < d; ++i)
      mu += xr[i];
    mu /= T(d);
    T var = T(0);
    for (std::int64_t i = 0; i < d; ++i)
      var += (xr[i] - mu) * (xr[i] - mu);
    var /= T(d);
    const T inv = T(1) / std::sqrt(var + eps);
    inv_std[r] = inv;
    T *hr = xhat.data.data() + r * d;
    T *yr = out.data.data() + r * d;
    for (std::int64_t i = 0; i < d; ++i) {
      hr[i] = (xr[i] - mu) * inv;
      yr[i] = hr[i] * gv[i] + bv[i];
    }
  }
  const bool rg = g.requires_grad(x) || g.requires_grad(gamma) || g.requires_grad(beta);
  auto xh = std::make_shared<Tensor<T>>(std::move(xhat));
  auto istd = std::make_shared<Tensor<T>>(std::move(inv_std));
  return g.make(std::move(out), rg, [=](Graph<T> &gr, int id) {
    const Tensor<T> &go = gr.node(id).grad;
    const Tensor<T> &gam = gr.value(gamma);
    for (std::int64_t r = 0; r < rows; ++r) {
      const T *gyr = go.data.data() + r * d;
      const T *hr = xh->data.data() + r * d;
      if (gr.requires_grad(beta)) {
        auto &gb = gr.node(beta.id).grad;
        for (std::int64_t i = 0; i < d; ++i)
          gb[i] += gyr[i];
      }
      if (gr.requires_grad(gamma)) {
        auto &gg = gr.node(gamma.id).grad;
        for (std::int64_t i = 0; i < d; ++i)
          gg[i] += gyr[i] * hr[i];
      }
      if (gr.requires_grad(x)) {
        auto &gx = gr.node(x.id).grad;
        T m1 = T(0), m2 = T(0);
        for (std::int64_t i = 0; i < d; ++i) {
          const T dh = gyr[i] * gam[i];
          m1 += dh;
          m2 += dh * hr[i];
        }
        m1 /= T(d);
        m2 /= T(d);
        const T inv = (*istd)[r];
        T *gxr = gx.data.data() + r * d;
        for (std::int64_t i = 0; i < d; ++i) {
          const T dh = gyr[i] * gam[i];
          gxr[i] += inv * (dh - m1 - hr[i] * m2);
        }
      }
    }
  });
}

// L2 normalization of each row of the last axis (unit quaternions etc).
template <typename T> Var<T> l2_normalize(Var<T> a) {
  Graph<T> &g = *a.graph;
  const Tensor<T> &av = g.value(a);
  const std::int64_t d = av.shape.back();
  const std::int64_t rows = av.size() / d;
  Tensor<T> out(av.shape);
  Tensor<T> norms({rows});
  for (std::int64_t r = 0; r < rows; ++r) {
    const T *x = av.data.data() + r * d;
    T n2 = T(0);
    for (std::int64_t i = 0; i < d; ++i)
      n2 += x[i] * x[i];
    const T n = std::sqrt(n2);
    require(n > T(0), "l2_normalize: zero-norm row");
    norms[r] = n;
    T *y = out.data.data() + r * d;
    for (std::int64_t i = 0; i < d; ++i)
      y[i] = x[i] / n;
  }
  auto nr = std::make_shared<Tensor<T>>(std::move(norms));
  return g.make(std::move(out), g.requires_grad(a), [=](Graph<T> &gr, int id) {
    if (!gr.requires_grad(a))
      return;
    const Tensor<T> &go = gr.node(id).grad;
    const Tensor<T> &ov = gr.node(id).value;
    auto &ga = gr.node(a.id).grad;
    for (std::int64_t r = 0; r < rows; ++r) {
      const T *y = ov.data.data() + r * d;
      const T *gy = go.data.data() + r * d;
      T *gx = ga.data.data() + r * d;
      T dot = T(0);
      for (std::int64_t i = 0; i < d; ++i)
        dot += y[i] * gy[i];
      const T inv_n = T(1) / (*nr)[r];
      for (std::int64_t i = 0; i < d; ++i)
        gx[i] += (gy[i] - y[i] * dot) * inv_n;
    }
  });
}

// Extract k x k patches (stride/pad) from an HxWxC image into rows of a
// (n_patches, k*k*C) matrix, channel-major within each row: slot index is
// (c*k + ky)*k + kx. Out-of-bounds reads under padding are zero.
template <typename T>
Var<T> unfold(Var<T> img, int k, int stride, int pad) {
  Graph<T> &g = *img.graph;
  const Tensor<T> &v = g.value(img);
  require(v.rank() == 3, "unfold: HxWxC input required, got ", shape_str(v.shape));
  const std::int64_t h = v.shape[0], w = v.shape[1], c = v.shape[2];
  require((h + 2 * pad - k) % stride == 0 && (w + 2 * pad - k) % stride == 0,
          "unfold: size ", h, "x", w, " incompatible with k=", k, " stride=", stride,
          " pad=", pad);
  const std::int64_t ny = (h + 2 * pad - k) / stride + 1;
  const std::int64_t nx = (w + 2 * pad - k) / stride + 1;
  const std::int64_t row = std::int64_t(k) * k * c;
  Tensor<T> out({ny * nx, row});
  for (std::int64_t py = 0; py < ny; ++py)
    for (std::int64_t px = 0; px < nx; ++px) {
      T *dst = out.data.data() + (py * nx + px) * row;
      for (std::int64_t ch = 0; ch < c; ++ch)
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            const std::int64_t y = py * stride + ky - pad;
            const std::int64_t x = px * stride + kx - pad;
            dst[(ch * k + ky) * k + kx] =
                (y >= 0 && y < h && x >= 0 && x < w) ? v.at(y, x, ch) : T(0);
          }
    }
  return g.make(std::move(out), g.requires_grad(img), [=](Graph<T> &gr, int id) {
    if (!gr.requires_grad(img))
      return;
    const Tensor<T> &go = gr.node(id).grad;
    auto &gi = gr.node(img.id).grad;
    for (std::int64_t py = 0; py < ny; ++py)
      for (std::int64_t px = 0; px < nx; ++px) {
        const T *src = go.data.data() + (py * nx + px) * row;
        for (std::int64_t ch = 0; ch < c; ++ch)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const std::int64_t y = py * stride + ky - pad;
              const std::int64_t x = px * stride + kx - pad;
              if (y >= 0 && y < h && x >= 0 && x < w)
                gi[(y * w + x) * c + ch] += src[(ch * k + ky) * k + kx];
            }
      }
  });
}

// Inverse of unfold with stride == k, pad == 0: tokens (n, p*p*C) -> HxWxC.
template <typename T>
Var<T> fold_patches(Var<T> tokens, std::int64_t h, std::int64_t w, std::int64_t c, int p) {
  Graph<T> &g = *tokens.graph;
  const Tensor<T> &v = g.value(tokens);
  const std::int64_t ny = h / p, nx = w / p;
  require(v.rank() == 2 && v.shape[0] == ny * nx && v.shape[1] == std::int64_t(p) * p * c,
          "fold_patches: token shape ", shape_str(v.shape), " incompatible with ", h, "x", w,
          "x", c, " p=", p);
  Tensor<T> out({h, w, c});
  const std::int64_t row = std::int64_t(p) * p * c;
  for (std::int64_t py = 0; py < ny; ++py)
    for (std::int64_t px = 0; px < nx; ++px) {
      const T *src = v.data.data() + (py * nx + px) * row;
      for (std::int64_t ch = 0; ch < c; ++ch)
        for (int ky = 0; ky < p; ++ky)
          for (int kx = 0; kx < p; ++kx)
            out.at(py * p + ky, px * p + kx, ch) = src[(ch * p + ky) * p + kx];
    }
  return g.make(std::move(out), g.requires_grad(tokens), [=](Graph<T> &gr, int id) {
    if (!gr.requires_grad(tokens))
      return;
    const Tensor<T> &go = gr.node(id).grad;
    auto &gt = gr.node(tokens.id).grad;
    for (std::int64_t py = 0; py < ny; ++py)
      for (std::int64_t px = 0; px < nx; ++px) {
        T *dst = gt.data.data() + (py * nx + px) * row;
        for (std::int64_t ch = 0; ch < c; ++ch)
          for (int ky = 0; ky < p; ++ky)
            for (int kx = 0; kx < p; ++kx)
              dst[(ch * p + ky) * p + kx] +=
                  go[((py * p + ky) * w + (px * p + kx)) * c + ch];
      }
  });
}

// Node with externally supplied forward value and backward rule. The
// callback receives the output gradient and one accumulation target per
// input (null when that input is untracked).
template <typename T>
Var<T> custom(Graph<T> &g, std::vector<Var<T>> inputs, Tensor<T> out_value,
              std::function<void(const Tensor<T> &, const std::vector<Tensor<T> *> &)> bw) {
  bool rg = false;
  for (const auto &in : inputs)
    rg = rg || g.requires_grad(in);
  return g.make(std::move(out_value), rg, [inputs = std::move(inputs),
                                           bw = std::move(bw)](Graph<T> &gr, int id) {
    std::vector<Tensor<T> *> gins(inputs.size(), nullptr);
    for (std::size_t i = 0; i < inputs.size(); ++i)
      if (gr.requires_grad(inputs[i]))
        gins[i] = &gr.node(inputs[i].id).grad;
    bw(gr.node(id).grad, gins);
  });
}

// Max over all leaf entries of |analytic - central| / max(1, |analytic|, |central|).
// The builder must produce a scalar root from the given leaves.
template <typename T = double>
double gradient_check(
    const std::function<Var<T>(Graph<T> &, const std::vector<Var<T>> &)> &build,
    std::vector<Tensor<T>> leaves, double eps) {
  require(eps >= 1e-7 && eps <= 1e-3, "gradient_check: eps ", eps, " outside [1e-7, 1e-3]");

  auto eval = [&](const std::vector<Tensor<T>> &vals) {
    Graph<T> g;
    std::vector<Var<T>> vs;
    vs.reserve(vals.size());
    for (const auto &t : vals)
      vs.push_back(g.leaf(t, false));
    Var<T> root = build(g, vs);
    require(g.value(root).size() == 1, "gradient_check: root must be scalar");
    return double(g.value(root)[0]);
  };

  Graph<T> g;
  std::vector<Var<T>> vs;
  for (const auto &t : leaves)
    vs.push_back(g.leaf(t, true));
  Var<T> root = build(g, vs);
  require(g.value(root).size() == 1, "gradient_check: root must be scalar");
  g.backward(root);
  std::vector<Tensor<T>> analytic;
  analytic.reserve(leaves.size());
  for (const auto &v : vs)
    analytic.push_back(g.grad(v));

  double max_err = 0.0;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    for (std::int64_t i = 0; i < leaves[l].size(); ++i) {
      const T saved = leaves[l][i];
      leaves[l][i] = saved + T(eps);
      const double fp = eval(leaves);
      leaves[l][i] = saved - T(eps);
      const double fm = eval(leaves);
      leaves[l][i] = saved;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = double(analytic[l][i]);
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      max_err = std::max(max_err, std::abs(a - numeric) / denom);
    }
  }
  return max_err;
}

} // namespace gilab
