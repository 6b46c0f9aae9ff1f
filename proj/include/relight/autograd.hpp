#pragma once

// Minimal reverse-mode automatic differentiation over CHW tensors.
//
// Every op returns a Var that owns its value and, when gradients are enabled
// and at least one input requires them, a closure that pushes the output
// gradient back into its parents. The graph is rebuilt for every forward pass.

#include <Eigen/Core>

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "relight/tensor.hpp"

namespace relight::ag {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor<T>& ensure_grad() {
    if (grad.size() != value.size()) grad = Tensor<T>(value.shape);
    return grad;
  }
  void zero_grad() {
    if (grad.size() == value.size()) grad.fill(T(0));
  }
};

template <class T>
using Var = std::shared_ptr<Node<T>>;

namespace detail {
inline thread_local bool grad_enabled = true;
}

/// Disables graph construction for its lifetime (inference mode).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

template <class T>
Var<T> constant(Tensor<T> value) {
  return leaf(std::move(value), false);
}

namespace detail {

template <class T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  bool needs = false;
  if (grad_enabled)
    for (const auto& p : parents) needs = needs || (p && p->requires_grad);
  if (needs) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(fn);
  }
  return n;
}

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapR = Eigen::Map<MatR<T>>;
template <class T>
using CMapR = Eigen::Map<const MatR<T>>;

// cols has (C*K*K) rows and (Ho*Wo) columns.
template <class T>
void im2col(const T* x, int C, int H, int W, int K, int s, int p, int Ho, int Wo, T* cols) {
  const std::size_t plane = static_cast<std::size_t>(Ho) * Wo;
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < K; ++ky)
      for (int kx = 0; kx < K; ++kx) {
        T* row = cols + (static_cast<std::size_t>(c * K + ky) * K + kx) * plane;
        const T* xc = x + static_cast<std::size_t>(c) * H * W;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * s - p + ky;
          T* r = row + static_cast<std::size_t>(oy) * Wo;
          if (iy < 0 || iy >= H) {
            std::fill(r, r + Wo, T(0));
            continue;
          }
          const T* xr = xc + static_cast<std::size_t>(iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * s - p + kx;
            r[ox] = (ix >= 0 && ix < W) ? xr[ix] : T(0);
          }
        }
      }
}

// Accumulating adjoint of im2col.
template <class T>
void col2im(const T* cols, int C, int H, int W, int K, int s, int p, int Ho, int Wo, T* x) {
  const std::size_t plane = static_cast<std::size_t>(Ho) * Wo;
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < K; ++ky)
      for (int kx = 0; kx < K; ++kx) {
        const T* row = cols + (static_cast<std::size_t>(c * K + ky) * K + kx) * plane;
        T* xc = x + static_cast<std::size_t>(c) * H * W;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * s - p + ky;
          if (iy < 0 || iy >= H) continue;
          const T* r = row + static_cast<std::size_t>(oy) * Wo;
          T* xr = xc + static_cast<std::size_t>(iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * s - p + kx;
            if (ix >= 0 && ix < W) xr[ix] += r[ox];
          }
        }
      }
}

template <class T>
void require_rank(const Tensor<T>& t, int r, const char* what) {
  if (t.rank() != r) throw ShapeError(std::string(what) + ": expected rank " + std::to_string(r) + ", got " + shape_str(t.shape));
}

}  // namespace detail

/// Runs reverse accumulation from a scalar root. Gradients accumulate into
/// every reachable node that requires them, including parameter leaves.
template <class T>
void backward(const Var<T>& root) {
  if (root->value.size() != 1) throw ShapeError("backward: root must be a scalar");
  if (!root->requires_grad) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<T>* p = node->parents[idx++].get();
      if (p->requires_grad && p->backward_fn && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    n->ensure_grad();
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

/// x: {C,H,W}; w: {Co,C,K,K}; b: {Co} or null.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
  using namespace detail;
  require_rank(x->value, 3, "conv2d input");
  require_rank(w->value, 4, "conv2d weight");
  const int C = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2);
  const int Co = w->value.dim(0), K = w->value.dim(2);
  if (w->value.dim(1) != C || w->value.dim(3) != K)
    throw ShapeError("conv2d: weight " + shape_str(w->value.shape) + " incompatible with input " + shape_str(x->value.shape));
  const int Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - K) / stride + 1;
  if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d: input too small");
  const int rows = C * K * K, n = Ho * Wo;

  auto cols = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows) * n);
  im2col(x->value.ptr(), C, H, W, K, stride, pad, Ho, Wo, cols->data());

  Tensor<T> out({Co, Ho, Wo});
  MapR<T> om(out.ptr(), Co, n);
  om.noalias() = CMapR<T>(w->value.ptr(), Co, rows) * CMapR<T>(cols->data(), rows, n);
  if (b) {
    if (b->value.size() != static_cast<std::size_t>(Co)) throw ShapeError("conv2d: bias size");
    for (int c = 0; c < Co; ++c) om.row(c).array() += b->value[c];
  }

  std::vector<Var<T>> parents{x, w};
  if (b) parents.push_back(b);
  return make_op<T>(std::move(out), std::move(parents),
                    [x, w, b, cols, C, H, W, Co, K, stride, pad, Ho, Wo, rows, n](Node<T>& self) {
                      CMapR<T> g(self.grad.ptr(), Co, n);
                      CMapR<T> cm(cols->data(), rows, n);
                      if (w->requires_grad) {
                        MapR<T> gw(w->ensure_grad().ptr(), Co, rows);
                        gw.noalias() += g * cm.transpose();
                      }
                      if (b && b->requires_grad) {
                        auto& gb = b->ensure_grad();
                        for (int c = 0; c < Co; ++c) gb[c] += g.row(c).sum();
                      }
                      if (x->requires_grad) {
                        std::vector<T> gcols(static_cast<std::size_t>(rows) * n);
                        MapR<T>(gcols.data(), rows, n).noalias() = CMapR<T>(w->value.ptr(), Co, rows).transpose() * g;
                        col2im(gcols.data(), C, H, W, K, stride, pad, Ho, Wo, x->ensure_grad().ptr());
                      }
                    });
}

/// Transposed convolution. x: {Ci,H,W}; w: {Ci,Co,K,K}; b: {Co} or null.
/// Output side is (H-1)*stride - 2*pad + K.
template <class T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
  using namespace detail;
  require_rank(x->value, 3, "conv_transpose2d input");
  require_rank(w->value, 4, "conv_transpose2d weight");
  const int Ci = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2);
  if (w->value.dim(0) != Ci)
    throw ShapeError("conv_transpose2d: weight " + shape_str(w->value.shape) + " incompatible with input " + shape_str(x->value.shape));
  const int Co = w->value.dim(1), K = w->value.dim(2);
  const int Ho = (H - 1) * stride - 2 * pad + K, Wo = (W - 1) * stride - 2 * pad + K;
  if (Ho <= 0 || Wo <= 0) throw ShapeError("conv_transpose2d: invalid output size");
  const int rows = Co * K * K, n = H * W;

  std::vector<T> cols(static_cast<std::size_t>(rows) * n);
  MapR<T>(cols.data(), rows, n).noalias() =
      CMapR<T>(w->value.ptr(), Ci, rows).transpose() * CMapR<T>(x->value.ptr(), Ci, n);
  Tensor<T> out({Co, Ho, Wo});
  col2im(cols.data(), Co, Ho, Wo, K, stride, pad, H, W, out.ptr());
  if (b) {
    if (b->value.size() != static_cast<std::size_t>(Co)) throw ShapeError("conv_transpose2d: bias size");
    const std::size_t plane = static_cast<std::size_t>(Ho) * Wo;
    for (int c = 0; c < Co; ++c)
      for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] += b->value[c];
  }

  std::vector<Var<T>> parents{x, w};
  if (b) parents.push_back(b);
  return make_op<T>(std::move(out), std::move(parents),
                    [x, w, b, Ci, Co, K, stride, pad, H, W, Ho, Wo, rows, n](Node<T>& self) {
                      std::vector<T> gcols(static_cast<std::size_t>(rows) * n);
                      im2col(self.grad.ptr(), Co, Ho, Wo, K, stride, pad, H, W, gcols.data());
                      CMapR<T> gc(gcols.data(), rows, n);
                      if (w->requires_grad) {
                        MapR<T> gw(w->ensure_grad().ptr(), Ci, rows);
                        gw.noalias() += CMapR<T>(x->value.ptr(), Ci, n) * gc.transpose();
                      }
                      if (b && b->requires_grad) {
                        auto& gb = b->ensure_grad();
                        const std::size_t plane = static_cast<std::size_t>(Ho) * Wo;
                        for (int c = 0; c < Co; ++c) {
                          T s = 0;
                          for (std::size_t i = 0; i < plane; ++i) s += self.grad[c * plane + i];
                          gb[c] += s;
                        }
                      }
                      if (x->requires_grad) {
                        MapR<T> gx(x->ensure_grad().ptr(), Ci, n);
                        gx.noalias() += CMapR<T>(w->value.ptr(), Ci, rows) * gc;
                      }
                    });
}

/// y = A x + b with A: {M,N}, x: {N}, b: {M}.
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  using namespace detail;
  require_rank(w->value, 2, "linear weight");
  const int M = w->value.dim(0), N = w->value.dim(1);
  if (x->value.size() != static_cast<std::size_t>(N))
    throw ShapeError("linear: input " + shape_str(x->value.shape) + " incompatible with weight " + shape_str(w->value.shape));
  Tensor<T> out({M});
  Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> om(out.ptr(), M);
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> xm(x->value.ptr(), N);
  om.noalias() = CMapR<T>(w->value.ptr(), M, N) * xm;
  if (b) for (int i = 0; i < M; ++i) out[i] += b->value[i];
  std::vector<Var<T>> parents{x, w};
  if (b) parents.push_back(b);
  return make_op<T>(std::move(out), std::move(parents), [x, w, b, M, N](Node<T>& self) {
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> g(self.grad.ptr(), M);
    if (w->requires_grad) {
      Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> xm(x->value.ptr(), N);
      MapR<T>(w->ensure_grad().ptr(), M, N).noalias() += g * xm.transpose();
    }
    if (b && b->requires_grad) {
      auto& gb = b->ensure_grad();
      for (int i = 0; i < M; ++i) gb[i] += g[i];
    }
    if (x->requires_grad) {
      Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> gx(x->ensure_grad().ptr(), N);
      gx.noalias() += CMapR<T>(w->value.ptr(), M, N).transpose() * g;
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization and activations
// ---------------------------------------------------------------------------

template <class T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  detail::require_rank(x->value, 3, "instance_norm");
  const int C = x->value.dim(0);
  const std::size_t N = static_cast<std::size_t>(x->value.dim(1)) * x->value.dim(2);
  if (gamma->value.size() != static_cast<std::size_t>(C) || beta->value.size() != static_cast<std::size_t>(C))
    throw ShapeError("instance_norm: affine parameter size");
  auto xhat = std::make_shared<Tensor<T>>(x->value.shape);
  auto inv_std = std::make_shared<std::vector<T>>(C);
  Tensor<T> out(x->value.shape);
  for (int c = 0; c < C; ++c) {
    const T* xc = x->value.ptr() + c * N;
    T mean = 0;
    for (std::size_t i = 0; i < N; ++i) mean += xc[i];
    mean /= T(N);
    T var = 0;
    for (std::size_t i = 0; i < N; ++i) var += (xc[i] - mean) * (xc[i] - mean);
    var /= T(N);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[c] = is;
    T* xh = xhat->ptr() + c * N;
    T* oc = out.ptr() + c * N;
    for (std::size_t i = 0; i < N; ++i) {
      xh[i] = (xc[i] - mean) * is;
      oc[i] = gamma->value[c] * xh[i] + beta->value[c];
    }
  }
  return detail::make_op<T>(std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, inv_std, C, N](Node<T>& self) {
    for (int c = 0; c < C; ++c) {
      const T* g = self.grad.ptr() + c * N;
      const T* xh = xhat->ptr() + c * N;
      T sum_g = 0, sum_gx = 0;
      for (std::size_t i = 0; i < N; ++i) {
        sum_g += g[i];
        sum_gx += g[i] * xh[i];
      }
      if (gamma->requires_grad) gamma->ensure_grad()[c] += sum_gx;
      if (beta->requires_grad) beta->ensure_grad()[c] += sum_g;
      if (x->requires_grad) {
        T* gx = x->ensure_grad().ptr() + c * N;
        const T k = gamma->value[c] * (*inv_std)[c];
        const T mg = sum_g / T(N), mgx = sum_gx / T(N);
        for (std::size_t i = 0; i < N; ++i) gx[i] += k * (g[i] - mg - xh[i] * mgx);
      }
    }
  });
}

namespace detail {
template <class T, class F, class D>
Var<T> unary(const Var<T>& x, F f, D dfdy_x) {
  Tensor<T> out(x->value.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x->value[i]);
  return make_op<T>(std::move(out), {x}, [x, dfdy_x](Node<T>& self) {
    auto& gx = x->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * dfdy_x(self.value[i], x->value[i]);
  });
}
}  // namespace detail

template <class T>
Var<T> elu(const Var<T>& x) {
  return detail::unary<T>(
      x, [](T v) { return v > T(0) ? v : std::expm1(v); },
      [](T y, T v) { return v > T(0) ? T(1) : y + T(1); });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  return detail::unary<T>(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T, T v) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary<T>(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T y, T) { return y * (T(1) - y); });
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a->value, b->value, "add");
  Tensor<T> out(a->value.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + b->value[i];
  return detail::make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
    if (a->requires_grad) {
      auto& g = a->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (b->requires_grad) {
      auto& g = b->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a->value, b->value, "sub");
  Tensor<T> out(a->value.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] - b->value[i];
  return detail::make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
    if (a->requires_grad) {
      auto& g = a->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (b->requires_grad) {
      auto& g = b->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

/// Concatenation along the leading (channel) axis.
template <class T>
Var<T> concat(const Var<T>& a, const Var<T>& b) {
  const auto& sa = a->value.shape;
  const auto& sb = b->value.shape;
  if (sa.size() != sb.size() || !std::equal(sa.begin() + 1, sa.end(), sb.begin() + 1))
    throw ShapeError("concat: trailing dims differ " + shape_str(sa) + " vs " + shape_str(sb));
  Shape s = sa;
  s[0] += sb[0];
  Tensor<T> out(s);
  std::copy(a->value.data.begin(), a->value.data.end(), out.data.begin());
  std::copy(b->value.data.begin(), b->value.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a->value.size()));
  const std::size_t na = a->value.size();
  return detail::make_op<T>(std::move(out), {a, b}, [a, b, na](Node<T>& self) {
    if (a->requires_grad) {
      auto& g = a->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (b->requires_grad) {
      auto& g = b->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[na + i];
    }
  });
}

/// Channels [begin, end) of the leading axis.
template <class T>
Var<T> slice(const Var<T>& x, int begin, int end) {
  const auto& s = x->value.shape;
  if (begin < 0 || end > s[0] || begin >= end) throw ShapeError("slice: bad range");
  const std::size_t inner = x->value.size() / static_cast<std::size_t>(s[0]);
  Shape os = s;
  os[0] = end - begin;
  Tensor<T> out(os);
  std::copy_n(x->value.data.begin() + static_cast<std::ptrdiff_t>(begin * inner), out.size(), out.data.begin());
  const std::size_t off = begin * inner;
  return detail::make_op<T>(std::move(out), {x}, [x, off](Node<T>& self) {
    auto& g = x->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[off + i] += self.grad[i];
  });
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape s) {
  if (shape_numel(s) != x->value.size()) throw ShapeError("reshape: element count");
  Tensor<T> out(std::move(s), x->value.data);
  return detail::make_op<T>(std::move(out), {x}, [x](Node<T>& self) {
    auto& g = x->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// {C,H,W} -> {C}
template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
  detail::require_rank(x->value, 3, "global_avg_pool");
  const int C = x->value.dim(0);
  const std::size_t N = static_cast<std::size_t>(x->value.dim(1)) * x->value.dim(2);
  Tensor<T> out({C});
  for (int c = 0; c < C; ++c) {
    T s = 0;
    for (std::size_t i = 0; i < N; ++i) s += x->value[c * N + i];
    out[c] = s / T(N);
  }
  return detail::make_op<T>(std::move(out), {x}, [x, C, N](Node<T>& self) {
    auto& g = x->ensure_grad();
    for (int c = 0; c < C; ++c) {
      const T v = self.grad[c] / T(N);
      for (std::size_t i = 0; i < N; ++i) g[c * N + i] += v;
    }
  });
}

/// {C} -> {C,H,W}, constant over space.
template <class T>
Var<T> broadcast_hw(const Var<T>& v, int H, int W) {
  const int C = static_cast<int>(v->value.size());
  const std::size_t N = static_cast<std::size_t>(H) * W;
  Tensor<T> out({C, H, W});
  for (int c = 0; c < C; ++c) std::fill_n(out.ptr() + c * N, N, v->value[c]);
  return detail::make_op<T>(std::move(out), {v}, [v, C, N](Node<T>& self) {
    auto& g = v->ensure_grad();
    for (int c = 0; c < C; ++c) {
      T s = 0;
      for (std::size_t i = 0; i < N; ++i) s += self.grad[c * N + i];
      g[c] += s;
    }
  });
}

/// 2x2 max pooling, stride 2. Ties resolve to the first element in scan order.
template <class T>
Var<T> max_pool2(const Var<T>& x) {
  detail::require_rank(x->value, 3, "max_pool2");
  const int C = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2);
  const int Ho = H / 2, Wo = W / 2;
  Tensor<T> out({C, Ho, Wo});
  auto arg = std::make_shared<std::vector<std::size_t>>(out.size());
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < Ho; ++y)
      for (int xx = 0; xx < Wo; ++xx) {
        std::size_t best = (static_cast<std::size_t>(c) * H + 2 * y) * W + 2 * xx;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const std::size_t i = (static_cast<std::size_t>(c) * H + 2 * y + dy) * W + 2 * xx + dx;
            if (x->value[i] > x->value[best]) best = i;
          }
        const std::size_t o = (static_cast<std::size_t>(c) * Ho + y) * Wo + xx;
        out[o] = x->value[best];
        (*arg)[o] = best;
      }
  return detail::make_op<T>(std::move(out), {x}, [x, arg](Node<T>& self) {
    auto& g = x->ensure_grad();
    for (std::size_t o = 0; o < self.grad.size(); ++o) g[(*arg)[o]] += self.grad[o];
  });
}

// ---------------------------------------------------------------------------
// Scalar reductions
// ---------------------------------------------------------------------------

/// mean |a - b|; the subgradient at zero difference is 0.
template <class T>
Var<T> mean_abs_diff(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a->value, b->value, "mean_abs_diff");
  const std::size_t n = a->value.size();
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += std::abs(a->value[i] - b->value[i]);
  Tensor<T> out({1}, s / T(n));
  return detail::make_op<T>(std::move(out), {a, b}, [a, b, n](Node<T>& self) {
    const T g = self.grad[0] / T(n);
    for (std::size_t i = 0; i < n; ++i) {
      const T d = a->value[i] - b->value[i];
      const T sg = d > T(0) ? g : (d < T(0) ? -g : T(0));
      if (a->requires_grad) a->ensure_grad()[i] += sg;
      if (b->requires_grad) b->ensure_grad()[i] -= sg;
    }
  });
}

template <class T>
Var<T> mean_sq_diff(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a->value, b->value, "mean_sq_diff");
  const std::size_t n = a->value.size();
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += (a->value[i] - b->value[i]) * (a->value[i] - b->value[i]);
  Tensor<T> out({1}, s / T(n));
  return detail::make_op<T>(std::move(out), {a, b}, [a, b, n](Node<T>& self) {
    const T g = T(2) * self.grad[0] / T(n);
    for (std::size_t i = 0; i < n; ++i) {
      const T d = g * (a->value[i] - b->value[i]);
      if (a->requires_grad) a->ensure_grad()[i] += d;
      if (b->requires_grad) b->ensure_grad()[i] -= d;
    }
  });
}

/// sum_k weights[k] * terms[k] over scalar vars.
template <class T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& weights) {
  if (terms.size() != weights.size()) throw ShapeError("weighted_sum: weight count");
  T s = 0;
  for (std::size_t k = 0; k < terms.size(); ++k) s += weights[k] * terms[k]->value[0];
  return detail::make_op<T>(Tensor<T>({1}, s), terms, [terms, weights](Node<T>& self) {
    for (std::size_t k = 0; k < terms.size(); ++k)
      if (terms[k]->requires_grad) terms[k]->ensure_grad()[0] += weights[k] * self.grad[0];
  });
}

/// z = mu + exp(logvar / 2) * eps
template <class T>
Var<T> reparameterize(const Var<T>& mu, const Var<T>& logvar, const Tensor<T>& eps) {
  require_same_shape(mu->value, logvar->value, "reparameterize");
  require_same_shape(mu->value, eps, "reparameterize");
  Tensor<T> out(mu->value.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mu->value[i] + std::exp(logvar->value[i] / T(2)) * eps[i];
  return detail::make_op<T>(std::move(out), {mu, logvar}, [mu, logvar, eps](Node<T>& self) {
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (mu->requires_grad) mu->ensure_grad()[i] += self.grad[i];
      if (logvar->requires_grad)
        logvar->ensure_grad()[i] += self.grad[i] * eps[i] * std::exp(logvar->value[i] / T(2)) / T(2);
    }
  });
}

/// KL(N(mu, diag exp(logvar)) || N(0, I)) = 1/2 sum (mu^2 + exp(logvar) - 1 - logvar)
template <class T>
Var<T> kl_standard_normal(const Var<T>& mu, const Var<T>& logvar) {
  require_same_shape(mu->value, logvar->value, "kl_standard_normal");
  T s = 0;
  for (std::size_t i = 0; i < mu->value.size(); ++i) {
    const T m = mu->value[i], lv = logvar->value[i];
    s += m * m + std::exp(lv) - T(1) - lv;
  }
  return detail::make_op<T>(Tensor<T>({1}, s / T(2)), {mu, logvar}, [mu, logvar](Node<T>& self) {
    const T g = self.grad[0];
    for (std::size_t i = 0; i < mu->value.size(); ++i) {
      if (mu->requires_grad) mu->ensure_grad()[i] += g * mu->value[i];
      if (logvar->requires_grad) logvar->ensure_grad()[i] += g * (std::exp(logvar->value[i]) - T(1)) / T(2);
    }
  });
}

}  // namespace relight::ag
