#pragma once

#include <cmath>
#include <cstring>
#include <memory>

#include "ugdiff/autodiff.hpp"
#include "ugdiff/parallel.hpp"
#include "ugdiff/tensor.hpp"

namespace ugdiff {
namespace ops {

// ---------------------------------------------------------------------------
// Elementwise arithmetic. Binary ops accept equal shapes, or a scalar
// (1-element) operand on either side.
// ---------------------------------------------------------------------------

template <typename T>
inline bool is_scalar(const Var<T>& v) {
  return v->value.numel() == 1;
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  const auto& av = a->value;
  const auto& bv = b->value;
  check_shape(av.same_shape(bv) || av.numel() == 1 || bv.numel() == 1,
              "add " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  Tensor<T> out(av.numel() >= bv.numel() ? av.shape : bv.shape);
  const bool as = av.numel() == 1 && out.numel() != 1;
  const bool bs = bv.numel() == 1 && out.numel() != 1;
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = (as ? av[0] : av[i]) + (bs ? bv[0] : bv[i]);
  return make_node<T>(std::move(out), {a, b}, [a, b, as, bs](Node<T>& n) {
    if (a->requires_grad) {
      a->ensure_grad();
      if (as) {
        T acc = 0;
        for (std::int64_t i = 0; i < n.grad.numel(); ++i) acc += n.grad[i];
        a->grad[0] += acc;
      } else {
        for (std::int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
      }
    }
    if (b->requires_grad) {
      b->ensure_grad();
      if (bs) {
        T acc = 0;
        for (std::int64_t i = 0; i < n.grad.numel(); ++i) acc += n.grad[i];
        b->grad[0] += acc;
      } else {
        for (std::int64_t i = 0; i < n.grad.numel(); ++i) b->grad[i] += n.grad[i];
      }
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  const auto& av = a->value;
  const auto& bv = b->value;
  check_shape(av.same_shape(bv) || av.numel() == 1 || bv.numel() == 1,
              "mul " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  Tensor<T> out(av.numel() >= bv.numel() ? av.shape : bv.shape);
  const bool as = av.numel() == 1 && out.numel() != 1;
  const bool bs = bv.numel() == 1 && out.numel() != 1;
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = (as ? av[0] : av[i]) * (bs ? bv[0] : bv[i]);
  return make_node<T>(std::move(out), {a, b}, [a, b, as, bs](Node<T>& n) {
    const auto& av = a->value;
    const auto& bv = b->value;
    if (a->requires_grad) {
      a->ensure_grad();
      if (as) {
        T acc = 0;
        for (std::int64_t i = 0; i < n.grad.numel(); ++i)
          acc += n.grad[i] * (bs ? bv[0] : bv[i]);
        a->grad[0] += acc;
      } else {
        for (std::int64_t i = 0; i < n.grad.numel(); ++i)
          a->grad[i] += n.grad[i] * (bs ? bv[0] : bv[i]);
      }
    }
    if (b->requires_grad) {
      b->ensure_grad();
      if (bs) {
        T acc = 0;
        for (std::int64_t i = 0; i < n.grad.numel(); ++i)
          acc += n.grad[i] * (as ? av[0] : av[i]);
        b->grad[0] += acc;
      } else {
        for (std::int64_t i = 0; i < n.grad.numel(); ++i)
          b->grad[i] += n.grad[i] * (as ? av[0] : av[i]);
      }
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, double c) {
  Tensor<T> out(a->value.shape);
  const T cc = static_cast<T>(c);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * cc;
  return make_node<T>(std::move(out), {a}, [a, cc](Node<T>& n) {
    a->ensure_grad();
    for (std::int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i] * cc;
  });
}

template <typename T>
Var<T> neg(const Var<T>& a) {
  return scale(a, -1.0);
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return add(a, neg(b));
}

template <typename T>
Var<T> add_const(const Var<T>& a, double c) {
  Tensor<T> out(a->value.shape);
  const T cc = static_cast<T>(c);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] + cc;
  return make_node<T>(std::move(out), {a}, [a](Node<T>& n) {
    a->ensure_grad();
    for (std::int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
  });
}

// Generic unary helper: y = f(x), dx += dy * dfdx(x, y).
template <typename T, typename F, typename G>
Var<T> unary(const Var<T>& a, F f, G dfdx) {
  Tensor<T> out(a->value.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = f(a->value[i]);
  return make_node<T>(std::move(out), {a}, [a, dfdx](Node<T>& n) {
    a->ensure_grad();
    for (std::int64_t i = 0; i < n.grad.numel(); ++i)
      a->grad[i] += n.grad[i] * dfdx(a->value[i], n.value[i]);
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  return unary(
      a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
  return unary(
      a,
      [](T x) {
        T s = T(1) / (T(1) + std::exp(-x));
        return x * s;
      },
      [](T x, T) {
        T s = T(1) / (T(1) + std::exp(-x));
        return s * (T(1) + x * (T(1) - s));
      });
}

template <typename T>
Var<T> softplus(const Var<T>& a) {
  return unary(
      a,
      [](T x) {
        // Overflow-safe log(1 + e^x).
        return x > T(20) ? x : std::log1p(std::exp(x));
      },
      [](T x, T) { return T(1) / (T(1) + std::exp(-x)); });
}

template <typename T>
Var<T> tanh(const Var<T>& a) {
  return unary(
      a, [](T x) { return std::tanh(x); },
      [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  return unary(
      a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> sqrt(const Var<T>& a) {
  return unary(
      a, [](T x) { return std::sqrt(x); },
      [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Var<T> log(const Var<T>& a) {
  return unary(
      a, [](T x) { return std::log(x); },
      [](T x, T) { return T(1) / x; });
}

template <typename T>
Var<T> exp(const Var<T>& a) {
  return unary(
      a, [](T x) { return std::exp(x); },
      [](T, T y) { return y; });
}

template <typename T>
Var<T> square(const Var<T>& a) {
  return unary(
      a, [](T x) { return x * x; },
      [](T x, T) { return T(2) * x; });
}

// max(x, bound). Gradient passes where x >= bound, and also where the
// incoming gradient would push a clamped x back above the bound; this keeps
// clamped scale parameters trainable.
template <typename T>
Var<T> lower_bound(const Var<T>& a, double bound) {
  Tensor<T> out(a->value.shape);
  const T b = static_cast<T>(bound);
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = a->value[i] < b ? b : a->value[i];
  return make_node<T>(std::move(out), {a}, [a, b](Node<T>& n) {
    a->ensure_grad();
    for (std::int64_t i = 0; i < n.grad.numel(); ++i) {
      bool pass = a->value[i] >= b || n.grad[i] < T(0);
      if (pass) a->grad[i] += n.grad[i];
    }
  });
}

template <typename T>
Var<T> upper_bound(const Var<T>& a, double bound) {
  Tensor<T> out(a->value.shape);
  const T b = static_cast<T>(bound);
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = a->value[i] > b ? b : a->value[i];
  return make_node<T>(std::move(out), {a}, [a, b](Node<T>& n) {
    a->ensure_grad();
    for (std::int64_t i = 0; i < n.grad.numel(); ++i) {
      bool pass = a->value[i] <= b || n.grad[i] > T(0);
      if (pass) a->grad[i] += n.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum(const Var<T>& a) {
  double acc = 0;
  for (std::int64_t i = 0; i < a->value.numel(); ++i) acc += a->value[i];
  return make_node<T>(Tensor<T>::scalar(static_cast<T>(acc)), {a}, [a](Node<T>& n) {
    a->ensure_grad();
    const T g = n.grad[0];
    for (std::int64_t i = 0; i < a->grad.numel(); ++i) a->grad[i] += g;
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  const std::int64_t cnt = a->value.numel();
  double acc = 0;
  for (std::int64_t i = 0; i < cnt; ++i) acc += a->value[i];
  return make_node<T>(Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(cnt))),
                      {a}, [a, cnt](Node<T>& n) {
                        a->ensure_grad();
                        const T g = n.grad[0] / static_cast<T>(cnt);
                        for (std::int64_t i = 0; i < a->grad.numel(); ++i) a->grad[i] += g;
                      });
}

// ---------------------------------------------------------------------------
// Shape plumbing.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& a, std::vector<int> shape) {
  check_shape(Tensor<T>::count(shape) == a->value.numel(),
              "reshape " + shape_str(a->value.shape) + " -> " + shape_str(shape));
  Tensor<T> out;
  out.shape = std::move(shape);
  out.data = a->value.data;
  return make_node<T>(std::move(out), {a}, [a](Node<T>& n) {
    a->ensure_grad();
    for (std::int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
  });
}

template <typename T>
Var<T> concat_ch(const Var<T>& a, const Var<T>& b) {
  const auto& av = a->value;
  const auto& bv = b->value;
  check_shape(av.ndim() == 3 && bv.ndim() == 3 && av.dim(1) == bv.dim(1) &&
                  av.dim(2) == bv.dim(2),
              "concat_ch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  Tensor<T> out({av.dim(0) + bv.dim(0), av.dim(1), av.dim(2)});
  std::memcpy(out.data.data(), av.data.data(), av.data.size() * sizeof(T));
  std::memcpy(out.data.data() + av.data.size(), bv.data.data(), bv.data.size() * sizeof(T));
  return make_node<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
    std::int64_t na = a->value.numel();
    if (a->requires_grad) {
      a->ensure_grad();
      for (std::int64_t i = 0; i < na; ++i) a->grad[i] += n.grad[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (std::int64_t i = 0; i < b->value.numel(); ++i) b->grad[i] += n.grad[na + i];
    }
  });
}

template <typename T>
Var<T> slice_ch(const Var<T>& a, int c0, int c1) {
  const auto& av = a->value;
  check_shape(av.ndim() == 3 && c0 >= 0 && c1 <= av.dim(0) && c0 < c1,
              "slice_ch [" + std::to_string(c0) + "," + std::to_string(c1) + ") of " +
                  shape_str(av.shape));
  const std::int64_t plane = static_cast<std::int64_t>(av.dim(1)) * av.dim(2);
  Tensor<T> out({c1 - c0, av.dim(1), av.dim(2)});
  std::memcpy(out.data.data(), av.data.data() + c0 * plane, out.data.size() * sizeof(T));
  return make_node<T>(std::move(out), {a}, [a, c0, plane](Node<T>& n) {
    a->ensure_grad();
    for (std::int64_t i = 0; i < n.grad.numel(); ++i)
      a->grad[c0 * plane + i] += n.grad[i];
  });
}

// Per-channel bias broadcast over [C,H,W].
template <typename T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& b) {
  const auto& xv = x->value;
  check_shape(xv.ndim() == 3 && b->value.numel() == xv.dim(0),
              "add_channel_bias " + shape_str(xv.shape) + " + " + shape_str(b->value.shape));
  const std::int64_t plane = static_cast<std::int64_t>(xv.dim(1)) * xv.dim(2);
  Tensor<T> out(xv.shape);
  for (int c = 0; c < xv.dim(0); ++c) {
    const T bc = b->value[c];
    for (std::int64_t i = 0; i < plane; ++i) out[c * plane + i] = xv[c * plane + i] + bc;
  }
  return make_node<T>(std::move(out), {x, b}, [x, b, plane](Node<T>& n) {
    if (x->requires_grad) {
      x->ensure_grad();
      for (std::int64_t i = 0; i < n.grad.numel(); ++i) x->grad[i] += n.grad[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (int c = 0; c < n.value.dim(0); ++c) {
        T acc = 0;
        for (std::int64_t i = 0; i < plane; ++i) acc += n.grad[c * plane + i];
        b->grad[c] += acc;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Dense algebra (used by the time-embedding MLP and self-attention).
// ---------------------------------------------------------------------------

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const auto& xv = x->value;
  const auto& wv = w->value;
  check_shape(xv.ndim() == 1 && wv.ndim() == 2 && wv.dim(1) == xv.dim(0) &&
                  b->value.numel() == wv.dim(0),
              "linear " + shape_str(wv.shape) + " * " + shape_str(xv.shape));
  const int m = wv.dim(0), k = wv.dim(1);
  Tensor<T> out({m});
  for (int i = 0; i < m; ++i) {
    T acc = b->value[i];
    const T* wr = wv.data.data() + static_cast<std::int64_t>(i) * k;
    for (int j = 0; j < k; ++j) acc += wr[j] * xv[j];
    out[i] = acc;
  }
  return make_node<T>(std::move(out), {x, w, b}, [x, w, b, m, k](Node<T>& n) {
    if (x->requires_grad) {
      x->ensure_grad();
      for (int i = 0; i < m; ++i) {
        const T g = n.grad[i];
        const T* wr = w->value.data.data() + static_cast<std::int64_t>(i) * k;
        for (int j = 0; j < k; ++j) x->grad[j] += g * wr[j];
      }
    }
    if (w->requires_grad) {
      w->ensure_grad();
      for (int i = 0; i < m; ++i) {
        const T g = n.grad[i];
        T* wr = w->grad.data.data() + static_cast<std::int64_t>(i) * k;
        for (int j = 0; j < k; ++j) wr[j] += g * x->value[j];
      }
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (int i = 0; i < m; ++i) b->grad[i] += n.grad[i];
    }
  });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const auto& av = a->value;
  const auto& bv = b->value;
  check_shape(av.ndim() == 2 && bv.ndim() == 2 && av.dim(1) == bv.dim(0),
              "matmul " + shape_str(av.shape) + " * " + shape_str(bv.shape));
  const int m = av.dim(0), k = av.dim(1), nn = bv.dim(1);
  Tensor<T> out({m, nn});
  for (int i = 0; i < m; ++i) {
    T* orow = out.data.data() + static_cast<std::int64_t>(i) * nn;
    const T* arow = av.data.data() + static_cast<std::int64_t>(i) * k;
    for (int l = 0; l < k; ++l) {
      const T av_il = arow[l];
      const T* brow = bv.data.data() + static_cast<std::int64_t>(l) * nn;
      for (int j = 0; j < nn; ++j) orow[j] += av_il * brow[j];
    }
  }
  return make_node<T>(std::move(out), {a, b}, [a, b, m, k, nn](Node<T>& n) {
    if (a->requires_grad) {
      a->ensure_grad();
      // dA = dC * B^T
      for (int i = 0; i < m; ++i) {
        const T* grow = n.grad.data.data() + static_cast<std::int64_t>(i) * nn;
        T* arow = a->grad.data.data() + static_cast<std::int64_t>(i) * k;
        for (int l = 0; l < k; ++l) {
          const T* brow = b->value.data.data() + static_cast<std::int64_t>(l) * nn;
          T acc = 0;
          for (int j = 0; j < nn; ++j) acc += grow[j] * brow[j];
          arow[l] += acc;
        }
      }
    }
    if (b->requires_grad) {
      b->ensure_grad();
      // dB = A^T * dC
      for (int l = 0; l < k; ++l) {
        T* brow = b->grad.data.data() + static_cast<std::int64_t>(l) * nn;
        for (int i = 0; i < m; ++i) {
          const T a_il = a->value[static_cast<std::int64_t>(i) * k + l];
          const T* grow = n.grad.data.data() + static_cast<std::int64_t>(i) * nn;
          for (int j = 0; j < nn; ++j) brow[j] += a_il * grow[j];
        }
      }
    }
  });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  const auto& av = a->value;
  check_shape(av.ndim() == 2, "transpose " + shape_str(av.shape));
  const int m = av.dim(0), nn = av.dim(1);
  Tensor<T> out({nn, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < nn; ++j)
      out[static_cast<std::int64_t>(j) * m + i] = av[static_cast<std::int64_t>(i) * nn + j];
  return make_node<T>(std::move(out), {a}, [a, m, nn](Node<T>& n) {
    a->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < nn; ++j)
        a->grad[static_cast<std::int64_t>(i) * nn + j] +=
            n.grad[static_cast<std::int64_t>(j) * m + i];
  });
}

template <typename T>
Var<T> softmax_rows(const Var<T>& a) {
  const auto& av = a->value;
  check_shape(av.ndim() == 2, "softmax_rows " + shape_str(av.shape));
  const int m = av.dim(0), nn = av.dim(1);
  Tensor<T> out(av.shape);
  for (int i = 0; i < m; ++i) {
    const T* r = av.data.data() + static_cast<std::int64_t>(i) * nn;
    T* o = out.data.data() + static_cast<std::int64_t>(i) * nn;
    T mx = r[0];
    for (int j = 1; j < nn; ++j) mx = std::max(mx, r[j]);
    double z = 0;
    for (int j = 0; j < nn; ++j) {
      o[j] = std::exp(r[j] - mx);
      z += o[j];
    }
    const T inv = static_cast<T>(1.0 / z);
    for (int j = 0; j < nn; ++j) o[j] *= inv;
  }
  return make_node<T>(std::move(out), {a}, [a, m, nn](Node<T>& n) {
    a->ensure_grad();
    for (int i = 0; i < m; ++i) {
      const T* y = n.value.data.data() + static_cast<std::int64_t>(i) * nn;
      const T* g = n.grad.data.data() + static_cast<std::int64_t>(i) * nn;
      T* d = a->grad.data.data() + static_cast<std::int64_t>(i) * nn;
      T dot = 0;
      for (int j = 0; j < nn; ++j) dot += g[j] * y[j];
      for (int j = 0; j < nn; ++j) d[j] += y[j] * (g[j] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Spatial kernels.
// ---------------------------------------------------------------------------

inline int conv_out_extent(int in, int k, int stride, int pad) {
  int span = in + 2 * pad - k;
  if (span < 0) throw std::invalid_argument("conv: kernel larger than padded input");
  return span / stride + 1;
}

namespace detail {

// Row-major GEMM, C[M,N] += A[M,K] * B[K,N], parallelized over 4-row strips
// of C. Each output element is produced by exactly one thread with a fixed
// k order, so results do not depend on the worker count.
template <typename T>
void gemm_accumulate(const T* a, const T* b, T* c, int m, int k, int n) {
  const int strips = (m + 3) / 4;
  parallel_for(strips, [&](int strip) {
    const int m0 = strip * 4;
    const int mr = std::min(4, m - m0);
    T* c0 = c + static_cast<std::int64_t>(m0) * n;
    const T* a0 = a + static_cast<std::int64_t>(m0) * k;
    for (int l = 0; l < k; ++l) {
      const T* brow = b + static_cast<std::int64_t>(l) * n;
      const T a_val0 = a0[l];
      const T a_val1 = mr > 1 ? a0[k + l] : T(0);
      const T a_val2 = mr > 2 ? a0[2 * k + l] : T(0);
      const T a_val3 = mr > 3 ? a0[3 * k + l] : T(0);
      switch (mr) {
        case 4:
          for (int j = 0; j < n; ++j) {
            const T bv = brow[j];
            c0[j] += a_val0 * bv;
            c0[n + j] += a_val1 * bv;
            c0[2 * n + j] += a_val2 * bv;
            c0[3 * n + j] += a_val3 * bv;
          }
          break;
        case 3:
          for (int j = 0; j < n; ++j) {
            const T bv = brow[j];
            c0[j] += a_val0 * bv;
            c0[n + j] += a_val1 * bv;
            c0[2 * n + j] += a_val2 * bv;
          }
          break;
        case 2:
          for (int j = 0; j < n; ++j) {
            const T bv = brow[j];
            c0[j] += a_val0 * bv;
            c0[n + j] += a_val1 * bv;
          }
          break;
        default:
          for (int j = 0; j < n; ++j) c0[j] += a_val0 * brow[j];
      }
    }
  });
}

// Patch matrix for a convolution with the given geometry: row (ci,ky,kx),
// column (oy,ox); out-of-image taps are zero.
template <typename T>
std::vector<T> im2col(const Tensor<T>& x, int kh, int kw, int stride, int pad, int ho,
                      int wo) {
  const int ci_n = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::int64_t cols = static_cast<std::int64_t>(ho) * wo;
  std::vector<T> p(static_cast<size_t>(ci_n) * kh * kw * cols, T(0));
  parallel_for(ci_n, [&](int ci) {
    const T* xplane = x.data.data() + static_cast<std::int64_t>(ci) * h * wd;
    T* prow_base = p.data() + static_cast<std::int64_t>(ci) * kh * kw * cols;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        T* prow = prow_base + (static_cast<std::int64_t>(ky) * kw + kx) * cols;
        const int kxp = kx - pad;
        int ox0 = 0;
        while (ox0 * stride + kxp < 0) ++ox0;
        int ox1 = wo;
        while (ox1 > ox0 && (ox1 - 1) * stride + kxp >= wd) --ox1;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          const T* xrow = xplane + static_cast<std::int64_t>(iy) * wd;
          T* pr = prow + static_cast<std::int64_t>(oy) * wo;
          if (stride == 1) {
            for (int ox = ox0; ox < ox1; ++ox) pr[ox] = xrow[ox + kxp];
          } else {
            for (int ox = ox0; ox < ox1; ++ox) pr[ox] = xrow[ox * stride + kxp];
          }
        }
      }
    }
  });
  return p;
}

// Adjoint of im2col: scatters patch-matrix rows back into an image.
template <typename T>
void col2im_add(const std::vector<T>& p, Tensor<T>& x, int kh, int kw, int stride, int pad,
                int ho, int wo) {
  const int ci_n = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::int64_t cols = static_cast<std::int64_t>(ho) * wo;
  parallel_for(ci_n, [&](int ci) {
    T* xplane = x.data.data() + static_cast<std::int64_t>(ci) * h * wd;
    const T* prow_base = p.data() + static_cast<std::int64_t>(ci) * kh * kw * cols;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const T* prow = prow_base + (static_cast<std::int64_t>(ky) * kw + kx) * cols;
        const int kxp = kx - pad;
        int ox0 = 0;
        while (ox0 * stride + kxp < 0) ++ox0;
        int ox1 = wo;
        while (ox1 > ox0 && (ox1 - 1) * stride + kxp >= wd) --ox1;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          T* xrow = xplane + static_cast<std::int64_t>(iy) * wd;
          const T* pr = prow + static_cast<std::int64_t>(oy) * wo;
          if (stride == 1) {
            for (int ox = ox0; ox < ox1; ++ox) xrow[ox + kxp] += pr[ox];
          } else {
            for (int ox = ox0; ox < ox1; ++ox) xrow[ox * stride + kxp] += pr[ox];
          }
        }
      }
    }
  });
}

// c[M,K] += a[M,N] * b[K,N]^T (b row-major). Four b-rows per pass so each
// a-row is streamed once per quad; strip-parallel over rows of c.
template <typename T>
void gemm_abt_accumulate(const T* a, const T* b, T* c, int m, int n, int k) {
  parallel_for(m, [&](int i) {
    const T* arow = a + static_cast<std::int64_t>(i) * n;
    T* crow = c + static_cast<std::int64_t>(i) * k;
    int l = 0;
    for (; l + 4 <= k; l += 4) {
      const T* b0 = b + static_cast<std::int64_t>(l) * n;
      const T* b1 = b0 + n;
      const T* b2 = b1 + n;
      const T* b3 = b2 + n;
      T acc0 = 0, acc1 = 0, acc2 = 0, acc3 = 0;
      for (int j = 0; j < n; ++j) {
        const T av = arow[j];
        acc0 += av * b0[j];
        acc1 += av * b1[j];
        acc2 += av * b2[j];
        acc3 += av * b3[j];
      }
      crow[l] += acc0;
      crow[l + 1] += acc1;
      crow[l + 2] += acc2;
      crow[l + 3] += acc3;
    }
    for (; l < k; ++l) {
      const T* brow = b + static_cast<std::int64_t>(l) * n;
      T acc = 0;
      for (int j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[l] += acc;
    }
  });
}

}  // namespace detail

// 2-D convolution, NCHW single image: x[Ci,H,W], w[Co,Ci,kh,kw], b[Co].
// Lowered to an im2col patch matrix and a strip-parallel GEMM; the backward
// passes reuse the same lowering (dW = dOut P^T, dX = col2im(W^T dOut)).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
  const auto& xv = x->value;
  const auto& wv = w->value;
  check_shape(xv.ndim() == 3 && wv.ndim() == 4 && wv.dim(1) == xv.dim(0),
              "conv2d input " + shape_str(xv.shape) + " weight " + shape_str(wv.shape));
  if (stride != 1 && stride != 2) throw std::invalid_argument("conv2d: stride must be 1 or 2");
  const int co_n = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  const int ho = conv_out_extent(xv.dim(1), kh, stride, pad);
  const int wo = conv_out_extent(xv.dim(2), kw, stride, pad);
  const int cols = ho * wo;
  const int kdim = xv.dim(0) * kh * kw;

  auto patches = detail::im2col(xv, kh, kw, stride, pad, ho, wo);
  Tensor<T> out({co_n, ho, wo});
  if (b) {
    for (int co = 0; co < co_n; ++co) {
      T* op = out.data.data() + static_cast<std::int64_t>(co) * cols;
      const T bv = b->value[co];
      for (int i = 0; i < cols; ++i) op[i] = bv;
    }
  }
  detail::gemm_accumulate(wv.data.data(), patches.data(), out.data.data(), co_n, kdim, cols);

  std::vector<Var<T>> parents = b ? std::vector<Var<T>>{x, w, b} : std::vector<Var<T>>{x, w};
  return make_node<T>(std::move(out), std::move(parents),
                      [x, w, b, stride, pad, ho, wo, cols, kdim](Node<T>& n) {
    const auto& xv = x->value;
    const auto& wv = w->value;
    const int co_n = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
    if (w->requires_grad) {
      w->ensure_grad();
      auto patches = detail::im2col(xv, kh, kw, stride, pad, ho, wo);
      detail::gemm_abt_accumulate(n.grad.data.data(), patches.data(), w->grad.data.data(),
                                  co_n, cols, kdim);
    }
    if (x->requires_grad) {
      x->ensure_grad();
      // dP = W^T dOut; transpose W once, then scatter back into the image.
      std::vector<T> wt(static_cast<size_t>(kdim) * co_n);
      for (int co = 0; co < co_n; ++co)
        for (int l = 0; l < kdim; ++l)
          wt[static_cast<std::int64_t>(l) * co_n + co] =
              wv.data[static_cast<std::int64_t>(co) * kdim + l];
      std::vector<T> dpatches(static_cast<size_t>(kdim) * cols, T(0));
      detail::gemm_accumulate(wt.data(), n.grad.data.data(), dpatches.data(), kdim, co_n,
                              cols);
      detail::col2im_add(dpatches, x->grad, kh, kw, stride, pad, ho, wo);
    }
    if (b && b->requires_grad) {
      b->ensure_grad();
      for (int co = 0; co < co_n; ++co) {
        const T* gp = n.grad.data.data() + static_cast<std::int64_t>(co) * cols;
        double acc = 0;
        for (int i = 0; i < cols; ++i) acc += gp[i];
        b->grad[co] += static_cast<T>(acc);
      }
    }
  });
}

// Transposed convolution (the adjoint of conv2d with the same geometry):
// x[Ci,H,W], w[Ci,Co,kh,kw] -> out[Co, (H-1)*s - 2p + kh + op, ...].
// Forward scatters W^T x through col2im; backward gathers with im2col.
template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride,
                        int pad, int out_pad) {
  const auto& xv = x->value;
  const auto& wv = w->value;
  check_shape(xv.ndim() == 3 && wv.ndim() == 4 && wv.dim(0) == xv.dim(0),
              "conv_transpose2d input " + shape_str(xv.shape) + " weight " + shape_str(wv.shape));
  if (stride != 1 && stride != 2)
    throw std::invalid_argument("conv_transpose2d: stride must be 1 or 2");
  const int ci_n = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
  const int co_n = wv.dim(1), kh = wv.dim(2), kw = wv.dim(3);
  const int ho = (h - 1) * stride - 2 * pad + kh + out_pad;
  const int wo = (wd - 1) * stride - 2 * pad + kw + out_pad;
  if (ho <= 0 || wo <= 0) throw std::invalid_argument("conv_transpose2d: empty output");
  // The "conv view": a conv with this geometry maps [Co,ho,wo] -> [Ci,h,wd].
  if (conv_out_extent(ho, kh, stride, pad) != h || conv_out_extent(wo, kw, stride, pad) != wd)
    throw std::invalid_argument("conv_transpose2d: inconsistent output padding");

  const int cols = h * wd;
  const int kdim = co_n * kh * kw;

  Tensor<T> out({co_n, ho, wo});
  if (b) {
    for (int co = 0; co < co_n; ++co) {
      T* op = out.data.data() + static_cast<std::int64_t>(co) * ho * wo;
      const T bv = b->value[co];
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(ho) * wo; ++i) op[i] = bv;
    }
  }
  {
    // G[kdim, cols] = W^T[kdim, Ci] * X[Ci, cols], then scatter.
    std::vector<T> wt(static_cast<size_t>(kdim) * ci_n);
    for (int ci = 0; ci < ci_n; ++ci)
      for (int l = 0; l < kdim; ++l)
        wt[static_cast<std::int64_t>(l) * ci_n + ci] =
            wv.data[static_cast<std::int64_t>(ci) * kdim + l];
    std::vector<T> g(static_cast<size_t>(kdim) * cols, T(0));
    detail::gemm_accumulate(wt.data(), xv.data.data(), g.data(), kdim, ci_n, cols);
    detail::col2im_add(g, out, kh, kw, stride, pad, h, wd);
  }

  std::vector<Var<T>> parents = b ? std::vector<Var<T>>{x, w, b} : std::vector<Var<T>>{x, w};
  return make_node<T>(std::move(out), std::move(parents),
                      [x, w, b, stride, pad, cols, kdim](Node<T>& n) {
    const auto& xv = x->value;
    const auto& wv = w->value;
    const int ci_n = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
    const int co_n = wv.dim(1), kh = wv.dim(2), kw = wv.dim(3);
    const int ho = n.value.dim(1), wo = n.value.dim(2);
    (void)ho;
    (void)wo;
    if (x->requires_grad || w->requires_grad) {
      // dG = im2col(dOut) with the conv-view geometry: [kdim, cols].
      auto dg = detail::im2col(n.grad, kh, kw, stride, pad, h, wd);
      if (x->requires_grad) {
        x->ensure_grad();
        // dX[Ci, cols] += W[Ci, kdim] * dG
        detail::gemm_accumulate(wv.data.data(), dg.data(), x->grad.data.data(), ci_n, kdim,
                                cols);
      }
      if (w->requires_grad) {
        w->ensure_grad();
        // dW[Ci, kdim] += X[Ci, cols] * dG^T
        detail::gemm_abt_accumulate(xv.data.data(), dg.data(), w->grad.data.data(), ci_n,
                                    cols, kdim);
      }
    }
    if (b && b->requires_grad) {
      b->ensure_grad();
      const std::int64_t plane = static_cast<std::int64_t>(n.value.dim(1)) * n.value.dim(2);
      for (int co = 0; co < co_n; ++co) {
        const T* gp = n.grad.data.data() + co * plane;
        double acc = 0;
        for (std::int64_t i = 0; i < plane; ++i) acc += gp[i];
        b->grad[co] += static_cast<T>(acc);
      }
    }
  });
}

template <typename T>
Var<T> maxpool2x2(const Var<T>& x) {
  const auto& xv = x->value;
  check_shape(xv.ndim() == 3, "maxpool2x2 " + shape_str(xv.shape));
  if (xv.dim(1) % 2 != 0 || xv.dim(2) % 2 != 0)
    throw std::invalid_argument("maxpool2x2: odd spatial extents " + shape_str(xv.shape));
  const int c_n = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
  const int ho = h / 2, wo = wd / 2;
  Tensor<T> out({c_n, ho, wo});
  auto argmax = std::make_shared<std::vector<std::uint8_t>>(out.data.size());
  for (int c = 0; c < c_n; ++c) {
    const T* xp = xv.data.data() + static_cast<std::int64_t>(c) * h * wd;
    T* op = out.data.data() + static_cast<std::int64_t>(c) * ho * wo;
    std::uint8_t* ap = argmax->data() + static_cast<std::int64_t>(c) * ho * wo;
    for (int y = 0; y < ho; ++y) {
      for (int xx = 0; xx < wo; ++xx) {
        const T* p = xp + static_cast<std::int64_t>(2 * y) * wd + 2 * xx;
        T best = p[0];
        int bi = 0;
        if (p[1] > best) { best = p[1]; bi = 1; }
        if (p[wd] > best) { best = p[wd]; bi = 2; }
        if (p[wd + 1] > best) { best = p[wd + 1]; bi = 3; }
        op[static_cast<std::int64_t>(y) * wo + xx] = best;
        ap[static_cast<std::int64_t>(y) * wo + xx] = static_cast<std::uint8_t>(bi);
      }
    }
  }
  return make_node<T>(std::move(out), {x}, [x, argmax](Node<T>& n) {
    x->ensure_grad();
    const int c_n = n.value.dim(0), ho = n.value.dim(1), wo = n.value.dim(2);
    const int wd = x->value.dim(2);
    for (int c = 0; c < c_n; ++c) {
      T* dxp = x->grad.data.data() + static_cast<std::int64_t>(c) * x->value.dim(1) * wd;
      const T* gp = n.grad.data.data() + static_cast<std::int64_t>(c) * ho * wo;
      const std::uint8_t* ap = argmax->data() + static_cast<std::int64_t>(c) * ho * wo;
      for (int y = 0; y < ho; ++y) {
        for (int xx = 0; xx < wo; ++xx) {
          const int bi = ap[static_cast<std::int64_t>(y) * wo + xx];
          const int iy = 2 * y + (bi >> 1), ix = 2 * xx + (bi & 1);
          dxp[static_cast<std::int64_t>(iy) * wd + ix] += gp[static_cast<std::int64_t>(y) * wo + xx];
        }
      }
    }
  });
}

// Generalized divisive normalization over channels, per spatial site:
//   forward  y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)
//   inverse  y_i = x_i * sqrt(beta_i + sum_j gamma_ij x_j^2)
// beta[C] must be positive, gamma[C,C] non-negative (callers reparameterize).
template <typename T>
Var<T> gdn(const Var<T>& x, const Var<T>& beta, const Var<T>& gamma, bool inverse) {
  const auto& xv = x->value;
  const int c_n = xv.dim(0);
  check_shape(xv.ndim() == 3 && beta->value.numel() == c_n &&
                  gamma->value.ndim() == 2 && gamma->value.dim(0) == c_n &&
                  gamma->value.dim(1) == c_n,
              "gdn " + shape_str(xv.shape));
  for (int i = 0; i < c_n; ++i)
    if (!(beta->value[i] > T(0)))
      throw std::runtime_error("gdn: non-positive beta after reparameterization");
  const std::int64_t plane = static_cast<std::int64_t>(xv.dim(1)) * xv.dim(2);

  Tensor<T> sq(xv.shape);
  for (std::int64_t i = 0; i < xv.numel(); ++i) sq[i] = xv[i] * xv[i];
  auto norm = std::make_shared<Tensor<T>>(xv.shape);  // sqrt(den), kept for backward
  Tensor<T> out(xv.shape);
  parallel_for(c_n, [&](int i) {
    T* nrm = norm->data.data() + i * plane;
    const T bi = beta->value[i];
    for (std::int64_t p = 0; p < plane; ++p) nrm[p] = bi;
    const T* grow = gamma->value.data.data() + static_cast<std::int64_t>(i) * c_n;
    for (int j = 0; j < c_n; ++j) {
      const T gij = grow[j];
      if (gij == T(0)) continue;
      const T* sj = sq.data.data() + j * plane;
      for (std::int64_t p = 0; p < plane; ++p) nrm[p] += gij * sj[p];
    }
    const T* xi = xv.data.data() + i * plane;
    T* oi = out.data.data() + i * plane;
    for (std::int64_t p = 0; p < plane; ++p) {
      nrm[p] = std::sqrt(nrm[p]);
      oi[p] = inverse ? xi[p] * nrm[p] : xi[p] / nrm[p];
    }
  });

  return make_node<T>(std::move(out), {x, beta, gamma},
                      [x, beta, gamma, norm, inverse, c_n, plane](Node<T>& n) {
    const auto& xv = x->value;
    // u_i = g_i * x_i / n_i (inverse) or g_i * x_i / n_i^3 (forward)
    Tensor<T> u({c_n, xv.dim(1), xv.dim(2)});
    for (int i = 0; i < c_n; ++i) {
      const T* g = n.grad.data.data() + i * plane;
      const T* xi = xv.data.data() + i * plane;
      const T* nm = norm->data.data() + i * plane;
      T* ui = u.data.data() + i * plane;
      if (inverse) {
        for (std::int64_t p = 0; p < plane; ++p) ui[p] = g[p] * xi[p] / nm[p];
      } else {
        for (std::int64_t p = 0; p < plane; ++p) {
          const T n3 = nm[p] * nm[p] * nm[p];
          ui[p] = g[p] * xi[p] / n3;
        }
      }
    }
    if (x->requires_grad) {
      x->ensure_grad();
      const T sgn = inverse ? T(1) : T(-1);
      parallel_for(c_n, [&](int k) {
        const T* g = n.grad.data.data() + k * plane;
        const T* xk = xv.data.data() + k * plane;
        const T* nm = norm->data.data() + k * plane;
        T* dx = x->grad.data.data() + k * plane;
        // direct term
        if (inverse) {
          for (std::int64_t p = 0; p < plane; ++p) dx[p] += g[p] * nm[p];
        } else {
          for (std::int64_t p = 0; p < plane; ++p) dx[p] += g[p] / nm[p];
        }
        // coupling term: sgn * x_k * sum_i gamma_ik u_i
        for (int i = 0; i < c_n; ++i) {
          const T gik = gamma->value[static_cast<std::int64_t>(i) * c_n + k];
          if (gik == T(0)) continue;
          const T* ui = u.data.data() + i * plane;
          for (std::int64_t p = 0; p < plane; ++p) dx[p] += sgn * gik * xk[p] * ui[p];
        }
      });
    }
    const T half = inverse ? T(0.5) : T(-0.5);
    if (beta->requires_grad) {
      beta->ensure_grad();
      for (int i = 0; i < c_n; ++i) {
        const T* ui = u.data.data() + i * plane;
        double acc = 0;
        for (std::int64_t p = 0; p < plane; ++p) acc += ui[p];
        beta->grad[i] += half * static_cast<T>(acc);
      }
    }
    if (gamma->requires_grad) {
      gamma->ensure_grad();
      parallel_for(c_n, [&](int i) {
        const T* ui = u.data.data() + i * plane;
        T* grow = gamma->grad.data.data() + static_cast<std::int64_t>(i) * c_n;
        for (int j = 0; j < c_n; ++j) {
          const T* xj = xv.data.data() + j * plane;
          double acc = 0;
          for (std::int64_t p = 0; p < plane; ++p) acc += ui[p] * xj[p] * xj[p];
          grow[j] += half * static_cast<T>(acc);
        }
      });
    }
  });
}

// ---------------------------------------------------------------------------
// Entropy-model primitive: probability mass of a unit-width quantization bin
// under N(mu, sigma^2), floored for rate stability.
//   p = Phi((v - mu + 1/2)/sigma) - Phi((v - mu - 1/2)/sigma)
// ---------------------------------------------------------------------------

inline double std_normal_cdf(double x) { return 0.5 * std::erfc(-x * 0.7071067811865475244); }

inline double std_normal_pdf(double x) {
  return 0.3989422804014326779 * std::exp(-0.5 * x * x);
}

constexpr double kLikelihoodFloor = 1e-9;

template <typename T>
Var<T> gaussian_bin_prob(const Var<T>& v, const Var<T>& mu, const Var<T>& sigma) {
  const auto& vv = v->value;
  check_shape(vv.same_shape(mu->value) && vv.same_shape(sigma->value),
              "gaussian_bin_prob operands");
  Tensor<T> out(vv.shape);
  for (std::int64_t i = 0; i < vv.numel(); ++i) {
    const double d = static_cast<double>(vv[i]) - static_cast<double>(mu->value[i]);
    const double s = static_cast<double>(sigma->value[i]);
    const double p = std_normal_cdf((d + 0.5) / s) - std_normal_cdf((d - 0.5) / s);
    out[i] = static_cast<T>(p < kLikelihoodFloor ? kLikelihoodFloor : p);
  }
  return make_node<T>(std::move(out), {v, mu, sigma}, [v, mu, sigma](Node<T>& n) {
    const bool gv = v->requires_grad, gm = mu->requires_grad, gs = sigma->requires_grad;
    if (gv) v->ensure_grad();
    if (gm) mu->ensure_grad();
    if (gs) sigma->ensure_grad();
    for (std::int64_t i = 0; i < n.value.numel(); ++i) {
      if (n.value[i] <= static_cast<T>(kLikelihoodFloor)) continue;  // clamped: no gradient
      const double d = static_cast<double>(v->value[i]) - static_cast<double>(mu->value[i]);
      const double s = static_cast<double>(sigma->value[i]);
      const double a = (d + 0.5) / s, b = (d - 0.5) / s;
      const double pa = std_normal_pdf(a), pb = std_normal_pdf(b);
      const double g = static_cast<double>(n.grad[i]);
      const double dpdv = (pa - pb) / s;
      if (gv) v->grad[i] += static_cast<T>(g * dpdv);
      if (gm) mu->grad[i] -= static_cast<T>(g * dpdv);
      if (gs) sigma->grad[i] += static_cast<T>(g * (pb * b - pa * a) / s);
    }
  });
}

// Total rate in bits: -sum log2 p.
template <typename T>
Var<T> total_bits(const Var<T>& p) {
  return scale(sum(log(p)), -1.4426950408889634074);
}

}  // namespace ops
}  // namespace ugdiff
