#include "vitae/ops.hpp"

#include <algorithm>
#include <cmath>

#include "vitae/parallel.hpp"

namespace vitae {

namespace detail {

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n,
             bool accumulate) {
  parallel_for(
      0, m,
      [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) {
          T* crow = c + i * n;
          if (!accumulate) std::fill(crow, crow + n, T(0));
          const T* arow = a + i * k;
          for (int64_t p = 0; p < k; ++p) {
            T av = arow[p];
            const T* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
          }
        }
      },
      16);
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n,
             bool accumulate) {
  parallel_for(
      0, m,
      [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) {
          const T* arow = a + i * k;
          T* crow = c + i * n;
          for (int64_t j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T acc = 0;
            for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            if (accumulate)
              crow[j] += acc;
            else
              crow[j] = acc;
          }
        }
      },
      16);
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int64_t k, int64_t m, int64_t n,
             bool accumulate) {
  parallel_for(
      0, m,
      [&](int64_t i0, int64_t i1) {
        if (!accumulate)
          for (int64_t i = i0; i < i1; ++i)
            std::fill(c + i * n, c + (i + 1) * n, T(0));
        for (int64_t p = 0; p < k; ++p) {
          const T* arow = a + p * m;
          const T* brow = b + p * n;
          for (int64_t i = i0; i < i1; ++i) {
            T av = arow[i];
            T* crow = c + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
          }
        }
      },
      16);
}

template void gemm_nn<float>(const float*, const float*, float*, int64_t,
                             int64_t, int64_t, bool);
template void gemm_nn<double>(const double*, const double*, double*, int64_t,
                              int64_t, int64_t, bool);
template void gemm_nt<float>(const float*, const float*, float*, int64_t,
                             int64_t, int64_t, bool);
template void gemm_nt<double>(const double*, const double*, double*, int64_t,
                              int64_t, int64_t, bool);
template void gemm_tn<float>(const float*, const float*, float*, int64_t,
                             int64_t, int64_t, bool);
template void gemm_tn<double>(const double*, const double*, double*, int64_t,
                              int64_t, int64_t, bool);

}  // namespace detail

namespace {

template <typename T>
std::vector<T>& gbuf(const std::shared_ptr<TensorData<T>>& t) {
  if (t->grad.empty()) t->grad.assign(t->values.size(), T(0));
  return t->grad;
}

template <typename T>
bool wants(const std::shared_ptr<TensorData<T>>& t) {
  return t->requires_grad;
}

// Marks out as an intermediate and registers the backward closure.
template <typename T, typename Fn>
void track(Graph<T>& g, const Tensor<T>& out, bool any_input_grad, Fn&& fn) {
  if (!g.recording() || !any_input_grad) return;
  out.impl()->requires_grad = true;
  out.impl()->from_op = true;
  g.record(out.impl(), std::forward<Fn>(fn));
}

}  // namespace

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw DimError("matmul: incompatible shapes " + a.shape_str() + " x " +
                   b.shape_str());
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out({m, n});
  detail::gemm_nn(a.data(), b.data(), out.data(), m, k, n, false);
  auto ad = a.impl(), bd = b.impl(), od = out.impl();
  track(g, out, wants(ad) || wants(bd), [ad, bd, od, m, k, n] {
    const T* dy = od->grad.data();
    if (wants(ad))
      detail::gemm_nt(dy, bd->values.data(), gbuf(ad).data(), m, n, k, true);
    if (wants(bd))
      detail::gemm_tn(ad->values.data(), dy, gbuf(bd).data(), m, k, n, true);
  });
  return out;
}

template <typename T>
Tensor<T> bmm(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != b.dim(1))
    throw DimError("bmm: incompatible shapes " + a.shape_str() + " x " +
                   b.shape_str());
  int64_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Tensor<T> out({bs, m, n});
  parallel_for(0, bs, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i)
      detail::gemm_nn(a.data() + i * m * k, b.data() + i * k * n,
                      out.data() + i * m * n, m, k, n, false);
  });
  auto ad = a.impl(), bd = b.impl(), od = out.impl();
  track(g, out, wants(ad) || wants(bd), [ad, bd, od, bs, m, k, n] {
    const T* dy = od->grad.data();
    if (wants(ad)) {
      T* da = gbuf(ad).data();
      for (int64_t i = 0; i < bs; ++i)
        detail::gemm_nt(dy + i * m * n, bd->values.data() + i * k * n,
                        da + i * m * k, m, n, k, true);
    }
    if (wants(bd)) {
      T* db = gbuf(bd).data();
      for (int64_t i = 0; i < bs; ++i)
        detail::gemm_tn(ad->values.data() + i * m * k, dy + i * m * n,
                        db + i * k * n, m, k, n, true);
    }
  });
  return out;
}

template <typename T>
Tensor<T> transpose_last2(Graph<T>& g, const Tensor<T>& x) {
  if (x.ndim() < 2) throw DimError("transpose_last2: needs >= 2 dims");
  auto shape = x.shape();
  int nd = x.ndim();
  int64_t m = shape[size_t(nd - 2)], n = shape[size_t(nd - 1)];
  std::swap(shape[size_t(nd - 2)], shape[size_t(nd - 1)]);
  int64_t batch = x.numel() / (m * n);
  Tensor<T> out(shape);
  const T* src = x.data();
  T* dst = out.data();
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j)
        dst[b * m * n + j * m + i] = src[b * m * n + i * n + j];
  auto xd = x.impl(), od = out.impl();
  track(g, out, wants(xd), [xd, od, batch, m, n] {
    T* dx = gbuf(xd).data();
    const T* dy = od->grad.data();
    for (int64_t b = 0; b < batch; ++b)
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j)
          dx[b * m * n + i * n + j] += dy[b * m * n + j * m + i];
  });
  return out;
}

template <typename T>
Tensor<T> reshape(Graph<T>& g, const Tensor<T>& x, std::vector<int64_t> new_shape) {
  if (Tensor<T>::count(new_shape) != x.numel())
    throw DimError("reshape: element count mismatch");
  Tensor<T> out = Tensor<T>::from(std::move(new_shape), x.values());
  auto xd = x.impl(), od = out.impl();
  track(g, out, wants(xd), [xd, od] {
    T* dx = gbuf(xd).data();
    const T* dy = od->grad.data();
    for (size_t i = 0; i < xd->values.size(); ++i) dx[i] += dy[i];
  });
  return out;
}

template <typename T>
Tensor<T> linear(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& w,
                 const Tensor<T>& b) {
  if (x.ndim() < 1 || w.ndim() != 2)
    throw DimError("linear: bad ranks");
  int64_t in = w.dim(0), out_dim = w.dim(1);
  if (x.dim(x.ndim() - 1) != in)
    throw DimError("linear: input dim " + x.shape_str() + " vs weight " +
                   w.shape_str());
  if (b.defined() && (b.ndim() != 1 || b.dim(0) != out_dim))
    throw DimError("linear: bias shape mismatch");
  int64_t rows = x.numel() / in;
  auto shape = x.shape();
  shape.back() = out_dim;
  Tensor<T> out(shape);
  detail::gemm_nn(x.data(), w.data(), out.data(), rows, in, out_dim, false);
  if (b.defined()) {
    T* o = out.data();
    const T* bv = b.data();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < out_dim; ++j) o[r * out_dim + j] += bv[j];
  }
  auto xd = x.impl(), wd = w.impl(), od = out.impl();
  auto bd = b.defined() ? b.impl() : nullptr;
  bool any = wants(xd) || wants(wd) || (bd && wants(bd));
  track(g, out, any, [xd, wd, bd, od, rows, in, out_dim] {
    const T* dy = od->grad.data();
    if (wants(xd))
      detail::gemm_nt(dy, wd->values.data(), gbuf(xd).data(), rows, out_dim,
                      in, true);
    if (wants(wd))
      detail::gemm_tn(xd->values.data(), dy, gbuf(wd).data(), rows, in,
                      out_dim, true);
    if (bd && wants(bd)) {
      T* db = gbuf(bd).data();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < out_dim; ++j) db[j] += dy[r * out_dim + j];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  int64_t bn = b.numel();
  bool suffix = b.ndim() <= a.ndim();
  for (int i = 0; suffix && i < b.ndim(); ++i)
    if (b.dim(b.ndim() - 1 - i) != a.dim(a.ndim() - 1 - i)) suffix = false;
  if (!suffix)
    throw DimError("add: shape " + b.shape_str() +
                   " is not broadcastable onto " + a.shape_str());
  int64_t outer = a.numel() / bn;
  Tensor<T> out(a.shape());
  const T* av = a.data();
  const T* bv = b.data();
  T* ov = out.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < bn; ++i) ov[o * bn + i] = av[o * bn + i] + bv[i];
  auto ad = a.impl(), bd = b.impl(), od = out.impl();
  track(g, out, wants(ad) || wants(bd), [ad, bd, od, outer, bn] {
    const T* dy = od->grad.data();
    if (wants(ad)) {
      T* da = gbuf(ad).data();
      for (size_t i = 0; i < ad->values.size(); ++i) da[i] += dy[i];
    }
    if (wants(bd)) {
      T* db = gbuf(bd).data();
      for (int64_t i = 0; i < bn; ++i) {
        T acc = 0;
        for (int64_t o = 0; o < outer; ++o) acc += dy[o * bn + i];
        db[i] += acc;
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimError("mul: shape mismatch " + a.shape_str() + " vs " +
                   b.shape_str());
  Tensor<T> out(a.shape());
  const T* av = a.data();
  const T* bv = b.data();
  T* ov = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) ov[i] = av[i] * bv[i];
  auto ad = a.impl(), bd = b.impl(), od = out.impl();
  track(g, out, wants(ad) || wants(bd), [ad, bd, od] {
    const T* dy = od->grad.data();
    if (wants(ad)) {
      T* da = gbuf(ad).data();
      for (size_t i = 0; i < ad->values.size(); ++i)
        da[i] += dy[i] * bd->values[i];
    }
    if (wants(bd)) {
      T* db = gbuf(bd).data();
      for (size_t i = 0; i < bd->values.size(); ++i)
        db[i] += dy[i] * ad->values[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> scale(Graph<T>& g, const Tensor<T>& x, T c) {
  Tensor<T> out(x.shape());
  const T* xv = x.data();
  T* ov = out.data();
  for (int64_t i = 0; i < x.numel(); ++i) ov[i] = xv[i] * c;
  auto xd = x.impl(), od = out.impl();
  track(g, out, wants(xd), [xd, od, c] {
    T* dx = gbuf(xd).data();
    const T* dy = od->grad.data();
    for (size_t i = 0; i < xd->values.size(); ++i) dx[i] += dy[i] * c;
  });
  return out;
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

template <typename T>
T act_forward(T x, Act kind) {
  switch (kind) {
    case Act::relu:
      return x > T(0) ? x : T(0);
    case Act::silu: {
      T s = T(1) / (T(1) + std::exp(-x));
      return x * s;
    }
    case Act::gelu: {
      T u = T(kGeluC) * (x + T(kGeluA) * x * x * x);
      return T(0.5) * x * (T(1) + std::tanh(u));
    }
    case Act::none:
      return x;
  }
  return x;
}

template <typename T>
T act_backward(T x, Act kind) {
  switch (kind) {
    case Act::relu:
      return x > T(0) ? T(1) : T(0);
    case Act::silu: {
      T s = T(1) / (T(1) + std::exp(-x));
      return s * (T(1) + x * (T(1) - s));
    }
    case Act::gelu: {
      T u = T(kGeluC) * (x + T(kGeluA) * x * x * x);
      T th = std::tanh(u);
      T du = T(kGeluC) * (T(1) + T(3) * T(kGeluA) * x * x);
      return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
    }
    case Act::none:
      return T(1);
  }
  return T(1);
}
}  // namespace

template <typename T>
Tensor<T> activation(Graph<T>& g, const Tensor<T>& x, Act kind) {
  if (kind == Act::none) return x;
  Tensor<T> out(x.shape());
  const T* xv = x.data();
  T* ov = out.data();
  for (int64_t i = 0; i < x.numel(); ++i) ov[i] = act_forward(xv[i], kind);
  auto xd = x.impl(), od = out.impl();
  track(g, out, wants(xd), [xd, od, kind] {
    T* dx = gbuf(xd).data();
    const T* dy = od->grad.data();
    for (size_t i = 0; i < xd->values.size(); ++i)
      dx[i] += dy[i] * act_backward(xd->values[i], kind);
  });
  return out;
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_lastdim(Graph<T>& g, const Tensor<T>& x) {
  if (x.ndim() < 1 || x.dim(x.ndim() - 1) < 1)
    throw DimError("softmax_lastdim: empty last dim");
  int64_t n = x.dim(x.ndim() - 1);
  int64_t rows = x.numel() / n;
  Tensor<T> out(x.shape());
  const T* xv = x.data();
  T* ov = out.data();
  parallel_for(
      0, rows,
      [&](int64_t lo, int64_t hi) {
        for (int64_t r = lo; r < hi; ++r) {
          const T* xr = xv + r * n;
          T* yr = ov + r * n;
          T m = xr[0];
          for (int64_t i = 1; i < n; ++i) m = std::max(m, xr[i]);
          T s = 0;
          for (int64_t i = 0; i < n; ++i) {
            yr[i] = std::exp(xr[i] - m);
            s += yr[i];
          }
          T inv = T(1) / s;
          for (int64_t i = 0; i < n; ++i) yr[i] *= inv;
        }
      },
      64);
  auto xd = x.impl(), od = out.impl();
  track(g, out, wants(xd), [xd, od, rows, n] {
    T* dx = gbuf(xd).data();
    const T* y = od->values.data();
    const T* dy = od->grad.data();
    for (int64_t r = 0; r < rows; ++r) {
      const T* yr = y + r * n;
      const T* dyr = dy + r * n;
      T dot = 0;
      for (int64_t i = 0; i < n; ++i) dot += yr[i] * dyr[i];
      T* dxr = dx + r * n;
      for (int64_t i = 0; i < n; ++i) dxr[i] += yr[i] * (dyr[i] - dot);
    }
  });
  return out;
}

template <typename T>
Tensor<T> layernorm(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& gamma,
                    const Tensor<T>& beta, T eps) {
  int64_t d = x.dim(x.ndim() - 1);
  if (gamma.numel() != d || beta.numel() != d)
    throw DimError("layernorm: gamma/beta length must equal last dim");
  if (eps <= T(0)) throw ConfigError("layernorm: eps must be positive");
  int64_t rows = x.numel() / d;
  Tensor<T> out(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(size_t(x.numel()));
  auto inv_std = std::make_shared<std::vector<T>>(size_t(rows));
  const T* xv = x.data();
  const T* gv = gamma.data();
  const T* bv = beta.data();
  T* ov = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = xv + r * d;
    T mean = 0;
    for (int64_t i = 0; i < d; ++i) mean += xr[i];
    mean /= T(d);
    T var = 0;
    for (int64_t i = 0; i < d; ++i) {
      T c = xr[i] - mean;
      var += c * c;
    }
    var /= T(d);
    T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[size_t(r)] = is;
    T* hr = xhat->data() + r * d;
    T* yr = ov + r * d;
    for (int64_t i = 0; i < d; ++i) {
      hr[i] = (xr[i] - mean) * is;
      yr[i] = gv[i] * hr[i] + bv[i];
    }
  }
  auto xd = x.impl(), gd = gamma.impl(), bd = beta.impl(), od = out.impl();
  bool any = wants(xd) || wants(gd) || wants(bd);
  track(g, out, any, [xd, gd, bd, od, xhat, inv_std, rows, d] {
    const T* dy = od->grad.data();
    const T* h = xhat->data();
    if (wants(gd)) {
      T* dg = gbuf(gd).data();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t i = 0; i < d; ++i) dg[i] += dy[r * d + i] * h[r * d + i];
    }
    if (wants(bd)) {
      T* db = gbuf(bd).data();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t i = 0; i < d; ++i) db[i] += dy[r * d + i];
    }
    if (wants(xd)) {
      T* dx = gbuf(xd).data();
      const T* gv = gd->values.data();
      for (int64_t r = 0; r < rows; ++r) {
        const T* dyr = dy + r * d;
        const T* hr = h + r * d;
        T sum_g = 0, sum_gh = 0;
        for (int64_t i = 0; i < d; ++i) {
          T gdy = gv[i] * dyr[i];
          sum_g += gdy;
          sum_gh += gdy * hr[i];
        }
        T inv_d = T(1) / T(d);
        T is = (*inv_std)[size_t(r)];
        T* dxr = dx + r * d;
        for (int64_t i = 0; i < d; ++i) {
          T gdy = gv[i] * dyr[i];
          dxr[i] += is * (gdy - sum_g * inv_d - hr[i] * sum_gh * inv_d);
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> batchnorm2d(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& gamma,
                      const Tensor<T>& beta, Tensor<T>& running_mean,
                      Tensor<T>& running_var, bool training, T eps,
                      T momentum) {
  if (x.ndim() != 4) throw DimError("batchnorm2d: expected NCHW input");
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C ||
      running_var.numel() != C)
    throw DimError("batchnorm2d: per-channel parameter length mismatch");
  int64_t M = N * H * W;
  if (M < 1) throw DimError("batchnorm2d: empty batch");
  int64_t hw = H * W;
  Tensor<T> out(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(size_t(x.numel()));
  auto inv_std = std::make_shared<std::vector<T>>(size_t(C));
  const T* xv = x.data();
  const T* gv = gamma.data();
  const T* bv = beta.data();
  T* ov = out.data();
  for (int64_t c = 0; c < C; ++c) {
    T mean, var;
    if (training) {
      T s = 0;
      for (int64_t n = 0; n < N; ++n) {
        const T* p = xv + (n * C + c) * hw;
        for (int64_t i = 0; i < hw; ++i) s += p[i];
      }
      mean = s / T(M);
      T v = 0;
      for (int64_t n = 0; n < N; ++n) {
        const T* p = xv + (n * C + c) * hw;
        for (int64_t i = 0; i < hw; ++i) {
          T d = p[i] - mean;
          v += d * d;
        }
      }
      var = v / T(M);
      T unbiased = M > 1 ? v / T(M - 1) : var;
      running_mean.data()[c] =
          (T(1) - momentum) * running_mean.data()[c] + momentum * mean;
      running_var.data()[c] =
          (T(1) - momentum) * running_var.data()[c] + momentum * unbiased;
    } else {
      mean = running_mean.data()[c];
      var = running_var.data()[c];
    }
    T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[size_t(c)] = is;
    for (int64_t n = 0; n < N; ++n) {
      const T* p = xv + (n * C + c) * hw;
      T* h = xhat->data() + (n * C + c) * hw;
      T* y = ov + (n * C + c) * hw;
      for (int64_t i = 0; i < hw; ++i) {
        h[i] = (p[i] - mean) * is;
        y[i] = gv[c] * h[i] + bv[c];
      }
    }
  }
  auto xd = x.impl(), gd = gamma.impl(), bd = beta.impl(), od = out.impl();
  bool any = wants(xd) || wants(gd) || wants(bd);
  track(g, out, any, [xd, gd, bd, od, xhat, inv_std, N, C, hw, M, training] {
    const T* dy = od->grad.data();
    const T* h = xhat->data();
    const T* gv = gd->values.data();
    for (int64_t c = 0; c < C; ++c) {
      T sum_dy = 0, sum_dyh = 0;
      for (int64_t n = 0; n < N; ++n) {
        const T* dyp = dy + (n * C + c) * hw;
        const T* hp = h + (n * C + c) * hw;
        for (int64_t i = 0; i < hw; ++i) {
          sum_dy += dyp[i];
          sum_dyh += dyp[i] * hp[i];
        }
      }
      if (wants(gd)) gbuf(gd)[size_t(c)] += sum_dyh;
      if (wants(bd)) gbuf(bd)[size_t(c)] += sum_dy;
      if (wants(xd)) {
        T* dx = gbuf(xd).data();
        T is = (*inv_std)[size_t(c)];
        T gis = gv[c] * is;
        T inv_m = T(1) / T(M);
        for (int64_t n = 0; n < N; ++n) {
          const T* dyp = dy + (n * C + c) * hw;
          const T* hp = h + (n * C + c) * hw;
          T* dxp = dx + (n * C + c) * hw;
          if (training) {
            for (int64_t i = 0; i < hw; ++i)
              dxp[i] +=
                  gis * (dyp[i] - sum_dy * inv_m - hp[i] * sum_dyh * inv_m);
          } else {
            for (int64_t i = 0; i < hw; ++i) dxp[i] += gis * dyp[i];
          }
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// structure
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(Graph<T>& g, const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw DimError("concat_channels: no inputs");
  int64_t N = xs[0].dim(0), H = xs[0].dim(2), W = xs[0].dim(3);
  int64_t C = 0;
  for (const auto& x : xs) {
    if (x.ndim() != 4 || x.dim(0) != N || x.dim(2) != H || x.dim(3) != W)
      throw DimError("concat_channels: inputs must share N,H,W");
    C += x.dim(1);
  }
  Tensor<T> out({N, C, H, W});
  int64_t hw = H * W;
  T* ov = out.data();
  int64_t c0 = 0;
  for (const auto& x : xs) {
    int64_t ci = x.dim(1);
    const T* xv = x.data();
    for (int64_t n = 0; n < N; ++n)
      std::copy(xv + n * ci * hw, xv + (n + 1) * ci * hw,
                ov + (n * C + c0) * hw);
    c0 += ci;
  }
  bool any = false;
  std::vector<std::shared_ptr<TensorData<T>>> ins;
  ins.reserve(xs.size());
  std::vector<int64_t> cs;
  for (const auto& x : xs) {
    ins.push_back(x.impl());
    cs.push_back(x.dim(1));
    any = any || wants(x.impl());
  }
  auto od = out.impl();
  track(g, out, any, [ins, cs, od, N, C, hw] {
    const T* dy = od->grad.data();
    int64_t c0 = 0;
    for (size_t b = 0; b < ins.size(); ++b) {
      int64_t ci = cs[b];
      if (wants(ins[b])) {
        T* dx = gbuf(ins[b]).data();
        for (int64_t n = 0; n < N; ++n) {
          const T* src = dy + (n * C + c0) * hw;
          T* dst = dx + n * ci * hw;
          for (int64_t i = 0; i < ci * hw; ++i) dst[i] += src[i];
        }
      }
      c0 += ci;
    }
  });
  return out;
}

template <typename T>
Tensor<T> img2seq(Graph<T>& g, const Tensor<T>& x) {
  if (x.ndim() != 4) throw DimError("img2seq: expected NCHW input");
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t L = H * W;
  Tensor<T> out({N, L, C});
  const T* xv = x.data();
  T* ov = out.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const T* src = xv + (n * C + c) * L;
      T* dst = ov + n * L * C + c;
      for (int64_t p = 0; p < L; ++p) dst[p * C] = src[p];
    }
  auto xd = x.impl(), od = out.impl();
  track(g, out, wants(xd), [xd, od, N, C, L] {
    T* dx = gbuf(xd).data();
    const T* dy = od->grad.data();
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c) {
        T* dst = dx + (n * C + c) * L;
        const T* src = dy + n * L * C + c;
        for (int64_t p = 0; p < L; ++p) dst[p] += src[p * C];
      }
  });
  return out;
}

template <typename T>
Tensor<T> seq2img(Graph<T>& g, const Tensor<T>& x, int64_t h, int64_t w) {
  if (x.ndim() != 3) throw DimError("seq2img: expected [N,L,C] input");
  int64_t N = x.dim(0), L = x.dim(1), C = x.dim(2);
  if (L != h * w)
    throw DimError("seq2img: token count " + std::to_string(L) +
                   " != h*w = " + std::to_string(h * w));
  Tensor<T> out({N, C, h, w});
  const T* xv = x.data();
  T* ov = out.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      T* dst = ov + (n * C + c) * L;
      const T* src = xv + n * L * C + c;
      for (int64_t p = 0; p < L; ++p) dst[p] = src[p * C];
    }
  auto xd = x.impl(), od = out.impl();
  track(g, out, wants(xd), [xd, od, N, C, L] {
    T* dx = gbuf(xd).data();
    const T* dy = od->grad.data();
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c) {
        const T* src = dy + (n * C + c) * L;
        T* dst = dx + n * L * C + c;
        for (int64_t p = 0; p < L; ++p) dst[p * C] += src[p];
      }
  });
  return out;
}

template <typename T>
Tensor<T> slice_tokens(Graph<T>& g, const Tensor<T>& x, int64_t start,
                       int64_t end) {
  if (x.ndim() != 3) throw DimError("slice_tokens: expected [N,L,D] input");
  int64_t N = x.dim(0), L = x.dim(1), D = x.dim(2);
  if (start < 0 || end > L || start >= end)
    throw DimError("slice_tokens: bad range");
  int64_t M = end - start;
  Tensor<T> out({N, M, D});
  const T* xv = x.data();
  T* ov = out.data();
  for (int64_t n = 0; n < N; ++n)
    std::copy(xv + (n * L + start) * D, xv + (n * L + end) * D,
              ov + n * M * D);
  auto xd = x.impl(), od = out.impl();
  track(g, out, wants(xd), [xd, od, N, L, D, start, M] {
    T* dx = gbuf(xd).data();
    const T* dy = od->grad.data();
    for (int64_t n = 0; n < N; ++n) {
      const T* src = dy + n * M * D;
      T* dst = dx + (n * L + start) * D;
      for (int64_t i = 0; i < M * D; ++i) dst[i] += src[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> concat_tokens(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != b.dim(2))
    throw DimError("concat_tokens: incompatible shapes " + a.shape_str() +
                   " / " + b.shape_str());
  int64_t N = a.dim(0), La = a.dim(1), Lb = b.dim(1), D = a.dim(2);
  Tensor<T> out({N, La + Lb, D});
  const T* av = a.data();
  const T* bv = b.data();
  T* ov = out.data();
  for (int64_t n = 0; n < N; ++n) {
    std::copy(av + n * La * D, av + (n + 1) * La * D,
              ov + n * (La + Lb) * D);
    std::copy(bv + n * Lb * D, bv + (n + 1) * Lb * D,
              ov + (n * (La + Lb) + La) * D);
  }
  auto ad = a.impl(), bd = b.impl(), od = out.impl();
  track(g, out, wants(ad) || wants(bd), [ad, bd, od, N, La, Lb, D] {
    const T* dy = od->grad.data();
    if (wants(ad)) {
      T* da = gbuf(ad).data();
      for (int64_t n = 0; n < N; ++n) {
        const T* src = dy + n * (La + Lb) * D;
        T* dst = da + n * La * D;
        for (int64_t i = 0; i < La * D; ++i) dst[i] += src[i];
      }
    }
    if (wants(bd)) {
      T* db = gbuf(bd).data();
      for (int64_t n = 0; n < N; ++n) {
        const T* src = dy + (n * (La + Lb) + La) * D;
        T* dst = db + n * Lb * D;
        for (int64_t i = 0; i < Lb * D; ++i) dst[i] += src[i];
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> repeat_batch(Graph<T>& g, const Tensor<T>& x, int64_t n) {
  if (x.ndim() < 1 || x.dim(0) != 1)
    throw DimError("repeat_batch: leading dim must be 1");
  auto shape = x.shape();
  shape[0] = n;
  int64_t sz = x.numel();
  Tensor<T> out(shape);
  T* ov = out.data();
  for (int64_t i = 0; i < n; ++i)
    std::copy(x.data(), x.data() + sz, ov + i * sz);
  auto xd = x.impl(), od = out.impl();
  track(g, out, wants(xd), [xd, od, n, sz] {
    T* dx = gbuf(xd).data();
    const T* dy = od->grad.data();
    for (int64_t j = 0; j < sz; ++j) {
      T acc = 0;
      for (int64_t i = 0; i < n; ++i) acc += dy[i * sz + j];
      dx[j] += acc;
    }
  });
  return out;
}

template <typename T>
Tensor<T> mean_spatial(Graph<T>& g, const Tensor<T>& x) {
  if (x.ndim() != 4) throw DimError("mean_spatial: expected NCHW input");
  int64_t N = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out({N, C});
  const T* xv = x.data();
  T* ov = out.data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    T s = 0;
    const T* p = xv + nc * hw;
    for (int64_t i = 0; i < hw; ++i) s += p[i];
    ov[nc] = s / T(hw);
  }
  auto xd = x.impl(), od = out.impl();
  track(g, out, wants(xd), [xd, od, N, C, hw] {
    T* dx = gbuf(xd).data();
    const T* dy = od->grad.data();
    for (int64_t nc = 0; nc < N * C; ++nc) {
      T v = dy[nc] / T(hw);
      T* p = dx + nc * hw;
      for (int64_t i = 0; i < hw; ++i) p[i] += v;
    }
  });
  return out;
}

template <typename T>
Tensor<T> split_heads(Graph<T>& g, const Tensor<T>& x, int64_t heads) {
  if (x.ndim() != 3) throw DimError("split_heads: expected [N,L,D] input");
  int64_t N = x.dim(0), L = x.dim(1), D = x.dim(2);
  if (heads < 1 || D % heads != 0)
    throw DimError("split_heads: dim " + std::to_string(D) +
                   " not divisible by heads " + std::to_string(heads));
  int64_t dh = D / heads;
  Tensor<T> out({N * heads, L, dh});
  const T* xv = x.data();
  T* ov = out.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t a = 0; a < heads; ++a)
      for (int64_t l = 0; l < L; ++l)
        std::copy(xv + (n * L + l) * D + a * dh,
                  xv + (n * L + l) * D + (a + 1) * dh,
                  ov + ((n * heads + a) * L + l) * dh);
  auto xd = x.impl(), od = out.impl();
  track(g, out, wants(xd), [xd, od, N, L, D, heads, dh] {
    T* dx = gbuf(xd).data();
    const T* dy = od->grad.data();
    for (int64_t n = 0; n < N; ++n)
      for (int64_t a = 0; a < heads; ++a)
        for (int64_t l = 0; l < L; ++l) {
          const T* src = dy + ((n * heads + a) * L + l) * dh;
          T* dst = dx + (n * L + l) * D + a * dh;
          for (int64_t j = 0; j < dh; ++j) dst[j] += src[j];
        }
  });
  return out;
}

template <typename T>
Tensor<T> merge_heads(Graph<T>& g, const Tensor<T>& x, int64_t heads) {
  if (x.ndim() != 3) throw DimError("merge_heads: expected [N*h,L,dh] input");
  int64_t NH = x.dim(0), L = x.dim(1), dh = x.dim(2);
  if (heads < 1 || NH % heads != 0)
    throw DimError("merge_heads: batch not divisible by heads");
  int64_t N = NH / heads, D = dh * heads;
  Tensor<T> out({N, L, D});
  const T* xv = x.data();
  T* ov = out.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t a = 0; a < heads; ++a)
      for (int64_t l = 0; l < L; ++l)
        std::copy(xv + ((n * heads + a) * L + l) * dh,
                  xv + ((n * heads + a) * L + l + 1) * dh,
                  ov + (n * L + l) * D + a * dh);
  auto xd = x.impl(), od = out.impl();
  track(g, out, wants(xd), [xd, od, N, L, D, heads, dh] {
    T* dx = gbuf(xd).data();
    const T* dy = od->grad.data();
    for (int64_t n = 0; n < N; ++n)
      for (int64_t a = 0; a < heads; ++a)
        for (int64_t l = 0; l < L; ++l) {
          const T* src = dy + (n * L + l) * D + a * dh;
          T* dst = dx + ((n * heads + a) * L + l) * dh;
          for (int64_t j = 0; j < dh; ++j) dst[j] += src[j];
        }
  });
  return out;
}

// ---------------------------------------------------------------------------
// reductions / loss
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(Graph<T>& g, const Tensor<T>& x) {
  T s = 0;
  const T* xv = x.data();
  for (int64_t i = 0; i < x.numel(); ++i) s += xv[i];
  Tensor<T> out = Tensor<T>::scalar(s);
  auto xd = x.impl(), od = out.impl();
  track(g, out, wants(xd), [xd, od] {
    T v = od->grad[0];
    T* dx = gbuf(xd).data();
    for (size_t i = 0; i < xd->values.size(); ++i) dx[i] += v;
  });
  return out;
}

template <typename T>
Tensor<T> select_scalar(Graph<T>& g, const Tensor<T>& x, int64_t n, int64_t k) {
  if (x.ndim() != 2) throw DimError("select_scalar: expected [N,K] input");
  if (n < 0 || n >= x.dim(0) || k < 0 || k >= x.dim(1))
    throw DimError("select_scalar: index out of range");
  int64_t off = n * x.dim(1) + k;
  Tensor<T> out = Tensor<T>::scalar(x.data()[off]);
  auto xd = x.impl(), od = out.impl();
  track(g, out, wants(xd), [xd, od, off] { gbuf(xd)[size_t(off)] += od->grad[0]; });
  return out;
}

template <typename T>
Tensor<T> cross_entropy(Graph<T>& g, const Tensor<T>& logits,
                        const std::vector<int>& labels) {
  if (logits.ndim() != 2) throw DimError("cross_entropy: expected [N,K] logits");
  int64_t N = logits.dim(0), K = logits.dim(1);
  if (int64_t(labels.size()) != N)
    throw DimError("cross_entropy: label count mismatch");
  for (int y : labels)
    if (y < 0 || y >= K)
      throw DataError("cross_entropy: label " + std::to_string(y) +
                      " out of range [0," + std::to_string(K) + ")");
  auto probs = std::make_shared<std::vector<T>>(size_t(N * K));
  const T* z = logits.data();
  T loss = 0;
  for (int64_t i = 0; i < N; ++i) {
    const T* zi = z + i * K;
    T m = zi[0];
    for (int64_t k = 1; k < K; ++k) m = std::max(m, zi[k]);
    T s = 0;
    T* pi = probs->data() + i * K;
    for (int64_t k = 0; k < K; ++k) {
      pi[k] = std::exp(zi[k] - m);
      s += pi[k];
    }
    T inv = T(1) / s;
    for (int64_t k = 0; k < K; ++k) pi[k] *= inv;
    loss += m + std::log(s) - zi[labels[size_t(i)]];
  }
  loss /= T(N);
  Tensor<T> out = Tensor<T>::scalar(loss);
  auto zd = logits.impl(), od = out.impl();
  auto lab = std::make_shared<std::vector<int>>(labels);
  track(g, out, wants(zd), [zd, od, probs, lab, N, K] {
    T up = od->grad[0] / T(N);
    T* dz = gbuf(zd).data();
    const T* p = probs->data();
    for (int64_t i = 0; i < N; ++i)
      for (int64_t k = 0; k < K; ++k) {
        T onehot = (k == (*lab)[size_t(i)]) ? T(1) : T(0);
        dz[i * K + k] += (p[i * K + k] - onehot) * up;
      }
  });
  return out;
}

// ---------------------------------------------------------------------------

#define VITAE_INSTANTIATE_OPS(T)                                               \
  template Tensor<T> matmul<T>(Graph<T>&, const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> bmm<T>(Graph<T>&, const Tensor<T>&, const Tensor<T>&);    \
  template Tensor<T> transpose_last2<T>(Graph<T>&, const Tensor<T>&);          \
  template Tensor<T> reshape<T>(Graph<T>&, const Tensor<T>&,                   \
                                std::vector<int64_t>);                         \
  template Tensor<T> linear<T>(Graph<T>&, const Tensor<T>&, const Tensor<T>&,  \
                               const Tensor<T>&);                              \
  template Tensor<T> add<T>(Graph<T>&, const Tensor<T>&, const Tensor<T>&);    \
  template Tensor<T> mul<T>(Graph<T>&, const Tensor<T>&, const Tensor<T>&);    \
  template Tensor<T> scale<T>(Graph<T>&, const Tensor<T>&, T);                 \
  template Tensor<T> activation<T>(Graph<T>&, const Tensor<T>&, Act);          \
  template Tensor<T> softmax_lastdim<T>(Graph<T>&, const Tensor<T>&);          \
  template Tensor<T> layernorm<T>(Graph<T>&, const Tensor<T>&,                 \
                                  const Tensor<T>&, const Tensor<T>&, T);      \
  template Tensor<T> batchnorm2d<T>(Graph<T>&, const Tensor<T>&,               \
                                    const Tensor<T>&, const Tensor<T>&,        \
                                    Tensor<T>&, Tensor<T>&, bool, T, T);       \
  template Tensor<T> concat_channels<T>(Graph<T>&,                             \
                                        const std::vector<Tensor<T>>&);        \
  template Tensor<T> img2seq<T>(Graph<T>&, const Tensor<T>&);                  \
  template Tensor<T> seq2img<T>(Graph<T>&, const Tensor<T>&, int64_t,          \
                                int64_t);                                      \
  template Tensor<T> slice_tokens<T>(Graph<T>&, const Tensor<T>&, int64_t,     \
                                     int64_t);                                 \
  template Tensor<T> concat_tokens<T>(Graph<T>&, const Tensor<T>&,             \
                                      const Tensor<T>&);                       \
  template Tensor<T> repeat_batch<T>(Graph<T>&, const Tensor<T>&, int64_t);    \
  template Tensor<T> mean_spatial<T>(Graph<T>&, const Tensor<T>&);             \
  template Tensor<T> split_heads<T>(Graph<T>&, const Tensor<T>&, int64_t);     \
  template Tensor<T> merge_heads<T>(Graph<T>&, const Tensor<T>&, int64_t);     \
  template Tensor<T> sum_all<T>(Graph<T>&, const Tensor<T>&);                  \
  template Tensor<T> select_scalar<T>(Graph<T>&, const Tensor<T>&, int64_t,    \
                                      int64_t);                                \
  template Tensor<T> cross_entropy<T>(Graph<T>&, const Tensor<T>&,             \
                                      const std::vector<int>&);

VITAE_INSTANTIATE_OPS(float)
VITAE_INSTANTIATE_OPS(double)

}  // namespace vitae
