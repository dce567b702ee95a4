#include "vitae/conv.hpp"

#include <algorithm>
#include <string>
#include <vector>

#include "vitae/error.hpp"
#include "vitae/ops.hpp"
#include "vitae/parallel.hpp"

namespace vitae {

namespace {

template <typename T>
std::vector<T>& gbuf(const std::shared_ptr<TensorData<T>>& t) {
  if (t->grad.empty()) t->grad.assign(t->values.size(), T(0));
  return t->grad;
}

struct ConvDims {
  int64_t N, Cin, H, W, Cout, Hout, Wout;
  int64_t cg_in, cg_out;  // channels per group
  int64_t kk;             // kh*kw
  int64_t patch;          // cg_in*kh*kw (column height)
  int64_t area;           // Hout*Wout
};

// Gathers one (sample, group) slice into columns: col[ci*kk + t, p].
template <typename T>
void im2col(const T* x, const ConvDims& d, const ConvSpec& s, int64_t n,
            int64_t group, T* col) {
  for (int64_t ci = 0; ci < d.cg_in; ++ci) {
    const T* xc = x + ((n * d.Cin + group * d.cg_in + ci) * d.H) * d.W;
    for (int ki = 0; ki < s.kh; ++ki)
      for (int kj = 0; kj < s.kw; ++kj) {
        T* row = col + (ci * d.kk + ki * s.kw + kj) * d.area;
        for (int64_t oy = 0; oy < d.Hout; ++oy) {
          int64_t iy = oy * s.sh - s.ph + int64_t(ki) * s.dh;
          T* out_row = row + oy * d.Wout;
          if (iy < 0 || iy >= d.H) {
            std::fill(out_row, out_row + d.Wout, T(0));
            continue;
          }
          const T* in_row = xc + iy * d.W;
          for (int64_t ox = 0; ox < d.Wout; ++ox) {
            int64_t ix = ox * s.sw - s.pw + int64_t(kj) * s.dw;
            out_row[ox] = (ix >= 0 && ix < d.W) ? in_row[ix] : T(0);
          }
        }
      }
  }
}

// Scatter-adds columns back into the input gradient slice.
template <typename T>
void col2im_add(const T* col, const ConvDims& d, const ConvSpec& s, int64_t n,
                int64_t group, T* dx) {
  for (int64_t ci = 0; ci < d.cg_in; ++ci) {
    T* xc = dx + ((n * d.Cin + group * d.cg_in + ci) * d.H) * d.W;
    for (int ki = 0; ki < s.kh; ++ki)
      for (int kj = 0; kj < s.kw; ++kj) {
        const T* row = col + (ci * d.kk + ki * s.kw + kj) * d.area;
        for (int64_t oy = 0; oy < d.Hout; ++oy) {
          int64_t iy = oy * s.sh - s.ph + int64_t(ki) * s.dh;
          if (iy < 0 || iy >= d.H) continue;
          const T* in_row = row + oy * d.Wout;
          T* out_row = xc + iy * d.W;
          for (int64_t ox = 0; ox < d.Wout; ++ox) {
            int64_t ix = ox * s.sw - s.pw + int64_t(kj) * s.dw;
            if (ix >= 0 && ix < d.W) out_row[ix] += in_row[ox];
          }
        }
      }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(Graph<T>& g, const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, const ConvSpec& spec) {
  if (input.ndim() != 4 || weight.ndim() != 4)
    throw DimError("conv2d: input must be NCHW and weight [Cout,Cin/g,kh,kw]");
  if (spec.kh < 1 || spec.kw < 1 || spec.sh < 1 || spec.sw < 1 ||
      spec.dh < 1 || spec.dw < 1 || spec.groups < 1 || spec.ph < 0 ||
      spec.pw < 0)
    throw ConfigError("conv2d: invalid ConvSpec field");
  ConvDims d;
  d.N = input.dim(0);
  d.Cin = input.dim(1);
  d.H = input.dim(2);
  d.W = input.dim(3);
  d.Cout = weight.dim(0);
  if (d.Cin % spec.groups != 0 || d.Cout % spec.groups != 0)
    throw DimError("conv2d: channel counts not divisible by groups=" +
                   std::to_string(spec.groups));
  d.cg_in = d.Cin / spec.groups;
  d.cg_out = d.Cout / spec.groups;
  if (weight.dim(1) != d.cg_in || weight.dim(2) != spec.kh ||
      weight.dim(3) != spec.kw)
    throw DimError("conv2d: weight shape " + weight.shape_str() +
                   " inconsistent with spec");
  if (bias.defined() && bias.numel() != d.Cout)
    throw DimError("conv2d: bias length must equal Cout");
  d.Hout = spec.out_h(d.H);
  d.Wout = spec.out_w(d.W);
  if (d.Hout < 1 || d.Wout < 1)
    throw ConfigError("conv2d: non-positive output size " +
                      std::to_string(d.Hout) + "x" + std::to_string(d.Wout));
  d.kk = int64_t(spec.kh) * spec.kw;
  d.patch = d.cg_in * d.kk;
  d.area = d.Hout * d.Wout;

  Tensor<T> out({d.N, d.Cout, d.Hout, d.Wout});
  {
    std::vector<T> col(size_t(d.patch * d.area));
    const T* xv = input.data();
    const T* wv = weight.data();
    T* ov = out.data();
    for (int64_t n = 0; n < d.N; ++n)
      for (int64_t grp = 0; grp < spec.groups; ++grp) {
        im2col(xv, d, spec, n, grp, col.data());
        detail::gemm_nn(wv + grp * d.cg_out * d.patch, col.data(),
                        ov + (n * d.Cout + grp * d.cg_out) * d.area, d.cg_out,
                        d.patch, d.area, false);
      }
    if (bias.defined()) {
      const T* bv = bias.data();
      for (int64_t n = 0; n < d.N; ++n)
        for (int64_t c = 0; c < d.Cout; ++c) {
          T* p = ov + (n * d.Cout + c) * d.area;
          for (int64_t i = 0; i < d.area; ++i) p[i] += bv[c];
        }
    }
  }

  auto xd = input.impl(), wd = weight.impl(), od = out.impl();
  auto bd = bias.defined() ? bias.impl() : nullptr;
  bool any = xd->requires_grad || wd->requires_grad ||
             (bd && bd->requires_grad);
  if (g.recording() && any) {
    out.impl()->requires_grad = true;
    out.impl()->from_op = true;
    ConvSpec s = spec;
    g.record(od, [xd, wd, bd, od, d, s] {
      const T* dy = od->grad.data();
      const T* xv = xd->values.data();
      const T* wv = wd->values.data();
      std::vector<T> col(size_t(d.patch * d.area));
      std::vector<T> dcol;
      T* dw = wd->requires_grad ? gbuf(wd).data() : nullptr;
      T* dx = xd->requires_grad ? gbuf(xd).data() : nullptr;
      if (dx) dcol.resize(size_t(d.patch * d.area));
      // Batch loop stays sequential so per-element weight-gradient sums keep
      // a fixed order regardless of thread count.
      for (int64_t n = 0; n < d.N; ++n)
        for (int64_t grp = 0; grp < (int64_t)s.groups; ++grp) {
          const T* dy_g = dy + (n * d.Cout + grp * d.cg_out) * d.area;
          if (dw) {
            im2col(xv, d, s, n, grp, col.data());
            detail::gemm_nt(dy_g, col.data(), dw + grp * d.cg_out * d.patch,
                            d.cg_out, d.area, d.patch, true);
          }
          if (dx) {
            detail::gemm_tn(wv + grp * d.cg_out * d.patch, dy_g, dcol.data(),
                            d.cg_out, d.patch, d.area, false);
            col2im_add(dcol.data(), d, s, n, grp, dx);
          }
        }
      if (bd && bd->requires_grad) {
        T* db = gbuf(bd).data();
        for (int64_t n = 0; n < d.N; ++n)
          for (int64_t c = 0; c < d.Cout; ++c) {
            const T* p = dy + (n * d.Cout + c) * d.area;
            T acc = 0;
            for (int64_t i = 0; i < d.area; ++i) acc += p[i];
            db[c] += acc;
          }
      }
    });
  }
  return out;
}

template Tensor<float> conv2d<float>(Graph<float>&, const Tensor<float>&,
                                     const Tensor<float>&,
                                     const Tensor<float>&, const ConvSpec&);
template Tensor<double> conv2d<double>(Graph<double>&, const Tensor<double>&,
                                       const Tensor<double>&,
                                       const Tensor<double>&, const ConvSpec&);

}  // namespace vitae
