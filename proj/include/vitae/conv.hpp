#ifndef VITAE_CONV_HPP_
#define VITAE_CONV_HPP_

#include <utility>

#include "vitae/tensor.hpp"

namespace vitae {

struct ConvSpec {
  int kh = 1, kw = 1;
  int sh = 1, sw = 1;
  int dh = 1, dw = 1;
  int groups = 1;
  int ph = 0, pw = 0;

  static ConvSpec square(int k, int stride, int dilation, int pad,
                         int groups = 1) {
    return ConvSpec{k, k, stride, stride, dilation, dilation, groups, pad, pad};
  }

  int64_t out_h(int64_t in_h) const {
    return (in_h + 2 * ph - int64_t(dh) * (kh - 1) - 1) / sh + 1;
  }
  int64_t out_w(int64_t in_w) const {
    return (in_w + 2 * pw - int64_t(dw) * (kw - 1) - 1) / sw + 1;
  }
};

// Cross-correlation (no kernel flip) with zero padding, stride, dilation and
// channel groups. input: [N,Cin,H,W], weight: [Cout,Cin/groups,kh,kw],
// bias: [Cout] or undefined.
template <typename T>
Tensor<T> conv2d(Graph<T>& g, const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, const ConvSpec& spec);

}  // namespace vitae

#endif
