#ifndef VITAE_OPS_HPP_
#define VITAE_OPS_HPP_

#include <vector>

#include "vitae/tensor.hpp"

namespace vitae {

enum class Act { silu, gelu, relu, none };

// -- linear algebra ---------------------------------------------------------

// [m,k] x [k,n] -> [m,n]
template <typename T>
Tensor<T> matmul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b);

// [B,m,k] x [B,k,n] -> [B,m,n]
template <typename T>
Tensor<T> bmm(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> transpose_last2(Graph<T>& g, const Tensor<T>& x);

// x reshaped to new_shape (copying); element count must match.
template <typename T>
Tensor<T> reshape(Graph<T>& g, const Tensor<T>& x, std::vector<int64_t> new_shape);

// x @ w + b over the last dim; x: [..., in], w: [in, out], b: [out] or undefined.
template <typename T>
Tensor<T> linear(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& w,
                 const Tensor<T>& b);

// -- elementwise ------------------------------------------------------------

// a + b. b may have a shape that is a suffix of a's (right-aligned broadcast,
// e.g. bias [D] onto [N,L,D]); its gradient sums over the broadcast dims.
template <typename T>
Tensor<T> add(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(Graph<T>& g, const Tensor<T>& x, T c);

template <typename T>
Tensor<T> activation(Graph<T>& g, const Tensor<T>& x, Act kind);

// -- normalization ----------------------------------------------------------

template <typename T>
Tensor<T> softmax_lastdim(Graph<T>& g, const Tensor<T>& x);

// Normalizes over the last dim; gamma/beta: [d].
template <typename T>
Tensor<T> layernorm(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& gamma,
                    const Tensor<T>& beta, T eps);

// NCHW batch norm. train mode normalizes by batch stats and updates the
// running buffers in place; eval mode normalizes by the running buffers.
template <typename T>
Tensor<T> batchnorm2d(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& gamma,
                      const Tensor<T>& beta, Tensor<T>& running_mean,
                      Tensor<T>& running_var, bool training, T eps, T momentum);

// -- structure --------------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(Graph<T>& g, const std::vector<Tensor<T>>& xs);

// [N,C,H,W] -> [N,H*W,C]
template <typename T>
Tensor<T> img2seq(Graph<T>& g, const Tensor<T>& x);

// [N,L,C] -> [N,C,h,w]; requires L == h*w.
template <typename T>
Tensor<T> seq2img(Graph<T>& g, const Tensor<T>& x, int64_t h, int64_t w);

// tokens [start, end) along dim 1 of [N,L,D].
template <typename T>
Tensor<T> slice_tokens(Graph<T>& g, const Tensor<T>& x, int64_t start, int64_t end);

template <typename T>
Tensor<T> concat_tokens(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b);

// Tiles x (leading dim 1) n times along dim 0.
template <typename T>
Tensor<T> repeat_batch(Graph<T>& g, const Tensor<T>& x, int64_t n);

// [N,C,H,W] -> [N,C] spatial mean.
template <typename T>
Tensor<T> mean_spatial(Graph<T>& g, const Tensor<T>& x);

// [N,L,D] -> [N*heads, L, D/heads] and back.
template <typename T>
Tensor<T> split_heads(Graph<T>& g, const Tensor<T>& x, int64_t heads);
template <typename T>
Tensor<T> merge_heads(Graph<T>& g, const Tensor<T>& x, int64_t heads);

// -- reductions / loss ------------------------------------------------------

template <typename T>
Tensor<T> sum_all(Graph<T>& g, const Tensor<T>& x);

// logits[n,k] as a scalar tensor.
template <typename T>
Tensor<T> select_scalar(Graph<T>& g, const Tensor<T>& x, int64_t n, int64_t k);

// Mean of -log softmax(logits)[label] over the batch, via log-sum-exp.
template <typename T>
Tensor<T> cross_entropy(Graph<T>& g, const Tensor<T>& logits,
                        const std::vector<int>& labels);

// -- raw kernels (shared with conv) ------------------------------------------

namespace detail {
// C[m,n] (+)= A[m,k] * B[k,n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n,
             bool accumulate);
// C[m,n] (+)= A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n,
             bool accumulate);
// C[m,n] (+)= A[k,m]^T * B[k,n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int64_t k, int64_t m, int64_t n,
             bool accumulate);
}  // namespace detail

}  // namespace vitae

#endif
