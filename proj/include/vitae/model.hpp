#ifndef VITAE_MODEL_HPP_
#define VITAE_MODEL_HPP_

#include <optional>
#include <string>
#include <vector>

#include "vitae/config.hpp"
#include "vitae/conv.hpp"
#include "vitae/ops.hpp"
#include "vitae/params.hpp"

namespace vitae {

inline constexpr double kLnEps = 1e-5;
inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.1;

// Static shape walk shared by model construction and the cost profiler.
struct CellShape {
  int64_t in_c = 0, in_h = 0, in_w = 0;
  int64_t out_h = 0, out_w = 0;
  int64_t cell_dim = 0;
};

struct ModelPlan {
  std::vector<CellShape> rcs;
  int64_t grid_h = 0, grid_w = 0;  // token grid entering the NCs
  int64_t tokens = 0;              // grid_h*grid_w + 1 (class token)
};

ModelPlan compute_plan(const ModelConfig& cfg);

// -- parameter handle bundles -------------------------------------------------

template <typename T>
struct ConvParams {
  Tensor<T> weight, bias;
};

template <typename T>
struct BnParams {
  Tensor<T> gamma, beta, running_mean, running_var;
};

template <typename T>
struct MhsaParams {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename T>
struct FfnParams {
  Tensor<T> ln_gamma, ln_beta, w1, b1, w2, b2;
};

template <typename T>
struct PcmParams {
  ConvParams<T> conv1, conv2, conv3;
  std::optional<BnParams<T>> bn1, bn2;
};

template <typename T>
struct PrmParams {
  std::vector<ConvParams<T>> branches;
};

template <typename T>
struct RcParams {
  PrmParams<T> prm;
  Tensor<T> ln_gamma, ln_beta;  // pre-attention LN over PRM tokens
  MhsaParams<T> mhsa;
  std::optional<PcmParams<T>> pcm;
  std::optional<PrmParams<T>> prm2;  // parallel branch in its "prm" variant
  FfnParams<T> ffn;
};

template <typename T>
struct NcParams {
  Tensor<T> ln_gamma, ln_beta;
  MhsaParams<T> mhsa;
  std::optional<PcmParams<T>> pcm;
  FfnParams<T> ffn;
};

// -- run hooks ----------------------------------------------------------------

template <typename T>
struct AttnCapture {
  std::string layer;
  int heads = 1;
  int64_t grid_h = 0, grid_w = 0;
  bool has_cls = false;
  Tensor<T> probs;  // [N*heads, L, L] post-softmax
};

template <typename T>
struct RunHooks {
  std::vector<AttnCapture<T>>* attn = nullptr;
  // Output of the last NC's attention block (set when non-null).
  Tensor<T>* last_nc_mhsa = nullptr;
  // When set, substitutes the last NC's attention output with this tensor
  // (same shape); lets verification code finite-difference through the tail
  // of the network.
  const Tensor<T>* override_last_nc_mhsa = nullptr;
};

// -- model ---------------------------------------------------------------------

template <typename T>
struct Model {
  ModelConfig cfg;
  ModelPlan plan;
  ParamStore<T> params;
  std::vector<RcParams<T>> rc;
  std::vector<NcParams<T>> nc;
  Tensor<T> cls_token;  // [1,1,D]
  Tensor<T> final_ln_gamma, final_ln_beta;
  Tensor<T> head_w, head_b;
  Tensor<T> pos_table;  // [tokens, D] sinusoid table (not a parameter)
  bool training = true;

  void set_training(bool b) { training = b; }
};

// Allocates and initializes all parameters (deterministic under cfg.seed) and
// returns the executable model.
template <typename T>
Model<T> build_model(const ModelConfig& cfg);

// Standard interleaved sin/cos table over token index; row 0 belongs to the
// class token. dim must be even.
template <typename T>
Tensor<T> sinusoid_pos_encoding(int64_t num_tokens, int64_t dim);

template <typename T>
Tensor<T> mhsa_forward(Graph<T>& g, const Tensor<T>& tokens,
                       const MhsaParams<T>& p, int heads,
                       Tensor<T>* probs_out = nullptr);

// LN -> linear -> GELU -> linear; residual is added by the caller.
template <typename T>
Tensor<T> ffn_forward(Graph<T>& g, const Tensor<T>& tokens,
                      const FfnParams<T>& p);

template <typename T>
Tensor<T> prm_forward(Graph<T>& g, const Tensor<T>& x, const RCConfig& cfg,
                      const PrmParams<T>& p);

struct PcmSettings {
  std::array<int, 3> strides{1, 1, 1};
  int groups = 1;
  bool bn1 = false, bn2 = false;
  Act act = Act::silu;
};

template <typename T>
Tensor<T> pcm_forward(Graph<T>& g, const Tensor<T>& x, PcmParams<T>& p,
                      const PcmSettings& s, bool training);

template <typename T>
Tensor<T> rc_forward(Graph<T>& g, const Tensor<T>& x, const RCConfig& cfg,
                     RcParams<T>& p, bool training,
                     RunHooks<T>* hooks = nullptr,
                     const std::string& label = "rc");

template <typename T>
Tensor<T> nc_forward(Graph<T>& g, const Tensor<T>& t, const NCConfig& cfg,
                     NcParams<T>& p, int64_t grid_h, int64_t grid_w,
                     bool training, RunHooks<T>* hooks = nullptr,
                     const std::string& label = "nc", bool is_last = false);

template <typename T>
Tensor<T> model_forward(Graph<T>& g, Model<T>& m, const Tensor<T>& x,
                        RunHooks<T>* hooks = nullptr);

}  // namespace vitae

#endif
