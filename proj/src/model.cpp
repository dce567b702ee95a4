#include "vitae/model.hpp"

#include <cmath>

#include "vitae/error.hpp"
#include "vitae/rng.hpp"

namespace vitae {

ModelPlan compute_plan(const ModelConfig& cfg) {
  cfg.validate();
  ModelPlan plan;
  int64_t h = cfg.in_h, w = cfg.in_w, c = cfg.in_c;
  for (const auto& rc : cfg.rcs) {
    CellShape s;
    s.in_c = c;
    s.in_h = h;
    s.in_w = w;
    s.out_h = h / rc.stride;
    s.out_w = w / rc.stride;
    s.cell_dim = rc.cell_dim();
    plan.rcs.push_back(s);
    h = s.out_h;
    w = s.out_w;
    c = rc.out_channels;
  }
  plan.grid_h = h;
  plan.grid_w = w;
  plan.tokens = h * w + 1;
  return plan;
}

// ---------------------------------------------------------------------------
// construction
// ---------------------------------------------------------------------------

namespace {

template <typename T>
struct Builder {
  ParamStore<T>& store;
  Rng& rng;

  Tensor<T> weight(const std::string& name, std::vector<int64_t> shape) {
    Tensor<T> t(shape);
    for (int64_t i = 0; i < t.numel(); ++i)
      t.data()[i] = T(rng.trunc_normal(0.02));
    return store.add(name, std::move(t));
  }
  Tensor<T> zeros(const std::string& name, std::vector<int64_t> shape) {
    return store.add(name, Tensor<T>(shape));
  }
  ConvParams<T> conv(const std::string& name, int64_t out_c, int64_t in_c,
                     int64_t k) {
    return {weight(name + ".weight", {out_c, in_c, k, k}),
            zeros(name + ".bias", {out_c})};
  }
  Tensor<T> linear_w(const std::string& name, int64_t in, int64_t out) {
    return weight(name, {in, out});
  }
  BnParams<T> bn(const std::string& name, int64_t c) {
    BnParams<T> p;
    p.gamma = store.add(name + ".gamma", Tensor<T>::full({c}, T(1)));
    p.beta = store.add(name + ".beta", Tensor<T>({c}));
    p.running_mean = store.add(name + ".running_mean", Tensor<T>({c}), false);
    p.running_var =
        store.add(name + ".running_var", Tensor<T>::full({c}, T(1)), false);
    return p;
  }
  void ln(const std::string& name, int64_t d, Tensor<T>& gamma,
          Tensor<T>& beta) {
    gamma = store.add(name + ".gamma", Tensor<T>::full({d}, T(1)));
    beta = store.add(name + ".beta", Tensor<T>({d}));
  }
  MhsaParams<T> mhsa(const std::string& name, int64_t d) {
    MhsaParams<T> p;
    p.wq = linear_w(name + ".wq", d, d);
    p.bq = zeros(name + ".bq", {d});
    p.wk = linear_w(name + ".wk", d, d);
    p.bk = zeros(name + ".bk", {d});
    p.wv = linear_w(name + ".wv", d, d);
    p.bv = zeros(name + ".bv", {d});
    p.wo = linear_w(name + ".wo", d, d);
    p.bo = zeros(name + ".bo", {d});
    return p;
  }
  FfnParams<T> ffn(const std::string& name, int64_t d, double ratio) {
    FfnParams<T> p;
    ln(name + ".ln", d, p.ln_gamma, p.ln_beta);
    int64_t hidden = std::max<int64_t>(1, std::llround(ratio * double(d)));
    p.w1 = linear_w(name + ".w1", d, hidden);
    p.b1 = zeros(name + ".b1", {hidden});
    p.w2 = linear_w(name + ".w2", hidden, d);
    p.b2 = zeros(name + ".b2", {d});
    return p;
  }
  PrmParams<T> prm(const std::string& name, const RCConfig& rc) {
    PrmParams<T> p;
    for (size_t j = 0; j < rc.dilation_set.size(); ++j)
      p.branches.push_back(conv(name + ".branch" + std::to_string(j),
                                rc.branch_channels, rc.in_channels,
                                rc.kernel));
    return p;
  }
  // Three stacked 3x3 convs: in -> mid -> mid -> out.
  PcmParams<T> pcm(const std::string& name, int64_t in_c, int64_t mid_c,
                   int64_t out_c, int64_t groups, bool bn1, bool bn2) {
    PcmParams<T> p;
    p.conv1 = {weight(name + ".conv1.weight", {mid_c, in_c / groups, 3, 3}),
               zeros(name + ".conv1.bias", {mid_c})};
    if (bn1) p.bn1 = bn(name + ".bn1", mid_c);
    p.conv2 = {weight(name + ".conv2.weight", {mid_c, mid_c / groups, 3, 3}),
               zeros(name + ".conv2.bias", {mid_c})};
    if (bn2) p.bn2 = bn(name + ".bn2", mid_c);
    p.conv3 = {weight(name + ".conv3.weight", {out_c, mid_c / groups, 3, 3}),
               zeros(name + ".conv3.bias", {out_c})};
    return p;
  }
};

}  // namespace

template <typename T>
Model<T> build_model(const ModelConfig& cfg) {
  Model<T> m;
  m.cfg = cfg;
  m.plan = compute_plan(cfg);
  Rng rng(cfg.seed);
  Builder<T> b{m.params, rng};

  for (size_t i = 0; i < cfg.rcs.size(); ++i) {
    const RCConfig& rc = cfg.rcs[i];
    std::string name = "rc" + std::to_string(i + 1);
    RcParams<T> p;
    p.prm = b.prm(name + ".prm", rc);
    int64_t dim = rc.cell_dim();
    b.ln(name + ".ln1", dim, p.ln_gamma, p.ln_beta);
    p.mhsa = b.mhsa(name + ".mhsa", dim);
    if (rc.pcm_enabled) {
      if (rc.parallel_branch == ParallelBranch::pcm)
        p.pcm = b.pcm(name + ".pcm", rc.in_channels, rc.branch_channels, dim,
                      1, rc.pcm_bn, rc.pcm_extra_bn);
      else
        p.prm2 = b.prm(name + ".prm2", rc);
    }
    p.ffn = b.ffn(name + ".ffn", dim, rc.ffn_ratio);
    m.rc.push_back(std::move(p));
  }

  int64_t d = cfg.nc.embed_dim;
  m.cls_token = [&] {
    Tensor<T> t({1, 1, d});
    for (int64_t i = 0; i < d; ++i) t.data()[i] = T(rng.normal() * 0.02);
    return m.params.add("cls_token", std::move(t));
  }();

  for (int k = 0; k < cfg.nc_cells; ++k) {
    std::string name = "nc" + std::to_string(k + 1);
    NcParams<T> p;
    b.ln(name + ".ln1", d, p.ln_gamma, p.ln_beta);
    p.mhsa = b.mhsa(name + ".mhsa", d);
    if (cfg.nc.pcm_enabled)
      p.pcm = b.pcm(name + ".pcm", d, d, d, cfg.nc.pcm_groups, cfg.nc.pcm_bn,
                    cfg.nc.pcm_extra_bn);
    p.ffn = b.ffn(name + ".ffn", d, cfg.nc.ffn_ratio);
    m.nc.push_back(std::move(p));
  }

  b.ln("final_ln", d, m.final_ln_gamma, m.final_ln_beta);
  m.head_w = b.linear_w("head.weight", d, cfg.num_classes);
  m.head_b = b.zeros("head.bias", {cfg.num_classes});

  m.pos_table = sinusoid_pos_encoding<T>(m.plan.tokens, d);
  return m;
}

// ---------------------------------------------------------------------------
// forward pieces
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sinusoid_pos_encoding(int64_t num_tokens, int64_t dim) {
  if (dim < 2 || dim % 2 != 0)
    throw ConfigError("sinusoid_pos_encoding: dim must be even, got " +
                      std::to_string(dim));
  Tensor<T> t({num_tokens, dim});
  for (int64_t pos = 0; pos < num_tokens; ++pos)
    for (int64_t i = 0; i < dim / 2; ++i) {
      double freq = std::pow(10000.0, -2.0 * double(i) / double(dim));
      double angle = double(pos) * freq;
      t.data()[pos * dim + 2 * i] = T(std::sin(angle));
      t.data()[pos * dim + 2 * i + 1] = T(std::cos(angle));
    }
  return t;
}

template <typename T>
Tensor<T> mhsa_forward(Graph<T>& g, const Tensor<T>& tokens,
                       const MhsaParams<T>& p, int heads,
                       Tensor<T>* probs_out) {
  if (tokens.ndim() != 3)
    throw DimError("mhsa_forward: expected [N,L,D] tokens");
  int64_t d = tokens.dim(2);
  if (heads < 1 || d % heads != 0)
    throw DimError("mhsa_forward: dim not divisible by head count");
  int64_t dh = d / heads;
  Tensor<T> q = split_heads(g, linear(g, tokens, p.wq, p.bq), heads);
  Tensor<T> k = split_heads(g, linear(g, tokens, p.wk, p.bk), heads);
  Tensor<T> v = split_heads(g, linear(g, tokens, p.wv, p.bv), heads);
  Tensor<T> scores = scale(g, bmm(g, q, transpose_last2(g, k)),
                           T(1.0 / std::sqrt(double(dh))));
  Tensor<T> probs = softmax_lastdim(g, scores);
  if (probs_out) *probs_out = probs;
  Tensor<T> ctx = merge_heads(g, bmm(g, probs, v), heads);
  return linear(g, ctx, p.wo, p.bo);
}

template <typename T>
Tensor<T> ffn_forward(Graph<T>& g, const Tensor<T>& tokens,
                      const FfnParams<T>& p) {
  Tensor<T> h = layernorm(g, tokens, p.ln_gamma, p.ln_beta, T(kLnEps));
  h = linear(g, h, p.w1, p.b1);
  h = activation(g, h, Act::gelu);
  return linear(g, h, p.w2, p.b2);
}

template <typename T>
Tensor<T> prm_forward(Graph<T>& g, const Tensor<T>& x, const RCConfig& cfg,
                      const PrmParams<T>& p) {
  if (x.dim(2) % cfg.stride != 0 || x.dim(3) % cfg.stride != 0)
    throw DimError("prm_forward: spatial dims must be divisible by stride " +
                   std::to_string(cfg.stride));
  std::vector<Tensor<T>> branches;
  branches.reserve(p.branches.size());
  int half = (cfg.kernel - 1) / 2;
  for (size_t j = 0; j < cfg.dilation_set.size(); ++j) {
    int dil = cfg.dilation_set[j];
    // pad = dilation*(k-1)/2 keeps every branch at ceil(in/stride), so the
    // channel concat below stays aligned.
    ConvSpec spec =
        ConvSpec::square(cfg.kernel, cfg.stride, dil, dil * half);
    branches.push_back(conv2d(g, x, p.branches[j].weight, p.branches[j].bias,
                              spec));
  }
  Tensor<T> cat = concat_channels(g, branches);
  return activation(g, cat, cfg.prm_activation);
}

template <typename T>
Tensor<T> pcm_forward(Graph<T>& g, const Tensor<T>& x, PcmParams<T>& p,
                      const PcmSettings& s, bool training) {
  ConvSpec c1 = ConvSpec::square(3, s.strides[0], 1, 1, s.groups);
  ConvSpec c2 = ConvSpec::square(3, s.strides[1], 1, 1, s.groups);
  ConvSpec c3 = ConvSpec::square(3, s.strides[2], 1, 1, s.groups);
  Tensor<T> y = conv2d(g, x, p.conv1.weight, p.conv1.bias, c1);
  if (p.bn1)
    y = batchnorm2d(g, y, p.bn1->gamma, p.bn1->beta, p.bn1->running_mean,
                    p.bn1->running_var, training, T(kBnEps), T(kBnMomentum));
  y = activation(g, y, s.act);
  y = conv2d(g, y, p.conv2.weight, p.conv2.bias, c2);
  if (p.bn2)
    y = batchnorm2d(g, y, p.bn2->gamma, p.bn2->beta, p.bn2->running_mean,
                    p.bn2->running_var, training, T(kBnEps), T(kBnMomentum));
  y = activation(g, y, s.act);
  return conv2d(g, y, p.conv3.weight, p.conv3.bias, c3);
}

template <typename T>
Tensor<T> rc_forward(Graph<T>& g, const Tensor<T>& x, const RCConfig& cfg,
                     RcParams<T>& p, bool training, RunHooks<T>* hooks,
                     const std::string& label) {
  Tensor<T> ms = prm_forward(g, x, cfg, p.prm);
  int64_t oh = ms.dim(2), ow = ms.dim(3);
  Tensor<T> tok = img2seq(g, ms);
  Tensor<T> tln = layernorm(g, tok, p.ln_gamma, p.ln_beta, T(kLnEps));
  Tensor<T> probs;
  Tensor<T> attn = mhsa_forward(g, tln, p.mhsa, cfg.heads,
                                hooks && hooks->attn ? &probs : nullptr);
  if (hooks && hooks->attn)
    hooks->attn->push_back(
        {label, cfg.heads, oh, ow, /*has_cls=*/false, probs});

  Tensor<T> par;
  if (cfg.pcm_enabled) {
    if (cfg.parallel_branch == ParallelBranch::pcm) {
      PcmSettings s{cfg.pcm_strides, 1, cfg.pcm_bn, cfg.pcm_extra_bn,
                    cfg.pcm_activation};
      par = img2seq(g, pcm_forward(g, x, *p.pcm, s, training));
    } else {
      par = img2seq(g, prm_forward(g, x, cfg, *p.prm2));
    }
  }

  Tensor<T> out;
  if (cfg.fusion == Fusion::pre) {
    Tensor<T> lg = par.defined() ? add(g, attn, par) : attn;
    out = add(g, ffn_forward(g, lg, p.ffn), lg);
  } else {
    Tensor<T> lg = attn;
    out = add(g, ffn_forward(g, lg, p.ffn), lg);
    if (par.defined()) out = add(g, out, par);
  }
  return seq2img(g, out, oh, ow);
}

template <typename T>
Tensor<T> nc_forward(Graph<T>& g, const Tensor<T>& t, const NCConfig& cfg,
                     NcParams<T>& p, int64_t grid_h, int64_t grid_w,
                     bool training, RunHooks<T>* hooks,
                     const std::string& label, bool is_last) {
  if (t.ndim() != 3) throw DimError("nc_forward: expected [N,L+1,D] tokens");
  int64_t Lp1 = t.dim(1);
  if (Lp1 != grid_h * grid_w + 1)
    throw DimError("nc_forward: token count " + std::to_string(Lp1) +
                   " != grid " + std::to_string(grid_h) + "x" +
                   std::to_string(grid_w) + " + class token");
  Tensor<T> tln = layernorm(g, t, p.ln_gamma, p.ln_beta, T(kLnEps));
  Tensor<T> probs;
  Tensor<T> tg = mhsa_forward(g, tln, p.mhsa, cfg.heads,
                              hooks && hooks->attn ? &probs : nullptr);
  if (hooks && hooks->attn)
    hooks->attn->push_back(
        {label, cfg.heads, grid_h, grid_w, /*has_cls=*/true, probs});
  if (is_last && hooks) {
    if (hooks->override_last_nc_mhsa) {
      if (hooks->override_last_nc_mhsa->shape() != tg.shape())
        throw DimError("nc_forward: attention override shape mismatch");
      tg = *hooks->override_last_nc_mhsa;
    }
    if (hooks->last_nc_mhsa) *hooks->last_nc_mhsa = tg;
  }

  Tensor<T> tl;
  if (cfg.pcm_enabled) {
    Tensor<T> spatial = slice_tokens(g, t, 1, Lp1);
    Tensor<T> img = seq2img(g, spatial, grid_h, grid_w);
    PcmSettings s{{1, 1, 1}, cfg.pcm_groups, cfg.pcm_bn, cfg.pcm_extra_bn,
                  cfg.pcm_activation};
    tl = img2seq(g, pcm_forward(g, img, *p.pcm, s, training));
  }

  // The class token never passes through PCM; its row receives only the
  // attention path.
  Tensor<T> base = add(g, t, tg);
  if (cfg.fusion == Fusion::pre) {
    Tensor<T> lg = base;
    if (tl.defined()) {
      Tensor<T> fused = add(g, slice_tokens(g, base, 1, Lp1), tl);
      lg = concat_tokens(g, slice_tokens(g, base, 0, 1), fused);
    }
    return add(g, ffn_forward(g, lg, p.ffn), lg);
  }
  Tensor<T> out = add(g, ffn_forward(g, base, p.ffn), base);
  if (tl.defined()) {
    Tensor<T> fused = add(g, slice_tokens(g, out, 1, Lp1), tl);
    out = concat_tokens(g, slice_tokens(g, out, 0, 1), fused);
  }
  return out;
}

template <typename T>
Tensor<T> model_forward(Graph<T>& g, Model<T>& m, const Tensor<T>& x,
                        RunHooks<T>* hooks) {
  if (x.ndim() != 4) throw DimError("model_forward: expected NCHW input");
  if (x.dim(1) != m.cfg.in_c)
    throw DimError("model_forward: input has " + std::to_string(x.dim(1)) +
                   " channels, model expects " + std::to_string(m.cfg.in_c));
  int ts = m.cfg.total_stride();
  if (x.dim(2) % ts != 0 || x.dim(3) % ts != 0)
    throw ConfigError("model_forward: input spatial dims must be a multiple "
                      "of " + std::to_string(ts));
  int64_t n = x.dim(0);
  Tensor<T> f = x;
  for (size_t i = 0; i < m.rc.size(); ++i)
    f = rc_forward(g, f, m.cfg.rcs[i], m.rc[i], m.training, hooks,
                   "rc" + std::to_string(i + 1));
  int64_t gh = f.dim(2), gw = f.dim(3);
  Tensor<T> tokens = img2seq(g, f);
  Tensor<T> cls = repeat_batch(g, m.cls_token, n);
  Tensor<T> t = concat_tokens(g, cls, tokens);
  if (m.cfg.use_pos_embedding) {
    if (gh * gw + 1 == m.plan.tokens) {
      t = add(g, t, m.pos_table);
    } else {
      Tensor<T> pe =
          sinusoid_pos_encoding<T>(gh * gw + 1, m.cfg.nc.embed_dim);
      t = add(g, t, pe);
    }
  }
  for (size_t k = 0; k < m.nc.size(); ++k)
    t = nc_forward(g, t, m.cfg.nc, m.nc[k], gh, gw, m.training, hooks,
                   "nc" + std::to_string(k + 1), k + 1 == m.nc.size());
  Tensor<T> cls_out = slice_tokens(g, t, 0, 1);
  Tensor<T> cls_ln =
      layernorm(g, cls_out, m.final_ln_gamma, m.final_ln_beta, T(kLnEps));
  Tensor<T> flat = reshape(g, cls_ln, {n, m.cfg.nc.embed_dim});
  return linear(g, flat, m.head_w, m.head_b);
}

// ---------------------------------------------------------------------------

#define VITAE_INSTANTIATE_MODEL(T)                                            \
  template Model<T> build_model<T>(const ModelConfig&);                       \
  template Tensor<T> sinusoid_pos_encoding<T>(int64_t, int64_t);              \
  template Tensor<T> mhsa_forward<T>(Graph<T>&, const Tensor<T>&,             \
                                     const MhsaParams<T>&, int, Tensor<T>*);  \
  template Tensor<T> ffn_forward<T>(Graph<T>&, const Tensor<T>&,              \
                                    const FfnParams<T>&);                     \
  template Tensor<T> prm_forward<T>(Graph<T>&, const Tensor<T>&,              \
                                    const RCConfig&, const PrmParams<T>&);    \
  template Tensor<T> pcm_forward<T>(Graph<T>&, const Tensor<T>&,              \
                                    PcmParams<T>&, const PcmSettings&, bool); \
  template Tensor<T> rc_forward<T>(Graph<T>&, const Tensor<T>&,               \
                                   const RCConfig&, RcParams<T>&, bool,       \
                                   RunHooks<T>*, const std::string&);         \
  template Tensor<T> nc_forward<T>(Graph<T>&, const Tensor<T>&,               \
                                   const NCConfig&, NcParams<T>&, int64_t,    \
                                   int64_t, bool, RunHooks<T>*,               \
                                   const std::string&, bool);                 \
  template Tensor<T> model_forward<T>(Graph<T>&, Model<T>&, const Tensor<T>&, \
                                      RunHooks<T>*);

VITAE_INSTANTIATE_MODEL(float)
VITAE_INSTANTIATE_MODEL(double)

}  // namespace vitae
