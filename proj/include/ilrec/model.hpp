#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <span>
#include <vector>

#include "ilrec/common.hpp"

namespace ilrec {

// How intermediate hidden states are mapped to vocabulary logits. The final
// layer always reuses the token embedding as the output projection;
// per_layer_heads gives every tapped intermediate layer its own projection,
// shared_unembedding reuses the tied one everywhere. Both apply the final
// layer norm first.
enum class HeadMode { shared_unembedding, per_layer_heads };

inline HeadMode head_mode_from_string(const std::string& s) {
  if (s == "shared_unembedding") return HeadMode::shared_unembedding;
  if (s == "per_layer_heads") return HeadMode::per_layer_heads;
  throw ConfigError("unknown head_mode: " + s);
}

inline std::string to_string(HeadMode mode) {
  return mode == HeadMode::shared_unembedding ? "shared_unembedding"
                                              : "per_layer_heads";
}

struct ModelConfig {
  int vocab_size = 34;
  int embed_dim = 64;
  int num_layers = 4;
  int num_heads = 4;
  int ff_dim = 128;
  int max_positions = 96;
  HeadMode head_mode = HeadMode::shared_unembedding;
  // Number of intermediate layers whose logits are exposed in addition to
  // the final layer: layers num_layers-tapped_layer_count .. num_layers.
  int tapped_layer_count = 3;
  std::uint64_t seed = 1;

  int head_dim() const { return embed_dim / num_heads; }
  int num_taps() const { return tapped_layer_count + 1; }
  // 1-based trunk layer per tap, ascending; the last entry is num_layers.
  std::vector<int> tapped_layers() const {
    std::vector<int> out;
    for (int l = num_layers - tapped_layer_count; l <= num_layers; ++l)
      out.push_back(l);
    return out;
  }

  void validate() const {
    if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
    if (embed_dim < 1 || ff_dim < 1) throw ConfigError("dims must be >= 1");
    if (num_layers < 2) throw ConfigError("num_layers must be >= 2");
    if (num_heads < 1 || embed_dim % num_heads != 0)
      throw ConfigError("embed_dim must be divisible by num_heads");
    if (max_positions < 2) throw ConfigError("max_positions must be >= 2");
    if (tapped_layer_count < 0 || tapped_layer_count > num_layers - 1)
      throw ConfigError("tapped_layer_count must be in [0, num_layers-1]");
  }
};

template <class S>
struct BlockParams {
  VecX<S> ln1_g, ln1_b;
  MatX<S> wq, wk, wv, wo;  // embed_dim x embed_dim
  VecX<S> bq, bk, bv, bo;
  VecX<S> ln2_g, ln2_b;
  MatX<S> w1;  // embed_dim x ff_dim
  VecX<S> b1;
  MatX<S> w2;  // ff_dim x embed_dim
  VecX<S> b2;
};

// Pre-norm decoder-only transformer with learned positions, tied output
// embedding, and logit taps on the top tapped_layer_count+1 layers.
template <class S>
struct ModelParams {
  ModelConfig cfg;
  MatX<S> tok_embed;  // vocab x embed_dim, also the output projection
  MatX<S> pos_embed;  // max_positions x embed_dim
  std::vector<BlockParams<S>> blocks;
  VecX<S> lnf_g, lnf_b;  // final layer norm, applied before every tap head
  // per_layer_heads only: one vocab x embed_dim projection per intermediate
  // tap (the final layer stays tied).
  std::vector<MatX<S>> tap_heads;

  // Trunk forward passes issued against these weights (one per batch).
  mutable std::uint64_t trunk_forwards = 0;
};

// ---- parameter plumbing ----------------------------------------------------

template <class S, class F>
void visit_params(ModelParams<S>& p, F&& f) {
  f(p.tok_embed);
  f(p.pos_embed);
  for (auto& b : p.blocks) {
    f(b.ln1_g); f(b.ln1_b);
    f(b.wq); f(b.bq); f(b.wk); f(b.bk); f(b.wv); f(b.bv); f(b.wo); f(b.bo);
    f(b.ln2_g); f(b.ln2_b);
    f(b.w1); f(b.b1); f(b.w2); f(b.b2);
  }
  f(p.lnf_g);
  f(p.lnf_b);
  for (auto& h : p.tap_heads) f(h);
}

template <class S, class F>
void visit_params(const ModelParams<S>& p, F&& f) {
  visit_params(const_cast<ModelParams<S>&>(p),
               [&](auto& t) { f(static_cast<const std::decay_t<decltype(t)>&>(t)); });
}

// Flat views over every tensor, in a fixed canonical order. The same order
// backs the optimizer state, finite differencing, and checkpoints.
template <class S>
std::vector<Eigen::Map<VecX<S>>> param_views(ModelParams<S>& p) {
  std::vector<Eigen::Map<VecX<S>>> views;
  visit_params(p, [&](auto& t) {
    views.emplace_back(t.data(), t.size());
  });
  return views;
}

template <class S>
std::vector<Eigen::Map<const VecX<S>>> param_views(const ModelParams<S>& p) {
  std::vector<Eigen::Map<const VecX<S>>> views;
  visit_params(p, [&](const auto& t) {
    views.emplace_back(t.data(), t.size());
  });
  return views;
}

template <class S>
Eigen::Index param_count(const ModelParams<S>& p) {
  Eigen::Index n = 0;
  visit_params(p, [&](const auto& t) { n += t.size(); });
  return n;
}

template <class S>
ModelParams<S> zeros_like(const ModelParams<S>& p) {
  ModelParams<S> z;
  z.cfg = p.cfg;
  z.tok_embed = MatX<S>::Zero(p.tok_embed.rows(), p.tok_embed.cols());
  z.pos_embed = MatX<S>::Zero(p.pos_embed.rows(), p.pos_embed.cols());
  z.blocks.resize(p.blocks.size());
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    const auto& b = p.blocks[i];
    auto& o = z.blocks[i];
    auto zv = [](const VecX<S>& v) { return VecX<S>::Zero(v.size()).eval(); };
    auto zm = [](const MatX<S>& m) {
      return MatX<S>::Zero(m.rows(), m.cols()).eval();
    };
    o.ln1_g = zv(b.ln1_g); o.ln1_b = zv(b.ln1_b);
    o.wq = zm(b.wq); o.bq = zv(b.bq);
    o.wk = zm(b.wk); o.bk = zv(b.bk);
    o.wv = zm(b.wv); o.bv = zv(b.bv);
    o.wo = zm(b.wo); o.bo = zv(b.bo);
    o.ln2_g = zv(b.ln2_g); o.ln2_b = zv(b.ln2_b);
    o.w1 = zm(b.w1); o.b1 = zv(b.b1);
    o.w2 = zm(b.w2); o.b2 = zv(b.b2);
  }
  z.lnf_g = VecX<S>::Zero(p.lnf_g.size());
  z.lnf_b = VecX<S>::Zero(p.lnf_b.size());
  z.tap_heads.resize(p.tap_heads.size());
  for (std::size_t i = 0; i < p.tap_heads.size(); ++i)
    z.tap_heads[i] =
        MatX<S>::Zero(p.tap_heads[i].rows(), p.tap_heads[i].cols());
  return z;
}

template <class S>
ModelParams<S> init_model(const ModelConfig& cfg) {
  cfg.validate();
  ModelParams<S> p;
  p.cfg = cfg;
  Rng rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 0.02);
  auto fill = [&](auto& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i)
      t.data()[i] = static_cast<S>(gauss(rng));
  };
  const int d = cfg.embed_dim;
  p.tok_embed.resize(cfg.vocab_size, d);
  fill(p.tok_embed);
  p.pos_embed.resize(cfg.max_positions, d);
  fill(p.pos_embed);
  p.blocks.resize(cfg.num_layers);
  for (auto& b : p.blocks) {
    b.ln1_g = VecX<S>::Ones(d);
    b.ln1_b = VecX<S>::Zero(d);
    b.wq.resize(d, d); fill(b.wq); b.bq = VecX<S>::Zero(d);
    b.wk.resize(d, d); fill(b.wk); b.bk = VecX<S>::Zero(d);
    b.wv.resize(d, d); fill(b.wv); b.bv = VecX<S>::Zero(d);
    b.wo.resize(d, d); fill(b.wo); b.bo = VecX<S>::Zero(d);
    b.ln2_g = VecX<S>::Ones(d);
    b.ln2_b = VecX<S>::Zero(d);
    b.w1.resize(d, cfg.ff_dim); fill(b.w1); b.b1 = VecX<S>::Zero(cfg.ff_dim);
    b.w2.resize(cfg.ff_dim, d); fill(b.w2); b.b2 = VecX<S>::Zero(d);
  }
  p.lnf_g = VecX<S>::Ones(d);
  p.lnf_b = VecX<S>::Zero(d);
  if (cfg.head_mode == HeadMode::per_layer_heads) {
    p.tap_heads.resize(cfg.tapped_layer_count);
    for (auto& h : p.tap_heads) {
      h.resize(cfg.vocab_size, d);
      fill(h);
    }
  }
  return p;
}

// ---- batches ---------------------------------------------------------------

// One tokenized sequence plus the positions whose next-token logits are
// wanted. A gather position t yields logits computed from the hidden state
// at t-1, so t may equal the sequence length (one step past the end).
// targets[i] is the token expected at gather[i], or -1 when scoring.
struct SequenceInput {
  VecXi tokens;
  std::vector<int> gather;
  std::vector<int> targets;
};

struct Batch {
  std::vector<SequenceInput> seqs;
  int total_rows() const {
    int n = 0;
    for (const auto& s : seqs) n += static_cast<int>(s.gather.size());
    return n;
  }
};

// Logits for every tapped layer, rows aligned across taps: row r of each
// matrix belongs to the same (sequence, gather position).
template <class S>
struct LayerLogits {
  std::vector<int> layers;        // 1-based trunk layer per tap, ascending
  std::vector<MatX<S>> logits;    // per tap: rows x vocab
  std::vector<int> row_seq;       // batch sequence index per row
  std::vector<int> row_pos;       // gather position per row
  std::vector<int> row_target;    // target token per row (-1 when scoring)

  int rows() const { return static_cast<int>(row_seq.size()); }
  int num_taps() const { return static_cast<int>(layers.size()); }
  int final_tap() const { return num_taps() - 1; }
  const MatX<S>& final_logits() const { return logits.back(); }
};

// ---- forward/backward ------------------------------------------------------

namespace detail {

template <class S>
S gelu(S x) {
  return S(0.5) * x * (S(1) + std::erf(x * S(std::numbers::sqrt2) / S(2)));
}

template <class S>
S gelu_grad(S x) {
  const S cdf = S(0.5) * (S(1) + std::erf(x * S(std::numbers::sqrt2) / S(2)));
  const S pdf = std::exp(S(-0.5) * x * x) / S(std::sqrt(2.0 * std::numbers::pi));
  return cdf + x * pdf;
}

inline constexpr double kLnEps = 1e-5;

// y = (x - mean) * istd * g + b, per row. Returns y; stores the normalized
// rows and inverse stddev for the backward pass.
template <class S>
MatX<S> layer_norm(const MatX<S>& x, const VecX<S>& g, const VecX<S>& b,
                   MatX<S>& hat, VecX<S>& istd) {
  const Eigen::Index rows = x.rows(), cols = x.cols();
  hat.resize(rows, cols);
  istd.resize(rows);
  MatX<S> y(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const S mean = x.row(r).mean();
    const S var = (x.row(r).array() - mean).square().sum() / S(cols);
    const S is = S(1) / std::sqrt(var + S(kLnEps));
    istd(r) = is;
    hat.row(r) = (x.row(r).array() - mean) * is;
    y.row(r) = hat.row(r).cwiseProduct(g.transpose()) + b.transpose();
  }
  return y;
}

// Given dL/dy, accumulates dg/db and returns dL/dx.
template <class S>
MatX<S> layer_norm_backward(const MatX<S>& dy, const MatX<S>& hat,
                            const VecX<S>& istd, const VecX<S>& g,
                            VecX<S>& dg, VecX<S>& db) {
  const Eigen::Index rows = dy.rows(), cols = dy.cols();
  MatX<S> dx(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    dg += dy.row(r).cwiseProduct(hat.row(r)).transpose();
    db += dy.row(r).transpose();
    Eigen::Array<S, 1, Eigen::Dynamic> dhat =
        dy.row(r).array() * g.transpose().array();
    const S m1 = dhat.mean();
    const S m2 = (dhat * hat.row(r).array()).mean();
    dx.row(r) = ((dhat - m1 - hat.row(r).array() * m2) * istd(r)).matrix();
  }
  return dx;
}

template <class S>
struct BlockCache {
  MatX<S> in;                    // block input
  MatX<S> ln1_hat, ln2_hat;
  VecX<S> ln1_istd, ln2_istd;
  MatX<S> ln1_out, ln2_out;
  MatX<S> q, k, v;               // T x embed_dim
  std::vector<MatX<S>> att;      // per head: T x T, causal rows
  MatX<S> att_concat;            // heads concatenated, before wo
  MatX<S> mid;                   // after the attention residual
  MatX<S> z1, a1;                // feed-forward pre/post activation
};

template <class S>
struct TapCache {
  MatX<S> hat;   // rows x embed_dim, final-layer-norm output pieces
  VecX<S> istd;  // rows
};

template <class S>
struct SequenceCache {
  std::vector<BlockCache<S>> blocks;
  MatX<S> out;                     // trunk output after the last block
  std::vector<TapCache<S>> taps;   // aligned with cfg.tapped_layers()
  std::vector<int> gather;
};

}  // namespace detail

template <class S>
struct ForwardCache {
  std::vector<detail::SequenceCache<S>> seqs;
};

namespace detail {

template <class S>
MatX<S> block_forward(const BlockParams<S>& bp, const MatX<S>& x, int heads,
                      BlockCache<S>& c) {
  const Eigen::Index T = x.rows(), d = x.cols();
  const Eigen::Index dh = d / heads;
  const S scale = S(1) / std::sqrt(S(dh));

  c.in = x;
  c.ln1_out = layer_norm(x, bp.ln1_g, bp.ln1_b, c.ln1_hat, c.ln1_istd);
  c.q = c.ln1_out * bp.wq;
  c.q.rowwise() += bp.bq.transpose();
  c.k = c.ln1_out * bp.wk;
  c.k.rowwise() += bp.bk.transpose();
  c.v = c.ln1_out * bp.wv;
  c.v.rowwise() += bp.bv.transpose();

  c.att.assign(heads, MatX<S>());
  c.att_concat.resize(T, d);
  for (int h = 0; h < heads; ++h) {
    auto qh = c.q.middleCols(h * dh, dh);
    auto kh = c.k.middleCols(h * dh, dh);
    auto vh = c.v.middleCols(h * dh, dh);
    MatX<S> scores = qh * kh.transpose() * scale;
    MatX<S>& att = c.att[h];
    att = MatX<S>::Zero(T, T);
    for (Eigen::Index i = 0; i < T; ++i) {
      auto row = scores.row(i).head(i + 1);
      const S mx = row.maxCoeff();
      Eigen::Array<S, 1, Eigen::Dynamic> e = (row.array() - mx).exp();
      att.row(i).head(i + 1) = (e / e.sum()).matrix();
    }
    c.att_concat.middleCols(h * dh, dh) = att * vh;
  }
  MatX<S> att_out = c.att_concat * bp.wo;
  att_out.rowwise() += bp.bo.transpose();
  c.mid = x + att_out;

  c.ln2_out = layer_norm(c.mid, bp.ln2_g, bp.ln2_b, c.ln2_hat, c.ln2_istd);
  c.z1 = c.ln2_out * bp.w1;
  c.z1.rowwise() += bp.b1.transpose();
  c.a1 = c.z1.unaryExpr([](S v) { return gelu(v); });
  MatX<S> ff_out = c.a1 * bp.w2;
  ff_out.rowwise() += bp.b2.transpose();
  return c.mid + ff_out;
}

// Propagates dL/d(block output) to dL/d(block input), accumulating parameter
// gradients into gb.
template <class S>
MatX<S> block_backward(const BlockParams<S>& bp, const BlockCache<S>& c,
                       int heads, const MatX<S>& dout, BlockParams<S>& gb) {
  const Eigen::Index T = c.in.rows(), d = c.in.cols();
  const Eigen::Index dh = d / heads;
  const S scale = S(1) / std::sqrt(S(dh));

  // out = mid + a1 * w2 + b2
  gb.w2 += c.a1.transpose() * dout;
  gb.b2 += dout.colwise().sum().transpose();
  MatX<S> da1 = dout * bp.w2.transpose();
  MatX<S> dz1 =
      da1.cwiseProduct(c.z1.unaryExpr([](S v) { return gelu_grad(v); }));
  gb.w1 += c.ln2_out.transpose() * dz1;
  gb.b1 += dz1.colwise().sum().transpose();
  MatX<S> dln2_out = dz1 * bp.w1.transpose();
  MatX<S> dmid = dout + layer_norm_backward(dln2_out, c.ln2_hat, c.ln2_istd,
                                            bp.ln2_g, gb.ln2_g, gb.ln2_b);

  // mid = in + att_concat * wo + bo
  gb.wo += c.att_concat.transpose() * dmid;
  gb.bo += dmid.colwise().sum().transpose();
  MatX<S> datt_concat = dmid * bp.wo.transpose();

  MatX<S> dq(T, d), dk(T, d), dv(T, d);
  for (int h = 0; h < heads; ++h) {
    auto vh = c.v.middleCols(h * dh, dh);
    auto kh = c.k.middleCols(h * dh, dh);
    auto qh = c.q.middleCols(h * dh, dh);
    auto dhead = datt_concat.middleCols(h * dh, dh);
    const MatX<S>& att = c.att[h];
    MatX<S> datt = dhead * vh.transpose();
    dv.middleCols(h * dh, dh) = att.transpose() * dhead;
    // softmax backward per causal row; att is zero above the diagonal so the
    // masked entries contribute nothing.
    MatX<S> dscore(T, T);
    for (Eigen::Index i = 0; i < T; ++i) {
      auto a = att.row(i).array();
      auto da = datt.row(i).array();
      const S dot = (a * da).sum();
      dscore.row(i) = (a * (da - dot)).matrix();
    }
    dq.middleCols(h * dh, dh) = dscore * kh * scale;
    dk.middleCols(h * dh, dh) = dscore.transpose() * qh * scale;
  }

  gb.wq += c.ln1_out.transpose() * dq;
  gb.bq += dq.colwise().sum().transpose();
  gb.wk += c.ln1_out.transpose() * dk;
  gb.bk += dk.colwise().sum().transpose();
  gb.wv += c.ln1_out.transpose() * dv;
  gb.bv += dv.colwise().sum().transpose();
  MatX<S> dln1_out =
      dq * bp.wq.transpose() + dk * bp.wk.transpose() + dv * bp.wv.transpose();
  return dmid + layer_norm_backward(dln1_out, c.ln1_hat, c.ln1_istd, bp.ln1_g,
                                    gb.ln1_g, gb.ln1_b);
}

// Output projection for tap index `tap` (0..tapped_layer_count; the last tap
// is the final layer and is always tied to the token embedding).
template <class S>
const MatX<S>& tap_head(const ModelParams<S>& p, int tap) {
  if (p.cfg.head_mode == HeadMode::per_layer_heads &&
      tap < p.cfg.tapped_layer_count)
    return p.tap_heads[tap];
  return p.tok_embed;
}

}  // namespace detail

// Runs the trunk once per sequence and projects the hidden states of every
// tapped layer, at just the requested positions, onto the vocabulary.
template <class S>
LayerLogits<S> forward_all_layers(const ModelParams<S>& p, const Batch& batch,
                                  ForwardCache<S>* cache = nullptr) {
  const ModelConfig& cfg = p.cfg;
  const int num_taps = cfg.num_taps();
  const auto tapped = cfg.tapped_layers();

  LayerLogits<S> out;
  out.layers = tapped;
  const int rows = batch.total_rows();
  out.logits.assign(num_taps, MatX<S>(rows, cfg.vocab_size));
  out.row_seq.reserve(rows);
  out.row_pos.reserve(rows);
  out.row_target.reserve(rows);

  if (cache) cache->seqs.assign(batch.seqs.size(), {});
  p.trunk_forwards += 1;

  int row0 = 0;
  for (std::size_t si = 0; si < batch.seqs.size(); ++si) {
    const auto& seq = batch.seqs[si];
    const int T = static_cast<int>(seq.tokens.size());
    if (T < 1) throw NumericError("forward: empty sequence");
    if (T > cfg.max_positions)
      throw ConfigError("forward: sequence length " + std::to_string(T) +
                        " exceeds max_positions");
    for (int t = 0; t < T; ++t)
      if (seq.tokens[t] < 0 || seq.tokens[t] >= cfg.vocab_size)
        throw ConfigError("forward: token out of vocabulary");
    if (seq.targets.size() != seq.gather.size())
      throw ConfigError("forward: gather/target size mismatch");

    detail::SequenceCache<S> local;
    detail::SequenceCache<S>& sc = cache ? cache->seqs[si] : local;
    sc.blocks.resize(cfg.num_layers);
    sc.gather = seq.gather;

    MatX<S> x(T, cfg.embed_dim);
    for (int t = 0; t < T; ++t)
      x.row(t) = p.tok_embed.row(seq.tokens[t]) + p.pos_embed.row(t);
    for (int l = 0; l < cfg.num_layers; ++l)
      x = detail::block_forward(p.blocks[l], x, cfg.num_heads, sc.blocks[l]);
    sc.out = std::move(x);

    const int nrows = static_cast<int>(seq.gather.size());
    sc.taps.resize(num_taps);
    for (int tap = 0; tap < num_taps; ++tap) {
      const int layer = tapped[tap];
      // Hidden state of layer l is the input of block l (or the trunk
      // output for the last one).
      const MatX<S>& h = layer == cfg.num_layers ? sc.out
                                                 : sc.blocks[layer].in;
      MatX<S> rows_h(nrows, cfg.embed_dim);
      for (int r = 0; r < nrows; ++r) {
        const int pos = seq.gather[r];
        if (pos < 1 || pos > T)
          throw ConfigError("forward: gather position out of range");
        rows_h.row(r) = h.row(pos - 1);
      }
      auto& tc = sc.taps[tap];
      MatX<S> normed =
          detail::layer_norm(rows_h, p.lnf_g, p.lnf_b, tc.hat, tc.istd);
      out.logits[tap].middleRows(row0, nrows).noalias() =
          normed * detail::tap_head(p, tap).transpose();
    }
    for (int r = 0; r < nrows; ++r) {
      out.row_seq.push_back(static_cast<int>(si));
      out.row_pos.push_back(seq.gather[r]);
      const int tgt = seq.targets[r];
      if (tgt >= 0 && seq.gather[r] < T && seq.tokens[seq.gather[r]] != tgt)
        throw ConfigError("forward: target does not match the sequence token");
      out.row_target.push_back(tgt);
    }
    row0 += nrows;
  }
  return out;
}

// Loss callback contract: given the tapped logits, return the scalar loss and
// dLoss/dLogits per tap (empty matrix = no gradient through that tap).
template <class S>
struct LossGrad {
  S value = S(0);
  std::vector<MatX<S>> dlogits;
};

template <class S>
using LossFn = std::function<LossGrad<S>(const LayerLogits<S>&)>;

template <class S>
struct BackwardResult {
  S loss = S(0);
  ModelParams<S> grads;
  LayerLogits<S> logits;
};

// One trunk forward plus a full manual backward pass. The loss callback sees
// the logits of every tapped layer; its gradients flow back through the tap
// heads into the trunk and embeddings.
template <class S>
BackwardResult<S> backward(const ModelParams<S>& p, const Batch& batch,
                           const LossFn<S>& loss_fn) {
  const ModelConfig& cfg = p.cfg;
  ForwardCache<S> cache;
  BackwardResult<S> res;
  res.logits = forward_all_layers(p, batch, &cache);
  LossGrad<S> lg = loss_fn(res.logits);
  res.loss = lg.value;
  res.grads = zeros_like(p);
  if (static_cast<int>(lg.dlogits.size()) != cfg.num_taps())
    throw NumericError("backward: loss gradient tap count mismatch");

  const auto tapped = cfg.tapped_layers();
  int row0 = 0;
  for (std::size_t si = 0; si < batch.seqs.size(); ++si) {
    const auto& seq = batch.seqs[si];
    const auto& sc = cache.seqs[si];
    const int T = static_cast<int>(seq.tokens.size());
    const int nrows = static_cast<int>(seq.gather.size());

    // dL/d(hidden state of layer l), injected when the downward sweep
    // reaches that layer.
    std::vector<MatX<S>> dh_at(cfg.num_layers + 1);
    for (int tap = 0; tap < cfg.num_taps(); ++tap) {
      if (lg.dlogits[tap].size() == 0) continue;
      const auto dl = lg.dlogits[tap].middleRows(row0, nrows);
      const MatX<S>& head = detail::tap_head(p, tap);
      const auto& tc = sc.taps[tap];

      MatX<S> dnormed = dl * head;
      // Head gradient: tied embedding or the tap's own projection.
      MatX<S> normed = tc.hat;
      for (int r = 0; r < nrows; ++r)
        normed.row(r) = tc.hat.row(r).cwiseProduct(p.lnf_g.transpose()) +
                        p.lnf_b.transpose();
      MatX<S>& dhead =
          (cfg.head_mode == HeadMode::per_layer_heads &&
           tap < cfg.tapped_layer_count)
              ? res.grads.tap_heads[tap]
              : res.grads.tok_embed;
      dhead += dl.transpose() * normed;

      MatX<S> drows = detail::layer_norm_backward(
          dnormed, tc.hat, tc.istd, p.lnf_g, res.grads.lnf_g, res.grads.lnf_b);
      const int layer = tapped[tap];
      MatX<S>& sink = dh_at[layer];
      if (sink.size() == 0) sink = MatX<S>::Zero(T, cfg.embed_dim);
      for (int r = 0; r < nrows; ++r)
        sink.row(seq.gather[r] - 1) += drows.row(r);
    }

    MatX<S> dx = MatX<S>::Zero(T, cfg.embed_dim);
    for (int l = cfg.num_layers; l >= 1; --l) {
      if (dh_at[l].size() != 0) dx += dh_at[l];
      dx = detail::block_backward(p.blocks[l - 1], sc.blocks[l - 1],
                                  cfg.num_heads, dx, res.grads.blocks[l - 1]);
    }
    for (int t = 0; t < T; ++t) {
      res.grads.tok_embed.row(seq.tokens[t]) += dx.row(t);
      res.grads.pos_embed.row(t) += dx.row(t);
    }
    row0 += nrows;
  }
  return res;
}

}  // namespace ilrec
