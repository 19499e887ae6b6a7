#pragma once

// Two-layer attention-only transformer over a flat parameter vector.
//
// Parameters live in one contiguous std::vector<double>; every weight matrix
// is a named row-major segment of it. Forward and reverse passes are written
// out explicitly over Eigen maps of those segments so that the gradient of
// the position-averaged cross-entropy is exact and deterministic.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "error.hpp"
#include "random.hpp"

namespace suscept {

using TokenId = std::uint32_t;
using Sequence = std::vector<TokenId>;
using ContextView = std::span<const TokenId>;

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t context_len = 64;  // K
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 8;  // per layer
  std::optional<TokenId> bos_token;  // defaults to vocab_size - 1
  bool layernorm = true;
  bool tied_embeddings = false;
  double init_std = 0.02;
  std::uint64_t seed = 0;

  TokenId bos() const { return bos_token.value_or(static_cast<TokenId>(vocab_size - 1)); }
  std::size_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    detail::require(vocab_size >= 2, "model config: vocab_size must be >= 2");
    detail::require(context_len >= 2, "model config: context_len must be >= 2");
    detail::require(d_model >= 1, "model config: d_model must be >= 1");
    detail::require(n_layers >= 1, "model config: n_layers must be >= 1");
    detail::require(n_heads >= 1, "model config: n_heads must be >= 1");
    detail::require(d_model % n_heads == 0, "model config: d_model (" + std::to_string(d_model) +
                                                ") not divisible by n_heads (" +
                                                std::to_string(n_heads) + ")");
    detail::require(bos() < vocab_size, "model config: bos_token out of range");
    detail::require(init_std >= 0.0 && std::isfinite(init_std), "model config: bad init_std");
  }

  bool operator==(const ModelConfig&) const = default;
};

/// A named row-major block of the flat parameter vector.
struct Segment {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }
  bool operator==(const Segment&) const = default;
};

/// Segment table. Order: embed, pos, per layer [ln gain/bias], per head q,k,v,o,
/// [final ln], [unembed].
class Layout {
 public:
  Layout() = default;

  explicit Layout(const ModelConfig& cfg) {
    cfg.validate();
    const std::size_t d = cfg.d_model, dh = cfg.head_dim();
    add("embed", cfg.vocab_size, d);
    add("pos", cfg.context_len, d);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const std::string lp = "L" + std::to_string(l);
      if (cfg.layernorm) {
        add(lp + ".ln.gain", 1, d);
        add(lp + ".ln.bias", 1, d);
      }
      for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        const std::string hp = lp + ".H" + std::to_string(h);
        add(hp + ".q", dh, d);
        add(hp + ".k", dh, d);
        add(hp + ".v", dh, d);
        add(hp + ".o", d, dh);
      }
    }
    if (cfg.layernorm) {
      add("ln_f.gain", 1, d);
      add("ln_f.bias", 1, d);
    }
    if (!cfg.tied_embeddings) add("unembed", cfg.vocab_size, d);
  }

  /// Parameter count from the architecture formula.
  static std::size_t expected_size(const ModelConfig& c) {
    const std::size_t d = c.d_model;
    std::size_t n = c.vocab_size * d + c.context_len * d;
    n += c.n_layers * c.n_heads * 4 * c.head_dim() * d;
    if (c.layernorm) n += (c.n_layers + 1) * 2 * d;
    if (!c.tied_embeddings) n += c.vocab_size * d;
    return n;
  }

  std::size_t size() const { return total_; }
  const std::vector<Segment>& segments() const { return segments_; }

  const Segment& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidArgument("layout: unknown segment '" + name + "'");
    return segments_[it->second];
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  /// Rebuilds a layout from a serialized segment list, checking contiguity.
  static Layout from_segments(std::vector<Segment> segs) {
    Layout out;
    std::size_t expect = 0;
    for (auto& s : segs) {
      if (s.offset != expect) throw ParseError("layout: segment '" + s.name + "' is not contiguous");
      expect += s.size();
      out.index_[s.name] = out.segments_.size();
      out.segments_.push_back(std::move(s));
    }
    out.total_ = expect;
    return out;
  }

  bool operator==(const Layout& o) const { return segments_ == o.segments_; }

 private:
  void add(std::string name, std::size_t rows, std::size_t cols) {
    index_[name] = segments_.size();
    segments_.push_back(Segment{std::move(name), total_, rows, cols});
    total_ += rows * cols;
  }

  std::vector<Segment> segments_;
  std::map<std::string, std::size_t> index_;
  std::size_t total_ = 0;
};

/// Flat weight vector w in R^d together with its segment table.
struct ParamVector {
  std::vector<double> values;
  Layout layout;

  std::size_t size() const { return values.size(); }
  std::span<const double> segment(const std::string& name) const {
    const auto& s = layout.at(name);
    return std::span<const double>(values).subspan(s.offset, s.size());
  }
  std::span<double> segment(const std::string& name) {
    const auto& s = layout.at(name);
    return std::span<double>(values).subspan(s.offset, s.size());
  }
};

/// Boolean selection of parameter indices defining a component C.
struct ComponentMask {
  std::vector<std::uint8_t> bits;
  std::string label;

  std::size_t size() const { return bits.size(); }
  std::size_t count() const {
    return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
  }
  bool test(std::size_t i) const { return bits[i] != 0; }

  bool disjoint(const ComponentMask& o) const {
    detail::require(o.size() == size(), "mask: size mismatch");
    for (std::size_t i = 0; i < bits.size(); ++i)
      if (bits[i] && o.bits[i]) return false;
    return true;
  }
};

/// Deterministic N(0, init_std^2) initialization; layernorm gains start at 1.
inline ParamVector init_model(const ModelConfig& cfg) {
  cfg.validate();
  ParamVector p{std::vector<double>(), Layout(cfg)};
  p.values.assign(p.layout.size(), 0.0);
  Rng rng = make_rng(cfg.seed, {0x1417});
  std::normal_distribution<double> normal(0.0, 1.0);
  for (const auto& s : p.layout.segments()) {
    const bool is_gain = s.name.ends_with(".gain");
    const bool is_bias = s.name.ends_with(".bias");
    for (std::size_t i = 0; i < s.size(); ++i) {
      double v = 0.0;
      if (is_gain)
        v = 1.0;
      else if (!is_bias)
        v = cfg.init_std * normal(rng);
      p.values[s.offset + i] = v;
    }
  }
  return p;
}

/// Nonempty collection of contexts, each starting with BOS.
struct SampleBatch {
  std::vector<Sequence> contexts;

  std::vector<ContextView> views() const {
    return std::vector<ContextView>(contexts.begin(), contexts.end());
  }
};

class Transformer {
 public:
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using ConstMat = Eigen::Map<const RowMat>;
  using MutMat = Eigen::Map<RowMat>;
  using Vec = Eigen::VectorXd;

  static constexpr double kLayerNormEps = 1e-5;

  explicit Transformer(ModelConfig cfg) : cfg_(std::move(cfg)), layout_(cfg_) { resolve(); }

  const ModelConfig& config() const { return cfg_; }
  const Layout& layout() const { return layout_; }
  std::size_t dim() const { return layout_.size(); }

  ComponentMask head_mask(std::size_t layer, std::size_t head) const {
    detail::require(layer < cfg_.n_layers, "head_mask: layer index out of range");
    detail::require(head < cfg_.n_heads, "head_mask: head index out of range");
    ComponentMask m{std::vector<std::uint8_t>(dim(), 0), head_label(layer, head)};
    const auto& hs = heads_[layer * cfg_.n_heads + head];
    for (auto off : {hs.q, hs.k, hs.v, hs.o}) {
      const std::size_t n = cfg_.head_dim() * cfg_.d_model;
      std::fill_n(m.bits.begin() + static_cast<std::ptrdiff_t>(off), n, std::uint8_t{1});
    }
    return m;
  }

  static std::string head_label(std::size_t layer, std::size_t head) {
    return std::to_string(layer) + ":" + std::to_string(head);
  }

  /// -log p(t_{k+1} | t_1..t_k) for k = 1..m-1.
  std::vector<double> per_token_losses(std::span<const double> w, ContextView ctx) const {
    check_params(w);
    check_context(ctx);
    Forward f = forward(w, ctx);
    return std::move(f.losses);
  }

  double batch_loss(std::span<const double> w, std::span<const ContextView> batch) const {
    check_params(w);
    detail::require(!batch.empty(), "batch_loss: empty batch");
    double total = 0.0;
    for (auto ctx : batch) {
      check_context(ctx);
      Forward f = forward(w, ctx);
      total += mean(f.losses);
    }
    return total / static_cast<double>(batch.size());
  }
  double batch_loss(std::span<const double> w, const SampleBatch& batch) const {
    auto v = batch.views();
    return batch_loss(w, std::span<const ContextView>(v));
  }

  /// Batch loss and its gradient; `grad` is overwritten.
  double loss_and_grad(std::span<const double> w, std::span<const ContextView> batch,
                       std::span<double> grad) const {
    check_params(w);
    detail::require(grad.size() == dim(), "loss_and_grad: gradient buffer has wrong size");
    detail::require(!batch.empty(), "loss_and_grad: empty batch");
    std::fill(grad.begin(), grad.end(), 0.0);
    double total = 0.0;
    const double inv_n = 1.0 / static_cast<double>(batch.size());
    for (auto ctx : batch) {
      check_context(ctx);
      Forward f = forward(w, ctx);
      total += mean(f.losses);
      backward(w, ctx, f, inv_n / static_cast<double>(f.losses.size()), grad);
    }
    return total * inv_n;
  }

  ParamVector grad_batch_loss(const ParamVector& w, const SampleBatch& batch) const {
    ParamVector g{std::vector<double>(dim(), 0.0), layout_};
    auto v = batch.views();
    loss_and_grad(w.values, std::span<const ContextView>(v), g.values);
    return g;
  }

 private:
  struct HeadOffsets {
    std::size_t q, k, v, o;
  };
  struct LayerOffsets {
    std::size_t gain, bias;
  };
  struct LnCache {
    RowMat xhat;
    Vec rstd;
  };
  struct HeadCache {
    RowMat q, k, v, attn, z;
  };
  struct LayerCache {
    RowMat input;  // residual stream entering the layer
    RowMat normed;
    LnCache ln;
    std::vector<HeadCache> heads;
  };
  struct Forward {
    std::vector<LayerCache> layers;
    RowMat final_in, final_normed;
    LnCache ln_f;
    RowMat probs;  // (m-1) x V
    std::vector<double> losses;
  };

  void resolve() {
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      const std::string lp = "L" + std::to_string(l);
      LayerOffsets lo{0, 0};
      if (cfg_.layernorm) lo = {layout_.at(lp + ".ln.gain").offset, layout_.at(lp + ".ln.bias").offset};
      layer_off_.push_back(lo);
      for (std::size_t h = 0; h < cfg_.n_heads; ++h) {
        const std::string hp = lp + ".H" + std::to_string(h);
        heads_.push_back({layout_.at(hp + ".q").offset, layout_.at(hp + ".k").offset,
                          layout_.at(hp + ".v").offset, layout_.at(hp + ".o").offset});
      }
    }
    embed_ = layout_.at("embed").offset;
    pos_ = layout_.at("pos").offset;
    unembed_ = cfg_.tied_embeddings ? embed_ : layout_.at("unembed").offset;
    if (cfg_.layernorm) lnf_ = {layout_.at("ln_f.gain").offset, layout_.at("ln_f.bias").offset};
  }

  void check_params(std::span<const double> w) const {
    detail::require(w.size() == dim(), "parameter vector has length " + std::to_string(w.size()) +
                                           ", model expects " + std::to_string(dim()));
  }

  void check_context(ContextView ctx) const {
    detail::require(ctx.size() >= 2, "context too short: need at least 2 tokens");
    detail::require(ctx.size() <= cfg_.context_len, "context longer than context_len");
    detail::require(ctx[0] == cfg_.bos(), "context must begin with the BOS token");
    for (auto t : ctx) detail::require(t < cfg_.vocab_size, "token id out of range");
  }

  static double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  }

  ConstMat mat(std::span<const double> w, std::size_t off, std::size_t r, std::size_t c) const {
    return ConstMat(w.data() + off, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  }
  MutMat mat(std::span<double> g, std::size_t off, std::size_t r, std::size_t c) const {
    return MutMat(g.data() + off, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  }

  RowMat layer_norm(const RowMat& x, std::span<const double> w, LayerOffsets off, LnCache& cache) const {
    const auto d = x.cols();
    auto gain = mat(w, off.gain, 1, cfg_.d_model);
    auto bias = mat(w, off.bias, 1, cfg_.d_model);
    cache.xhat.resize(x.rows(), d);
    cache.rstd.resize(x.rows());
    RowMat y(x.rows(), d);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double mu = x.row(i).mean();
      const double var = (x.row(i).array() - mu).square().mean();
      const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
      cache.rstd(i) = rstd;
      cache.xhat.row(i) = (x.row(i).array() - mu) * rstd;
      y.row(i) = cache.xhat.row(i).cwiseProduct(gain) + bias;
    }
    return y;
  }

  RowMat layer_norm_backward(const RowMat& dy, std::span<const double> w, LayerOffsets off,
                             const LnCache& cache, std::span<double> grad) const {
    auto gain = mat(w, off.gain, 1, cfg_.d_model);
    auto dgain = mat(grad, off.gain, 1, cfg_.d_model);
    auto dbias = mat(grad, off.bias, 1, cfg_.d_model);
    const double inv_d = 1.0 / static_cast<double>(dy.cols());
    RowMat dx(dy.rows(), dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
      dgain += dy.row(i).cwiseProduct(cache.xhat.row(i));
      dbias += dy.row(i);
      Eigen::RowVectorXd dxhat = dy.row(i).cwiseProduct(gain);
      const double m1 = dxhat.sum() * inv_d;
      const double m2 = dxhat.dot(cache.xhat.row(i)) * inv_d;
      dx.row(i) = cache.rstd(i) * (dxhat.array() - m1 - cache.xhat.row(i).array() * m2).matrix();
    }
    return dx;
  }

  Forward forward(std::span<const double> w, ContextView ctx) const {
    const auto m = static_cast<Eigen::Index>(ctx.size());
    const std::size_t d = cfg_.d_model, dh = cfg_.head_dim(), V = cfg_.vocab_size;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    auto E = mat(w, embed_, V, d);
    auto P = mat(w, pos_, cfg_.context_len, d);

    Forward f;
    RowMat x(m, static_cast<Eigen::Index>(d));
    for (Eigen::Index i = 0; i < m; ++i) x.row(i) = E.row(ctx[static_cast<std::size_t>(i)]) + P.row(i);

    f.layers.resize(cfg_.n_layers);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      LayerCache& lc = f.layers[l];
      lc.input = x;
      lc.normed = cfg_.layernorm ? layer_norm(x, w, layer_off_[l], lc.ln) : x;
      lc.heads.resize(cfg_.n_heads);
      for (std::size_t h = 0; h < cfg_.n_heads; ++h) {
        const auto& ho = heads_[l * cfg_.n_heads + h];
        HeadCache& hc = lc.heads[h];
        hc.q = lc.normed * mat(w, ho.q, dh, d).transpose();
        hc.k = lc.normed * mat(w, ho.k, dh, d).transpose();
        hc.v = lc.normed * mat(w, ho.v, dh, d).transpose();
        hc.attn = RowMat::Zero(m, m);
        for (Eigen::Index i = 0; i < m; ++i) {
          // causal: row i attends to 0..i
          Eigen::RowVectorXd s = (hc.k.topRows(i + 1) * hc.q.row(i).transpose()).transpose() * scale;
          const double mx = s.maxCoeff();
          Eigen::RowVectorXd e = (s.array() - mx).exp();
          hc.attn.row(i).head(i + 1) = e / e.sum();
        }
        hc.z = hc.attn * hc.v;
        x.noalias() += hc.z * mat(w, ho.o, d, dh).transpose();
      }
    }
    f.final_in = x;
    f.final_normed = cfg_.layernorm ? layer_norm(x, w, lnf_, f.ln_f) : x;

    const Eigen::Index npred = m - 1;
    auto U = mat(w, unembed_, V, d);
    RowMat logits = f.final_normed.topRows(npred) * U.transpose();
    f.probs.resize(npred, static_cast<Eigen::Index>(V));
    f.losses.resize(static_cast<std::size_t>(npred));
    for (Eigen::Index k = 0; k < npred; ++k) {
      const double mx = logits.row(k).maxCoeff();
      Eigen::RowVectorXd e = (logits.row(k).array() - mx).exp();
      const double z = e.sum();
      f.probs.row(k) = e / z;
      const TokenId target = ctx[static_cast<std::size_t>(k + 1)];
      f.losses[static_cast<std::size_t>(k)] = std::log(z) + mx - logits(k, target);
    }
    return f;
  }

  // Accumulates weight * d(sum of per-token losses)/dw into grad.
  void backward(std::span<const double> w, ContextView ctx, const Forward& f, double weight,
                std::span<double> grad) const {
    const auto m = static_cast<Eigen::Index>(ctx.size());
    const std::size_t d = cfg_.d_model, dh = cfg_.head_dim(), V = cfg_.vocab_size;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const Eigen::Index npred = m - 1;

    RowMat dlogits = f.probs * weight;
    for (Eigen::Index k = 0; k < npred; ++k) dlogits(k, ctx[static_cast<std::size_t>(k + 1)]) -= weight;

    auto U = mat(w, unembed_, V, d);
    auto dU = mat(grad, unembed_, V, d);
    dU.noalias() += dlogits.transpose() * f.final_normed.topRows(npred);
    RowMat dx = RowMat::Zero(m, static_cast<Eigen::Index>(d));
    dx.topRows(npred).noalias() = dlogits * U;
    if (cfg_.layernorm) dx = layer_norm_backward(dx, w, lnf_, f.ln_f, grad);

    for (std::size_t li = cfg_.n_layers; li-- > 0;) {
      const LayerCache& lc = f.layers[li];
      RowMat dnormed = RowMat::Zero(m, static_cast<Eigen::Index>(d));
      for (std::size_t h = 0; h < cfg_.n_heads; ++h) {
        const auto& ho = heads_[li * cfg_.n_heads + h];
        const HeadCache& hc = lc.heads[h];
        auto Wq = mat(w, ho.q, dh, d);
        auto Wk = mat(w, ho.k, dh, d);
        auto Wv = mat(w, ho.v, dh, d);
        auto Wo = mat(w, ho.o, d, dh);

        mat(grad, ho.o, d, dh).noalias() += dx.transpose() * hc.z;
        RowMat dz = dx * Wo;
        RowMat dattn = dz * hc.v.transpose();
        RowMat dv = hc.attn.transpose() * dz;
        RowMat ds = RowMat::Zero(m, m);
        for (Eigen::Index i = 0; i < m; ++i) {
          auto a = hc.attn.row(i).head(i + 1);
          auto da = dattn.row(i).head(i + 1);
          const double dot = a.dot(da);
          ds.row(i).head(i + 1) = a.cwiseProduct((da.array() - dot).matrix()) * scale;
        }
        RowMat dq = ds * hc.k;
        RowMat dk = ds.transpose() * hc.q;
        mat(grad, ho.q, dh, d).noalias() += dq.transpose() * lc.normed;
        mat(grad, ho.k, dh, d).noalias() += dk.transpose() * lc.normed;
        mat(grad, ho.v, dh, d).noalias() += dv.transpose() * lc.normed;
        dnormed.noalias() += dq * Wq + dk * Wk + dv * Wv;
      }
      if (cfg_.layernorm)
        dx += layer_norm_backward(dnormed, w, layer_off_[li], lc.ln, grad);
      else
        dx += dnormed;
    }

    auto dE = mat(grad, embed_, V, d);
    auto dP = mat(grad, pos_, cfg_.context_len, d);
    for (Eigen::Index i = 0; i < m; ++i) {
      dE.row(ctx[static_cast<std::size_t>(i)]) += dx.row(i);
      dP.row(i) += dx.row(i);
    }
  }

  ModelConfig cfg_;
  Layout layout_;
  std::vector<HeadOffsets> heads_;
  std::vector<LayerOffsets> layer_off_;
  LayerOffsets lnf_{0, 0};
  std::size_t embed_ = 0, pos_ = 0, unembed_ = 0;
};

}  // namespace suscept
