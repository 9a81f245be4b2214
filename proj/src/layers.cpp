#include "kws/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace kws {

void init_uniform(Tensor& w, int fan_in, int fan_out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (std::int64_t i = 0; i < w.numel(); ++i) w.at(i) = dist(rng);
}

Linear::Linear(int in, int out) : w({in, out}), b({out}) {}

void Linear::init(std::mt19937_64& rng) { init_uniform(w, w.dim(0), w.dim(1), rng); }

void Linear::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".w", w);
  fn(prefix + ".b", b);
}

Tape::Id Linear::forward(Tape& t, Tape::Id x) const {
  return t.add_row_bias(t.matmul(x, t.param(w)), t.param(b));
}

LayerNorm::LayerNorm(int dim) : gamma(Tensor::full({dim}, 1.0)), beta({dim}) {}

void LayerNorm::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".gamma", gamma);
  fn(prefix + ".beta", beta);
}

Tape::Id LayerNorm::forward(Tape& t, Tape::Id x) const {
  return t.layer_norm_rows(x, t.param(gamma), t.param(beta), eps);
}

DepthwiseConv1d::DepthwiseConv1d(int kernel, int channels) : w({kernel, channels}), b({channels}) {}

void DepthwiseConv1d::init(std::mt19937_64& rng) { init_uniform(w, w.dim(0), 1, rng); }

void DepthwiseConv1d::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".w", w);
  fn(prefix + ".b", b);
}

Tape::Id DepthwiseConv1d::forward(Tape& t, Tape::Id x) const {
  return t.depthwise_conv1d_same(x, t.param(w), t.param(b));
}

FeedForward::FeedForward(int dim, int hidden) : in(dim, hidden), out(hidden, dim) {}

void FeedForward::init(std::mt19937_64& rng) {
  in.init(rng);
  out.init(rng);
}

void FeedForward::visit(const std::string& prefix, const ParamVisitor& fn) {
  in.visit(prefix + ".in", fn);
  out.visit(prefix + ".out", fn);
}

Tape::Id FeedForward::forward(Tape& t, Tape::Id x) const {
  return out.forward(t, t.swish(in.forward(t, x)));
}

MultiHeadAttention::MultiHeadAttention(int dim, int heads_)
    : wq(dim, dim), wk(dim, dim), wv(dim, dim), wo(dim, dim), heads(heads_) {
  if (dim % heads_ != 0) {
    throw std::invalid_argument("attention dim " + std::to_string(dim) + " not divisible by " +
                                std::to_string(heads_) + " heads");
  }
}

void MultiHeadAttention::init(std::mt19937_64& rng) {
  wq.init(rng);
  wk.init(rng);
  wv.init(rng);
  wo.init(rng);
}

void MultiHeadAttention::visit(const std::string& prefix, const ParamVisitor& fn) {
  wq.visit(prefix + ".wq", fn);
  wk.visit(prefix + ".wk", fn);
  wv.visit(prefix + ".wv", fn);
  wo.visit(prefix + ".wo", fn);
}

Tape::Id MultiHeadAttention::forward(Tape& t, Tape::Id q_in, Tape::Id kv_in) const {
  if (t.val(kv_in).rows() < 1) throw std::invalid_argument("attention: empty key/value sequence");
  const int dim = wq.w.dim(0);
  const int hd = dim / heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(hd));
  Tape::Id q = wq.forward(t, q_in);
  Tape::Id k = wk.forward(t, kv_in);
  Tape::Id v = wv.forward(t, kv_in);
  std::vector<Tape::Id> outs;
  outs.reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Tape::Id qh = t.slice_cols(q, h * hd, (h + 1) * hd);
    Tape::Id kh = t.slice_cols(k, h * hd, (h + 1) * hd);
    Tape::Id vh = t.slice_cols(v, h * hd, (h + 1) * hd);
    Tape::Id attn = t.softmax_rows(t.scale(t.matmul_nt(qh, kh), scl));
    outs.push_back(t.matmul(attn, vh));
  }
  return wo.forward(t, t.concat_cols(outs));
}

EmbeddingLookup::EmbeddingLookup(int rows, int dim) : table({rows, dim}) {}

void EmbeddingLookup::init(std::mt19937_64& rng) { init_uniform(table, table.dim(0), table.dim(1), rng); }

void EmbeddingLookup::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".table", table);
}

Tape::Id EmbeddingLookup::forward(Tape& t, const std::vector<int>& ids) const {
  return t.gather_rows(t.param(table), ids);
}

namespace {

constexpr LayerKind kAllKinds[] = {
    LayerKind::Linear,          LayerKind::LayerNorm, LayerKind::DepthwiseConv1d,
    LayerKind::FeedForward,     LayerKind::MultiHeadAttention,
    LayerKind::Swish,           LayerKind::Glu,       LayerKind::ResidualAdd,
    LayerKind::EmbeddingLookup,
};

}  // namespace

LayerKind layer_kind_from_string(const std::string& name) {
  for (LayerKind k : kAllKinds) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown layer kind: " + name);
}

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Linear: return "linear";
    case LayerKind::LayerNorm: return "layer-norm";
    case LayerKind::DepthwiseConv1d: return "depthwise-conv1d";
    case LayerKind::FeedForward: return "feed-forward";
    case LayerKind::MultiHeadAttention: return "multi-head-attention";
    case LayerKind::Swish: return "swish";
    case LayerKind::Glu: return "glu";
    case LayerKind::ResidualAdd: return "residual-add";
    case LayerKind::EmbeddingLookup: return "embedding-lookup";
  }
  throw std::logic_error("unreachable layer kind");
}

std::span<const LayerKind> all_layer_kinds() { return kAllKinds; }

LayerKind kind_of(const AnyLayer& layer) {
  return static_cast<LayerKind>(layer.index());
}

Tape::Id layer_forward(Tape& t, const AnyLayer& layer, std::span<const Tape::Id> inputs,
                       std::span<const int> ids) {
  auto expect = [&](size_t n) {
    if (inputs.size() != n) {
      throw std::invalid_argument(to_string(kind_of(layer)) + ": expected " + std::to_string(n) +
                                  " inputs, got " + std::to_string(inputs.size()));
    }
  };
  return std::visit(
      [&](const auto& l) -> Tape::Id {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, ResidualAdd>) {
          expect(2);
          return l.forward(t, inputs[0], inputs[1]);
        } else if constexpr (std::is_same_v<T, MultiHeadAttention>) {
          if (inputs.size() == 1) return l.forward(t, inputs[0]);
          expect(2);
          return l.forward(t, inputs[0], inputs[1]);
        } else if constexpr (std::is_same_v<T, EmbeddingLookup>) {
          expect(0);
          return l.forward(t, std::vector<int>(ids.begin(), ids.end()));
        } else {
          expect(1);
          return l.forward(t, inputs[0]);
        }
      },
      layer);
}

}  // namespace kws
