// Neural layers expressed as tape ops. Each struct owns its parameter
// tensors and emits the forward graph; backward rules come from the tape.

#pragma once

#include <functional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "kws/tensor.hpp"

namespace kws {

constexpr double kLayerNormEps = 1e-5;

// Uniform +-sqrt(6/(fan_in+fan_out)) initialization; biases stay zero.
void init_uniform(Tensor& w, int fan_in, int fan_out, std::mt19937_64& rng);

using ParamVisitor = std::function<void(const std::string&, Tensor&)>;

struct Linear {
  Tensor w;  // in x out
  Tensor b;  // out

  Linear() = default;
  Linear(int in, int out);
  void init(std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& fn);
  Tape::Id forward(Tape& t, Tape::Id x) const;
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;
  double eps = kLayerNormEps;

  LayerNorm() = default;
  explicit LayerNorm(int dim);
  void visit(const std::string& prefix, const ParamVisitor& fn);
  Tape::Id forward(Tape& t, Tape::Id x) const;
};

struct DepthwiseConv1d {
  Tensor w;  // kernel x channels
  Tensor b;  // channels

  DepthwiseConv1d() = default;
  DepthwiseConv1d(int kernel, int channels);
  void init(std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& fn);
  Tape::Id forward(Tape& t, Tape::Id x) const;
};

// Two-layer pointwise network with swish in between; hidden = in * expansion
// unless an explicit hidden width is given.
struct FeedForward {
  Linear in;
  Linear out;

  FeedForward() = default;
  FeedForward(int dim, int hidden);
  void init(std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& fn);
  Tape::Id forward(Tape& t, Tape::Id x) const;
};

// Multi-head scaled dot-product attention; query and key/value streams may
// differ (cross-attention) or coincide (self-attention). Scale is
// 1/sqrt(head_dim).
struct MultiHeadAttention {
  Linear wq, wk, wv, wo;
  int heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(int dim, int heads);
  void init(std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& fn);
  Tape::Id forward(Tape& t, Tape::Id q_in, Tape::Id kv_in) const;
  Tape::Id forward(Tape& t, Tape::Id x) const { return forward(t, x, x); }
};

struct Swish {
  Tape::Id forward(Tape& t, Tape::Id x) const { return t.swish(x); }
};

struct Glu {
  Tape::Id forward(Tape& t, Tape::Id x) const { return t.glu_cols(x); }
};

struct ResidualAdd {
  Tape::Id forward(Tape& t, Tape::Id x, Tape::Id branch) const { return t.add(x, branch); }
};

struct EmbeddingLookup {
  Tensor table;  // rows x dim

  EmbeddingLookup() = default;
  EmbeddingLookup(int rows, int dim);
  void init(std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& fn);
  Tape::Id forward(Tape& t, const std::vector<int>& ids) const;
};

enum class LayerKind {
  Linear,
  LayerNorm,
  DepthwiseConv1d,
  FeedForward,
  MultiHeadAttention,
  Swish,
  Glu,
  ResidualAdd,
  EmbeddingLookup,
};

LayerKind layer_kind_from_string(const std::string& name);  // unknown -> throws
std::string to_string(LayerKind kind);
std::span<const LayerKind> all_layer_kinds();

using AnyLayer = std::variant<Linear, LayerNorm, DepthwiseConv1d, FeedForward, MultiHeadAttention,
                              Swish, Glu, ResidualAdd, EmbeddingLookup>;

LayerKind kind_of(const AnyLayer& layer);

// Uniform entry point: applies `layer` to tape inputs. EmbeddingLookup takes
// its indices through `ids` and no tape inputs; ResidualAdd takes two inputs;
// MultiHeadAttention takes one (self) or two (query, key/value).
Tape::Id layer_forward(Tape& t, const AnyLayer& layer, std::span<const Tape::Id> inputs,
                       std::span<const int> ids = {});

}  // namespace kws
