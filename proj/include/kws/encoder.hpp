// Audio encoder: a small conformer stack that maps n x F acoustic frames to
// an n x D embedding (the time dimension is never subsampled), plus the
// linear phoneme-recognition head trained with CTC.

#pragma once

#include <random>
#include <string>
#include <vector>

#include "kws/layers.hpp"
#include "kws/tensor.hpp"

namespace kws {

struct EncoderConfig {
  int layers = 4;
  int d_model = 64;
  int conv_kernel = 7;
  int ff_expansion = 2;
  int heads = 4;

  void validate() const;  // d_model divisible by heads, odd kernel
};

// Block order: half-step feed-forward, self-attention, convolution module,
// half-step feed-forward, closing layer-norm. The convolution module is
// pointwise D->2D, GLU, depthwise conv, layer-norm, swish, pointwise D->D.
struct ConformerBlock {
  LayerNorm ln_ff1;
  FeedForward ff1;
  LayerNorm ln_attn;
  MultiHeadAttention attn;
  LayerNorm ln_conv;
  Linear conv_pre;   // D -> 2D, gated down to D
  DepthwiseConv1d conv_dw;
  LayerNorm conv_norm;
  Linear conv_post;  // D -> D
  LayerNorm ln_ff2;
  FeedForward ff2;
  LayerNorm ln_out;

  ConformerBlock() = default;
  explicit ConformerBlock(const EncoderConfig& cfg);
  void init(std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& fn);
  Tape::Id forward(Tape& t, Tape::Id x) const;
};

struct Encoder {
  EncoderConfig cfg;
  Linear input_proj;  // F -> D
  std::vector<ConformerBlock> blocks;

  Encoder() = default;
  Encoder(int feat_dim, const EncoderConfig& cfg);
  void init(std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& fn);
  // audio: n x F with n >= 1; output n x D.
  Tape::Id forward(Tape& t, const Tensor& audio) const;
};

// Per-frame unnormalized scores over phonemes plus one trailing blank class.
struct CtcHead {
  Linear proj;  // D -> vocab+1

  CtcHead() = default;
  CtcHead(int d_model, int vocab_size);
  void init(std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& fn);
  Tape::Id forward(Tape& t, Tape::Id encoded) const;
};

// Greedy per-frame decode with repeat/blank collapsing; diagnostics only.
std::vector<int> ctc_greedy_decode(const Tensor& logits, int blank);

}  // namespace kws
