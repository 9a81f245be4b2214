#include "kws/encoder.hpp"

#include <stdexcept>

namespace kws {

void EncoderConfig::validate() const {
  if (layers < 1) throw std::invalid_argument("encoder: layers must be >= 1");
  if (d_model < 1 || d_model % heads != 0) {
    throw std::invalid_argument("encoder: d_model " + std::to_string(d_model) +
                                " not divisible by heads " + std::to_string(heads));
  }
  if (conv_kernel % 2 == 0) throw std::invalid_argument("encoder: conv kernel must be odd");
  if (ff_expansion < 1) throw std::invalid_argument("encoder: ff expansion must be >= 1");
}

ConformerBlock::ConformerBlock(const EncoderConfig& cfg)
    : ln_ff1(cfg.d_model),
      ff1(cfg.d_model, cfg.d_model * cfg.ff_expansion),
      ln_attn(cfg.d_model),
      attn(cfg.d_model, cfg.heads),
      ln_conv(cfg.d_model),
      conv_pre(cfg.d_model, 2 * cfg.d_model),
      conv_dw(cfg.conv_kernel, cfg.d_model),
      conv_norm(cfg.d_model),
      conv_post(cfg.d_model, cfg.d_model),
      ln_ff2(cfg.d_model),
      ff2(cfg.d_model, cfg.d_model * cfg.ff_expansion),
      ln_out(cfg.d_model) {}

void ConformerBlock::init(std::mt19937_64& rng) {
  ff1.init(rng);
  attn.init(rng);
  conv_pre.init(rng);
  conv_dw.init(rng);
  conv_post.init(rng);
  ff2.init(rng);
}

void ConformerBlock::visit(const std::string& prefix, const ParamVisitor& fn) {
  ln_ff1.visit(prefix + ".ln_ff1", fn);
  ff1.visit(prefix + ".ff1", fn);
  ln_attn.visit(prefix + ".ln_attn", fn);
  attn.visit(prefix + ".attn", fn);
  ln_conv.visit(prefix + ".ln_conv", fn);
  conv_pre.visit(prefix + ".conv_pre", fn);
  conv_dw.visit(prefix + ".conv_dw", fn);
  conv_norm.visit(prefix + ".conv_norm", fn);
  conv_post.visit(prefix + ".conv_post", fn);
  ln_ff2.visit(prefix + ".ln_ff2", fn);
  ff2.visit(prefix + ".ff2", fn);
  ln_out.visit(prefix + ".ln_out", fn);
}

Tape::Id ConformerBlock::forward(Tape& t, Tape::Id x) const {
  x = t.add(x, t.scale(ff1.forward(t, ln_ff1.forward(t, x)), 0.5));
  x = t.add(x, attn.forward(t, ln_attn.forward(t, x)));
  {
    Tape::Id c = ln_conv.forward(t, x);
    c = t.glu_cols(conv_pre.forward(t, c));
    c = conv_dw.forward(t, c);
    c = t.swish(conv_norm.forward(t, c));
    c = conv_post.forward(t, c);
    x = t.add(x, c);
  }
  x = t.add(x, t.scale(ff2.forward(t, ln_ff2.forward(t, x)), 0.5));
  return ln_out.forward(t, x);
}

Encoder::Encoder(int feat_dim, const EncoderConfig& cfg_) : cfg(cfg_), input_proj(feat_dim, cfg_.d_model) {
  cfg.validate();
  blocks.reserve(static_cast<size_t>(cfg.layers));
  for (int i = 0; i < cfg.layers; ++i) blocks.emplace_back(cfg);
}

void Encoder::init(std::mt19937_64& rng) {
  input_proj.init(rng);
  for (auto& b : blocks) b.init(rng);
}

void Encoder::visit(const std::string& prefix, const ParamVisitor& fn) {
  input_proj.visit(prefix + ".input_proj", fn);
  for (size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].visit(prefix + ".block" + std::to_string(i), fn);
  }
}

Tape::Id Encoder::forward(Tape& t, const Tensor& audio) const {
  if (audio.rank() != 2 || audio.rows() < 1) {
    throw std::invalid_argument("encoder: audio must be a non-empty n x F matrix, got " +
                                audio.shape_str());
  }
  if (audio.cols() != input_proj.w.dim(0)) {
    throw std::invalid_argument("encoder: feature dim " + std::to_string(audio.cols()) +
                                " does not match input projection " + input_proj.w.shape_str());
  }
  Tape::Id x = input_proj.forward(t, t.constant(audio));
  for (const auto& b : blocks) x = b.forward(t, x);
  return x;
}

CtcHead::CtcHead(int d_model, int vocab_size) : proj(d_model, vocab_size + 1) {}

void CtcHead::init(std::mt19937_64& rng) { proj.init(rng); }

void CtcHead::visit(const std::string& prefix, const ParamVisitor& fn) {
  proj.visit(prefix + ".proj", fn);
}

Tape::Id CtcHead::forward(Tape& t, Tape::Id encoded) const { return proj.forward(t, encoded); }

std::vector<int> ctc_greedy_decode(const Tensor& logits, int blank) {
  std::vector<int> out;
  int prev = -1;
  for (int t = 0; t < logits.rows(); ++t) {
    int best = 0;
    for (int k = 1; k < logits.cols(); ++k) {
      if (logits.at(t, k) > logits.at(t, best)) best = k;
    }
    if (best != prev && best != blank) out.push_back(best);
    prev = best;
  }
  return out;
}

}  // namespace kws
