// Matcher: cross-attention of the padded text query against the audio
// embedding. The attention output C is always T x D regardless of audio
// length, so the utterance head classifies the flattened C directly and one
// independent head per prefix length classifies each flattened C_{1:t}.

#pragma once

#include <random>
#include <string>
#include <vector>

#include "kws/frontend.hpp"
#include "kws/layers.hpp"
#include "kws/tensor.hpp"

namespace kws {

struct MatcherConfig {
  int layers = 4;
  int hidden = 64;
  int filter = 128;
  int heads = 4;

  void validate() const;
};

// Cross-attention block, post-norm: x = ln1(x + attn(x, kv)); then
// x = ln2(x + ff(x)) with the pointwise filter width.
struct MatcherBlock {
  MultiHeadAttention attn;
  LayerNorm ln_attn;
  FeedForward ff;
  LayerNorm ln_ff;

  MatcherBlock() = default;
  explicit MatcherBlock(const MatcherConfig& cfg);
  void init(std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& fn);
  Tape::Id forward(Tape& t, Tape::Id x, Tape::Id kv) const;
};

struct Matcher {
  MatcherConfig cfg;
  std::vector<MatcherBlock> blocks;

  Matcher() = default;
  explicit Matcher(const MatcherConfig& cfg);
  void init(std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& fn);
  // query: T x D, audio_kv: n x D (n >= 1); output T x D.
  Tape::Id forward(Tape& t, Tape::Id query, Tape::Id audio_kv) const;
};

// Flattens C row-major to T*D and maps to {mismatch, match} logits.
struct UtteranceHead {
  Linear fc;  // (T*D) x 2

  UtteranceHead() = default;
  UtteranceHead(int t_max, int dim);
  void init(std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& fn);
  Tape::Id logits(Tape& t, Tape::Id c) const;
};

// score = softmax(utterance_logits)[match]
double match_score_from_logits(const Tensor& logits);

// One independent affine head per prefix length t = 1..T; head t consumes
// the flattened first t rows of C (t*D values).
struct SubseqHeads {
  std::vector<Linear> fc;  // fc[t-1]: (t*D) x 2

  SubseqHeads() = default;
  SubseqHeads(int t_max, int dim);
  void init(std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& fn);
  // Logit pairs for every t = 1..T; entries past valid_len exist but carry
  // no loss.
  std::vector<Tape::Id> logits(Tape& t, Tape::Id c) const;
};

// Mean cross-entropy over positions with labels != Invalid.
Tape::Id subsequence_loss(Tape& t, const std::vector<Tape::Id>& head_logits,
                          const SubseqLabels& labels);

}  // namespace kws
