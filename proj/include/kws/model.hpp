// Full matching model: phoneme embedding + text projection feeding the
// matcher as query, audio encoder feeding it as key/value, the utterance
// head (deployment path), and the auxiliary subsequence + CTC heads that are
// stripped before deployment.

#pragma once

#include <map>
#include <optional>
#include <string>

#include "kws/encoder.hpp"
#include "kws/frontend.hpp"
#include "kws/matcher.hpp"

namespace kws {

struct ModelConfig {
  int vocab_size = 12;
  int t_max = kDefaultMaxKeywordLen;
  int feat_dim = 16;
  EncoderConfig encoder;
  MatcherConfig matcher;

  void validate() const;  // encoder.d_model must equal matcher.hidden

  std::map<std::string, std::string> to_kv() const;
  static ModelConfig from_kv(const std::map<std::string, std::string>& kv);
};

// Paper-scale preset: D=64, 4 encoder layers, kernel 7, expansion 2, 4 heads;
// matcher hidden 64, filter 128, 4 layers, 4 heads, T=25.
ModelConfig paper_preset(int vocab_size, int feat_dim);

struct TrainLosses {
  Tape::Id utt;
  Tape::Id subseq;
  std::optional<Tape::Id> ctc;  // absent when the alignment is infeasible
  Tape::Id utt_logits;
};

struct Model {
  ModelConfig cfg;
  PhonemeVocab vocab;
  P2VTable p2v;
  Linear text_proj;  // D -> D
  Encoder encoder;
  CtcHead ctc_head;
  Matcher matcher;
  UtteranceHead utt_head;
  SubseqHeads subseq_heads;
  bool has_aux = true;  // false once stripped for inference

  Model() = default;
  Model(const ModelConfig& cfg, const PhonemeVocab& vocab);
  void init(std::uint64_t seed);

  // Deterministic walk over named parameters; aux heads are skipped when the
  // model is stripped.
  void visit(const ParamVisitor& fn);

  std::int64_t param_count();           // all present parameters
  std::int64_t inference_param_count(); // utterance path only

  // Query construction: embed padded anchor, then project (T x D).
  Tape::Id query(Tape& t, const PaddedAnchor& anchor) const;
  // Attention output C for one pair (T x D).
  Tape::Id attention_output(Tape& t, const Tensor& audio, const PaddedAnchor& anchor) const;

  // Deployment path: probability that audio matches the anchor keyword.
  double score(const Tensor& audio, const PaddedAnchor& anchor) const;

  // Training path: utterance CE, subsequence loss, and CTC (when feasible,
  // i.e. 2*len(spoken)+1 <= frames). Requires aux heads.
  TrainLosses train_forward(Tape& t, const PairSample& sample) const;

  static bool ctc_feasible(const PairSample& sample);
};

}  // namespace kws
