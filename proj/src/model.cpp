#include "kws/model.hpp"

#include <stdexcept>

namespace kws {

namespace {

int kv_int(const std::map<std::string, std::string>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw std::runtime_error("model config: missing key " + key);
  return std::stoi(it->second);
}

}  // namespace

void ModelConfig::validate() const {
  encoder.validate();
  matcher.validate();
  if (vocab_size < 1) throw std::invalid_argument("model: vocab_size must be >= 1");
  if (t_max < 1) throw std::invalid_argument("model: T must be >= 1");
  if (feat_dim < 1) throw std::invalid_argument("model: feat_dim must be >= 1");
  if (encoder.d_model != matcher.hidden) {
    throw std::invalid_argument("model: encoder D " + std::to_string(encoder.d_model) +
                                " must equal matcher hidden " + std::to_string(matcher.hidden));
  }
}

std::map<std::string, std::string> ModelConfig::to_kv() const {
  return {
      {"model.vocab_size", std::to_string(vocab_size)},
      {"model.t_max", std::to_string(t_max)},
      {"model.feat_dim", std::to_string(feat_dim)},
      {"encoder.layers", std::to_string(encoder.layers)},
      {"encoder.d_model", std::to_string(encoder.d_model)},
      {"encoder.conv_kernel", std::to_string(encoder.conv_kernel)},
      {"encoder.ff_expansion", std::to_string(encoder.ff_expansion)},
      {"encoder.heads", std::to_string(encoder.heads)},
      {"matcher.layers", std::to_string(matcher.layers)},
      {"matcher.hidden", std::to_string(matcher.hidden)},
      {"matcher.filter", std::to_string(matcher.filter)},
      {"matcher.heads", std::to_string(matcher.heads)},
  };
}

ModelConfig ModelConfig::from_kv(const std::map<std::string, std::string>& kv) {
  ModelConfig cfg;
  cfg.vocab_size = kv_int(kv, "model.vocab_size");
  cfg.t_max = kv_int(kv, "model.t_max");
  cfg.feat_dim = kv_int(kv, "model.feat_dim");
  cfg.encoder.layers = kv_int(kv, "encoder.layers");
  cfg.encoder.d_model = kv_int(kv, "encoder.d_model");
  cfg.encoder.conv_kernel = kv_int(kv, "encoder.conv_kernel");
  cfg.encoder.ff_expansion = kv_int(kv, "encoder.ff_expansion");
  cfg.encoder.heads = kv_int(kv, "encoder.heads");
  cfg.matcher.layers = kv_int(kv, "matcher.layers");
  cfg.matcher.hidden = kv_int(kv, "matcher.hidden");
  cfg.matcher.filter = kv_int(kv, "matcher.filter");
  cfg.matcher.heads = kv_int(kv, "matcher.heads");
  return cfg;
}

ModelConfig paper_preset(int vocab_size, int feat_dim) {
  ModelConfig cfg;
  cfg.vocab_size = vocab_size;
  cfg.t_max = kDefaultMaxKeywordLen;
  cfg.feat_dim = feat_dim;
  cfg.encoder = EncoderConfig{};  // 4 layers, D=64, kernel 7, expansion 2, 4 heads
  cfg.matcher = MatcherConfig{};  // 4 layers, hidden 64, filter 128, 4 heads
  return cfg;
}

Model::Model(const ModelConfig& cfg_, const PhonemeVocab& vocab_)
    : cfg(cfg_),
      vocab(vocab_),
      p2v(vocab_, cfg_.encoder.d_model),
      text_proj(cfg_.encoder.d_model, cfg_.encoder.d_model),
      encoder(cfg_.feat_dim, cfg_.encoder),
      ctc_head(cfg_.encoder.d_model, vocab_.size()),
      matcher(cfg_.matcher),
      utt_head(cfg_.t_max, cfg_.matcher.hidden),
      subseq_heads(cfg_.t_max, cfg_.matcher.hidden) {
  cfg.validate();
  if (vocab.size() != cfg.vocab_size) {
    throw std::invalid_argument("model: vocab size " + std::to_string(vocab.size()) +
                                " does not match config " + std::to_string(cfg.vocab_size));
  }
}

void Model::init(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  p2v.init(rng, vocab);
  text_proj.init(rng);
  encoder.init(rng);
  ctc_head.init(rng);
  matcher.init(rng);
  utt_head.init(rng);
  subseq_heads.init(rng);
}

void Model::visit(const ParamVisitor& fn) {
  fn("p2v.table", p2v.table);
  text_proj.visit("text_proj", fn);
  encoder.visit("encoder", fn);
  matcher.visit("matcher", fn);
  utt_head.visit("utt_head", fn);
  if (has_aux) {
    subseq_heads.visit("subseq", fn);
    ctc_head.visit("ctc_head", fn);
  }
}

std::int64_t Model::param_count() {
  std::int64_t n = 0;
  visit([&n](const std::string&, Tensor& t) { n += t.numel(); });
  return n;
}

std::int64_t Model::inference_param_count() {
  std::int64_t n = 0;
  visit([&n](const std::string& name, Tensor& t) {
    if (name.rfind("subseq.", 0) == 0 || name.rfind("ctc_head.", 0) == 0) return;
    n += t.numel();
  });
  return n;
}

Tape::Id Model::query(Tape& t, const PaddedAnchor& anchor) const {
  return text_proj.forward(t, embed_anchor(t, anchor, p2v));
}

Tape::Id Model::attention_output(Tape& t, const Tensor& audio, const PaddedAnchor& anchor) const {
  Tape::Id encoded = encoder.forward(t, audio);
  return matcher.forward(t, query(t, anchor), encoded);
}

double Model::score(const Tensor& audio, const PaddedAnchor& anchor) const {
  Tape t;
  Tape::Id c = attention_output(t, audio, anchor);
  Tape::Id logits = utt_head.logits(t, c);
  return match_score_from_logits(t.val(logits));
}

bool Model::ctc_feasible(const PairSample& sample) {
  return 2 * static_cast<int>(sample.spoken.size()) + 1 <= sample.audio.rows();
}

TrainLosses Model::train_forward(Tape& t, const PairSample& sample) const {
  if (!has_aux) throw std::logic_error("train_forward: model was stripped for inference");
  Tape::Id encoded = encoder.forward(t, sample.audio);
  Tape::Id c = matcher.forward(t, query(t, sample.anchor), encoded);

  TrainLosses out;
  out.utt_logits = utt_head.logits(t, c);
  out.utt = t.cross_entropy_logits(out.utt_logits, sample.utterance_match ? 1 : 0);

  const SubseqLabels labels = subsequence_labels(sample.anchor, sample.spoken);
  out.subseq = subsequence_loss(t, subseq_heads.logits(t, c), labels);

  if (ctc_feasible(sample)) {
    Tape::Id ctc_logits = ctc_head.forward(t, encoded);
    out.ctc = t.ctc_loss(ctc_logits, sample.spoken, vocab.blank_id());
  }
  return out;
}

}  // namespace kws
