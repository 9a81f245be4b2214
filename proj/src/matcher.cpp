#include "kws/matcher.hpp"

#include <cmath>
#include <stdexcept>

namespace kws {

void MatcherConfig::validate() const {
  if (layers < 1) throw std::invalid_argument("matcher: layers must be >= 1");
  if (hidden < 1 || hidden % heads != 0) {
    throw std::invalid_argument("matcher: hidden " + std::to_string(hidden) +
                                " not divisible by heads " + std::to_string(heads));
  }
  if (filter < 1) throw std::invalid_argument("matcher: filter must be >= 1");
}

MatcherBlock::MatcherBlock(const MatcherConfig& cfg)
    : attn(cfg.hidden, cfg.heads),
      ln_attn(cfg.hidden),
      ff(cfg.hidden, cfg.filter),
      ln_ff(cfg.hidden) {}

void MatcherBlock::init(std::mt19937_64& rng) {
  attn.init(rng);
  ff.init(rng);
}

void MatcherBlock::visit(const std::string& prefix, const ParamVisitor& fn) {
  attn.visit(prefix + ".attn", fn);
  ln_attn.visit(prefix + ".ln_attn", fn);
  ff.visit(prefix + ".ff", fn);
  ln_ff.visit(prefix + ".ln_ff", fn);
}

Tape::Id MatcherBlock::forward(Tape& t, Tape::Id x, Tape::Id kv) const {
  x = ln_attn.forward(t, t.add(x, attn.forward(t, x, kv)));
  x = ln_ff.forward(t, t.add(x, ff.forward(t, x)));
  return x;
}

Matcher::Matcher(const MatcherConfig& cfg_) : cfg(cfg_) {
  cfg.validate();
  blocks.reserve(static_cast<size_t>(cfg.layers));
  for (int i = 0; i < cfg.layers; ++i) blocks.emplace_back(cfg);
}

void Matcher::init(std::mt19937_64& rng) {
  for (auto& b : blocks) b.init(rng);
}

void Matcher::visit(const std::string& prefix, const ParamVisitor& fn) {
  for (size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].visit(prefix + ".block" + std::to_string(i), fn);
  }
}

Tape::Id Matcher::forward(Tape& t, Tape::Id query, Tape::Id audio_kv) const {
  if (t.val(audio_kv).rows() < 1) {
    throw std::invalid_argument("matcher: empty audio embedding");
  }
  if (t.val(query).cols() != t.val(audio_kv).cols()) {
    throw std::invalid_argument("matcher: query dim " + t.val(query).shape_str() +
                                " does not match audio " + t.val(audio_kv).shape_str());
  }
  Tape::Id x = query;
  for (const auto& b : blocks) x = b.forward(t, x, audio_kv);
  return x;
}

UtteranceHead::UtteranceHead(int t_max, int dim) : fc(t_max * dim, 2) {}

void UtteranceHead::init(std::mt19937_64& rng) { fc.init(rng); }

void UtteranceHead::visit(const std::string& prefix, const ParamVisitor& fn) {
  fc.visit(prefix + ".fc", fn);
}

Tape::Id UtteranceHead::logits(Tape& t, Tape::Id c) const {
  const Tensor& tc = t.val(c);
  return fc.forward(t, t.reshape(c, {1, tc.rows() * tc.cols()}));
}

double match_score_from_logits(const Tensor& logits) {
  if (logits.numel() != 2) {
    throw std::invalid_argument("match score: expected 2 logits, got " + logits.shape_str());
  }
  const double a = logits.at(0);  // mismatch
  const double b = logits.at(1);  // match
  const double m = std::max(a, b);
  const double ea = std::exp(a - m), eb = std::exp(b - m);
  return eb / (ea + eb);
}

SubseqHeads::SubseqHeads(int t_max, int dim) {
  fc.reserve(static_cast<size_t>(t_max));
  for (int t = 1; t <= t_max; ++t) fc.emplace_back(t * dim, 2);
}

void SubseqHeads::init(std::mt19937_64& rng) {
  for (auto& l : fc) l.init(rng);
}

void SubseqHeads::visit(const std::string& prefix, const ParamVisitor& fn) {
  for (size_t i = 0; i < fc.size(); ++i) {
    fc[i].visit(prefix + ".fc" + std::to_string(i + 1), fn);
  }
}

std::vector<Tape::Id> SubseqHeads::logits(Tape& t, Tape::Id c) const {
  const Tensor& tc = t.val(c);
  const int t_max = static_cast<int>(fc.size());
  if (tc.rows() != t_max) {
    throw std::invalid_argument("subsequence heads: C has " + std::to_string(tc.rows()) +
                                " rows but " + std::to_string(t_max) + " heads exist");
  }
  const int d = tc.cols();
  std::vector<Tape::Id> out;
  out.reserve(fc.size());
  for (int i = 0; i < t_max; ++i) {
    Tape::Id prefix = t.reshape(t.slice_rows(c, 0, i + 1), {1, (i + 1) * d});
    out.push_back(fc[static_cast<size_t>(i)].forward(t, prefix));
  }
  return out;
}

Tape::Id subsequence_loss(Tape& t, const std::vector<Tape::Id>& head_logits,
                          const SubseqLabels& labels) {
  if (head_logits.size() != labels.labels.size()) {
    throw std::invalid_argument("subsequence loss: " + std::to_string(head_logits.size()) +
                                " heads vs " + std::to_string(labels.labels.size()) + " labels");
  }
  std::vector<Tape::Id> terms;
  for (size_t i = 0; i < head_logits.size(); ++i) {
    const SubseqLabel lab = labels.labels[i];
    if (lab == SubseqLabel::Invalid) continue;
    terms.push_back(t.cross_entropy_logits(head_logits[i], lab == SubseqLabel::Match ? 1 : 0));
  }
  if (terms.empty()) {
    throw std::logic_error("subsequence loss: no valid positions (valid_len must be >= 1)");
  }
  std::vector<double> coeff(terms.size(), 1.0 / static_cast<double>(terms.size()));
  return t.weighted_sum(terms, coeff);
}

}  // namespace kws
