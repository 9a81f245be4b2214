#include "kws/eval.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "kws/parallel.hpp"

namespace kws {

namespace {

void split_scores(const std::vector<ScoredPair>& set, std::vector<double>& pos,
                  std::vector<double>& neg) {
  for (const auto& p : set) {
    if (std::isnan(p.score)) throw std::invalid_argument("metrics: NaN score");
    (p.is_match ? pos : neg).push_back(p.score);
  }
  if (pos.empty() || neg.empty()) {
    throw std::invalid_argument("metrics: need at least one match and one mismatch pair");
  }
}

}  // namespace

double auc(const std::vector<ScoredPair>& set) {
  std::vector<double> pos, neg;
  split_scores(set, pos, neg);
  std::sort(neg.begin(), neg.end());
  // Integer win/tie counts keep the result exact: 2*wins + ties over 2*P*N.
  long long numer2 = 0;
  for (double s : pos) {
    const auto lo = std::lower_bound(neg.begin(), neg.end(), s);
    const auto hi = std::upper_bound(neg.begin(), neg.end(), s);
    const long long wins = lo - neg.begin();
    const long long ties = hi - lo;
    numer2 += 2 * wins + ties;
  }
  const long long denom2 = 2LL * static_cast<long long>(pos.size()) * static_cast<long long>(neg.size());
  return static_cast<double>(numer2) / static_cast<double>(denom2);
}

double eer(const std::vector<ScoredPair>& set) {
  std::vector<double> pos, neg;
  split_scores(set, pos, neg);
  std::sort(pos.begin(), pos.end());
  std::sort(neg.begin(), neg.end());

  // Candidate thresholds: one below every score, then each distinct score.
  std::vector<double> cands;
  cands.reserve(pos.size() + neg.size() + 1);
  const double lowest = std::min(pos.front(), neg.front());
  cands.push_back(lowest - 1.0);
  std::vector<double> all(pos);
  all.insert(all.end(), neg.begin(), neg.end());
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  cands.insert(cands.end(), all.begin(), all.end());
  // Sentinel above every score: FAR=0, FRR=1.
  cands.push_back(all.back() + 1.0);

  const double np = static_cast<double>(pos.size());
  const double nn = static_cast<double>(neg.size());
  auto far_at = [&](double th) {
    const long long accepted = neg.end() - std::lower_bound(neg.begin(), neg.end(), th);
    return static_cast<double>(accepted) / nn;
  };
  auto frr_at = [&](double th) {
    const long long rejected = std::lower_bound(pos.begin(), pos.end(), th) - pos.begin();
    return static_cast<double>(rejected) / np;
  };

  double prev_far = far_at(cands[0]);
  double prev_frr = frr_at(cands[0]);
  for (size_t i = 1; i < cands.size(); ++i) {
    const double far = far_at(cands[i]);
    const double frr = frr_at(cands[i]);
    const double prev_diff = prev_far - prev_frr;
    const double diff = far - frr;
    if (diff < 0.0) {
      if (prev_diff == 0.0) return prev_far;
      const double lambda = prev_diff / (prev_diff - diff);
      return prev_far + lambda * (far - prev_far);
    }
    prev_far = far;
    prev_frr = frr;
  }
  // diff ends at -1, so the crossing is always found above.
  return prev_far;
}

std::string to_string(SubseqLabel label) {
  switch (label) {
    case SubseqLabel::Match: return "match";
    case SubseqLabel::Mismatch: return "mismatch";
    case SubseqLabel::Invalid: return "invalid";
  }
  throw std::logic_error("unreachable label");
}

std::vector<SubseqPredictionRow> dump_subsequence_predictions(const Model& model,
                                                              const PairSample& sample) {
  if (!model.has_aux) {
    throw std::invalid_argument("subsequence dump: checkpoint was stripped, per-prefix heads absent");
  }
  Tape tape;
  Tape::Id c = model.attention_output(tape, sample.audio, sample.anchor);
  const std::vector<Tape::Id> logits = model.subseq_heads.logits(tape, c);
  const SubseqLabels labels = subsequence_labels(sample.anchor, sample.spoken);

  std::vector<SubseqPredictionRow> rows;
  rows.reserve(logits.size());
  const PhonemeSeq anchor_seq(sample.anchor.ids.begin(),
                              sample.anchor.ids.begin() + sample.anchor.valid_len);
  for (size_t i = 0; i < logits.size(); ++i) {
    SubseqPredictionRow row;
    row.t = static_cast<int>(i) + 1;
    row.anchor_prefix = model.vocab.seq_to_string(anchor_seq, row.t);
    row.spoken_prefix = model.vocab.seq_to_string(sample.spoken, row.t);
    row.truth = labels.labels[i];
    row.match_prob = match_score_from_logits(tape.val(logits[i]));
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_subseq_csv(std::ostream& out, const std::vector<SubseqPredictionRow>& rows) {
  out << "t,anchor_prefix,spoken_prefix,truth,match_prob\n";
  for (const auto& r : rows) {
    out << r.t << ',' << r.anchor_prefix << ',' << r.spoken_prefix << ',' << to_string(r.truth)
        << ',' << r.match_prob << '\n';
  }
}

std::vector<ScoredPair> score_corpus(const Model& model, const Corpus& corpus, int threads) {
  std::vector<ScoredPair> out(corpus.samples.size());
  parallel_for(static_cast<int>(corpus.samples.size()), threads, [&](int i) {
    const auto& s = corpus.samples[static_cast<size_t>(i)];
    out[static_cast<size_t>(i)] = {model.score(s.audio, s.anchor), s.utterance_match};
  });
  return out;
}

SubsetMetrics subset_metrics(const Corpus& corpus, const std::vector<ScoredPair>& scores) {
  if (corpus.samples.size() != scores.size()) {
    throw std::invalid_argument("metrics: scores do not align with corpus");
  }
  std::vector<ScoredPair> easy, hard;
  for (size_t i = 0; i < scores.size(); ++i) {
    switch (corpus.samples[i].pair_kind) {
      case PairKind::Positive:
        easy.push_back(scores[i]);
        hard.push_back(scores[i]);
        break;
      case PairKind::EasyNegative:
        easy.push_back(scores[i]);
        break;
      case PairKind::HardNegative:
        hard.push_back(scores[i]);
        break;
    }
  }
  SubsetMetrics m;
  m.auc_all = auc(scores);
  m.eer_all = eer(scores);
  m.auc_easy = auc(easy);
  m.eer_easy = eer(easy);
  m.auc_hard = auc(hard);
  m.eer_hard = eer(hard);
  return m;
}

std::vector<AblationRow> ablation_table(const std::vector<std::pair<std::string, Checkpoint>>& ckpts,
                                        const Corpus& test_corpus, int threads) {
  if (ckpts.empty()) throw std::invalid_argument("ablation: no checkpoints");
  auto meta = [](const Checkpoint& c, const std::string& key) {
    auto it = c.config.find(key);
    return it == c.config.end() ? std::string() : it->second;
  };
  const std::string corpus_hash = meta(ckpts[0].second, "train.corpus_hash");
  const std::string seed = meta(ckpts[0].second, "train.seed");
  for (const auto& [label, c] : ckpts) {
    if (meta(c, "train.corpus_hash") != corpus_hash || meta(c, "train.seed") != seed) {
      throw std::invalid_argument("ablation: checkpoint \"" + label +
                                  "\" was trained on a different corpus or seed");
    }
  }
  std::vector<AblationRow> rows;
  for (const auto& [label, c] : ckpts) {
    Model model = model_from_checkpoint(c, test_corpus.vocab);
    const auto scores = score_corpus(model, test_corpus, threads);
    rows.push_back({label, subset_metrics(test_corpus, scores)});
  }
  return rows;
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << "method                  AUC-hard  AUC-easy  EER-hard  EER-easy\n";
  for (const auto& r : rows) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-22s  %8.4f  %8.4f  %8.4f  %8.4f\n", r.label.c_str(),
                  r.metrics.auc_hard, r.metrics.auc_easy, r.metrics.eer_hard, r.metrics.eer_easy);
    out << buf;
  }
  return out.str();
}

}  // namespace kws
