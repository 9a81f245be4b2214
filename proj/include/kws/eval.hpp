// Scoring metrics and reporting: ROC AUC (Mann-Whitney, ties at half
// credit), EER with linear interpolation between bracketing thresholds,
// per-prefix prediction dumps, and the ablation comparison table.

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "kws/checkpoint.hpp"
#include "kws/frontend.hpp"
#include "kws/model.hpp"

namespace kws {

struct ScoredPair {
  double score = 0.0;   // in [0,1]
  bool is_match = false;
};

// P(random positive outscores a random negative), ties counted 1/2.
// Requires at least one pair of each class.
double auc(const std::vector<ScoredPair>& set);

// Operating point where false-accept rate equals false-reject rate
// (accept when score >= threshold), linearly interpolated between adjacent
// thresholds when no exact crossing exists.
double eer(const std::vector<ScoredPair>& set);

struct SubseqPredictionRow {
  int t = 0;  // prefix length, 1-based
  std::string anchor_prefix;
  std::string spoken_prefix;
  SubseqLabel truth = SubseqLabel::Invalid;
  double match_prob = 0.0;
};

std::string to_string(SubseqLabel label);

// One row per t = 1..T, including invalid rows. Requires the unstripped
// model (the per-prefix heads).
std::vector<SubseqPredictionRow> dump_subsequence_predictions(const Model& model,
                                                              const PairSample& sample);
void write_subseq_csv(std::ostream& out, const std::vector<SubseqPredictionRow>& rows);

struct SubsetMetrics {
  double auc_easy = 0.0, auc_hard = 0.0, auc_all = 0.0;
  double eer_easy = 0.0, eer_hard = 0.0, eer_all = 0.0;
};

// Scores every sample in the corpus with the model's utterance path. The
// easy subset is positives + easy negatives, the hard subset positives +
// hard negatives.
std::vector<ScoredPair> score_corpus(const Model& model, const Corpus& corpus, int threads = 0);
SubsetMetrics subset_metrics(const Corpus& corpus, const std::vector<ScoredPair>& scores);

struct AblationRow {
  std::string label;
  SubsetMetrics metrics;
};

// Evaluates several checkpoints on one test corpus. All checkpoints must
// record the same training corpus hash and seed (they may differ only in
// loss weights); anything else is rejected.
std::vector<AblationRow> ablation_table(const std::vector<std::pair<std::string, Checkpoint>>& ckpts,
                                        const Corpus& test_corpus, int threads = 0);
std::string format_ablation_table(const std::vector<AblationRow>& rows);

}  // namespace kws
