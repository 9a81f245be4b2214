// Multi-task training: weighted total loss over the utterance, subsequence
// and CTC tasks, Adam with the transformer learning-rate schedule, epoch
// checkpointing, and resumable deterministic runs.

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "kws/checkpoint.hpp"
#include "kws/frontend.hpp"
#include "kws/model.hpp"

namespace kws {

struct TrainConfig {
  double alpha1 = 2.0;  // utterance loss weight
  double alpha2 = 1.0;  // subsequence loss weight
  double alpha3 = 5.0;  // CTC loss weight
  int batch = 64;
  int epochs = 30;
  int warmup = 500;
  double lr_scale = 1.0;
  std::uint64_t seed = 1;
  double val_frac = 0.1;
  int threads = 0;  // 0 = hardware concurrency
  ModelConfig model;

  void validate() const;
  std::map<std::string, std::string> to_kv() const;
};

// total = alpha1*l_utt + alpha2*l_ss + alpha3*l_ctc; NaN components are
// rejected (infeasible CTC samples are excluded upstream).
double total_loss(double l_utt, double l_ss, double l_ctc, const TrainConfig& cfg);

// scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5), step >= 1.
double lr_schedule(std::int64_t step, int warmup, int d_model, double scale);

// Bias-corrected Adam update for one tensor.
void adam_step(Tensor& theta, const std::vector<double>& grad, AdamMoments& moments,
               std::int64_t step, double lr, double beta1 = 0.9, double beta2 = 0.999,
               double eps = 1e-8);

struct EpochMetrics {
  int epoch = 0;
  double l_utt = 0.0;
  double l_ss = 0.0;
  double l_ctc = 0.0;
  double total = 0.0;
  double train_accuracy = 0.0;  // utterance decisions on training data
  double val_auc = 0.5;
  double val_eer = 0.5;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochMetrics> log;
  bool aborted = false;
  std::string abort_reason;
};

using ProgressFn = std::function<void(const EpochMetrics&)>;

// Deterministic given (seed, config, corpus): the validation split, epoch
// shuffles and per-sample record streams are all keyed off cfg.seed, and
// per-sample gradients are reduced in sample order regardless of thread
// count. Pass a checkpoint to resume from its epoch boundary.
TrainResult train(const Corpus& corpus, const TrainConfig& cfg,
                  const ProgressFn& progress = nullptr,
                  const Checkpoint* resume = nullptr);

}  // namespace kws
