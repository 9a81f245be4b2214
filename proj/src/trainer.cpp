#include "kws/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

#include "kws/eval.hpp"
#include "kws/parallel.hpp"

namespace kws {

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed ^ (salt + 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t kSplitSalt = 0x73706c6974ULL;
constexpr std::uint64_t kShuffleSalt = 0x65706f6368ULL;

}  // namespace

void TrainConfig::validate() const {
  if (alpha1 < 0.0 || alpha2 < 0.0 || alpha3 < 0.0) {
    throw std::invalid_argument("train: loss weights must be non-negative");
  }
  if (batch < 1) throw std::invalid_argument("train: batch must be >= 1");
  if (epochs < 0) throw std::invalid_argument("train: epochs must be >= 0");
  if (warmup < 1) throw std::invalid_argument("train: warmup must be >= 1");
  if (val_frac < 0.0 || val_frac >= 1.0) throw std::invalid_argument("train: val_frac must be in [0,1)");
  model.validate();
}

std::map<std::string, std::string> TrainConfig::to_kv() const {
  auto fmt = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  return {
      {"train.alpha1", fmt(alpha1)},
      {"train.alpha2", fmt(alpha2)},
      {"train.alpha3", fmt(alpha3)},
      {"train.batch", std::to_string(batch)},
      {"train.epochs", std::to_string(epochs)},
      {"train.warmup", std::to_string(warmup)},
      {"train.lr_scale", fmt(lr_scale)},
      {"train.seed", std::to_string(seed)},
      {"train.val_frac", fmt(val_frac)},
  };
}

double total_loss(double l_utt, double l_ss, double l_ctc, const TrainConfig& cfg) {
  if (std::isnan(l_utt) || std::isnan(l_ss) || std::isnan(l_ctc)) {
    throw std::runtime_error("total_loss: NaN component (utt=" + std::to_string(l_utt) +
                             ", ss=" + std::to_string(l_ss) + ", ctc=" + std::to_string(l_ctc) + ")");
  }
  return cfg.alpha1 * l_utt + cfg.alpha2 * l_ss + cfg.alpha3 * l_ctc;
}

double lr_schedule(std::int64_t step, int warmup, int d_model, double scale) {
  if (step < 1) throw std::invalid_argument("lr_schedule: step must be >= 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  return scale * std::pow(static_cast<double>(d_model), -0.5) *
         std::min(1.0 / std::sqrt(s), s * std::pow(w, -1.5));
}

void adam_step(Tensor& theta, const std::vector<double>& grad, AdamMoments& moments,
               std::int64_t step, double lr, double beta1, double beta2, double eps) {
  const size_t n = static_cast<size_t>(theta.numel());
  if (grad.size() != n || moments.m.size() != n || moments.v.size() != n) {
    throw std::invalid_argument("adam_step: shape mismatch");
  }
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  for (size_t i = 0; i < n; ++i) {
    const double g = grad[i];
    moments.m[i] = beta1 * moments.m[i] + (1.0 - beta1) * g;
    moments.v[i] = beta2 * moments.v[i] + (1.0 - beta2) * g * g;
    const double mhat = moments.m[i] / bc1;
    const double vhat = moments.v[i] / bc2;
    theta.at(static_cast<std::int64_t>(i)) -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

namespace {

struct ParamSet {
  std::vector<Tensor*> tensors;
  std::vector<std::string> names;
  std::vector<size_t> offsets;  // into a flat gradient buffer
  size_t total = 0;
  std::unordered_map<const Tensor*, size_t> index;

  static ParamSet collect(Model& model) {
    ParamSet ps;
    model.visit([&ps](const std::string& name, Tensor& t) {
      ps.index.emplace(&t, ps.tensors.size());
      ps.tensors.push_back(&t);
      ps.names.push_back(name);
      ps.offsets.push_back(ps.total);
      ps.total += static_cast<size_t>(t.numel());
    });
    return ps;
  }
};

struct SampleOutcome {
  double l_utt = 0.0;
  double l_ss = 0.0;
  double l_ctc = 0.0;
  bool has_ctc = false;
  bool correct = false;
};

Checkpoint snapshot(Model& model, const TrainConfig& cfg, const Corpus& corpus,
                    const ParamSet& params, const std::vector<AdamMoments>& moments,
                    std::uint64_t step, int epoch) {
  std::map<std::string, std::string> extra = cfg.to_kv();
  extra["train.corpus_hash"] = std::to_string(corpus.content_hash());
  Checkpoint ckpt = checkpoint_from_model(model, extra);
  ckpt.step = step;
  ckpt.epoch = epoch;
  ckpt.moments.clear();
  for (size_t i = 0; i < params.tensors.size(); ++i) ckpt.moments.push_back(moments[i]);
  return ckpt;
}

}  // namespace

TrainResult train(const Corpus& corpus, const TrainConfig& cfg, const ProgressFn& progress,
                  const Checkpoint* resume) {
  cfg.validate();
  if (corpus.samples.empty()) throw std::invalid_argument("train: empty corpus");
  for (const auto& s : corpus.samples) {
    if (s.anchor.valid_len > cfg.model.t_max) {
      throw std::invalid_argument("train: corpus keyword longer than T");
    }
  }
  if (corpus.vocab.size() != cfg.model.vocab_size) {
    throw std::invalid_argument("train: corpus vocab " + std::to_string(corpus.vocab.size()) +
                                " does not match model config " + std::to_string(cfg.model.vocab_size));
  }

  Model model(cfg.model, corpus.vocab);
  std::uint64_t step = 0;
  int start_epoch = 0;
  ParamSet params = ParamSet::collect(model);
  std::vector<AdamMoments> moments(params.tensors.size());
  for (size_t i = 0; i < params.tensors.size(); ++i) {
    const size_t n = static_cast<size_t>(params.tensors[i]->numel());
    moments[i].m.assign(n, 0.0);
    moments[i].v.assign(n, 0.0);
  }

  if (resume) {
    if (resume->stripped) throw std::invalid_argument("train: cannot resume from a stripped checkpoint");
    if (ModelConfig::from_kv(resume->config).to_kv() != cfg.model.to_kv()) {
      throw std::invalid_argument("train: resume checkpoint has a different model config");
    }
    Model loaded = model_from_checkpoint(*resume, corpus.vocab);
    model = std::move(loaded);
    params = ParamSet::collect(model);
    if (resume->moments.size() == params.tensors.size()) {
      for (size_t i = 0; i < params.tensors.size(); ++i) moments[i] = resume->moments[i];
    }
    step = resume->step;
    start_epoch = resume->epoch;
  } else {
    model.init(cfg.seed);
  }

  // Deterministic validation split.
  std::vector<int> indices(corpus.samples.size());
  std::iota(indices.begin(), indices.end(), 0);
  {
    std::mt19937_64 rng(mix_seed(cfg.seed, kSplitSalt));
    std::shuffle(indices.begin(), indices.end(), rng);
  }
  const int val_count = static_cast<int>(static_cast<double>(indices.size()) * cfg.val_frac);
  std::vector<int> val_idx(indices.begin(), indices.begin() + val_count);
  std::vector<int> train_idx(indices.begin() + val_count, indices.end());
  if (train_idx.empty()) throw std::invalid_argument("train: validation split leaves no training data");

  TrainResult result;
  Checkpoint last_good = snapshot(model, cfg, corpus, params, moments, step, start_epoch);

  auto validate_metrics = [&](EpochMetrics& em) {
    if (val_idx.empty()) return;
    std::vector<ScoredPair> scored(val_idx.size());
    parallel_for(static_cast<int>(val_idx.size()), cfg.threads, [&](int i) {
      const auto& s = corpus.samples[static_cast<size_t>(val_idx[static_cast<size_t>(i)])];
      scored[static_cast<size_t>(i)] = {model.score(s.audio, s.anchor), s.utterance_match};
    });
    bool has_pos = false, has_neg = false;
    for (const auto& sp : scored) (sp.is_match ? has_pos : has_neg) = true;
    if (has_pos && has_neg) {
      em.val_auc = auc(scored);
      em.val_eer = eer(scored);
    }
  };

  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    std::vector<int> order = train_idx;
    {
      std::mt19937_64 rng(mix_seed(cfg.seed, kShuffleSalt + static_cast<std::uint64_t>(epoch)));
      std::shuffle(order.begin(), order.end(), rng);
    }

    double sum_utt = 0.0, sum_ss = 0.0, sum_ctc = 0.0;
    std::int64_t n_ctc = 0;
    std::int64_t n_correct = 0;

    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch));
      const int bsz = static_cast<int>(end - start);
      int feasible = 0;
      for (size_t i = start; i < end; ++i) {
        if (Model::ctc_feasible(corpus.samples[static_cast<size_t>(order[i])])) ++feasible;
      }
      const double w_utt = cfg.alpha1 / bsz;
      const double w_ss = cfg.alpha2 / bsz;
      const double w_ctc = feasible > 0 ? cfg.alpha3 / feasible : 0.0;

      std::vector<std::vector<double>> grad_bufs(static_cast<size_t>(bsz));
      std::vector<SampleOutcome> outcomes(static_cast<size_t>(bsz));
      parallel_for(bsz, cfg.threads, [&](int bi) {
        const PairSample& sample = corpus.samples[static_cast<size_t>(order[start + static_cast<size_t>(bi)])];
        Tape tape;
        TrainLosses losses = model.train_forward(tape, sample);
        SampleOutcome& oc = outcomes[static_cast<size_t>(bi)];
        oc.l_utt = tape.val(losses.utt).at(0);
        oc.l_ss = tape.val(losses.subseq).at(0);
        const Tensor& lg = tape.val(losses.utt_logits);
        oc.correct = (lg.at(1) > lg.at(0)) == sample.utterance_match;
        std::vector<Tape::Id> terms = {losses.utt, losses.subseq};
        std::vector<double> coeff = {w_utt, w_ss};
        if (losses.ctc) {
          oc.l_ctc = tape.val(*losses.ctc).at(0);
          oc.has_ctc = true;
          terms.push_back(*losses.ctc);
          coeff.push_back(w_ctc);
        }
        Tape::Id total = tape.weighted_sum(terms, coeff);
        tape.backward(total);
        auto& buf = grad_bufs[static_cast<size_t>(bi)];
        buf.assign(params.total, 0.0);
        for (const auto& pg : tape.param_grads()) {
          auto it = params.index.find(pg.param);
          if (it == params.index.end()) continue;
          const size_t off = params.offsets[it->second];
          for (size_t j = 0; j < pg.grad->size(); ++j) buf[off + j] += (*pg.grad)[j];
        }
      });

      bool nan_hit = false;
      for (const auto& oc : outcomes) {
        if (std::isnan(oc.l_utt) || std::isnan(oc.l_ss) || (oc.has_ctc && std::isnan(oc.l_ctc))) {
          nan_hit = true;
        }
        sum_utt += oc.l_utt;
        sum_ss += oc.l_ss;
        if (oc.has_ctc) {
          sum_ctc += oc.l_ctc;
          ++n_ctc;
        }
        if (oc.correct) ++n_correct;
      }
      if (nan_hit) {
        result.checkpoint = std::move(last_good);
        result.aborted = true;
        result.abort_reason = "NaN loss at step " + std::to_string(step + 1);
        return result;
      }

      // Reduce per-sample gradients in sample order, then update.
      for (auto* t : params.tensors) t->zero_grad();
      for (const auto& buf : grad_bufs) {
        for (size_t pi = 0; pi < params.tensors.size(); ++pi) {
          auto& g = params.tensors[pi]->grad();
          const size_t off = params.offsets[pi];
          for (size_t j = 0; j < g.size(); ++j) g[j] += buf[off + j];
        }
      }
      model.p2v.mask_frozen_rows(model.vocab);

      ++step;
      const double lr = lr_schedule(static_cast<std::int64_t>(step), cfg.warmup,
                                    cfg.model.encoder.d_model, cfg.lr_scale);
      for (size_t pi = 0; pi < params.tensors.size(); ++pi) {
        adam_step(*params.tensors[pi], params.tensors[pi]->grad(), moments[pi],
                  static_cast<std::int64_t>(step), lr);
      }
    }

    EpochMetrics em;
    em.epoch = epoch + 1;
    const double n_train = static_cast<double>(order.size());
    em.l_utt = sum_utt / n_train;
    em.l_ss = sum_ss / n_train;
    em.l_ctc = n_ctc > 0 ? sum_ctc / static_cast<double>(n_ctc) : 0.0;
    em.total = total_loss(em.l_utt, em.l_ss, em.l_ctc, cfg);
    em.train_accuracy = static_cast<double>(n_correct) / n_train;
    validate_metrics(em);
    result.log.push_back(em);
    if (progress) progress(em);

    last_good = snapshot(model, cfg, corpus, params, moments, step, epoch + 1);
  }

  result.checkpoint = std::move(last_good);
  return result;
}

}  // namespace kws
