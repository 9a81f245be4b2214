// Versioned binary checkpoints: named parameter tensors (raw double bits, so
// a reload reproduces forward outputs bitwise), Adam moments, step counter,
// and a flat key-value config snapshot.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "kws/model.hpp"
#include "kws/tensor.hpp"

namespace kws {

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
};

struct Checkpoint {
  bool stripped = false;
  std::uint64_t step = 0;
  int epoch = 0;
  std::map<std::string, std::string> config;  // model config + run metadata
  std::vector<NamedTensor> tensors;
  std::vector<AdamMoments> moments;  // aligned with tensors; empty if absent

  const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);  // corrupt -> magic/version error

Checkpoint checkpoint_from_model(Model& model, const std::map<std::string, std::string>& extra_config);
// Vocab is rebuilt from the config snapshot (synthetic naming) unless the
// caller provides one.
Model model_from_checkpoint(const Checkpoint& ckpt);
Model model_from_checkpoint(const Checkpoint& ckpt, const PhonemeVocab& vocab);

// Drops every subsequence head and the CTC projection plus all optimizer
// moments; retained tensors are byte-identical. Idempotent.
Checkpoint strip_for_inference(const Checkpoint& ckpt);

bool is_aux_tensor(const std::string& name);

}  // namespace kws
