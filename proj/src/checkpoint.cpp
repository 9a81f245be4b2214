#include "kws/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace kws {

namespace {

constexpr char kMagic[8] = {'K', 'W', 'S', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

void write_bytes(std::ofstream& out, const void* p, size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void read_bytes(std::ifstream& in, void* p, size_t n) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
}

template <typename T>
void write_pod(std::ofstream& out, T v) {
  write_bytes(out, &v, sizeof(v));
}

template <typename T>
T read_pod(std::ifstream& in) {
  T v;
  read_bytes(in, &v, sizeof(v));
  return v;
}

void write_string(std::ofstream& out, const std::string& s) {
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  write_bytes(out, s.data(), s.size());
}

std::string read_string(std::ifstream& in) {
  const auto n = read_pod<std::uint32_t>(in);
  std::string s(n, '\0');
  if (n) read_bytes(in, s.data(), n);
  return s;
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& nt : tensors) {
    if (nt.name == name) return &nt.value;
  }
  return nullptr;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
  write_bytes(out, kMagic, sizeof(kMagic));
  write_pod<std::uint32_t>(out, kVersion);
  write_pod<std::uint8_t>(out, ckpt.stripped ? 1 : 0);
  write_pod<std::uint64_t>(out, ckpt.step);
  write_pod<std::int32_t>(out, ckpt.epoch);
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.config.size()));
  for (const auto& [k, v] : ckpt.config) {
    write_string(out, k);
    write_string(out, v);
  }
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& nt : ckpt.tensors) {
    write_string(out, nt.name);
    write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(nt.value.rank()));
    for (int d : nt.value.shape()) write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    write_bytes(out, nt.value.data(), sizeof(double) * static_cast<size_t>(nt.value.numel()));
  }
  const bool has_moments = !ckpt.moments.empty();
  write_pod<std::uint8_t>(out, has_moments ? 1 : 0);
  if (has_moments) {
    if (ckpt.moments.size() != ckpt.tensors.size()) {
      throw std::logic_error("checkpoint: moments not aligned with tensors");
    }
    for (const auto& mo : ckpt.moments) {
      write_bytes(out, mo.m.data(), sizeof(double) * mo.m.size());
      write_bytes(out, mo.v.data(), sizeof(double) * mo.v.size());
    }
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  read_bytes(in, magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path);
  }
  const auto version = read_pod<std::uint32_t>(in);
  if (version != kVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.stripped = read_pod<std::uint8_t>(in) != 0;
  ckpt.step = read_pod<std::uint64_t>(in);
  ckpt.epoch = read_pod<std::int32_t>(in);
  const auto nkv = read_pod<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < nkv; ++i) {
    std::string k = read_string(in);
    ckpt.config[k] = read_string(in);
  }
  const auto nt = read_pod<std::uint32_t>(in);
  ckpt.tensors.reserve(nt);
  for (std::uint32_t i = 0; i < nt; ++i) {
    NamedTensor t;
    t.name = read_string(in);
    const int rank = read_pod<std::uint8_t>(in);
    std::vector<int> shape(static_cast<size_t>(rank));
    for (auto& d : shape) d = static_cast<int>(read_pod<std::uint32_t>(in));
    t.value = Tensor(shape);
    read_bytes(in, t.value.data(), sizeof(double) * static_cast<size_t>(t.value.numel()));
    ckpt.tensors.push_back(std::move(t));
  }
  const bool has_moments = read_pod<std::uint8_t>(in) != 0;
  if (has_moments) {
    ckpt.moments.resize(ckpt.tensors.size());
    for (size_t i = 0; i < ckpt.tensors.size(); ++i) {
      const size_t n = static_cast<size_t>(ckpt.tensors[i].value.numel());
      ckpt.moments[i].m.resize(n);
      ckpt.moments[i].v.resize(n);
      read_bytes(in, ckpt.moments[i].m.data(), sizeof(double) * n);
      read_bytes(in, ckpt.moments[i].v.data(), sizeof(double) * n);
    }
  }
  return ckpt;
}

Checkpoint checkpoint_from_model(Model& model, const std::map<std::string, std::string>& extra_config) {
  Checkpoint ckpt;
  ckpt.stripped = !model.has_aux;
  ckpt.config = model.cfg.to_kv();
  for (const auto& [k, v] : extra_config) ckpt.config[k] = v;
  model.visit([&ckpt](const std::string& name, Tensor& t) {
    ckpt.tensors.push_back({name, t});
  });
  return ckpt;
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
  const ModelConfig cfg = ModelConfig::from_kv(ckpt.config);
  return model_from_checkpoint(ckpt, PhonemeVocab::synthetic(cfg.vocab_size));
}

Model model_from_checkpoint(const Checkpoint& ckpt, const PhonemeVocab& vocab) {
  const ModelConfig cfg = ModelConfig::from_kv(ckpt.config);
  Model model(cfg, vocab);
  model.has_aux = !ckpt.stripped;
  model.visit([&ckpt](const std::string& name, Tensor& t) {
    const Tensor* src = ckpt.find(name);
    if (!src) throw std::runtime_error("checkpoint: missing tensor " + name);
    if (!src->same_shape(t)) {
      throw std::runtime_error("checkpoint: tensor " + name + " has shape " + src->shape_str() +
                               ", expected " + t.shape_str());
    }
    t = *src;
  });
  return model;
}

bool is_aux_tensor(const std::string& name) {
  return name.rfind("subseq.", 0) == 0 || name.rfind("ctc_head.", 0) == 0;
}

Checkpoint strip_for_inference(const Checkpoint& ckpt) {
  Checkpoint out;
  out.stripped = true;
  out.step = ckpt.step;
  out.epoch = ckpt.epoch;
  out.config = ckpt.config;
  for (const auto& nt : ckpt.tensors) {
    if (is_aux_tensor(nt.name)) continue;
    out.tensors.push_back(nt);
  }
  // Optimizer state is training-only.
  return out;
}

}  // namespace kws
