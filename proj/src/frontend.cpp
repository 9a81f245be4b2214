#include "kws/frontend.hpp"

#include "kws/layers.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace kws {

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  // splitmix64 step over seed^salt; decorrelates derived streams.
  std::uint64_t z = seed ^ (salt + 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

PhonemeVocab::PhonemeVocab(std::vector<std::string> symbols) : symbols_(std::move(symbols)) {
  for (size_t i = 0; i < symbols_.size(); ++i) {
    if (symbols_[i].empty()) throw std::invalid_argument("vocab: empty phoneme symbol");
    auto [it, inserted] = index_.emplace(symbols_[i], static_cast<int>(i));
    if (!inserted) throw std::invalid_argument("vocab: duplicate phoneme symbol " + symbols_[i]);
  }
}

PhonemeVocab PhonemeVocab::synthetic(int count) {
  std::vector<std::string> syms;
  syms.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    char buf[8];
    std::snprintf(buf, sizeof(buf), "P%02d", i);
    syms.emplace_back(buf);
  }
  return PhonemeVocab(std::move(syms));
}

const std::string& PhonemeVocab::symbol(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("vocab: phoneme id " + std::to_string(id));
  return symbols_[static_cast<size_t>(id)];
}

int PhonemeVocab::id_of(const std::string& symbol) const {
  auto it = index_.find(symbol);
  if (it == index_.end()) throw std::invalid_argument("vocab: unknown phoneme " + symbol);
  return it->second;
}

std::string PhonemeVocab::seq_to_string(const PhonemeSeq& seq, int limit) const {
  std::string out;
  const int n = limit < 0 ? static_cast<int>(seq.size())
                          : std::min<int>(limit, static_cast<int>(seq.size()));
  for (int i = 0; i < n; ++i) {
    if (i) out += " ";
    out += symbol(seq[static_cast<size_t>(i)]);
  }
  return out;
}

Lexicon Lexicon::load(const std::string& path) {
  // Two passes: collect the symbol inventory in order of first appearance,
  // then resolve entries against it.
  std::ifstream in(path);
  if (!in) throw std::runtime_error("lexicon: cannot open " + path);
  std::vector<std::string> symbols;
  std::map<std::string, int> seen;
  std::vector<std::pair<std::string, std::vector<std::string>>> raw;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const size_t tab = line.find('\t');
    if (tab == std::string::npos) throw std::runtime_error("lexicon: missing tab in line: " + line);
    std::string word = line.substr(0, tab);
    std::istringstream rest(line.substr(tab + 1));
    std::vector<std::string> phones;
    std::string p;
    while (rest >> p) {
      if (!seen.count(p)) {
        seen.emplace(p, static_cast<int>(symbols.size()));
        symbols.push_back(p);
      }
      phones.push_back(p);
    }
    if (phones.empty()) throw std::runtime_error("lexicon: entry with no phonemes: " + word);
    raw.emplace_back(std::move(word), std::move(phones));
  }
  Lexicon lex;
  lex.vocab_ = PhonemeVocab(std::move(symbols));
  for (auto& [word, phones] : raw) {
    PhonemeSeq seq;
    seq.reserve(phones.size());
    for (const auto& ph : phones) seq.push_back(lex.vocab_.id_of(ph));
    lex.entries_[word] = std::move(seq);
  }
  return lex;
}

Lexicon Lexicon::load_with_vocab(const std::string& path, const PhonemeVocab& vocab) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("lexicon: cannot open " + path);
  Lexicon lex;
  lex.vocab_ = vocab;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const size_t tab = line.find('\t');
    if (tab == std::string::npos) throw std::runtime_error("lexicon: missing tab in line: " + line);
    std::string word = line.substr(0, tab);
    std::istringstream rest(line.substr(tab + 1));
    PhonemeSeq seq;
    std::string p;
    while (rest >> p) seq.push_back(vocab.id_of(p));
    if (seq.empty()) throw std::runtime_error("lexicon: entry with no phonemes: " + word);
    lex.entries_[word] = std::move(seq);
  }
  return lex;
}

bool Lexicon::contains(const std::string& word) const { return entries_.count(word) > 0; }

void Lexicon::add(const std::string& word, PhonemeSeq seq) { entries_[word] = std::move(seq); }

void Lexicon::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("lexicon: cannot write " + path);
  for (const auto& [word, seq] : entries_) {
    out << word << '\t' << vocab_.seq_to_string(seq) << '\n';
  }
}

PhonemeSeq Lexicon::lookup(const std::vector<std::string>& words) const {
  PhonemeSeq out;
  for (const auto& w : words) {
    auto it = entries_.find(w);
    if (it == entries_.end()) throw std::invalid_argument("lexicon: unknown word \"" + w + "\"");
    out.insert(out.end(), it->second.begin(), it->second.end());
  }
  return out;
}

PhonemeSeq Lexicon::lookup_phrase(const std::string& phrase) const {
  std::istringstream in(phrase);
  std::vector<std::string> words;
  std::string w;
  while (in >> w) words.push_back(w);
  return lookup(words);
}

PaddedAnchor pad_anchor(const PhonemeSeq& seq, int t_max, const PhonemeVocab& vocab) {
  if (seq.empty()) throw std::invalid_argument("pad_anchor: empty keyword");
  if (static_cast<int>(seq.size()) > t_max) {
    throw std::invalid_argument("pad_anchor: keyword length " + std::to_string(seq.size()) +
                                " exceeds maximum supported length T=" + std::to_string(t_max));
  }
  for (int id : seq) {
    if (id < 0 || id >= vocab.size()) {
      throw std::out_of_range("pad_anchor: phoneme id " + std::to_string(id) + " outside vocab");
    }
  }
  PaddedAnchor a;
  a.ids.assign(static_cast<size_t>(t_max), vocab.pad_id());
  std::copy(seq.begin(), seq.end(), a.ids.begin());
  a.valid_len = static_cast<int>(seq.size());
  return a;
}

P2VTable::P2VTable(const PhonemeVocab& vocab, int dim) : table({vocab.table_rows(), dim}) {}

void P2VTable::init(std::mt19937_64& rng, const PhonemeVocab& vocab) {
  init_uniform(table, table.dim(0), table.dim(1), rng);
  // Zero the frozen blank and pad rows.
  const int d = table.dim(1);
  for (int r = vocab.size(); r < vocab.table_rows(); ++r) {
    for (int j = 0; j < d; ++j) table.at(r, j) = 0.0;
  }
}

void P2VTable::mask_frozen_rows(const PhonemeVocab& vocab) {
  if (!table.has_grad()) return;
  const int d = table.dim(1);
  auto& g = table.grad();
  for (int r = vocab.size(); r < vocab.table_rows(); ++r) {
    for (int j = 0; j < d; ++j) g[static_cast<size_t>(r) * d + j] = 0.0;
  }
}

Tape::Id embed_anchor(Tape& t, const PaddedAnchor& anchor, const P2VTable& p2v) {
  return t.gather_rows(t.param(p2v.table), anchor.ids);
}

SubseqLabels subsequence_labels(const PaddedAnchor& anchor, const PhonemeSeq& spoken) {
  SubseqLabels out;
  out.labels.assign(anchor.ids.size(), SubseqLabel::Invalid);
  bool matching = true;
  for (int t = 0; t < anchor.valid_len; ++t) {
    if (matching) {
      matching = static_cast<size_t>(t) < spoken.size() &&
                 spoken[static_cast<size_t>(t)] == anchor.ids[static_cast<size_t>(t)];
    }
    out.labels[static_cast<size_t>(t)] = matching ? SubseqLabel::Match : SubseqLabel::Mismatch;
  }
  return out;
}

std::string to_string(PairKind kind) {
  switch (kind) {
    case PairKind::Positive: return "positive";
    case PairKind::EasyNegative: return "easy-negative";
    case PairKind::HardNegative: return "hard-negative";
  }
  throw std::logic_error("unreachable pair kind");
}

void GenConfig::validate() const {
  if (vocab_size < 2) throw std::invalid_argument("gen: vocab_size must be at least 2 for distinct negatives");
  if (min_len < 1 || max_len < min_len) throw std::invalid_argument("gen: bad keyword length range");
  if (max_len > t_max) {
    throw std::invalid_argument("gen: max keyword length " + std::to_string(max_len) +
                                " exceeds T=" + std::to_string(t_max));
  }
  if (min_len < 2) {
    throw std::invalid_argument("gen: hard negatives need min_len >= 2 to keep a common prefix");
  }
  if (frames_per_phoneme_min < 1 || frames_per_phoneme_max < frames_per_phoneme_min) {
    throw std::invalid_argument("gen: bad frames-per-phoneme range");
  }
  if (noise_sigma < 0.0) throw std::invalid_argument("gen: negative noise level");
  if (feat_dim < 1) throw std::invalid_argument("gen: feat_dim must be positive");
}

std::vector<double> phoneme_prototype(const GenConfig& cfg, int phoneme) {
  std::mt19937_64 rng(mix_seed(cfg.world_seed, 0x70726f746fULL + static_cast<std::uint64_t>(phoneme)));
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> proto(static_cast<size_t>(cfg.feat_dim));
  for (auto& v : proto) v = dist(rng);
  return proto;
}

namespace {

// Mid-heavy keyword length draw (sum of two uniforms), bounded by the range.
int draw_keyword_len(std::mt19937_64& rng, const GenConfig& cfg) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double t = (u(rng) + u(rng)) / 2.0;
  const int span = cfg.max_len - cfg.min_len + 1;
  int len = cfg.min_len + static_cast<int>(t * span);
  return std::min(len, cfg.max_len);
}

PhonemeSeq draw_keyword(std::mt19937_64& rng, const GenConfig& cfg) {
  const int len = draw_keyword_len(rng, cfg);
  std::uniform_int_distribution<int> sym(0, cfg.vocab_size - 1);
  PhonemeSeq seq(static_cast<size_t>(len));
  for (auto& v : seq) v = sym(rng);
  return seq;
}

Tensor render_audio(std::mt19937_64& rng, const GenConfig& cfg, const PhonemeSeq& spoken) {
  std::uniform_int_distribution<int> frames_dist(cfg.frames_per_phoneme_min, cfg.frames_per_phoneme_max);
  std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
  std::vector<int> counts;
  counts.reserve(spoken.size());
  int total = 0;
  for (size_t i = 0; i < spoken.size(); ++i) {
    const int k = frames_dist(rng);
    counts.push_back(k);
    total += k;
  }
  Tensor audio({total, cfg.feat_dim});
  int row = 0;
  for (size_t i = 0; i < spoken.size(); ++i) {
    const std::vector<double> proto = phoneme_prototype(cfg, spoken[i]);
    for (int k = 0; k < counts[i]; ++k, ++row) {
      for (int j = 0; j < cfg.feat_dim; ++j) {
        audio.at(row, j) = proto[static_cast<size_t>(j)] + noise(rng);
      }
    }
  }
  return audio;
}

}  // namespace

PairSample synth_pair(std::mt19937_64& rng, const GenConfig& cfg, PairKind kind,
                      const PhonemeVocab& vocab) {
  cfg.validate();
  const PhonemeSeq anchor = draw_keyword(rng, cfg);
  PhonemeSeq spoken;
  switch (kind) {
    case PairKind::Positive:
      spoken = anchor;
      break;
    case PairKind::EasyNegative: {
      do {
        spoken = draw_keyword(rng, cfg);
      } while (spoken == anchor);
      break;
    }
    case PairKind::HardNegative: {
      // 1-2 substitutions at non-initial positions: position 0 is shared, so
      // at least one prefix matches, and edit distance stays <= 2.
      spoken = anchor;
      const int len = static_cast<int>(anchor.size());
      std::uniform_int_distribution<int> nsub_dist(1, len > 2 ? 2 : 1);
      const int nsub = nsub_dist(rng);
      std::uniform_int_distribution<int> pos_dist(1, len - 1);
      std::vector<int> positions;
      while (static_cast<int>(positions.size()) < nsub) {
        const int p = pos_dist(rng);
        if (std::find(positions.begin(), positions.end(), p) == positions.end()) positions.push_back(p);
      }
      std::uniform_int_distribution<int> sym(0, cfg.vocab_size - 1);
      for (int p : positions) {
        int repl = sym(rng);
        while (repl == anchor[static_cast<size_t>(p)]) repl = sym(rng);
        spoken[static_cast<size_t>(p)] = repl;
      }
      break;
    }
  }
  PairSample s;
  s.audio = render_audio(rng, cfg, spoken);
  s.anchor = pad_anchor(anchor, cfg.t_max, vocab);
  s.spoken = std::move(spoken);
  s.pair_kind = kind;
  s.utterance_match = (kind == PairKind::Positive);
  return s;
}

std::uint64_t Corpus::content_hash() const {
  // FNV-1a over the structural fields and audio bits.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  };
  mix(static_cast<std::uint64_t>(vocab.size()));
  mix(static_cast<std::uint64_t>(gen.feat_dim));
  mix(static_cast<std::uint64_t>(samples.size()));
  for (const auto& s : samples) {
    mix(static_cast<std::uint64_t>(s.pair_kind));
    for (int id : s.spoken) mix(static_cast<std::uint64_t>(id));
    mix(static_cast<std::uint64_t>(s.anchor.valid_len));
    for (int id : s.anchor.ids) mix(static_cast<std::uint64_t>(id));
    for (std::int64_t i = 0; i < s.audio.numel(); ++i) {
      std::uint64_t bits;
      const double v = s.audio.at(i);
      std::memcpy(&bits, &v, sizeof(bits));
      mix(bits);
    }
  }
  return h;
}

Corpus synth_corpus(const GenConfig& cfg, std::uint64_t seed, int positives, int easy_negatives,
                    int hard_negatives) {
  cfg.validate();
  Corpus corpus;
  corpus.gen = cfg;
  corpus.vocab = PhonemeVocab::synthetic(cfg.vocab_size);
  const int total = positives + easy_negatives + hard_negatives;
  corpus.samples.reserve(static_cast<size_t>(total));
  for (int i = 0; i < total; ++i) {
    PairKind kind = i < positives                    ? PairKind::Positive
                    : i < positives + easy_negatives ? PairKind::EasyNegative
                                                     : PairKind::HardNegative;
    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    corpus.samples.push_back(synth_pair(rng, cfg, kind, corpus.vocab));
  }
  return corpus;
}

std::map<int, int> keyword_length_histogram(const std::vector<PhonemeSeq>& keywords) {
  std::map<int, int> hist;
  for (const auto& k : keywords) ++hist[static_cast<int>(k.size())];
  return hist;
}

namespace {

constexpr char kCorpusMagic[8] = {'K', 'W', 'S', 'C', 'O', 'R', 'P', '1'};
constexpr char kAudioMagic[8] = {'K', 'W', 'S', 'A', 'U', 'D', 'I', 'O'};
constexpr std::uint32_t kCorpusVersion = 1;
constexpr std::uint32_t kAudioVersion = 1;

void write_bytes(std::ofstream& out, const void* p, size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void read_bytes(std::ifstream& in, void* p, size_t n) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (!in) throw std::runtime_error("corpus/audio file: truncated");
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

void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("corpus: cannot write " + path);
  write_bytes(out, kCorpusMagic, sizeof(kCorpusMagic));
  write_pod<std::uint32_t>(out, kCorpusVersion);
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(corpus.vocab.size()));
  for (const auto& s : corpus.vocab.symbols()) write_string(out, s);
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(corpus.gen.feat_dim));
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(corpus.gen.t_max));
  write_pod<std::uint64_t>(out, corpus.gen.world_seed);
  write_pod<double>(out, corpus.gen.noise_sigma);
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(corpus.gen.min_len));
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(corpus.gen.max_len));
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(corpus.gen.frames_per_phoneme_min));
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(corpus.gen.frames_per_phoneme_max));
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(corpus.samples.size()));
  for (const auto& s : corpus.samples) {
    write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(s.pair_kind));
    write_pod<std::uint16_t>(out, static_cast<std::uint16_t>(s.anchor.valid_len));
    write_pod<std::uint16_t>(out, static_cast<std::uint16_t>(s.spoken.size()));
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(s.audio.rows()));
    for (int i = 0; i < s.anchor.valid_len; ++i)
      write_pod<std::uint16_t>(out, static_cast<std::uint16_t>(s.anchor.ids[static_cast<size_t>(i)]));
    for (int id : s.spoken) write_pod<std::uint16_t>(out, static_cast<std::uint16_t>(id));
    for (std::int64_t i = 0; i < s.audio.numel(); ++i)
      write_pod<float>(out, static_cast<float>(s.audio.at(i)));
  }
  if (!out) throw std::runtime_error("corpus: write failed for " + path);
}

Corpus load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("corpus: cannot open " + path);
  char magic[8];
  read_bytes(in, magic, sizeof(magic));
  if (std::memcmp(magic, kCorpusMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("corpus: bad magic in " + path);
  }
  const auto version = read_pod<std::uint32_t>(in);
  if (version != kCorpusVersion) {
    throw std::runtime_error("corpus: unsupported version " + std::to_string(version));
  }
  Corpus corpus;
  const auto vocab_size = read_pod<std::uint32_t>(in);
  std::vector<std::string> symbols;
  symbols.reserve(vocab_size);
  for (std::uint32_t i = 0; i < vocab_size; ++i) symbols.push_back(read_string(in));
  corpus.vocab = PhonemeVocab(std::move(symbols));
  corpus.gen.vocab_size = static_cast<int>(vocab_size);
  corpus.gen.feat_dim = static_cast<int>(read_pod<std::uint32_t>(in));
  corpus.gen.t_max = static_cast<int>(read_pod<std::uint32_t>(in));
  corpus.gen.world_seed = read_pod<std::uint64_t>(in);
  corpus.gen.noise_sigma = read_pod<double>(in);
  corpus.gen.min_len = static_cast<int>(read_pod<std::uint32_t>(in));
  corpus.gen.max_len = static_cast<int>(read_pod<std::uint32_t>(in));
  corpus.gen.frames_per_phoneme_min = static_cast<int>(read_pod<std::uint32_t>(in));
  corpus.gen.frames_per_phoneme_max = static_cast<int>(read_pod<std::uint32_t>(in));
  const auto count = read_pod<std::uint32_t>(in);
  corpus.samples.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    PairSample s;
    s.pair_kind = static_cast<PairKind>(read_pod<std::uint8_t>(in));
    const int valid_len = read_pod<std::uint16_t>(in);
    const int spoken_len = read_pod<std::uint16_t>(in);
    const int frames = static_cast<int>(read_pod<std::uint32_t>(in));
    PhonemeSeq anchor(static_cast<size_t>(valid_len));
    for (auto& id : anchor) id = read_pod<std::uint16_t>(in);
    s.anchor = pad_anchor(anchor, corpus.gen.t_max, corpus.vocab);
    s.spoken.resize(static_cast<size_t>(spoken_len));
    for (auto& id : s.spoken) id = read_pod<std::uint16_t>(in);
    s.audio = Tensor({frames, corpus.gen.feat_dim});
    for (std::int64_t j = 0; j < s.audio.numel(); ++j) s.audio.at(j) = read_pod<float>(in);
    s.utterance_match = (s.pair_kind == PairKind::Positive);
    corpus.samples.push_back(std::move(s));
  }
  return corpus;
}

void save_audio(const Tensor& frames, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("audio: cannot write " + path);
  write_bytes(out, kAudioMagic, sizeof(kAudioMagic));
  write_pod<std::uint32_t>(out, kAudioVersion);
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(frames.rows()));
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(frames.cols()));
  for (std::int64_t i = 0; i < frames.numel(); ++i) write_pod<float>(out, static_cast<float>(frames.at(i)));
  if (!out) throw std::runtime_error("audio: write failed for " + path);
}

Tensor load_audio(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("audio: cannot open " + path);
  char magic[8];
  read_bytes(in, magic, sizeof(magic));
  if (std::memcmp(magic, kAudioMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("audio: bad magic in " + path);
  }
  const auto version = read_pod<std::uint32_t>(in);
  if (version != kAudioVersion) throw std::runtime_error("audio: unsupported version");
  const int n = static_cast<int>(read_pod<std::uint32_t>(in));
  const int f = static_cast<int>(read_pod<std::uint32_t>(in));
  Tensor frames({n, f});
  for (std::int64_t i = 0; i < frames.numel(); ++i) frames.at(i) = read_pod<float>(in);
  return frames;
}

}  // namespace kws
