// Phoneme text handling: lexicon lookup, anchor padding, phoneme-to-vector
// embedding, per-prefix ground-truth labels, and synthetic paired-corpus
// generation with its on-disk formats.

#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "kws/tensor.hpp"

namespace kws {

constexpr int kDefaultMaxKeywordLen = 25;  // T

using PhonemeSeq = std::vector<int>;

// Phoneme id space: symbols occupy 0..V-1, the CTC blank is V (last class of
// the recognition head) and the text pad id is V+1.
class PhonemeVocab {
 public:
  PhonemeVocab() = default;
  explicit PhonemeVocab(std::vector<std::string> symbols);
  static PhonemeVocab synthetic(int count);  // P00, P01, ...

  int size() const { return static_cast<int>(symbols_.size()); }
  int blank_id() const { return size(); }
  int pad_id() const { return size() + 1; }
  int table_rows() const { return size() + 2; }

  const std::string& symbol(int id) const;
  int id_of(const std::string& symbol) const;  // unknown -> throws
  const std::vector<std::string>& symbols() const { return symbols_; }

  std::string seq_to_string(const PhonemeSeq& seq, int limit = -1) const;

 private:
  std::vector<std::string> symbols_;
  std::map<std::string, int> index_;
};

struct PaddedAnchor {
  std::vector<int> ids;  // exactly T entries, tail filled with pad id
  int valid_len = 0;
};

class Lexicon {
 public:
  Lexicon() = default;
  // File format: one entry per line, `word<TAB>PH1 PH2 ...`.
  static Lexicon load(const std::string& path);
  static Lexicon load_with_vocab(const std::string& path, const PhonemeVocab& vocab);

  const PhonemeVocab& vocab() const { return vocab_; }
  bool contains(const std::string& word) const;
  void add(const std::string& word, PhonemeSeq seq);
  void save(const std::string& path) const;
  size_t size() const { return entries_.size(); }

  // Concatenated phoneme ids of all words; unknown word -> throws naming it.
  PhonemeSeq lookup(const std::vector<std::string>& words) const;
  PhonemeSeq lookup_phrase(const std::string& phrase) const;  // whitespace split

 private:
  PhonemeVocab vocab_;
  std::map<std::string, PhonemeSeq> entries_;
};

// Pads to exactly T ids; requires 1 <= len(seq) <= T.
PaddedAnchor pad_anchor(const PhonemeSeq& seq, int t_max, const PhonemeVocab& vocab);

// Phoneme-to-vector table: one learned row per phoneme; the blank and pad
// rows stay zero and receive no gradient updates.
struct P2VTable {
  Tensor table;  // (V+2) x D

  P2VTable() = default;
  P2VTable(const PhonemeVocab& vocab, int dim);
  void init(std::mt19937_64& rng, const PhonemeVocab& vocab);
  // Clears gradient accumulated on the frozen rows.
  void mask_frozen_rows(const PhonemeVocab& vocab);
};

// Row t of the result is the table row for anchor.ids[t]; padded rows are
// zero because the pad row is zero.
Tape::Id embed_anchor(Tape& t, const PaddedAnchor& anchor, const P2VTable& p2v);

enum class SubseqLabel : std::uint8_t { Mismatch = 0, Match = 1, Invalid = 2 };

struct SubseqLabels {
  std::vector<SubseqLabel> labels;  // length T
};

// labels[t] for t < valid_len: Match iff the first t+1 anchor phonemes equal
// the first t+1 spoken phonemes (Mismatch when spoken is shorter); Invalid
// for t >= valid_len.
SubseqLabels subsequence_labels(const PaddedAnchor& anchor, const PhonemeSeq& spoken);

enum class PairKind : std::uint8_t { Positive = 0, EasyNegative = 1, HardNegative = 2 };

std::string to_string(PairKind kind);

struct PairSample {
  Tensor audio;  // n x F
  PaddedAnchor anchor;
  PhonemeSeq spoken;
  PairKind pair_kind = PairKind::Positive;
  bool utterance_match = false;
};

struct GenConfig {
  int vocab_size = 12;
  int min_len = 3;
  int max_len = 12;
  int frames_per_phoneme_min = 4;
  int frames_per_phoneme_max = 12;
  double noise_sigma = 0.3;
  int feat_dim = 16;
  int t_max = kDefaultMaxKeywordLen;
  std::uint64_t world_seed = 7;  // fixes phoneme prototype vectors

  void validate() const;  // infeasible config -> throws
};

// Prototype acoustic vector for one phoneme; a pure function of
// (world_seed, phoneme id).
std::vector<double> phoneme_prototype(const GenConfig& cfg, int phoneme);

// One sample; deterministic given the rng state.
PairSample synth_pair(std::mt19937_64& rng, const GenConfig& cfg, PairKind kind,
                      const PhonemeVocab& vocab);

struct Corpus {
  GenConfig gen;
  PhonemeVocab vocab;
  std::vector<PairSample> samples;

  std::uint64_t content_hash() const;
};

// Record i is generated from a generator seeded by (seed, i), so shards of
// the index range can be produced independently.
Corpus synth_corpus(const GenConfig& cfg, std::uint64_t seed, int positives, int easy_negatives,
                    int hard_negatives);

std::map<int, int> keyword_length_histogram(const std::vector<PhonemeSeq>& keywords);

// Binary corpus container, little-endian, magic "KWSCORP1".
void save_corpus(const Corpus& corpus, const std::string& path);
Corpus load_corpus(const std::string& path);

// Single-utterance audio file, magic "KWSAUDIO" (used by the infer command).
void save_audio(const Tensor& frames, const std::string& path);
Tensor load_audio(const std::string& path);

}  // namespace kws
