#pragma once

// Shared toy pipeline: synthetic corpus -> BPE + lexicon -> windows.

#include <cstdint>
#include <vector>

#include "sdlm/corpus.hpp"
#include "sdlm/model.hpp"
#include "sdlm/tokenizer.hpp"

namespace sdlm {

struct ToyDataSpec {
  CorpusSpec corpus;
  std::size_t bpe_vocab = 440;  // base bytes + merges, before specials and lexicon
  std::size_t context = 128;
  std::size_t stride = 64;
  std::size_t val_every = 10;  // every n-th document is held out
};

struct ToyData {
  SyntheticCorpus corpus;
  Vocabulary vocab;
  std::vector<DocumentSegment> train, val;
  std::vector<PackedContext> train_windows, val_windows;
  std::size_t train_tokens = 0;
};

ToyData make_toy_data(const ToyDataSpec& spec, std::uint64_t seed);

/// Cross-document probe accuracy: each probe is packed as [doc A, doc B,
/// question + answer] and scored by argmax over the sector terms at the
/// position that predicts the answer. Probes that do not fit are skipped.
struct ProbeScore {
  double accuracy = 0.0;
  std::size_t evaluated = 0;
};
ProbeScore probe_accuracy(const SdlmModel& model, const Vocabulary& vocab, const std::vector<QaProbe>& probes,
                          const std::vector<DocumentSegment>& segments);

/// Packs the probe context described above.
PackedContext pack_probe(const QaProbe& probe, const Vocabulary& vocab, const std::vector<DocumentSegment>& segments,
                         std::size_t max_context);

}  // namespace sdlm
