#include "sdlm/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

namespace sdlm {

ToyData make_toy_data(const ToyDataSpec& spec, std::uint64_t seed) {
  if (spec.val_every < 2) throw ConfigError("make_toy_data: val_every must be at least 2");
  ToyData d;
  d.corpus = gen_synthetic_corpus(spec.corpus, seed);
  for (std::size_t i = 0; i < d.corpus.segments.size(); ++i)
    (i % spec.val_every == spec.val_every - 1 ? d.val : d.train).push_back(d.corpus.segments[i]);
  std::vector<std::string> texts;
  for (const auto& s : d.train) texts.push_back(s.raw_text);
  d.vocab = train_bpe(texts, spec.bpe_vocab, seed).extend_lexicon(synthetic_lexicon());
  tokenize_segments(d.train, d.vocab);
  tokenize_segments(d.val, d.vocab);
  tokenize_segments(d.corpus.segments, d.vocab);
  const auto train_stream = build_stream(d.train);
  d.train_tokens = train_stream.tokens.size();
  d.train_windows = make_windows(train_stream, spec.context, spec.stride);
  d.val_windows = make_windows(build_stream(d.val), spec.context, spec.context);
  return d;
}

PackedContext pack_probe(const QaProbe& probe, const Vocabulary& vocab, const std::vector<DocumentSegment>& segments,
                         std::size_t max_context) {
  const DocumentSegment* docs[2] = {nullptr, nullptr};
  for (const auto& s : segments)
    for (int k = 0; k < 2; ++k)
      if (s.doc_id == probe.supporting_doc_ids[k]) docs[k] = &s;
  if (!docs[0] || !docs[1]) throw InputError("probe " + probe.probe_id + ": supporting document not found");
  DocumentSegment q;
  q.doc_id = probe.probe_id;
  q.domain = docs[1]->domain;
  q.temporal_index = std::max(docs[0]->temporal_index, docs[1]->temporal_index);
  q.raw_text = probe.question + probe.answer;
  q.tokens = vocab.encode(q.raw_text);
  std::vector<DocumentSegment> owned{*docs[0], *docs[1]};
  for (auto& s : owned)
    if (s.tokens.empty()) s.tokens = vocab.encode(s.raw_text);
  auto ctx = pack_segments({&owned[0], &owned[1], &q}, max_context);
  if (ctx.targets.back() != vocab.lexicon_id(probe.answer))
    throw InputError("probe " + probe.probe_id + ": answer is not a single lexicon token");
  return ctx;
}

ProbeScore probe_accuracy(const SdlmModel& model, const Vocabulary& vocab, const std::vector<QaProbe>& probes,
                          const std::vector<DocumentSegment>& segments) {
  std::vector<int> candidates;
  for (const auto& s : sector_terms()) {
    const int id = vocab.lexicon_id(s);
    if (id < 0) throw InputError("probe_accuracy: sector term '" + s + "' missing from the lexicon");
    candidates.push_back(id);
  }
  NoGradGuard guard;
  ProbeScore score;
  std::size_t hits = 0;
  for (const auto& p : probes) {
    PackedContext ctx;
    try {
      ctx = pack_probe(p, vocab, segments, model.config().max_context);
    } catch (const TruncationError&) {
      continue;
    }
    const auto logits = model.forward(ctx).logits;
    const std::size_t last = ctx.size() - 1;
    int best = candidates.front();
    for (int c : candidates)
      if (logits(last, static_cast<std::size_t>(c)) > logits(last, static_cast<std::size_t>(best))) best = c;
    hits += best == ctx.targets.back();
    ++score.evaluated;
  }
  if (score.evaluated == 0) throw InputError("probe_accuracy: no probe fits the context window");
  score.accuracy = static_cast<double>(hits) / static_cast<double>(score.evaluated);
  return score;
}

}  // namespace sdlm
