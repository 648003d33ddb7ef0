#pragma once

// Corpus records, near-duplicate removal, quality filters and the seeded
// synthetic corpus generator.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sdlm/errors.hpp"
#include "sdlm/tokenizer.hpp"

namespace sdlm {

enum class Domain : std::uint8_t { land = 0, air = 1, sea = 2, space = 3, cyber = 4 };
inline constexpr std::size_t kNumDomains = 5;
inline constexpr std::array<Domain, kNumDomains> kAllDomains{Domain::land, Domain::air, Domain::sea,
                                                             Domain::space, Domain::cyber};

std::string_view to_string(Domain d);
Domain parse_domain(std::string_view s);

struct DocumentSegment {
  std::string doc_id;
  Domain domain = Domain::land;
  std::int64_t temporal_index = 0;  // days since corpus epoch, >= 0
  std::vector<int> tokens;          // encode(raw_text) once tokenized
  std::string raw_text;
};

/// Fills `tokens` for every segment.
void tokenize_segments(std::vector<DocumentSegment>& segments, const Vocabulary& vocab);

// ---------------------------------------------------------------------------
// MinHash / LSH

struct MinHashSignature {
  std::size_t k = 0;
  std::size_t shingle_width = 0;
  std::vector<std::uint64_t> values;
};

/// Sorted, de-duplicated hashes of the lowercased character shingles of text.
/// Texts shorter than the width contribute a single whole-text shingle.
std::vector<std::uint64_t> shingle_set(std::string_view text, std::size_t width);

MinHashSignature minhash_of_set(std::span<const std::uint64_t> shingles, std::size_t k,
                                std::uint64_t seed);
MinHashSignature minhash_signature(const DocumentSegment& segment, std::size_t k,
                                   std::size_t shingle_width, std::uint64_t seed);

/// Fraction of coordinates on which two signatures agree.
double estimate_jaccard(const MinHashSignature& a, const MinHashSignature& b);
double exact_jaccard(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b);

enum class DedupLevel { document, paragraph };

struct DedupConfig {
  std::size_t bands = 32;
  std::size_t rows_per_band = 4;
  std::size_t num_hashes = 128;
  std::size_t shingle_width = 5;
  double jaccard_threshold = 0.8;
  DedupLevel level = DedupLevel::document;
  std::uint64_t seed = 0;
};

struct Removal {
  std::size_t segment = 0;    // index in the input
  std::size_t paragraph = 0;  // 0 for document-level removals
  std::size_t duplicate_of_segment = 0;
  std::size_t duplicate_of_paragraph = 0;
  double jaccard = 0.0;
};

struct DedupResult {
  std::vector<DocumentSegment> kept;
  std::vector<Removal> removed;
  std::size_t candidate_pairs = 0;
};

/// LSH banding proposes candidate pairs; each candidate's exact shingle
/// Jaccard decides. The later unit of a pair at or above the threshold is
/// dropped; survivors keep their original order. In paragraph mode, units are
/// blank-line separated paragraphs and documents are rebuilt from survivors
/// (a document losing every paragraph is dropped).
DedupResult lsh_dedup(const std::vector<DocumentSegment>& segments, const DedupConfig& cfg);

/// Splits on blank lines ("\n\n").
std::vector<std::string> split_paragraphs(std::string_view text);

// ---------------------------------------------------------------------------
// Quality filters

using PerplexityScorer = std::function<double(const DocumentSegment&)>;

/// Keeps segments whose scorer perplexity is <= max_perplexity.
std::vector<DocumentSegment> perplexity_filter(const std::vector<DocumentSegment>& segments,
                                               const PerplexityScorer& scorer,
                                               double max_perplexity);

/// Perplexity of a model that is uniform over `vocab_size` tokens.
PerplexityScorer uniform_scorer(std::size_t vocab_size);

using TextPredicate = std::function<bool(std::string_view)>;

/// Stand-in for OCR error-rate screening: passes text whose fraction of
/// non-printable bytes is below max_fraction.
TextPredicate printable_fraction_predicate(double max_fraction = 0.05);

/// PII hook; the default accepts everything (no PII scrubbing at desk scale).
TextPredicate accept_all_predicate();

std::vector<DocumentSegment> filter_segments(const std::vector<DocumentSegment>& segments,
                                             const TextPredicate& keep);

// ---------------------------------------------------------------------------
// Synthetic corpus

struct CorpusSpec {
  std::size_t num_docs = 400;
  std::size_t min_sentences = 4;
  std::size_t max_sentences = 10;
  std::array<double, kNumDomains> domain_weights{1, 1, 1, 1, 1};
  std::int64_t temporal_min = 0;
  std::int64_t temporal_max = 7300;
  std::size_t num_probes = 0;  // each probe plants one fact in each of two documents
  std::size_t distractors_per_probe = 2;
};

/// A cross-document question: the unit's location (first fact) and that
/// location's sector (second fact) live in different documents.
struct QaProbe {
  std::string probe_id;
  std::string question;  // ends right before the answer token
  std::string answer;    // a single lexicon term
  std::array<std::string, 2> supporting_doc_ids;
  std::array<std::string, 2> facts;
};

struct SyntheticCorpus {
  std::vector<DocumentSegment> segments;
  std::vector<QaProbe> probes;
};

SyntheticCorpus gen_synthetic_corpus(const CorpusSpec& spec, std::uint64_t seed);

/// Unit designations, base names, sectors and other single-token terms used
/// by the generator.
std::vector<std::string> synthetic_lexicon();
const std::vector<std::string>& sector_terms();

// ---------------------------------------------------------------------------
// Files. Line-delimited JSON; an optional first line {"_meta": {...}} carries
// provenance and is skipped by readers.

struct ArtifactMeta {
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string producer;
};

void write_corpus(const std::filesystem::path& path, const std::vector<DocumentSegment>& segments,
                  const std::optional<ArtifactMeta>& meta = std::nullopt);
std::vector<DocumentSegment> read_corpus(const std::filesystem::path& path);

void write_probes(const std::filesystem::path& path, const std::vector<QaProbe>& probes,
                  const Vocabulary* vocab, const std::optional<ArtifactMeta>& meta = std::nullopt);
std::vector<QaProbe> read_probes(const std::filesystem::path& path);

}  // namespace sdlm
