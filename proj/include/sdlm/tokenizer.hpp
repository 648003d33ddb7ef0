#pragma once

// Byte-level BPE with a single-token domain lexicon.
//
// Id layout: reserved specials, then the base byte alphabet (ascending byte
// value), then merge products in merge order, then lexicon terms in insertion
// order. Ids are dense.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sdlm/errors.hpp"

namespace sdlm {

inline constexpr int kUnkId = 0;
inline constexpr int kSepId = 1;
inline constexpr std::size_t kNumSpecials = 2;

class Vocabulary {
 public:
  Vocabulary() = default;

  std::size_t size() const { return tokens_.size(); }
  std::size_t alphabet_size() const { return base_bytes_.size(); }
  std::size_t merge_count() const { return merges_.size(); }
  std::size_t lexicon_size() const { return lexicon_.size(); }

  const std::string& token(int id) const;
  const std::vector<std::pair<int, int>>& merges() const { return merges_; }
  const std::vector<unsigned char>& base_bytes() const { return base_bytes_; }
  const std::vector<std::string>& lexicon_terms() const { return lexicon_; }
  /// Id of a lexicon term, or -1.
  int lexicon_id(std::string_view term) const;
  /// Id of a single base byte, or kUnkId.
  int byte_id(unsigned char b) const { return byte_to_id_[b]; }

  std::vector<int> encode(std::string_view text) const;
  std::string decode(std::span<const int> ids) const;

  /// Adds terms that are not yet present; existing terms keep their id.
  Vocabulary extend_lexicon(const std::vector<std::string>& terms) const;

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);
  std::string to_json() const;
  static Vocabulary from_json(const std::string& text);

  /// Assembles a vocabulary from its parts; used by training and loading.
  static Vocabulary build(std::vector<unsigned char> base_bytes,
                          std::vector<std::pair<int, int>> merges,
                          std::vector<std::string> lexicon);

 private:
  void encode_span(std::string_view text, std::vector<int>& out) const;
  void encode_word(std::string_view word, std::vector<int>& out) const;
  void add_lexicon_term(const std::string& term);

  std::vector<std::string> tokens_;
  std::vector<unsigned char> base_bytes_;
  std::vector<std::pair<int, int>> merges_;
  std::vector<std::string> lexicon_;
  std::array<int, 256> byte_to_id_{};
  std::unordered_map<std::uint64_t, std::pair<int, int>> merge_rank_;  // pair key -> (rank, id)
  std::unordered_map<std::string, int> lexicon_index_;
  // First byte -> lexicon ids sorted by descending term length.
  std::array<std::vector<int>, 256> lexicon_by_first_{};
};

struct BpeOptions {
  /// Always include printable ASCII, tab and newline in the base alphabet so
  /// that any ASCII text round-trips even if the corpus never used a byte.
  bool printable_ascii_base = true;
};

/// Greedy BPE: repeatedly merges the most frequent adjacent pair (ties go to
/// the lexicographically smaller pair of token strings) until
/// alphabet + merges == target_vocab or no pair occurs at least twice.
/// The merge sequence is fully determined by the tie rule; seed is recorded
/// for provenance only.
Vocabulary train_bpe(const std::vector<std::string>& corpus, std::size_t target_vocab,
                     std::uint64_t seed, const BpeOptions& options = {});

inline Vocabulary extend_lexicon(const Vocabulary& vocab, const std::vector<std::string>& terms) {
  return vocab.extend_lexicon(terms);
}

}  // namespace sdlm
