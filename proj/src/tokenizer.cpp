#include "sdlm/tokenizer.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <tuple>

#include "json.hpp"

namespace sdlm {

namespace {

constexpr const char* kSpecialStrings[kNumSpecials] = {"<unk>", "<sep>"};
constexpr int kVocabFormatVersion = 1;

std::uint64_t pair_key(int a, int b) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
         static_cast<std::uint32_t>(b);
}

bool is_space(char c) { return c == ' ' || c == '\n' || c == '\t' || c == '\r'; }

/// Splits text into words; each whitespace character starts a new word.
std::vector<std::string_view> pre_tokenize(std::string_view text) {
  std::vector<std::string_view> words;
  std::size_t start = 0;
  for (std::size_t i = 1; i <= text.size(); ++i) {
    if (i == text.size() || is_space(text[i])) {
      if (i > start) words.push_back(text.substr(start, i - start));
      start = i;
    }
  }
  return words;
}

}  // namespace

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " +
                     std::to_string(tokens_.size()));
  return tokens_[static_cast<std::size_t>(id)];
}

int Vocabulary::lexicon_id(std::string_view term) const {
  auto it = lexicon_index_.find(std::string(term));
  return it == lexicon_index_.end() ? -1 : it->second;
}

Vocabulary Vocabulary::build(std::vector<unsigned char> base_bytes,
                             std::vector<std::pair<int, int>> merges,
                             std::vector<std::string> lexicon) {
  Vocabulary v;
  std::sort(base_bytes.begin(), base_bytes.end());
  base_bytes.erase(std::unique(base_bytes.begin(), base_bytes.end()), base_bytes.end());
  v.byte_to_id_.fill(kUnkId);
  for (auto* s : kSpecialStrings) v.tokens_.emplace_back(s);
  for (unsigned char b : base_bytes) {
    v.byte_to_id_[b] = static_cast<int>(v.tokens_.size());
    v.tokens_.emplace_back(1, static_cast<char>(b));
  }
  v.base_bytes_ = std::move(base_bytes);
  for (std::size_t r = 0; r < merges.size(); ++r) {
    const auto [a, b] = merges[r];
    const auto n = static_cast<int>(v.tokens_.size());
    if (a < static_cast<int>(kNumSpecials) || b < static_cast<int>(kNumSpecials) || a >= n || b >= n)
      throw ConfigError("merge " + std::to_string(r) + " references an invalid id");
    v.merge_rank_[pair_key(a, b)] = {static_cast<int>(r), n};
    v.tokens_.push_back(v.tokens_[static_cast<std::size_t>(a)] + v.tokens_[static_cast<std::size_t>(b)]);
  }
  v.merges_ = std::move(merges);
  for (const auto& term : lexicon) v.add_lexicon_term(term);
  return v;
}

void Vocabulary::add_lexicon_term(const std::string& term) {
  if (term.empty()) throw InputError("lexicon terms must be non-empty");
  if (lexicon_index_.count(term)) return;
  const int id = static_cast<int>(tokens_.size());
  tokens_.push_back(term);
  lexicon_.push_back(term);
  lexicon_index_[term] = id;
  auto& bucket = lexicon_by_first_[static_cast<unsigned char>(term[0])];
  bucket.push_back(id);
  std::stable_sort(bucket.begin(), bucket.end(), [this](int x, int y) {
    return tokens_[static_cast<std::size_t>(x)].size() > tokens_[static_cast<std::size_t>(y)].size();
  });
}

Vocabulary Vocabulary::extend_lexicon(const std::vector<std::string>& terms) const {
  Vocabulary v = *this;
  for (const auto& t : terms) v.add_lexicon_term(t);
  return v;
}

void Vocabulary::encode_word(std::string_view word, std::vector<int>& out) const {
  std::vector<int> sym;
  sym.reserve(word.size());
  for (char c : word) sym.push_back(byte_to_id_[static_cast<unsigned char>(c)]);
  while (sym.size() > 1) {
    int best_rank = std::numeric_limits<int>::max();
    int best_id = -1;
    std::uint64_t best_key = 0;
    for (std::size_t i = 0; i + 1 < sym.size(); ++i) {
      auto it = merge_rank_.find(pair_key(sym[i], sym[i + 1]));
      if (it != merge_rank_.end() && it->second.first < best_rank) {
        best_rank = it->second.first;
        best_id = it->second.second;
        best_key = it->first;
      }
    }
    if (best_id < 0) break;
    std::vector<int> next;
    next.reserve(sym.size());
    for (std::size_t i = 0; i < sym.size(); ++i) {
      if (i + 1 < sym.size() && pair_key(sym[i], sym[i + 1]) == best_key) {
        next.push_back(best_id);
        ++i;
      } else {
        next.push_back(sym[i]);
      }
    }
    sym.swap(next);
  }
  out.insert(out.end(), sym.begin(), sym.end());
}

void Vocabulary::encode_span(std::string_view text, std::vector<int>& out) const {
  for (auto w : pre_tokenize(text)) encode_word(w, out);
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::vector<int> out;
  std::size_t pending = 0;
  std::size_t i = 0;
  while (i < text.size()) {
    int matched = -1;
    for (int id : lexicon_by_first_[static_cast<unsigned char>(text[i])]) {
      const auto& term = tokens_[static_cast<std::size_t>(id)];
      if (text.compare(i, term.size(), term) == 0) {
        matched = id;
        break;
      }
    }
    if (matched >= 0) {
      encode_span(text.substr(pending, i - pending), out);
      out.push_back(matched);
      i += tokens_[static_cast<std::size_t>(matched)].size();
      pending = i;
    } else {
      ++i;
    }
  }
  encode_span(text.substr(pending), out);
  return out;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) out += token(id);
  return out;
}

std::string Vocabulary::to_json() const {
  nlohmann::json j;
  j["format"] = "sdlm-vocab";
  j["version"] = kVocabFormatVersion;
  j["specials"] = std::vector<std::string>(std::begin(kSpecialStrings), std::end(kSpecialStrings));
  std::vector<int> base(base_bytes_.begin(), base_bytes_.end());
  j["base_bytes"] = base;
  auto merges = nlohmann::json::array();
  for (auto [a, b] : merges_) merges.push_back({a, b});
  j["merges"] = merges;
  j["lexicon"] = lexicon_;
  return j.dump(1);
}

Vocabulary Vocabulary::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("vocabulary: malformed file: ") + e.what());
  }
  if (j.value("format", "") != "sdlm-vocab") throw ConfigError("vocabulary: unknown format tag");
  if (j.value("version", 0) != kVocabFormatVersion)
    throw ConfigError("vocabulary: unsupported version");
  std::vector<unsigned char> base;
  for (int b : j.at("base_bytes")) {
    if (b < 0 || b > 255) throw ConfigError("vocabulary: base byte out of range");
    base.push_back(static_cast<unsigned char>(b));
  }
  std::vector<std::pair<int, int>> merges;
  for (const auto& m : j.at("merges")) merges.emplace_back(m.at(0).get<int>(), m.at(1).get<int>());
  return build(std::move(base), std::move(merges), j.at("lexicon").get<std::vector<std::string>>());
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream f(path);
  if (!f) throw InputError("cannot write vocabulary to " + path.string());
  f << to_json() << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw InputError("cannot read vocabulary from " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return from_json(ss.str());
}

Vocabulary train_bpe(const std::vector<std::string>& corpus, std::size_t target_vocab,
                     std::uint64_t /*seed*/, const BpeOptions& options) {
  if (corpus.empty()) throw InputError("train_bpe: empty corpus");
  std::array<bool, 256> present{};
  if (options.printable_ascii_base) {
    for (int c = 32; c < 127; ++c) present[static_cast<std::size_t>(c)] = true;
    present['\n'] = present['\t'] = true;
  }
  std::map<std::string, long> word_freq;
  for (const auto& doc : corpus) {
    for (char c : doc) present[static_cast<unsigned char>(c)] = true;
    for (auto w : pre_tokenize(doc)) ++word_freq[std::string(w)];
  }
  std::vector<unsigned char> base;
  for (int b = 0; b < 256; ++b)
    if (present[static_cast<std::size_t>(b)]) base.push_back(static_cast<unsigned char>(b));
  if (target_vocab < base.size())
    throw ConfigError("train_bpe: target vocabulary " + std::to_string(target_vocab) +
                      " is smaller than the alphabet (" + std::to_string(base.size()) + ")");

  Vocabulary proto = Vocabulary::build(base, {}, {});
  std::vector<std::string> tok;
  for (std::size_t i = 0; i < proto.size(); ++i) tok.push_back(proto.token(static_cast<int>(i)));

  std::vector<std::vector<int>> words;
  std::vector<long> freqs;
  for (const auto& [w, f] : word_freq) {
    std::vector<int> s;
    for (char c : w) s.push_back(proto.byte_id(static_cast<unsigned char>(c)));
    words.push_back(std::move(s));
    freqs.push_back(f);
  }

  std::vector<std::pair<int, int>> merges;
  const std::size_t wanted = target_vocab - base.size();
  std::unordered_map<std::uint64_t, long> counts;
  while (merges.size() < wanted) {
    counts.clear();
    for (std::size_t w = 0; w < words.size(); ++w)
      for (std::size_t i = 0; i + 1 < words[w].size(); ++i)
        counts[pair_key(words[w][i], words[w][i + 1])] += freqs[w];
    long best = 1;
    int ba = -1, bb = -1;
    for (const auto& [key, c] : counts) {
      const int a = static_cast<int>(key >> 32);
      const int b = static_cast<int>(key & 0xffffffffU);
      const bool better =
          c > best || (c == best && ba >= 0 &&
                       std::tie(tok[static_cast<std::size_t>(a)], tok[static_cast<std::size_t>(b)]) <
                           std::tie(tok[static_cast<std::size_t>(ba)], tok[static_cast<std::size_t>(bb)]));
      if (c >= 2 && (better || ba < 0)) {
        best = c;
        ba = a;
        bb = b;
      }
    }
    if (ba < 0) break;  // no pair repeats
    const int id = static_cast<int>(tok.size());
    tok.push_back(tok[static_cast<std::size_t>(ba)] + tok[static_cast<std::size_t>(bb)]);
    merges.emplace_back(ba, bb);
    for (auto& s : words) {
      std::vector<int> next;
      next.reserve(s.size());
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (i + 1 < s.size() && s[i] == ba && s[i + 1] == bb) {
          next.push_back(id);
          ++i;
        } else {
          next.push_back(s[i]);
        }
      }
      s.swap(next);
    }
  }
  return Vocabulary::build(std::move(base), std::move(merges), {});
}

}  // namespace sdlm
