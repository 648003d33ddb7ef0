#include "sdlm/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

#include "json.hpp"
#include "sdlm/rng.hpp"

namespace sdlm {

namespace {

constexpr std::uint64_t kMersenne61 = (1ULL << 61) - 1;

std::uint64_t mod_mersenne61(unsigned __int128 x) {
  // x mod (2^61 - 1) via folding.
  std::uint64_t lo = static_cast<std::uint64_t>(x & kMersenne61);
  std::uint64_t hi = static_cast<std::uint64_t>(x >> 61);
  std::uint64_t r = lo + hi;
  while (r >= kMersenne61) r -= kMersenne61;
  return r;
}

struct HashFamily {
  std::vector<std::uint64_t> a, b;
  HashFamily(std::size_t k, std::uint64_t seed) {
    Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
    for (std::size_t i = 0; i < k; ++i) {
      a.push_back(1 + rng.below(kMersenne61 - 1));
      b.push_back(rng.below(kMersenne61));
    }
  }
  std::uint64_t operator()(std::size_t i, std::uint64_t x) const {
    const std::uint64_t xr = x % kMersenne61;
    return mod_mersenne61(static_cast<unsigned __int128>(a[i]) * xr + b[i]);
  }
};

std::string json_meta_line(const ArtifactMeta& m) {
  nlohmann::json j;
  j["_meta"] = {{"seed", m.seed}, {"config_hash", m.config_hash}, {"producer", m.producer}};
  return j.dump();
}

}  // namespace

std::string_view to_string(Domain d) {
  switch (d) {
    case Domain::land: return "land";
    case Domain::air: return "air";
    case Domain::sea: return "sea";
    case Domain::space: return "space";
    case Domain::cyber: return "cyber";
  }
  return "land";
}

Domain parse_domain(std::string_view s) {
  for (auto d : kAllDomains)
    if (to_string(d) == s) return d;
  throw InputError("unknown domain '" + std::string(s) + "'");
}

void tokenize_segments(std::vector<DocumentSegment>& segments, const Vocabulary& vocab) {
  for (auto& s : segments) s.tokens = vocab.encode(s.raw_text);
}

// ---------------------------------------------------------------------------
// MinHash

std::vector<std::uint64_t> shingle_set(std::string_view text, std::size_t width) {
  std::string lower(text);
  for (auto& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  std::vector<std::uint64_t> out;
  if (lower.size() < width) {
    out.push_back(fnv1a64(lower.data(), lower.size()));
  } else {
    out.reserve(lower.size() - width + 1);
    for (std::size_t i = 0; i + width <= lower.size(); ++i)
      out.push_back(fnv1a64(lower.data() + i, width));
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

MinHashSignature minhash_of_set(std::span<const std::uint64_t> shingles, std::size_t k,
                                std::uint64_t seed) {
  if (k < 1) throw ConfigError("minhash: need at least one hash function");
  HashFamily h(k, seed);
  MinHashSignature sig;
  sig.k = k;
  sig.values.assign(k, UINT64_MAX);
  for (auto x : shingles)
    for (std::size_t i = 0; i < k; ++i) sig.values[i] = std::min(sig.values[i], h(i, x));
  return sig;
}

MinHashSignature minhash_signature(const DocumentSegment& segment, std::size_t k,
                                   std::size_t shingle_width, std::uint64_t seed) {
  if (shingle_width < 1) throw ConfigError("minhash: shingle width must be positive");
  if (segment.raw_text.size() < shingle_width)
    throw InputError("minhash: text of " + std::to_string(segment.raw_text.size()) +
                     " bytes is shorter than the shingle width " + std::to_string(shingle_width));
  auto sig = minhash_of_set(shingle_set(segment.raw_text, shingle_width), k, seed);
  sig.shingle_width = shingle_width;
  return sig;
}

double estimate_jaccard(const MinHashSignature& a, const MinHashSignature& b) {
  if (a.k != b.k || a.values.size() != b.values.size())
    throw DimensionError("estimate_jaccard: signatures of different length");
  std::size_t eq = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) eq += a.values[i] == b.values[i];
  return static_cast<double>(eq) / static_cast<double>(a.values.size());
}

double exact_jaccard(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b) {
  if (a.empty() && b.empty()) return 1.0;
  std::size_t i = 0, j = 0, inter = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] == b[j]) {
      ++inter;
      ++i;
      ++j;
    } else if (a[i] < b[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  return static_cast<double>(inter) / static_cast<double>(a.size() + b.size() - inter);
}

std::vector<std::string> split_paragraphs(std::string_view text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = text.find("\n\n", start);
    if (pos == std::string_view::npos) {
      out.emplace_back(text.substr(start));
      break;
    }
    out.emplace_back(text.substr(start, pos - start));
    start = pos + 2;
  }
  return out;
}

DedupResult lsh_dedup(const std::vector<DocumentSegment>& segments, const DedupConfig& cfg) {
  if (cfg.bands == 0 || cfg.rows_per_band == 0 || cfg.bands * cfg.rows_per_band != cfg.num_hashes)
    throw ConfigError("lsh_dedup: bands (" + std::to_string(cfg.bands) + ") x rows (" +
                      std::to_string(cfg.rows_per_band) + ") must equal the signature length (" +
                      std::to_string(cfg.num_hashes) + ")");
  if (cfg.jaccard_threshold < 0.0 || cfg.jaccard_threshold > 1.0)
    throw ConfigError("lsh_dedup: threshold must lie in [0, 1]");

  struct Unit {
    std::size_t seg, para;
    std::string text;
    std::vector<std::uint64_t> shingles;
  };
  std::vector<Unit> units;
  for (std::size_t s = 0; s < segments.size(); ++s) {
    if (cfg.level == DedupLevel::document) {
      units.push_back({s, 0, segments[s].raw_text, {}});
    } else {
      auto paras = split_paragraphs(segments[s].raw_text);
      for (std::size_t p = 0; p < paras.size(); ++p) units.push_back({s, p, std::move(paras[p]), {}});
    }
  }
  std::vector<MinHashSignature> sigs;
  sigs.reserve(units.size());
  for (auto& u : units) {
    u.shingles = shingle_set(u.text, cfg.shingle_width);
    sigs.push_back(minhash_of_set(u.shingles, cfg.num_hashes, cfg.seed));
  }

  // Band buckets -> candidate partners (earlier units only).
  std::vector<std::set<std::size_t>> earlier(units.size());
  for (std::size_t band = 0; band < cfg.bands; ++band) {
    std::unordered_map<std::uint64_t, std::vector<std::size_t>> buckets;
    for (std::size_t u = 0; u < units.size(); ++u) {
      const auto* v = sigs[u].values.data() + band * cfg.rows_per_band;
      const auto key = fnv1a64(v, cfg.rows_per_band * sizeof(std::uint64_t), band + 1);
      auto& bucket = buckets[key];
      for (auto prev : bucket) earlier[u].insert(prev);
      bucket.push_back(u);
    }
  }

  DedupResult res;
  std::vector<bool> dropped(units.size(), false);
  for (std::size_t u = 0; u < units.size(); ++u) {
    res.candidate_pairs += earlier[u].size();
    for (auto prev : earlier[u]) {
      if (dropped[prev]) continue;
      const double jac = exact_jaccard(units[prev].shingles, units[u].shingles);
      if (jac >= cfg.jaccard_threshold) {
        dropped[u] = true;
        res.removed.push_back({units[u].seg, units[u].para, units[prev].seg, units[prev].para, jac});
        break;
      }
    }
  }

  if (cfg.level == DedupLevel::document) {
    for (std::size_t u = 0; u < units.size(); ++u)
      if (!dropped[u]) res.kept.push_back(segments[units[u].seg]);
  } else {
    std::vector<std::vector<std::string>> survivors(segments.size());
    for (std::size_t u = 0; u < units.size(); ++u)
      if (!dropped[u]) survivors[units[u].seg].push_back(units[u].text);
    for (std::size_t s = 0; s < segments.size(); ++s) {
      if (survivors[s].empty()) continue;
      DocumentSegment seg = segments[s];
      std::string text;
      for (std::size_t i = 0; i < survivors[s].size(); ++i) {
        if (i) text += "\n\n";
        text += survivors[s][i];
      }
      if (text != seg.raw_text) seg.tokens.clear();
      seg.raw_text = std::move(text);
      res.kept.push_back(std::move(seg));
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Filters

std::vector<DocumentSegment> perplexity_filter(const std::vector<DocumentSegment>& segments,
                                               const PerplexityScorer& scorer,
                                               double max_perplexity) {
  std::vector<DocumentSegment> out;
  for (const auto& s : segments)
    if (scorer(s) <= max_perplexity) out.push_back(s);
  return out;
}

PerplexityScorer uniform_scorer(std::size_t vocab_size) {
  return [vocab_size](const DocumentSegment&) { return static_cast<double>(vocab_size); };
}

TextPredicate printable_fraction_predicate(double max_fraction) {
  return [max_fraction](std::string_view text) {
    if (text.empty()) return true;
    std::size_t bad = 0;
    for (char c : text) {
      const auto u = static_cast<unsigned char>(c);
      const bool printable = (u >= 32 && u < 127) || c == '\n' || c == '\t' || u >= 128;
      bad += !printable;
    }
    return static_cast<double>(bad) / static_cast<double>(text.size()) < max_fraction;
  };
}

TextPredicate accept_all_predicate() {
  return [](std::string_view) { return true; };
}

std::vector<DocumentSegment> filter_segments(const std::vector<DocumentSegment>& segments,
                                             const TextPredicate& keep) {
  std::vector<DocumentSegment> out;
  for (const auto& s : segments)
    if (keep(s.raw_text)) out.push_back(s);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

namespace {

const std::vector<std::string> kUnits{
    "1st Infantry Division", "3rd Armored Brigade",    "101st Airborne Division",
    "2nd Marine Regiment",   "10th Mountain Division", "82nd Airborne Division",
    "4th Cavalry Squadron",  "5th Signal Battalion",   "7th Fleet",
    "6th Fleet",             "3rd Cyber Battalion",    "1st Space Wing",
    "12th Air Wing",         "48th Fighter Wing",      "9th Logistics Group",
    "11th Engineer Battalion"};
const std::vector<std::string> kBases{"Base Anvil",   "Base Hammer", "Base Falcon",
                                      "Base Granite", "Base Harbor", "Base Orion",
                                      "Base Summit",  "Base Willow", "Base Ember",
                                      "Base Cobalt"};
const std::vector<std::string> kSectors{"Sector Alpha",   "Sector Bravo", "Sector Charlie",
                                        "Sector Delta",   "Sector Echo",  "Sector Foxtrot",
                                        "Sector Golf",    "Sector Hotel"};
// Three eras; documents draw equipment from the era of their date.
const std::vector<std::vector<std::string>> kWeaponsByEra{
    {"M60 Patton", "F-4 Phantom", "Nike Hercules"},
    {"M1A2 Abrams", "Patriot PAC-3", "Arleigh Burke"},
    {"F-35A Lightning II", "MQ-9 Reaper", "GPS III"}};
const std::vector<std::string> kDoctrine{"AJP-3.2", "AJP-01", "JP 3-0", "FM 3-0"};
const std::vector<std::string> kGeo{"38th Parallel", "Fulda Gap", "Suwalki Gap",
                                    "Strait of Hormuz"};

struct DomainWords {
  std::vector<std::string> verbs, objects;
};
const std::array<DomainWords, kNumDomains> kDomainWords{{
    {{"advanced toward", "secured", "held", "patrolled", "fortified", "withdrew from"},
     {"the ridge", "the river crossing", "the supply route", "the town", "the bridge", "the valley"}},
    {{"flew sorties over", "patrolled", "struck", "escorted convoys near", "surveyed"},
     {"the airspace", "the coast", "the airfield", "the radar site"}},
    {{"sailed toward", "blockaded", "escorted", "patrolled", "mined"},
     {"the strait", "the harbor", "the shipping lane", "the coastline"}},
    {{"launched", "tracked", "repositioned", "monitored", "jammed"},
     {"the satellite", "the orbit", "the ground station", "the uplink"}},
    {{"probed", "defended", "patched", "isolated", "monitored"},
     {"the network", "the server", "the command link", "the firewall"}},
}};
const std::vector<std::string> kStates{"contested", "quiet", "secure", "under threat"};

template <class T>
const T& pick(Rng& rng, const std::vector<T>& v) {
  return v[static_cast<std::size_t>(rng.below(v.size()))];
}

std::string filler_sentence(Rng& rng, Domain d, std::int64_t day) {
  const auto& w = kDomainWords[static_cast<std::size_t>(d)];
  const auto era = std::min<std::size_t>(2, static_cast<std::size_t>(std::max<std::int64_t>(0, day)) * 3 / 7301);
  switch (rng.below(4)) {
    case 0:
      return "On day " + std::to_string(day + static_cast<std::int64_t>(rng.below(30))) + ", the " +
             pick(rng, kUnits) + " " + pick(rng, w.verbs) + " " + pick(rng, w.objects) + ".";
    case 1:
      return "Reports from the " + pick(rng, kGeo) + " indicate that the " + pick(rng, kUnits) + " " +
             pick(rng, w.verbs) + " " + pick(rng, w.objects) + ".";
    case 2:
      return "The " + pick(rng, kWeaponsByEra[era]) + " supported the " + pick(rng, kUnits) +
             " under " + pick(rng, kDoctrine) + ".";
    default:
      return "Commanders noted that " + pick(rng, w.objects) + " remained " + pick(rng, kStates) + ".";
  }
}

std::string located_sentence(const std::string& base, const std::string& sector) {
  return "Survey data shows " + base + " lies within " + sector + ".";
}

/// Picks n distinct indices below `size`.
std::vector<std::size_t> distinct(Rng& rng, std::size_t size, std::size_t n) {
  std::vector<std::size_t> idx(size);
  std::iota(idx.begin(), idx.end(), 0);
  rng.shuffle(idx);
  idx.resize(n);
  return idx;
}

}  // namespace

std::vector<std::string> synthetic_lexicon() {
  std::vector<std::string> out;
  for (const auto* list : {&kUnits, &kBases, &kSectors, &kDoctrine, &kGeo}) out.insert(out.end(), list->begin(), list->end());
  for (const auto& era : kWeaponsByEra) out.insert(out.end(), era.begin(), era.end());
  return out;
}

const std::vector<std::string>& sector_terms() { return kSectors; }

SyntheticCorpus gen_synthetic_corpus(const CorpusSpec& spec, std::uint64_t seed) {
  if (spec.num_probes > 0 && spec.num_docs < 2 * spec.num_probes)
    throw ConfigError("gen_synthetic_corpus: " + std::to_string(spec.num_probes) +
                      " probes need at least " + std::to_string(2 * spec.num_probes) +
                      " documents, have " + std::to_string(spec.num_docs));
  if (spec.min_sentences < 1 || spec.max_sentences < spec.min_sentences)
    throw ConfigError("gen_synthetic_corpus: invalid sentence-count range");
  if (spec.temporal_min < 0 || spec.temporal_max < spec.temporal_min)
    throw ConfigError("gen_synthetic_corpus: invalid temporal range");
  const double wsum = std::accumulate(spec.domain_weights.begin(), spec.domain_weights.end(), 0.0);
  for (double w : spec.domain_weights)
    if (w < 0.0) throw ConfigError("gen_synthetic_corpus: negative domain weight");
  if (!(wsum > 0.0)) throw ConfigError("gen_synthetic_corpus: domain weights sum to zero");
  if (spec.distractors_per_probe + 2 > kSectors.size() || spec.distractors_per_probe + 2 > kBases.size())
    throw ConfigError("gen_synthetic_corpus: too many distractors for the sector/base inventory");

  Rng rng(seed);
  SyntheticCorpus out;
  std::vector<std::vector<std::string>> sentences(spec.num_docs);
  for (std::size_t i = 0; i < spec.num_docs; ++i) {
    DocumentSegment seg;
    char id[32];
    std::snprintf(id, sizeof id, "doc-%06zu", i);
    seg.doc_id = id;
    double r = rng.uniform() * wsum;
    std::size_t d = 0;
    while (d + 1 < kNumDomains && r >= spec.domain_weights[d]) r -= spec.domain_weights[d++];
    seg.domain = kAllDomains[d];
    seg.temporal_index =
        spec.temporal_min +
        static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(spec.temporal_max - spec.temporal_min + 1)));
    const auto n = spec.min_sentences + rng.below(spec.max_sentences - spec.min_sentences + 1);
    for (std::size_t s = 0; s < n; ++s)
      sentences[i].push_back(filler_sentence(rng, seg.domain, seg.temporal_index));
    out.segments.push_back(std::move(seg));
  }

  // Facts go to disjoint document pairs in a shuffled order.
  std::vector<std::size_t> order(spec.num_docs);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  for (std::size_t p = 0; p < spec.num_probes; ++p) {
    const std::size_t da = order[2 * p], db = order[2 * p + 1];
    const auto& unit = pick(rng, kUnits);
    const auto bases = distinct(rng, kBases.size(), 2 + spec.distractors_per_probe);
    const auto sectors = distinct(rng, kSectors.size(), 2 + spec.distractors_per_probe);
    QaProbe q;
    char pid[32];
    std::snprintf(pid, sizeof pid, "probe-%05zu", p);
    q.probe_id = pid;
    q.facts[0] = "Intelligence confirms the " + unit + " is stationed at " + kBases[bases[0]] + ".";
    q.facts[1] = located_sentence(kBases[bases[0]], kSectors[sectors[0]]);
    // The fact document also locates a second base, so copying any sector
    // from it is right only half the time.
    std::string decoy = located_sentence(kBases[bases[1]], kSectors[sectors[1]]);
    auto insert_at = [&](std::vector<std::string>& doc, std::string s) {
      const auto pos = rng.below(doc.size() + 1);
      doc.insert(doc.begin() + static_cast<std::ptrdiff_t>(pos), std::move(s));
    };
    insert_at(sentences[da], q.facts[0]);
    if (rng.bernoulli(0.5)) {
      insert_at(sentences[db], q.facts[1]);
      insert_at(sentences[db], decoy);
    } else {
      insert_at(sentences[db], decoy);
      insert_at(sentences[db], q.facts[1]);
    }
    std::string question;
    for (std::size_t k = 0; k < spec.distractors_per_probe; ++k)
      question += "Patrol log: " + kBases[bases[2 + k]] + " lies within " + kSectors[sectors[2 + k]] + ". ";
    question += "Query: the " + unit + " operates within ";
    q.question = std::move(question);
    q.answer = kSectors[sectors[0]];
    q.supporting_doc_ids = {out.segments[da].doc_id, out.segments[db].doc_id};
    out.probes.push_back(std::move(q));
  }

  for (std::size_t i = 0; i < spec.num_docs; ++i) {
    std::string text;
    std::size_t in_para = 0;
    for (std::size_t s = 0; s < sentences[i].size(); ++s) {
      if (s > 0) text += (in_para == 3) ? "\n\n" : " ";
      if (in_para == 3) in_para = 0;
      text += sentences[i][s];
      ++in_para;
    }
    out.segments[i].raw_text = std::move(text);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Files

void write_corpus(const std::filesystem::path& path, const std::vector<DocumentSegment>& segments,
                  const std::optional<ArtifactMeta>& meta) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot write corpus to " + path.string());
  if (meta) f << json_meta_line(*meta) << '\n';
  for (const auto& s : segments) {
    nlohmann::json j{{"doc_id", s.doc_id},
                     {"domain", std::string(to_string(s.domain))},
                     {"temporal_index", s.temporal_index},
                     {"text", s.raw_text}};
    f << j.dump() << '\n';
  }
}

std::vector<DocumentSegment> read_corpus(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot read corpus from " + path.string());
  std::vector<DocumentSegment> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      if (j.contains("_meta")) continue;
      DocumentSegment s;
      s.doc_id = j.at("doc_id").get<std::string>();
      s.domain = parse_domain(j.at("domain").get<std::string>());
      s.temporal_index = j.at("temporal_index").get<std::int64_t>();
      if (s.temporal_index < 0) throw InputError("negative temporal_index");
      s.raw_text = j.at("text").get<std::string>();
      out.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const InputError& e) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_probes(const std::filesystem::path& path, const std::vector<QaProbe>& probes,
                  const Vocabulary* vocab, const std::optional<ArtifactMeta>& meta) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot write probes to " + path.string());
  if (meta) f << json_meta_line(*meta) << '\n';
  for (const auto& q : probes) {
    nlohmann::json j{{"probe_id", q.probe_id},
                     {"question", q.question},
                     {"answer", q.answer},
                     {"supporting_doc_ids", q.supporting_doc_ids},
                     {"facts", q.facts}};
    if (vocab) {
      j["question_tokens"] = vocab->encode(q.question);
      j["answer_token"] = vocab->lexicon_id(q.answer);
    }
    f << j.dump() << '\n';
  }
}

std::vector<QaProbe> read_probes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot read probes from " + path.string());
  std::vector<QaProbe> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      if (j.contains("_meta")) continue;
      QaProbe q;
      q.probe_id = j.at("probe_id").get<std::string>();
      q.question = j.at("question").get<std::string>();
      q.answer = j.at("answer").get<std::string>();
      q.supporting_doc_ids = j.at("supporting_doc_ids").get<std::array<std::string, 2>>();
      q.facts = j.at("facts").get<std::array<std::string, 2>>();
      out.push_back(std::move(q));
    } catch (const nlohmann::json::exception& e) {
      throw InputError(path.string() + ": " + e.what());
    }
  }
  return out;
}

}  // namespace sdlm
