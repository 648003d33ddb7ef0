#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "sdlm/corpus.hpp"
#include "sdlm/rng.hpp"

using namespace sdlm;

namespace {

std::vector<std::uint64_t> hashed_range(std::uint64_t lo, std::uint64_t hi) {
  std::vector<std::uint64_t> out;
  for (auto x = lo; x < hi; ++x) out.push_back(fnv1a64(&x, sizeof x));
  std::sort(out.begin(), out.end());
  return out;
}

DocumentSegment seg(std::string id, std::string text) {
  DocumentSegment s;
  s.doc_id = std::move(id);
  s.raw_text = std::move(text);
  return s;
}

std::string random_text(Rng& rng, std::size_t len) {
  std::string s;
  for (std::size_t i = 0; i < len; ++i) s.push_back(static_cast<char>('a' + rng.below(26)));
  return s;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("minhash: identical, disjoint and one-third overlap") {
  auto a = hashed_range(0, 200);
  auto b = hashed_range(100, 300);
  auto c = hashed_range(1000, 1200);
  CHECK(exact_jaccard(a, b) == doctest::Approx(1.0 / 3.0));

  auto sa = minhash_of_set(a, 256, 11);
  CHECK(estimate_jaccard(sa, minhash_of_set(a, 256, 11)) == 1.0);
  CHECK(std::abs(estimate_jaccard(sa, minhash_of_set(b, 256, 11)) - 1.0 / 3.0) <= 0.06);
  CHECK(estimate_jaccard(sa, minhash_of_set(c, 256, 11)) < 0.03);

  CHECK_THROWS_AS(estimate_jaccard(sa, minhash_of_set(a, 128, 11)), DimensionError);
  CHECK_THROWS_AS(minhash_signature(seg("x", "abc"), 128, 5, 1), InputError);
}

TEST_CASE("minhash: estimator is unbiased over random pairs") {
  Rng rng(2024);
  double err_sum = 0.0;
  const int pairs = 1000;
  for (int i = 0; i < pairs; ++i) {
    const auto n = 40 + rng.below(80);
    const auto shift = rng.below(n + 1);
    const auto base = rng.below(1'000'000) * 1000;
    auto a = hashed_range(base, base + n);
    auto b = hashed_range(base + shift, base + shift + n);
    const double truth = exact_jaccard(a, b);
    const double est = estimate_jaccard(minhash_of_set(a, 128, static_cast<std::uint64_t>(i)),
                                        minhash_of_set(b, 128, static_cast<std::uint64_t>(i)));
    err_sum += est - truth;
  }
  CHECK(std::abs(err_sum / pairs) < 0.05);
}

TEST_CASE("shingles are case-insensitive") {
  CHECK(shingle_set("Base Orion", 5) == shingle_set("base orion", 5));
  CHECK(shingle_set("abc", 5).size() == 1);
}

TEST_CASE("lsh_dedup: exact duplicate removed, later copy dropped") {
  Rng rng(1);
  std::vector<DocumentSegment> docs;
  for (int i = 0; i < 20; ++i) docs.push_back(seg("d" + std::to_string(i), random_text(rng, 300)));
  docs.push_back(seg("dup", docs[4].raw_text));
  auto r = lsh_dedup(docs, {});
  REQUIRE(r.removed.size() == 1);
  CHECK(r.removed[0].segment == 20);
  CHECK(r.removed[0].duplicate_of_segment == 4);
  CHECK(r.removed[0].jaccard == 1.0);
  CHECK(r.kept.size() == 20);
}

TEST_CASE("lsh_dedup: corpus of distinct documents is untouched") {
  // Oracle: pairwise exact Jaccard shows no pair at or above the threshold.
  Rng rng(3);
  std::vector<DocumentSegment> docs;
  for (int i = 0; i < 60; ++i) docs.push_back(seg("d" + std::to_string(i), random_text(rng, 400)));
  for (std::size_t i = 0; i < docs.size(); ++i)
    for (std::size_t j = i + 1; j < docs.size(); ++j)
      REQUIRE(exact_jaccard(shingle_set(docs[i].raw_text, 5), shingle_set(docs[j].raw_text, 5)) < 0.8);
  auto r = lsh_dedup(docs, {});
  CHECK(r.removed.empty());
  REQUIRE(r.kept.size() == docs.size());
  for (std::size_t i = 0; i < docs.size(); ++i) CHECK(r.kept[i].doc_id == docs[i].doc_id);
}

TEST_CASE("lsh_dedup: threshold 1.0 removes exactly the exact duplicates") {
  Rng rng(8);
  std::vector<DocumentSegment> docs;
  std::set<std::size_t> expected;
  for (int i = 0; i < 80; ++i) {
    if (i > 5 && rng.bernoulli(0.25)) {
      const auto src = rng.below(docs.size());
      docs.push_back(seg("c" + std::to_string(i), docs[src].raw_text));
      expected.insert(docs.size() - 1);
    } else {
      auto text = random_text(rng, 200);
      // Near-duplicate: one character changed, must survive at threshold 1.0.
      if (i > 5 && rng.bernoulli(0.3)) {
        text = docs[rng.below(docs.size())].raw_text;
        text[100] = text[100] == 'z' ? 'y' : 'z';
      }
      docs.push_back(seg("d" + std::to_string(i), text));
    }
  }
  // Oracle: any document whose text equals an earlier one.
  for (std::size_t i = 0; i < docs.size(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (docs[i].raw_text == docs[j].raw_text) expected.insert(i);
  DedupConfig cfg;
  cfg.jaccard_threshold = 1.0;
  auto r = lsh_dedup(docs, cfg);
  std::set<std::size_t> got;
  for (const auto& rm : r.removed) got.insert(rm.segment);
  CHECK(got == expected);
}

TEST_CASE("lsh_dedup: paragraph level drops repeated paragraphs only") {
  Rng rng(4);
  const auto p1 = random_text(rng, 200), p2 = random_text(rng, 200), p3 = random_text(rng, 200);
  std::vector<DocumentSegment> docs{seg("a", p1 + "\n\n" + p2), seg("b", p3 + "\n\n" + p1)};
  DedupConfig cfg;
  cfg.level = DedupLevel::paragraph;
  auto r = lsh_dedup(docs, cfg);
  REQUIRE(r.removed.size() == 1);
  CHECK(r.removed[0].segment == 1);
  CHECK(r.removed[0].paragraph == 1);
  REQUIRE(r.kept.size() == 2);
  CHECK(r.kept[0].raw_text == docs[0].raw_text);
  CHECK(r.kept[1].raw_text == p3);
  CHECK(split_paragraphs("x\n\ny\n\nz").size() == 3);
}

TEST_CASE("lsh_dedup: band geometry must match the signature") {
  DedupConfig cfg;
  cfg.bands = 30;
  CHECK_THROWS_AS(lsh_dedup({}, cfg), ConfigError);
}

TEST_CASE("perplexity filter boundary with a uniform scorer") {
  std::vector<DocumentSegment> docs{seg("a", "one"), seg("b", "two")};
  const std::size_t V = 500;
  CHECK(perplexity_filter(docs, uniform_scorer(V), V + 1e-6).size() == 2);
  CHECK(perplexity_filter(docs, uniform_scorer(V), V - 1e-6).empty());
  CHECK(perplexity_filter(docs, uniform_scorer(V), INFINITY).size() == 2);
  CHECK(perplexity_filter(docs, uniform_scorer(V), 0.5).empty());
}

TEST_CASE("quality predicates") {
  auto keep = printable_fraction_predicate(0.05);
  CHECK(keep("clean text"));
  CHECK_FALSE(keep(std::string("ab\x01\x02", 4)));
  std::vector<DocumentSegment> docs{seg("a", "fine"), seg("b", std::string(10, '\x03'))};
  CHECK(filter_segments(docs, keep).size() == 1);
  CHECK(filter_segments(docs, accept_all_predicate()).size() == 2);
}

TEST_CASE("generator: byte-identical output for a fixed seed") {
  CorpusSpec spec;
  spec.num_docs = 50;
  spec.num_probes = 10;
  const auto dir = std::filesystem::temp_directory_path();
  const auto p1 = dir / "sdlm_gen_a.jsonl", p2 = dir / "sdlm_gen_b.jsonl";
  const auto q1 = dir / "sdlm_probe_a.jsonl", q2 = dir / "sdlm_probe_b.jsonl";
  auto a = gen_synthetic_corpus(spec, 42);
  auto b = gen_synthetic_corpus(spec, 42);
  write_corpus(p1, a.segments);
  write_corpus(p2, b.segments);
  write_probes(q1, a.probes, nullptr);
  write_probes(q2, b.probes, nullptr);
  CHECK(slurp(p1) == slurp(p2));
  CHECK(slurp(q1) == slurp(q2));
  auto c = gen_synthetic_corpus(spec, 43);
  CHECK(c.segments[0].raw_text != a.segments[0].raw_text);

  auto back = read_corpus(p1);
  REQUIRE(back.size() == a.segments.size());
  CHECK(back[3].raw_text == a.segments[3].raw_text);
  CHECK(back[3].domain == a.segments[3].domain);
  CHECK(read_probes(q1).size() == 10);
  for (const auto& p : {p1, p2, q1, q2}) std::filesystem::remove(p);
}

TEST_CASE("generator: probe facts live in two different documents") {
  CorpusSpec spec;
  spec.num_docs = 80;
  spec.num_probes = 30;
  auto c = gen_synthetic_corpus(spec, 5);
  REQUIRE(c.probes.size() == 30);
  const auto sectors = sector_terms();
  for (const auto& q : c.probes) {
    // Scan every document for each fact; each must appear exactly where claimed.
    std::vector<std::string> holders0, holders1;
    for (const auto& s : c.segments) {
      if (s.raw_text.find(q.facts[0]) != std::string::npos) holders0.push_back(s.doc_id);
      if (s.raw_text.find(q.facts[1]) != std::string::npos) holders1.push_back(s.doc_id);
    }
    REQUIRE(holders0.size() >= 1);
    REQUIRE(holders1.size() >= 1);
    CHECK(std::find(holders0.begin(), holders0.end(), q.supporting_doc_ids[0]) != holders0.end());
    CHECK(std::find(holders1.begin(), holders1.end(), q.supporting_doc_ids[1]) != holders1.end());
    CHECK(q.supporting_doc_ids[0] != q.supporting_doc_ids[1]);
    CHECK(std::find(sectors.begin(), sectors.end(), q.answer) != sectors.end());
    CHECK(q.question.find(q.answer) == std::string::npos);
  }
}

TEST_CASE("generator: zero probes and infeasible specs") {
  CorpusSpec spec;
  spec.num_docs = 10;
  auto c = gen_synthetic_corpus(spec, 1);
  CHECK(c.segments.size() == 10);
  CHECK(c.probes.empty());
  for (const auto& s : c.segments) {
    CHECK(s.temporal_index >= 0);
    CHECK(s.temporal_index <= 7300);
  }

  spec.num_probes = 6;
  CHECK_THROWS_AS(gen_synthetic_corpus(spec, 1), ConfigError);
  spec.num_probes = 0;
  spec.domain_weights = {0, 0, 0, 0, 0};
  CHECK_THROWS_AS(gen_synthetic_corpus(spec, 1), ConfigError);
}

TEST_CASE("corpus reader rejects malformed lines") {
  const auto p = std::filesystem::temp_directory_path() / "sdlm_bad.jsonl";
  {
    std::ofstream f(p);
    f << "{\"doc_id\":\"a\",\"domain\":\"mud\",\"temporal_index\":1,\"text\":\"x\"}\n";
  }
  CHECK_THROWS_AS(read_corpus(p), InputError);
  std::filesystem::remove(p);
}
