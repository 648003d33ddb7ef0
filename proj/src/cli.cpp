#include "sdlm/cli.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "sdlm/errors.hpp"
#include "sdlm/model.hpp"
#include "sdlm/quant.hpp"
#include "sdlm/stats.hpp"
#include "sdlm/tokenizer.hpp"
#include "sdlm/wargame.hpp"

namespace sdlm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::vector<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end())
      throw ConfigError(where + ": unknown key '" + k + "'");
}

template <class T>
void read_into(const json& j, const char* key, T& field, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    field = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

const std::vector<std::string> kTrainingSections = {"model", "optimizer", "pretrain", "sft", "ewc", "data"};

}  // namespace

CliConfig CliConfig::from_json(const json& j) {
  std::vector<std::string> known = kTrainingSections;
  for (const char* k : {"seed", "corpus", "bpe", "dedup", "finetune", "reward", "wargame", "profile"}) known.push_back(k);
  reject_unknown(j, known, "config");
  CliConfig c;
  read_into(j, "seed", c.seed, "config");
  json training = json::object();
  for (const auto& k : kTrainingSections)
    if (j.contains(k)) training[k] = j.at(k);
  c.training = TrainingConfig::from_json(training);

  if (j.contains("corpus")) {
    const auto& s = j.at("corpus");
    reject_unknown(s, {"num_docs", "min_sentences", "max_sentences", "domain_weights", "temporal_min", "temporal_max",
                       "num_probes", "distractors_per_probe"},
                   "corpus");
    read_into(s, "num_docs", c.corpus.num_docs, "corpus");
    read_into(s, "min_sentences", c.corpus.min_sentences, "corpus");
    read_into(s, "max_sentences", c.corpus.max_sentences, "corpus");
    read_into(s, "domain_weights", c.corpus.domain_weights, "corpus");
    read_into(s, "temporal_min", c.corpus.temporal_min, "corpus");
    read_into(s, "temporal_max", c.corpus.temporal_max, "corpus");
    read_into(s, "num_probes", c.corpus.num_probes, "corpus");
    read_into(s, "distractors_per_probe", c.corpus.distractors_per_probe, "corpus");
  }
  if (j.contains("bpe")) {
    reject_unknown(j.at("bpe"), {"vocab_size"}, "bpe");
    read_into(j.at("bpe"), "vocab_size", c.bpe_vocab, "bpe");
  }
  if (j.contains("dedup")) {
    const auto& d = j.at("dedup");
    reject_unknown(d, {"bands", "rows_per_band", "num_hashes", "shingle_width", "jaccard_threshold", "level"}, "dedup");
    read_into(d, "bands", c.dedup.bands, "dedup");
    read_into(d, "rows_per_band", c.dedup.rows_per_band, "dedup");
    read_into(d, "num_hashes", c.dedup.num_hashes, "dedup");
    read_into(d, "shingle_width", c.dedup.shingle_width, "dedup");
    read_into(d, "jaccard_threshold", c.dedup.jaccard_threshold, "dedup");
    std::string level = "document";
    read_into(d, "level", level, "dedup");
    if (level == "document") c.dedup.level = DedupLevel::document;
    else if (level == "paragraph") c.dedup.level = DedupLevel::paragraph;
    else throw ConfigError("dedup.level: expected 'document' or 'paragraph', got '" + level + "'");
  }
  if (j.contains("finetune")) {
    reject_unknown(j.at("finetune"), {"steps"}, "finetune");
    read_into(j.at("finetune"), "steps", c.finetune_steps, "finetune");
  }
  if (j.contains("reward")) {
    const auto& r = j.at("reward");
    reject_unknown(r, {"train_pairs", "test_pairs", "completion_len"}, "reward");
    read_into(r, "train_pairs", c.reward_pairs_train, "reward");
    read_into(r, "test_pairs", c.reward_pairs_test, "reward");
    read_into(r, "completion_len", c.reward_completion_len, "reward");
  }
  if (j.contains("wargame")) {
    reject_unknown(j.at("wargame"), {"profile"}, "wargame");
    read_into(j.at("wargame"), "profile", c.opfor_profile, "wargame");
    try {
      parse_profile(c.opfor_profile);
    } catch (const InputError& e) {
      throw ConfigError(std::string("wargame.profile: ") + e.what());
    }
  }
  if (j.contains("profile")) {
    reject_unknown(j.at("profile"), {"lengths", "repetitions"}, "profile");
    read_into(j.at("profile"), "lengths", c.profile_lengths, "profile");
    read_into(j.at("profile"), "repetitions", c.profile_repetitions, "profile");
  }
  if (c.finetune_steps == 0) throw ConfigError("finetune.steps must be positive");
  if (c.dedup.jaccard_threshold < 0.0 || c.dedup.jaccard_threshold > 1.0)
    throw ConfigError("dedup.jaccard_threshold must lie in [0, 1]");
  if (c.profile_repetitions < 3) throw ConfigError("profile.repetitions must be at least 3");
  return c;
}

json CliConfig::to_json() const {
  json j = training.to_json();
  j["seed"] = seed;
  j["corpus"] = {{"num_docs", corpus.num_docs},
                 {"min_sentences", corpus.min_sentences},
                 {"max_sentences", corpus.max_sentences},
                 {"domain_weights", corpus.domain_weights},
                 {"temporal_min", corpus.temporal_min},
                 {"temporal_max", corpus.temporal_max},
                 {"num_probes", corpus.num_probes},
                 {"distractors_per_probe", corpus.distractors_per_probe}};
  j["bpe"] = {{"vocab_size", bpe_vocab}};
  j["dedup"] = {{"bands", dedup.bands},
                {"rows_per_band", dedup.rows_per_band},
                {"num_hashes", dedup.num_hashes},
                {"shingle_width", dedup.shingle_width},
                {"jaccard_threshold", dedup.jaccard_threshold},
                {"level", dedup.level == DedupLevel::document ? "document" : "paragraph"}};
  j["finetune"] = {{"steps", finetune_steps}};
  j["reward"] = {{"train_pairs", reward_pairs_train},
                 {"test_pairs", reward_pairs_test},
                 {"completion_len", reward_completion_len}};
  j["wargame"] = {{"profile", opfor_profile}};
  j["profile"] = {{"lengths", profile_lengths}, {"repetitions", profile_repetitions}};
  return j;
}

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "sdlm_out";
  bool quiet = false;
  bool verbose = false;
};

// Everything a running subcommand needs.
struct Run {
  CliConfig cfg;
  std::string hash;
  std::uint64_t seed = 0;
  fs::path out;
  std::string name;
  bool quiet = false, verbose = false;
  std::ostream* os = nullptr;

  std::ostream& print() const { return *os; }
  void info(const std::string& msg) const {
    if (!quiet) *os << msg << '\n';
  }
  void debug(const std::string& msg) const {
    if (verbose) *os << msg << '\n';
  }
  json provenance() const { return {{"config_hash", hash}, {"seed", seed}, {"producer", "sdlm " + name}}; }
  ArtifactMeta meta() const { return {seed, hash, "sdlm " + name}; }
  CheckpointMeta ckpt_meta(std::uint64_t step = 0) const { return {seed, hash, "sdlm " + name, step}; }
  std::string csv_header() const { return "# config_hash=" + hash + " seed=" + std::to_string(seed) + "\n"; }
  fs::path path(const std::string& file) const { return out / file; }

  void write_json(const std::string& file, json body) const {
    body["_meta"] = provenance();
    std::ofstream f(path(file));
    if (!f) throw InputError("cannot write " + path(file).string());
    f << body.dump(2) << '\n';
    info("wrote " + path(file).string());
  }
  // Prepends the provenance comment to a CSV written by a library routine.
  void stamp_csv(const fs::path& p) const {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    in.close();
    std::ofstream f(p);
    f << csv_header() << ss.str();
    info("wrote " + p.string());
  }
};

CliConfig load_config(const std::string& path) {
  if (path.empty()) return CliConfig::from_json(json::object());
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return CliConfig::from_json(j);
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream ss;
  ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return ss.str();
}

void append_audit(const fs::path& out, const std::string& sub, const std::string& hash, std::uint64_t seed,
                  const std::string& outcome, int code) {
  std::error_code ec;
  fs::create_directories(out, ec);
  std::ofstream f(out / "audit.jsonl", std::ios::app);
  if (!f) return;
  f << json{{"timestamp", timestamp()}, {"subcommand", sub}, {"config_hash", hash}, {"seed", seed},
            {"outcome", outcome}, {"exit_code", code}}
           .dump()
    << '\n';
}

// ---------------------------------------------------------------------------
// Shared pipeline pieces

Vocabulary load_vocab(const std::string& p) { return Vocabulary::load(p); }

std::vector<PackedContext> windows_for(const std::string& corpus_path, const Vocabulary& vocab,
                                       const TrainingConfig& tc, bool eval) {
  auto segs = read_corpus(corpus_path);
  if (segs.empty()) throw InputError(corpus_path + ": no documents");
  tokenize_segments(segs, vocab);
  return make_windows(build_stream(segs), tc.context, eval ? tc.context : tc.stride);
}

ModelConfig model_config_for(const Run& r, std::size_t vocab_size) {
  ModelConfig mc = r.cfg.training.model;
  mc.vocab_size = vocab_size;
  mc.seed = r.seed;
  mc.max_context = std::max(mc.max_context, r.cfg.training.context);
  mc.validate();
  return mc;
}

FinetuneConfig finetune_config(const Run& r) {
  FinetuneConfig fc;
  fc.opt = r.cfg.training.pretrain.opt;
  fc.steps = r.cfg.finetune_steps;
  fc.opt.total_steps = fc.steps;
  fc.opt.warmup_steps = std::min(fc.opt.warmup_steps, fc.steps / 10);
  fc.seed = r.seed;
  return fc;
}

void write_steps_csv(const Run& r, const std::string& file, const std::vector<StepLog>& log) {
  write_step_log_csv(r.path(file), log);
  r.stamp_csv(r.path(file));
}

void save_model(const Run& r, const std::string& file, const SdlmModel& m, std::uint64_t step) {
  save_checkpoint(r.path(file), m, r.ckpt_meta(step));
  r.info("wrote " + r.path(file).string() + " (checksum " + std::to_string(checkpoint_checksum(r.path(file))) + ")");
}

std::vector<std::size_t> parse_lengths(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    try {
      out.push_back(std::stoul(cell));
    } catch (const std::exception&) {
      throw InputError("bad length '" + cell + "' in --lengths");
    }
  }
  return out;
}

std::vector<std::vector<std::string>> read_csv_rows(const std::string& path, bool skip_header) {
  std::ifstream f(path);
  if (!f) throw InputError("cannot read " + path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  bool first = true;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (first && skip_header) {
      first = false;
      continue;
    }
    first = false;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    rows.push_back(std::move(cells));
  }
  return rows;
}

int to_int(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw InputError(where + ": expected an integer, got '" + s + "'");
  }
}

double to_double(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw InputError(where + ": expected a number, got '" + s + "'");
  }
}

json alignment_json(const Alignment& a) {
  return {{"score", a.score},     {"a_begin", a.a_begin},     {"a_end", a.a_end},   {"b_begin", a.b_begin},
          {"b_end", a.b_end},     {"aligned_a", a.aligned_a}, {"aligned_b", a.aligned_b}};
}

json event_json(const Event& e) {
  return {{"kind", to_string(e.kind)}, {"unit", e.unit}, {"x", e.x}, {"y", e.y}, {"amount", e.amount}, {"note", e.note}};
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Strategic doctrine language model toolkit", "sdlm"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_option("--config", common.config_path, "JSON config file (see README for the schema)");
  app.add_option("--seed", common.seed, "Seed; overrides the config file");
  app.add_option("--out", common.out_dir, "Output directory, created if absent");
  auto* quiet = app.add_flag("--quiet", common.quiet, "Print results only");
  app.add_flag("--verbose", common.verbose, "Print progress")->excludes(quiet);

  // Subcommand bodies are registered as closures and executed after parsing.
  std::function<void(Run&)> body;
  std::string sub_name;
  auto sub = [&](const std::string& name, const std::string& help) {
    auto* s = app.add_subcommand(name, help);
    s->callback([&, name] { sub_name = name; });
    return s;
  };

  // gen-corpus
  std::optional<std::size_t> docs, probes;
  auto* gen = sub("gen-corpus", "Generate the seeded synthetic corpus and QA probes");
  gen->add_option("--docs", docs, "Number of documents");
  gen->add_option("--probes", probes, "Number of cross-document QA probes");
  gen->callback([&] {
    sub_name = "gen-corpus";
    body = [&](Run& r) {
      CorpusSpec spec = r.cfg.corpus;
      if (docs) spec.num_docs = *docs;
      if (probes) spec.num_probes = *probes;
      const auto c = gen_synthetic_corpus(spec, r.seed);
      write_corpus(r.path("corpus.jsonl"), c.segments, r.meta());
      write_probes(r.path("probes.jsonl"), c.probes, nullptr, r.meta());
      r.print() << c.segments.size() << " documents, " << c.probes.size() << " probes\n";
    };
  });

  // dedup
  std::string corpus_path;
  std::optional<double> threshold;
  auto* dd = sub("dedup", "MinHash-LSH near-duplicate removal");
  dd->add_option("--corpus", corpus_path, "Corpus JSONL")->required();
  dd->add_option("--threshold", threshold, "Jaccard threshold");
  dd->callback([&] {
    sub_name = "dedup";
    body = [&](Run& r) {
      DedupConfig dc = r.cfg.dedup;
      if (threshold) dc.jaccard_threshold = *threshold;
      dc.seed = r.seed;
      const auto segs = read_corpus(corpus_path);
      const auto res = lsh_dedup(segs, dc);
      write_corpus(r.path("dedup.jsonl"), res.kept, r.meta());
      json removed = json::array();
      for (const auto& rm : res.removed)
        removed.push_back({{"doc_id", segs[rm.segment].doc_id},
                           {"duplicate_of", segs[rm.duplicate_of_segment].doc_id},
                           {"paragraph", rm.paragraph},
                           {"jaccard", rm.jaccard}});
      r.write_json("dedup_report.json", {{"input", segs.size()},
                                         {"kept", res.kept.size()},
                                         {"candidate_pairs", res.candidate_pairs},
                                         {"removed", removed}});
      r.print() << "kept " << res.kept.size() << " of " << segs.size() << '\n';
    };
  });

  // train-bpe
  std::optional<std::size_t> vocab_size;
  bool no_lexicon = false;
  auto* bpe = sub("train-bpe", "Train the BPE vocabulary and add the domain lexicon");
  bpe->add_option("--corpus", corpus_path, "Corpus JSONL")->required();
  bpe->add_option("--vocab-size", vocab_size, "Base bytes plus merges");
  bpe->add_flag("--no-lexicon", no_lexicon, "Skip the single-token domain lexicon");
  bpe->callback([&] {
    sub_name = "train-bpe";
    body = [&](Run& r) {
      std::vector<std::string> texts;
      for (const auto& s : read_corpus(corpus_path)) texts.push_back(s.raw_text);
      Vocabulary v = train_bpe(texts, vocab_size.value_or(r.cfg.bpe_vocab), r.seed);
      if (!no_lexicon) v = extend_lexicon(v, synthetic_lexicon());
      json j = json::parse(v.to_json());
      j["_meta"] = r.provenance();
      std::ofstream f(r.path("vocab.json"));
      f << j.dump() << '\n';
      r.info("wrote " + r.path("vocab.json").string());
      r.print() << "vocabulary size " << v.size() << " (" << v.merge_count() << " merges, " << v.lexicon_size()
                << " lexicon terms)\n";
    };
  });

  // pretrain
  std::string vocab_path, val_path, checkpoint_path;
  std::optional<std::size_t> steps;
  auto* pre = sub("pretrain", "Pretrain with the composite loss");
  pre->add_option("--corpus", corpus_path, "Training corpus JSONL")->required();
  pre->add_option("--vocab", vocab_path, "Vocabulary file")->required();
  pre->add_option("--val", val_path, "Validation corpus JSONL");
  pre->add_option("--steps", steps, "Optimiser steps");
  pre->callback([&] {
    sub_name = "pretrain";
    body = [&](Run& r) {
      const auto vocab = load_vocab(vocab_path);
      auto tc = r.cfg.training;
      if (steps) tc.pretrain.steps = *steps;
      tc.pretrain.seed = r.seed;
      SdlmModel model(model_config_for(r, vocab.size()));
      install_doctrine(model, vocab, default_doctrine_principles());
      const auto train = windows_for(corpus_path, vocab, tc, false);
      std::vector<PackedContext> val;
      json report = {{"train_windows", train.size()}};
      if (!val_path.empty()) {
        val = windows_for(val_path, vocab, tc, true);
        report["val_perplexity_initial"] = evaluate_perplexity(model, val);
      }
      TrainHooks hooks;
      hooks.on_step = [&](const StepLog& s) {
        if (r.verbose && (s.step % 50 == 0 || s.step == 1))
          r.debug("step " + std::to_string(s.step) + " loss " + std::to_string(s.total));
      };
      hooks.on_checkpoint = [&](std::size_t step, const SdlmModel& m) {
        if (step != tc.pretrain.steps) save_model(r, "model_step" + std::to_string(step) + ".ckpt", m, step);
      };
      const auto log = pretrain(model, train, tc.pretrain, hooks);
      save_model(r, "model.ckpt", model, tc.pretrain.steps);
      write_steps_csv(r, "pretrain_steps.csv", log);
      report["final_loss"] = log.back().total;
      if (!val.empty()) report["val_perplexity_final"] = evaluate_perplexity(model, val);
      r.write_json("pretrain_report.json", report);
      r.print() << "final loss " << log.back().total << '\n';
    };
  });

  // sft
  std::optional<double> kl_weight;
  auto* sft = sub("sft", "Supervised fine-tuning with a KL penalty to the reference");
  sft->add_option("--checkpoint", checkpoint_path, "Reference (and initial) checkpoint")->required();
  sft->add_option("--corpus", corpus_path, "Fine-tuning corpus JSONL")->required();
  sft->add_option("--vocab", vocab_path, "Vocabulary file")->required();
  sft->add_option("--kl-weight", kl_weight, "KL penalty weight");
  sft->add_option("--steps", steps, "Optimiser steps");
  sft->callback([&] {
    sub_name = "sft";
    body = [&](Run& r) {
      const auto vocab = load_vocab(vocab_path);
      const SdlmModel reference = load_checkpoint(checkpoint_path);
      SdlmModel model = reference.clone();
      auto fc = finetune_config(r);
      if (steps) {
        fc.steps = *steps;
        fc.opt.total_steps = *steps;
        fc.opt.warmup_steps = std::min(fc.opt.warmup_steps, *steps / 10);
      }
      const double w = kl_weight.value_or(r.cfg.training.sft.kl_weight);
      const auto windows = windows_for(corpus_path, vocab, r.cfg.training, false);
      const auto log = sft_train(model, reference, windows, fc, w);
      save_model(r, "sft.ckpt", model, fc.steps);
      write_steps_csv(r, "sft_steps.csv", log);
      const double kl = mean_kl_to_reference(model, reference, windows);
      r.write_json("sft_report.json", {{"kl_weight", w}, {"kl_to_reference", kl}, {"steps", fc.steps}});
      r.print() << "KL to reference " << kl << '\n';
    };
  });

  // reward-train
  std::string prefs_path;
  auto* rw = sub("reward-train", "Train a pairwise reward model");
  rw->add_option("--preferences", prefs_path, "Preference JSONL; planted fixture if omitted");
  rw->add_option("--test", val_path, "Held-out preference JSONL");
  rw->add_option("--steps", steps, "Optimiser steps");
  rw->callback([&] {
    sub_name = "reward-train";
    body = [&](Run& r) {
      std::vector<PreferencePair> train, test;
      ModelConfig mc = r.cfg.training.model;
      if (prefs_path.empty()) {
        const auto planted = planted_preferences(mc.vocab_size, r.cfg.reward_pairs_train, r.cfg.reward_pairs_test,
                                                 r.cfg.reward_completion_len, r.seed);
        train = planted.train;
        test = planted.test;
        write_preferences_jsonl(r.path("preferences_train.jsonl"), train);
        write_preferences_jsonl(r.path("preferences_test.jsonl"), test);
      } else {
        train = read_preferences_jsonl(prefs_path);
        if (!val_path.empty()) test = read_preferences_jsonl(val_path);
      }
      int max_id = 0;
      for (const auto* set : {&train, &test})
        for (const auto& p : *set)
          for (bool a : {true, false})
            for (int t : p.sequence(a)) max_id = std::max(max_id, t);
      mc.vocab_size = std::max<std::size_t>(mc.vocab_size, static_cast<std::size_t>(max_id) + 1);
      mc.seed = r.seed;
      RewardModel rm(mc);
      auto fc = finetune_config(r);
      if (steps) {
        fc.steps = *steps;
        fc.opt.total_steps = *steps;
        fc.opt.warmup_steps = std::min(fc.opt.warmup_steps, *steps / 10);
      }
      const auto log = reward_train(rm, train, fc);
      write_steps_csv(r, "reward_steps.csv", log);
      save_model(r, "reward_body.ckpt", rm.body, fc.steps);
      json report = {{"train_accuracy", reward_accuracy(rm, train)},
                     {"head", std::vector<double>(rm.head.data().begin(), rm.head.data().end())}};
      if (!test.empty()) report["test_accuracy"] = reward_accuracy(rm, test);
      r.write_json("reward_report.json", report);
      r.print() << "train accuracy " << report["train_accuracy"].get<double>();
      if (!test.empty()) r.print() << ", held-out accuracy " << report["test_accuracy"].get<double>();
      r.print() << '\n';
    };
  });

  // ewc-update
  std::string task_a, task_b;
  std::optional<double> ewc_lambda;
  auto* ewc = sub("ewc-update", "Fine-tune on task B with an EWC anchor to task A");
  ewc->add_option("--checkpoint", checkpoint_path, "Model trained on task A")->required();
  ewc->add_option("--vocab", vocab_path, "Vocabulary file")->required();
  ewc->add_option("--task-a", task_a, "Task A corpus JSONL")->required();
  ewc->add_option("--task-b", task_b, "Task B corpus JSONL")->required();
  ewc->add_option("--lambda", ewc_lambda, "EWC strength");
  ewc->add_option("--steps", steps, "Optimiser steps");
  ewc->callback([&] {
    sub_name = "ewc-update";
    body = [&](Run& r) {
      const auto vocab = load_vocab(vocab_path);
      SdlmModel model = load_checkpoint(checkpoint_path);
      const auto a = windows_for(task_a, vocab, r.cfg.training, true);
      const auto b = windows_for(task_b, vocab, r.cfg.training, false);
      const double lambda = ewc_lambda.value_or(r.cfg.training.ewc.lambda);
      const auto fisher = fisher_diag(model, a, r.cfg.training.ewc.samples);
      const auto state = EwcState::capture(model.parameters(), fisher, lambda);
      save_ewc_state(r.path("ewc_state.cbor"), state, r.provenance());
      r.info("wrote " + r.path("ewc_state.cbor").string());
      const double before = evaluate_perplexity(model, a);
      auto fc = finetune_config(r);
      if (steps) {
        fc.steps = *steps;
        fc.opt.total_steps = *steps;
        fc.opt.warmup_steps = std::min(fc.opt.warmup_steps, *steps / 10);
      }
      const auto log = finetune(model, b, fc, lambda > 0.0 ? &state : nullptr);
      write_steps_csv(r, "ewc_steps.csv", log);
      save_model(r, "ewc.ckpt", model, fc.steps);
      const double after = evaluate_perplexity(model, a);
      r.write_json("ewc_report.json", {{"lambda", lambda},
                                       {"task_a_perplexity_before", before},
                                       {"task_a_perplexity_after", after},
                                       {"task_b_perplexity_after", evaluate_perplexity(model, b)}});
      r.print() << "task A perplexity " << before << " -> " << after << '\n';
    };
  });

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluation metrics");
  ev->require_subcommand(1);
  std::string forecasts_path, ratings_path, groups_path;
  bool fleiss = false;
  std::size_t bins = 10;
  auto* ev_ppl = ev->add_subcommand("perplexity", "Validation perplexity of a checkpoint");
  ev_ppl->add_option("--checkpoint", checkpoint_path, "Checkpoint")->required();
  ev_ppl->add_option("--vocab", vocab_path, "Vocabulary file")->required();
  ev_ppl->add_option("--corpus", corpus_path, "Corpus JSONL")->required();
  ev_ppl->callback([&] {
    sub_name = "eval perplexity";
    body = [&](Run& r) {
      const auto vocab = load_vocab(vocab_path);
      const SdlmModel model = load_checkpoint(checkpoint_path);
      const auto w = windows_for(corpus_path, vocab, r.cfg.training, true);
      const double ppl = evaluate_perplexity(model, w);
      const double anach = evaluate_anachronism(model, w);
      r.write_json("eval_perplexity.json", {{"perplexity", ppl}, {"anachronism_mass", anach}, {"windows", w.size()}});
      r.print() << ppl << '\n';
    };
  });
  auto* ev_brier = ev->add_subcommand("brier", "Brier score of forecasts");
  ev_brier->add_option("--forecasts", forecasts_path, "CSV with probability,outcome[,horizon_months]")->required();
  ev_brier->callback([&] {
    sub_name = "eval brier";
    body = [&](Run& r) {
      const auto recs = read_forecasts_csv(forecasts_path);
      const double b = brier_score(recs);
      r.write_json("eval_brier.json", {{"brier", b}, {"n", recs.size()}});
      r.print() << b << '\n';
    };
  });
  auto* ev_cal = ev->add_subcommand("calibration", "Reliability bins and ECE");
  ev_cal->add_option("--forecasts", forecasts_path, "Forecast CSV")->required();
  ev_cal->add_option("--bins", bins, "Number of equal-width bins");
  ev_cal->callback([&] {
    sub_name = "eval calibration";
    body = [&](Run& r) {
      const auto recs = read_forecasts_csv(forecasts_path);
      const auto rep = reliability_report(recs, bins);
      write_reliability_csv(r.path("reliability.csv"), rep);
      r.stamp_csv(r.path("reliability.csv"));
      json horizons = json::object();
      for (const auto& [h, acc] : accuracy_by_horizon(recs))
        horizons[std::to_string(h)] = {{"accuracy", acc.accuracy}, {"count", acc.count}};
      r.write_json("eval_calibration.json",
                   {{"ece", rep.ece}, {"brier", rep.brier}, {"n", rep.n}, {"accuracy_by_horizon", horizons}});
      r.print() << "ECE " << rep.ece << " Brier " << rep.brier << '\n';
    };
  });
  auto* ev_kappa = ev->add_subcommand("kappa", "Cohen's or Fleiss' kappa");
  ev_kappa->add_option("--ratings", ratings_path,
                       "CSV: two label columns (Cohen) or per-category counts per item (--fleiss)")
      ->required();
  ev_kappa->add_flag("--fleiss", fleiss, "Rows are category counts");
  ev_kappa->callback([&] {
    sub_name = "eval kappa";
    body = [&](Run& r) {
      const auto rows = read_csv_rows(ratings_path, false);
      double k = 0.0;
      if (fleiss) {
        std::vector<std::vector<int>> counts;
        for (const auto& row : rows) {
          std::vector<int> c;
          for (const auto& cell : row) c.push_back(to_int(cell, ratings_path));
          counts.push_back(std::move(c));
        }
        if (counts.empty()) throw InputError(ratings_path + ": no rows");
        int raters = 0;
        for (int c : counts.front()) raters += c;
        k = fleiss_kappa(counts, raters);
      } else {
        std::vector<int> a, b;
        for (const auto& row : rows) {
          if (row.size() != 2) throw InputError(ratings_path + ": expected two columns per row");
          a.push_back(to_int(row[0], ratings_path));
          b.push_back(to_int(row[1], ratings_path));
        }
        k = cohen_kappa(a, b);
      }
      r.write_json("eval_kappa.json", {{"kappa", k}, {"method", fleiss ? "fleiss" : "cohen"}, {"items", rows.size()}});
      r.print() << k << '\n';
    };
  });
  auto* ev_anova = ev->add_subcommand("anova", "One-way ANOVA F");
  ev_anova->add_option("--groups", groups_path, "CSV with group,value rows")->required();
  ev_anova->callback([&] {
    sub_name = "eval anova";
    body = [&](Run& r) {
      std::map<std::string, std::vector<double>> by_group;
      std::vector<std::string> order;
      for (const auto& row : read_csv_rows(groups_path, false)) {
        if (row.size() != 2) throw InputError(groups_path + ": expected group,value rows");
        if (row[0] == "group") continue;
        if (!by_group.count(row[0])) order.push_back(row[0]);
        by_group[row[0]].push_back(to_double(row[1], groups_path));
      }
      std::vector<std::vector<double>> groups;
      for (const auto& g : order) groups.push_back(by_group[g]);
      const auto res = anova_f(groups);
      json j = {{"df_between", res.df_between}, {"df_within", res.df_within}, {"infinite", res.infinite}};
      j["f"] = res.infinite ? json("inf") : json(res.F);
      r.write_json("eval_anova.json", j);
      if (res.infinite) r.print() << "inf\n";
      else r.print() << res.F << '\n';
    };
  });

  // wargame
  auto* wg = app.add_subcommand("wargame", "Adjudication, alignment and throughput");
  wg->require_subcommand(1);
  std::string scenario_path, profile_name, trace_a, trace_b;
  std::vector<std::string> scenario_paths;
  double match = 2.0, mismatch = -1.0, gap = -1.0, duration = 5.0;
  auto* wg_run = wg->add_subcommand("run", "Play a scenario against a scripted OPFOR profile");
  wg_run->add_option("--scenario", scenario_path, "Scenario JSON; built-in scenario if omitted");
  wg_run->add_option("--profile", profile_name, "aggressive, static-defense or guerrilla");
  wg_run->callback([&] {
    sub_name = "wargame run";
    body = [&](Run& r) {
      const auto sc = scenario_path.empty() ? builtin_scenario() : read_scenario(scenario_path);
      const std::string pname = profile_name.empty() ? r.cfg.opfor_profile : profile_name;
      const auto run = run_scenario(sc, parse_profile(pname), r.seed);
      const auto trace_file = r.path("trace_" + pname + ".txt");
      {
        std::ofstream f(trace_file);
        f << r.csv_header();
      }
      {
        std::ofstream f(trace_file, std::ios::app);
        for (auto k : run.trace) f << action_symbol(k) << '\n';
      }
      r.info("wrote " + trace_file.string());
      std::ofstream dec(r.path("decisions.jsonl"));
      dec << json{{"_meta", r.provenance()}}.dump() << '\n';
      for (std::size_t t = 0; t < run.decisions.size(); ++t) {
        const auto& d = run.decisions[t];
        json events = json::array();
        for (const auto& e : d.events) events.push_back(event_json(e));
        dec << json{{"turn", t},        {"action", to_string(run.trace[t])}, {"accepted", d.accepted},
                    {"rules", d.rules}, {"attacker_loss", d.attacker_loss},  {"defender_loss", d.defender_loss},
                    {"events", events}}
                   .dump()
            << '\n';
      }
      r.info("wrote " + r.path("decisions.jsonl").string());
      r.print() << trace_symbols(run.trace) << '\n';
    };
  });
  auto* wg_align = wg->add_subcommand("align", "Smith-Waterman alignment of two trace files");
  wg_align->add_option("--a", trace_a, "First trace file")->required();
  wg_align->add_option("--b", trace_b, "Second trace file")->required();
  wg_align->add_option("--match", match, "Match score");
  wg_align->add_option("--mismatch", mismatch, "Mismatch score");
  wg_align->add_option("--gap", gap, "Gap score");
  wg_align->callback([&] {
    sub_name = "wargame align";
    body = [&](Run& r) {
      const AlignmentScoring s{match, mismatch, gap};
      try {
        s.validate();
      } catch (const ConfigError&) {
        throw;
      }
      const auto a = trace_symbols(read_trace(trace_a)), b = trace_symbols(read_trace(trace_b));
      const auto al = smith_waterman(a, b, s);
      const double norm = normalized_alignment(a, b, s);
      json j = alignment_json(al);
      j["normalized"] = norm;
      r.write_json("alignment.json", j);
      r.print() << al.score << ' ' << norm << '\n';
    };
  });
  auto* wg_bench = wg->add_subcommand("bench", "Adjudication throughput");
  wg_bench->add_option("--scenario", scenario_paths, "Scenario JSON files; built-in scenario if omitted");
  wg_bench->add_option("--duration", duration, "Seconds of wall time (at least 1)");
  wg_bench->callback([&] {
    sub_name = "wargame bench";
    body = [&](Run& r) {
      std::vector<Scenario> scs;
      for (const auto& p : scenario_paths) scs.push_back(read_scenario(p));
      if (scs.empty()) scs.push_back(builtin_scenario());
      const auto rep = throughput_bench(scs, duration, r.seed);
      write_bench_csv(r.path("bench.csv"), rep);
      r.stamp_csv(r.path("bench.csv"));
      r.print() << rep.total_decisions << " decisions in " << rep.seconds << " s (" << rep.per_hour << " per hour)\n";
    };
  });

  // quantize
  auto* qz = sub("quantize", "INT8 weight quantization of a checkpoint");
  qz->add_option("--checkpoint", checkpoint_path, "Checkpoint")->required();
  qz->add_option("--vocab", vocab_path, "Vocabulary file (with --corpus: report perplexity change)");
  qz->add_option("--corpus", corpus_path, "Validation corpus JSONL");
  qz->callback([&] {
    sub_name = "quantize";
    body = [&](Run& r) {
      if (corpus_path.empty() != vocab_path.empty())
        throw InputError("quantize: --vocab and --corpus must be given together");
      SdlmModel model = load_checkpoint(checkpoint_path);
      std::vector<PackedContext> val;
      json report;
      if (!corpus_path.empty()) {
        val = windows_for(corpus_path, load_vocab(vocab_path), r.cfg.training, true);
        report["perplexity_fp64"] = evaluate_perplexity(model, val);
      }
      const auto rep = quantize_model_weights(model);
      save_model(r, "quantized.ckpt", model, 0);
      report["matrices"] = rep.matrices;
      report["weights"] = rep.weights;
      report["max_abs_error"] = rep.max_abs_error;
      report["names"] = rep.names;
      if (!val.empty()) {
        const double q = evaluate_perplexity(model, val);
        report["perplexity_int8"] = q;
        report["relative_change"] = q / report["perplexity_fp64"].get<double>() - 1.0;
      }
      r.write_json("quantize_report.json", report);
      r.print() << rep.matrices << " matrices quantized";
      if (!val.empty()) r.print() << ", perplexity change " << report["relative_change"].get<double>();
      r.print() << '\n';
    };
  });

  // profile-latency
  std::string lengths_arg;
  std::optional<int> reps;
  bool attention_only = false;
  auto* pl = sub("profile-latency", "Latency versus context length");
  pl->add_option("--checkpoint", checkpoint_path, "Checkpoint; a fresh model from the config if omitted");
  pl->add_option("--lengths", lengths_arg, "Comma-separated increasing lengths");
  pl->add_option("--reps", reps, "Timed repetitions per point (at least 3)");
  pl->add_flag("--attention-only", attention_only, "Single-head attention microbenchmark only");
  pl->callback([&] {
    sub_name = "profile-latency";
    body = [&](Run& r) {
      const auto lengths = lengths_arg.empty() ? r.cfg.profile_lengths : parse_lengths(lengths_arg);
      const int n = reps.value_or(r.cfg.profile_repetitions);
      LatencyProfile prof;
      if (attention_only) {
        prof = attention_profile(lengths, r.cfg.training.model.d_head, n, r.seed);
      } else {
        const SdlmModel model = checkpoint_path.empty() ? SdlmModel(model_config_for(r, r.cfg.training.model.vocab_size))
                                                        : load_checkpoint(checkpoint_path);
        prof = latency_profile(model, lengths, n, r.seed);
      }
      write_latency_csv(r.path("latency.csv"), prof);
      r.stamp_csv(r.path("latency.csv"));
      for (const auto& f : prof.fits)
        r.print() << f.variant << " slope " << f.slope << " residual " << f.residual << '\n';
    };
  });

  // grad-check
  auto* gc = sub("grad-check", "Finite-difference check of the full loss on a tiny model");
  gc->callback([&] {
    sub_name = "grad-check";
    body = [&](Run& r) {
      ModelConfig mc;
      mc.n_layers = 2;
      mc.n_heads = 2;
      mc.d_model = 8;
      mc.d_head = 4;
      mc.d_ff = 16;
      mc.vocab_size = 16;
      mc.max_context = 32;
      mc.seed = r.seed;
      SdlmModel model(mc);
      model.mask = DocMaskParams::constant(0.2, -0.4);
      model.mask.b_same.set_requires_grad();
      model.mask.b_cross.set_requires_grad();
      Rng rng(r.seed);
      std::vector<DocumentSegment> segs;
      for (int s = 0; s < 6; ++s) {
        DocumentSegment seg;
        seg.doc_id = "d" + std::to_string(s);
        seg.domain = kAllDomains[static_cast<std::size_t>(s) % kNumDomains];
        seg.temporal_index = 3000 - 400 * s;
        for (int t = 0; t < 3; ++t) seg.tokens.push_back(2 + static_cast<int>(rng.below(mc.vocab_size - 2)));
        segs.push_back(seg);
      }
      std::vector<const DocumentSegment*> ptrs;
      for (const auto& s : segs) ptrs.push_back(&s);
      const auto ctx = pack_segments(ptrs, mc.max_context);
      std::vector<std::string> names;
      std::vector<std::vector<double>> embs;
      for (int i = 0; i < 3; ++i) {
        names.push_back("p" + std::to_string(i));
        std::vector<double> e(mc.d_model);
        for (auto& x : e) x = rng.normal();
        embs.push_back(std::move(e));
      }
      model.doctrine = DoctrineEmbeddingSet(names, embs, true);
      std::vector<Tensor> params = model.parameters();
      const auto res = grad_check([&] { return model.total_loss(ctx).total; }, params);
      const bool ok = res.max_rel_error < 1e-4;
      r.write_json("grad_check.json", {{"max_rel_error", res.max_rel_error},
                                       {"worst_input", model.named_parameters()[res.worst_input].first},
                                       {"worst_index", res.worst_index},
                                       {"analytic", res.analytic},
                                       {"numeric", res.numeric},
                                       {"passed", ok}});
      r.print() << "max relative error " << res.max_rel_error << (ok ? " PASS" : " FAIL") << '\n';
      if (!ok) throw NumericError("grad-check: relative error above 1e-4");
    };
  });

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    append_audit(common.out_dir, sub_name.empty() ? "?" : sub_name, "", 0, std::string("usage: ") + e.what(),
                 kExitUsage);
    return kExitUsage;
  }

  Run r;
  r.name = sub_name;
  r.out = common.out_dir;
  r.quiet = common.quiet;
  r.verbose = common.verbose;
  r.os = &out;
  int code = kExitOk;
  std::string outcome = "ok";
  try {
    try {
      r.cfg = load_config(common.config_path);
      if (common.seed) r.cfg.seed = *common.seed;
      r.seed = r.cfg.seed;
      r.hash = config_hash(r.cfg.to_json());
    } catch (const ConfigError& e) {
      err << "invalid config: " << e.what() << '\n';
      append_audit(r.out, sub_name, "", common.seed.value_or(0), std::string("invalid config: ") + e.what(),
                   kExitFailure);
      return kExitFailure;
    }
    fs::create_directories(r.out);
    r.debug("config hash " + r.hash + ", seed " + std::to_string(r.seed));
    body(r);
  } catch (const ConfigError& e) {
    err << "invalid config: " << e.what() << '\n';
    outcome = std::string("invalid config: ") + e.what();
    code = kExitFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    outcome = std::string("error: ") + e.what();
    code = kExitFailure;
  }
  append_audit(r.out, sub_name, r.hash, r.seed, outcome, code);
  return code;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args, out, err);
}

}  // namespace sdlm
