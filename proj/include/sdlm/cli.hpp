#pragma once

// Command-line front end shared by the sdlm executable and its tests.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "sdlm/corpus.hpp"
#include "sdlm/training.hpp"

namespace sdlm {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;  // invalid config or any contract error
inline constexpr int kExitUsage = 2;    // unknown subcommand or bad flags

/// Every section a config file may hold. Unknown keys are rejected.
struct CliConfig {
  std::uint64_t seed = 0;
  TrainingConfig training;
  CorpusSpec corpus;
  std::size_t bpe_vocab = 440;
  DedupConfig dedup;
  std::size_t finetune_steps = 200;
  std::size_t reward_pairs_train = 400;
  std::size_t reward_pairs_test = 200;
  std::size_t reward_completion_len = 6;
  std::string opfor_profile = "aggressive";
  std::vector<std::size_t> profile_lengths = {256, 512, 1024, 2048, 4096};
  int profile_repetitions = 3;

  static CliConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

/// Parses argv and runs one subcommand. Never throws.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace sdlm
