#pragma once

// Toy decoder-only transformer with temporal position encoding, a learned
// document-level attention bias, multi-domain fusion and a doctrine head.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "sdlm/attention.hpp"
#include "sdlm/corpus.hpp"
#include "sdlm/strategic.hpp"
#include "sdlm/tensor.hpp"
#include "sdlm/tokenizer.hpp"

namespace sdlm {

inline constexpr double kDefaultTemporalLambda = 0.08;

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_model = 64;
  std::size_t d_head = 16;
  std::size_t d_ff = 256;
  std::size_t vocab_size = 512;
  std::size_t max_context = 256;
  double lambda_doc = kDefaultDoctrineLambda;
  double lambda_temp = kDefaultTemporalLambda;
  double T_strategic = kDefaultStrategicPeriod;
  double alpha_init = 0.1;
  bool temporal_pe = true;  // off: plain sinusoidal PE, alpha unused
  bool doc_mask = true;     // off: no document bias in attention
  bool fusion = true;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct BlockParams {
  Tensor ln1_g, ln1_b;
  Tensor Wq, Wk, Wv, Wo;  // d x d
  Tensor ln2_g, ln2_b;
  Tensor W1, b1, W2, b2;
};

/// One training/eval window. targets[i] is the token following tokens[i].
struct PackedContext {
  std::vector<int> tokens;
  std::vector<int> targets;
  std::vector<int> doc_index;  // dense per-window document ids
  std::vector<double> days;    // per-position temporal index of its segment
  std::vector<Domain> domains;

  std::size_t size() const { return tokens.size(); }
  std::size_t num_docs() const;
  void validate(std::size_t vocab_size) const;
};

/// Concatenated token stream of a corpus; each segment is followed by <sep>.
struct TokenStream {
  std::vector<int> tokens;
  std::vector<int> segment;  // index into the source segment list
  std::vector<double> days;
  std::vector<Domain> domains;
};

TokenStream build_stream(const std::vector<DocumentSegment>& segments);

/// Windows of `length` inputs (plus one target each) starting every `stride` tokens.
std::vector<PackedContext> make_windows(const TokenStream& stream, std::size_t length, std::size_t stride);

/// Packs whole segments (in order) into one context; the final segment's
/// last token has no target and is dropped. Throws TruncationError if too long.
PackedContext pack_segments(const std::vector<const DocumentSegment*>& segments, std::size_t max_context);

struct LayerRecord {
  std::vector<Tensor> head_weights;  // T x T per head
  Tensor cross_doc_mass;             // T x 1, averaged over heads
};

struct ForwardOutput {
  Tensor logits;  // T x V
  Tensor hidden;  // final normalized states, T x d
  Tensor pooled;  // 1 x d_doc
  std::vector<LayerRecord> layers;
};

struct LossBreakdown {
  Tensor l_clm, l_doctrine, l_temporal, total;

  double clm() const { return l_clm.item(); }
  double doctrine() const { return l_doctrine.item(); }
  double temporal() const { return l_temporal.item(); }
  double value() const { return total.item(); }
};

/// Mean over layers, heads and queries of the attention mass on keys whose
/// day index is strictly later than the query's.
Tensor temporal_coherence_loss(const std::vector<LayerRecord>& layers, std::span<const double> days);

class SdlmModel {
 public:
  explicit SdlmModel(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& mutable_config() { return cfg_; }

  ForwardOutput forward(const PackedContext& ctx) const;
  LossBreakdown total_loss(const PackedContext& ctx) const;
  LossBreakdown total_loss(const PackedContext& ctx, const ForwardOutput& out) const;

  /// Every tensor with a stable name, including frozen ones.
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  /// Tensors updated by training under the current config.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;

  /// Independent deep copy.
  SdlmModel clone() const;
  void zero_grad() const;

  Tensor tok_emb;  // V x d, tied with the output projection
  Tensor alpha;
  DocMaskParams mask;
  std::vector<BlockParams> blocks;
  Tensor lnf_g, lnf_b;
  DomainFusionParams fusion;
  Tensor doc_proj;  // d x d_doc
  DoctrineEmbeddingSet doctrine;

 private:
  ModelConfig cfg_;
};

/// Principle embedding: mean of scaled input token embeddings of its text.
std::vector<double> embed_text(const SdlmModel& model, const Vocabulary& vocab, std::string_view text);

struct DoctrinePrincipleText {
  std::string name;
  std::string text;
};

const std::vector<DoctrinePrincipleText>& default_doctrine_principles();
std::vector<DoctrinePrincipleText> read_doctrine_file(const std::filesystem::path& path);

/// Computes and freezes the model's doctrine set from principle texts.
void install_doctrine(SdlmModel& model, const Vocabulary& vocab,
                      const std::vector<DoctrinePrincipleText>& principles);

/// Per-token negative log-likelihoods of every window (no graph).
std::vector<double> token_nll(const SdlmModel& model, const std::vector<PackedContext>& windows);
double evaluate_perplexity(const SdlmModel& model, const std::vector<PackedContext>& windows);

/// Mean anachronism mass over windows (no graph).
double evaluate_anachronism(const SdlmModel& model, const std::vector<PackedContext>& windows);

struct GenerateOptions {
  bool greedy = true;
  double temperature = 1.0;
  std::size_t max_new = 16;
  std::uint64_t seed = 0;
};

/// Appends tokens to the prompt. Greedy ties go to the lowest id.
std::vector<int> generate(const SdlmModel& model, const std::vector<int>& prompt, const GenerateOptions& opts);

// ---------------------------------------------------------------------------
// Checkpoints

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string producer;
  std::uint64_t step = 0;
};

void save_checkpoint(const std::filesystem::path& path, const SdlmModel& model, const CheckpointMeta& meta = {});
SdlmModel load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta = nullptr);
/// The checksum stored in a checkpoint's trailer.
std::uint64_t checkpoint_checksum(const std::filesystem::path& path);

}  // namespace sdlm
