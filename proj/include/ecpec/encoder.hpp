#pragma once

// Contextual utterance representations: a small pre-norm transformer over
// the concatenated conversation, pooled at one sentinel token per utterance.

#include "ecpec/autodiff.hpp"
#include "ecpec/corpus.hpp"
#include "ecpec/params.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace ecpec {

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;
  static constexpr int kSep = 3;
  static constexpr int kUtt = 4;  // utterance sentinel

  Vocabulary();
  static Vocabulary build(const std::vector<Conversation>& conversations, int min_count = 1);

  int id(const std::string& token) const;
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(tokens_.size()); }
  std::vector<int> encode(const std::vector<std::string>& tokens) const;

  nlohmann::json to_json() const { return tokens_; }
  static Vocabulary from_json(const nlohmann::json& j);
  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  void add(const std::string& token);
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

struct EncoderConfig {
  int dim = 64;
  int n_layers = 2;
  int n_heads = 4;
  int ffn_dim = 128;
  int vocab_size = 0;
  int max_tokens = 256;
  int n_segments = 16;  // turn-distance (or region) embeddings
  int local_layers = 0;  // leading layers that attend only within a token group
  std::uint64_t seed = 1;

  void validate() const;
};

nlohmann::json to_json(const EncoderConfig& c);
EncoderConfig encoder_config_from_json(const nlohmann::json& j, EncoderConfig base = {});

class TransformerEncoder {
 public:
  TransformerEncoder(EncoderConfig config, std::string prefix);

  const EncoderConfig& config() const { return config_; }
  const std::string& prefix() const { return prefix_; }

  void init(ParameterStore& store, Rng& rng) const;

  // Token representations, n x dim. `groups` (one id per token) restricts
  // the first local_layers layers to attention inside a group.
  ad::Var forward(ad::Graph& g, const ParameterStore& store, std::span<const int> tokens,
                  std::span<const int> segments, std::span<const int> groups = {}) const;

 private:
  EncoderConfig config_;
  std::string prefix_;
  Matrix positions_;
};

struct UtteranceMatrix {
  Matrix H;                    // upto x dim; row i is utterance i + 1
  std::vector<bool> valid_mask;
  std::vector<std::string> warnings;
};

// Graph-level variant used by the models that sit on top of the encoder.
struct EncodedUtterances {
  ad::Var H;
  std::vector<bool> valid_mask;
  std::vector<std::string> warnings;
};

// Builds [<utt> U_1 ... <utt> U_upto]; segment = min(upto - i, n_segments - 1).
// Oldest utterances are dropped (never the target) when the sequence exceeds
// max_tokens; the target's own tokens are cut as a last resort.
struct ConversationSequence {
  std::vector<int> tokens;
  std::vector<int> segments;
  std::vector<int> groups;              // utterance index of every token
  std::vector<int> sentinel_positions;  // one per kept utterance
  int first_kept = 1;                   // 1-based index of the oldest kept utterance
  std::vector<std::string> warnings;
};

ConversationSequence build_sequence(const Conversation& conversation, int upto, const Vocabulary& vocab,
                                    const EncoderConfig& config);

EncodedUtterances encode_utterances(ad::Graph& g, const TransformerEncoder& encoder, const ParameterStore& store,
                                    const Vocabulary& vocab, const Conversation& conversation, int upto);

UtteranceMatrix encode_conversation(const Conversation& conversation, int upto, const TransformerEncoder& encoder,
                                    const ParameterStore& store, const Vocabulary& vocab);

// Gradients of sum(H .* upstream) with respect to every encoder array.
GradStore encoder_gradients(const Conversation& conversation, int upto, const Matrix& upstream,
                            const TransformerEncoder& encoder, const ParameterStore& store, const Vocabulary& vocab);

}  // namespace ecpec
