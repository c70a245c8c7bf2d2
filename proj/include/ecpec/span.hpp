#pragma once

// Causal span extraction: given a target utterance, one cause utterance and
// the preceding dialogue, predict the start and end token of the cause span
// inside the cause utterance.

#include "ecpec/autodiff.hpp"
#include "ecpec/corpus.hpp"
#include "ecpec/encoder.hpp"
#include "ecpec/params.hpp"
#include "ecpec/tsam.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace ecpec {

struct SpanConfig {
  double beta = 0.5;  // weight of the auxiliary emotion loss
  int k = 5;          // start candidates kept when decoding
  int hidden = 64;    // end head width
  std::uint64_t seed = 1;

  void validate() const;
};

nlohmann::json to_json(const SpanConfig& c);
SpanConfig span_config_from_json(const nlohmann::json& j, SpanConfig base = {});

inline constexpr int kTargetSegment = 0;
inline constexpr int kCandidateSegment = 1;
inline constexpr int kHistorySegment = 2;

// [<cls>] target [<sep>] candidate [<sep>] history, where the history is
// every utterance before the target except the candidate, each behind <utt>.
struct SpanInput {
  std::vector<int> tokens;
  std::vector<int> segments;
  int candidate_begin = 0;   // sequence position of the first candidate token
  int candidate_length = 0;  // never zero for a usable input
  std::vector<std::string> candidate_tokens;
};

// History is dropped oldest first, then the target is cut, then the
// candidate, until the sequence fits `max_tokens`.
SpanInput build_span_input(const Conversation& conversation, int target_index, int cause_index,
                           const Vocabulary& vocab, int max_tokens);

inline constexpr double kMasked = -std::numeric_limits<double>::infinity();

struct SpanForward {
  ad::Var seq;             // n x d
  ad::Var start_scores;    // n x 1, unmasked
  ad::Var emotion_logits;  // 1 x 7, read from the first position
  Matrix start_logits;     // n x 1, -inf outside the candidate region
};

// Candidate-relative, inclusive.
struct SpanPrediction {
  int start = 0;
  int end = 0;
  double score = 0.0;

  bool operator==(const SpanPrediction&) const = default;
};

class SpanModel {
 public:
  SpanModel(EncoderConfig encoder, SpanConfig config, Vocabulary vocab);
  static SpanModel create(const EncoderConfig& encoder, const SpanConfig& config, Vocabulary vocab);

  const SpanConfig& config() const { return config_; }
  SpanConfig& mutable_config() { return config_; }
  const TransformerEncoder& encoder() const { return encoder_; }
  const Vocabulary& vocab() const { return vocab_; }
  const ParameterStore& params() const { return params_; }
  ParameterStore& params() { return params_; }

  SpanInput input_for(const Conversation& conversation, int target_index, int cause_index) const {
    return build_span_input(conversation, target_index, cause_index, vocab_, encoder_.config().max_tokens);
  }

  SpanForward forward(ad::Graph& g, const SpanInput& input) const;

  // Unmasked end scores for a start given as a sequence position.
  ad::Var end_scores(ad::Graph& g, ad::Var seq, int start_position) const;
  // Masked end logits; throws std::out_of_range when the start lies outside the candidate.
  Matrix end_logits(ad::Graph& g, ad::Var seq, const SpanInput& input, int start_position) const;

  // CE(start) + CE(end | gold start) + beta * CE(emotion). `gold` is candidate-relative.
  ad::Var loss(ad::Graph& g, const SpanInput& input, TokenSpan gold, EmotionLabel emotion) const;

  nlohmann::json to_json() const;
  static SpanModel from_json(const nlohmann::json& j);
  void save(const std::string& path) const;
  static SpanModel load(const std::string& path);

 private:
  TransformerEncoder encoder_;
  SpanConfig config_;
  Vocabulary vocab_;
  ParameterStore params_;
};

// Decoding over candidate-relative logits. `end_for_start(s)` returns the
// candidate-relative end logits for start s (entries < s may be -inf).
using EndLogitsFn = std::function<std::vector<double>(int start)>;

// Top-k starts, top-k ends per start, best start+end sum. Ties go to the
// smallest (start, end).
SpanPrediction decode_topk(const std::vector<double>& start_logits, const EndLogitsFn& end_for_start, int k);
SpanPrediction decode_brute_force(const std::vector<double>& start_logits, const EndLogitsFn& end_for_start);

SpanPrediction infer_span_topk(const SpanModel& model, const SpanInput& input, int k);
SpanPrediction brute_force_span(const SpanModel& model, const SpanInput& input);

struct SpanExample {
  SpanInput input;
  TokenSpan gold;
  EmotionLabel emotion = EmotionLabel::neutral;
};

// One example per gold pair carrying a span that survives truncation.
std::vector<SpanExample> span_examples(const SpanModel& model, const std::vector<Conversation>& conversations);

struct SpanEpochRecord {
  int epoch = 0;
  double loss = 0.0;
  double exact_match_train = 0.0;
  double proportional_f1_train = 0.0;
  double exact_match_dev = 0.0;
  double proportional_f1_dev = 0.0;
};

using SpanEpochCallback = std::function<void(const SpanEpochRecord&)>;

struct SpanAccuracy {
  double exact_match = 0.0;
  double proportional_f1 = 0.0;
};

SpanAccuracy span_accuracy(const SpanModel& model, const std::vector<SpanExample>& examples);

std::vector<SpanEpochRecord> train_cse(SpanModel& model, const std::vector<Conversation>& train,
                                       const std::vector<Conversation>& dev, const TrainConfig& config,
                                       const SpanEpochCallback& on_epoch = {});

}  // namespace ecpec
