#pragma once

// Two-stream attention model for causal emotion entailment.
//
// Per layer: an emotion stream (utterances attending over per-utterance
// emotion embeddings), a speaker stream (relational graph attention over
// intra-/inter-speaker edges) and a masked bi-affine exchange between the
// two. A feed-forward scorer turns the final pair of streams into one cause
// probability per candidate utterance.

#include "ecpec/autodiff.hpp"
#include "ecpec/corpus.hpp"
#include "ecpec/encoder.hpp"
#include "ecpec/params.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace ecpec {

struct TsamConfig {
  int layers = 2;
  int n_heads = 4;
  int dim = 64;
  int hidden = 64;  // width of the cause scorer's hidden layer
  double threshold = 0.5;
  double lambda_aux = 0.2;
  double dice_eps = 1.0;
  int modality_dim = 0;  // > 0 enables fused per-utterance features
  bool emotion_distance = false;  // add a turn-distance embedding to the initial emotion representations
  std::uint64_t seed = 1;

  void validate() const;
};

nlohmann::json to_json(const TsamConfig& c);
TsamConfig tsam_config_from_json(const nlohmann::json& j, TsamConfig base = {});

struct SpeakerGraph {
  Mask intra;
  Mask inter;
  std::vector<bool> known;
};

SpeakerGraph build_speaker_graph(const Conversation& conversation, int upto);

// Multi-head attention with Q = utterances and K = V = emotion representations.
// `allowed_keys` (length t, optional) excludes emotion rows from every query.
ad::Var emotion_attention(ad::Graph& g, const ParameterStore& store, const std::string& prefix, ad::Var utterances,
                          ad::Var emotion_reps, int n_heads, const std::vector<bool>* allowed_keys = nullptr,
                          std::vector<Matrix>* weights = nullptr);

// Label-driven form: keys/values are rows of the emotion table picked by `labels`.
ad::Var emotion_attention(ad::Graph& g, const ParameterStore& store, const std::string& prefix, ad::Var utterances,
                          const std::vector<EmotionLabel>& labels, const std::string& table_name, int n_heads,
                          std::vector<Matrix>* weights = nullptr);

// Relational graph attention; nodes without any neighbour get a zero row.
// `weights`, when given, receives {intra, inter} attention matrices.
ad::Var speaker_attention(ad::Graph& g, const ParameterStore& store, const std::string& prefix, ad::Var utterances,
                          const SpeakerGraph& graph, std::vector<Matrix>* weights = nullptr);

struct Interaction {
  ad::Var emotion;  // softmax(mask(He W1 Hs^T)) Hs
  ad::Var speaker;  // softmax(mask(Hs W2 He^T)) He
};

// Columns j with known[j] == false are removed from both softmaxes.
Interaction masked_interaction(ad::Graph& g, const ParameterStore& store, const std::string& prefix, ad::Var emotion,
                               ad::Var speaker, const std::vector<bool>& known, std::vector<Matrix>* weights = nullptr);

// One logit per row from [speaker || emotion].
ad::Var cause_logits(ad::Graph& g, const ParameterStore& store, const std::string& prefix, ad::Var emotion,
                     ad::Var speaker);

struct PairPrediction {
  int target_index = 0;
  int candidate_index = 0;
  double probability = 0.0;
  bool is_cause = false;
};

// Candidates 1..target_index; is_cause = p >= threshold.
std::vector<PairPrediction> predict_causes(const Matrix& logits, int target_index, double threshold);

// Soft Dice averaged over the classes present in `gold`:
// 1 - (2 sum p g + eps) / (sum p^2 + sum g^2 + eps).
ad::Var dice_loss(ad::Graph& g, ad::Var probabilities, const Matrix& gold, double eps = 1.0);
double dice_loss(const Matrix& probabilities, const Matrix& gold, double eps = 1.0);

class TsamModel {
 public:
  TsamModel(EncoderConfig encoder, TsamConfig config, Vocabulary vocab);

  static TsamModel create(const EncoderConfig& encoder, const TsamConfig& config, Vocabulary vocab);

  const TsamConfig& config() const { return config_; }
  TsamConfig& mutable_config() { return config_; }
  const TransformerEncoder& encoder() const { return encoder_; }
  const Vocabulary& vocab() const { return vocab_; }
  const ParameterStore& params() const { return params_; }
  ParameterStore& params() { return params_; }

  struct Forward {
    ad::Var logits;          // upto x 1
    ad::Var emotion_logits;  // upto x 7, auxiliary head
    std::vector<bool> valid_mask;
  };

  // `labels` covers at least utterances 1..upto; `modality` (upto x modality_dim) when fused.
  Forward forward(ad::Graph& g, const Conversation& conversation, int upto, const std::vector<EmotionLabel>& labels,
                  const Matrix* modality = nullptr) const;

  // Composite objective summed over the non-neutral targets of `labels`.
  ad::Var loss(ad::Graph& g, const Conversation& conversation, const std::vector<EmotionLabel>& labels,
               const Matrix* modality = nullptr) const;
  // Pair BCE part only, for diagnostics.
  double pair_loss(const Conversation& conversation, const std::vector<EmotionLabel>& labels) const;

  std::vector<PairPrediction> score(const Conversation& conversation, int target_index,
                                    const std::vector<EmotionLabel>& labels, const Matrix* modality = nullptr) const;

  nlohmann::json to_json() const;
  static TsamModel from_json(const nlohmann::json& j);
  void save(const std::string& path) const;
  static TsamModel load(const std::string& path);

 private:
  TransformerEncoder encoder_;
  TsamConfig config_;
  Vocabulary vocab_;
  ParameterStore params_;
};

// Emits (t, label_t, j) for every non-neutral target t and candidate j <= t with p >= threshold.
std::vector<EmotionCausePair> infer_pairs(const TsamModel& model, const Conversation& conversation,
                                          const std::vector<EmotionLabel>& labels, double threshold,
                                          const Matrix* modality = nullptr);

struct TrainConfig {
  int epochs = 30;
  double lr = 1e-3;
  int batch_size = 8;
  std::uint64_t seed = 1;
  double clip_norm = 5.0;
  double weight_decay = 0.0;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  double pos_f1_train = 0.0;
  double pos_f1_dev = 0.0;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using EpochCallback = std::function<void(const EpochRecord&)>;
using ModalityLookup = std::function<const Matrix*(const Conversation&)>;

// Mini-batch Adam on gold pairs; stage-1 labels are the gold emotions.
std::vector<EpochRecord> train_cee(TsamModel& model, const std::vector<Conversation>& train,
                                   const std::vector<Conversation>& dev, const TrainConfig& config,
                                   const EpochCallback& on_epoch = {}, const ModalityLookup& modality = {});

}  // namespace ecpec
