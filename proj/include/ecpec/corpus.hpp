#pragma once

// Conversation data model, dataset I/O and the synthetic corpus generator.

#include "ecpec/emotion.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace ecpec {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class FeatureSource { gemaps, compare, face_identity, face_emotion, custom };

inline constexpr std::size_t kGemapsDim = 62;
inline constexpr std::size_t kCompareDim = 6373;

std::string_view feature_source_name(FeatureSource source);
FeatureSource feature_source_from_name(std::string_view name);

struct FeatureVector {
  FeatureSource source = FeatureSource::custom;
  std::vector<double> values;

  std::size_t dim() const { return values.size(); }
  // Finite values; fixed dimension for the openSMILE sets.
  void validate() const;
  bool operator==(const FeatureVector&) const = default;
};

struct VideoDescription {
  std::string background;
  std::string movement;
  std::string personal_state;
  bool operator==(const VideoDescription&) const = default;
};

struct Utterance {
  int index = 0;  // 1-based
  std::string speaker;
  std::string text;
  std::vector<std::string> tokens;
  std::optional<EmotionLabel> emotion;
  std::optional<FeatureVector> audio_features;
  std::optional<FeatureVector> vision_features;
  std::optional<VideoDescription> video_description;
  bool operator==(const Utterance&) const = default;
};

// Inclusive token range inside the cause utterance.
using TokenSpan = std::pair<int, int>;

struct EmotionCausePair {
  int emotion_index = 0;
  EmotionLabel emotion = EmotionLabel::neutral;
  int cause_index = 0;
  std::optional<TokenSpan> span;
  bool operator==(const EmotionCausePair&) const = default;
  auto operator<=>(const EmotionCausePair&) const = default;
};

struct Conversation {
  std::string id;
  std::vector<Utterance> utterances;
  std::vector<EmotionCausePair> pairs;

  std::size_t size() const { return utterances.size(); }
  const Utterance& at(int index) const;  // 1-based
  std::vector<EmotionLabel> gold_emotions() const;  // missing -> neutral
  bool operator==(const Conversation&) const = default;
};

// Throws DatasetError naming the conversation on any invariant violation.
void validate(const Conversation& conversation);

struct TokenizerOptions {
  bool lowercase = false;
};

// Whitespace split, then every ASCII punctuation character becomes its own token.
std::vector<std::string> tokenize(std::string_view text, const TokenizerOptions& options = {});

std::string join_tokens(const std::vector<std::string>& tokens, int begin, int end);  // inclusive

enum class DatasetFormat { native_json, ecf_json };

nlohmann::json to_json(const Conversation& conversation);
Conversation conversation_from_json(const nlohmann::json& j);

std::vector<Conversation> load_dataset(const std::string& path, DatasetFormat format = DatasetFormat::native_json);
void save_dataset(const std::string& path, const std::vector<Conversation>& conversations);

// Best-effort reader for the public ECF layout:
// [{"conversation_ID", "conversation": [{"utterance_ID","text","speaker","emotion"}],
//   "emotion-cause_pairs": [["3_joy", "2_cause text"] | ["3_joy", "2"]]}]
std::vector<Conversation> conversations_from_ecf(const nlohmann::json& j);

struct SyntheticParams {
  int min_utterances = 5;
  int max_utterances = 10;
  int min_speakers = 2;
  int max_speakers = 4;
  double p_emotion = 0.35;  // chance an utterance carries a non-neutral emotion
  int window = 3;           // maximum emotion-to-cause distance of a planted trigger
  double p_empty_speaker = 0.05;
  double p_cue = 1.0;  // chance an emotional utterance contains an emotion cue word
  double p_video = 0.0;
  bool audio = false;  // attach gemaps-sized vectors correlated with the emotion

  void validate() const;
};

SyntheticParams synthetic_params_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SyntheticParams& params);

std::vector<Conversation> generate_synthetic(std::uint64_t seed, int n_conversations,
                                             const SyntheticParams& params = {});

// Trigger phrases the generator plants for an emotion (empty for neutral).
const std::vector<std::vector<std::string>>& trigger_phrases(EmotionLabel label);
bool is_trigger_token(std::string_view token);

// Proportions of the reference train/dev/test utterance counts.
inline constexpr std::array<double, 3> kReferenceSplitCounts = {9966.0, 1087.0, 2566.0};
std::array<double, 3> reference_split_ratios();

struct DatasetSplit {
  std::vector<Conversation> train;
  std::vector<Conversation> dev;
  std::vector<Conversation> test;
};

// Conversation-granular shuffle-and-cut.
DatasetSplit split_dataset(const std::vector<Conversation>& conversations, std::array<double, 3> ratios,
                           std::uint64_t seed);

}  // namespace ecpec
