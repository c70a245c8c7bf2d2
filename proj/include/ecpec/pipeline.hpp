#pragma once

// Stage orchestration (emotion recognition -> cause pairs -> cause spans),
// configuration and the command-line front end.

#include "ecpec/classifier.hpp"
#include "ecpec/corpus.hpp"
#include "ecpec/encoder.hpp"
#include "ecpec/evaluation.hpp"
#include "ecpec/fusion.hpp"
#include "ecpec/span.hpp"
#include "ecpec/tsam.hpp"

#include <nlohmann/json.hpp>

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace ecpec {

enum class EmotionSource { gold, classifier, file };

struct PipelineConfig {
  std::uint64_t seed = 1;

  bool stage_erc = true;
  bool stage_cee = true;
  bool stage_cse = true;
  EmotionSource emotion_source = EmotionSource::gold;

  // Data and artifacts.
  std::string train_path = "data/train.json";
  std::string dev_path = "data/dev.json";
  std::string test_path = "data/test.json";
  std::string data_format = "native";  // native | ecf
  std::string output_dir = "out";
  std::string erc_checkpoint = "out/erc_baseline.json";
  std::string cee_checkpoint = "out/cee.json";
  std::string cse_checkpoint = "out/cse.json";
  std::string emotion_file;  // {"conversation id": ["joy", ...]}

  // Stage 1.
  std::string classifier = "baseline";  // baseline | subprocess | http
  std::string classifier_command;
  std::string classifier_url = "http://127.0.0.1:8080/classify";
  std::string template_dir;  // empty: shipped templates
  int history_window = kDefaultHistoryWindow;
  double label_noise = 0.0;  // fraction of stage-1 labels replaced at random
  BaselineConfig erc_baseline;

  EncoderConfig encoder;
  TsamConfig tsam;
  TrainConfig train_cee;
  EncoderConfig span_encoder;
  SpanConfig span;
  TrainConfig train_cse;

  // Modality fusion into the pair model.
  bool fusion_enabled = false;
  std::string fusion_selection = "out/selection.json";
  std::string fusion_features;  // CSV; empty: per-utterance audio features of the dataset
  int fusion_target_dim = 16;
  std::string fusion_mode = "l1";  // l1 | variance

  // Synthetic corpus for gen-data.
  int synthetic_conversations = 200;
  SyntheticParams synthetic;
  std::array<double, 3> split_ratios = reference_split_ratios();

  void validate() const;
};

// Defaults of every section, as a JSON document.
nlohmann::json default_config_json();

// Parses a full or partial config document on top of the defaults. Unknown
// keys are rejected. Sub-model seeds follow the top-level seed unless set.
PipelineConfig config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PipelineConfig& c);

// "a.b.c=value": value parsed as JSON, falling back to a plain string.
void apply_override(nlohmann::json& document, const std::string& assignment);

// `path` (or $ECPEC_CONFIG when empty) plus overrides. No path at all means defaults.
PipelineConfig load_config(const std::string& path, const std::vector<std::string>& overrides);

std::vector<Conversation> load_split(const PipelineConfig& config, const std::string& path);

// Replaces each label with probability `rate` by a different label drawn
// uniformly; deterministic in `seed`.
std::vector<EmotionLabel> corrupt_labels(const std::vector<EmotionLabel>& labels, double rate, std::uint64_t seed);

using LabelMap = std::map<std::string, std::vector<EmotionLabel>>;

nlohmann::json labels_to_json(const LabelMap& labels);
LabelMap labels_from_json(const nlohmann::json& j);

// Stage 1 over `conversations` according to the configured source.
LabelMap run_emotion_stage(const PipelineConfig& config, const std::vector<Conversation>& conversations);

struct ModalityTable {
  FeatureSelection selection;
  StandardScaler scaler;
  std::map<std::string, Matrix> per_conversation;  // t x selected dims, standardized
};

// Selected, standardized modality rows for each conversation (missing rows are zeros).
ModalityTable build_modality_table(const PipelineConfig& config, const std::vector<Conversation>& conversations,
                                   const FeatureSelection& selection, const StandardScaler& scaler);

struct PipelineResult {
  LabelMap labels;
  std::vector<PairRecord> pairs;        // stage 2 output
  std::vector<PairRecord> predictions;  // pairs with spans attached
  nlohmann::json metrics;               // {erc, cee, cse}
};

// Runs the enabled stages on the test split and writes every artifact under output_dir.
PipelineResult run_pipeline(const PipelineConfig& config);

// Command-line entry point; returns the process exit code
// (0 success, 2 configuration/usage error, 1 runtime error).
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace ecpec
