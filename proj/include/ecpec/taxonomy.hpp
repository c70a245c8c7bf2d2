#pragma once

// Speaker normalization, auxiliary-task prompt construction and label
// parsing for the emotion recognition stage.

#include "ecpec/corpus.hpp"
#include "ecpec/emotion.hpp"

#include <set>
#include <string>
#include <vector>

namespace ecpec {

inline constexpr const char* kOthersSpeaker = "Others";
inline constexpr const char* kUnknownSpeaker = "Unknown";
inline constexpr int kDefaultHistoryWindow = 12;

// Every speaker outside `protagonists` becomes "Others". Empty speakers stay empty.
Conversation normalize_speakers(const Conversation& conversation, const std::set<std::string>& protagonists);

enum class PromptTask { erc, speaker_id, sub_label, positive_rec, negative_rec };

inline constexpr std::array<PromptTask, 5> kAllPromptTasks = {PromptTask::erc, PromptTask::speaker_id,
                                                              PromptTask::sub_label, PromptTask::positive_rec,
                                                              PromptTask::negative_rec};

std::string_view prompt_task_name(PromptTask task);

// Answer vocabularies of the emotion-flavoured tasks.
std::vector<std::string> label_set(PromptTask task);
inline constexpr const char* kOtherAnswer = "other";

struct PromptSample {
  PromptTask task = PromptTask::erc;
  std::string conversation_id;
  int target_index = 0;
  std::string rendered_prompt;
  std::string gold_answer;
  int history_size = 0;  // number of prior utterances rendered
};

// Text templates with {name} placeholders, loaded from a versioned directory.
class PromptTemplates {
 public:
  static PromptTemplates load(const std::string& directory);
  static PromptTemplates load_default();  // the directory shipped with the build

  const std::string& version() const { return version_; }
  std::string render(PromptTask task, const std::string& history, const std::string& video,
                     const std::string& target_speaker, const std::string& target_text,
                     const std::vector<std::string>& labels) const;

 private:
  std::string version_;
  std::string layout_;
  std::string job_emotion_;
  std::string job_speaker_;
  std::string label_emotion_;
  std::string label_speaker_;
};

std::string default_template_dir();

// Replaces every {key} in `text`; unknown placeholders are left untouched.
std::string fill_placeholders(std::string text, const std::vector<std::pair<std::string, std::string>>& values);

struct AuxiliaryOptions {
  int window = kDefaultHistoryWindow;
  bool include_video = false;
  std::vector<PromptTask> tasks{kAllPromptTasks.begin(), kAllPromptTasks.end()};
};

std::vector<PromptSample> build_auxiliary_samples(const Conversation& conversation, const PromptTemplates& templates,
                                                  const AuxiliaryOptions& options = {});

// Single ERC prompt for utterance `target_index` (1-based).
PromptSample build_erc_prompt(const Conversation& conversation, int target_index, const PromptTemplates& templates,
                              const AuxiliaryOptions& options = {});

// Total mapping from free text to a member of `labels` (or `fallback`).
std::string parse_label(const std::string& model_output, const std::vector<std::string>& labels,
                        const std::string& fallback = "neutral");

}  // namespace ecpec
