#include "ecpec/taxonomy.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#ifndef ECPEC_TEMPLATE_DIR
#define ECPEC_TEMPLATE_DIR "templates/v1"
#endif

namespace ecpec {

Conversation normalize_speakers(const Conversation& conversation, const std::set<std::string>& protagonists) {
  Conversation out = conversation;
  for (auto& u : out.utterances)
    if (!u.speaker.empty() && !protagonists.count(u.speaker)) u.speaker = kOthersSpeaker;
  return out;
}

std::string_view prompt_task_name(PromptTask task) {
  switch (task) {
    case PromptTask::erc: return "erc";
    case PromptTask::speaker_id: return "speaker_id";
    case PromptTask::sub_label: return "sub_label";
    case PromptTask::positive_rec: return "positive_rec";
    case PromptTask::negative_rec: return "negative_rec";
  }
  return "unknown";
}

std::vector<std::string> label_set(PromptTask task) {
  switch (task) {
    case PromptTask::erc: {
      std::vector<std::string> out;
      for (EmotionLabel e : kAllEmotions) out.emplace_back(emotion_name(e));
      return out;
    }
    case PromptTask::sub_label:
      return {"neutral", "positive", "negative"};
    case PromptTask::positive_rec:
      return {"surprise", "joy", kOtherAnswer};
    case PromptTask::negative_rec:
      return {"fear", "sadness", "disgust", "anger", kOtherAnswer};
    case PromptTask::speaker_id:
      return {};
  }
  return {};
}

// ---------------------------------------------------------------------------

std::string fill_placeholders(std::string text, const std::vector<std::pair<std::string, std::string>>& values) {
  std::string out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] == '{') {
      auto close = text.find('}', i);
      if (close != std::string::npos) {
        std::string key = text.substr(i + 1, close - i - 1);
        auto it = std::find_if(values.begin(), values.end(), [&](const auto& kv) { return kv.first == key; });
        if (it != values.end()) {
          out += it->second;
          i = close + 1;
          continue;
        }
      }
    }
    out.push_back(text[i++]);
  }
  return out;
}

namespace {

std::string read_template(const std::string& dir, const std::string& name) {
  std::ifstream in(dir + "/" + name, std::ios::binary);
  if (!in) throw ConfigError("template file missing: " + dir + "/" + name);
  std::stringstream ss;
  ss << in.rdbuf();
  std::string s = ss.str();
  while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
  return s;
}

std::string join(const std::vector<std::string>& items, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += sep;
    out += items[i];
  }
  return out;
}

std::string display_speaker(const Utterance& u) { return u.speaker.empty() ? kUnknownSpeaker : u.speaker; }

std::string render_line(const Utterance& u) { return display_speaker(u) + ": \"" + u.text + "\""; }

std::string gold_for(PromptTask task, const Utterance& u) {
  const EmotionLabel e = u.emotion.value_or(EmotionLabel::neutral);
  switch (task) {
    case PromptTask::erc: return std::string(emotion_name(e));
    case PromptTask::speaker_id: return display_speaker(u);
    case PromptTask::sub_label: return std::string(coarse_name(coarse_of(e)));
    case PromptTask::positive_rec:
      return (e == EmotionLabel::surprise || e == EmotionLabel::joy) ? std::string(emotion_name(e)) : kOtherAnswer;
    case PromptTask::negative_rec:
      return coarse_of(e) == CoarseLabel::negative ? std::string(emotion_name(e)) : kOtherAnswer;
  }
  return {};
}

}  // namespace

std::string default_template_dir() { return ECPEC_TEMPLATE_DIR; }

PromptTemplates PromptTemplates::load(const std::string& directory) {
  PromptTemplates t;
  t.version_ = read_template(directory, "VERSION");
  t.layout_ = read_template(directory, "layout.txt");
  t.job_emotion_ = read_template(directory, "job_emotion.txt");
  t.job_speaker_ = read_template(directory, "job_speaker.txt");
  t.label_emotion_ = read_template(directory, "label_emotion.txt");
  t.label_speaker_ = read_template(directory, "label_speaker.txt");
  return t;
}

PromptTemplates PromptTemplates::load_default() { return load(default_template_dir()); }

std::string PromptTemplates::render(PromptTask task, const std::string& history, const std::string& video,
                                    const std::string& target_speaker, const std::string& target_text,
                                    const std::vector<std::string>& labels) const {
  const bool speaker_task = task == PromptTask::speaker_id;
  std::string statement = fill_placeholders(speaker_task ? label_speaker_ : label_emotion_,
                                            {{"target", target_speaker + ": \"" + target_text + "\""},
                                             {"target_text", target_text},
                                             {"labels", join(labels, ", ")}});
  return fill_placeholders(layout_, {{"job_description", speaker_task ? job_speaker_ : job_emotion_},
                                     {"history", history},
                                     {"video", video},
                                     {"label_statement", statement}}) +
         "\n";
}

static PromptSample build_prompt(const Conversation& c, int target_index, PromptTask task, const PromptTemplates& templates,
                          const AuxiliaryOptions& options, const std::vector<std::string>& speakers) {
  const Utterance& target = c.at(target_index);
  const int first = std::max(1, target_index - options.window);
  std::vector<std::string> lines;
  for (int i = first; i < target_index; ++i) lines.push_back(render_line(c.at(i)));
  std::string history = lines.empty() ? "(no earlier turns)" : join(lines, "\n");

  std::string video;
  if (options.include_video && target.video_description) {
    const auto& v = *target.video_description;
    video = "\nBackground: " + v.background + "\nMovement: " + v.movement + "\nPersonal state: " + v.personal_state;
  }

  PromptSample s;
  s.task = task;
  s.conversation_id = c.id;
  s.target_index = target_index;
  s.history_size = static_cast<int>(lines.size());
  s.gold_answer = gold_for(task, target);
  s.rendered_prompt = templates.render(task, history, video, display_speaker(target), target.text,
                                       task == PromptTask::speaker_id ? speakers : label_set(task));
  return s;
}

namespace {

std::vector<std::string> speaker_inventory(const Conversation& c) {
  std::vector<std::string> out;
  for (const auto& u : c.utterances) {
    std::string s = display_speaker(u);
    if (std::find(out.begin(), out.end(), s) == out.end()) out.push_back(s);
  }
  return out;
}

void check_window(const AuxiliaryOptions& options) {
  if (options.window < 1) throw ConfigError("history window must be >= 1");
}

}  // namespace

std::vector<PromptSample> build_auxiliary_samples(const Conversation& c, const PromptTemplates& templates,
                                                  const AuxiliaryOptions& options) {
  check_window(options);
  const auto speakers = speaker_inventory(c);
  std::vector<PromptSample> out;
  for (const auto& u : c.utterances)
    for (PromptTask task : options.tasks) out.push_back(build_prompt(c, u.index, task, templates, options, speakers));
  return out;
}

PromptSample build_erc_prompt(const Conversation& c, int target_index, const PromptTemplates& templates,
                              const AuxiliaryOptions& options) {
  check_window(options);
  return build_prompt(c, target_index, PromptTask::erc, templates, options, {});
}

// ---------------------------------------------------------------------------

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::string parse_label(const std::string& model_output, const std::vector<std::string>& labels,
                        const std::string& fallback) {
  const std::string out = lower(trim(model_output));
  for (const auto& l : labels)
    if (lower(l) == out) return l;
  for (const auto& l : labels)
    if (!l.empty() && out.find(lower(l)) != std::string::npos) return l;
  return fallback;
}

}  // namespace ecpec
