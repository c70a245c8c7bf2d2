#include "doctest.h"

#include "ecpec/corpus.hpp"
#include "ecpec/taxonomy.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace ecpec;

namespace {

const std::string kFixtures = std::string(ECPEC_FIXTURE_DIR) + "/prompts";

Conversation golden_conversation() { return load_dataset(kFixtures + "/conversation.json").at(0); }

nlohmann::json samples_to_json(const std::vector<PromptSample>& samples) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& s : samples)
    out.push_back({{"task", prompt_task_name(s.task)},
                   {"target_index", s.target_index},
                   {"history_size", s.history_size},
                   {"gold_answer", s.gold_answer},
                   {"rendered_prompt", s.rendered_prompt}});
  return out;
}

// Set ECPEC_UPDATE_GOLDEN=1 to rewrite a fixture after a reviewed template change.
void check_golden(const std::string& name, const nlohmann::json& actual) {
  const std::string path = kFixtures + "/" + name;
  if (std::getenv("ECPEC_UPDATE_GOLDEN")) {
    std::ofstream out(path, std::ios::binary);
    out << actual.dump(2) << "\n";
  }
  std::ifstream in(path, std::ios::binary);
  REQUIRE_MESSAGE(in.good(), "missing fixture " << path);
  std::stringstream ss;
  ss << in.rdbuf();
  CHECK(ss.str() == actual.dump(2) + "\n");
}

Conversation long_conversation(int n) {
  Conversation c;
  c.id = "long";
  for (int i = 1; i <= n; ++i) {
    Utterance u;
    u.index = i;
    u.speaker = i % 2 ? "Monica" : "Chandler";
    u.text = "line number " + std::to_string(i);
    u.tokens = tokenize(u.text);
    u.emotion = EmotionLabel::neutral;
    c.utterances.push_back(u);
  }
  return c;
}

int count_occurrences(const std::string& text, const std::string& needle) {
  int n = 0;
  for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + needle.size())) ++n;
  return n;
}

}  // namespace

TEST_CASE("speaker normalization") {
  auto c = golden_conversation();
  const std::set<std::string> protagonists{"Ross", "Rachel", "Monica"};
  const auto n = normalize_speakers(c, protagonists);
  CHECK(n.at(1).speaker == "Ross");
  CHECK(n.at(2).speaker == "Others");
  CHECK(n.at(3).speaker == "Rachel");
  CHECK(n.at(4).speaker.empty());
  CHECK(normalize_speakers(n, protagonists) == n);

  const std::set<std::string> everyone{"Ross", "Rachel", "Waiter"};
  CHECK(normalize_speakers(c, everyone) == c);
}

TEST_CASE("five tasks per utterance") {
  const auto c = golden_conversation();
  const auto templates = PromptTemplates::load_default();
  const auto samples = build_auxiliary_samples(c, templates);
  CHECK(samples.size() == 5 * c.size());
  for (std::size_t u = 0; u < c.size(); ++u)
    for (std::size_t t = 0; t < 5; ++t) CHECK(samples[u * 5 + t].task == kAllPromptTasks[t]);

  Conversation three = c;
  three.utterances.resize(3);
  three.pairs.clear();
  CHECK(build_auxiliary_samples(three, templates).size() == 15);
}

TEST_CASE("gold answers of each task") {
  const auto c = golden_conversation();
  const auto samples = build_auxiliary_samples(c, PromptTemplates::load_default());
  auto gold = [&](int index, PromptTask task) {
    for (const auto& s : samples)
      if (s.target_index == index && s.task == task) return s.gold_answer;
    return std::string("?");
  };
  CHECK(gold(1, PromptTask::erc) == "joy");
  CHECK(gold(1, PromptTask::sub_label) == "positive");
  CHECK(gold(1, PromptTask::positive_rec) == "joy");
  CHECK(gold(1, PromptTask::negative_rec) == "other");
  CHECK(gold(1, PromptTask::speaker_id) == "Ross");
  CHECK(gold(2, PromptTask::sub_label) == "neutral");
  CHECK(gold(2, PromptTask::positive_rec) == "other");
  CHECK(gold(4, PromptTask::negative_rec) == "disgust");
  CHECK(gold(4, PromptTask::positive_rec) == "other");
  CHECK(gold(4, PromptTask::speaker_id) == kUnknownSpeaker);
}

TEST_CASE("history is capped at the window") {
  const auto c = long_conversation(21);
  const auto templates = PromptTemplates::load_default();
  const auto s = build_erc_prompt(c, 21, templates);
  CHECK(s.history_size == 12);
  CHECK(count_occurrences(s.rendered_prompt, "line number") == 13);  // 12 history lines + target
  CHECK(s.rendered_prompt.find("line number 8\"") == std::string::npos);
  CHECK(s.rendered_prompt.find("line number 9\"") != std::string::npos);
  CHECK(build_erc_prompt(c, 1, templates).history_size == 0);
  CHECK(build_erc_prompt(c, 5, templates).history_size == 4);
  CHECK(build_erc_prompt(c, 21, templates, {.window = 3}).history_size == 3);
  CHECK_THROWS_AS(build_erc_prompt(c, 21, templates, {.window = 0}), ConfigError);
}

TEST_CASE("every prompt has exactly one block of each kind") {
  const auto c = long_conversation(15);
  for (const auto& s : build_auxiliary_samples(c, PromptTemplates::load_default())) {
    CHECK(count_occurrences(s.rendered_prompt, "### Job description") == 1);
    CHECK(count_occurrences(s.rendered_prompt, "### Historical content") == 1);
    CHECK(count_occurrences(s.rendered_prompt, "### Label statement") == 1);
  }
}

TEST_CASE("emotion prompts never reveal the target's gold emotion") {
  auto c = golden_conversation();
  const auto templates = PromptTemplates::load_default();
  const auto labels = label_set(PromptTask::erc);
  for (int i = 1; i <= static_cast<int>(c.size()); ++i) {
    const auto base = build_erc_prompt(c, i, templates).rendered_prompt;
    for (auto e : kAllEmotions) {
      Conversation altered = c;
      altered.utterances[static_cast<std::size_t>(i - 1)].emotion = e;
      CHECK(build_erc_prompt(altered, i, templates).rendered_prompt == base);
    }
  }
}

TEST_CASE("prompt rendering matches the golden fixtures") {
  const auto c = golden_conversation();
  const auto templates = PromptTemplates::load_default();
  check_golden("all_tasks.json", samples_to_json(build_auxiliary_samples(c, templates)));
  check_golden("video_window2.json",
               samples_to_json(build_auxiliary_samples(c, templates, {.window = 2, .include_video = true})));
}

TEST_CASE("rendering is deterministic and versioned") {
  const auto templates = PromptTemplates::load_default();
  CHECK(templates.version() == "erc-template/v1");
  const auto c = golden_conversation();
  const auto a = samples_to_json(build_auxiliary_samples(c, templates));
  const auto b = samples_to_json(build_auxiliary_samples(c, PromptTemplates::load(default_template_dir())));
  CHECK(a == b);
}

TEST_CASE("label sets of the auxiliary tasks") {
  using V = std::vector<std::string>;
  CHECK(label_set(PromptTask::erc).size() == 7);
  CHECK(label_set(PromptTask::sub_label) == V{"neutral", "positive", "negative"});
  CHECK(label_set(PromptTask::positive_rec) == V{"surprise", "joy", "other"});
  CHECK(label_set(PromptTask::negative_rec) == V{"fear", "sadness", "disgust", "anger", "other"});
}

TEST_CASE("label parsing is total") {
  const auto labels = label_set(PromptTask::erc);
  CHECK(parse_label("joy", labels) == "joy");
  CHECK(parse_label("  JOY ", labels) == "joy");
  CHECK(parse_label("The emotion is Anger.", labels) == "anger");
  CHECK(parse_label("qwerty", labels) == "neutral");
  CHECK(parse_label("", labels) == "neutral");
  CHECK(parse_label("qwerty", labels, "joy") == "joy");
}

TEST_CASE("placeholder filling leaves unknown keys alone") {
  CHECK(fill_placeholders("{a} and {b} and {a}", {{"a", "x"}}) == "x and {b} and x");
  CHECK(fill_placeholders("{a}", {{"a", "{a}"}}) == "{a}");
}
