#pragma once

// Scoring surfaces (emotion recognition, pair extraction, span extraction),
// majority-vote ensembling and the prediction file format.

#include "ecpec/corpus.hpp"
#include "ecpec/emotion.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace ecpec {

struct ErcScore {
  double weighted_f1 = 0.0;
  double accuracy = 0.0;
  std::map<EmotionLabel, double> per_class_f1;
  std::size_t scored = 0;        // utterances left after filtering
  bool empty_after_filtering = false;
};

// With exclude_neutral, utterances whose gold label is neutral are dropped
// before both metrics; a neutral prediction on what remains is a miss.
ErcScore erc_scores(const std::vector<EmotionLabel>& predicted, const std::vector<EmotionLabel>& gold,
                    bool exclude_neutral = true);

// One pair of one conversation; the unit of every prediction file.
struct PairRecord {
  std::string conversation;
  EmotionCausePair pair;
  std::optional<std::string> span_text;

  bool operator==(const PairRecord&) const = default;
};

std::vector<PairRecord> gold_records(const std::vector<Conversation>& conversations);

struct PairScore {
  double precision = 0.0;
  double recall = 0.0;
  double pos_f1 = 0.0;
};

// True positive: same (conversation, emotion utterance, cause utterance),
// and the same emotion label when strict_label is set.
PairScore cee_pos_f1(const std::vector<PairRecord>& predicted, const std::vector<PairRecord>& gold,
                     bool strict_label = true);

struct SpanScore {
  double weighted_avg_proportional_f1 = 0.0;
  std::map<EmotionLabel, double> per_emotion_f1;
  std::map<EmotionLabel, std::size_t> support;
};

// Per emotion: precision = sum overlap / sum |pred span|, recall = sum overlap
// / sum |gold span|. Overlap is counted on predicted pairs matching a gold
// pair (label included); unmatched predictions only grow the precision
// denominator. Aggregate weighted by gold pair counts. Gold pairs without a
// span are not scored, nor are predictions matched to them; a prediction
// without a span has length zero.
SpanScore span_proportional_f1(const std::vector<PairRecord>& predicted, const std::vector<PairRecord>& gold);

// Keeps a pair present in at least `quorum` sets (default floor(m/2) + 1).
// Identity is (conversation, emotion utterance, emotion, cause utterance);
// the kept span is the most common one among the voters (first seen on ties).
std::vector<PairRecord> majority_vote(const std::vector<std::vector<PairRecord>>& sets,
                                      std::optional<int> quorum = std::nullopt);

// Line-delimited JSON prediction files.
nlohmann::json to_json(const PairRecord& record);
PairRecord pair_record_from_json(const nlohmann::json& j);
void write_predictions(const std::string& path, const std::vector<PairRecord>& records);
std::vector<PairRecord> read_predictions(const std::string& path);

// "U3_joy, U2_\"You made up!\"" (or "U3_joy, U2" without a span).
std::string format_competition(const PairRecord& record);

nlohmann::json to_json(const ErcScore& s);
nlohmann::json to_json(const PairScore& s);
nlohmann::json to_json(const SpanScore& s);

}  // namespace ecpec
