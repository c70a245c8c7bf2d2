#pragma once

#include "ecpec/evaluation.hpp"
#include "ecpec/params.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

namespace ecpec::testing {

using nlohmann::json;

inline json load_fixture(const std::string& name) {
  std::ifstream in(std::string(ECPEC_FIXTURE_DIR) + "/metrics/" + name);
  if (!in) throw std::runtime_error("missing metric fixture " + name);
  return json::parse(in);
}

inline EmotionLabel label(const json& j) { return *emotion_from_name(j.get<std::string>()); }

// [conversation, emotion utterance, emotion, cause utterance, [start, end] | null]
inline PairRecord record(const json& j) {
  PairRecord r;
  r.conversation = j[0].get<std::string>();
  r.pair.emotion_index = j[1].get<int>();
  r.pair.emotion = label(j[2]);
  r.pair.cause_index = j[3].get<int>();
  if (!j[4].is_null()) r.pair.span = TokenSpan{j[4][0].get<int>(), j[4][1].get<int>()};
  return r;
}

inline std::vector<PairRecord> records(const json& j) {
  std::vector<PairRecord> out;
  for (const auto& r : j) out.push_back(record(r));
  return out;
}

inline PairRecord random_record(Rng& rng) {
  PairRecord r;
  r.conversation = "c" + std::to_string(rng.index(2));
  r.pair.emotion_index = 1 + static_cast<int>(rng.index(3));
  r.pair.cause_index = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(r.pair.emotion_index)));
  r.pair.emotion = rng.bernoulli(0.5) ? EmotionLabel::joy : EmotionLabel::anger;
  if (rng.bernoulli(0.7)) {
    const int s = static_cast<int>(rng.index(3));
    r.pair.span = TokenSpan{s, s + static_cast<int>(rng.index(2))};
  }
  return r;
}

inline std::vector<PairRecord> random_set(Rng& rng) {
  std::vector<PairRecord> out;
  const int n = static_cast<int>(rng.index(7));
  for (int i = 0; i < n; ++i) out.push_back(random_record(rng));
  return out;
}

using Key = std::tuple<std::string, int, int, int>;
inline Key key(const PairRecord& r) {
  return {r.conversation, r.pair.emotion_index, r.pair.cause_index, code_of(r.pair.emotion)};
}

// Counting reference for the ensemble: votes per key (once per set), span
// votes per key, first-seen order for ties.
inline std::vector<PairRecord> counting_oracle(const std::vector<std::vector<PairRecord>>& sets, int quorum) {
  std::map<Key, int> votes;
  std::map<Key, std::vector<std::optional<TokenSpan>>> span_order;
  std::map<Key, std::map<std::optional<TokenSpan>, int>> span_votes;
  std::map<std::pair<Key, std::optional<TokenSpan>>, PairRecord> first_record;
  for (const auto& set : sets) {
    std::set<Key> seen;
    for (const auto& r : set) {
      const Key k = key(r);
      if (seen.count(k)) continue;
      seen.insert(k);
      ++votes[k];
      if (span_votes[k][r.pair.span]++ == 0) {
        span_order[k].push_back(r.pair.span);
        first_record.emplace(std::pair(k, r.pair.span), r);
      }
    }
  }
  std::vector<PairRecord> out;
  for (const auto& [k, v] : votes) {
    if (v < quorum) continue;
    std::optional<TokenSpan> best = span_order[k].front();
    for (const auto& s : span_order[k])
      if (span_votes[k][s] > span_votes[k][best]) best = s;
    out.push_back(first_record.at(std::pair(k, best)));
  }
  return out;
}

}  // namespace ecpec::testing
