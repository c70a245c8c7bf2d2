#include "ecpec/evaluation.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <stdexcept>
#include <tuple>

namespace ecpec {

using nlohmann::json;

namespace {

double f1_of(double p, double r) { return p + r > 0 ? 2 * p * r / (p + r) : 0.0; }

double ratio(double num, double den) { return den > 0 ? num / den : 0.0; }

using PairKey = std::tuple<std::string, int, int, int>;  // conv, emotion utt, cause utt, label (-1 when ignored)

PairKey key_of(const PairRecord& r, bool with_label) {
  return {r.conversation, r.pair.emotion_index, r.pair.cause_index, with_label ? code_of(r.pair.emotion) : -1};
}

int span_length(const std::optional<TokenSpan>& s) { return s ? s->second - s->first + 1 : 0; }

int span_overlap(const TokenSpan& a, const TokenSpan& b) {
  return std::max(0, std::min(a.second, b.second) - std::max(a.first, b.first) + 1);
}

}  // namespace

ErcScore erc_scores(const std::vector<EmotionLabel>& predicted, const std::vector<EmotionLabel>& gold,
                    bool exclude_neutral) {
  if (predicted.size() != gold.size()) throw std::invalid_argument("erc_scores: length mismatch");
  std::map<EmotionLabel, double> tp, fp, fn;
  std::map<EmotionLabel, std::size_t> support;
  ErcScore s;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (exclude_neutral && gold[i] == EmotionLabel::neutral) continue;
    ++s.scored;
    ++support[gold[i]];
    if (predicted[i] == gold[i]) {
      ++correct;
      tp[gold[i]] += 1;
    } else {
      fp[predicted[i]] += 1;
      fn[gold[i]] += 1;
    }
  }
  if (s.scored == 0) {
    s.empty_after_filtering = true;
    return s;
  }
  double weighted = 0.0;
  for (const auto& [label, n] : support) {
    const double f1 = f1_of(ratio(tp[label], tp[label] + fp[label]), ratio(tp[label], tp[label] + fn[label]));
    s.per_class_f1[label] = f1;
    weighted += static_cast<double>(n) * f1;
  }
  s.weighted_f1 = weighted / static_cast<double>(s.scored);
  s.accuracy = static_cast<double>(correct) / static_cast<double>(s.scored);
  return s;
}

std::vector<PairRecord> gold_records(const std::vector<Conversation>& conversations) {
  std::vector<PairRecord> out;
  for (const auto& c : conversations)
    for (const auto& p : c.pairs) {
      PairRecord r{c.id, p, std::nullopt};
      if (p.span && p.cause_index >= 1 && p.cause_index <= static_cast<int>(c.size()))
        r.span_text = join_tokens(c.at(p.cause_index).tokens, p.span->first, p.span->second);
      out.push_back(std::move(r));
    }
  return out;
}

PairScore cee_pos_f1(const std::vector<PairRecord>& predicted, const std::vector<PairRecord>& gold,
                     bool strict_label) {
  std::set<PairKey> pred_keys, gold_keys;
  for (const auto& r : predicted) pred_keys.insert(key_of(r, strict_label));
  for (const auto& r : gold) gold_keys.insert(key_of(r, strict_label));
  std::size_t tp = 0;
  for (const auto& k : pred_keys) tp += gold_keys.count(k);
  PairScore s;
  s.precision = ratio(static_cast<double>(tp), static_cast<double>(pred_keys.size()));
  s.recall = ratio(static_cast<double>(tp), static_cast<double>(gold_keys.size()));
  s.pos_f1 = f1_of(s.precision, s.recall);
  return s;
}

SpanScore span_proportional_f1(const std::vector<PairRecord>& predicted, const std::vector<PairRecord>& gold) {
  std::map<PairKey, std::optional<TokenSpan>> gold_spans;
  for (const auto& r : gold) gold_spans.emplace(key_of(r, true), r.pair.span);

  struct Sums {
    double overlap = 0, pred_len = 0, gold_len = 0;
  };
  std::map<EmotionLabel, Sums> sums;
  SpanScore s;
  for (const auto& [key, span] : gold_spans) {
    if (!span) continue;
    auto label = emotion_from_code(std::get<3>(key));
    sums[label].gold_len += span_length(span);
    ++s.support[label];
  }
  std::set<PairKey> seen;
  for (const auto& r : predicted) {
    const PairKey key = key_of(r, true);
    if (!seen.insert(key).second) continue;
    auto it = gold_spans.find(key);
    if (it != gold_spans.end() && !it->second) continue;
    Sums& sum = sums[r.pair.emotion];
    sum.pred_len += span_length(r.pair.span);
    if (it != gold_spans.end() && r.pair.span) sum.overlap += span_overlap(*r.pair.span, *it->second);
  }
  double weighted = 0.0;
  std::size_t total = 0;
  for (const auto& [label, sum] : sums) {
    const double f1 = f1_of(ratio(sum.overlap, sum.pred_len), ratio(sum.overlap, sum.gold_len));
    s.per_emotion_f1[label] = f1;
    auto sup = s.support.find(label);
    if (sup == s.support.end()) continue;
    weighted += static_cast<double>(sup->second) * f1;
    total += sup->second;
  }
  s.weighted_avg_proportional_f1 = total ? weighted / static_cast<double>(total) : 0.0;
  return s;
}

std::vector<PairRecord> majority_vote(const std::vector<std::vector<PairRecord>>& sets, std::optional<int> quorum) {
  if (sets.empty()) throw std::invalid_argument("majority_vote: at least one prediction set required");
  const int need = quorum.value_or(static_cast<int>(sets.size()) / 2 + 1);
  if (need < 1) throw std::invalid_argument("majority_vote: quorum must be >= 1");

  struct Tally {
    int votes = 0;
    std::vector<std::pair<PairRecord, int>> spans;  // distinct spans in first-seen order, with counts
  };
  std::map<PairKey, Tally> tally;
  for (const auto& set : sets) {
    std::set<PairKey> voted;
    for (const auto& r : set) {
      const PairKey key = key_of(r, true);
      if (!voted.insert(key).second) continue;
      Tally& t = tally[key];
      ++t.votes;
      auto it = std::find_if(t.spans.begin(), t.spans.end(),
                             [&](const auto& e) { return e.first.pair.span == r.pair.span; });
      if (it == t.spans.end()) t.spans.emplace_back(r, 1);
      else ++it->second;
    }
  }
  std::vector<PairRecord> out;
  for (const auto& [key, t] : tally) {
    if (t.votes < need) continue;
    auto best = t.spans.begin();
    for (auto it = t.spans.begin(); it != t.spans.end(); ++it)
      if (it->second > best->second) best = it;
    out.push_back(best->first);
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::string utt_ref(int index) { return "U" + std::to_string(index); }

int parse_utt_ref(const json& j, const char* field) {
  if (j.is_number_integer()) return j.get<int>();
  const auto s = j.get<std::string>();
  std::size_t pos = (!s.empty() && (s[0] == 'U' || s[0] == 'u')) ? 1 : 0;
  try {
    std::size_t used = 0;
    int v = std::stoi(s.substr(pos), &used);
    if (used != s.size() - pos) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DatasetError(std::string("prediction record: bad ") + field + " '" + s + "'");
  }
}

}  // namespace

json to_json(const PairRecord& r) {
  json j = {{"conv", r.conversation},
            {"emotion_utt", utt_ref(r.pair.emotion_index)},
            {"emotion", std::string(emotion_name(r.pair.emotion))},
            {"cause_utt", utt_ref(r.pair.cause_index)}};
  j["span_tokens"] = r.pair.span ? json::array({r.pair.span->first, r.pair.span->second}) : json(nullptr);
  j["span_text"] = r.span_text ? json(*r.span_text) : json(nullptr);
  return j;
}

PairRecord pair_record_from_json(const json& j) {
  try {
    PairRecord r;
    r.conversation = j.at("conv").is_string() ? j.at("conv").get<std::string>() : j.at("conv").dump();
    r.pair.emotion_index = parse_utt_ref(j.at("emotion_utt"), "emotion_utt");
    r.pair.cause_index = parse_utt_ref(j.at("cause_utt"), "cause_utt");
    auto label = emotion_from_name(j.at("emotion").get<std::string>());
    if (!label) throw DatasetError("prediction record: unknown emotion " + j.at("emotion").dump());
    r.pair.emotion = *label;
    if (j.contains("span_tokens") && !j["span_tokens"].is_null()) {
      auto v = j["span_tokens"].get<std::vector<int>>();
      if (v.size() != 2 || v[0] < 0 || v[1] < v[0]) throw DatasetError("prediction record: bad span_tokens");
      r.pair.span = TokenSpan{v[0], v[1]};
    }
    if (j.contains("span_text") && !j["span_text"].is_null()) r.span_text = j["span_text"].get<std::string>();
    return r;
  } catch (const json::exception& e) {
    throw DatasetError(std::string("prediction record: ") + e.what());
  }
}

void write_predictions(const std::string& path, const std::vector<PairRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DatasetError("cannot write " + path);
  for (const auto& r : records) out << to_json(r).dump() << '\n';
}

std::vector<PairRecord> read_predictions(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot read " + path);
  std::vector<PairRecord> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(pair_record_from_json(json::parse(line)));
    } catch (const json::parse_error& e) {
      throw DatasetError(path + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const DatasetError& e) {
      throw DatasetError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::string format_competition(const PairRecord& r) {
  std::string s = utt_ref(r.pair.emotion_index) + "_" + std::string(emotion_name(r.pair.emotion)) + ", " +
                  utt_ref(r.pair.cause_index);
  if (r.span_text) s += "_\"" + *r.span_text + "\"";
  return s;
}

json to_json(const ErcScore& s) {
  json per = json::object();
  for (const auto& [label, f1] : s.per_class_f1) per[std::string(emotion_name(label))] = f1;
  return {{"weighted_f1", s.weighted_f1},
          {"accuracy", s.accuracy},
          {"per_class_f1", per},
          {"scored", s.scored},
          {"empty_after_filtering", s.empty_after_filtering}};
}

json to_json(const PairScore& s) {
  return {{"precision", s.precision}, {"recall", s.recall}, {"pos_f1", s.pos_f1}};
}

json to_json(const SpanScore& s) {
  json per = json::object(), sup = json::object();
  for (const auto& [label, f1] : s.per_emotion_f1) per[std::string(emotion_name(label))] = f1;
  for (const auto& [label, n] : s.support) sup[std::string(emotion_name(label))] = n;
  return {{"weighted_avg_proportional_f1", s.weighted_avg_proportional_f1}, {"per_emotion_f1", per}, {"support", sup}};
}

}  // namespace ecpec
