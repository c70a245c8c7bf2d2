#include "ecpec/corpus.hpp"

#include "ecpec/params.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

namespace ecpec {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Features

namespace {
constexpr std::array<std::pair<FeatureSource, std::string_view>, 5> kSourceNames = {{
    {FeatureSource::gemaps, "gemaps"},
    {FeatureSource::compare, "compare"},
    {FeatureSource::face_identity, "face_identity"},
    {FeatureSource::face_emotion, "face_emotion"},
    {FeatureSource::custom, "custom"},
}};
}  // namespace

std::string_view feature_source_name(FeatureSource source) {
  for (const auto& [s, n] : kSourceNames)
    if (s == source) return n;
  return "custom";
}

FeatureSource feature_source_from_name(std::string_view name) {
  for (const auto& [s, n] : kSourceNames)
    if (n == name) return s;
  throw DatasetError("unknown feature source '" + std::string(name) + "'");
}

void FeatureVector::validate() const {
  if (source == FeatureSource::gemaps && values.size() != kGemapsDim)
    throw DatasetError("gemaps feature vector must have " + std::to_string(kGemapsDim) + " values, got " +
                       std::to_string(values.size()));
  if (source == FeatureSource::compare && values.size() != kCompareDim)
    throw DatasetError("compare feature vector must have " + std::to_string(kCompareDim) + " values, got " +
                       std::to_string(values.size()));
  for (double v : values)
    if (!std::isfinite(v)) throw DatasetError("non-finite value in feature vector");
}

// ---------------------------------------------------------------------------
// Tokenization

std::vector<std::string> tokenize(std::string_view text, const TokenizerOptions& options) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) tokens.push_back(std::move(current));
    current.clear();
  };
  for (char raw : text) {
    unsigned char c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      flush();
    } else if (c < 128 && std::ispunct(c)) {
      flush();
      tokens.emplace_back(1, raw);
    } else {
      current.push_back(options.lowercase && c < 128 ? static_cast<char>(std::tolower(c)) : raw);
    }
  }
  flush();
  return tokens;
}

std::string join_tokens(const std::vector<std::string>& tokens, int begin, int end) {
  std::string out;
  for (int i = begin; i <= end && i < static_cast<int>(tokens.size()); ++i) {
    if (i > begin) out.push_back(' ');
    out += tokens[static_cast<std::size_t>(i)];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Conversation

const Utterance& Conversation::at(int index) const {
  if (index < 1 || index > static_cast<int>(utterances.size()))
    throw std::out_of_range("conversation " + id + ": no utterance " + std::to_string(index));
  return utterances[static_cast<std::size_t>(index - 1)];
}

std::vector<EmotionLabel> Conversation::gold_emotions() const {
  std::vector<EmotionLabel> out;
  out.reserve(utterances.size());
  for (const auto& u : utterances) out.push_back(u.emotion.value_or(EmotionLabel::neutral));
  return out;
}

void validate(const Conversation& c) {
  auto fail = [&](const std::string& what) { throw DatasetError("conversation " + c.id + ": " + what); };
  for (std::size_t i = 0; i < c.utterances.size(); ++i) {
    const Utterance& u = c.utterances[i];
    if (u.index != static_cast<int>(i) + 1) fail("utterance indices must be consecutive from 1");
    if (u.tokens != tokenize(u.text)) fail("utterance " + std::to_string(u.index) + " tokens do not match text");
    if (u.audio_features) u.audio_features->validate();
    if (u.vision_features) u.vision_features->validate();
  }
  const int n = static_cast<int>(c.utterances.size());
  for (const auto& p : c.pairs) {
    if (p.emotion_index < 1 || p.emotion_index > n)
      fail("pair references missing emotion utterance " + std::to_string(p.emotion_index));
    if (p.cause_index < 1 || p.cause_index > n)
      fail("pair references missing cause utterance " + std::to_string(p.cause_index));
    if (p.emotion == EmotionLabel::neutral) fail("pair emotion must not be neutral");
    if (p.span) {
      int len = static_cast<int>(c.at(p.cause_index).tokens.size());
      if (p.span->first < 0 || p.span->first > p.span->second || p.span->second >= len)
        fail("span out of bounds for utterance " + std::to_string(p.cause_index));
    }
  }
}

// ---------------------------------------------------------------------------
// Native JSON

namespace {

json feature_to_json(const FeatureVector& f) {
  return {{"source", feature_source_name(f.source)}, {"values", f.values}};
}

FeatureVector feature_from_json(const json& j) {
  FeatureVector f;
  f.source = feature_source_from_name(j.value("source", "custom"));
  f.values = j.at("values").get<std::vector<double>>();
  return f;
}

EmotionLabel label_from_json(const json& j, const std::string& where) {
  auto label = emotion_from_name(j.get<std::string>());
  if (!label) throw DatasetError(where + ": unknown emotion '" + j.get<std::string>() + "'");
  return *label;
}

}  // namespace

json to_json(const Conversation& c) {
  json utts = json::array();
  for (const auto& u : c.utterances) {
    json ju = {{"index", u.index}, {"speaker", u.speaker}, {"text", u.text}};
    ju["emotion"] = u.emotion ? json(emotion_name(*u.emotion)) : json(nullptr);
    if (u.audio_features) ju["audio_features"] = feature_to_json(*u.audio_features);
    if (u.vision_features) ju["vision_features"] = feature_to_json(*u.vision_features);
    if (u.video_description)
      ju["video_description"] = {{"background", u.video_description->background},
                                 {"movement", u.video_description->movement},
                                 {"personal_state", u.video_description->personal_state}};
    utts.push_back(std::move(ju));
  }
  json pairs = json::array();
  for (const auto& p : c.pairs) {
    json jp = {{"emotion_index", p.emotion_index}, {"emotion", emotion_name(p.emotion)}, {"cause_index", p.cause_index}};
    jp["span"] = p.span ? json::array({p.span->first, p.span->second}) : json(nullptr);
    pairs.push_back(std::move(jp));
  }
  return {{"id", c.id}, {"utterances", std::move(utts)}, {"pairs", std::move(pairs)}};
}

Conversation conversation_from_json(const json& j) {
  Conversation c;
  try {
    c.id = j.at("id").is_string() ? j.at("id").get<std::string>() : j.at("id").dump();
    int next = 1;
    for (const auto& ju : j.at("utterances")) {
      Utterance u;
      u.index = next++;  // re-indexed 1-based regardless of the stored value
      u.speaker = ju.value("speaker", "");
      u.text = ju.at("text").get<std::string>();
      u.tokens = tokenize(u.text);
      if (ju.contains("emotion") && !ju["emotion"].is_null()) u.emotion = label_from_json(ju["emotion"], c.id);
      if (ju.contains("audio_features") && !ju["audio_features"].is_null())
        u.audio_features = feature_from_json(ju["audio_features"]);
      if (ju.contains("vision_features") && !ju["vision_features"].is_null())
        u.vision_features = feature_from_json(ju["vision_features"]);
      if (ju.contains("video_description") && !ju["video_description"].is_null()) {
        const auto& v = ju["video_description"];
        u.video_description =
            VideoDescription{v.value("background", ""), v.value("movement", ""), v.value("personal_state", "")};
      }
      c.utterances.push_back(std::move(u));
    }
    if (j.contains("pairs")) {
      for (const auto& jp : j.at("pairs")) {
        EmotionCausePair p;
        p.emotion_index = jp.at("emotion_index").get<int>();
        p.emotion = label_from_json(jp.at("emotion"), c.id);
        p.cause_index = jp.at("cause_index").get<int>();
        if (jp.contains("span") && !jp["span"].is_null())
          p.span = TokenSpan{jp["span"].at(0).get<int>(), jp["span"].at(1).get<int>()};
        c.pairs.push_back(p);
      }
    }
  } catch (const json::exception& e) {
    throw DatasetError("conversation " + c.id + ": " + e.what());
  }
  validate(c);
  return c;
}

namespace {

json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError(path + ": cannot open");
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::parse_error& e) {
    throw DatasetError(path + ": " + e.what());
  }
}

std::pair<int, std::string> split_ecf_ref(const std::string& ref) {
  auto us = ref.find('_');
  std::string head = ref.substr(0, us);
  int idx = 0;
  try {
    idx = std::stoi(head);
  } catch (const std::exception&) {
    throw DatasetError("malformed ECF reference '" + ref + "'");
  }
  return {idx, us == std::string::npos ? std::string() : ref.substr(us + 1)};
}

std::optional<TokenSpan> locate(const std::vector<std::string>& hay, const std::vector<std::string>& needle) {
  if (needle.empty() || needle.size() > hay.size()) return std::nullopt;
  auto it = std::search(hay.begin(), hay.end(), needle.begin(), needle.end());
  if (it == hay.end()) return std::nullopt;
  int start = static_cast<int>(it - hay.begin());
  return TokenSpan{start, start + static_cast<int>(needle.size()) - 1};
}

}  // namespace

std::vector<Conversation> conversations_from_ecf(const json& j) {
  if (!j.is_array()) throw DatasetError("ECF document must be a list of conversations");
  std::vector<Conversation> out;
  for (const auto& jc : j) {
    Conversation c;
    const json& cid = jc.contains("conversation_ID") ? jc["conversation_ID"] : jc.value("id", json(out.size() + 1));
    c.id = cid.is_string() ? cid.get<std::string>() : cid.dump();
    int next = 1;
    for (const auto& ju : jc.value("conversation", json::array())) {
      Utterance u;
      u.index = next++;
      u.speaker = ju.value("speaker", "");
      u.text = ju.value("text", "");
      u.tokens = tokenize(u.text);
      if (ju.contains("emotion") && ju["emotion"].is_string()) u.emotion = emotion_from_name(ju["emotion"].get<std::string>());
      c.utterances.push_back(std::move(u));
    }
    for (const auto& jp : jc.value("emotion-cause_pairs", json::array())) {
      if (!jp.is_array() || jp.size() < 2) continue;
      auto [eidx, ename] = split_ecf_ref(jp[0].get<std::string>());
      auto [cidx, ctext] = split_ecf_ref(jp[1].get<std::string>());
      auto label = emotion_from_name(ename);
      if (!label) throw DatasetError("conversation " + c.id + ": unknown emotion '" + ename + "'");
      EmotionCausePair p{eidx, *label, cidx, std::nullopt};
      if (!ctext.empty() && cidx >= 1 && cidx <= static_cast<int>(c.utterances.size()))
        p.span = locate(c.at(cidx).tokens, tokenize(ctext));
      c.pairs.push_back(p);
    }
    validate(c);
    out.push_back(std::move(c));
  }
  return out;
}

std::vector<Conversation> load_dataset(const std::string& path, DatasetFormat format) {
  json j = read_json_file(path);
  if (format == DatasetFormat::ecf_json) return conversations_from_ecf(j);
  if (!j.is_array()) throw DatasetError(path + ": expected a list of conversations");
  std::vector<Conversation> out;
  out.reserve(j.size());
  for (const auto& jc : j) out.push_back(conversation_from_json(jc));
  return out;
}

void save_dataset(const std::string& path, const std::vector<Conversation>& conversations) {
  json j = json::array();
  for (const auto& c : conversations) j.push_back(to_json(c));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DatasetError(path + ": cannot write");
  out << j.dump(1) << '\n';
}

// ---------------------------------------------------------------------------
// Synthetic corpus

namespace {

const std::vector<std::string> kFiller = {
    "we",     "should", "go",    "to",     "coffee", "house",  "later", "maybe",   "you",    "know",
    "that",   "thing",  "about", "my",     "friend", "said",   "it",    "was",     "just",   "okay",
    "i",      "think",  "they",  "are",    "coming", "over",   "after", "work",    "what",   "did",
    "he",     "say",    "on",    "phone",  "well",   "so",     "then",  "she",     "left",   "here",
    "this",   "morning", "again", "really", "right", "now",    "look",  "at",      "them",   "hey"};

const std::array<std::vector<std::string>, kNumEmotions> kCueWords = {{
    {},
    {"whoa", "wow", "seriously"},
    {"scared", "afraid", "terrified"},
    {"sad", "miss", "heartbroken"},
    {"happy", "great", "yay"},
    {"gross", "ew", "yuck"},
    {"angry", "furious", "hate"},
}};

const std::array<std::vector<std::vector<std::string>>, kNumEmotions> kTriggers = {{
    {},
    {{"surprise", "party"}, {"secret", "engagement", "ring"}, {"unexpected", "visitor"}},
    {{"strange", "noise", "downstairs"}, {"spider", "nest"}, {"audit", "letter"}},
    {{"grandma", "passed"}, {"lost", "job"}, {"breakup", "text"}},
    {{"got", "promoted"}, {"won", "lottery", "ticket"}, {"made", "up"}},
    {{"spoiled", "milk"}, {"moldy", "sandwich"}, {"toenail", "clippings"}},
    {{"broke", "vase"}, {"stole", "parking", "spot"}, {"ate", "leftovers"}},
}};

const std::vector<std::string> kProtagonists = {"Ross", "Rachel", "Monica", "Chandler", "Joey", "Phoebe"};
const std::vector<std::string> kSupporting = {"Janice", "Gunther", "Waiter", "Mike", "Carol", "Emily"};

// Non-neutral label weights, roughly the reference corpus proportions.
const std::array<double, kNumEmotions> kEmotionWeights = {0.0, 13.0, 3.0, 8.0, 17.0, 3.0, 11.0};

EmotionLabel sample_emotion(Rng& rng) {
  double total = std::accumulate(kEmotionWeights.begin(), kEmotionWeights.end(), 0.0);
  double r = rng.uniform() * total;
  for (int i = 1; i < kNumEmotions; ++i) {
    r -= kEmotionWeights[static_cast<std::size_t>(i)];
    if (r < 0) return static_cast<EmotionLabel>(i);
  }
  return EmotionLabel::anger;
}

int uniform_int(Rng& rng, int lo, int hi) { return lo + static_cast<int>(rng.index(static_cast<std::size_t>(hi - lo + 1))); }

struct Planted {
  EmotionLabel emotion;
  std::size_t phrase;
};

}  // namespace

const std::vector<std::vector<std::string>>& trigger_phrases(EmotionLabel label) {
  return kTriggers[static_cast<std::size_t>(label)];
}

bool is_trigger_token(std::string_view token) {
  for (const auto& phrases : kTriggers)
    for (const auto& p : phrases)
      if (std::find(p.begin(), p.end(), token) != p.end()) return true;
  return false;
}

void SyntheticParams::validate() const {
  if (min_utterances < 1 || max_utterances < min_utterances)
    throw ConfigError("synthetic: need 1 <= min_utterances <= max_utterances");
  if (min_speakers < 1 || max_speakers < min_speakers) throw ConfigError("synthetic: need 1 <= min_speakers <= max_speakers");
  if (max_speakers > static_cast<int>(kProtagonists.size() + kSupporting.size()))
    throw ConfigError("synthetic: too many speakers");
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!prob(p_emotion) || !prob(p_empty_speaker) || !prob(p_cue) || !prob(p_video))
    throw ConfigError("synthetic: probabilities must lie in [0, 1]");
  if (window < 0) throw ConfigError("synthetic: window must be >= 0");
}

SyntheticParams synthetic_params_from_json(const json& j) {
  SyntheticParams p;
  if (!j.is_object()) throw ConfigError("synthetic params must be an object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "min_utterances") p.min_utterances = v.get<int>();
      else if (key == "max_utterances") p.max_utterances = v.get<int>();
      else if (key == "min_speakers") p.min_speakers = v.get<int>();
      else if (key == "max_speakers") p.max_speakers = v.get<int>();
      else if (key == "p_emotion") p.p_emotion = v.get<double>();
      else if (key == "window") p.window = v.get<int>();
      else if (key == "p_empty_speaker") p.p_empty_speaker = v.get<double>();
      else if (key == "p_cue") p.p_cue = v.get<double>();
      else if (key == "p_video") p.p_video = v.get<double>();
      else if (key == "audio") p.audio = v.get<bool>();
      else throw ConfigError("synthetic: unknown parameter '" + key + "'");
    } catch (const json::exception& e) {
      throw ConfigError("synthetic." + key + ": " + e.what());
    }
  }
  p.validate();
  return p;
}

json to_json(const SyntheticParams& p) {
  return {{"min_utterances", p.min_utterances}, {"max_utterances", p.max_utterances},
          {"min_speakers", p.min_speakers},     {"max_speakers", p.max_speakers},
          {"p_emotion", p.p_emotion},           {"window", p.window},
          {"p_empty_speaker", p.p_empty_speaker}, {"p_cue", p.p_cue},
          {"p_video", p.p_video},               {"audio", p.audio}};
}

std::vector<Conversation> generate_synthetic(std::uint64_t seed, int n_conversations, const SyntheticParams& params) {
  if (n_conversations < 1) throw ConfigError("generate_synthetic: n_conversations must be >= 1");
  params.validate();
  Rng rng(seed);
  std::vector<Conversation> out;
  out.reserve(static_cast<std::size_t>(n_conversations));

  for (int ci = 0; ci < n_conversations; ++ci) {
    Conversation c;
    c.id = "syn" + std::to_string(seed) + "_" + std::to_string(ci + 1);
    const int n = uniform_int(rng, params.min_utterances, params.max_utterances);
    const int k = uniform_int(rng, params.min_speakers, params.max_speakers);

    // Mostly protagonists, occasionally a supporting character.
    std::vector<std::string> pool;
    while (static_cast<int>(pool.size()) < k) {
      const auto& src = rng.bernoulli(0.8) ? kProtagonists : kSupporting;
      const std::string& name = src[rng.index(src.size())];
      if (std::find(pool.begin(), pool.end(), name) == pool.end()) pool.push_back(name);
    }

    std::vector<EmotionLabel> labels(static_cast<std::size_t>(n), EmotionLabel::neutral);
    std::vector<std::optional<Planted>> planted(static_cast<std::size_t>(n));
    for (int t = 0; t < n; ++t) {
      if (!rng.bernoulli(params.p_emotion)) continue;
      EmotionLabel e = sample_emotion(rng);
      const int lo = std::max(0, t - params.window);
      bool covered = false;
      std::vector<int> free;
      for (int j = lo; j <= t; ++j) {
        if (planted[static_cast<std::size_t>(j)]) covered = covered || planted[static_cast<std::size_t>(j)]->emotion == e;
        else free.push_back(j);
      }
      if (!covered) {
        if (free.empty()) continue;  // no room for a cause: stays neutral
        int j = free[rng.index(free.size())];
        planted[static_cast<std::size_t>(j)] = Planted{e, rng.index(trigger_phrases(e).size())};
      }
      labels[static_cast<std::size_t>(t)] = e;
    }

    std::vector<std::optional<TokenSpan>> spans(static_cast<std::size_t>(n));
    static const std::array<std::string, 3> kPunct = {".", "!", "?"};
    for (int t = 0; t < n; ++t) {
      Utterance u;
      u.index = t + 1;
      u.speaker = rng.bernoulli(params.p_empty_speaker) ? std::string() : pool[rng.index(pool.size())];
      std::vector<std::string> words;
      const int len = uniform_int(rng, 3, 7);
      for (int w = 0; w < len; ++w) words.push_back(kFiller[rng.index(kFiller.size())]);
      const EmotionLabel e = labels[static_cast<std::size_t>(t)];
      if (e != EmotionLabel::neutral && rng.bernoulli(params.p_cue)) {
        const auto& cues = kCueWords[static_cast<std::size_t>(e)];
        words.insert(words.begin() + static_cast<long>(rng.index(words.size() + 1)), cues[rng.index(cues.size())]);
      }
      if (const auto& p = planted[static_cast<std::size_t>(t)]) {
        const auto& phrase = trigger_phrases(p->emotion)[p->phrase];
        int at = static_cast<int>(rng.index(words.size() + 1));
        words.insert(words.begin() + at, phrase.begin(), phrase.end());
        spans[static_cast<std::size_t>(t)] = TokenSpan{at, at + static_cast<int>(phrase.size()) - 1};
      }
      std::string text;
      for (std::size_t w = 0; w < words.size(); ++w) {
        if (w > 0) text.push_back(' ');
        text += words[w];
      }
      text += kPunct[rng.index(kPunct.size())];
      u.text = std::move(text);
      u.tokens = tokenize(u.text);
      u.emotion = e;
      if (params.p_video > 0 && rng.bernoulli(params.p_video)) {
        u.video_description = VideoDescription{
            "a living room with a couch",
            (u.speaker.empty() ? std::string("someone") : u.speaker) + " gestures while talking",
            e == EmotionLabel::neutral ? "calm face" : std::string("looks ") + std::string(emotion_name(e))};
      }
      if (params.audio) {
        FeatureVector f{FeatureSource::gemaps, std::vector<double>(kGemapsDim)};
        for (double& v : f.values) v = rng.normal();
        f.values[static_cast<std::size_t>(code_of(e))] += 2.0;
        u.audio_features = std::move(f);
      }
      c.utterances.push_back(std::move(u));
    }

    for (int t = 0; t < n; ++t) {
      const EmotionLabel e = labels[static_cast<std::size_t>(t)];
      if (e == EmotionLabel::neutral) continue;
      for (int j = 0; j <= t; ++j) {
        const auto& p = planted[static_cast<std::size_t>(j)];
        if (p && p->emotion == e) c.pairs.push_back(EmotionCausePair{t + 1, e, j + 1, spans[static_cast<std::size_t>(j)]});
      }
    }
    validate(c);
    out.push_back(std::move(c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splitting

std::array<double, 3> reference_split_ratios() {
  double total = kReferenceSplitCounts[0] + kReferenceSplitCounts[1] + kReferenceSplitCounts[2];
  return {kReferenceSplitCounts[0] / total, kReferenceSplitCounts[1] / total, kReferenceSplitCounts[2] / total};
}

DatasetSplit split_dataset(const std::vector<Conversation>& conversations, std::array<double, 3> ratios,
                           std::uint64_t seed) {
  if (conversations.empty()) throw DatasetError("split_dataset: empty input");
  for (double r : ratios)
    if (r < 0) throw ConfigError("split_dataset: ratios must be non-negative");
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) throw ConfigError("split_dataset: ratios must sum to 1");

  std::vector<std::size_t> order(conversations.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);

  const auto n = static_cast<double>(conversations.size());
  std::size_t n_train = std::min(conversations.size(), static_cast<std::size_t>(std::llround(ratios[0] * n)));
  std::size_t n_dev =
      std::min(conversations.size() - n_train, static_cast<std::size_t>(std::llround(ratios[1] * n)));
  // Rounding leftovers never land in a split whose ratio is zero.
  if (ratios[2] == 0.0) {
    if (ratios[1] == 0.0) n_train = conversations.size();
    else n_dev = conversations.size() - n_train;
  }

  DatasetSplit split;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const Conversation& c = conversations[order[i]];
    if (i < n_train) split.train.push_back(c);
    else if (i < n_train + n_dev) split.dev.push_back(c);
    else split.test.push_back(c);
  }
  return split;
}

}  // namespace ecpec
