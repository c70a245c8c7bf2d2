#include "ecpec/span.hpp"

#include "ecpec/nn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace ecpec {

using nlohmann::json;

void SpanConfig::validate() const {
  if (beta < 0.0) throw ConfigError("span: beta must be >= 0");
  if (k < 1) throw ConfigError("span: k must be >= 1");
  if (hidden < 1) throw ConfigError("span: hidden must be >= 1");
}

json to_json(const SpanConfig& c) {
  return {{"beta", c.beta}, {"k", c.k}, {"hidden", c.hidden}, {"seed", c.seed}};
}

SpanConfig span_config_from_json(const json& j, SpanConfig c) {
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "beta") c.beta = v.get<double>();
      else if (key == "k") c.k = v.get<int>();
      else if (key == "hidden") c.hidden = v.get<int>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else throw ConfigError("span: unknown key '" + key + "'");
    } catch (const json::exception& e) {
      throw ConfigError("span." + key + ": " + e.what());
    }
  }
  return c;
}

SpanInput build_span_input(const Conversation& c, int target_index, int cause_index, const Vocabulary& vocab,
                           int max_tokens) {
  const int n = static_cast<int>(c.size());
  if (target_index < 1 || target_index > n || cause_index < 1 || cause_index > target_index)
    throw std::out_of_range("span input: bad utterance indices for conversation " + c.id);
  if (max_tokens < 4) throw std::invalid_argument("span input: max_tokens must be >= 4");

  std::vector<int> target = vocab.encode(c.at(target_index).tokens);
  std::vector<int> candidate = vocab.encode(c.at(cause_index).tokens);
  std::vector<int> history_utts;
  for (int i = 1; i < target_index; ++i)
    if (i != cause_index) history_utts.push_back(i);

  int budget = max_tokens - 3;
  auto history_size = [&](std::size_t from) {
    int total = 0;
    for (std::size_t h = from; h < history_utts.size(); ++h)
      total += 1 + static_cast<int>(c.at(history_utts[h]).tokens.size());
    return total;
  };
  std::size_t first = 0;
  while (first < history_utts.size() &&
         static_cast<int>(target.size() + candidate.size()) + history_size(first) > budget)
    ++first;
  const int over = static_cast<int>(target.size() + candidate.size()) - budget;
  if (over > 0) {
    const int cut = std::min(over, static_cast<int>(target.size()));
    target.resize(target.size() - static_cast<std::size_t>(cut));
    if (over > cut) candidate.resize(candidate.size() - static_cast<std::size_t>(over - cut));
  }

  SpanInput in;
  auto push = [&](int token, int segment) {
    in.tokens.push_back(token);
    in.segments.push_back(segment);
  };
  push(Vocabulary::kCls, kTargetSegment);
  for (int t : target) push(t, kTargetSegment);
  push(Vocabulary::kSep, kTargetSegment);
  in.candidate_begin = static_cast<int>(in.tokens.size());
  in.candidate_length = static_cast<int>(candidate.size());
  for (int t : candidate) push(t, kCandidateSegment);
  push(Vocabulary::kSep, kCandidateSegment);
  for (std::size_t h = first; h < history_utts.size(); ++h) {
    push(Vocabulary::kUtt, kHistorySegment);
    for (int t : vocab.encode(c.at(history_utts[h]).tokens)) push(t, kHistorySegment);
  }
  const auto& cand_tokens = c.at(cause_index).tokens;
  in.candidate_tokens.assign(cand_tokens.begin(), cand_tokens.begin() + in.candidate_length);
  return in;
}

// ---------------------------------------------------------------------------

SpanModel::SpanModel(EncoderConfig encoder, SpanConfig config, Vocabulary vocab)
    : encoder_(encoder, "span.encoder"), config_(config), vocab_(std::move(vocab)) {
  config_.validate();
  if (encoder.n_segments < 3) throw ConfigError("span: encoder needs at least 3 segments");
}

SpanModel SpanModel::create(const EncoderConfig& encoder_config, const SpanConfig& config, Vocabulary vocab) {
  EncoderConfig ec = encoder_config;
  ec.vocab_size = vocab.size();
  SpanModel m(ec, config, std::move(vocab));
  Rng rng(config.seed);
  m.encoder_.init(m.params_, rng);
  const int d = ec.dim;
  nn::init_linear(m.params_, "span.start", d, 1, rng);
  nn::init_linear(m.params_, "span.end.fc1", 2 * d, config.hidden, rng);
  nn::init_linear(m.params_, "span.end.fc2", config.hidden, 1, rng);
  nn::init_linear(m.params_, "span.emotion", d, kNumEmotions, rng);
  return m;
}

SpanForward SpanModel::forward(ad::Graph& g, const SpanInput& input) const {
  SpanForward f;
  f.seq = encoder_.forward(g, params_, input.tokens, input.segments);
  f.start_scores = nn::linear(g, params_, "span.start", f.seq);
  f.emotion_logits = nn::linear(g, params_, "span.emotion", ad::slice_rows(f.seq, 0, 1));
  f.start_logits = Matrix::Constant(f.seq.rows(), 1, kMasked);
  for (int i = 0; i < input.candidate_length; ++i)
    f.start_logits(input.candidate_begin + i, 0) = f.start_scores.value()(input.candidate_begin + i, 0);
  return f;
}

ad::Var SpanModel::end_scores(ad::Graph& g, ad::Var seq, int start_position) const {
  std::vector<int> rows(static_cast<std::size_t>(seq.rows()), start_position);
  ad::Var start_rep = ad::gather_rows(seq, rows);
  ad::Var h = ad::tanh(nn::linear(g, params_, "span.end.fc1", ad::concat_cols(start_rep, seq)));
  return nn::linear(g, params_, "span.end.fc2", h);
}

Matrix SpanModel::end_logits(ad::Graph& g, ad::Var seq, const SpanInput& input, int start_position) const {
  if (start_position < input.candidate_begin || start_position >= input.candidate_begin + input.candidate_length)
    throw std::out_of_range("span: start outside the candidate region");
  ad::Var scores = end_scores(g, seq, start_position);
  Matrix out = Matrix::Constant(seq.rows(), 1, kMasked);
  for (int j = start_position; j < input.candidate_begin + input.candidate_length; ++j) out(j, 0) = scores.value()(j, 0);
  return out;
}

ad::Var SpanModel::loss(ad::Graph& g, const SpanInput& input, TokenSpan gold, EmotionLabel emotion) const {
  if (gold.first < 0 || gold.second < gold.first || gold.second >= input.candidate_length)
    throw std::out_of_range("span: gold span outside the candidate region");
  SpanForward f = forward(g, input);
  const auto n = f.seq.rows();
  const int begin = input.candidate_begin;
  const int end = begin + input.candidate_length;
  Mask start_allowed = Mask::Constant(1, n, false);
  start_allowed.block(0, begin, 1, input.candidate_length).setConstant(true);
  const int start_pos = begin + gold.first;
  Mask end_allowed = Mask::Constant(1, n, false);
  end_allowed.block(0, start_pos, 1, end - start_pos).setConstant(true);

  ad::Var l = ad::cross_entropy(ad::transpose(f.start_scores), start_pos, &start_allowed);
  l = ad::add(l, ad::cross_entropy(ad::transpose(end_scores(g, f.seq, start_pos)), begin + gold.second, &end_allowed));
  if (config_.beta > 0.0) l = ad::add(l, ad::scale(ad::cross_entropy(f.emotion_logits, code_of(emotion)), config_.beta));
  return l;
}

json SpanModel::to_json() const {
  return {{"format", "ecpec-span/1"},
          {"encoder", ecpec::to_json(encoder_.config())},
          {"span", ecpec::to_json(config_)},
          {"vocab", vocab_.to_json()},
          {"params", params_.to_json()}};
}

SpanModel SpanModel::from_json(const json& j) {
  if (j.value("format", "") != "ecpec-span/1") throw ParameterError("not a span checkpoint");
  SpanModel m = create(encoder_config_from_json(j.at("encoder")), span_config_from_json(j.at("span")),
                       Vocabulary::from_json(j.at("vocab")));
  Manifest manifest = m.params_.manifest();
  m.params_ = ParameterStore::from_json(j.at("params"), &manifest);
  return m;
}

void SpanModel::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParameterError("cannot write " + path);
  out << to_json().dump() << '\n';
}

SpanModel SpanModel::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParameterError("cannot read " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ParameterError(path + ": " + e.what());
  }
  return from_json(j);
}

// ---------------------------------------------------------------------------

namespace {

std::vector<int> top_k_indices(const std::vector<double>& logits, int from, int k) {
  std::vector<int> idx;
  for (int i = from; i < static_cast<int>(logits.size()); ++i)
    if (std::isfinite(logits[static_cast<std::size_t>(i)])) idx.push_back(i);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return logits[static_cast<std::size_t>(a)] > logits[static_cast<std::size_t>(b)];
  });
  if (static_cast<int>(idx.size()) > k) idx.resize(static_cast<std::size_t>(k));
  return idx;
}

bool better(const SpanPrediction& a, const SpanPrediction& b) {
  if (a.score != b.score) return a.score > b.score;
  return std::pair(a.start, a.end) < std::pair(b.start, b.end);
}

}  // namespace

SpanPrediction decode_topk(const std::vector<double>& start_logits, const EndLogitsFn& end_for_start, int k) {
  if (k < 1) throw std::invalid_argument("decode: k must be >= 1");
  bool found = false;
  SpanPrediction best;
  for (int s : top_k_indices(start_logits, 0, k)) {
    const auto ends = end_for_start(s);
    for (int e : top_k_indices(ends, s, k)) {
      SpanPrediction p{s, e, start_logits[static_cast<std::size_t>(s)] + ends[static_cast<std::size_t>(e)]};
      if (!found || better(p, best)) best = p;
      found = true;
    }
  }
  if (!found) throw std::invalid_argument("decode: no valid start/end pair");
  return best;
}

SpanPrediction decode_brute_force(const std::vector<double>& start_logits, const EndLogitsFn& end_for_start) {
  bool found = false;
  SpanPrediction best;
  for (int s = 0; s < static_cast<int>(start_logits.size()); ++s) {
    if (!std::isfinite(start_logits[static_cast<std::size_t>(s)])) continue;
    const auto ends = end_for_start(s);
    for (int e = s; e < static_cast<int>(ends.size()); ++e) {
      if (!std::isfinite(ends[static_cast<std::size_t>(e)])) continue;
      const double score = start_logits[static_cast<std::size_t>(s)] + ends[static_cast<std::size_t>(e)];
      if (!found || score > best.score) best = SpanPrediction{s, e, score};
      found = true;
    }
  }
  if (!found) throw std::invalid_argument("decode: no valid start/end pair");
  return best;
}

namespace {

template <class Decode>
SpanPrediction decode_with_model(const SpanModel& model, const SpanInput& input, Decode decode) {
  if (input.candidate_length < 1) throw std::invalid_argument("span: empty candidate region");
  ad::Graph g;
  SpanForward f = model.forward(g, input);
  const int begin = input.candidate_begin;
  std::vector<double> starts(static_cast<std::size_t>(input.candidate_length));
  for (int i = 0; i < input.candidate_length; ++i) starts[static_cast<std::size_t>(i)] = f.start_logits(begin + i, 0);
  EndLogitsFn ends = [&](int s) {
    Matrix m = model.end_logits(g, f.seq, input, begin + s);
    std::vector<double> out(static_cast<std::size_t>(input.candidate_length));
    for (int i = 0; i < input.candidate_length; ++i) out[static_cast<std::size_t>(i)] = m(begin + i, 0);
    return out;
  };
  return decode(starts, ends);
}

}  // namespace

SpanPrediction infer_span_topk(const SpanModel& model, const SpanInput& input, int k) {
  return decode_with_model(model, input,
                           [k](const std::vector<double>& s, const EndLogitsFn& e) { return decode_topk(s, e, k); });
}

SpanPrediction brute_force_span(const SpanModel& model, const SpanInput& input) {
  return decode_with_model(model, input, decode_brute_force);
}

std::vector<SpanExample> span_examples(const SpanModel& model, const std::vector<Conversation>& conversations) {
  std::vector<SpanExample> out;
  for (const auto& c : conversations)
    for (const auto& p : c.pairs) {
      if (!p.span) continue;
      SpanInput in = model.input_for(c, p.emotion_index, p.cause_index);
      if (p.span->second >= in.candidate_length) continue;
      out.push_back(SpanExample{std::move(in), *p.span, p.emotion});
    }
  return out;
}

SpanAccuracy span_accuracy(const SpanModel& model, const std::vector<SpanExample>& examples) {
  SpanAccuracy acc;
  if (examples.empty()) return acc;
  double exact = 0, overlap = 0, pred_len = 0, gold_len = 0;
  for (const auto& ex : examples) {
    SpanPrediction p = infer_span_topk(model, ex.input, model.config().k);
    if (p.start == ex.gold.first && p.end == ex.gold.second) exact += 1;
    overlap += std::max(0, std::min(p.end, ex.gold.second) - std::max(p.start, ex.gold.first) + 1);
    pred_len += p.end - p.start + 1;
    gold_len += ex.gold.second - ex.gold.first + 1;
  }
  acc.exact_match = exact / static_cast<double>(examples.size());
  const double precision = overlap / pred_len, recall = overlap / gold_len;
  acc.proportional_f1 = precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
  return acc;
}

std::vector<SpanEpochRecord> train_cse(SpanModel& model, const std::vector<Conversation>& train,
                                       const std::vector<Conversation>& dev, const TrainConfig& config,
                                       const SpanEpochCallback& on_epoch) {
  const auto train_examples = span_examples(model, train);
  const auto dev_examples = span_examples(model, dev);
  if (train_examples.empty()) throw std::invalid_argument("train_cse: no gold spans in the training set");
  Adam adam(AdamConfig{config.lr, 0.9, 0.999, 1e-8, config.clip_norm, config.weight_decay});
  Rng rng(config.seed);
  std::vector<std::size_t> order(train_examples.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<SpanEpochRecord> history;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      GradStore grads;
      for (std::size_t k = start; k < end; ++k) {
        const SpanExample& ex = train_examples[order[k]];
        ad::Graph g;
        ad::Var loss = model.loss(g, ex.input, ex.gold, ex.emotion);
        if (!std::isfinite(loss.scalar()))
          throw DivergenceError("train_cse: non-finite loss at epoch " + std::to_string(epoch));
        epoch_loss += loss.scalar();
        g.backward(loss);
        g.collect(grads);
      }
      grads.scale(1.0 / static_cast<double>(end - start));
      adam.step(model.params(), grads);
    }
    SpanAccuracy tr = span_accuracy(model, train_examples);
    SpanAccuracy dv = span_accuracy(model, dev_examples);
    SpanEpochRecord rec{epoch, epoch_loss / static_cast<double>(train_examples.size()), tr.exact_match,
                        tr.proportional_f1, dv.exact_match, dv.proportional_f1};
    history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return history;
}

}  // namespace ecpec
