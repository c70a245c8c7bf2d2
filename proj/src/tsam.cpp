#include "ecpec/tsam.hpp"

#include "ecpec/evaluation.hpp"
#include "ecpec/nn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

namespace ecpec {

using nlohmann::json;

void TsamConfig::validate() const {
  if (layers < 1) throw ConfigError("tsam: layers must be >= 1");
  if (n_heads < 1 || dim < 1 || hidden < 1) throw ConfigError("tsam: sizes must be positive");
  if (dim % n_heads != 0) throw ConfigError("tsam: dim must be divisible by n_heads");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("tsam: threshold must lie in (0, 1)");
  if (lambda_aux < 0.0) throw ConfigError("tsam: lambda_aux must be >= 0");
  if (dice_eps < 0.0) throw ConfigError("tsam: dice_eps must be >= 0");
  if (modality_dim < 0) throw ConfigError("tsam: modality_dim must be >= 0");
}

json to_json(const TsamConfig& c) {
  return {{"layers", c.layers},         {"n_heads", c.n_heads},     {"dim", c.dim},
          {"hidden", c.hidden},         {"threshold", c.threshold}, {"lambda_aux", c.lambda_aux},
          {"dice_eps", c.dice_eps},     {"modality_dim", c.modality_dim}, {"emotion_distance", c.emotion_distance}, {"seed", c.seed}};
}

TsamConfig tsam_config_from_json(const json& j, TsamConfig c) {
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "layers") c.layers = v.get<int>();
      else if (key == "n_heads") c.n_heads = v.get<int>();
      else if (key == "dim") c.dim = v.get<int>();
      else if (key == "hidden") c.hidden = v.get<int>();
      else if (key == "threshold") c.threshold = v.get<double>();
      else if (key == "lambda_aux") c.lambda_aux = v.get<double>();
      else if (key == "dice_eps") c.dice_eps = v.get<double>();
      else if (key == "modality_dim") c.modality_dim = v.get<int>();
      else if (key == "emotion_distance") c.emotion_distance = v.get<bool>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else throw ConfigError("tsam: unknown key '" + key + "'");
    } catch (const json::exception& e) {
      throw ConfigError("tsam." + key + ": " + e.what());
    }
  }
  return c;
}

json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs}, {"lr", c.lr}, {"batch_size", c.batch_size}, {"seed", c.seed}, {"clip_norm", c.clip_norm}, {"weight_decay", c.weight_decay}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "epochs") c.epochs = v.get<int>();
      else if (key == "lr") c.lr = v.get<double>();
      else if (key == "batch_size") c.batch_size = v.get<int>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "clip_norm") c.clip_norm = v.get<double>();
      else if (key == "weight_decay") c.weight_decay = v.get<double>();
      else throw ConfigError("train: unknown key '" + key + "'");
    } catch (const json::exception& e) {
      throw ConfigError("train." + key + ": " + e.what());
    }
  }
  if (c.epochs < 0 || c.batch_size < 1 || c.lr <= 0) throw ConfigError("train: invalid epochs/batch_size/lr");
  return c;
}

// ---------------------------------------------------------------------------

SpeakerGraph build_speaker_graph(const Conversation& c, int upto) {
  if (upto < 0 || upto > static_cast<int>(c.size())) throw std::out_of_range("build_speaker_graph: upto out of range");
  SpeakerGraph g{Mask::Constant(upto, upto, false), Mask::Constant(upto, upto, false),
                 std::vector<bool>(static_cast<std::size_t>(upto))};
  for (int i = 0; i < upto; ++i) g.known[static_cast<std::size_t>(i)] = !c.at(i + 1).speaker.empty();
  for (int i = 0; i < upto; ++i)
    for (int j = 0; j < upto; ++j) {
      if (!g.known[static_cast<std::size_t>(i)] || !g.known[static_cast<std::size_t>(j)]) continue;
      const bool same = c.at(i + 1).speaker == c.at(j + 1).speaker;
      g.intra(i, j) = same;
      g.inter(i, j) = !same;
    }
  return g;
}

ad::Var emotion_attention(ad::Graph& g, const ParameterStore& store, const std::string& prefix, ad::Var utterances,
                          ad::Var emotion_reps, int n_heads, const std::vector<bool>* allowed_keys,
                          std::vector<Matrix>* weights) {
  if (!allowed_keys) return nn::multi_head_attention(g, store, prefix, utterances, emotion_reps, n_heads, nullptr, weights);
  Mask allowed(utterances.rows(), emotion_reps.rows());
  for (Eigen::Index i = 0; i < allowed.rows(); ++i)
    for (Eigen::Index j = 0; j < allowed.cols(); ++j) allowed(i, j) = (*allowed_keys)[static_cast<std::size_t>(j)];
  return nn::multi_head_attention(g, store, prefix, utterances, emotion_reps, n_heads, &allowed, weights);
}

ad::Var emotion_attention(ad::Graph& g, const ParameterStore& store, const std::string& prefix, ad::Var utterances,
                          const std::vector<EmotionLabel>& labels, const std::string& table_name, int n_heads,
                          std::vector<Matrix>* weights) {
  if (static_cast<Eigen::Index>(labels.size()) != utterances.rows())
    throw std::invalid_argument("emotion_attention: one label per utterance required");
  std::vector<int> codes;
  for (EmotionLabel l : labels) {
    int code = code_of(l);
    if (code < 0 || code >= kNumEmotions) throw std::invalid_argument("emotion_attention: unknown label code");
    codes.push_back(code);
  }
  ad::Var reps = ad::gather_rows(g.parameter(store, table_name), codes);
  return emotion_attention(g, store, prefix, utterances, reps, n_heads, nullptr, weights);
}

ad::Var speaker_attention(ad::Graph& g, const ParameterStore& store, const std::string& prefix, ad::Var utterances,
                          const SpeakerGraph& graph, std::vector<Matrix>* weights) {
  const auto t = utterances.rows();
  if (graph.intra.rows() != t || graph.inter.rows() != t) throw std::invalid_argument("speaker_attention: graph size mismatch");
  if (weights) weights->clear();
  ad::Var total;
  for (const auto& [name, mask] : {std::pair<const char*, const Mask*>{"intra", &graph.intra}, {"inter", &graph.inter}}) {
    const std::string p = prefix + "." + name;
    ad::Var z = ad::matmul(utterances, g.parameter(store, p + ".w"));
    ad::Var src = ad::matmul(z, g.parameter(store, p + ".a_src"));
    ad::Var dst = ad::matmul(z, g.parameter(store, p + ".a_dst"));
    ad::Var alpha = ad::softmax_rows(ad::relu(ad::outer_sum(src, dst)), *mask);
    if (weights) weights->push_back(alpha.value());
    ad::Var out = ad::matmul(alpha, z);
    total = total.valid() ? ad::add(total, out) : out;
  }
  return total;
}

Interaction masked_interaction(ad::Graph& g, const ParameterStore& store, const std::string& prefix, ad::Var emotion,
                               ad::Var speaker, const std::vector<bool>& known, std::vector<Matrix>* weights) {
  const auto t = emotion.rows();
  if (speaker.rows() != t || static_cast<Eigen::Index>(known.size()) != t)
    throw std::invalid_argument("masked_interaction: shape mismatch");
  Mask allowed(t, t);
  for (Eigen::Index i = 0; i < t; ++i)
    for (Eigen::Index j = 0; j < t; ++j) allowed(i, j) = known[static_cast<std::size_t>(j)];
  ad::Var s1 = ad::matmul_nt(ad::matmul(emotion, g.parameter(store, prefix + ".w1")), speaker);
  ad::Var s2 = ad::matmul_nt(ad::matmul(speaker, g.parameter(store, prefix + ".w2")), emotion);
  ad::Var a1 = ad::softmax_rows(s1, allowed);
  ad::Var a2 = ad::softmax_rows(s2, allowed);
  if (weights) *weights = {a1.value(), a2.value()};
  return Interaction{ad::matmul(a1, speaker), ad::matmul(a2, emotion)};
}

ad::Var cause_logits(ad::Graph& g, const ParameterStore& store, const std::string& prefix, ad::Var emotion,
                     ad::Var speaker) {
  ad::Var h = ad::tanh(nn::linear(g, store, prefix + ".fc1", ad::concat_cols(speaker, emotion)));
  return nn::linear(g, store, prefix + ".fc2", h);
}

std::vector<PairPrediction> predict_causes(const Matrix& logits, int target_index, double threshold) {
  if (target_index < 1 || target_index > logits.rows()) throw std::out_of_range("predict_causes: bad target index");
  std::vector<PairPrediction> out;
  for (int j = 1; j <= target_index; ++j) {
    const double z = logits(j - 1, 0);
    const double p = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    out.push_back(PairPrediction{target_index, j, p, p >= threshold});
  }
  return out;
}

ad::Var dice_loss(ad::Graph& g, ad::Var probabilities, const Matrix& gold, double eps) {
  if (probabilities.rows() == 0) throw std::invalid_argument("dice_loss: empty batch");
  if (gold.rows() != probabilities.rows() || gold.cols() != probabilities.cols())
    throw std::invalid_argument("dice_loss: shape mismatch");
  std::vector<int> present;
  for (Eigen::Index c = 0; c < gold.cols(); ++c)
    if (gold.col(c).sum() > 0) present.push_back(static_cast<int>(c));
  if (present.empty()) throw std::invalid_argument("dice_loss: no class present in gold");
  ad::Var gv = g.constant(gold);
  ad::Var inter = ad::col_sums(ad::mul(probabilities, gv));
  ad::Var p2 = ad::col_sums(ad::mul(probabilities, probabilities));
  Matrix g2 = gold.cwiseProduct(gold).colwise().sum();
  ad::Var num = ad::add_scalar(ad::scale(inter, 2.0), eps);
  ad::Var den = ad::add_scalar(ad::add(p2, g.constant(g2)), eps);
  ad::Var ratio = ad::select_cols(ad::div(num, den), present);
  return ad::add_scalar(ad::scale(ad::mean(ratio), -1.0), 1.0);
}

double dice_loss(const Matrix& probabilities, const Matrix& gold, double eps) {
  ad::Graph g;
  return dice_loss(g, g.constant(probabilities), gold, eps).scalar();
}

// ---------------------------------------------------------------------------

TsamModel::TsamModel(EncoderConfig encoder, TsamConfig config, Vocabulary vocab)
    : encoder_(encoder, "encoder"), config_(config), vocab_(std::move(vocab)) {
  config_.validate();
  if (encoder.dim != config.dim) throw ConfigError("tsam: dim must equal encoder dim");
}

TsamModel TsamModel::create(const EncoderConfig& encoder_config, const TsamConfig& config, Vocabulary vocab) {
  EncoderConfig ec = encoder_config;
  ec.vocab_size = vocab.size();
  TsamModel m(ec, config, std::move(vocab));
  Rng rng(config.seed);
  m.encoder_.init(m.params_, rng);
  const int d = config.dim;
  m.params_.init_normal("tsam.emotion_table", kNumEmotions, d, 1.0, rng);
  if (config.modality_dim > 0) nn::init_linear(m.params_, "tsam.fuse", d + config.modality_dim, d, rng);
  for (int l = 0; l < config.layers; ++l) {
    const std::string p = "tsam.l" + std::to_string(l);
    nn::init_attention(m.params_, p + ".ean", d, rng);
    for (const char* r : {".san.intra", ".san.inter"}) {
      m.params_.init_xavier(p + r + ".w", d, d, rng);
      m.params_.init_xavier(p + r + ".a_src", d, 1, rng);
      m.params_.init_xavier(p + r + ".a_dst", d, 1, rng);
    }
    m.params_.init_normal(p + ".min.w1", d, d, 1.0 / d, rng);
    m.params_.init_normal(p + ".min.w2", d, d, 1.0 / d, rng);
    nn::init_layer_norm(m.params_, p + ".ln_e", d);
    nn::init_layer_norm(m.params_, p + ".ln_s", d);
  }
  nn::init_linear(m.params_, "tsam.fc1", 2 * d, config.hidden, rng);
  nn::init_linear(m.params_, "tsam.fc2", config.hidden, 1, rng);
  nn::init_linear(m.params_, "tsam.aux", d, kNumEmotions, rng);
  if (config.emotion_distance) m.params_.init_normal("tsam.emotion_distance", ec.n_segments, d, 1.0, rng);
  return m;
}

TsamModel::Forward TsamModel::forward(ad::Graph& g, const Conversation& c, int upto,
                                      const std::vector<EmotionLabel>& labels, const Matrix* modality) const {
  if (static_cast<int>(labels.size()) < upto) throw std::invalid_argument("tsam: missing emotion labels");
  EncodedUtterances enc = encode_utterances(g, encoder_, params_, vocab_, c, upto);
  ad::Var u = enc.H;
  if (config_.modality_dim > 0) {
    if (!modality || modality->rows() < upto || modality->cols() != config_.modality_dim)
      throw std::invalid_argument("tsam: modality features required with shape upto x modality_dim");
    u = nn::linear(g, params_, "tsam.fuse", ad::concat_cols(u, g.constant(modality->topRows(upto))));
  }

  SpeakerGraph graph = build_speaker_graph(c, upto);
  for (int i = 0; i < upto; ++i) {
    if (enc.valid_mask[static_cast<std::size_t>(i)]) continue;
    graph.known[static_cast<std::size_t>(i)] = false;
    graph.intra.row(i).setConstant(false);
    graph.intra.col(i).setConstant(false);
    graph.inter.row(i).setConstant(false);
    graph.inter.col(i).setConstant(false);
  }

  std::vector<int> codes;
  for (int i = 0; i < upto; ++i) codes.push_back(code_of(labels[static_cast<std::size_t>(i)]));
  ad::Var e = ad::gather_rows(g.parameter(params_, "tsam.emotion_table"), codes);
  if (config_.emotion_distance) {
    std::vector<int> distances;
    for (int i = 0; i < upto; ++i) distances.push_back(std::min(upto - 1 - i, encoder_.config().n_segments - 1));
    e = ad::add(e, ad::gather_rows(g.parameter(params_, "tsam.emotion_distance"), distances));
  }

  for (int l = 0; l < config_.layers; ++l) {
    const std::string p = "tsam.l" + std::to_string(l);
    ad::Var he = emotion_attention(g, params_, p + ".ean", u, e, config_.n_heads, &enc.valid_mask);
    ad::Var hs = speaker_attention(g, params_, p + ".san", u, graph);
    Interaction mi = masked_interaction(g, params_, p + ".min", he, hs, graph.known);
    e = nn::layer_norm(g, params_, p + ".ln_e", ad::add(ad::add(e, he), mi.emotion));
    u = nn::layer_norm(g, params_, p + ".ln_s", ad::add(ad::add(u, hs), mi.speaker));
  }
  Forward f;
  f.logits = cause_logits(g, params_, "tsam", e, u);
  f.emotion_logits = nn::linear(g, params_, "tsam.aux", enc.H);
  f.valid_mask = std::move(enc.valid_mask);
  return f;
}

namespace {

std::set<std::pair<int, int>> gold_pair_set(const Conversation& c) {
  std::set<std::pair<int, int>> out;
  for (const auto& p : c.pairs) out.emplace(p.emotion_index, p.cause_index);
  return out;
}

}  // namespace

ad::Var TsamModel::loss(ad::Graph& g, const Conversation& c, const std::vector<EmotionLabel>& labels,
                        const Matrix* modality) const {
  const auto gold = gold_pair_set(c);
  ad::Var total;
  for (int t = 1; t <= static_cast<int>(c.size()); ++t) {
    if (labels[static_cast<std::size_t>(t - 1)] == EmotionLabel::neutral) continue;
    Forward f = forward(g, c, t, labels, modality);
    std::vector<double> targets;
    for (int j = 1; j <= t; ++j) targets.push_back(gold.count({t, j}) ? 1.0 : 0.0);
    ad::Var term = ad::bce_with_logits(f.logits, targets);
    if (config_.lambda_aux > 0.0) {
      std::vector<int> rows;
      for (int i = 0; i < t; ++i)
        if (f.valid_mask[static_cast<std::size_t>(i)]) rows.push_back(i);
      Matrix onehot = Matrix::Zero(static_cast<Eigen::Index>(rows.size()), kNumEmotions);
      for (std::size_t r = 0; r < rows.size(); ++r)
        onehot(static_cast<Eigen::Index>(r), code_of(labels[static_cast<std::size_t>(rows[r])])) = 1.0;
      ad::Var probs = ad::softmax_rows(ad::gather_rows(f.emotion_logits, rows));
      term = ad::add(term, ad::scale(dice_loss(g, probs, onehot, config_.dice_eps), config_.lambda_aux));
    }
    total = total.valid() ? ad::add(total, term) : term;
  }
  return total.valid() ? total : g.constant(Matrix::Zero(1, 1));
}

double TsamModel::pair_loss(const Conversation& c, const std::vector<EmotionLabel>& labels) const {
  const auto gold = gold_pair_set(c);
  double total = 0.0;
  for (int t = 1; t <= static_cast<int>(c.size()); ++t) {
    if (labels[static_cast<std::size_t>(t - 1)] == EmotionLabel::neutral) continue;
    ad::Graph g;
    Forward f = forward(g, c, t, labels);
    std::vector<double> targets;
    for (int j = 1; j <= t; ++j) targets.push_back(gold.count({t, j}) ? 1.0 : 0.0);
    total += ad::bce_with_logits(f.logits, targets).scalar();
  }
  return total;
}

std::vector<PairPrediction> TsamModel::score(const Conversation& c, int target_index,
                                             const std::vector<EmotionLabel>& labels, const Matrix* modality) const {
  ad::Graph g;
  Forward f = forward(g, c, target_index, labels, modality);
  return predict_causes(f.logits.value(), target_index, config_.threshold);
}

json TsamModel::to_json() const {
  return {{"format", "ecpec-tsam/1"},
          {"encoder", ecpec::to_json(encoder_.config())},
          {"tsam", ecpec::to_json(config_)},
          {"vocab", vocab_.to_json()},
          {"params", params_.to_json()}};
}

TsamModel TsamModel::from_json(const json& j) {
  if (j.value("format", "") != "ecpec-tsam/1") throw ParameterError("not a TSAM checkpoint");
  EncoderConfig ec = encoder_config_from_json(j.at("encoder"));
  TsamConfig tc = tsam_config_from_json(j.at("tsam"));
  Vocabulary vocab = Vocabulary::from_json(j.at("vocab"));
  TsamModel m = create(ec, tc, vocab);
  Manifest manifest = m.params_.manifest();
  m.params_ = ParameterStore::from_json(j.at("params"), &manifest);
  return m;
}

void TsamModel::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParameterError("cannot write " + path);
  out << to_json().dump() << '\n';
}

TsamModel TsamModel::load(const std::string& path) {
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

std::vector<EmotionCausePair> infer_pairs(const TsamModel& model, const Conversation& c,
                                          const std::vector<EmotionLabel>& labels, double threshold,
                                          const Matrix* modality) {
  if (labels.size() < c.size()) throw std::invalid_argument("infer_pairs: one label per utterance required");
  std::vector<EmotionCausePair> out;
  for (int t = 1; t <= static_cast<int>(c.size()); ++t) {
    const EmotionLabel label = labels[static_cast<std::size_t>(t - 1)];
    if (label == EmotionLabel::neutral) continue;
    ad::Graph g;
    auto f = model.forward(g, c, t, labels, modality);
    for (const auto& p : predict_causes(f.logits.value(), t, threshold))
      if (p.is_cause) out.push_back(EmotionCausePair{t, label, p.candidate_index, std::nullopt});
  }
  return out;
}

namespace {

double pos_f1_on(const TsamModel& model, const std::vector<Conversation>& data, const ModalityLookup& modality) {
  if (data.empty()) return 0.0;
  std::vector<PairRecord> pred;
  for (const auto& c : data) {
    const Matrix* m = modality ? modality(c) : nullptr;
    for (const auto& p : infer_pairs(model, c, c.gold_emotions(), model.config().threshold, m))
      pred.push_back(PairRecord{c.id, p, std::nullopt});
  }
  return cee_pos_f1(pred, gold_records(data)).pos_f1;
}

}  // namespace

std::vector<EpochRecord> train_cee(TsamModel& model, const std::vector<Conversation>& train,
                                   const std::vector<Conversation>& dev, const TrainConfig& config,
                                   const EpochCallback& on_epoch, const ModalityLookup& modality) {
  if (train.empty()) throw std::invalid_argument("train_cee: empty training set");
  Adam adam(AdamConfig{config.lr, 0.9, 0.999, 1e-8, config.clip_norm, config.weight_decay});
  Rng rng(config.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<EpochRecord> history;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      GradStore grads;
      for (std::size_t k = start; k < end; ++k) {
        const Conversation& c = train[order[k]];
        ad::Graph g;
        ad::Var loss = model.loss(g, c, c.gold_emotions(), modality ? modality(c) : nullptr);
        const double value = loss.scalar();
        if (!std::isfinite(value))
          throw DivergenceError("train_cee: non-finite loss at epoch " + std::to_string(epoch) + " on conversation " + c.id);
        epoch_loss += value;
        g.backward(loss);
        g.collect(grads);
      }
      grads.scale(1.0 / static_cast<double>(end - start));
      adam.step(model.params(), grads);
    }
    EpochRecord rec{epoch, epoch_loss / static_cast<double>(train.size()), pos_f1_on(model, train, modality),
                    pos_f1_on(model, dev, modality)};
    history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return history;
}

}  // namespace ecpec
