#include "ecpec/encoder.hpp"

#include "ecpec/nn.hpp"

#include <algorithm>
#include <map>

namespace ecpec {

using nlohmann::json;

Vocabulary::Vocabulary() {
  for (const char* t : {"<pad>", "<unk>", "<cls>", "<sep>", "<utt>"}) add(t);
}

void Vocabulary::add(const std::string& token) {
  if (index_.emplace(token, static_cast<int>(tokens_.size())).second) tokens_.push_back(token);
}

Vocabulary Vocabulary::build(const std::vector<Conversation>& conversations, int min_count) {
  std::map<std::string, int> counts;
  for (const auto& c : conversations)
    for (const auto& u : c.utterances)
      for (const auto& t : u.tokens) ++counts[t];
  Vocabulary v;
  for (const auto& [tok, n] : counts)
    if (n >= min_count) v.add(tok);
  return v;
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id(t));
  return out;
}

Vocabulary Vocabulary::from_json(const json& j) {
  Vocabulary v;
  auto tokens = j.get<std::vector<std::string>>();
  if (tokens.size() < 5 || tokens[0] != "<pad>" || tokens[4] != "<utt>")
    throw ConfigError("vocabulary does not start with the reserved tokens");
  for (const auto& t : tokens) v.add(t);
  return v;
}

// ---------------------------------------------------------------------------

void EncoderConfig::validate() const {
  if (dim < 1 || n_layers < 1 || n_heads < 1 || ffn_dim < 1 || max_tokens < 2 || n_segments < 1)
    throw ConfigError("encoder: all sizes must be positive");
  if (local_layers < 0 || local_layers > n_layers) throw ConfigError("encoder: local_layers must lie in [0, n_layers]");
  if (dim % n_heads != 0) throw ConfigError("encoder: dim must be divisible by n_heads");
  if (vocab_size < 5) throw ConfigError("encoder: vocab_size must cover the reserved tokens");
}

json to_json(const EncoderConfig& c) {
  return {{"dim", c.dim},           {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
          {"ffn_dim", c.ffn_dim},   {"vocab_size", c.vocab_size}, {"max_tokens", c.max_tokens},
          {"n_segments", c.n_segments}, {"local_layers", c.local_layers}, {"seed", c.seed}};
}

EncoderConfig encoder_config_from_json(const json& j, EncoderConfig c) {
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "dim") c.dim = v.get<int>();
      else if (key == "n_layers") c.n_layers = v.get<int>();
      else if (key == "n_heads") c.n_heads = v.get<int>();
      else if (key == "ffn_dim") c.ffn_dim = v.get<int>();
      else if (key == "vocab_size") c.vocab_size = v.get<int>();
      else if (key == "max_tokens") c.max_tokens = v.get<int>();
      else if (key == "n_segments") c.n_segments = v.get<int>();
      else if (key == "local_layers") c.local_layers = v.get<int>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else throw ConfigError("encoder: unknown key '" + key + "'");
    } catch (const json::exception& e) {
      throw ConfigError("encoder." + key + ": " + e.what());
    }
  }
  return c;
}

// ---------------------------------------------------------------------------

TransformerEncoder::TransformerEncoder(EncoderConfig config, std::string prefix)
    : config_(config), prefix_(std::move(prefix)), positions_(nn::sinusoidal_positions(config.max_tokens, config.dim)) {
  config_.validate();
}

void TransformerEncoder::init(ParameterStore& store, Rng& rng) const {
  const int d = config_.dim;
  store.init_normal(prefix_ + ".tok", config_.vocab_size, d, 1.0, rng);
  store.init_normal(prefix_ + ".seg", config_.n_segments, d, 1.0, rng);
  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string p = prefix_ + ".l" + std::to_string(l);
    nn::init_layer_norm(store, p + ".ln1", d);
    nn::init_attention(store, p + ".attn", d, rng);
    nn::init_layer_norm(store, p + ".ln2", d);
    nn::init_linear(store, p + ".ff1", d, config_.ffn_dim, rng);
    nn::init_linear(store, p + ".ff2", config_.ffn_dim, d, rng);
  }
  nn::init_layer_norm(store, prefix_ + ".ln_out", d);
}

ad::Var TransformerEncoder::forward(ad::Graph& g, const ParameterStore& store, std::span<const int> tokens,
                                    std::span<const int> segments, std::span<const int> groups) const {
  const auto n = static_cast<Eigen::Index>(tokens.size());
  if (n == 0 || tokens.size() != segments.size()) throw std::invalid_argument("encoder: bad input lengths");
  if (!groups.empty() && groups.size() != tokens.size()) throw std::invalid_argument("encoder: bad group lengths");
  Mask local;
  if (!groups.empty() && config_.local_layers > 0) {
    local.resize(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) local(i, j) = groups[static_cast<std::size_t>(i)] == groups[static_cast<std::size_t>(j)];
  }
  if (n > config_.max_tokens) throw std::invalid_argument("encoder: input longer than max_tokens");

  ad::Var x = ad::gather_rows(g.parameter(store, prefix_ + ".tok"), tokens);
  x = ad::add(x, ad::gather_rows(g.parameter(store, prefix_ + ".seg"), segments));
  x = ad::add(x, g.constant(positions_.topRows(n)));
  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string p = prefix_ + ".l" + std::to_string(l);
    ad::Var h = nn::layer_norm(g, store, p + ".ln1", x);
    const Mask* allowed = (l < config_.local_layers && local.size() != 0) ? &local : nullptr;
    x = ad::add(x, nn::multi_head_attention(g, store, p + ".attn", h, h, config_.n_heads, allowed));
    h = nn::layer_norm(g, store, p + ".ln2", x);
    x = ad::add(x, nn::linear(g, store, p + ".ff2", ad::gelu(nn::linear(g, store, p + ".ff1", h))));
  }
  return nn::layer_norm(g, store, prefix_ + ".ln_out", x);
}

// ---------------------------------------------------------------------------

ConversationSequence build_sequence(const Conversation& c, int upto, const Vocabulary& vocab,
                                    const EncoderConfig& config) {
  if (upto < 1 || upto > static_cast<int>(c.size()))
    throw std::out_of_range("encode: upto out of range for conversation " + c.id);
  ConversationSequence seq;
  std::vector<int> lengths(static_cast<std::size_t>(upto));
  int total = 0;
  for (int i = 1; i <= upto; ++i) total += (lengths[static_cast<std::size_t>(i - 1)] = 1 + static_cast<int>(c.at(i).tokens.size()));

  int first = 1;
  while (total > config.max_tokens && first < upto) total -= lengths[static_cast<std::size_t>(first++ - 1)];
  if (first > 1)
    seq.warnings.push_back("conversation " + c.id + ": dropped " + std::to_string(first - 1) +
                           " oldest utterance(s) to fit max_tokens");
  int target_budget = config.max_tokens - (total - lengths[static_cast<std::size_t>(upto - 1)]);
  if (total > config.max_tokens)
    seq.warnings.push_back("conversation " + c.id + ": target utterance truncated to fit max_tokens");

  seq.first_kept = first;
  for (int i = first; i <= upto; ++i) {
    const int segment = std::min(upto - i, config.n_segments - 1);
    seq.sentinel_positions.push_back(static_cast<int>(seq.tokens.size()));
    seq.tokens.push_back(Vocabulary::kUtt);
    seq.segments.push_back(segment);
    seq.groups.push_back(i);
    auto ids = vocab.encode(c.at(i).tokens);
    if (i == upto && static_cast<int>(ids.size()) + 1 > target_budget) ids.resize(static_cast<std::size_t>(target_budget - 1));
    for (int id : ids) {
      seq.tokens.push_back(id);
      seq.segments.push_back(segment);
      seq.groups.push_back(i);
    }
  }
  return seq;
}

EncodedUtterances encode_utterances(ad::Graph& g, const TransformerEncoder& encoder, const ParameterStore& store,
                                    const Vocabulary& vocab, const Conversation& c, int upto) {
  ConversationSequence seq = build_sequence(c, upto, vocab, encoder.config());
  ad::Var tokens = encoder.forward(g, store, seq.tokens, seq.segments, seq.groups);
  ad::Var rows = ad::gather_rows(tokens, seq.sentinel_positions);
  EncodedUtterances out;
  const int dropped = seq.first_kept - 1;
  if (dropped > 0) {
    ad::Var parts[] = {g.constant(Matrix::Zero(dropped, encoder.config().dim)), rows};
    out.H = ad::concat_rows(parts);
  } else {
    out.H = rows;
  }
  out.valid_mask.assign(static_cast<std::size_t>(upto), true);
  for (int i = 0; i < dropped; ++i) out.valid_mask[static_cast<std::size_t>(i)] = false;
  out.warnings = std::move(seq.warnings);
  return out;
}

UtteranceMatrix encode_conversation(const Conversation& c, int upto, const TransformerEncoder& encoder,
                                    const ParameterStore& store, const Vocabulary& vocab) {
  ad::Graph g;
  EncodedUtterances enc = encode_utterances(g, encoder, store, vocab, c, upto);
  return UtteranceMatrix{enc.H.value(), std::move(enc.valid_mask), std::move(enc.warnings)};
}

GradStore encoder_gradients(const Conversation& c, int upto, const Matrix& upstream, const TransformerEncoder& encoder,
                            const ParameterStore& store, const Vocabulary& vocab) {
  ad::Graph g;
  EncodedUtterances enc = encode_utterances(g, encoder, store, vocab, c, upto);
  g.backward(enc.H, upstream);
  GradStore grads;
  g.collect(grads);
  return grads;
}

}  // namespace ecpec
