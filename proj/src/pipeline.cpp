#include "ecpec/pipeline.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>

namespace ecpec {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const char* source_name(EmotionSource s) {
  switch (s) {
    case EmotionSource::gold: return "gold";
    case EmotionSource::classifier: return "classifier";
    case EmotionSource::file: return "file";
  }
  return "gold";
}

EmotionSource source_from_name(const std::string& s) {
  if (s == "gold") return EmotionSource::gold;
  if (s == "classifier") return EmotionSource::classifier;
  if (s == "file") return EmotionSource::file;
  throw ConfigError("emotion_source must be gold, classifier or file (got '" + s + "')");
}

PipelineConfig desk_defaults() {
  PipelineConfig c;
  c.encoder.dim = 32;
  c.encoder.n_layers = 2;
  c.encoder.local_layers = 1;
  c.encoder.n_heads = 2;
  c.encoder.ffn_dim = 64;
  c.encoder.vocab_size = 5;
  c.tsam.dim = 32;
  c.tsam.layers = 2;
  c.tsam.n_heads = 2;
  c.tsam.hidden = 32;
  c.tsam.emotion_distance = true;
  c.train_cee.epochs = 40;
  c.train_cee.lr = 3e-3;
  c.train_cee.weight_decay = 0.2;
  c.span_encoder = c.encoder;
  c.span_encoder.local_layers = 0;
  c.span.hidden = 32;
  c.train_cse.epochs = 10;
  c.train_cse.lr = 3e-3;
  return c;
}

json baseline_to_json(const BaselineConfig& b) {
  return {{"epochs", b.epochs}, {"lr", b.lr}, {"l2", b.l2}, {"coarse_weight", b.coarse_weight}};
}

BaselineConfig baseline_from_json(const json& j) {
  BaselineConfig b;
  for (const auto& [key, v] : j.items()) {
    if (key == "epochs") b.epochs = v.get<int>();
    else if (key == "lr") b.lr = v.get<double>();
    else if (key == "l2") b.l2 = v.get<double>();
    else if (key == "coarse_weight") b.coarse_weight = v.get<double>();
    else throw ConfigError("erc.baseline: unknown key '" + key + "'");
  }
  return b;
}

void merge_strict(json& base, const json& patch, const std::string& where) {
  if (!patch.is_object()) throw ConfigError((where.empty() ? std::string("config") : where) + " must be an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    if (base[key].is_object() && !base[key].empty()) merge_strict(base[key], value, path);
    else base[key] = value;
  }
}

bool has_path(const json& j, const std::string& section, const std::string& key) {
  return j.contains(section) && j[section].is_object() && j[section].contains(key);
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DatasetError("cannot write " + path);
  out << text;
}

}  // namespace

void PipelineConfig::validate() const {
  if (!stage_erc && !stage_cee && !stage_cse) throw ConfigError("at least one of stages.erc/cee/cse must be enabled");
  if (emotion_source == EmotionSource::file && emotion_file.empty())
    throw ConfigError("emotion_source 'file' requires paths.emotion_file");
  if (classifier != "baseline" && classifier != "subprocess" && classifier != "http")
    throw ConfigError("erc.classifier must be baseline, subprocess or http");
  if (classifier == "subprocess" && emotion_source == EmotionSource::classifier && classifier_command.empty())
    throw ConfigError("erc.classifier 'subprocess' requires erc.command");
  if (!(label_noise >= 0.0 && label_noise <= 1.0)) throw ConfigError("erc.label_noise must lie in [0, 1]");
  if (history_window < 1) throw ConfigError("erc.history_window must be >= 1");
  if (data_format != "native" && data_format != "ecf") throw ConfigError("data_format must be native or ecf");
  if (fusion_mode != "l1" && fusion_mode != "variance") throw ConfigError("fusion.mode must be l1 or variance");
  if (fusion_target_dim < 1) throw ConfigError("fusion.target_dim must be >= 1");
  if (synthetic_conversations < 1) throw ConfigError("synthetic.n_conversations must be >= 1");
  encoder.validate();
  tsam.validate();
  span_encoder.validate();
  span.validate();
  synthetic.validate();
  if (encoder.dim != tsam.dim) throw ConfigError("tsam.dim must equal encoder.dim");
  if (span_encoder.n_segments < 3) throw ConfigError("span_encoder.n_segments must be >= 3");
  if (train_cee.epochs < 0 || train_cse.epochs < 0) throw ConfigError("epochs must be >= 0");
}

json to_json(const PipelineConfig& c) {
  return {
      {"seed", c.seed},
      {"stages", {{"erc", c.stage_erc}, {"cee", c.stage_cee}, {"cse", c.stage_cse}}},
      {"emotion_source", source_name(c.emotion_source)},
      {"data_format", c.data_format},
      {"paths",
       {{"train", c.train_path},
        {"dev", c.dev_path},
        {"test", c.test_path},
        {"output_dir", c.output_dir},
        {"erc_checkpoint", c.erc_checkpoint},
        {"cee_checkpoint", c.cee_checkpoint},
        {"cse_checkpoint", c.cse_checkpoint},
        {"emotion_file", c.emotion_file}}},
      {"erc",
       {{"classifier", c.classifier},
        {"command", c.classifier_command},
        {"url", c.classifier_url},
        {"template_dir", c.template_dir},
        {"history_window", c.history_window},
        {"label_noise", c.label_noise},
        {"baseline", baseline_to_json(c.erc_baseline)}}},
      {"encoder", to_json(c.encoder)},
      {"tsam", to_json(c.tsam)},
      {"train_cee", to_json(c.train_cee)},
      {"span_encoder", to_json(c.span_encoder)},
      {"span", to_json(c.span)},
      {"train_cse", to_json(c.train_cse)},
      {"fusion",
       {{"enabled", c.fusion_enabled},
        {"selection", c.fusion_selection},
        {"features", c.fusion_features},
        {"target_dim", c.fusion_target_dim},
        {"mode", c.fusion_mode}}},
      {"synthetic",
       {{"n_conversations", c.synthetic_conversations},
        {"params", to_json(c.synthetic)},
        {"split", c.split_ratios}}},
  };
}

json default_config_json() { return to_json(desk_defaults()); }

PipelineConfig config_from_json(const json& patch) {
  json j = default_config_json();
  merge_strict(j, patch, "");
  PipelineConfig c;
  try {
    c.seed = j.at("seed").get<std::uint64_t>();
    c.stage_erc = j["stages"]["erc"].get<bool>();
    c.stage_cee = j["stages"]["cee"].get<bool>();
    c.stage_cse = j["stages"]["cse"].get<bool>();
    c.emotion_source = source_from_name(j["emotion_source"].get<std::string>());
    c.data_format = j["data_format"].get<std::string>();
    const json& p = j["paths"];
    c.train_path = p["train"].get<std::string>();
    c.dev_path = p["dev"].get<std::string>();
    c.test_path = p["test"].get<std::string>();
    c.output_dir = p["output_dir"].get<std::string>();
    c.erc_checkpoint = p["erc_checkpoint"].get<std::string>();
    c.cee_checkpoint = p["cee_checkpoint"].get<std::string>();
    c.cse_checkpoint = p["cse_checkpoint"].get<std::string>();
    c.emotion_file = p["emotion_file"].get<std::string>();
    const json& e = j["erc"];
    c.classifier = e["classifier"].get<std::string>();
    c.classifier_command = e["command"].get<std::string>();
    c.classifier_url = e["url"].get<std::string>();
    c.template_dir = e["template_dir"].get<std::string>();
    c.history_window = e["history_window"].get<int>();
    c.label_noise = e["label_noise"].get<double>();
    c.erc_baseline = baseline_from_json(e["baseline"]);
    c.encoder = encoder_config_from_json(j["encoder"]);
    c.tsam = tsam_config_from_json(j["tsam"]);
    c.train_cee = train_config_from_json(j["train_cee"]);
    c.span_encoder = encoder_config_from_json(j["span_encoder"]);
    c.span = span_config_from_json(j["span"]);
    c.train_cse = train_config_from_json(j["train_cse"]);
    const json& f = j["fusion"];
    c.fusion_enabled = f["enabled"].get<bool>();
    c.fusion_selection = f["selection"].get<std::string>();
    c.fusion_features = f["features"].get<std::string>();
    c.fusion_target_dim = f["target_dim"].get<int>();
    c.fusion_mode = f["mode"].get<std::string>();
    const json& s = j["synthetic"];
    c.synthetic_conversations = s["n_conversations"].get<int>();
    c.synthetic = synthetic_params_from_json(s["params"]);
    auto split = s["split"].get<std::vector<double>>();
    if (split.size() != 3) throw ConfigError("synthetic.split must have three entries");
    c.split_ratios = {split[0], split[1], split[2]};
  } catch (const json::exception& ex) {
    throw ConfigError(std::string("config: ") + ex.what());
  }
  for (const char* section : {"encoder", "tsam", "train_cee", "span_encoder", "span", "train_cse"}) {
    if (has_path(patch, section, "seed")) continue;
    const std::string s = section;
    if (s == "encoder") c.encoder.seed = c.seed;
    else if (s == "tsam") c.tsam.seed = c.seed;
    else if (s == "train_cee") c.train_cee.seed = c.seed;
    else if (s == "span_encoder") c.span_encoder.seed = c.seed;
    else if (s == "span") c.span.seed = c.seed;
    else c.train_cse.seed = c.seed;
  }
  c.validate();
  return c;
}

void apply_override(json& document, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  json* node = &document;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override '" + assignment + "' has an empty key segment");
    if (!node->is_object()) throw ConfigError("override '" + assignment + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

PipelineConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::string p = path;
  if (p.empty())
    if (const char* env = std::getenv("ECPEC_CONFIG")) p = env;
  json doc = json::object();
  if (!p.empty()) {
    try {
      doc = json::parse(read_text(p));
    } catch (const json::parse_error& e) {
      throw ConfigError(p + ": " + e.what());
    }
  }
  for (const auto& o : overrides) apply_override(doc, o);
  return config_from_json(doc);
}

std::vector<Conversation> load_split(const PipelineConfig& config, const std::string& path) {
  if (!fs::exists(path)) throw ConfigError("dataset file '" + path + "' does not exist");
  return load_dataset(path, config.data_format == "ecf" ? DatasetFormat::ecf_json : DatasetFormat::native_json);
}

std::vector<EmotionLabel> corrupt_labels(const std::vector<EmotionLabel>& labels, double rate, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw std::invalid_argument("corrupt_labels: rate must lie in [0, 1]");
  Rng rng(seed);
  std::vector<EmotionLabel> out = labels;
  for (auto& l : out) {
    const bool flip = rng.bernoulli(rate);
    const int shift = 1 + static_cast<int>(rng.index(kNumEmotions - 1));
    if (flip) l = emotion_from_code((code_of(l) + shift) % kNumEmotions);
  }
  return out;
}

json labels_to_json(const LabelMap& labels) {
  json j = json::object();
  for (const auto& [conv, ls] : labels) {
    json arr = json::array();
    for (EmotionLabel l : ls) arr.push_back(std::string(emotion_name(l)));
    j[conv] = arr;
  }
  return j;
}

LabelMap labels_from_json(const json& j) {
  if (!j.is_object()) throw DatasetError("label file must map conversation ids to label lists");
  LabelMap out;
  for (const auto& [conv, arr] : j.items()) {
    std::vector<EmotionLabel> ls;
    for (const auto& v : arr) {
      auto l = v.is_string() ? emotion_from_name(v.get<std::string>()) : std::nullopt;
      if (!l) throw DatasetError("label file: unknown emotion " + v.dump() + " in conversation " + conv);
      ls.push_back(*l);
    }
    out[conv] = std::move(ls);
  }
  return out;
}

namespace {

std::unique_ptr<TextClassifier> make_classifier(const PipelineConfig& c) {
  if (c.classifier == "baseline") {
    if (!fs::exists(c.erc_checkpoint))
      throw ConfigError("stage erc: classifier checkpoint '" + c.erc_checkpoint +
                        "' not found; run `train-erc-baseline` first");
    return std::make_unique<BagOfTokensClassifier>(BagOfTokensClassifier::load(c.erc_checkpoint));
  }
  if (c.classifier == "subprocess") return std::make_unique<SubprocessClassifier>(c.classifier_command);
  static const std::regex url_re(R"(^http://([^/:]+)(?::(\d+))?(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(c.classifier_url, m, url_re)) throw ConfigError("erc.url must look like http://host:port/path");
  const int port = m[2].matched ? std::stoi(m[2].str()) : 80;
  return std::make_unique<HttpClassifier>(m[1].str(), port, m[3].matched ? m[3].str() : "/classify");
}

}  // namespace

LabelMap run_emotion_stage(const PipelineConfig& config, const std::vector<Conversation>& conversations) {
  LabelMap labels;
  switch (config.emotion_source) {
    case EmotionSource::gold:
      for (const auto& c : conversations) labels[c.id] = c.gold_emotions();
      break;
    case EmotionSource::file: {
      json j;
      try {
        j = json::parse(read_text(config.emotion_file));
      } catch (const json::parse_error& e) {
        throw DatasetError(config.emotion_file + ": " + e.what());
      }
      LabelMap all = labels_from_json(j);
      for (const auto& c : conversations) {
        auto it = all.find(c.id);
        if (it == all.end()) throw DatasetError("label file has no entry for conversation " + c.id);
        if (it->second.size() != c.size())
          throw DatasetError("label file: conversation " + c.id + " needs " + std::to_string(c.size()) + " labels");
        labels[c.id] = it->second;
      }
      break;
    }
    case EmotionSource::classifier: {
      auto classifier = make_classifier(config);
      const PromptTemplates templates =
          config.template_dir.empty() ? PromptTemplates::load_default() : PromptTemplates::load(config.template_dir);
      AuxiliaryOptions opts;
      opts.window = config.history_window;
      const auto answers = label_set(PromptTask::erc);
      for (const auto& c : conversations) {
        std::vector<EmotionLabel> ls;
        for (int i = 1; i <= static_cast<int>(c.size()); ++i) {
          const PromptSample s = build_erc_prompt(c, i, templates, opts);
          ls.push_back(*emotion_from_name(parse_label(classifier->classify(s.rendered_prompt), answers)));
        }
        labels[c.id] = std::move(ls);
      }
      break;
    }
  }
  if (config.label_noise > 0) {
    std::uint64_t k = 0;
    for (const auto& c : conversations) {
      auto& ls = labels[c.id];
      ls = corrupt_labels(ls, config.label_noise, config.seed * 1000003ULL + k++);
    }
  }
  return labels;
}

ModalityTable build_modality_table(const PipelineConfig& config, const std::vector<Conversation>& conversations,
                                   const FeatureSelection& selection, const StandardScaler& scaler) {
  std::map<std::string, std::vector<double>> csv;
  if (!config.fusion_features.empty()) csv = load_feature_csv(config.fusion_features);
  ModalityTable table{selection, scaler, {}};
  const auto width = static_cast<Eigen::Index>(selection.indices.size());
  for (const auto& c : conversations) {
    Matrix m = Matrix::Zero(static_cast<Eigen::Index>(c.size()), width);
    for (int i = 1; i <= static_cast<int>(c.size()); ++i) {
      const std::vector<double>* raw = nullptr;
      if (!csv.empty()) {
        auto it = csv.find(utterance_key(c.id, i));
        if (it != csv.end()) raw = &it->second;
      } else if (c.at(i).audio_features) {
        raw = &c.at(i).audio_features->values;
      }
      if (!raw) continue;
      std::vector<double> picked;
      for (int idx : selection.indices) {
        if (idx < 0 || idx >= static_cast<int>(raw->size()))
          throw DatasetError("modality features of " + utterance_key(c.id, i) + " are narrower than the selection");
        picked.push_back((*raw)[static_cast<std::size_t>(idx)]);
      }
      auto z = scaler.transform(picked);
      for (Eigen::Index k = 0; k < width; ++k) m(i - 1, k) = z[static_cast<std::size_t>(k)];
    }
    table.per_conversation.emplace(c.id, std::move(m));
  }
  return table;
}

PipelineResult run_pipeline(const PipelineConfig& config) {
  config.validate();
  const auto test = load_split(config, config.test_path);
  fs::create_directories(config.output_dir);
  const fs::path out_dir(config.output_dir);
  PipelineResult result;
  json metrics = json::object();

  // Stage 1.
  if (config.stage_erc) {
    result.labels = run_emotion_stage(config, test);
    write_text((out_dir / "stage1_labels.json").string(), labels_to_json(result.labels).dump(1) + "\n");
    std::vector<EmotionLabel> pred, gold;
    for (const auto& c : test) {
      const auto g = c.gold_emotions();
      const auto& p = result.labels.at(c.id);
      gold.insert(gold.end(), g.begin(), g.end());
      pred.insert(pred.end(), p.begin(), p.end());
    }
    metrics["erc"] = to_json(erc_scores(pred, gold));
  } else {
    PipelineConfig oracle = config;
    if (oracle.emotion_source == EmotionSource::classifier) oracle.emotion_source = EmotionSource::gold;
    oracle.label_noise = 0.0;
    result.labels = run_emotion_stage(oracle, test);
  }

  // Stage 2.
  if (config.stage_cee) {
    if (!fs::exists(config.cee_checkpoint))
      throw ConfigError("stage cee: checkpoint '" + config.cee_checkpoint + "' not found; run `train-cee` first");
    const TsamModel model = TsamModel::load(config.cee_checkpoint);
    std::optional<ModalityTable> modality;
    if (model.config().modality_dim > 0) {
      if (!fs::exists(config.fusion_selection))
        throw ConfigError("stage cee: fusion selection '" + config.fusion_selection + "' not found");
      auto [sel, scaler] = selection_from_json(json::parse(read_text(config.fusion_selection)));
      modality = build_modality_table(config, test, sel, scaler);
    }
    for (const auto& c : test) {
      const Matrix* m = modality ? &modality->per_conversation.at(c.id) : nullptr;
      for (const auto& p : infer_pairs(model, c, result.labels.at(c.id), model.config().threshold, m))
        result.pairs.push_back(PairRecord{c.id, p, std::nullopt});
    }
    write_predictions((out_dir / "stage2_pairs.jsonl").string(), result.pairs);
    metrics["cee"] = to_json(cee_pos_f1(result.pairs, gold_records(test)));
  } else {
    for (const auto& c : test)
      for (auto p : c.pairs) {
        p.span.reset();
        result.pairs.push_back(PairRecord{c.id, p, std::nullopt});
      }
  }

  // Stage 3.
  result.predictions = result.pairs;
  if (config.stage_cse) {
    if (!fs::exists(config.cse_checkpoint))
      throw ConfigError("stage cse: checkpoint '" + config.cse_checkpoint + "' not found; run `train-cse` first");
    const SpanModel model = SpanModel::load(config.cse_checkpoint);
    std::map<std::string, const Conversation*> by_id;
    for (const auto& c : test) by_id[c.id] = &c;
    for (auto& r : result.predictions) {
      const Conversation& c = *by_id.at(r.conversation);
      const SpanInput in = model.input_for(c, r.pair.emotion_index, r.pair.cause_index);
      if (in.candidate_length < 1) continue;
      const SpanPrediction sp = infer_span_topk(model, in, model.config().k);
      r.pair.span = TokenSpan{sp.start, sp.end};
      r.span_text = join_tokens(c.at(r.pair.cause_index).tokens, sp.start, sp.end);
    }
    metrics["cse"] = to_json(span_proportional_f1(result.predictions, gold_records(test)));
  }

  write_predictions((out_dir / "predictions.jsonl").string(), result.predictions);
  result.metrics = metrics;
  write_text((out_dir / "metrics.json").string(), metrics.dump(2) + "\n");
  return result;
}

}  // namespace ecpec
