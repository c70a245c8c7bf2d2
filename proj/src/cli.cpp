#include "ecpec/pipeline.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>

namespace ecpec {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON config file (default: $ECPEC_CONFIG)");
  cmd->add_option("--set", c.overrides, "Override a config value, e.g. --set tsam.layers=3")->take_all();
}

void ensure_parent(const std::string& path) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

void append_jsonl(std::ofstream& log, const json& record) {
  log << record.dump() << '\n';
  log.flush();
}

std::ofstream open_log(const PipelineConfig& cfg, const std::string& name) {
  fs::create_directories(cfg.output_dir);
  std::ofstream log((fs::path(cfg.output_dir) / name).string(), std::ios::binary);
  if (!log) throw DatasetError("cannot write training log in " + cfg.output_dir);
  return log;
}

int cmd_gen_data(const PipelineConfig& cfg, std::ostream& out) {
  const auto data = generate_synthetic(cfg.seed, cfg.synthetic_conversations, cfg.synthetic);
  const DatasetSplit split = split_dataset(data, cfg.split_ratios, cfg.seed);
  for (const auto& [path, part] : {std::pair{cfg.train_path, &split.train}, {cfg.dev_path, &split.dev},
                                   {cfg.test_path, &split.test}}) {
    ensure_parent(path);
    save_dataset(path, *part);
    out << "wrote " << part->size() << " conversations to " << path << '\n';
  }
  return 0;
}

int cmd_train_erc(const PipelineConfig& cfg, std::ostream& out) {
  const auto train = load_split(cfg, cfg.train_path);
  const PromptTemplates templates =
      cfg.template_dir.empty() ? PromptTemplates::load_default() : PromptTemplates::load(cfg.template_dir);
  AuxiliaryOptions opts;
  opts.window = cfg.history_window;
  opts.tasks = {PromptTask::erc};
  std::vector<PromptSample> samples;
  for (const auto& c : train)
    for (auto& s : build_auxiliary_samples(c, templates, opts)) samples.push_back(std::move(s));
  BagOfTokensClassifier clf;
  clf.train(samples, cfg.erc_baseline);
  ensure_parent(cfg.erc_checkpoint);
  clf.save(cfg.erc_checkpoint);
  out << "trained emotion baseline on " << samples.size() << " utterances -> " << cfg.erc_checkpoint << '\n';
  return 0;
}

int cmd_train_cee(const PipelineConfig& cfg, std::ostream& out) {
  const auto train = load_split(cfg, cfg.train_path);
  const auto dev = fs::exists(cfg.dev_path) ? load_split(cfg, cfg.dev_path) : std::vector<Conversation>{};
  TsamConfig tc = cfg.tsam;
  std::optional<ModalityTable> train_mod, dev_mod;
  if (cfg.fusion_enabled) {
    if (!fs::exists(cfg.fusion_selection))
      throw ConfigError("fusion: selection '" + cfg.fusion_selection + "' not found; run `select-features` first");
    std::ifstream in(cfg.fusion_selection);
    auto [sel, scaler] = selection_from_json(json::parse(in));
    train_mod = build_modality_table(cfg, train, sel, scaler);
    dev_mod = build_modality_table(cfg, dev, sel, scaler);
    tc.modality_dim = static_cast<int>(sel.indices.size());
  }
  ModalityLookup lookup;
  if (cfg.fusion_enabled)
    lookup = [&](const Conversation& c) -> const Matrix* {
      if (auto it = train_mod->per_conversation.find(c.id); it != train_mod->per_conversation.end()) return &it->second;
      if (auto it = dev_mod->per_conversation.find(c.id); it != dev_mod->per_conversation.end()) return &it->second;
      return nullptr;
    };
  TsamModel model = TsamModel::create(cfg.encoder, tc, Vocabulary::build(train));
  ensure_parent(cfg.cee_checkpoint);
  auto log = open_log(cfg, "cee_train_log.jsonl");
  train_cee(
      model, train, dev, cfg.train_cee,
      [&](const EpochRecord& r) {
        append_jsonl(log, {{"epoch", r.epoch}, {"loss", r.loss}, {"pos_f1_train", r.pos_f1_train}, {"pos_f1_dev", r.pos_f1_dev}});
        model.save(cfg.cee_checkpoint);
        out << "epoch " << r.epoch << " loss " << r.loss << " pos_f1_train " << r.pos_f1_train << " pos_f1_dev "
            << r.pos_f1_dev << '\n';
      },
      lookup);
  model.save(cfg.cee_checkpoint);
  out << "saved " << cfg.cee_checkpoint << '\n';
  return 0;
}

int cmd_train_cse(const PipelineConfig& cfg, std::ostream& out) {
  const auto train = load_split(cfg, cfg.train_path);
  const auto dev = fs::exists(cfg.dev_path) ? load_split(cfg, cfg.dev_path) : std::vector<Conversation>{};
  SpanModel model = SpanModel::create(cfg.span_encoder, cfg.span, Vocabulary::build(train));
  ensure_parent(cfg.cse_checkpoint);
  auto log = open_log(cfg, "cse_train_log.jsonl");
  train_cse(model, train, dev, cfg.train_cse, [&](const SpanEpochRecord& r) {
    append_jsonl(log, {{"epoch", r.epoch},
                       {"loss", r.loss},
                       {"exact_match_train", r.exact_match_train},
                       {"proportional_f1_train", r.proportional_f1_train},
                       {"exact_match_dev", r.exact_match_dev},
                       {"proportional_f1_dev", r.proportional_f1_dev}});
    model.save(cfg.cse_checkpoint);
    out << "epoch " << r.epoch << " loss " << r.loss << " exact_match_train " << r.exact_match_train
        << " exact_match_dev " << r.exact_match_dev << '\n';
  });
  model.save(cfg.cse_checkpoint);
  out << "saved " << cfg.cse_checkpoint << '\n';
  return 0;
}

int cmd_select_features(const PipelineConfig& cfg, const std::string& label_kind, std::ostream& out) {
  const auto train = load_split(cfg, cfg.train_path);
  std::map<std::string, std::vector<double>> csv;
  if (!cfg.fusion_features.empty()) csv = load_feature_csv(cfg.fusion_features);
  std::vector<std::vector<double>> rows;
  std::vector<int> y;
  for (const auto& c : train) {
    std::set<int> causes;
    for (const auto& p : c.pairs) causes.insert(p.cause_index);
    const auto gold = c.gold_emotions();
    for (int i = 1; i <= static_cast<int>(c.size()); ++i) {
      const std::vector<double>* raw = nullptr;
      if (!csv.empty()) {
        auto it = csv.find(utterance_key(c.id, i));
        if (it != csv.end()) raw = &it->second;
      } else if (c.at(i).audio_features) {
        raw = &c.at(i).audio_features->values;
      }
      if (!raw) continue;
      rows.push_back(*raw);
      y.push_back(label_kind == "cause" ? static_cast<int>(causes.count(i))
                                        : static_cast<int>(gold[static_cast<std::size_t>(i - 1)] != EmotionLabel::neutral));
    }
  }
  if (rows.empty()) throw DatasetError("select-features: no feature rows found for the training split");
  Matrix X(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != rows.front().size()) throw DatasetError("select-features: inconsistent feature widths");
    for (std::size_t k = 0; k < rows[r].size(); ++k) X(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = rows[r][k];
  }
  if (cfg.fusion_target_dim > X.cols())
    throw ConfigError("fusion.target_dim " + std::to_string(cfg.fusion_target_dim) + " exceeds the " +
                      std::to_string(X.cols()) + " available features");
  const FeatureSelection sel = cfg.fusion_mode == "variance" ? variance_select_features(X, cfg.fusion_target_dim)
                                                             : l1_select_features(X, y, cfg.fusion_target_dim);
  const StandardScaler scaler = StandardScaler::fit(apply_selection(X, sel));
  ensure_parent(cfg.fusion_selection);
  std::ofstream f(cfg.fusion_selection, std::ios::binary);
  if (!f) throw DatasetError("cannot write " + cfg.fusion_selection);
  f << selection_to_json(sel, scaler).dump(1) << '\n';
  out << "selected " << sel.indices.size() << " of " << X.cols() << " features -> " << cfg.fusion_selection << '\n';
  return 0;
}

int cmd_predict(const PipelineConfig& cfg, std::ostream& out) {
  const PipelineResult r = run_pipeline(cfg);
  out << r.metrics.dump(2) << '\n';
  return 0;
}

int cmd_evaluate(const PipelineConfig& cfg, const std::string& pred, const std::string& gold_path,
                 const std::string& labels_path, std::ostream& out) {
  const auto gold = load_dataset(gold_path, cfg.data_format == "ecf" ? DatasetFormat::ecf_json : DatasetFormat::native_json);
  const auto predicted = read_predictions(pred);
  const auto gold_pairs = gold_records(gold);
  json report = {{"cee", to_json(cee_pos_f1(predicted, gold_pairs))},
                 {"cse", to_json(span_proportional_f1(predicted, gold_pairs))}};
  if (!labels_path.empty()) {
    std::ifstream in(labels_path);
    if (!in) throw DatasetError("cannot read " + labels_path);
    const LabelMap labels = labels_from_json(json::parse(in));
    std::vector<EmotionLabel> p, g;
    for (const auto& c : gold) {
      auto it = labels.find(c.id);
      if (it == labels.end() || it->second.size() != c.size())
        throw DatasetError("label file does not cover conversation " + c.id);
      const auto gl = c.gold_emotions();
      p.insert(p.end(), it->second.begin(), it->second.end());
      g.insert(g.end(), gl.begin(), gl.end());
    }
    report["erc"] = to_json(erc_scores(p, g));
  }
  out << report.dump(2) << '\n';
  return 0;
}

int cmd_ensemble(const std::vector<std::string>& preds, std::optional<int> quorum, const std::string& out_path,
                 std::ostream& out) {
  std::vector<std::vector<PairRecord>> sets;
  for (const auto& p : preds) sets.push_back(read_predictions(p));
  const auto voted = majority_vote(sets, quorum);
  ensure_parent(out_path);
  write_predictions(out_path, voted);
  out << "kept " << voted.size() << " pairs from " << sets.size() << " prediction files -> " << out_path << '\n';
  return 0;
}

std::string fmt(const json& v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(4) << v.get<double>();
  return s.str();
}

int cmd_report(const PipelineConfig& cfg, std::string metrics_path, std::string json_path, std::ostream& out) {
  if (metrics_path.empty()) metrics_path = (fs::path(cfg.output_dir) / "metrics.json").string();
  if (json_path.empty()) json_path = (fs::path(cfg.output_dir) / "report.json").string();
  std::ifstream in(metrics_path);
  if (!in) throw DatasetError("cannot read " + metrics_path + "; run `predict` first");
  const json m = json::parse(in);
  json summary = json::object();
  out << "metrics from " << metrics_path << '\n';
  if (m.contains("erc")) {
    summary["erc_weighted_f1"] = m["erc"]["weighted_f1"];
    summary["erc_accuracy"] = m["erc"]["accuracy"];
    out << "  emotion recognition  weighted F1 " << fmt(m["erc"]["weighted_f1"]) << "  accuracy "
        << fmt(m["erc"]["accuracy"]) << "  (neutral gold excluded)\n";
  }
  if (m.contains("cee")) {
    summary["cee_pos_f1"] = m["cee"]["pos_f1"];
    out << "  cause pairs          pos F1 " << fmt(m["cee"]["pos_f1"]) << "  precision " << fmt(m["cee"]["precision"])
        << "  recall " << fmt(m["cee"]["recall"]) << '\n';
  }
  if (m.contains("cse")) {
    summary["cse_weighted_proportional_f1"] = m["cse"]["weighted_avg_proportional_f1"];
    out << "  cause spans          weighted proportional F1 " << fmt(m["cse"]["weighted_avg_proportional_f1"]) << '\n';
  }
  ensure_parent(json_path);
  std::ofstream f(json_path, std::ios::binary);
  if (!f) throw DatasetError("cannot write " + json_path);
  f << summary.dump(2) << '\n';
  out << summary.dump(2) << '\n';
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Emotion-cause pair and span extraction in conversations"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  Common common;
  auto* gen = app.add_subcommand("gen-data", "Generate a seeded synthetic corpus and its splits");
  auto* erc = app.add_subcommand("train-erc-baseline", "Train the bag-of-tokens emotion classifier");
  auto* cee = app.add_subcommand("train-cee", "Train the cause pair model");
  auto* cse = app.add_subcommand("train-cse", "Train the cause span model");
  auto* sel = app.add_subcommand("select-features", "Select modality features and fit their scaler");
  auto* predict = app.add_subcommand("predict", "Run the enabled stages on the test split");
  auto* evaluate = app.add_subcommand("evaluate", "Score a prediction file against a dataset");
  auto* ensemble = app.add_subcommand("ensemble", "Majority vote over prediction files");
  auto* report = app.add_subcommand("report", "Summarize metrics.json as text and JSON");
  auto* show = app.add_subcommand("show-config", "Print the effective configuration");
  for (auto* cmd : {gen, erc, cee, cse, sel, predict, evaluate, ensemble, report, show}) add_common(cmd, common);

  std::string label_kind = "emotion";
  sel->add_option("--label", label_kind, "Binary target: emotion (non-neutral) or cause")
      ->check(CLI::IsMember({"emotion", "cause"}));
  std::string pred, gold, labels;
  evaluate->add_option("--pred", pred, "Prediction JSONL")->required();
  evaluate->add_option("--gold", gold, "Dataset with gold pairs")->required();
  evaluate->add_option("--labels", labels, "Stage-1 label file to score as well");
  std::vector<std::string> preds;
  std::optional<int> quorum;
  std::string ensemble_out;
  ensemble->add_option("--pred", preds, "Prediction JSONL files")->required()->take_all();
  ensemble->add_option("--quorum", quorum, "Votes needed (default: strict majority)");
  ensemble->add_option("--out", ensemble_out, "Output JSONL")->required();
  std::string metrics_path, report_json;
  report->add_option("--metrics", metrics_path, "metrics.json (default: <output_dir>/metrics.json)");
  report->add_option("--json", report_json, "Summary JSON (default: <output_dir>/report.json)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    const PipelineConfig cfg = load_config(common.config, common.overrides);
    if (gen->parsed()) return cmd_gen_data(cfg, out);
    if (erc->parsed()) return cmd_train_erc(cfg, out);
    if (cee->parsed()) return cmd_train_cee(cfg, out);
    if (cse->parsed()) return cmd_train_cse(cfg, out);
    if (sel->parsed()) return cmd_select_features(cfg, label_kind, out);
    if (predict->parsed()) return cmd_predict(cfg, out);
    if (evaluate->parsed()) return cmd_evaluate(cfg, pred, gold, labels, out);
    if (ensemble->parsed()) return cmd_ensemble(preds, quorum, ensemble_out, out);
    if (report->parsed()) return cmd_report(cfg, metrics_path, report_json, out);
    if (show->parsed()) {
      out << to_json(cfg).dump(2) << '\n';
      return 0;
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace ecpec
