#include "doctest.h"

#include "ecpec/params.hpp"
#include "ecpec/pipeline.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace ecpec;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("ecpec_pipeline_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE_MESSAGE(in.good(), "cannot read " << path);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

struct CliRun {
  int code;
  std::string out;
  std::string err;
};

CliRun cli(std::vector<std::string> args) {
  args.insert(args.begin(), "ecpec");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

// Small, fast configuration rooted in `dir`.
json small_config(const TempDir& dir) {
  return {{"seed", 5},
          {"paths",
           {{"train", dir / "data/train.json"},
            {"dev", dir / "data/dev.json"},
            {"test", dir / "data/test.json"},
            {"output_dir", dir / "out"},
            {"erc_checkpoint", dir / "out/erc.json"},
            {"cee_checkpoint", dir / "out/cee.json"},
            {"cse_checkpoint", dir / "out/cse.json"}}},
          {"encoder", {{"dim", 8}, {"n_layers", 1}, {"local_layers", 0}, {"n_heads", 2}, {"ffn_dim", 16}}},
          {"tsam", {{"dim", 8}, {"layers", 1}, {"n_heads", 2}, {"hidden", 8}}},
          {"train_cee", {{"epochs", 2}}},
          {"span_encoder", {{"dim", 8}, {"n_layers", 1}, {"n_heads", 2}, {"ffn_dim", 16}}},
          {"span", {{"hidden", 8}}},
          {"train_cse", {{"epochs", 1}}},
          {"erc", {{"baseline", {{"epochs", 3}}}}},
          {"synthetic", {{"n_conversations", 20}}}};
}

std::string write_config(const TempDir& dir, const json& cfg, const std::string& name = "config.json") {
  const std::string path = dir / name;
  std::ofstream(path) << cfg.dump(2);
  return path;
}

void train_all(const std::string& config) {
  for (const char* cmd : {"gen-data", "train-cee", "train-cse"}) {
    const CliRun r = cli({cmd, "--config", config});
    INFO(cmd << ": " << r.err);
    REQUIRE(r.code == 0);
  }
}

}  // namespace

TEST_CASE("default config round-trips through JSON") {
  const PipelineConfig a = config_from_json(json::object());
  const json j = to_json(a);
  CHECK(j == default_config_json());
  CHECK(to_json(config_from_json(j)) == j);
}

TEST_CASE("unknown config keys are rejected at any depth") {
  CHECK_THROWS_AS(config_from_json({{"sed", 1}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"tsam", {{"layer", 2}}}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"erc", {{"baseline", {{"epoch", 2}}}}}}), ConfigError);
}

TEST_CASE("sub-model seeds follow the top-level seed unless set explicitly") {
  const PipelineConfig c = config_from_json({{"seed", 42}, {"span", {{"seed", 7}}}});
  CHECK(c.encoder.seed == 42);
  CHECK(c.tsam.seed == 42);
  CHECK(c.train_cee.seed == 42);
  CHECK(c.span_encoder.seed == 42);
  CHECK(c.train_cse.seed == 42);
  CHECK(c.span.seed == 7);
}

TEST_CASE("invalid configurations raise ConfigError") {
  CHECK_THROWS_AS(config_from_json({{"stages", {{"erc", false}, {"cee", false}, {"cse", false}}}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"emotion_source", "file"}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"emotion_source", "oracle"}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"erc", {{"classifier", "gpt"}}}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"emotion_source", "classifier"}, {"erc", {{"classifier", "subprocess"}}}}),
                  ConfigError);
  CHECK_THROWS_AS(config_from_json({{"erc", {{"label_noise", 1.5}}}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"erc", {{"history_window", 0}}}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"data_format", "csv"}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"fusion", {{"mode", "pca"}}}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"tsam", {{"dim", 16}}}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"seed", "five"}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"synthetic", {{"split", {0.5, 0.5}}}}}), ConfigError);
}

TEST_CASE("fusion target dimensions of the reference feature sets are accepted") {
  for (int d : {128, 296, 352, 1000}) CHECK(config_from_json({{"fusion", {{"target_dim", d}}}}).fusion_target_dim == d);
  CHECK_THROWS_AS(config_from_json({{"fusion", {{"target_dim", 0}}}}), ConfigError);
}

TEST_CASE("overrides assign nested values parsed as JSON or plain strings") {
  json doc = json::object();
  apply_override(doc, "tsam.layers=3");
  apply_override(doc, "paths.output_dir=runs/a");
  apply_override(doc, "stages.cse=false");
  CHECK(doc["tsam"]["layers"] == 3);
  CHECK(doc["paths"]["output_dir"] == "runs/a");
  CHECK(doc["stages"]["cse"] == false);
  CHECK_THROWS_AS(apply_override(doc, "novalue"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "=3"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "a..b=3"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "tsam.layers.x=3"), ConfigError);
}

TEST_CASE("load_config falls back to the environment variable") {
  TempDir dir("env");
  const std::string path = write_config(dir, {{"seed", 11}});
  ::setenv("ECPEC_CONFIG", path.c_str(), 1);
  CHECK(load_config("", {}).seed == 11);
  CHECK(load_config("", {"seed=12"}).seed == 12);
  ::unsetenv("ECPEC_CONFIG");
  CHECK(load_config("", {}).seed == 1);
  std::ofstream(dir / "broken.json") << "{ not json";
  CHECK_THROWS_AS(load_config(dir / "broken.json", {}), ConfigError);
}

TEST_CASE("corrupt_labels flips the requested fraction deterministically") {
  Rng rng(9);
  std::vector<EmotionLabel> labels;
  for (int i = 0; i < 4000; ++i) labels.push_back(emotion_from_code(static_cast<int>(rng.index(kNumEmotions))));
  CHECK(corrupt_labels(labels, 0.0, 3) == labels);
  const auto all = corrupt_labels(labels, 1.0, 3);
  for (std::size_t i = 0; i < labels.size(); ++i) CHECK(all[i] != labels[i]);
  const auto a = corrupt_labels(labels, 0.3, 3);
  CHECK(a == corrupt_labels(labels, 0.3, 3));
  std::size_t flipped = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) flipped += a[i] != labels[i];
  CHECK(static_cast<double>(flipped) / static_cast<double>(labels.size()) == doctest::Approx(0.3).epsilon(0.1));
  CHECK_THROWS_AS(corrupt_labels(labels, -0.1, 3), std::invalid_argument);
}

TEST_CASE("label maps round-trip through JSON and reject unknown names") {
  const LabelMap m = {{"c1", {EmotionLabel::joy, EmotionLabel::neutral}}, {"c2", {EmotionLabel::anger}}};
  CHECK(labels_from_json(labels_to_json(m)) == m);
  CHECK_THROWS_AS(labels_from_json(json{{"c1", {"glee"}}}), DatasetError);
  CHECK_THROWS_AS(labels_from_json(json::array()), DatasetError);
}

TEST_CASE("CLI usage errors exit with code 2") {
  CHECK(cli({}).code == 2);
  CHECK(cli({"frobnicate"}).code == 2);
  CHECK(cli({"gen-data", "--bogus"}).code == 2);
  const CliRun bad_key = cli({"gen-data", "--set", "nope=1"});
  CHECK(bad_key.code == 2);
  CHECK(bad_key.err.find("config error") != std::string::npos);
  CHECK(cli({"select-features", "--label", "speaker"}).code == 2);
  CHECK(cli({"--help"}).code == 0);
}

TEST_CASE("show-config prints the effective configuration") {
  const CliRun r = cli({"show-config", "--set", "tsam.layers=3"});
  REQUIRE(r.code == 0);
  json expected = default_config_json();
  expected["tsam"]["layers"] = 3;
  CHECK(json::parse(r.out) == to_json(config_from_json(expected)));
}

TEST_CASE("gen-data is deterministic in the seed") {
  TempDir a("gen_a"), b("gen_b");
  const CliRun ra = cli({"gen-data", "--config", write_config(a, small_config(a))});
  const CliRun rb = cli({"gen-data", "--config", write_config(b, small_config(b))});
  REQUIRE(ra.code == 0);
  REQUIRE(rb.code == 0);
  for (const char* f : {"data/train.json", "data/dev.json", "data/test.json"}) CHECK(slurp(a / f) == slurp(b / f));
  const CliRun rc = cli({"gen-data", "--config", write_config(b, small_config(b)), "--set", "seed=6"});
  REQUIRE(rc.code == 0);
  CHECK(slurp(a / "data/train.json") != slurp(b / "data/train.json"));
}

TEST_CASE("a missing checkpoint names the stage and the command to run") {
  TempDir dir("missing");
  const std::string config = write_config(dir, small_config(dir));
  REQUIRE(cli({"gen-data", "--config", config}).code == 0);
  const CliRun r = cli({"predict", "--config", config});
  CHECK(r.code == 2);
  CHECK(r.err.find("stage cee") != std::string::npos);
  CHECK(r.err.find("train-cee") != std::string::npos);
  const CliRun missing_data = cli({"train-cee", "--config", config, "--set", "paths.train=" + (dir / "none.json")});
  CHECK(missing_data.code == 2);
}

TEST_CASE("end-to-end runs are reproducible and checkpoints round-trip") {
  TempDir a("e2e_a"), b("e2e_b");
  const std::string ca = write_config(a, small_config(a));
  const std::string cb = write_config(b, small_config(b));
  train_all(ca);
  train_all(cb);
  CHECK(slurp(a / "out/cee.json") == slurp(b / "out/cee.json"));
  CHECK(slurp(a / "out/cse.json") == slurp(b / "out/cse.json"));

  const CliRun pa = cli({"predict", "--config", ca});
  const CliRun pb = cli({"predict", "--config", cb});
  REQUIRE_MESSAGE(pa.code == 0, pa.err);
  REQUIRE_MESSAGE(pb.code == 0, pb.err);
  for (const char* f : {"out/predictions.jsonl", "out/stage2_pairs.jsonl", "out/stage1_labels.json", "out/metrics.json"})
    CHECK(slurp(a / f) == slurp(b / f));

  SUBCASE("checkpoints survive save and load byte for byte") {
    TsamModel::load(a / "out/cee.json").save(a / "out/cee_again.json");
    CHECK(slurp(a / "out/cee.json") == slurp(a / "out/cee_again.json"));
    SpanModel::load(a / "out/cse.json").save(a / "out/cse_again.json");
    CHECK(slurp(a / "out/cse.json") == slurp(a / "out/cse_again.json"));
  }

  SUBCASE("metrics are well formed and stage 1 with gold labels is perfect") {
    const json m = json::parse(slurp(a / "out/metrics.json"));
    CHECK(m["erc"]["weighted_f1"].get<double>() == doctest::Approx(1.0));
    for (const char* k : {"pos_f1", "precision", "recall"}) {
      CHECK(m["cee"][k].get<double>() >= 0.0);
      CHECK(m["cee"][k].get<double>() <= 1.0);
    }
    CHECK(m["cse"]["weighted_avg_proportional_f1"].get<double>() >= 0.0);
    CHECK(m["cse"]["weighted_avg_proportional_f1"].get<double>() <= 1.0);
  }

  SUBCASE("every prediction carries a span inside its cause utterance") {
    const auto test = load_dataset(a / "data/test.json");
    std::map<std::string, const Conversation*> by_id;
    for (const auto& c : test) by_id[c.id] = &c;
    for (const auto& r : read_predictions(a / "out/predictions.jsonl")) {
      const Conversation& c = *by_id.at(r.conversation);
      REQUIRE(r.pair.span.has_value());
      CHECK(r.pair.span->first >= 0);
      CHECK(r.pair.span->first <= r.pair.span->second);
      CHECK(r.pair.span->second < static_cast<int>(c.at(r.pair.cause_index).tokens.size()));
    }
  }

  SUBCASE("evaluate reproduces the stored metrics") {
    const CliRun r = cli({"evaluate", "--config", ca, "--pred", a / "out/predictions.jsonl", "--gold",
                          a / "data/test.json", "--labels", a / "out/stage1_labels.json"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const json got = json::parse(r.out);
    const json stored = json::parse(slurp(a / "out/metrics.json"));
    CHECK(got["cee"] == stored["cee"]);
    CHECK(got["cse"] == stored["cse"]);
    CHECK(got["erc"] == stored["erc"]);
  }

  SUBCASE("ensembling identical prediction files is the identity") {
    const std::string p = a / "out/predictions.jsonl";
    const CliRun r = cli({"ensemble", "--pred", p, p, p, "--out", a / "out/voted.jsonl"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(read_predictions(a / "out/voted.jsonl") == majority_vote({read_predictions(p)}));
    CHECK(read_predictions(a / "out/voted.jsonl").size() == read_predictions(p).size());
  }

  SUBCASE("report summarizes the metrics") {
    const CliRun r = cli({"report", "--config", ca});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const json summary = json::parse(slurp(a / "out/report.json"));
    CHECK(summary.contains("cee_pos_f1"));
    CHECK(summary.contains("cse_weighted_proportional_f1"));
  }

  SUBCASE("span stage alone reads gold pairs") {
    PipelineConfig cfg = load_config(ca, {"stages.erc=false", "stages.cee=false", "paths.output_dir=" + (a / "gold")});
    const PipelineResult r = run_pipeline(cfg);
    std::size_t gold_pairs = 0;
    for (const auto& c : load_dataset(a / "data/test.json")) gold_pairs += c.pairs.size();
    CHECK(r.predictions.size() == gold_pairs);
    CHECK(r.metrics.contains("cse"));
    CHECK_FALSE(r.metrics.contains("cee"));
  }

  SUBCASE("emotion labels can come from a file") {
    const auto test = load_dataset(a / "data/test.json");
    LabelMap labels;
    for (const auto& c : test) labels[c.id] = std::vector<EmotionLabel>(c.size(), EmotionLabel::neutral);
    std::ofstream(a / "neutral.json") << labels_to_json(labels).dump();
    PipelineConfig cfg = load_config(ca, {"emotion_source=file", "paths.emotion_file=" + (a / "neutral.json"),
                                          "stages.cse=false", "paths.output_dir=" + (a / "neutral")});
    const PipelineResult r = run_pipeline(cfg);
    CHECK(r.labels == labels);
    CHECK(r.pairs.empty());
    CHECK(r.metrics["cee"]["pos_f1"].get<double>() == 0.0);
  }
}

TEST_CASE("stage 1 can run through the baseline and an external classifier") {
  TempDir dir("erc");
  const std::string config = write_config(dir, small_config(dir));
  REQUIRE(cli({"gen-data", "--config", config}).code == 0);
  const CliRun trained = cli({"train-erc-baseline", "--config", config});
  REQUIRE_MESSAGE(trained.code == 0, trained.err);

  const auto test = load_dataset(dir / "data/test.json");
  PipelineConfig cfg = load_config(config, {"emotion_source=classifier", "stages.cee=false", "stages.cse=false"});
  const LabelMap baseline = run_emotion_stage(cfg, test);
  for (const auto& c : test) CHECK(baseline.at(c.id).size() == c.size());

  cfg = load_config(config, {"emotion_source=classifier", "erc.classifier=subprocess",
                             R"(erc.command=while IFS= read -r line; do echo '{"label": "joy"}'; done)"});
  const LabelMap constant = run_emotion_stage(cfg, test);
  for (const auto& c : test)
    for (EmotionLabel l : constant.at(c.id)) CHECK(l == EmotionLabel::joy);

  cfg.label_noise = 1.0;
  const LabelMap noisy = run_emotion_stage(cfg, test);
  for (const auto& c : test)
    for (EmotionLabel l : noisy.at(c.id)) CHECK(l != EmotionLabel::joy);
}

TEST_CASE("modality fusion runs from feature selection to prediction") {
  TempDir dir("fusion");
  json base = small_config(dir);
  base["synthetic"]["params"] = {{"audio", true}};
  base["fusion"] = {{"enabled", true}, {"selection", dir / "out/selection.json"}, {"target_dim", 6}};
  const std::string config = write_config(dir, base);
  REQUIRE(cli({"gen-data", "--config", config}).code == 0);
  CHECK(cli({"train-cee", "--config", config}).code == 2);
  const CliRun sel = cli({"select-features", "--config", config});
  REQUIRE_MESSAGE(sel.code == 0, sel.err);
  const auto [selection, scaler] = selection_from_json(json::parse(slurp(dir / "out/selection.json")));
  CHECK(selection.indices.size() == 6);
  REQUIRE(cli({"train-cee", "--config", config}).code == 0);
  CHECK(TsamModel::load(dir / "out/cee.json").config().modality_dim == 6);
  const CliRun r = cli({"predict", "--config", config, "--set", "stages.cse=false"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(cli({"select-features", "--config", config, "--set", "fusion.target_dim=100000"}).code == 2);
}
