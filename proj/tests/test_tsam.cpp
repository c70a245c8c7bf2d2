#include "doctest.h"
#include "support/gradcheck.hpp"
#include "support/toy.hpp"

#include "ecpec/nn.hpp"
#include "ecpec/tsam.hpp"

#include <cmath>
#include <filesystem>

using namespace ecpec;
using testing::toy_conversation;
using E = EmotionLabel;

namespace {

Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

// Arrays read by the stand-alone layer functions under "x".
ParameterStore layer_store(int d, Rng& rng, double scale = 1.0) {
  ParameterStore s;
  nn::init_attention(s, "x.ean", d, rng);
  for (const char* r : {".intra", ".inter"}) {
    s.set(std::string("x.san") + r + ".w", random_matrix(rng, d, d, scale));
    s.set(std::string("x.san") + r + ".a_src", random_matrix(rng, d, 1, scale));
    s.set(std::string("x.san") + r + ".a_dst", random_matrix(rng, d, 1, scale));
  }
  s.set("x.min.w1", random_matrix(rng, d, d, scale));
  s.set("x.min.w2", random_matrix(rng, d, d, scale));
  s.set("x.table", random_matrix(rng, kNumEmotions, d));
  return s;
}

Conversation speakers(const std::vector<std::string>& names) {
  std::vector<testing::ToyLine> lines;
  for (const auto& n : names) lines.push_back({n, "hello there", E::neutral});
  return toy_conversation("spk", lines);
}

}  // namespace

TEST_CASE("config validation and json") {
  TsamConfig c;
  CHECK_NOTHROW(c.validate());
  c.threshold = 1.0;
  CHECK_THROWS(c.validate());
  c.threshold = 0.5;
  c.n_heads = 3;
  CHECK_THROWS(c.validate());
  c.n_heads = 4;
  c.layers = 0;
  CHECK_THROWS(c.validate());
  CHECK(to_json(tsam_config_from_json(to_json(TsamConfig{}))) == to_json(TsamConfig{}));
  CHECK_THROWS_AS(tsam_config_from_json({{"layer", 2}}), ConfigError);
  CHECK(train_config_from_json({{"epochs", 7}}).epochs == 7);
  CHECK_THROWS_AS(train_config_from_json({{"epoch", 7}}), ConfigError);
}

TEST_CASE("speaker graph examples") {
  {
    const auto g = build_speaker_graph(speakers({"A", "A"}), 2);
    CHECK(g.intra.all());
    CHECK_FALSE(g.inter.any());
  }
  {
    const auto g = build_speaker_graph(speakers({"A", "B", "A"}), 3);
    Mask intra = Mask::Constant(3, 3, false);
    intra(0, 0) = intra(0, 2) = intra(2, 0) = intra(2, 2) = intra(1, 1) = true;
    CHECK(g.intra == intra);
    Mask inter = Mask::Constant(3, 3, true);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) inter(i, j) = !intra(i, j);
    CHECK(g.inter == inter);
  }
  {
    const auto g = build_speaker_graph(speakers({"A", "", "B"}), 3);
    CHECK(g.known == std::vector<bool>{true, false, true});
    CHECK_FALSE(g.intra.row(1).any());
    CHECK_FALSE(g.intra.col(1).any());
    CHECK_FALSE(g.inter.row(1).any());
    CHECK_FALSE(g.inter.col(1).any());
    CHECK(g.inter(0, 2));
  }
  CHECK(build_speaker_graph(speakers({"A", "B", "A"}), 2).intra.rows() == 2);
}

TEST_CASE("speaker graph invariants on random conversations") {
  for (const auto& c : generate_synthetic(8, 60)) {
    const auto g = build_speaker_graph(c, static_cast<int>(c.size()));
    for (int i = 0; i < static_cast<int>(c.size()); ++i) {
      const bool ki = g.known[static_cast<std::size_t>(i)];
      CHECK(g.intra(i, i) == ki);
      for (int j = 0; j < static_cast<int>(c.size()); ++j) {
        const bool kj = g.known[static_cast<std::size_t>(j)];
        const bool same = c.at(i + 1).speaker == c.at(j + 1).speaker;
        CHECK(g.intra(i, j) == (ki && kj && same));
        CHECK(g.inter(i, j) == (ki && kj && !same));
        CHECK_FALSE((g.intra(i, j) && g.inter(i, j)));
      }
    }
  }
}

TEST_CASE("single-key emotion attention is a projection of the emotion embedding") {
  Rng rng(1);
  const int d = 8;
  auto s = layer_store(d, rng);
  ad::Graph g;
  auto u = g.constant(random_matrix(rng, 1, d));
  auto out = emotion_attention(g, s, "x.ean", u, std::vector<E>{E::joy}, "x.table", 2);
  const Matrix e = s.get("x.table").row(code_of(E::joy));
  const Matrix v = e * s.get("x.ean.v.w") + s.get("x.ean.v.b");
  const Matrix expected = v * s.get("x.ean.o.w") + s.get("x.ean.o.b");
  CHECK((out.value() - expected).norm() < 1e-12);
}

TEST_CASE("identical labels make emotion attention independent of the query") {
  Rng rng(2);
  const int d = 8;
  auto s = layer_store(d, rng);
  ad::Graph g;
  auto out = emotion_attention(g, s, "x.ean", g.constant(random_matrix(rng, 4, d)),
                               std::vector<E>(4, E::anger), "x.table", 2);
  for (int i = 1; i < 4; ++i) CHECK((out.value().row(i) - out.value().row(0)).norm() < 1e-12);
}

TEST_CASE("emotion attention rows sum to one and masked keys get zero weight") {
  Rng rng(3);
  const int d = 8;
  for (int draw = 0; draw < 20; ++draw) {
    auto s = layer_store(d, rng);
    ad::Graph g;
    std::vector<bool> keys{true, false, true, true};
    std::vector<Matrix> weights;
    auto out = emotion_attention(g, s, "x.ean", g.constant(random_matrix(rng, 4, d)),
                                 g.constant(random_matrix(rng, 4, d)), 2, &keys, &weights);
    CHECK(out.value().allFinite());
    REQUIRE(weights.size() == 2);
    for (const auto& w : weights) {
      CHECK(w.col(1).isZero(0));
      for (int i = 0; i < 4; ++i) CHECK(std::abs(w.row(i).sum() - 1.0) < 1e-6);
    }
  }
  ad::Graph g;
  auto s = layer_store(d, rng);
  CHECK_THROWS(emotion_attention(g, s, "x.ean", g.constant(random_matrix(rng, 2, d)), std::vector<E>{E::joy},
                                 "x.table", 2));
}

TEST_CASE("speaker attention on a singleton and on unknown speakers") {
  Rng rng(4);
  const int d = 8;
  auto s = layer_store(d, rng);
  {
    ad::Graph g;
    const Matrix u = random_matrix(rng, 1, d);
    std::vector<Matrix> weights;
    auto out = speaker_attention(g, s, "x.san", g.constant(u), build_speaker_graph(speakers({"A"}), 1), &weights);
    CHECK((out.value() - u * s.get("x.san.intra.w")).norm() < 1e-12);
    CHECK(weights[0](0, 0) == 1.0);
    CHECK(weights[1](0, 0) == 0.0);
  }
  {
    ad::Graph g;
    std::vector<Matrix> weights;
    auto out = speaker_attention(g, s, "x.san", g.constant(random_matrix(rng, 3, d)),
                                 build_speaker_graph(speakers({"A", "", "B"}), 3), &weights);
    CHECK(out.value().row(1).isZero(0));
    CHECK(out.value().allFinite());
    for (const auto& w : weights) CHECK(w.col(1).isZero(0));
  }
}

TEST_CASE("masked interaction degenerate cases") {
  Rng rng(5);
  const int d = 8;
  auto s = layer_store(d, rng);
  {
    ad::Graph g;
    auto mi = masked_interaction(g, s, "x.min", g.constant(random_matrix(rng, 3, d)),
                                 g.constant(random_matrix(rng, 3, d)), {false, false, false});
    CHECK(mi.emotion.value().isZero(0));
    CHECK(mi.speaker.value().isZero(0));
  }
  {
    ad::Graph g;
    const Matrix he = random_matrix(rng, 1, d), hs = random_matrix(rng, 1, d);
    auto mi = masked_interaction(g, s, "x.min", g.constant(he), g.constant(hs), {true});
    CHECK(mi.emotion.value() == hs);
    CHECK(mi.speaker.value() == he);
  }
}

TEST_CASE("masking soundness over random parameter draws") {
  Rng rng(6);
  const int d = 8;
  for (int draw = 0; draw < 100; ++draw) {
    auto s = layer_store(d, rng, 3.0);
    const int t = 2 + static_cast<int>(rng.index(4));
    std::vector<std::string> names;
    for (int i = 0; i < t; ++i) names.push_back(rng.bernoulli(0.3) ? "" : std::string(1, static_cast<char>('A' + rng.index(3))));
    const auto graph = build_speaker_graph(speakers(names), t);
    ad::Graph g;
    auto u = g.constant(random_matrix(rng, t, d, 3.0));
    std::vector<Matrix> san_w, min_w;
    auto hs = speaker_attention(g, s, "x.san", u, graph, &san_w);
    auto he = g.constant(random_matrix(rng, t, d, 3.0));
    auto mi = masked_interaction(g, s, "x.min", he, hs, graph.known, &min_w);
    CHECK(hs.value().allFinite());
    CHECK(mi.emotion.value().allFinite());
    CHECK(mi.speaker.value().allFinite());
    for (int r = 0; r < 2; ++r) {
      const Mask& m = r == 0 ? graph.intra : graph.inter;
      for (int i = 0; i < t; ++i) {
        for (int j = 0; j < t; ++j)
          if (!m(i, j)) CHECK(san_w[static_cast<std::size_t>(r)](i, j) == 0.0);
        if (m.row(i).any()) CHECK(std::abs(san_w[static_cast<std::size_t>(r)].row(i).sum() - 1.0) < 1e-6);
      }
    }
    for (int i = 0; i < t; ++i) {
      const bool known = graph.known[static_cast<std::size_t>(i)];
      if (!known) CHECK(hs.value().row(i).isZero(0));
      for (const auto& w : min_w)
        for (int r = 0; r < t; ++r)
          if (!known) CHECK(w(r, i) == 0.0);
    }
    const bool any_known = std::find(graph.known.begin(), graph.known.end(), true) != graph.known.end();
    if (!any_known) {
      CHECK(mi.emotion.value().isZero(0));
      CHECK(mi.speaker.value().isZero(0));
    }
  }
}

TEST_CASE("cause probabilities and thresholding") {
  Matrix logits(4, 1);
  logits << 0.0, 2.0, -3.0, 0.8472978603872037;  // the last one is logit(0.7)
  const auto p = predict_causes(logits, 4, 0.5);
  REQUIRE(p.size() == 4);
  for (int j = 0; j < 4; ++j) {
    CHECK(p[static_cast<std::size_t>(j)].candidate_index == j + 1);
    CHECK(p[static_cast<std::size_t>(j)].probability > 0.0);
    CHECK(p[static_cast<std::size_t>(j)].probability < 1.0);
  }
  CHECK(p[0].probability == 0.5);
  CHECK(p[0].is_cause);  // ties count as causes
  CHECK(p[3].probability == doctest::Approx(0.7));
  CHECK(p[3].is_cause);
  CHECK_FALSE(p[2].is_cause);
  CHECK(predict_causes(logits, 2, 0.5).size() == 2);

  Rng rng(7);
  for (int draw = 0; draw < 50; ++draw) {
    const Matrix z = random_matrix(rng, 5, 1, 3.0);
    const auto a = predict_causes(z, 5, 0.5);
    const auto b = predict_causes(2.0 * z, 5, 0.5);
    for (std::size_t j = 0; j < a.size(); ++j) CHECK(a[j].is_cause == b[j].is_cause);
  }
}

TEST_CASE("zero scorer weights give probability one half") {
  const auto c = testing::four_turns();
  auto model = testing::toy_tsam({c});
  model.params().get("tsam.fc2.w").setZero();
  model.params().get("tsam.fc2.b").setZero();
  for (const auto& p : model.score(c, 4, c.gold_emotions())) CHECK(p.probability == 0.5);
}

TEST_CASE("dice loss hand-computed values") {
  Matrix gold(2, 2);
  gold << 1, 0, 0, 1;
  CHECK(dice_loss(gold, gold) == doctest::Approx(0.0).epsilon(1e-15));
  Matrix orth(2, 2);
  orth << 0, 1, 1, 0;
  // Per class: 1 - eps / (1 + 1 + eps) with eps = 1.
  CHECK(std::abs(dice_loss(orth, gold) - 2.0 / 3.0) < 1e-12);
  Matrix soft(2, 2);
  soft << 0.7, 0.3, 0.4, 0.6;
  const double c0 = 1 - (2 * 0.7 + 1) / (0.49 + 0.16 + 1 + 1);
  const double c1 = 1 - (2 * 0.6 + 1) / (0.09 + 0.36 + 1 + 1);
  CHECK(std::abs(dice_loss(soft, gold) - (c0 + c1) / 2) < 1e-12);
  // Only classes present in gold are averaged.
  Matrix gold3(2, 3), p3(2, 3);
  gold3 << 1, 0, 0, 1, 0, 0;
  p3 << 0.5, 0.25, 0.25, 0.5, 0.5, 0.0;
  const double only = 1 - (2 * 1.0 + 1) / (0.5 + 2 + 1);
  CHECK(std::abs(dice_loss(p3, gold3) - only) < 1e-12);
  CHECK_THROWS(dice_loss(Matrix(0, 2), Matrix(0, 2)));
}

TEST_CASE("dice loss stays in the unit interval") {
  Rng rng(8);
  for (int draw = 0; draw < 300; ++draw) {
    const int n = 1 + static_cast<int>(rng.index(6));
    Matrix logits = random_matrix(rng, n, kNumEmotions, 3.0);
    Matrix p = (logits.array().colwise() - logits.rowwise().maxCoeff().array()).exp();
    p.array().colwise() /= p.rowwise().sum().array();
    Matrix gold = Matrix::Zero(n, kNumEmotions);
    for (int i = 0; i < n; ++i) gold(i, static_cast<Eigen::Index>(rng.index(kNumEmotions))) = 1.0;
    const double eps = rng.uniform(0.0, 2.0);
    const double l = dice_loss(p, gold, eps);
    CHECK(l >= 0.0);
    CHECK(l <= 1.0);
  }
}

TEST_CASE("composite loss gradients match finite differences") {
  const auto c = testing::four_turns();
  auto model = testing::toy_tsam({c});
  const auto labels = c.gold_emotions();
  auto r = testing::check_gradients(model.params(), [&](ad::Graph& g) { return model.loss(g, c, labels); });
  CHECK(r.arrays_checked == static_cast<int>(model.params().size()));
  CHECK_MESSAGE(r.max_rel_error < 1e-4, "worst " << r.worst_array << " " << r.max_rel_error);
}

TEST_CASE("turn-distance emotion embedding") {
  const auto c = testing::four_turns();
  CHECK_FALSE(testing::toy_tsam({c}).params().contains("tsam.emotion_distance"));
  auto model = testing::toy_tsam({c}, 8, 3, true);
  REQUIRE(model.params().contains("tsam.emotion_distance"));
  CHECK(model.params().get("tsam.emotion_distance").rows() == model.encoder().config().n_segments);
  const auto labels = c.gold_emotions();
  auto r = testing::check_gradients(model.params(), [&](ad::Graph& g) { return model.loss(g, c, labels); });
  CHECK(r.arrays_checked == static_cast<int>(model.params().size()));
  CHECK_MESSAGE(r.max_rel_error < 1e-4, "worst " << r.worst_array << " " << r.max_rel_error);

  // Scores depend on the embedding of the target row.
  const auto before = model.score(c, 4, labels);
  model.params().get("tsam.emotion_distance").row(0).setZero();
  const auto after = model.score(c, 4, labels);
  bool changed = false;
  for (std::size_t j = 0; j < before.size(); ++j) changed |= before[j].probability != after[j].probability;
  CHECK(changed);

  const auto loaded = TsamModel::from_json(model.to_json());
  CHECK(loaded.config().emotion_distance);
  CHECK(loaded.params() == model.params());
}

TEST_CASE("without the auxiliary term the loss is the pair loss") {
  const auto c = testing::four_turns();
  auto model = testing::toy_tsam({c});
  model.mutable_config().lambda_aux = 0.0;
  ad::Graph g;
  CHECK(model.loss(g, c, c.gold_emotions()).scalar() == doctest::Approx(model.pair_loss(c, c.gold_emotions())).epsilon(1e-14));
  model.mutable_config().lambda_aux = 0.2;
  ad::Graph g2;
  CHECK(model.loss(g2, c, c.gold_emotions()).scalar() > model.pair_loss(c, c.gold_emotions()));
}

TEST_CASE("scores never depend on later utterances") {
  const auto c = testing::four_turns();
  auto model = testing::toy_tsam({c});
  Conversation altered = c;
  altered.utterances[3].tokens = {"completely", "different", "words"};
  altered.utterances[3].speaker = "Phoebe";
  const auto a = model.score(c, 3, c.gold_emotions());
  const auto b = model.score(altered, 3, c.gold_emotions());
  REQUIRE(a.size() == 3);
  for (std::size_t j = 0; j < a.size(); ++j) CHECK(a[j].probability == b[j].probability);
}

TEST_CASE("pair inference edge cases") {
  const auto c = testing::four_turns();
  const auto model = testing::toy_tsam({c});
  CHECK(infer_pairs(model, c, std::vector<E>(4, E::neutral), 0.5).empty());
  CHECK(infer_pairs(model, c, c.gold_emotions(), 1.0).empty());
  const auto all = infer_pairs(model, c, c.gold_emotions(), 1e-9);
  CHECK(all.size() == 2 + 4);  // every candidate of targets 2 and 4
  for (const auto& p : all) {
    CHECK(p.cause_index <= p.emotion_index);
    CHECK(p.emotion == c.at(p.emotion_index).emotion);
  }
}

TEST_CASE("checkpoint round trip") {
  const auto c = testing::four_turns();
  const auto model = testing::toy_tsam({c});
  const auto path = (std::filesystem::temp_directory_path() / "ecpec_tsam.json").string();
  model.save(path);
  const auto loaded = TsamModel::load(path);
  CHECK(loaded.params() == model.params());
  CHECK(loaded.vocab() == model.vocab());
  const auto a = model.score(c, 4, c.gold_emotions());
  const auto b = loaded.score(c, 4, c.gold_emotions());
  for (std::size_t j = 0; j < a.size(); ++j) CHECK(a[j].probability == b[j].probability);

  auto j = model.to_json();
  j["params"]["arrays"]["tsam.extra"] = {{"shape", {1, 1}}, {"data", {"0x0p+0"}}};
  CHECK_THROWS_AS(TsamModel::from_json(j), ParameterError);
  std::filesystem::remove(path);
}

TEST_CASE("modality features are required once fusion is configured") {
  const auto c = testing::four_turns();
  TsamConfig t;
  t.dim = 8;
  t.n_heads = 2;
  t.hidden = 8;
  t.modality_dim = 3;
  const auto model = TsamModel::create(testing::toy_encoder(), t, Vocabulary::build({c}));
  CHECK_THROWS(model.score(c, 4, c.gold_emotions()));
  const Matrix feats = Matrix::Ones(4, 3);
  CHECK(model.score(c, 4, c.gold_emotions(), &feats).size() == 4);
}

TEST_CASE("training lowers the loss and reports each epoch") {
  const auto data = generate_synthetic(12, 12);
  auto model = testing::toy_tsam(data);
  TrainConfig config;
  config.epochs = 4;
  config.lr = 1e-2;
  int calls = 0;
  const auto history = train_cee(model, data, {}, config, [&](const EpochRecord&) { ++calls; });
  CHECK(calls == 4);
  REQUIRE(history.size() == 4);
  CHECK(history.back().loss < history.front().loss);
  CHECK(history.front().pos_f1_dev == 0.0);
  CHECK_THROWS(train_cee(model, {}, {}, config));
}

TEST_CASE("divergence aborts training") {
  const auto data = generate_synthetic(12, 4);
  auto model = testing::toy_tsam(data);
  model.params().get("tsam.fc2.b")(0, 0) = std::nan("");
  TrainConfig config;
  config.epochs = 1;
  CHECK_THROWS_AS(train_cee(model, data, {}, config), DivergenceError);
}
