#include <doctest.h>

#include <atomic>
#include <filesystem>
#include <fstream>

#include "eval_fixtures.hpp"
#include "fixtures.hpp"
#include "lcbm/errors.hpp"
#include "lcbm/evaluation.hpp"
#include "lcbm/synthetic.hpp"

using namespace lcbm;
using namespace lcbm::testing;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("lcbm_eval_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// Replies in order, then repeats the last one; counts calls.
class ScriptedClient final : public MultimodalClient {
 public:
  explicit ScriptedClient(std::vector<std::string> replies) : replies_(std::move(replies)) {}
  std::string send(const std::string& prompt, const Image&) override {
    last_prompt = prompt;
    const std::size_t i = calls++;
    if (replies_[std::min(i, replies_.size() - 1)] == "!fail") throw OracleError("offline");
    return replies_[std::min(i, replies_.size() - 1)];
  }
  std::atomic<std::size_t> calls{0};
  std::string last_prompt;

 private:
  std::vector<std::string> replies_;
};

// K concepts; l_c equals the bias (W_c = 0) and every concept weighs 1
// toward class 0, so contributions rank concepts by their bias.
LcbmModel bias_ranked_model(const std::vector<double>& scores) {
  BackboneSpec bb;
  bb.type = "fixed";
  bb.fixed_features = Tensor({1, 2, 2}, {1, 2, 3, 4});
  ModelConfig c;
  c.num_concepts = scores.size();
  c.feature_dim = 1;
  c.num_classes = 2;
  c.grid_h = c.grid_w = 2;
  LcbmModel m(c, bb, 1);
  set_param(m, "g_c.weight", Tensor({scores.size(), 1}));
  set_param(m, "g_c.bias", Tensor({scores.size()}, scores));
  Tensor wp({scores.size(), 2});
  for (std::size_t k = 0; k < scores.size(); ++k) wp(k, 0) = 1.0;
  set_param(m, "W_p", wp);
  return m;
}

ConceptSet numbered_concepts(std::size_t K, ConceptSet::Alignment align = {}) {
  std::vector<Concept> cs;
  for (std::size_t k = 0; k < K; ++k) cs.push_back({k, "concept " + std::to_string(k), {}, {}});
  return ConceptSet(cs, std::move(align));
}

}  // namespace

TEST_CASE("presence answer parsing") {
  using P = Presence;
  CHECK(parse_presence_answer("Because... <yes/no/yes>", 3) == std::vector<P>{P::kYes, P::kNo, P::kYes});
  CHECK(parse_presence_answer("first <no> then final < Yes / NO >", 2) ==
        std::vector<P>{P::kYes, P::kNo});
  CHECK_FALSE(parse_presence_answer("<yes/no>", 3));
  CHECK_FALSE(parse_presence_answer("yes, no, yes", 3));
  CHECK_FALSE(parse_presence_answer("<yes/maybe/no>", 3));
}

TEST_CASE("mllm presence oracle") {
  const std::string tmpl = "Is {concept list} visible in this {category}? <yes/no>";
  const Image img(3, 4, 4);
  SUBCASE("well-formed reply") {
    ScriptedClient client({"ok <yes/no/yes>"});
    auto transcript = std::make_shared<Transcript>();
    MllmPresenceOracle oracle(client, tmpl, "bird", transcript);
    const auto a = oracle.query("x", img, {"red wing", "black beak", "long tail"});
    CHECK(a == std::vector<Presence>{Presence::kYes, Presence::kNo, Presence::kYes});
    CHECK(client.last_prompt ==
          "Is 'red wing', 'black beak', 'long tail' visible in this bird? <yes/no>");
    CHECK(transcript->entries().size() == 1);
  }
  SUBCASE("malformed reply is retried once, then every concept is unknown") {
    ScriptedClient client({"<yes/no>"});
    MllmPresenceOracle oracle(client, tmpl, "bird", nullptr);
    const auto a = oracle.query("x", img, {"a", "b", "c"});
    CHECK(client.calls == 2);
    CHECK(a == std::vector<Presence>(3, Presence::kUnknown));
  }
  SUBCASE("retry can recover") {
    ScriptedClient client({"<yes>", "<no/no>"});
    MllmPresenceOracle oracle(client, tmpl, "car", nullptr);
    CHECK(oracle.query("x", img, {"a", "b"}) == std::vector<Presence>{Presence::kNo, Presence::kNo});
  }
  SUBCASE("transport failure propagates after retries") {
    ScriptedClient client({"!fail"});
    MllmPresenceOracle oracle(client, tmpl, "car", nullptr, {2, std::chrono::milliseconds(0)});
    CHECK_THROWS_AS(oracle.query("x", img, {"a"}), OracleError);
    CHECK(client.calls == 2);
  }
  CHECK_THROWS_AS(MllmPresenceOracle(*std::make_unique<ScriptedClient>(std::vector<std::string>{""}),
                                     "no slot", "bird", nullptr),
                  ConfigError);
}

TEST_CASE("shipped presence templates") {
  const auto dir = std::filesystem::path(LCBM_SOURCE_DIR) / "prompts";
  for (const char* name : {"bird", "animal", "car", "lesion"}) {
    const auto t = PromptTemplates::load(dir / (std::string(name) + ".json"));
    CHECK(t.presence.find("{concept list}") != std::string::npos);
  }
  const auto skin = PromptTemplates::load(dir / "lesion.json");
  CHECK(skin.presence.find("skin") != std::string::npos);
  CHECK(PromptTemplates::load(dir / "bird.json").presence.find("skin") == std::string::npos);
}

TEST_CASE("ground-truth presence oracle") {
  GroundTruthPresenceOracle oracle({{"a", {"Red Square", "gray background"}}});
  const Image img;
  CHECK(oracle.query("a", img, {"red square", "white spot"}) ==
        std::vector<Presence>{Presence::kYes, Presence::kNo});
  CHECK(oracle.query("b", img, {"red square"}) == std::vector<Presence>{Presence::kNo});
}

TEST_CASE("annotation store round-trip and validation") {
  const auto dir = scratch("ann");
  AnnotationStore s;
  s.add(PointRecord{"img1", "wing", 3.5, 4.0});
  s.add(BoxRecord{"img1", "wing", {1, 1, 6, 8}});
  s.add(BoxRecord{"img2", "red square", {0, 0, 4, 4}});
  s.save(dir / "a.jsonl");
  const auto back = AnnotationStore::load(dir / "a.jsonl");
  CHECK(back.points("img1").size() == 1);
  CHECK(back.box("img1", "WING") == PixelBox{1, 1, 6, 8});
  CHECK(back.point("img1", "wing")->x == 3.5);
  CHECK_FALSE(back.box("img1", "tail"));
  CHECK_NOTHROW(back.check_bounds("img1", 8, 8));
  CHECK_THROWS_AS(back.check_bounds("img1", 5, 8), PreconditionError);
  CHECK_THROWS_AS(s.add(BoxRecord{"x", "k", {3, 1, 3, 5}}), ParseError);

  std::ofstream(dir / "bad.jsonl") << "{\"type\":\"circle\",\"image_id\":\"a\"}\n";
  CHECK_THROWS_AS(AnnotationStore::load(dir / "bad.jsonl"), ParseError);
  CHECK_THROWS_AS(AnnotationStore::load(dir / "missing.jsonl"), IoError);
}

TEST_CASE("precision and recall count oracle answers") {
  // Concepts 0..9 are the top-10 by contribution; 6 of them are present.
  std::vector<double> scores;
  for (int k = 0; k < 13; ++k) scores.push_back(13.0 - k);
  const auto model = bias_ranked_model(scores);
  const auto concepts = numbered_concepts(13, {{"c0", {0, 10, 11, 12}}});
  GroundTruthPresenceOracle oracle({{"img", {"concept 0", "concept 2", "concept 3", "concept 4",
                                             "concept 5", "concept 6", "concept 10",
                                             "concept 11", "concept 12"}}});
  EvalInputs in{&model, &concepts, {"c0", "c1"}, nullptr, &oracle};
  const auto rep = evaluate(in, {{"img", Image(3, 4, 4), 0}});
  CHECK(*rep.precision == doctest::Approx(0.6));
  CHECK(*rep.recall == doctest::Approx(0.25));
  CHECK(*rep.accuracy == 1.0);
  CHECK_FALSE(rep.inclusion);

  SUBCASE("yes to everything gives precision 1") {
    ScriptedClient yes({"<" + std::string("yes/yes/yes/yes/yes/yes/yes/yes/yes/yes/yes/yes/yes") + ">"});
    MllmPresenceOracle mllm(yes, "{concept list}", "thing", nullptr);
    EvalInputs in2{&model, &concepts, {"c0", "c1"}, nullptr, &mllm};
    const auto r2 = evaluate(in2, {{"img", Image(3, 4, 4), 0}});
    CHECK(*r2.precision == 1.0);
    CHECK(*r2.recall == doctest::Approx(0.25));
  }
  SUBCASE("transport failure skips the image and reports it") {
    ScriptedClient down({"!fail"});
    MllmPresenceOracle mllm(down, "{concept list}", "thing", nullptr, {1, std::chrono::milliseconds(0)});
    EvalInputs in2{&model, &concepts, {"c0", "c1"}, nullptr, &mllm};
    const auto r2 = evaluate(in2, {{"img", Image(3, 4, 4), 0}});
    CHECK_FALSE(r2.precision);
    REQUIRE(r2.skipped.size() == 1);
    CHECK(r2.skipped[0]["stage"] == "presence");
  }
  SUBCASE("score-only ranking") {
    EvalOptions o;
    o.score_only = true;
    o.k = 3;
    const auto r2 = evaluate(in, {{"img", Image(3, 4, 4), 0}}, o);
    CHECK(r2.settings["ranking"] == "concept score");
    CHECK(r2.details[0]["selected"].size() == 3);
    CHECK(*r2.precision == doctest::Approx(2.0 / 3.0));
  }
}

TEST_CASE("recall over a disjoint or covered ground truth") {
  const auto model = bias_ranked_model({5, 4, 3, 2, 1, -1});
  SUBCASE("covered") {
    const auto concepts = numbered_concepts(6, {{"c0", {0, 1}}});
    GroundTruthPresenceOracle oracle({{"i", {"concept 0", "concept 1"}}});
    EvalInputs in{&model, &concepts, {"c0", "c1"}, nullptr, &oracle};
    CHECK(*evaluate(in, {{"i", Image(3, 2, 2), 0}}).recall == 1.0);
  }
  SUBCASE("disjoint") {
    const auto concepts = numbered_concepts(6, {{"c0", {5}}});
    GroundTruthPresenceOracle oracle({{"i", std::set<std::string>{"concept 5"}}});
    EvalInputs in{&model, &concepts, {"c0", "c1"}, nullptr, &oracle};
    CHECK(*evaluate(in, {{"i", Image(3, 2, 2), 0}}).recall == 0.0);
  }
  SUBCASE("no ground truth skips the image") {
    const auto concepts = numbered_concepts(6);
    GroundTruthPresenceOracle oracle(std::map<std::string, std::set<std::string>>{});
    EvalInputs in{&model, &concepts, {"c0", "c1"}, nullptr, &oracle};
    CHECK_FALSE(evaluate(in, {{"i", Image(3, 2, 2), 0}}).recall);
  }
}

TEST_CASE("full evaluation on synthetic data") {
  SyntheticSpec spec;
  const auto items = generate_synthetic(spec);
  const auto concepts = synthetic_concept_set(2);
  const auto annotations = annotate_synthetic(items);
  GroundTruthPresenceOracle oracle(synthetic_presence(items));
  const auto bb = BackboneSpec::fixture();
  LcbmModel model(config_for(bb, concepts.size(), 2, 2, 2), bb, 3);
  std::vector<EvalItem> eval;
  for (const auto& it : items) eval.push_back({it.id, it.image, it.label});
  EvalInputs in{&model, &concepts, {"red", "blue"}, &annotations, &oracle};
  EvalOptions o;
  o.k = 4;
  o.overlay_dir = scratch("overlays");
  const auto rep = evaluate(in, eval, o);

  CHECK(rep.images == items.size());
  CHECK(rep.details.size() == items.size());
  CHECK(rep.accuracy);
  CHECK(rep.precision);
  std::size_t ranked = 0;
  for (const auto& d : rep.details) ranked += d["match_ranks"].size();
  std::size_t hist = 0;
  for (auto c : rep.match_rank_histogram) hist += c;
  CHECK(rep.match_rank_histogram.size() == 10);
  CHECK(hist == ranked);
  CHECK(ranked >= items.size());  // every image has a concept-level square box
  REQUIRE(rep.patch_proto_ratio);
  CHECK(*rep.patch_proto_ratio >= 0.0);
  CHECK(*rep.patch_proto_ratio <= 1.0);
  for (auto v : {rep.inclusion, rep.miou, rep.rep})
    if (v) CHECK((*v >= 0.0 && *v <= 1.0));

  const auto again = evaluate(in, eval, o);
  CHECK(again.summary().dump() == rep.summary().dump());
  o.max_in_flight = 4;
  CHECK(evaluate(in, eval, o).summary().dump() == rep.summary().dump());

  const auto out = scratch("report");
  rep.save(out);
  CHECK(std::filesystem::exists(out / "summary.json"));
  CHECK(std::filesystem::exists(out / "details.jsonl"));
}

TEST_CASE("missing annotations leave localization out with a notice") {
  const auto items = generate_synthetic({});
  const auto concepts = synthetic_concept_set(2);
  const auto bb = BackboneSpec::fixture();
  LcbmModel model(config_for(bb, concepts.size(), 2, 2, 2), bb, 3);
  GroundTruthPresenceOracle oracle(synthetic_presence(items));
  EvalInputs in{&model, &concepts, {"red", "blue"}, nullptr, &oracle};
  const auto rep = evaluate(in, {{items[0].id, items[0].image, items[0].label}});
  CHECK_FALSE(rep.miou);
  CHECK(rep.match_rank_histogram.empty());
  CHECK(rep.precision);
  CHECK_FALSE(rep.notices.empty());
}
