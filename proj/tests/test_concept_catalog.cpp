#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "lcbm/concept_catalog.hpp"

using namespace lcbm;
namespace fs = std::filesystem;

namespace {

PromptTemplates cub_templates() {
  PromptTemplates t;
  t.name = "cub";
  t.category = "bird";
  t.attribute_queries = {"What can be the color of a bird's {part}?"};
  t.alignment =
      "Find a correct description for the {part} of {class} from the following list: "
      "[{concepts}]";
  return t;
}

ConceptSet three_concepts(ConceptSet::Alignment alignment = {}) {
  return ConceptSet({{0, "black beak", "beak", "black"},
                     {1, "red wing", "wing", "red"},
                     {2, "forked tail", "tail", "forked"}},
                    std::move(alignment));
}

fs::path temp_path(const std::string& name) {
  auto dir = fs::temp_directory_path() / "lcbm_concept_tests";
  fs::create_directories(dir);
  return dir / name;
}

MockLLMClient mock(std::vector<MockLLMClient::Rule> rules,
                   std::optional<std::string> fallback = std::nullopt) {
  return MockLLMClient(std::move(rules), std::move(fallback));
}

class FailingClient : public LLMClient {
 public:
  int calls = 0;
  std::string send(const std::string&) override {
    ++calls;
    throw OracleError("connection refused");
  }
};

}  // namespace

TEST_CASE("generate_concepts composes attribute-part concepts") {
  MockLLMClient llm = mock({{"color of a bird's tail",
                      "forked tail, rounded tail, …, barred white tail"},
                     {"Black Footed Albatross", "- rounded tail"}});
  GenerationLog log;
  auto set = generate_concepts({"tail"}, {"Black Footed Albatross"}, llm,
                               cub_templates(), &log, {{1, std::chrono::milliseconds(0)}, 1});
  REQUIRE(set.find("forked tail"));
  CHECK(set.size() == 3);
  const auto& c = set.at(*set.find("barred white tail"));
  CHECK(c.part == "tail");
  CHECK(c.attribute == "barred white");
  CHECK(set.aligned_to("Black Footed Albatross") ==
        std::set<std::size_t>{*set.find("rounded tail")});
}

TEST_CASE("generate_concepts rejects empty inputs") {
  MockLLMClient llm = mock({}, "x");
  CHECK_THROWS_AS(generate_concepts({}, {"A"}, llm, cub_templates()), PreconditionError);
  CHECK_THROWS_AS(generate_concepts({"beak"}, {}, llm, cub_templates()), PreconditionError);
}

TEST_CASE("three attributes by two parts gives six concepts") {
  MockLLMClient llm = mock({{"bird's beak", "1. black\n2. yellow\n3. hooked"},
                     {"bird's wing", "- black\n- yellow\n- hooked"},
                     {"Find a correct", "none"}});
  auto set = generate_concepts({"beak", "wing"}, {"A"}, llm, cub_templates());
  CHECK(set.size() == 6);
  CHECK(set.at(3).text == "black wing");
}

TEST_CASE("duplicates merge case-insensitively, near-duplicates do not") {
  MockLLMClient llm = mock({{"bird's beak", "Black beak, black, grey, gray"},
                     {"Find a correct", "none"}});
  auto set = generate_concepts({"beak"}, {"A"}, llm, cub_templates());
  REQUIRE(set.size() == 3);
  CHECK(set.at(0).text == "Black beak");
  CHECK(set.find("grey beak"));
  CHECK(set.find("gray beak"));
}

TEST_CASE("generation with a mock is reproducible") {
  MockLLMClient llm = mock({{"bird's beak", "black, yellow"},
                     {"bird's wing", "striped, red"},
                     {"Find a correct", "black beak, red wing"}});
  auto a = generate_concepts({"beak", "wing"}, {"A", "B"}, llm, cub_templates());
  GenerationOptions parallel;
  parallel.max_in_flight = 4;
  auto b = generate_concepts({"beak", "wing"}, {"A", "B"}, llm, cub_templates(), nullptr,
                             parallel);
  CHECK(a == b);
}

TEST_CASE("client failure after retries raises a generation error with transcript") {
  FailingClient llm;
  GenerationOptions opts;
  opts.retry = {3, std::chrono::milliseconds(1)};
  try {
    generate_concepts({"beak"}, {"A"}, llm, cub_templates(), nullptr, opts);
    FAIL("expected GenerationError");
  } catch (const GenerationError& e) {
    CHECK(llm.calls == 3);
    REQUIRE(e.transcript());
    CHECK(e.transcript()->entries().size() == 3);
    CHECK(e.transcript()->entries().back().error == "connection refused");
  }
}

TEST_CASE("unparseable response keeps the raw text") {
  MockLLMClient llm = mock({}, "   \n  ");
  try {
    generate_concepts({"beak"}, {"A"}, llm, cub_templates());
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.raw() == "   \n  ");
  }
}

TEST_CASE("list parsing handles bullets, numbers and comma lists") {
  CHECK(parse_list_response("- **Black**: common\n- Yellow.") ==
        std::vector<std::string>{"Black", "Yellow"});
  CHECK(parse_list_response("Answer: [forked tail, rounded tail]") ==
        std::vector<std::string>{"forked tail", "rounded tail"});
  CHECK(parse_list_response("1) <orange> <headlight>") ==
        std::vector<std::string>{"orange headlight"});
}

TEST_CASE("alignment maps answers to concept ids") {
  const std::string tmpl = "Which of [{concepts}] fit {class}?";
  SUBCASE("single match") {
    MockLLMClient llm = mock({{"fit A", "black beak"}, {"fit B", "none"}});
    auto set = align_concepts_to_classes(three_concepts(), {"A"}, llm, tmpl);
    CHECK(set.class_alignment() == ConceptSet::Alignment{{"A", {0}}});
  }
  SUBCASE("unknown concept is skipped with a warning") {
    MockLLMClient llm = mock({{"fit A", "Black Beak, purple halo"}});
    std::vector<std::string> warnings;
    auto set = align_concepts_to_classes(three_concepts(), {"A"}, llm, tmpl, &warnings);
    CHECK(set.aligned_to("A") == std::set<std::size_t>{0});
    REQUIRE(warnings.size() == 1);
    CHECK(warnings[0].find("purple halo") != std::string::npos);
  }
  SUBCASE("shared concept counts once in the union") {
    MockLLMClient llm = mock({{"fit A", "black beak, red wing"}, {"fit B", "red wing, forked tail"}});
    auto set = align_concepts_to_classes(three_concepts(), {"A", "B"}, llm, tmpl);
    std::set<std::size_t> all;
    for (const auto& [label, ids] : set.class_alignment()) all.insert(ids.begin(), ids.end());
    CHECK(all.size() == 3);
    CHECK(set.all_aligned());
  }
}

TEST_CASE("prune_unaligned") {
  SUBCASE("one unaligned concept") {
    auto pruned = prune_unaligned(three_concepts({{"A", {0}}, {"B", {2}}}));
    REQUIRE(pruned.size() == 2);
    CHECK(pruned.at(0).text == "black beak");
    CHECK(pruned.at(1).id == 1);
    CHECK(pruned.at(1).text == "forked tail");
    CHECK(pruned.aligned_to("B") == std::set<std::size_t>{1});
    CHECK(prune_unaligned(pruned) == pruned);
  }
  SUBCASE("all aligned is the identity") {
    auto set = three_concepts({{"A", {0, 1, 2}}});
    CHECK(prune_unaligned(set) == set);
  }
  SUBCASE("nothing aligned is an error") {
    CHECK_THROWS_AS(prune_unaligned(three_concepts({{"A", {}}})), PreconditionError);
  }
}

TEST_CASE("concept files round-trip") {
  std::vector<ConceptSet> fixtures{
      three_concepts({{"A", {0, 1}}, {"B", {2}}}),
      ConceptSet({{0, "reddish skin", "skin", "reddish"}}, {{"eczema", {0}}}),
      ConceptSet({{0, "bump", std::nullopt, std::nullopt}, {1, "wide grille", "grille", "wide"}},
                 {{"x", {1}}, {"y", {}}})};
  for (std::size_t i = 0; i < fixtures.size(); ++i) {
    auto c = temp_path("c" + std::to_string(i) + ".jsonl");
    auto a = temp_path("a" + std::to_string(i) + ".jsonl");
    save_concepts(fixtures[i], c, a);
    CHECK(load_concepts(c, a) == fixtures[i]);
  }
}

TEST_CASE("concept file errors") {
  CHECK_THROWS_AS(load_concepts(temp_path("does_not_exist.jsonl")), IoError);

  auto dup = temp_path("dup.jsonl");
  std::ofstream(dup) << R"({"id":0,"text":"black beak","part":"beak","attribute":"black"})"
                     << "\n"
                     << R"({"id":0,"text":"red wing","part":"wing","attribute":"red"})"
                     << "\n";
  try {
    load_concepts(dup);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }

  auto bad = temp_path("bad.jsonl");
  std::ofstream(bad) << R"({"id":0,"text":"black beak"})" << "\n{not json\n";
  try {
    load_concepts(bad);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
}
