#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "lcbm/embedding_cache.hpp"
#include "lcbm/errors.hpp"
#include "lcbm/pipeline.hpp"

using namespace lcbm;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path fresh(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("lcbm_pipeline_" + std::to_string(::getpid())) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// A fixture with its config loaded and concepts generated.
json fixture_config(const fs::path& dir, std::size_t per_class = 4) {
  SyntheticSpec spec;
  spec.per_class = per_class;
  write_synthetic_fixture(dir, spec);
  return load_run_config(dir / "config.json");
}

int run_cli(const std::string& args) {
  const int status = std::system((std::string(LCBM_CLI) + " " + args + " > /dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config overrides and validation") {
  json cfg = default_run_config();
  apply_override(cfg, "model.k1=4");
  apply_override(cfg, "eval.presence=none");
  apply_override(cfg, "backbone.layers.1.out_channels=12");
  CHECK(cfg["model"]["k1"] == 4);
  CHECK(cfg["eval"]["presence"] == "none");
  CHECK(cfg["backbone"]["layers"][1]["out_channels"] == 12);
  CHECK(cfg["backbone"]["layers"][0]["out_channels"] == 6);
  CHECK_THROWS_AS(apply_override(cfg, "model.nope=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(cfg, "no equals sign"), UsageError);

  CHECK_THROWS_AS(load_run_config(std::nullopt, {"model.k2=3"}), ConfigError);
  CHECK_THROWS_AS(load_run_config(std::nullopt, {"embedding.grid_h=4"}), ConfigError);
  CHECK_THROWS_AS(load_run_config(std::nullopt, {"eval.presence=oracle"}), ConfigError);
  CHECK_THROWS_AS(load_run_config(std::nullopt, {"train.learning_rate=\"fast\""}), ConfigError);
  CHECK_NOTHROW(load_run_config(std::nullopt, {"model.k1=3", "model.k2=3"}));
}

TEST_CASE("the full-scale bird config is accepted") {
  const json cfg = load_run_config(fs::path(LCBM_SOURCE_DIR) / "configs" / "cub.json");
  CHECK(cfg["model"]["k1"] == 7);
  CHECK(cfg["model"]["k2"] == 3);
  CHECK(cfg["model"]["alpha"] == 0.5);
  CHECK(cfg["model"]["beta"] == 0.1);
  CHECK(cfg["embedding"]["patch_size"] == 56);
  CHECK(cfg["train"]["batch_size"] == 8);
  CHECK(cfg["train"]["learning_rate"] == 5e-5);
}

TEST_CASE("fixture dataset layout") {
  const auto dir = fresh("layout");
  SyntheticSpec spec;
  spec.per_class = 8;
  write_synthetic_fixture(dir, spec);
  const Dataset ds = load_dataset(dir);
  CHECK(ds.classes == std::vector<std::string>{"red", "blue"});
  CHECK(ds.items.size() == 16);
  CHECK(ds.split("train").size() == 8);
  CHECK(ds.split("val").size() == 4);
  CHECK(ds.split("test").size() == 4);
  REQUIRE(ds.annotations);
  REQUIRE(ds.presence);
  CHECK(ds.image(ds.items[0]).width() == 24);
  CHECK_THROWS_AS(load_dataset(dir / "missing"), UsageError);
}

TEST_CASE("generate-concepts matches the pinned concept files and reruns identically") {
  const auto dir = fresh("concepts");
  const json cfg = fixture_config(dir);
  const json r = cmd_generate_concepts(cfg);
  CHECK(r["concepts"] == 4);
  const fs::path golden = fs::path(LCBM_SOURCE_DIR) / "tests" / "golden";
  const fs::path out = dir / "run" / "concepts";
  CHECK(slurp(out / "concepts.jsonl") == slurp(golden / "fixture_concepts.jsonl"));
  CHECK(slurp(out / "alignment.jsonl") == slurp(golden / "fixture_alignment.jsonl"));
  const std::string transcript = slurp(out / "transcript.jsonl");
  cmd_generate_concepts(cfg);
  CHECK(slurp(out / "transcript.jsonl") == transcript);
  CHECK(slurp(out / "concepts.jsonl") == slurp(golden / "fixture_concepts.jsonl"));

  json no_template = cfg;
  no_template["concepts"]["template"] = (dir / "absent.json").string();
  CHECK_THROWS_AS(cmd_generate_concepts(no_template), UsageError);

  json broken = cfg;
  std::ofstream(dir / "empty_mock.json") << R"({"rules": []})";
  broken["concepts"]["mock_responses"] = (dir / "empty_mock.json").string();
  broken["concepts"]["retry_attempts"] = 1;
  broken["run_dir"] = (dir / "broken").string();
  try {
    cmd_generate_concepts(broken);
    FAIL("expected a generation error");
  } catch (const Error& e) {
    CHECK(e.code() == ExitCode::kOracleTransport);
    CHECK(std::string(e.what()).find("transcript.jsonl") != std::string::npos);
    CHECK(fs::exists(dir / "broken" / "concepts" / "transcript.jsonl"));
  }
}

TEST_CASE("embed fills one cache entry per image cell and reuses it") {
  const auto dir = fresh("embed");
  json cfg = fixture_config(dir, 1);
  cfg["dataset"] = dir.string();
  cmd_generate_concepts(cfg);
  // Three images: classes red, blue and yellow, one each.
  {
    SyntheticSpec spec;
    spec.classes = 3;
    spec.per_class = 1;
    write_synthetic_fixture(dir, spec);
  }
  const json first = cmd_embed(cfg);
  CHECK(first["images"] == 3);
  CHECK(first["misses"] == 27);
  CHECK(first["entries"] == 27);
  const json second = cmd_embed(cfg);
  CHECK(second["hits"] == 27);
  CHECK(second["misses"] == 0);

  const fs::path cache = dir / "run" / "cache";
  fs::path victim;
  for (const auto& e : fs::directory_iterator(cache)) victim = e.path();
  {
    std::fstream f(victim, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-6, std::ios::end);
    f.put('\x7f');
  }
  const json third = cmd_embed(cfg);
  CHECK(third["corrupt"] == 1);
  CHECK(third["hits"] == 26);
  CHECK(third["warnings"].size() == 1);
  CHECK(cmd_embed(cfg)["hits"] == 27);
}

TEST_CASE("train, evaluate and explain on the fixture") {
  const auto dir = fresh("full");
  const json cfg = fixture_config(dir, 8);
  cmd_generate_concepts(cfg);
  cmd_embed(cfg);
  const json t = cmd_train(cfg);
  CHECK(t["best_val_accuracy"] == 1.0);
  CHECK(t["cache_misses"] == 0);
  CHECK(fs::exists(dir / "run" / "train" / "best.ckpt"));
  CHECK(fs::exists(dir / "run" / "train" / "train_log.jsonl"));

  const json e = cmd_evaluate(cfg);
  for (const char* field : {"accuracy", "precision", "recall", "inclusion", "miou", "rep",
                            "deletion_ratio", "deletion_difference", "deletion_ratio_by_image",
                            "deletion_difference_by_image", "patch_proto_ratio"}) {
    INFO(field);
    CHECK(e["metrics"].contains(field));
    CHECK(e["metrics"][field].is_number());
  }
  CHECK(e["settings"]["ranking"] == "contribution");
  CHECK(e["notices"].empty());
  CHECK(fs::exists(dir / "run" / "eval" / "summary.json"));
  CHECK(fs::exists(dir / "run" / "eval" / "details.jsonl"));
  CHECK(!fs::is_empty(dir / "run" / "eval" / "overlays"));

  json score_only = cfg;
  score_only["eval"]["score_only"] = true;
  CHECK(cmd_evaluate(score_only)["settings"]["ranking"] == "concept score");

  fs::remove(dir / "annotations.jsonl");
  const json bare = cmd_evaluate(cfg);
  CHECK(bare["metrics"]["precision"].is_number());
  CHECK(bare["metrics"]["miou"].is_null());
  CHECK(bare["metrics"]["deletion_ratio"].is_null());
  CHECK(bare["notices"].size() == 1);

  const json x = cmd_explain(cfg, dir / "images" / "blue_3.ppm");
  REQUIRE(x["rows"].size() == 3);
  for (std::size_t i = 1; i < x["rows"].size(); ++i)
    CHECK(x["rows"][i - 1]["contribution"].get<double>() >= x["rows"][i]["contribution"].get<double>());
  for (const auto& row : x["rows"]) {
    CHECK(row["negative"] == (row["score"].get<double>() < 0));
    CHECK(fs::exists(dir / "run" / "explain" / row["overlay"].get<std::string>()));
  }
  CHECK(fs::exists(dir / "run" / "explain" / "blue_3.json"));

  const json manifest = json::parse(slurp(dir / "run" / "manifest.json"));
  for (const char* c : {"generate-concepts", "embed", "train", "evaluate", "explain"})
    CHECK(manifest["commands"].contains(c));
  CHECK(manifest["commands"]["train"]["outputs"].contains("train/best.ckpt"));
}

TEST_CASE("commands report missing prerequisites") {
  const auto dir = fresh("prereq");
  const json cfg = fixture_config(dir);
  CHECK_THROWS_AS(cmd_embed(cfg), UsageError);
  CHECK_THROWS_AS(cmd_evaluate(cfg), UsageError);
  json k1_too_big = cfg;
  cmd_generate_concepts(cfg);
  k1_too_big["model"]["k1"] = 9;
  CHECK_THROWS_AS(cmd_train(k1_too_big), ConfigError);
}

TEST_CASE("toy-mnist quick mode writes a reproducible histogram") {
  const auto dir = fresh("toy");
  json cfg = load_run_config(std::nullopt, {"toy.samples=100", "run_dir=" + (dir / "a").string()});
  const json r = cmd_toy_mnist(cfg);
  CHECK(r["samples"] == 100);
  const fs::path out = dir / "a" / "toy";
  for (const char* f : {"histogram.json", "histogram.svg", "histogram_untrained.svg", "train_log.jsonl"})
    CHECK(fs::exists(out / f));
  const json h = json::parse(slurp(out / "histogram.json"));
  CHECK(h["trained"]["total"] == 1000);
  CHECK(h["untrained"]["total"] == 1000);

  cfg["run_dir"] = (dir / "b").string();
  cfg["toy"]["threads"] = 3;
  cmd_toy_mnist(cfg);
  CHECK(slurp(out / "histogram.json") == slurp(dir / "b" / "toy" / "histogram.json"));
}

TEST_CASE("cli exit codes") {
  const auto dir = fresh("cli");
  CHECK(run_cli("make-fixture " + dir.string()) == 0);
  const std::string cfg = " -c " + (dir / "config.json").string();
  CHECK(run_cli("") == static_cast<int>(ExitCode::kUsage));
  CHECK(run_cli("train --bogus") == static_cast<int>(ExitCode::kUsage));
  CHECK(run_cli("generate-concepts" + cfg + " --set concepts.template=/nonexistent.json") ==
        static_cast<int>(ExitCode::kUsage));
  CHECK(run_cli("train" + cfg + " --set model.k2=3") == static_cast<int>(ExitCode::kConfig));
  CHECK(run_cli("train" + cfg + " --set nonsense=1") == static_cast<int>(ExitCode::kConfig));
  CHECK(run_cli("generate-concepts" + cfg) == 0);
  std::ofstream(dir / "images" / "red_0.ppm") << "P6\n2 2\n255\n";  // truncated
  CHECK(run_cli("embed" + cfg) == static_cast<int>(ExitCode::kData));
  CHECK(run_cli("toy-mnist --samples 10 --set toy.digits=" + (dir / "nodigits").string() +
                " --set run_dir=" + (dir / "toy").string()) == static_cast<int>(ExitCode::kData));
}
