#pragma once

#include <json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "lcbm/evaluation.hpp"
#include "lcbm/image.hpp"
#include "lcbm/synthetic.hpp"

namespace lcbm {

// Every field the commands read, with its default.
nlohmann::json default_run_config();

// "a.b.c=value". The value is parsed as JSON when it parses, else taken as a
// string. UsageError on a malformed assignment.
void apply_override(nlohmann::json& config, const std::string& assignment);

// Defaults, merged with the file (when given), then the overrides in order.
// ConfigError on unknown keys or malformed JSON.
nlohmann::json load_run_config(const std::optional<std::filesystem::path>& file,
                               const std::vector<std::string>& overrides = {});

// Checks the fields that do not depend on loaded data (K2 <= K1, sizes,
// embedding grid equal to the backbone grid).
void validate_run_config(const nlohmann::json& config);

struct DatasetItem {
  std::string id;
  std::filesystem::path file;
  std::size_t label = 0;
  std::string split;  // "train", "val" or "test"
};

// A dataset directory:
//   classes.json       ["name", ...]
//   items.jsonl        {"id", "image" (relative .ppm/.pgm path), "label", "split"}
//   annotations.jsonl  optional, AnnotationStore records
//   presence.json      optional, {"image id": ["concept text", ...]}
struct Dataset {
  std::filesystem::path dir;
  std::vector<std::string> classes;
  std::vector<DatasetItem> items;
  std::optional<AnnotationStore> annotations;
  std::optional<std::map<std::string, std::set<std::string>>> presence;

  std::vector<const DatasetItem*> split(const std::string& name) const;
  Image image(const DatasetItem& item) const;
};

Dataset load_dataset(const std::filesystem::path& dir);

// Writes a synthetic dataset to `dir` together with mock_llm.json (canned
// concept-generation answers) and config.json (a full pipeline config whose
// run directory is dir/run). In each class, every fourth image is a test
// image and the one before it a validation image.
void write_synthetic_fixture(const std::filesystem::path& dir, const SyntheticSpec& spec);

// Each command writes under config["run_dir"], records its outputs in
// run_dir/manifest.json and returns a short summary for the console.
nlohmann::json cmd_generate_concepts(const nlohmann::json& config);
nlohmann::json cmd_embed(const nlohmann::json& config);
nlohmann::json cmd_train(const nlohmann::json& config);
nlohmann::json cmd_evaluate(const nlohmann::json& config,
                            const std::optional<std::filesystem::path>& checkpoint = {});
nlohmann::json cmd_toy_mnist(const nlohmann::json& config);
nlohmann::json cmd_explain(const nlohmann::json& config, const std::filesystem::path& image,
                           const std::optional<std::filesystem::path>& checkpoint = {});

}  // namespace lcbm
