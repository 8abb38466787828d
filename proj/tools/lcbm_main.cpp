#include <CLI11.hpp>
#include <json.hpp>
#include <unistd.h>

#include <cstdio>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "lcbm/errors.hpp"
#include "lcbm/pipeline.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void print_explanation(const json& r) {
  const bool color = ::isatty(STDOUT_FILENO);
  std::cout << "predicted class: " << r["class_name"].get<std::string>() << "\n";
  std::cout << std::left << std::setw(6) << "id" << std::setw(32) << "concept" << std::right
            << std::setw(12) << "score" << std::setw(14) << "contribution" << "\n";
  for (const auto& row : r["rows"]) {
    const bool neg = row["negative"].get<bool>();
    if (neg && color) std::cout << "\033[31m";
    std::cout << std::left << std::setw(6) << row["concept_id"].get<std::size_t>() << std::setw(32)
              << row["text"].get<std::string>() << std::right << std::fixed << std::setprecision(4)
              << std::setw(12) << row["score"].get<double>() << std::setw(14)
              << row["contribution"].get<double>();
    if (neg) std::cout << "  (negative score)";
    if (neg && color) std::cout << "\033[0m";
    std::cout << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Locality-aware concept bottleneck models"};
  app.require_subcommand(1);

  std::optional<std::string> config_path;
  std::vector<std::string> overrides;
  auto common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "JSON run config");
    sub->add_option("--set", overrides, "override a config field, key.path=value")
        ->take_all();
  };

  auto* gen = app.add_subcommand("generate-concepts", "query the LLM for the concept set");
  auto* embed = app.add_subcommand("embed", "fill the patch embedding cache");
  auto* train = app.add_subcommand("train", "train the model");
  auto* eval = app.add_subcommand("evaluate", "precision, localization and deletion report");
  auto* toy = app.add_subcommand("toy-mnist", "composite-digit prototype experiment");
  auto* explain = app.add_subcommand("explain", "local explanation and saliency for one image");
  auto* fixture = app.add_subcommand("make-fixture", "write a synthetic dataset and config");
  for (auto* s : {gen, embed, train, eval, toy, explain}) common(s);

  std::optional<std::string> checkpoint;
  eval->add_option("--checkpoint", checkpoint, "defaults to <run_dir>/train/best.ckpt");
  bool score_only = false, true_class = false;
  eval->add_flag("--score-only", score_only, "rank concepts by concept score alone");
  eval->add_flag("--true-class", true_class, "contributions toward the label class");

  std::optional<std::size_t> samples;
  toy->add_option("--samples", samples, "composite images to train on (10000 for a quick run)");

  std::string image;
  explain->add_option("image", image, "PPM/PGM image")->required();
  explain->add_option("--checkpoint", checkpoint, "defaults to <run_dir>/train/best.ckpt");

  std::string fixture_dir;
  lcbm::SyntheticSpec spec;
  fixture->add_option("dir", fixture_dir, "output directory")->required();
  fixture->add_option("--classes", spec.classes, "number of color classes")->capture_default_str();
  fixture->add_option("--per-class", spec.per_class, "images per class")->capture_default_str();
  fixture->add_option("--seed", spec.seed, "generator seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(lcbm::ExitCode::kUsage);
  }

  try {
    if (fixture->parsed()) {
      lcbm::write_synthetic_fixture(fixture_dir, spec);
      std::cout << "wrote " << (fs::path(fixture_dir) / "config.json").string() << "\n";
      return 0;
    }
    if (score_only) overrides.push_back("eval.score_only=true");
    if (true_class) overrides.push_back("eval.use_true_class=true");
    if (samples) overrides.push_back("toy.samples=" + std::to_string(*samples));
    std::optional<fs::path> cfg_file;
    if (config_path) cfg_file = *config_path;
    const json cfg = lcbm::load_run_config(cfg_file, overrides);
    std::optional<fs::path> ckpt;
    if (checkpoint) ckpt = *checkpoint;

    json result;
    if (gen->parsed()) result = lcbm::cmd_generate_concepts(cfg);
    else if (embed->parsed()) result = lcbm::cmd_embed(cfg);
    else if (train->parsed()) result = lcbm::cmd_train(cfg);
    else if (eval->parsed()) result = lcbm::cmd_evaluate(cfg, ckpt);
    else if (toy->parsed()) result = lcbm::cmd_toy_mnist(cfg);
    else if (explain->parsed()) {
      result = lcbm::cmd_explain(cfg, image, ckpt);
      print_explanation(result);
      return 0;
    }
    std::cout << result.dump(2) << "\n";
    return 0;
  } catch (const lcbm::Error& e) {
    std::cerr << "lcbm: " << e.what() << "\n";
    return static_cast<int>(e.code());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "lcbm: config: " << e.what() << "\n";
    return static_cast<int>(lcbm::ExitCode::kConfig);
  } catch (const std::exception& e) {
    std::cerr << "lcbm: " << e.what() << "\n";
    return static_cast<int>(lcbm::ExitCode::kData);
  }
}
