#include "lcbm/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <memory>
#include <sstream>
#include <thread>

#include "lcbm/concept_catalog.hpp"
#include "lcbm/embedding_cache.hpp"
#include "lcbm/errors.hpp"
#include "lcbm/llm_client.hpp"
#include "lcbm/model.hpp"
#include "lcbm/patch_embedding.hpp"
#include "lcbm/saliency.hpp"
#include "lcbm/toy.hpp"
#include "lcbm/training.hpp"

#ifndef LCBM_DEFAULT_DIGITS
#define LCBM_DEFAULT_DIGITS "data/digits"
#endif

namespace lcbm {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void merge_checked(json& base, const json& patch, const std::string& where) {
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = where.empty() ? it.key() : where + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    json& slot = base[it.key()];
    // The backbone spec is replaced whole: its layer list has no fixed shape.
    if (slot.is_object() && it->is_object() && key != "backbone")
      merge_checked(slot, *it, key);
    else
      slot = *it;
  }
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

fs::path run_dir(const json& cfg) { return cfg.at("run_dir").get<std::string>(); }
fs::path concepts_file(const json& cfg) { return run_dir(cfg) / "concepts" / "concepts.jsonl"; }
fs::path alignment_file(const json& cfg) { return run_dir(cfg) / "concepts" / "alignment.jsonl"; }

void record_manifest(const json& cfg, const std::string& command,
                     const std::vector<fs::path>& outputs) {
  const fs::path dir = run_dir(cfg);
  const fs::path path = dir / "manifest.json";
  json manifest = fs::exists(path) ? read_json(path) : json{{"tool", "lcbm"}, {"commands", json::object()}};
  json files = json::object();
  for (const auto& p : outputs)
    if (fs::is_regular_file(p)) files[fs::relative(p, dir).generic_string()] = sha256_file(p);
  manifest["commands"][command] = {{"config", cfg}, {"outputs", files}};
  write_text(path, manifest.dump(2) + "\n");
}

std::vector<fs::path> files_under(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

Dataset dataset_of(const json& cfg) {
  const std::string dir = cfg.at("dataset").get<std::string>();
  if (dir.empty()) throw UsageError("no dataset directory configured (set dataset=...)");
  return load_dataset(dir);
}

ConceptSet run_concepts(const json& cfg) {
  if (!fs::exists(concepts_file(cfg)))
    throw UsageError("no concept set in " + run_dir(cfg).string() +
                     "; run generate-concepts first");
  return load_concepts(concepts_file(cfg), alignment_file(cfg));
}

BackboneSpec backbone_of(const json& cfg) { return cfg.at("backbone").get<BackboneSpec>(); }

PatchGrid grid_of(const json& cfg) {
  const auto& e = cfg.at("embedding");
  return build_patch_grid(backbone_of(cfg).input_size, e.at("grid_h").get<std::size_t>(),
                          e.at("grid_w").get<std::size_t>(), e.at("patch_size").get<std::size_t>());
}

std::unique_ptr<EmbeddingOracle> oracle_of(const json& cfg) {
  const auto& e = cfg.at("embedding");
  return make_oracle(e.at("oracle").get<std::string>(), e.at("dim").get<std::size_t>());
}

Image model_image(const Dataset& ds, const DatasetItem& item, const BackboneSpec& bb) {
  Image img = ds.image(item);
  if (img.height() != bb.input_size || img.width() != bb.input_size)
    throw IoError("image " + item.id + " is " + std::to_string(img.width()) + "x" +
                  std::to_string(img.height()) + "; the model expects " +
                  std::to_string(bb.input_size) + "x" + std::to_string(bb.input_size));
  if (img.channels() != bb.input_channels)
    throw IoError("image " + item.id + " has " + std::to_string(img.channels()) +
                  " channels; the model expects " + std::to_string(bb.input_channels));
  return img;
}

std::size_t argmax_index(const Tensor& t) {
  return static_cast<std::size_t>(std::max_element(t.data().begin(), t.data().end()) -
                                  t.data().begin());
}

fs::path checkpoint_of(const json& cfg, const std::optional<fs::path>& given) {
  const fs::path p = given ? *given : run_dir(cfg) / "train" / "best.ckpt";
  if (!fs::exists(p)) throw UsageError("checkpoint " + p.string() + " not found; run train first");
  return p;
}

}  // namespace

json default_run_config() {
  TrainConfig train;
  ToyConfig toy;
  return {
      {"seed", 1},
      {"run_dir", "runs/default"},
      {"dataset", ""},
      {"concepts",
       {{"template", ""}, {"parts", json::array()}, {"llm", "mock"}, {"mock_responses", ""},
        {"prune", true}, {"max_in_flight", 1}, {"retry_attempts", 3}}},
      {"embedding", {{"oracle", "palette"}, {"dim", 32}, {"grid_h", 3}, {"grid_w", 3},
                     {"patch_size", 8}}},
      {"model", {{"k1", 2}, {"k2", 2}, {"alpha", 0.5}, {"beta", 0.1}}},
      {"backbone", BackboneSpec::fixture()},
      {"train", train},
      {"eval",
       {{"split", "test"}, {"k", 10}, {"score_only", false}, {"use_true_class", false},
        {"presence", "ground_truth"}, {"mock_responses", ""}, {"patch_prototypes", 10},
        {"max_in_flight", 1}, {"overlays", false}}},
      {"explain", {{"k", 5}}},
      {"toy",
       {{"digits", LCBM_DEFAULT_DIGITS}, {"samples", 50000}, {"test_per_digit", 100},
        {"dataset_seed", 1}, {"embed_dim", toy.embed_dim}, {"conv1", toy.conv1},
        {"conv2", toy.conv2}, {"learning_rate", toy.learning_rate},
        {"batch_size", toy.batch_size}, {"epochs", toy.epochs}, {"threads", 0}}},
  };
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw UsageError("override '" + assignment + "' is not of the form key.path=value");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  json patch = value;
  std::string rest = key;
  std::vector<std::string> parts;
  for (std::size_t pos; (pos = rest.find('.')) != std::string::npos; rest.erase(0, pos + 1))
    parts.push_back(rest.substr(0, pos));
  parts.push_back(rest);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  // Overrides inside the backbone go through a pointer so the rest of it survives.
  if (parts.size() > 1 && parts[0] == "backbone") {
    std::string ptr;
    for (const auto& p : parts) ptr += "/" + p;
    config[json::json_pointer(ptr)] = value;
    return;
  }
  merge_checked(config, patch, "");
}

json load_run_config(const std::optional<fs::path>& file, const std::vector<std::string>& overrides) {
  json cfg = default_run_config();
  if (file) {
    const json user = read_json(*file);
    if (!user.is_object()) throw ConfigError(file->string() + ": config must be a JSON object");
    merge_checked(cfg, user, "");
  }
  for (const auto& o : overrides) apply_override(cfg, o);
  try {
    validate_run_config(cfg);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return cfg;
}

void validate_run_config(const json& cfg) {
  const auto k1 = cfg.at("model").at("k1").get<std::size_t>();
  const auto k2 = cfg.at("model").at("k2").get<std::size_t>();
  if (k2 < 1 || k2 > k1)
    throw ConfigError("model: need 1 <= K2 <= K1, got K1=" + std::to_string(k1) +
                      " K2=" + std::to_string(k2));
  if (cfg.at("model").at("alpha").get<double>() < 0 || cfg.at("model").at("beta").get<double>() < 0)
    throw ConfigError("model: alpha and beta must be >= 0");
  const BackboneSpec bb = backbone_of(cfg);
  bb.validate();
  cfg.at("train").get<TrainConfig>().validate();
  if (bb.type != "fixed") {
    const PatchGrid g = grid_of(cfg);
    if (g.grid_h != bb.grid_h() || g.grid_w != bb.grid_w())
      throw ConfigError("embedding grid " + std::to_string(g.grid_h) + "x" +
                        std::to_string(g.grid_w) + " differs from the backbone's " +
                        std::to_string(bb.grid_h()) + "x" + std::to_string(bb.grid_w()) +
                        " feature grid");
  }
  if (cfg.at("eval").at("k").get<std::size_t>() == 0) throw ConfigError("eval.k must be >= 1");
  const std::string presence = cfg.at("eval").at("presence");
  if (presence != "ground_truth" && presence != "mllm" && presence != "mock" && presence != "none")
    throw ConfigError("eval.presence must be ground_truth, mllm, mock or none");
  const std::string llm = cfg.at("concepts").at("llm");
  if (llm != "mock" && llm != "http") throw ConfigError("concepts.llm must be mock or http");
}

std::vector<const DatasetItem*> Dataset::split(const std::string& name) const {
  std::vector<const DatasetItem*> out;
  for (const auto& it : items)
    if (it.split == name) out.push_back(&it);
  return out;
}

Image Dataset::image(const DatasetItem& item) const { return read_pnm(dir / item.file); }

Dataset load_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw UsageError("dataset directory " + dir.string() + " not found");
  Dataset ds;
  ds.dir = dir;
  ds.classes = read_json(dir / "classes.json").get<std::vector<std::string>>();
  if (ds.classes.empty()) throw ParseError((dir / "classes.json").string() + ": no classes");
  std::ifstream in(dir / "items.jsonl");
  if (!in) throw IoError("cannot open " + (dir / "items.jsonl").string());
  std::string line;
  std::size_t n = 0;
  std::set<std::string> ids;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      DatasetItem it;
      it.id = j.at("id").get<std::string>();
      it.file = j.at("image").get<std::string>();
      it.label = j.at("label").get<std::size_t>();
      it.split = j.at("split").get<std::string>();
      if (it.label >= ds.classes.size()) throw ParseError("label out of range", n, line);
      if (it.split != "train" && it.split != "val" && it.split != "test")
        throw ParseError("split must be train, val or test", n, line);
      if (!ids.insert(it.id).second) throw ParseError("duplicate image id " + it.id, n, line);
      ds.items.push_back(std::move(it));
    } catch (const json::exception& e) {
      throw ParseError("items.jsonl: " + std::string(e.what()), n, line);
    }
  }
  if (fs::exists(dir / "annotations.jsonl")) ds.annotations = AnnotationStore::load(dir / "annotations.jsonl");
  if (fs::exists(dir / "presence.json"))
    ds.presence = read_json(dir / "presence.json").get<std::map<std::string, std::set<std::string>>>();
  return ds;
}

void write_synthetic_fixture(const fs::path& dir, const SyntheticSpec& spec) {
  const auto items = generate_synthetic(spec);
  fs::create_directories(dir / "images");
  std::vector<std::string> classes(synthetic_class_names().begin(),
                                   synthetic_class_names().begin() + static_cast<std::ptrdiff_t>(spec.classes));
  write_text(dir / "classes.json", json(classes).dump() + "\n");
  std::ostringstream lines;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    const std::size_t within = i % spec.per_class;
    const char* split = within % 4 == 3 ? "test" : within % 4 == 2 ? "val" : "train";
    write_pnm(it.image, dir / "images" / (it.id + ".ppm"));
    lines << json{{"id", it.id}, {"image", "images/" + it.id + ".ppm"}, {"label", it.label},
                  {"split", split}}.dump()
          << "\n";
  }
  write_text(dir / "items.jsonl", lines.str());
  annotate_synthetic(items).save(dir / "annotations.jsonl");
  write_text(dir / "presence.json", json(synthetic_presence(items)).dump(2) + "\n");

  json rules = json::array();
  std::string squares;
  for (const auto& c : classes) squares += "- " + c + "\n";
  rules.push_back({{"match", "the square can"}, {"response", squares}});
  rules.push_back({{"match", "the background can"}, {"response", "- gray\n"}});
  rules.push_back({{"match", "the spot can"}, {"response", "- white\n"}});
  for (const auto& c : classes)
    rules.push_back({{"match", "pictures of the " + c + " class"},
                     {"response", "- " + c + " square\n- gray background\n- white spot\n"}});
  write_text(dir / "mock_llm.json", json{{"rules", rules}}.dump(2) + "\n");

  TrainConfig train;
  train.learning_rate = 1e-2;
  train.batch_size = 4;
  train.max_epochs = 40;
  train.patience = 40;
  const json config = {
      {"seed", 1},
      {"run_dir", (dir / "run").generic_string()},
      {"dataset", dir.generic_string()},
      {"concepts",
       {{"template", (fs::path(LCBM_PROMPT_DIR) / "synthetic.json").generic_string()},
        {"mock_responses", (dir / "mock_llm.json").generic_string()}}},
      {"train", train},
      {"eval", {{"k", 3}, {"overlays", true}}},
      {"explain", {{"k", 3}}},
  };
  write_text(dir / "config.json", config.dump(2) + "\n");
}

json cmd_generate_concepts(const json& cfg) {
  const auto& c = cfg.at("concepts");
  const std::string tmpl = c.at("template");
  if (tmpl.empty()) throw UsageError("no prompt template configured (set concepts.template=...)");
  if (!fs::exists(tmpl)) throw UsageError("prompt template " + tmpl + " not found");
  const PromptTemplates templates = PromptTemplates::load(tmpl);
  const Dataset ds = dataset_of(cfg);
  auto parts = c.at("parts").get<std::vector<std::string>>();
  if (parts.empty()) parts = templates.parts;
  if (parts.empty()) throw ConfigError("no parts: set concepts.parts or add \"parts\" to the template");

  std::unique_ptr<LLMClient> client;
  if (c.at("llm") == "mock") {
    const std::string path = c.at("mock_responses");
    if (path.empty() || !fs::exists(path))
      throw UsageError("mock LLM responses file '" + path + "' not found");
    client = std::make_unique<MockLLMClient>(MockLLMClient::load(path));
  } else {
    client = std::make_unique<HttpChatClient>(ChatEndpoint::from_env());
  }

  const fs::path out = run_dir(cfg) / "concepts";
  fs::create_directories(out);
  GenerationLog log;
  GenerationOptions opt;
  opt.retry.attempts = c.at("retry_attempts").get<int>();
  opt.max_in_flight = c.at("max_in_flight").get<std::size_t>();
  ConceptSet set;
  try {
    set = generate_concepts(parts, ds.classes, *client, templates, &log, opt);
  } catch (const GenerationError& e) {
    e.transcript()->save_jsonl((out / "transcript.jsonl").string());
    throw GenerationError(std::string(e.what()) + " (transcript: " +
                              (out / "transcript.jsonl").string() + ")",
                          e.transcript());
  }
  log.transcript->save_jsonl((out / "transcript.jsonl").string());
  const std::size_t generated = set.size();
  if (c.at("prune").get<bool>()) set = prune_unaligned(set);
  if (set.size() == 0) throw ParseError("concept generation produced no aligned concepts");
  save_concepts(set, concepts_file(cfg), alignment_file(cfg));
  record_manifest(cfg, "generate-concepts", files_under(out));
  return {{"concepts", set.size()}, {"generated", generated}, {"classes", ds.classes.size()},
          {"warnings", log.warnings}, {"output", concepts_file(cfg).string()}};
}

json cmd_embed(const json& cfg) {
  const Dataset ds = dataset_of(cfg);
  const ConceptSet concepts = run_concepts(cfg);
  const BackboneSpec bb = backbone_of(cfg);
  const PatchGrid grid = grid_of(cfg);
  auto oracle = oracle_of(cfg);
  EmbeddingCache cache(run_dir(cfg) / "cache");
  EmbedStats stats;
  for (const auto& item : ds.items)
    embed_patches(model_image(ds, item, bb), grid, *oracle, &cache, item.id, &stats);
  const Tensor text = embed_concepts(concepts, *oracle);
  record_manifest(cfg, "embed", {});
  return {{"images", ds.items.size()}, {"cells", grid.cells()}, {"hits", stats.hits},
          {"misses", stats.misses}, {"corrupt", stats.corrupt}, {"warnings", stats.warnings},
          {"entries", cache.entry_count()}, {"oracle", oracle->id()}, {"concepts", text.rows()}};
}

json cmd_train(const json& cfg) {
  const Dataset ds = dataset_of(cfg);
  const ConceptSet concepts = run_concepts(cfg);
  const BackboneSpec bb = backbone_of(cfg);
  ModelConfig mc;
  mc.num_concepts = concepts.size();
  mc.feature_dim = bb.feature_dim();
  mc.num_classes = ds.classes.size();
  mc.grid_h = bb.grid_h();
  mc.grid_w = bb.grid_w();
  mc.k1 = cfg.at("model").at("k1");
  mc.k2 = cfg.at("model").at("k2");
  mc.alpha = cfg.at("model").at("alpha");
  mc.beta = cfg.at("model").at("beta");
  mc.validate();
  const TrainConfig tc = cfg.at("train").get<TrainConfig>();

  const PatchGrid grid = grid_of(cfg);
  auto oracle = oracle_of(cfg);
  EmbeddingCache cache(run_dir(cfg) / "cache");
  const Tensor text = embed_concepts(concepts, *oracle);
  EmbedStats stats;
  auto samples = [&](const std::string& split) {
    std::vector<Sample> out;
    for (const auto* item : ds.split(split)) {
      Image img = model_image(ds, *item, bb);
      Tensor s = compute_scores(embed_patches(img, grid, *oracle, &cache, item->id, &stats), text);
      out.push_back({item->id, std::move(img), std::move(s), item->label});
    }
    return out;
  };
  const auto train_data = samples("train");
  if (train_data.empty()) throw IoError("dataset has no training images");
  auto val_data = samples("val");
  std::vector<std::string> notices;
  if (val_data.empty()) {
    val_data = train_data;
    notices.push_back("no validation split: validating on the training images");
  }

  LcbmModel model(mc, bb, cfg.at("seed").get<std::uint64_t>());
  TrainOptions opt;
  opt.out_dir = run_dir(cfg) / "train";
  const TrainState st = train(model, train_data, val_data, tc, opt);
  record_manifest(cfg, "train", files_under(*opt.out_dir));
  return {{"steps", st.step}, {"epochs", st.epoch}, {"best_val_accuracy", st.best_val_accuracy},
          {"best_epoch", st.best_epoch}, {"early_stopped", st.early_stopped},
          {"cache_misses", stats.misses}, {"notices", notices},
          {"checkpoint", (*opt.out_dir / "best.ckpt").string()}};
}

json cmd_evaluate(const json& cfg, const std::optional<fs::path>& checkpoint) {
  const auto& e = cfg.at("eval");
  LoadedCheckpoint ck = load_checkpoint(checkpoint_of(cfg, checkpoint));
  const ConceptSet concepts = run_concepts(cfg);
  if (concepts.size() != ck.model.config().num_concepts)
    throw ConfigError("checkpoint has " + std::to_string(ck.model.config().num_concepts) +
                      " concepts but the run's concept set has " + std::to_string(concepts.size()));
  const Dataset ds = dataset_of(cfg);
  if (ds.classes.size() != ck.model.config().num_classes)
    throw ConfigError("checkpoint and dataset disagree on the number of classes");
  const BackboneSpec& bb = ck.model.backbone().spec();

  std::vector<EvalItem> items;
  for (const auto* item : ds.split(e.at("split")))
    items.push_back({item->id, model_image(ds, *item, bb), item->label});
  if (items.empty()) throw IoError("split '" + e.at("split").get<std::string>() + "' is empty");

  std::unique_ptr<PresenceOracle> oracle;
  std::unique_ptr<MultimodalClient> client;
  auto transcript = std::make_shared<Transcript>();
  const std::string presence = e.at("presence");
  if (presence == "ground_truth") {
    if (ds.presence) oracle = std::make_unique<GroundTruthPresenceOracle>(*ds.presence);
  } else if (presence == "mllm" || presence == "mock") {
    const std::string tmpl = cfg.at("concepts").at("template");
    if (tmpl.empty() || !fs::exists(tmpl))
      throw UsageError("the MLLM presence oracle needs concepts.template for its prompt");
    const PromptTemplates t = PromptTemplates::load(tmpl);
    if (presence == "mock") {
      const std::string path = e.at("mock_responses");
      if (path.empty() || !fs::exists(path))
        throw UsageError("mock MLLM responses file '" + path + "' not found");
      client = std::make_unique<MockLLMClient>(MockLLMClient::load(path));
    } else {
      client = std::make_unique<HttpChatClient>(ChatEndpoint::from_env());
    }
    oracle = std::make_unique<MllmPresenceOracle>(*client, t.presence, t.category, transcript);
  }

  EvalOptions opt;
  opt.k = e.at("k");
  opt.score_only = e.at("score_only");
  opt.use_true_class = e.at("use_true_class");
  opt.patch_prototypes = e.at("patch_prototypes");
  opt.max_in_flight = e.at("max_in_flight");
  const fs::path out = run_dir(cfg) / "eval";
  if (e.at("overlays").get<bool>()) {
    fs::remove_all(out / "overlays");
    opt.overlay_dir = out / "overlays";
  }
  EvalInputs in;
  in.model = &ck.model;
  in.concepts = &concepts;
  in.class_names = ds.classes;
  in.annotations = ds.annotations ? &*ds.annotations : nullptr;
  in.oracle = oracle.get();
  const EvalReport report = evaluate(in, items, opt);
  report.save(out);
  if (client) transcript->save_jsonl((out / "presence_transcript.jsonl").string());
  record_manifest(cfg, "evaluate", files_under(out));
  json s = report.summary();
  s["output"] = out.string();
  return s;
}

json cmd_toy_mnist(const json& cfg) {
  const auto& t = cfg.at("toy");
  ToyConfig tc;
  tc.embed_dim = t.at("embed_dim");
  tc.conv1 = t.at("conv1");
  tc.conv2 = t.at("conv2");
  tc.learning_rate = t.at("learning_rate");
  tc.batch_size = t.at("batch_size");
  tc.epochs = t.at("epochs");
  tc.seed = cfg.at("seed");
  tc.threads = t.at("threads");
  if (tc.threads == 0) tc.threads = std::max(1u, std::thread::hardware_concurrency());
  const std::size_t samples = t.at("samples");
  if (samples == 0) throw ConfigError("toy.samples must be >= 1");

  const DigitSet digits = load_digit_dir(t.at("digits").get<std::string>());
  const DigitSplit split = split_digits(digits, t.at("test_per_digit"));
  const auto data = build_dataset(digits, split.train, samples, t.at("dataset_seed"));
  ToyModel model(tc, tc.seed);
  const AlignmentHistogram before = alignment_histogram(model, digits, split.test);

  const fs::path out = run_dir(cfg) / "toy";
  fs::create_directories(out);
  std::ostringstream log;
  const auto start = std::chrono::steady_clock::now();
  const auto records = train_toy(model, data, digits, tc, [&](std::size_t step, double loss) {
    log << json{{"step", step}, {"loss", loss}}.dump() << "\n";
  });
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const AlignmentHistogram after = alignment_histogram(model, digits, split.test);

  json epochs = json::array();
  for (const auto& r : records) epochs.push_back({{"epoch", r.epoch}, {"mean_loss", r.mean_loss}});
  json config = tc;
  config.erase("threads");
  const json result = {{"samples", samples},
                       {"classes", kToyClasses},
                       {"candidates_per_patch", kToyCandidates},
                       {"test_per_digit", t.at("test_per_digit")},
                       {"config", config},
                       {"epochs", epochs},
                       {"untrained", before.to_json()},
                       {"trained", after.to_json()}};
  write_text(out / "histogram.json", result.dump(2) + "\n");
  write_text(out / "histogram.svg", histogram_svg(after, "trained prototypes"));
  write_text(out / "histogram_untrained.svg", histogram_svg(before, "untrained prototypes"));
  write_text(out / "train_log.jsonl", log.str());
  record_manifest(cfg, "toy-mnist", files_under(out));
  return {{"samples", samples}, {"untrained_diagonal_rate", before.diagonal_rate()},
          {"trained_diagonal_rate", after.diagonal_rate()}, {"seconds", seconds},
          {"output", (out / "histogram.json").string()}};
}

json cmd_explain(const json& cfg, const fs::path& image, const std::optional<fs::path>& checkpoint) {
  LoadedCheckpoint ck = load_checkpoint(checkpoint_of(cfg, checkpoint));
  const ConceptSet concepts = run_concepts(cfg);
  if (concepts.size() != ck.model.config().num_concepts)
    throw ConfigError("checkpoint and concept set disagree on the number of concepts");
  std::vector<std::string> classes;
  if (!cfg.at("dataset").get<std::string>().empty()) classes = dataset_of(cfg).classes;
  const BackboneSpec& bb = ck.model.backbone().spec();
  if (!fs::exists(image)) throw UsageError("image " + image.string() + " not found");
  Image img = read_pnm(image);
  if (img.channels() != bb.input_channels)
    throw IoError(image.string() + " has " + std::to_string(img.channels()) +
                  " channels; the model expects " + std::to_string(bb.input_channels));
  if (img.height() != bb.input_size || img.width() != bb.input_size)
    img = resize_center_crop(img, bb.input_size);

  const auto [lc, lp] = ck.model.predict(img);
  const std::size_t cls = argmax_index(lp.value());
  std::vector<std::string> texts;
  for (const auto& c : concepts.concepts()) texts.push_back(c.text);
  auto rows = local_explanation(lc.value(), ck.model.class_weight().value(), cls, texts);
  rows.resize(std::min<std::size_t>(rows.size(), cfg.at("explain").at("k").get<std::size_t>()));

  const fs::path out = run_dir(cfg) / "explain";
  const std::string stem = image.stem().string();
  fs::create_directories(out);
  json jrows = json::array();
  std::vector<fs::path> written;
  for (const auto& r : rows) {
    const SaliencyMask s = gradcam_map(ck.model, img, r.concept_id);
    const fs::path png = out / (stem + "_c" + std::to_string(r.concept_id) + ".png");
    write_png(heatmap_overlay(img, s.map, s.mask.bits), png);
    written.push_back(png);
    json j = r;
    j["negative"] = r.negative_score();
    j["overlay"] = png.filename().string();
    jrows.push_back(j);
  }
  const json result = {{"image", stem},
                       {"predicted_class", cls},
                       {"class_name", cls < classes.size() ? classes[cls] : std::to_string(cls)},
                       {"rows", jrows}};
  write_text(out / (stem + ".json"), result.dump(2) + "\n");
  written.push_back(out / (stem + ".json"));
  record_manifest(cfg, "explain", written);
  return result;
}

}  // namespace lcbm
