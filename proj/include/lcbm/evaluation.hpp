#pragma once

#include <json.hpp>

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "lcbm/concept_catalog.hpp"
#include "lcbm/llm_client.hpp"
#include "lcbm/model.hpp"
#include "lcbm/saliency.hpp"

namespace lcbm {

struct PointRecord {
  std::string image_id;
  std::string part;
  double x = 0, y = 0;
};

struct BoxRecord {
  std::string image_id;
  std::string key;  // part name or full concept text
  PixelBox box;
};

// Part points and part/concept boxes, one JSON record per line:
//   {"type":"point","image_id":..,"part":..,"x":..,"y":..}
//   {"type":"box","image_id":..,"key":..,"x1":..,"y1":..,"x2":..,"y2":..}
class AnnotationStore {
 public:
  void add(PointRecord p);
  void add(BoxRecord b);  // ParseError unless x1 < x2 and y1 < y2
  std::vector<PointRecord> points(const std::string& image_id) const;
  std::vector<BoxRecord> boxes(const std::string& image_id) const;
  // First box of the image whose key equals `key`, case-insensitively.
  std::optional<PixelBox> box(const std::string& image_id, const std::string& key) const;
  std::optional<PointRecord> point(const std::string& image_id, const std::string& part) const;
  // PreconditionError when a record of the image lies outside width x height.
  void check_bounds(const std::string& image_id, std::size_t width, std::size_t height) const;
  bool empty() const { return points_.empty() && boxes_.empty(); }

  static AnnotationStore load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

 private:
  std::vector<PointRecord> points_;
  std::vector<BoxRecord> boxes_;
};

enum class Presence { kNo, kYes, kUnknown };
std::string to_string(Presence p);

// Decides which of `concepts` appear in an image. Implementations must be
// safe to call from several threads.
class PresenceOracle {
 public:
  virtual ~PresenceOracle() = default;
  // OracleError on transport failure.
  virtual std::vector<Presence> query(const std::string& image_id, const Image& image,
                                      const std::vector<std::string>& concepts) = 0;
  virtual std::string name() const = 0;
};

// Answers from known per-image concept lists; pure.
class GroundTruthPresenceOracle final : public PresenceOracle {
 public:
  explicit GroundTruthPresenceOracle(std::map<std::string, std::set<std::string>> present);
  std::vector<Presence> query(const std::string& image_id, const Image& image,
                              const std::vector<std::string>& concepts) override;
  std::string name() const override { return "ground-truth"; }

 private:
  std::map<std::string, std::set<std::string>> present_;  // normalized texts
};

// Parses the last "<a/b/...>" group of a reply. nullopt unless it holds
// exactly `expected` yes/no tokens.
std::optional<std::vector<Presence>> parse_presence_answer(const std::string& reply,
                                                          std::size_t expected);

// Comma-separated, single-quoted concept list for the {concept list} slot.
std::string format_concept_list(const std::vector<std::string>& concepts);

// Multimodal model asked once per image with the whole concept batch. An
// unparseable reply is retried once; after that every concept is kUnknown.
// Transport failures are retried per `retry` and then rethrown.
class MllmPresenceOracle final : public PresenceOracle {
 public:
  MllmPresenceOracle(MultimodalClient& client, std::string presence_template,
                     std::string category, std::shared_ptr<Transcript> transcript,
                     RetryPolicy retry = {});
  std::vector<Presence> query(const std::string& image_id, const Image& image,
                              const std::vector<std::string>& concepts) override;
  std::string name() const override { return "mllm"; }
  std::string prompt_for(const std::vector<std::string>& concepts) const;

 private:
  std::string send(const std::string& prompt, const Image& image);

  MultimodalClient& client_;
  std::string template_, category_;
  std::shared_ptr<Transcript> transcript_;
  RetryPolicy retry_;
};

struct EvalItem {
  std::string id;
  Image image;  // already at the model's input resolution
  std::size_t label = 0;
};

struct EvalOptions {
  std::size_t k = 10;
  bool score_only = false;       // rank concepts by l_c instead of contributions
  bool use_true_class = false;   // contributions toward the label, not argmax l_p
  std::size_t patch_prototypes = 10;
  std::size_t max_in_flight = 1;
  // One PNG per localization row when set.
  std::optional<std::filesystem::path> overlay_dir;
};

struct EvalReport {
  nlohmann::json settings;
  std::size_t images = 0;
  std::optional<double> accuracy, precision, recall;
  std::optional<double> inclusion, miou, rep;
  // Averaged over all (image, concept) rows, and per image first.
  std::optional<double> deletion_ratio, deletion_difference;
  std::optional<double> deletion_ratio_by_image, deletion_difference_by_image;
  // Counts for ranks 1..HW, then one bin for "no cell inside the box".
  std::vector<std::size_t> match_rank_histogram;
  std::optional<double> patch_proto_ratio;
  std::vector<std::string> notices;
  std::vector<nlohmann::json> skipped;  // {image_id, stage, reason}
  std::vector<nlohmann::json> details;  // one object per image

  nlohmann::json summary() const;
  // summary.json plus details.jsonl
  void save(const std::filesystem::path& dir) const;
};

struct EvalInputs {
  const LcbmModel* model = nullptr;
  const ConceptSet* concepts = nullptr;
  std::vector<std::string> class_names;
  const AnnotationStore* annotations = nullptr;  // localization metrics need it
  PresenceOracle* oracle = nullptr;              // precision / recall need it
};

EvalReport evaluate(const EvalInputs& in, const std::vector<EvalItem>& items,
                    const EvalOptions& options = {});

}  // namespace lcbm
