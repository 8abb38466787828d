#pragma once

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lcbm/image.hpp"
#include "lcbm/model.hpp"

namespace lcbm {

struct TrainConfig {
  double learning_rate = 5e-5;
  std::size_t batch_size = 8;
  std::size_t patience = 5;        // epochs
  std::size_t check_interval = 1;  // epochs
  std::size_t max_epochs = 100;
  std::size_t max_steps = 0;       // 0: no step limit
  std::uint64_t seed = 0;
  std::string optimizer = "adamw";
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.01;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// One training image with its precomputed patch/concept score matrix.
struct Sample {
  std::string id;
  Image image;
  Tensor scores;  // S, HW x K
  std::size_t label = 0;
};

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lc = 0, ll = 0, la = 0, total = 0;  // batch means
  double lr = 0;
};

void to_json(nlohmann::json& j, const StepRecord& r);

struct TrainState {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double best_val_accuracy = -1.0;  // -1 until the first validation
  std::size_t best_epoch = 0;
  std::size_t epochs_since_improvement = 0;
  std::vector<double> val_history;
  std::vector<StepRecord> history;
  bool early_stopped = false;
};

// Decoupled weight decay Adam.
class AdamW {
 public:
  AdamW(std::vector<ag::Var> params, const TrainConfig& cfg);
  // Applies one update from the accumulated .grad fields divided by `scale`.
  void step(double scale = 1.0);
  double learning_rate() const { return lr_; }

 private:
  std::vector<ag::Var> params_;
  std::vector<Tensor> m_, v_;
  double lr_, b1_, b2_, eps_, wd_;
  std::size_t t_ = 0;
};

// Early stopping as a pure function of the validation sequence. Each
// validation covers `check_interval` epochs.
class EarlyStopper {
 public:
  EarlyStopper(std::size_t patience, std::size_t check_interval)
      : patience_(patience), interval_(check_interval) {}
  // Records one validation accuracy; returns true when training should stop.
  bool update(double accuracy);
  bool improved() const { return improved_; }
  double best() const { return best_; }
  std::size_t epochs_since_improvement() const { return since_; }

 private:
  std::size_t patience_, interval_;
  double best_ = -1.0;
  std::size_t since_ = 0;
  bool improved_ = false;
};

// Top-1 accuracy of argmax l_p (ties toward the smaller class id).
double validate(const LcbmModel& model, const std::vector<Sample>& data);

struct TrainOptions {
  // When set: best.ckpt, last.ckpt and train_log.jsonl are written here.
  std::optional<std::filesystem::path> out_dir;
  // Called after every optimizer step.
  std::function<void(const StepRecord&)> on_step;
};

// Trains in place and leaves the model holding the parameters of the best
// validation checkpoint. NumericError on a non-finite loss, with the step and
// loss components in the message.
TrainState train(LcbmModel& model, const std::vector<Sample>& train_data,
                 const std::vector<Sample>& val_data, const TrainConfig& cfg,
                 const TrainOptions& options = {});

// Binary checkpoint: "LCBMCKPT" | u32 version | u64 header length | JSON
// header (model config, backbone spec, tensor table, metadata) | f64 tensor
// data | u32 crc32, little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const LcbmModel& model, const std::filesystem::path& path,
                     const nlohmann::json& metadata = nlohmann::json::object());

struct LoadedCheckpoint {
  LcbmModel model;
  nlohmann::json metadata;
};

// IoError on a missing, truncated or corrupt file or a version mismatch;
// ConfigError when `expected` is given and differs from the stored config.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path,
                                 const std::optional<ModelConfig>& expected = std::nullopt);

// Parameter values in named_parameters() order.
std::vector<Tensor> snapshot_parameters(const LcbmModel& model);
void restore_parameters(LcbmModel& model, const std::vector<Tensor>& values);

}  // namespace lcbm
