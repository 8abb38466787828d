#include "lcbm/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "le_bytes.hpp"
#include "lcbm/errors.hpp"
#include "lcbm/losses.hpp"
#include "lcbm/patch_embedding.hpp"
#include "lcbm/rng.hpp"

namespace lcbm {

using detail::crc;
using detail::get_le;
using detail::put_le;

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (!(learning_rate > 0)) fail("learning_rate must be positive");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (check_interval < 1) fail("check_interval must be >= 1");
  if (optimizer != "adamw") fail("unsupported optimizer '" + optimizer + "' (only adamw)");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) fail("betas must be in [0, 1)");
  if (!(eps > 0)) fail("eps must be positive");
  if (!(weight_decay >= 0)) fail("weight_decay must be >= 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},
       {"patience", c.patience},           {"check_interval", c.check_interval},
       {"max_epochs", c.max_epochs},       {"max_steps", c.max_steps},
       {"seed", c.seed},                   {"optimizer", c.optimizer},
       {"beta1", c.beta1},                 {"beta2", c.beta2},
       {"eps", c.eps},                     {"weight_decay", c.weight_decay}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.patience = j.value("patience", d.patience);
  c.check_interval = j.value("check_interval", d.check_interval);
  c.max_epochs = j.value("max_epochs", d.max_epochs);
  c.max_steps = j.value("max_steps", d.max_steps);
  c.seed = j.value("seed", d.seed);
  c.optimizer = j.value("optimizer", d.optimizer);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
}

void to_json(nlohmann::json& j, const StepRecord& r) {
  j = {{"step", r.step}, {"Lc", r.lc}, {"Ll", r.ll}, {"La", r.la}, {"total", r.total}, {"lr", r.lr}};
}

AdamW::AdamW(std::vector<ag::Var> params, const TrainConfig& cfg)
    : params_(std::move(params)),
      lr_(cfg.learning_rate),
      b1_(cfg.beta1),
      b2_(cfg.beta2),
      eps_(cfg.eps),
      wd_(cfg.weight_decay) {
  for (const auto& p : params_) {
    m_.emplace_back(p.value().shape());
    v_.emplace_back(p.value().shape());
  }
}

void AdamW::step(double scale) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& w = params_[i].mutable_value();
    const Tensor& g = params_[i].grad();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g.empty() ? 0.0 : g[j] * scale;
      m_[i][j] = b1_ * m_[i][j] + (1 - b1_) * gj;
      v_[i][j] = b2_ * v_[i][j] + (1 - b2_) * gj * gj;
      w[j] -= lr_ * wd_ * w[j];
      w[j] -= lr_ * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_);
    }
  }
}

bool EarlyStopper::update(double accuracy) {
  improved_ = accuracy > best_;
  if (improved_) {
    best_ = accuracy;
    since_ = 0;
  } else {
    since_ += interval_;
  }
  return since_ > patience_;
}

double validate(const LcbmModel& model, const std::vector<Sample>& data) {
  if (data.empty()) throw PreconditionError("validate: empty dataset");
  std::size_t correct = 0;
  for (const auto& s : data) {
    const Tensor lp = model.predict(s.image).second.value();
    const auto best = std::max_element(lp.data().begin(), lp.data().end()) - lp.data().begin();
    correct += static_cast<std::size_t>(best) == s.label;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

std::vector<Tensor> snapshot_parameters(const LcbmModel& model) {
  std::vector<Tensor> out;
  for (const auto& [name, p] : model.named_parameters()) out.push_back(p.value());
  return out;
}

void restore_parameters(LcbmModel& model, const std::vector<Tensor>& values) {
  auto params = model.named_parameters();
  if (params.size() != values.size()) throw PreconditionError("restore_parameters: count differs");
  for (std::size_t i = 0; i < values.size(); ++i) {
    require_shape(values[i], params[i].second.value().shape(), params[i].first.c_str());
    params[i].second.mutable_value() = values[i];
  }
}

TrainState train(LcbmModel& model, const std::vector<Sample>& train_data,
                 const std::vector<Sample>& val_data, const TrainConfig& cfg,
                 const TrainOptions& options) {
  cfg.validate();
  if (train_data.empty()) throw PreconditionError("train: empty training set");
  if (val_data.empty()) throw PreconditionError("train: empty validation set");
  const auto& mc = model.config();
  std::vector<ag::IndexMatrix> gated;
  for (const auto& s : train_data) {
    if (s.label >= mc.num_classes)
      throw PreconditionError("train: sample " + s.id + " has label " + std::to_string(s.label) +
                              " outside " + std::to_string(mc.num_classes) + " classes");
    require_shape(s.scores, {mc.cells(), mc.num_concepts}, "score matrix");
    gated.push_back(top_k1_indices(s.scores, mc.k1));
  }

  std::ofstream log;
  if (options.out_dir) {
    std::filesystem::create_directories(*options.out_dir);
    log.open(*options.out_dir / "train_log.jsonl", std::ios::trunc);
    if (!log) throw IoError("cannot write " + (*options.out_dir / "train_log.jsonl").string());
  }

  std::vector<ag::Var> params;
  for (const auto& [name, p] : model.named_parameters()) params.push_back(p);
  AdamW opt(params, cfg);
  EarlyStopper stopper(cfg.patience, cfg.check_interval);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(train_data.size());
  std::iota(order.begin(), order.end(), 0);

  TrainState state;
  std::vector<Tensor> best = snapshot_parameters(model);
  bool step_limit = false;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs && !step_limit; ++epoch) {
    state.epoch = epoch;
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      model.zero_grad();
      StepRecord rec;
      rec.step = state.step + 1;
      rec.epoch = epoch;
      rec.lr = opt.learning_rate();
      for (std::size_t b = start; b < end; ++b) {
        const Sample& s = train_data[order[b]];
        LossTerms t;
        try {
          t = compute_losses(model.forward(s.image, gated[order[b]]), s.label, mc);
        } catch (const NumericError& e) {
          throw NumericError("non-finite loss at step " + std::to_string(rec.step) + " (epoch " +
                             std::to_string(epoch) + ", sample " + s.id + "): " + e.what());
        }
        const double lc = t.classification.value()[0], ll = t.locality.value()[0],
                     la = t.auxiliary.value()[0], total = t.total.value()[0];
        if (!std::isfinite(total)) {
          std::ostringstream msg;
          msg << "non-finite loss at step " << rec.step << " (epoch " << epoch << ", sample "
              << s.id << "): Lc=" << lc << " Ll=" << ll << " La=" << la << " total=" << total;
          throw NumericError(msg.str());
        }
        ag::backward(t.total);
        rec.lc += lc;
        rec.ll += ll;
        rec.la += la;
        rec.total += total;
      }
      const double n = static_cast<double>(end - start);
      rec.lc /= n;
      rec.ll /= n;
      rec.la /= n;
      rec.total /= n;
      opt.step(1.0 / n);
      state.step = rec.step;
      state.history.push_back(rec);
      if (log) log << nlohmann::json(rec).dump() << '\n';
      if (options.on_step) options.on_step(rec);
      if (cfg.max_steps && state.step >= cfg.max_steps) {
        step_limit = true;
        break;
      }
    }

    const bool last = epoch == cfg.max_epochs || step_limit;
    if (epoch % cfg.check_interval != 0 && !last) continue;
    const double acc = validate(model, val_data);
    state.val_history.push_back(acc);
    const bool stop = stopper.update(acc);
    state.epochs_since_improvement = stopper.epochs_since_improvement();
    if (stopper.improved()) {
      state.best_val_accuracy = acc;
      state.best_epoch = epoch;
      best = snapshot_parameters(model);
      if (options.out_dir)
        save_checkpoint(model, *options.out_dir / "best.ckpt",
                        {{"epoch", epoch}, {"step", state.step}, {"val_accuracy", acc}});
    }
    if (stop) {
      state.early_stopped = true;
      break;
    }
  }
  if (options.out_dir)
    save_checkpoint(model, *options.out_dir / "last.ckpt",
                    {{"epoch", state.epoch}, {"step", state.step},
                     {"val_accuracy", state.val_history.empty() ? 0.0 : state.val_history.back()}});
  restore_parameters(model, best);
  return state;
}

namespace {

constexpr char kCkptMagic[8] = {'L', 'C', 'B', 'M', 'C', 'K', 'P', 'T'};

}  // namespace

void save_checkpoint(const LcbmModel& model, const std::filesystem::path& path,
                     const nlohmann::json& metadata) {
  nlohmann::json header;
  header["model_config"] = model.config();
  header["backbone"] = model.backbone().spec();
  header["metadata"] = metadata;
  std::string payload;
  for (const auto& [name, p] : model.named_parameters()) {
    header["tensors"].push_back({{"name", name}, {"shape", p.value().shape()}});
    for (double v : p.value().data()) put_le(payload, std::bit_cast<std::uint64_t>(v), 8);
  }
  const std::string h = header.dump();
  std::string out(kCkptMagic, sizeof kCkptMagic);
  put_le(out, kCheckpointVersion, 4);
  put_le(out, h.size(), 8);
  out += h;
  out += payload;
  put_le(out, crc(out, out.size()), 4);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write checkpoint " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("short write to checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path,
                                 const std::optional<ModelConfig>& expected) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const std::string where = "checkpoint " + path.string();
  if (bytes.size() < 24 || bytes.compare(0, 8, kCkptMagic, 8) != 0)
    throw IoError(where + ": not a checkpoint file");
  const auto version = get_le(bytes, 8, 4);
  if (version != kCheckpointVersion)
    throw IoError(where + ": format version " + std::to_string(version) + ", expected " +
                  std::to_string(kCheckpointVersion));
  const auto hlen = get_le(bytes, 12, 8);
  if (hlen > bytes.size() - 24) throw IoError(where + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(20, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(where + ": bad header: " + e.what());
  }
  std::size_t need = 0;
  for (const auto& t : header.at("tensors"))
    need += shape_numel(t.at("shape").get<std::vector<std::size_t>>());
  const std::size_t data_at = 20 + hlen;
  if (bytes.size() != data_at + 8 * need + 4) throw IoError(where + ": truncated or padded file");
  if (get_le(bytes, bytes.size() - 4, 4) != crc(bytes, bytes.size() - 4))
    throw IoError(where + ": checksum mismatch");

  const auto cfg = header.at("model_config").get<ModelConfig>();
  if (expected) {
    const nlohmann::json want = *expected, have = cfg;
    if (want != have)
      throw ConfigError(where + " was trained with " + have.dump() + ", expected " + want.dump());
  }
  LoadedCheckpoint out{LcbmModel(cfg, header.at("backbone").get<BackboneSpec>(), 0),
                       header.value("metadata", nlohmann::json::object())};
  auto params = out.model.named_parameters();
  const auto& table = header.at("tensors");
  if (table.size() != params.size()) throw IoError(where + ": tensor count does not match model");
  std::size_t pos = data_at;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (table[i].at("name").get<std::string>() != params[i].first)
      throw IoError(where + ": unexpected tensor " + table[i].at("name").get<std::string>());
    Tensor t(table[i].at("shape").get<std::vector<std::size_t>>());
    if (t.shape() != params[i].second.value().shape())
      throw IoError(where + ": shape mismatch for " + params[i].first);
    for (auto& v : t.data()) {
      v = std::bit_cast<double>(get_le(bytes, pos, 8));
      pos += 8;
    }
    params[i].second.mutable_value() = std::move(t);
  }
  return out;
}

}  // namespace lcbm
