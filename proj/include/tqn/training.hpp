#pragma once

// Two-stage training. Stage 1 trains encoder and head end to end on short
// sequences. Stage 2 runs over the whole training split, in one of three
// modes: a feature bank refreshed by an online window, a frozen bank with a
// fixed encoder, or plain end-to-end encoding.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "tqn/feature_bank.hpp"
#include "tqn/metrics.hpp"
#include "tqn/optim.hpp"
#include "tqn/variants.hpp"

namespace tqn {

class ScheduleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StageSchedule {
  std::size_t stage1_epochs = 50;
  std::size_t max_frames = 64;  // stage 1 admits sequences with fewer frames
  std::size_t stage2_epochs = 30;
  std::size_t n_online = 10;

  void validate() const {
    if (max_frames < 1) throw ConfigError("schedule: max_frames must be >= 1");
    if (n_online < 1) throw ConfigError("schedule: n_online must be >= 1");
  }
};

enum class Stage2Mode { bank, frozen, end_to_end };

inline std::string mode_name(Stage2Mode m) {
  switch (m) {
    case Stage2Mode::bank: return "bank";
    case Stage2Mode::frozen: return "frozen";
    case Stage2Mode::end_to_end: return "end_to_end";
  }
  return "?";
}

inline Stage2Mode parse_mode(const std::string& s) {
  for (auto m : {Stage2Mode::bank, Stage2Mode::frozen, Stage2Mode::end_to_end}) {
    if (mode_name(m) == s) return m;
  }
  throw ConfigError("unknown stage-2 mode '" + s + "' (expected bank, frozen or end_to_end)");
}

struct TrainConfig {
  StageSchedule schedule;
  Stage2Mode mode = Stage2Mode::bank;
  // When positive, every training appearance is a random contiguous crop of
  // max(1, round(crop_fraction * t_v)) clips, encoded online.
  double crop_fraction = 0.0;
  double encoder_lr = 1e-3;
  double decoder_lr = 1e-4;
  double weight_decay = 1e-5;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  bool eval_each_epoch = true;

  void validate() const {
    schedule.validate();
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(crop_fraction >= 0.0 && crop_fraction <= 1.0)) throw ConfigError("train: crop_fraction must lie in [0, 1]");
    if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be >= 0");
  }
};

inline json to_json(const StageSchedule& s) {
  return {{"stage1_epochs", s.stage1_epochs}, {"max_frames", s.max_frames}, {"stage2_epochs", s.stage2_epochs},
          {"n_online", s.n_online}};
}

inline json to_json(const TrainConfig& c) {
  return {{"schedule", to_json(c.schedule)}, {"mode", mode_name(c.mode)},       {"crop_fraction", c.crop_fraction},
          {"encoder_lr", c.encoder_lr},      {"decoder_lr", c.decoder_lr},      {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size},      {"seed", c.seed},                  {"eval_each_epoch", c.eval_each_epoch}};
}

inline json to_json(const ModelConfig& m) {
  const auto& e = m.encoder;
  const auto& h = m.head;
  return {{"variant", variant_name(m.variant)},
          {"encoder",
           {{"input_dim", e.input_dim}, {"clip_len", e.clip_len}, {"kernel", e.kernel}, {"hidden_dim", e.hidden_dim},
            {"feature_dim", e.feature_dim}}},
          {"head",
           {{"model_dim", h.model_dim}, {"layers", h.layers}, {"heads", h.heads}, {"ff_dim", h.ff_dim},
            {"dropout_decoder", h.dropout_decoder}, {"dropout_output", h.dropout_output}}}};
}

namespace detail {

template <class F>
void read_keys(const json& j, const std::string& where, F&& on_key) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!on_key(it.key(), *it)) throw ConfigError(where + ": unknown key '" + it.key() + "'");
  }
}

}  // namespace detail

inline StageSchedule schedule_from_json(const json& j) {
  StageSchedule s;
  detail::read_keys(j, "schedule", [&](const std::string& k, const json& v) {
    if (k == "stage1_epochs") s.stage1_epochs = v.get<std::size_t>();
    else if (k == "max_frames") s.max_frames = v.get<std::size_t>();
    else if (k == "stage2_epochs") s.stage2_epochs = v.get<std::size_t>();
    else if (k == "n_online") s.n_online = v.get<std::size_t>();
    else return false;
    return true;
  });
  return s;
}

inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  detail::read_keys(j, "train", [&](const std::string& k, const json& v) {
    if (k == "schedule") c.schedule = schedule_from_json(v);
    else if (k == "mode") c.mode = parse_mode(v.get<std::string>());
    else if (k == "crop_fraction") c.crop_fraction = v.get<double>();
    else if (k == "encoder_lr") c.encoder_lr = v.get<double>();
    else if (k == "decoder_lr") c.decoder_lr = v.get<double>();
    else if (k == "weight_decay") c.weight_decay = v.get<double>();
    else if (k == "batch_size") c.batch_size = v.get<std::size_t>();
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else if (k == "eval_each_epoch") c.eval_each_epoch = v.get<bool>();
    else return false;
    return true;
  });
  return c;
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig m;
  detail::read_keys(j, "model", [&](const std::string& k, const json& v) {
    if (k == "variant") {
      m.variant = parse_variant(v.get<std::string>());
    } else if (k == "encoder") {
      auto& e = m.encoder;
      detail::read_keys(v, "model.encoder", [&](const std::string& ek, const json& ev) {
        if (ek == "input_dim") e.input_dim = ev.get<std::size_t>();
        else if (ek == "clip_len") e.clip_len = ev.get<std::size_t>();
        else if (ek == "kernel") e.kernel = ev.get<std::size_t>();
        else if (ek == "hidden_dim") e.hidden_dim = ev.get<std::size_t>();
        else if (ek == "feature_dim") e.feature_dim = ev.get<std::size_t>();
        else return false;
        return true;
      });
    } else if (k == "head") {
      auto& h = m.head;
      detail::read_keys(v, "model.head", [&](const std::string& hk, const json& hv) {
        if (hk == "model_dim") h.model_dim = hv.get<std::size_t>();
        else if (hk == "layers") h.layers = hv.get<std::size_t>();
        else if (hk == "heads") h.heads = hv.get<std::size_t>();
        else if (hk == "ff_dim") h.ff_dim = hv.get<std::size_t>();
        else if (hk == "dropout_decoder") h.dropout_decoder = hv.get<double>();
        else if (hk == "dropout_output") h.dropout_output = hv.get<double>();
        else return false;
        return true;
      });
    } else {
      return false;
    }
    return true;
  });
  return m;
}

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based, counted across both stages
  int stage = 1;
  double train_loss = 0.0;
  double eval_per_video = std::numeric_limits<double>::quiet_NaN();
  double eval_per_class = std::numeric_limits<double>::quiet_NaN();

  bool operator==(const EpochMetrics& o) const {
    auto same = [](double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; };
    return epoch == o.epoch && stage == o.stage && same(train_loss, o.train_loss) &&
           same(eval_per_video, o.eval_per_video) && same(eval_per_class, o.eval_per_class);
  }
};

inline std::string format_metric(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string metrics_csv(const std::vector<EpochMetrics>& log) {
  std::string out = "epoch,stage,train_loss,eval_per_video_acc,eval_per_class_acc\n";
  for (const auto& m : log) {
    out += std::to_string(m.epoch) + ',' + std::to_string(m.stage) + ',' + format_metric(m.train_loss) + ',' +
           format_metric(m.eval_per_video) + ',' + format_metric(m.eval_per_class) + '\n';
  }
  return out;
}

struct IterationInfo {
  int stage = 1;
  std::size_t epoch = 0;  // within the stage, 0-based
  std::uint64_t iteration = 0;
  double loss = 0.0;
  std::vector<OnlineWindow> windows;  // committed this iteration (bank mode)
};

class Trainer {
 public:
  Trainer(SequenceModel& model, const SyntheticDataset& data, const FactorizationSchema& schema, TrainConfig config)
      : model_(model), data_(data), schema_(schema), config_(std::move(config)) {
    config_.validate();
    if (model_.config.encoder.clip_len != data_.config.clip_len || model_.config.encoder.input_dim != data_.config.input_dim) {
      throw ConfigError("train: encoder clip_len/input_dim do not match the dataset");
    }
    adam_ = Adam(AdamSettings{0.9, 0.999, 1e-8, config_.weight_decay});
    adam_.add_group(model_.encoder_parameters(), config_.encoder_lr);
    adam_.add_group(model_.head_parameters(), config_.decoder_lr);
    for (std::size_t i = 0; i < data_.train.size(); ++i) {
      if (data_.train[i].clips * data_.config.clip_len < config_.schedule.max_frames) stage1_pool_.push_back(i);
    }
    if (config_.schedule.stage1_epochs > 0 && stage1_pool_.empty()) {
      throw ScheduleError("stage 1 admits no training sequence: every sequence has at least " +
                          std::to_string(config_.schedule.max_frames) + " frames");
    }
  }

  std::function<void(const IterationInfo&)> on_iteration;

  const TrainConfig& config() const { return config_; }
  const std::vector<EpochMetrics>& log() const { return log_; }
  const std::optional<FeatureBank>& bank() const { return bank_; }
  const std::optional<EvalResult>& last_eval() const { return last_eval_; }
  std::uint64_t iteration() const { return iteration_; }
  std::size_t epochs_done() const { return epochs_done_; }
  std::size_t stage1_pool_size() const { return stage1_pool_.size(); }

  // Supplies the bank used by stage 2 instead of one built from the encoder.
  void set_bank(FeatureBank bank) { bank_ = std::move(bank); }

  bool finished() {
    advance_stage();
    return stage_ == 2 && epoch_in_stage_ >= config_.schedule.stage2_epochs;
  }

  // Runs up to `max_epochs` further epochs (all remaining when empty).
  void run(std::optional<std::size_t> max_epochs = std::nullopt) {
    std::size_t done = 0;
    while (!finished() && (!max_epochs || done < *max_epochs)) {
      run_epoch();
      ++done;
    }
  }

  void save_checkpoint(const std::filesystem::path& path) const { write_file_atomic(path, checkpoint_bytes()); }

  std::string checkpoint_bytes() const {
    ContainerWriter w;
    auto& m = w.meta();
    m["kind"] = "checkpoint";
    m["model"] = to_json(model_.config);
    m["train"] = to_json(config_);
    m["stage"] = stage_;
    m["epoch_in_stage"] = epoch_in_stage_;
    m["epochs_done"] = epochs_done_;
    m["iteration"] = iteration_;
    m["adam_steps"] = adam_.steps();
    json log = json::array();
    for (const auto& e : log_) {
      log.push_back({e.epoch, e.stage, format_metric(e.train_loss), format_metric(e.eval_per_video),
                     format_metric(e.eval_per_class)});
    }
    m["log"] = log;
    json names = json::array();
    for (const auto& [name, t] : model_.params.items()) {
      names.push_back(name);
      w.add("param." + name, t.shape(), t.values());
    }
    m["params"] = names;
    for (std::size_t i = 0; i < adam_.first_moments().size(); ++i) {
      w.add("adam.m." + std::to_string(i), {adam_.first_moments()[i].size()}, adam_.first_moments()[i]);
      w.add("adam.v." + std::to_string(i), {adam_.second_moments()[i].size()}, adam_.second_moments()[i]);
    }
    m["has_bank"] = bank_.has_value();
    if (bank_) bank_->write_to(w, "bank.");
    return w.bytes();
  }

  // Restores parameters, optimizer moments, bank and progress. The model
  // and training configuration must match the ones that wrote the file.
  void load_checkpoint(const std::filesystem::path& path) {
    const auto r = ContainerReader::load(path);
    const auto& m = r.meta();
    if (m.value("kind", "") != "checkpoint") throw IoError(path.string() + ": not a checkpoint");
    if (m.at("model") != to_json(model_.config)) throw ConfigError(path.string() + ": model configuration differs");
    if (m.at("train") != to_json(config_)) throw ConfigError(path.string() + ": training configuration differs");
    load_parameters(r, model_.params, path.string());
    for (std::size_t i = 0; i < adam_.first_moments().size(); ++i) {
      auto mv = r.f64("adam.m." + std::to_string(i));
      auto vv = r.f64("adam.v." + std::to_string(i));
      if (mv.size() != adam_.first_moments()[i].size() || vv.size() != mv.size()) {
        throw IoError(path.string() + ": optimizer state shape mismatch");
      }
      adam_.first_moments()[i] = std::move(mv);
      adam_.second_moments()[i] = std::move(vv);
    }
    adam_.set_steps(m.at("adam_steps").get<std::size_t>());
    stage_ = m.at("stage").get<int>();
    epoch_in_stage_ = m.at("epoch_in_stage").get<std::size_t>();
    epochs_done_ = m.at("epochs_done").get<std::size_t>();
    iteration_ = m.at("iteration").get<std::uint64_t>();
    log_.clear();
    for (const auto& e : m.at("log")) {
      EpochMetrics em;
      em.epoch = e.at(0).get<std::size_t>();
      em.stage = e.at(1).get<int>();
      em.train_loss = std::stod(e.at(2).get<std::string>());
      em.eval_per_video = std::stod(e.at(3).get<std::string>());
      em.eval_per_class = std::stod(e.at(4).get<std::string>());
      log_.push_back(em);
    }
    bank_.reset();
    if (m.at("has_bank").get<bool>()) bank_ = FeatureBank::read_from(r, "bank.");
  }

  static void load_parameters(const ContainerReader& r, ParameterSet& params, const std::string& label) {
    const auto names = r.meta().at("params").get<std::vector<std::string>>();
    if (names.size() != params.items().size()) throw ConfigError(label + ": parameter count differs from the model");
    for (std::size_t i = 0; i < names.size(); ++i) {
      auto [name, t] = params.items()[i];
      if (names[i] != name) throw ConfigError(label + ": expected parameter " + name + ", found " + names[i]);
      if (r.shape("param." + name) != t.shape()) throw ConfigError(label + ": shape mismatch for " + name);
      const auto v = r.f64("param." + name);
      std::copy(v.begin(), v.end(), t.mutable_values().begin());
    }
  }

 private:
  bool uses_bank() const { return config_.crop_fraction == 0.0 && config_.mode != Stage2Mode::end_to_end; }

  void advance_stage() {
    if (stage_ == 1 && epoch_in_stage_ >= config_.schedule.stage1_epochs) {
      stage_ = 2;
      epoch_in_stage_ = 0;
    }
  }

  void run_epoch() {
    advance_stage();
    if (stage_ == 2 && uses_bank() && !bank_) bank_ = init_bank(model_.encoder, data_, iteration_);
    std::vector<std::size_t> order;
    if (stage_ == 1) {
      order = stage1_pool_;
    } else {
      order.resize(data_.train.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    }
    Rng shuffle = Rng::stream(config_.seed, StreamTag::shuffle, {static_cast<std::uint64_t>(stage_), epoch_in_stage_});
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.index(i)]);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < order.size(); b += config_.batch_size) {
      const std::size_t n = std::min(config_.batch_size, order.size() - b);
      loss_sum += step(std::span<const std::size_t>(order).subspan(b, n)) * static_cast<double>(n);
    }
    EpochMetrics em;
    em.epoch = epochs_done_ + 1;
    em.stage = stage_;
    em.train_loss = order.empty() ? 0.0 : loss_sum / static_cast<double>(order.size());
    const bool last = stage_ == 2 && epoch_in_stage_ + 1 == config_.schedule.stage2_epochs;
    if ((config_.eval_each_epoch || last) && !data_.test.empty()) {
      last_eval_ = evaluate(model_, data_, Split::test, schema_);
      em.eval_per_video = last_eval_->per_video;
      em.eval_per_class = last_eval_->per_class;
    }
    log_.push_back(em);
    ++epoch_in_stage_;
    ++epochs_done_;
  }

  double step(std::span<const std::size_t> batch) {
    ComputationRecord record;
    std::vector<OnlineWindow> windows;
    std::vector<Tensor> online_rows;
    double value = 0.0;
    {
      Recording guard(&record);
      std::vector<Tensor> losses;
      for (std::size_t slot = 0; slot < batch.size(); ++slot) {
        const auto& s = data_.train[batch[slot]];
        Rng drop = Rng::stream(config_.seed, StreamTag::dropout, {iteration_, slot});
        const Tensor frames = data_.frames(s);
        Tensor features;
        if (config_.crop_fraction > 0.0) {
          Rng w = Rng::stream(config_.seed, StreamTag::window, {iteration_, slot});
          const auto len = static_cast<std::size_t>(std::llround(config_.crop_fraction * static_cast<double>(s.clips)));
          const auto crop = sample_online_window(s.id, s.clips, std::max<std::size_t>(1, len), w);
          features = model_.encoder.encode_clips(frames, crop.start, crop.length);
        } else if (stage_ == 1 || config_.mode == Stage2Mode::end_to_end) {
          features = model_.encoder(frames);
        } else if (config_.mode == Stage2Mode::frozen) {
          features = bank_->read(s.id);
        } else {
          Rng w = Rng::stream(config_.seed, StreamTag::window, {iteration_, slot});
          const auto win = sample_online_window(s.id, s.clips, config_.schedule.n_online, w);
          const Tensor online = model_.encoder.encode_clips(frames, win.start, win.length);
          features = bank_->assemble(win, online);
          windows.push_back(win);
          online_rows.push_back(online);
        }
        losses.push_back(model_.head->loss(features, s.class_index, ForwardMode{true, &drop}));
      }
      const Tensor total = scale(add_all(losses), 1.0 / static_cast<double>(batch.size()));
      record.backward(total);
      value = total.item();
    }
    adam_.step();
    adam_.zero_grad();
    for (std::size_t i = 0; i < windows.size(); ++i) bank_->commit(windows[i], online_rows[i], iteration_);
    if (on_iteration) on_iteration({stage_, epoch_in_stage_, iteration_, value, windows});
    ++iteration_;
    return value;
  }

  SequenceModel& model_;
  const SyntheticDataset& data_;
  const FactorizationSchema& schema_;
  TrainConfig config_;
  Adam adam_;
  std::vector<std::size_t> stage1_pool_;
  std::optional<FeatureBank> bank_;
  std::optional<EvalResult> last_eval_;
  std::vector<EpochMetrics> log_;
  int stage_ = 1;
  std::size_t epoch_in_stage_ = 0;
  std::size_t epochs_done_ = 0;
  std::uint64_t iteration_ = 0;
};

struct TrainResult {
  std::vector<EpochMetrics> log;
  std::optional<FeatureBank> bank;
  std::optional<EvalResult> eval;
};

inline TrainResult run_stage_schedule(SequenceModel& model, const SyntheticDataset& data, const FactorizationSchema& schema,
                                      const TrainConfig& config) {
  Trainer t(model, data, schema, config);
  t.run();
  return {t.log(), t.bank(), t.last_eval()};
}

// Trains only the head on a fixed bank; the encoder is never run or updated.
inline TrainResult frozen_bank_mode(const FeatureBank& bank, SequenceModel& model, const SyntheticDataset& data,
                                    const FactorizationSchema& schema, TrainConfig config) {
  config.schedule.stage1_epochs = 0;
  config.mode = Stage2Mode::frozen;
  config.crop_fraction = 0.0;
  Trainer t(model, data, schema, config);
  t.set_bank(bank);
  t.run();
  return {t.log(), t.bank(), t.last_eval()};
}

inline std::unique_ptr<SequenceModel> train_model(const ModelConfig& model_config, const SyntheticDataset& data,
                                                  const FactorizationSchema& schema, const TrainConfig& config,
                                                  std::uint64_t init_seed, TrainResult* result = nullptr) {
  Rng rng = Rng::stream(init_seed, StreamTag::init);
  auto model = build_model(model_config, schema, rng);
  auto r = run_stage_schedule(*model, data, schema, config);
  if (result) *result = std::move(r);
  return model;
}

}  // namespace tqn
