#pragma once

// Experiment configuration, run manifests and the command implementations
// behind the tqn command-line tool.

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tqn/grad_check.hpp"
#include "tqn/training.hpp"

namespace tqn {

#ifndef TQN_VERSION
#define TQN_VERSION "dev"
#endif

enum ExitCode : int {
  kExitOk = 0,
  kExitUnexpected = 1,
  kExitConfig = 2,
  kExitData = 3,
  kExitGate = 4,
  kExitIo = 5,
};

inline constexpr const char* kExitCodeTable =
    "Exit codes:\n"
    "  0  success\n"
    "  1  unexpected internal error\n"
    "  2  configuration or usage error (bad key, unknown variant, model/checkpoint mismatch)\n"
    "  3  data error (missing or malformed schema, dataset or run files)\n"
    "  4  gate failure (grad-check tolerance or report gates not met)\n"
    "  5  I/O error (unwritable output, output directory locked)\n";

namespace fs = std::filesystem;

struct Seeds {
  std::uint64_t data = 0;
  std::uint64_t init = 0;
  std::uint64_t train = 0;
};

struct ExperimentConfig {
  fs::path source;
  std::string schema_name;
  fs::path queries_csv;
  fs::path classes_csv;
  fs::path dataset;
  fs::path output_dir;
  Seeds seeds;
  GeneratorConfig generator;
  ModelConfig model;
  TrainConfig train;

  FactorizationSchema load_schema() const { return tqn::load_schema(queries_csv.string(), classes_csv.string()); }
};

inline json to_json(const ExperimentConfig& c) {
  json gen = to_json(c.generator);
  gen.erase("seed");
  json train = to_json(c.train);
  train.erase("seed");
  return {{"schema", {{"name", c.schema_name}, {"queries", c.queries_csv.string()}, {"classes", c.classes_csv.string()}}},
          {"dataset", c.dataset.string()},
          {"output_dir", c.output_dir.string()},
          {"seeds", {{"data", c.seeds.data}, {"init", c.seeds.init}, {"train", c.seeds.train}}},
          {"generator", gen},
          {"model", to_json(c.model)},
          {"train", train}};
}

inline void apply_seed_override(ExperimentConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("--seed-override expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);
  std::uint64_t v = 0;
  try {
    std::size_t used = 0;
    v = std::stoull(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
  } catch (const std::exception&) {
    throw ConfigError("--seed-override: '" + value + "' is not an unsigned integer");
  }
  if (key == "data") c.seeds.data = v;
  else if (key == "init") c.seeds.init = v;
  else if (key == "train") c.seeds.train = v;
  else throw ConfigError("--seed-override: unknown seed '" + key + "' (expected data, init or train)");
  c.generator.seed = c.seeds.data;
  c.train.seed = c.seeds.train;
}

// Relative paths inside the file resolve against the file's directory.
inline ExperimentConfig parse_experiment(const json& j, const fs::path& base) {
  ExperimentConfig c;
  bool have_schema = false, have_seeds = false, have_out = false;
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : (base / p).lexically_normal(); };
  detail::read_keys(j, "config", [&](const std::string& k, const json& v) {
    if (k == "schema") {
      have_schema = true;
      detail::read_keys(v, "schema", [&](const std::string& sk, const json& sv) {
        if (sk == "name") c.schema_name = sv.get<std::string>();
        else if (sk == "queries") c.queries_csv = resolve(sv.get<std::string>());
        else if (sk == "classes") c.classes_csv = resolve(sv.get<std::string>());
        else return false;
        return true;
      });
    } else if (k == "dataset") {
      c.dataset = resolve(v.get<std::string>());
    } else if (k == "output_dir") {
      have_out = true;
      c.output_dir = resolve(v.get<std::string>());
    } else if (k == "seeds") {
      have_seeds = true;
      int found = 0;
      detail::read_keys(v, "seeds", [&](const std::string& sk, const json& sv) {
        if (sk == "data") c.seeds.data = sv.get<std::uint64_t>();
        else if (sk == "init") c.seeds.init = sv.get<std::uint64_t>();
        else if (sk == "train") c.seeds.train = sv.get<std::uint64_t>();
        else return false;
        ++found;
        return true;
      });
      if (found != 3) throw ConfigError("seeds: data, init and train must all be given");
    } else if (k == "generator") {
      if (v.contains("seed")) throw ConfigError("generator: set the data seed under seeds.data");
      c.generator = generator_from_json(v);
    } else if (k == "model") {
      c.model = model_config_from_json(v);
    } else if (k == "train") {
      if (v.contains("seed")) throw ConfigError("train: set the training seed under seeds.train");
      c.train = train_config_from_json(v);
    } else {
      return false;
    }
    return true;
  });
  if (!have_schema || c.queries_csv.empty() || c.classes_csv.empty()) {
    throw ConfigError("config: schema.queries and schema.classes are required");
  }
  if (!have_seeds) throw ConfigError("config: seeds section is required");
  if (!have_out) throw ConfigError("config: output_dir is required");
  if (c.schema_name.empty()) c.schema_name = c.classes_csv.stem().string();
  c.generator.seed = c.seeds.data;
  c.train.seed = c.seeds.train;
  c.train.validate();
  c.model.encoder.validate();
  return c;
}

inline ExperimentConfig load_experiment(const fs::path& path, const std::vector<std::string>& seed_overrides = {},
                                        const std::optional<fs::path>& out = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  ExperimentConfig c;
  try {
    c = parse_experiment(j, fs::absolute(path).parent_path());
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  c.source = path;
  for (const auto& o : seed_overrides) apply_seed_override(c, o);
  if (out) c.output_dir = fs::absolute(*out).lexically_normal();
  if (c.dataset.empty()) c.dataset = c.output_dir / "dataset.bin";
  for (const auto& p : {c.queries_csv, c.classes_csv}) {
    if (!fs::exists(p)) throw DataError("schema file not found: " + p.string());
  }
  return c;
}

// Exclusive claim on an output directory for the lifetime of the object.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir) : path_(dir / ".lock") {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) {
      if (errno == EEXIST) throw IoError(dir.string() + " is locked by another run (remove " + path_.string() + " if stale)");
      throw IoError("cannot write to " + dir.string());
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    if (::write(fd_, pid.data(), pid.size()) < 0) {
      ::close(fd_);
      fs::remove(path_);
      throw IoError("cannot write lock file " + path_.string());
    }
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;
  ~RunLock() {
    ::close(fd_);
    std::error_code ec;
    fs::remove(path_, ec);
  }

 private:
  fs::path path_;
  int fd_ = -1;
};

inline json make_manifest(const ExperimentConfig& config, const std::string& command, const fs::path& dir,
                          const std::vector<fs::path>& artifacts, double seconds) {
  json files = json::array();
  for (const auto& a : artifacts) {
    files.push_back({{"path", fs::relative(a, dir).string()}, {"sha256", sha256_file(a)}, {"bytes", fs::file_size(a)}});
  }
  return {{"command", command},     {"version", std::string("tqn ") + TQN_VERSION}, {"config", to_json(config)},
          {"artifacts", files},     {"wall_seconds", seconds}};
}

inline void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

inline json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// Paths of artifacts whose current hash differs from the manifest.
inline std::vector<std::string> verify_manifest(const fs::path& manifest_path) {
  const auto m = read_json(manifest_path);
  std::vector<std::string> bad;
  for (const auto& a : m.at("artifacts")) {
    const auto p = manifest_path.parent_path() / a.at("path").get<std::string>();
    if (!fs::exists(p) || sha256_file(p) != a.at("sha256").get<std::string>()) bad.push_back(p.string());
  }
  return bad;
}

struct RunSummary {
  std::string name;
  Variant variant = Variant::tqn;
  Stage2Mode mode = Stage2Mode::bank;
  double crop_fraction = 0.0;
  double per_video = 0.0;
  double per_class = 0.0;
  std::vector<double> terciles;  // shortest, middle, longest third by clip count
  std::optional<double> localization;
  std::optional<double> chance;
};

inline json to_json(const RunSummary& s) {
  json j{{"name", s.name},
         {"variant", variant_name(s.variant)},
         {"mode", mode_name(s.mode)},
         {"crop_fraction", s.crop_fraction},
         {"per_video", s.per_video},
         {"per_class", s.per_class},
         {"terciles", s.terciles}};
  if (s.localization) j["localization"] = *s.localization;
  if (s.chance) j["chance"] = *s.chance;
  return j;
}

inline RunSummary summary_from_json(const json& j) {
  RunSummary s;
  s.name = j.at("name").get<std::string>();
  s.variant = parse_variant(j.at("variant").get<std::string>());
  s.mode = parse_mode(j.at("mode").get<std::string>());
  s.crop_fraction = j.at("crop_fraction").get<double>();
  s.per_video = j.at("per_video").get<double>();
  s.per_class = j.at("per_class").get<double>();
  s.terciles = j.at("terciles").get<std::vector<double>>();
  if (j.contains("localization")) s.localization = j.at("localization").get<double>();
  if (j.contains("chance")) s.chance = j.at("chance").get<double>();
  return s;
}

struct GateResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

namespace detail {

inline std::string fixed(double v, int digits = 3) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

}  // namespace detail

// Comparative gates over a sweep. The reference run of a variant is its
// first bank-mode, uncropped run; ablation runs are matched by mode/crop.
inline std::vector<GateResult> evaluate_gates(const std::vector<RunSummary>& runs) {
  auto main_run = [&](Variant v) -> const RunSummary* {
    for (const auto& r : runs) {
      if (r.variant == v && r.mode == Stage2Mode::bank && r.crop_fraction == 0.0) return &r;
    }
    return nullptr;
  };
  std::vector<GateResult> out;
  const auto* tqn = main_run(Variant::tqn);
  const auto* avg = main_run(Variant::avgpool);
  const auto* sa = main_run(Variant::selfattn_cls);
  const auto* bce = main_run(Variant::multilabel_bce);
  const auto* s2s = main_run(Variant::seq2seq);
  if (tqn && avg) {
    const double gap = tqn->per_video - avg->per_video;
    const double short_gap = tqn->terciles.at(0) - avg->terciles.at(0);
    const double long_gap = tqn->terciles.at(2) - avg->terciles.at(2);
    out.push_back({"tqn_beats_avgpool", gap >= 0.05 && long_gap > short_gap,
                   "gap " + detail::fixed(gap) + " (need >= 0.050), long-third gap " + detail::fixed(long_gap) +
                       " vs short-third gap " + detail::fixed(short_gap)});
  }
  if (tqn) {
    for (const auto& r : runs) {
      if (r.variant == Variant::tqn && r.mode == Stage2Mode::frozen && r.crop_fraction == 0.0) {
        const double gap = tqn->per_video - r.per_video;
        out.push_back({"bank_beats_frozen", gap >= 0.05, "gap " + detail::fixed(gap) + " (need >= 0.050) vs " + r.name});
        break;
      }
    }
  }
  if (avg) {
    for (const auto& r : runs) {
      if (r.variant == Variant::avgpool && r.crop_fraction > 0.0) {
        out.push_back({"crop_below_full", r.per_video < avg->per_video,
                       r.name + " " + detail::fixed(r.per_video) + " vs full " + detail::fixed(avg->per_video)});
        break;
      }
    }
  }
  if (tqn && avg && sa && bce && s2s) {
    const bool top = tqn->per_video >= avg->per_video && tqn->per_video >= sa->per_video &&
                     tqn->per_video >= bce->per_video && tqn->per_video >= s2s->per_video;
    out.push_back({"tqn_at_least_baselines", top,
                   "tqn " + detail::fixed(tqn->per_video) + " vs avgpool " + detail::fixed(avg->per_video) + ", selfattn_cls " +
                       detail::fixed(sa->per_video) + ", multilabel_bce " + detail::fixed(bce->per_video) + ", seq2seq " +
                       detail::fixed(s2s->per_video)});
    const double floor = std::min(avg->per_video, sa->per_video);
    out.push_back({"factored_supervision_below_multiclass", s2s->per_video < floor && bce->per_video < floor,
                   "seq2seq " + detail::fixed(s2s->per_video) + ", multilabel_bce " + detail::fixed(bce->per_video) +
                       " vs min(avgpool, selfattn_cls) " + detail::fixed(floor)});
  }
  if (tqn && tqn->localization && tqn->chance) {
    out.push_back({"localization_above_chance", *tqn->localization >= *tqn->chance + 0.3,
                   "score " + detail::fixed(*tqn->localization) + " vs chance " + detail::fixed(*tqn->chance) + " + 0.300"});
  }
  return out;
}

struct CommandOptions {
  fs::path config;
  std::optional<fs::path> out;
  std::vector<std::string> seed_overrides;
  bool resume = false;
  std::optional<std::size_t> max_epochs;
  std::optional<fs::path> checkpoint;
  std::vector<std::size_t> ids;
  std::ostream* log = &std::cout;
};

// Runs `body`, mapping exceptions to exit codes with a one-line diagnostic.
template <class F>
int run_command(const char* name, F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    std::cerr << name << ": config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ScheduleError& e) {
    std::cerr << name << ": config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const SchemaError& e) {
    std::cerr << name << ": data error: " << e.what() << "\n";
    return kExitData;
  } catch (const csv::CsvError& e) {
    std::cerr << name << ": data error: " << e.what() << "\n";
    return kExitData;
  } catch (const DataError& e) {
    std::cerr << name << ": data error: " << e.what() << "\n";
    return kExitData;
  } catch (const IoError& e) {
    std::cerr << name << ": io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << name << ": io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << name << ": error: " << e.what() << "\n";
    return kExitUnexpected;
  }
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline int cmd_gen_data(const CommandOptions& opt) {
  return run_command("gen-data", [&] {
    const auto t0 = std::chrono::steady_clock::now();
    const auto config = load_experiment(opt.config, opt.seed_overrides, opt.out);
    const auto schema = config.load_schema();
    const auto dir = config.dataset.parent_path();
    RunLock lock(dir);
    const auto data = gen_dataset(config.generator, schema, config.schema_name);
    save_dataset(data, config.dataset);
    const auto manifest_path = dir / (config.dataset.stem().string() + "_manifest.json");
    write_json(manifest_path, make_manifest(config, "gen-data", dir, {config.dataset}, seconds_since(t0)));
    *opt.log << "wrote " << data.train.size() << " train and " << data.test.size() << " test sequences to "
             << config.dataset.string() << "\n";
    return int(kExitOk);
  });
}

struct LoadedRun {
  ExperimentConfig config;
  FactorizationSchema schema;
  SyntheticDataset data;
};

inline LoadedRun load_run_inputs(const CommandOptions& opt) {
  LoadedRun r{load_experiment(opt.config, opt.seed_overrides, opt.out), {}, {}};
  r.schema = r.config.load_schema();
  if (!fs::exists(r.config.dataset)) throw DataError("dataset not found: " + r.config.dataset.string() + " (run gen-data first)");
  r.data = load_dataset(r.config.dataset);
  if (!r.data.schema_name.empty() && r.data.schema_name != r.config.schema_name) {
    throw ConfigError("dataset was generated for schema '" + r.data.schema_name + "', config names '" +
                      r.config.schema_name + "'");
  }
  check_dataset(r.data, r.schema);
  return r;
}

inline std::unique_ptr<SequenceModel> model_for(const ExperimentConfig& config, const FactorizationSchema& schema) {
  Rng rng = Rng::stream(config.seeds.init, StreamTag::init);
  return build_model(config.model, schema, rng);
}

// Rebuilds the model stored in a checkpoint and loads its parameters.
inline std::unique_ptr<SequenceModel> load_checkpoint_model(const fs::path& path, const FactorizationSchema& schema) {
  if (!fs::exists(path)) throw DataError("checkpoint not found: " + path.string());
  const auto r = ContainerReader::load(path);
  if (r.meta().value("kind", "") != "checkpoint") throw DataError(path.string() + ": not a checkpoint");
  const auto mc = model_config_from_json(r.meta().at("model"));
  Rng rng(0);
  auto model = build_model(mc, schema, rng);
  Trainer::load_parameters(r, model->params, path.string());
  return model;
}

inline RunSummary summarize(const std::string& name, const SequenceModel& model, const TrainConfig& train,
                            const EvalResult& eval, const SyntheticDataset& data, const FactorizationSchema& schema) {
  RunSummary s;
  s.name = name;
  s.variant = model.config.variant;
  s.mode = train.mode;
  s.crop_fraction = train.crop_fraction;
  s.per_video = eval.per_video;
  s.per_class = eval.per_class;
  s.terciles = tercile_accuracy(eval.predictions);
  if (model.config.variant == Variant::tqn) {
    const auto loc = localization_score(model, data, Split::test, schema);
    s.localization = loc.score;
    s.chance = loc.chance;
  }
  return s;
}

inline int cmd_train(const CommandOptions& opt) {
  return run_command("train", [&] {
    const auto t0 = std::chrono::steady_clock::now();
    const auto run = load_run_inputs(opt);
    const auto& config = run.config;
    const auto dir = config.output_dir;
    RunLock lock(dir);
    auto model = model_for(config, run.schema);
    Trainer trainer(*model, run.data, run.schema, config.train);
    const auto ckpt = dir / "checkpoint.bin";
    const auto metrics = dir / "metrics.csv";
    if (opt.resume) {
      if (!fs::exists(ckpt)) throw DataError("--resume: no checkpoint at " + ckpt.string());
      trainer.load_checkpoint(ckpt);
      *opt.log << "resumed at epoch " << trainer.epochs_done() << "\n";
    }
    std::size_t ran = 0;
    while (!trainer.finished() && (!opt.max_epochs || ran < *opt.max_epochs)) {
      trainer.run(1);
      ++ran;
      trainer.save_checkpoint(ckpt);
      write_file_atomic(metrics, metrics_csv(trainer.log()));
      const auto& e = trainer.log().back();
      *opt.log << "epoch " << e.epoch << " stage " << e.stage << " loss " << detail::fixed(e.train_loss, 4);
      if (!std::isnan(e.eval_per_video)) *opt.log << " acc " << detail::fixed(e.eval_per_video);
      *opt.log << "\n";
    }
    if (ran == 0) {
      trainer.save_checkpoint(ckpt);
      write_file_atomic(metrics, metrics_csv(trainer.log()));
    }
    std::vector<fs::path> artifacts{ckpt, metrics};
    if (trainer.finished()) {
      EvalResult eval = trainer.last_eval() ? *trainer.last_eval() : evaluate(*model, run.data, Split::test, run.schema);
      const auto preds = dir / "predictions.csv";
      write_predictions_csv(preds, eval.predictions);
      const auto summary = summarize(dir.filename().string(), *model, config.train, eval, run.data, run.schema);
      const auto summary_path = dir / "summary.json";
      write_json(summary_path, to_json(summary));
      artifacts.push_back(preds);
      artifacts.push_back(summary_path);
      if (trainer.bank()) {
        const auto bank_path = dir / "bank.bin";
        trainer.bank()->save(bank_path);
        artifacts.push_back(bank_path);
      }
      *opt.log << "per-video " << detail::fixed(summary.per_video) << " per-class " << detail::fixed(summary.per_class);
      if (summary.localization) {
        *opt.log << " localization " << detail::fixed(*summary.localization) << " (chance " << detail::fixed(*summary.chance)
                 << ")";
      }
      *opt.log << "\n";
    } else {
      *opt.log << "stopped after epoch " << trainer.epochs_done() << "; continue with --resume\n";
    }
    write_json(dir / "manifest.json", make_manifest(config, "train", dir, artifacts, seconds_since(t0)));
    return int(kExitOk);
  });
}

inline int cmd_eval(const CommandOptions& opt) {
  return run_command("eval", [&] {
    const auto run = load_run_inputs(opt);
    const auto dir = run.config.output_dir;
    RunLock lock(dir);
    const auto model = load_checkpoint_model(opt.checkpoint.value_or(dir / "checkpoint.bin"), run.schema);
    const auto eval = evaluate(*model, run.data, Split::test, run.schema);
    write_predictions_csv(dir / "eval_predictions.csv", eval.predictions);
    json j{{"per_video", eval.per_video}, {"per_class", eval.per_class}, {"count", eval.count}, {"confusion", eval.confusion}};
    write_json(dir / "eval.json", j);
    *opt.log << "per-video " << detail::fixed(eval.per_video) << " per-class " << detail::fixed(eval.per_class) << " over "
             << eval.count << " test sequences\n";
    return int(kExitOk);
  });
}

// K per-query rows of attention over clips plus their mean.
inline std::string attention_csv(const AttentionMap& map, const FactorizationSchema& schema) {
  const std::size_t k = schema.query_count();
  csv::Row header{"query"};
  for (std::size_t c = 0; c < map.clips; ++c) header.push_back("clip" + std::to_string(c));
  std::string out = csv::format_row(header);
  std::vector<double> mean(map.clips, 0.0);
  for (std::size_t q = 0; q < k; ++q) {
    csv::Row row{schema.queries()[q].name};
    for (std::size_t c = 0; c < map.clips; ++c) {
      row.push_back(format_metric(map.at(q, c)));
      mean[c] += map.at(q, c) / static_cast<double>(k);
    }
    out += csv::format_row(row);
  }
  csv::Row row{"mean"};
  for (double v : mean) row.push_back(format_metric(v));
  out += csv::format_row(row);
  return out;
}

inline int cmd_attend(const CommandOptions& opt) {
  return run_command("attend", [&] {
    const auto run = load_run_inputs(opt);
    const auto dir = run.config.output_dir;
    RunLock lock(dir);
    const auto model = load_checkpoint_model(opt.checkpoint.value_or(dir / "checkpoint.bin"), run.schema);
    if (model->config.variant != Variant::tqn) {
      throw ConfigError("attend: checkpoint holds a " + variant_name(model->config.variant) +
                        " model; attention export needs tqn");
    }
    if (opt.ids.empty()) throw ConfigError("attend: give at least one sequence id");
    const auto out_dir = dir / "attention";
    fs::create_directories(out_dir);
    for (auto id : opt.ids) {
      const SyntheticSequence* seq = nullptr;
      for (Split s : {Split::train, Split::test}) {
        for (const auto& x : run.data.split(s)) {
          if (x.id == id) seq = &x;
        }
      }
      if (!seq) throw DataError("attend: no sequence with id " + std::to_string(id));
      const auto path = out_dir / ("sequence_" + std::to_string(id) + ".csv");
      write_file_atomic(path, attention_csv(sequence_attention(*model, run.data, *seq), run.schema));
      *opt.log << "wrote " << path.string() << "\n";
    }
    return int(kExitOk);
  });
}

inline std::string report_table(const std::vector<RunSummary>& runs, bool aligned) {
  const std::vector<std::string> header{"run", "variant", "mode", "crop", "per_class_acc", "per_video_acc", "localization", "chance"};
  std::vector<std::vector<std::string>> rows{header};
  for (const auto& r : runs) {
    rows.push_back({r.name, variant_name(r.variant), mode_name(r.mode), detail::fixed(r.crop_fraction, 2),
                    detail::fixed(r.per_class, 4), detail::fixed(r.per_video, 4),
                    r.localization ? detail::fixed(*r.localization, 4) : "-", r.chance ? detail::fixed(*r.chance, 4) : "-"});
  }
  std::string out;
  if (!aligned) {
    for (const auto& row : rows) out += csv::format_row(row);
    return out;
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  }
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      out += row[i];
      if (i + 1 < row.size()) out += std::string(width[i] - row[i].size() + 2, ' ');
    }
    out += '\n';
  }
  return out;
}

inline std::vector<RunSummary> collect_runs(const fs::path& run_dir) {
  if (!fs::is_directory(run_dir)) throw DataError("run directory not found: " + run_dir.string());
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(run_dir)) {
    if (e.is_directory() && fs::exists(e.path() / "summary.json")) dirs.push_back(e.path());
  }
  std::sort(dirs.begin(), dirs.end());
  std::vector<RunSummary> runs;
  for (const auto& d : dirs) {
    try {
      auto s = summary_from_json(read_json(d / "summary.json"));
      s.name = d.filename().string();
      runs.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw DataError((d / "summary.json").string() + ": " + e.what());
    }
  }
  return runs;
}

inline int cmd_report(const fs::path& run_dir, std::ostream& out) {
  return run_command("report", [&] {
    const auto runs = collect_runs(run_dir);
    if (runs.empty()) throw DataError("no completed runs under " + run_dir.string());
    std::vector<std::string> absent;
    for (auto v : all_variants()) {
      const bool found = std::any_of(runs.begin(), runs.end(), [&](const RunSummary& r) {
        return r.variant == v && r.mode == Stage2Mode::bank && r.crop_fraction == 0.0;
      });
      if (!found) absent.push_back(variant_name(v));
    }
    const auto text = report_table(runs, true);
    out << text;
    const auto gates = evaluate_gates(runs);
    std::string gate_csv = "gate,result,detail\n";
    bool all_pass = true;
    for (const auto& g : gates) {
      out << "gate " << g.name << ": " << (g.pass ? "PASS" : "FAIL") << " (" << g.detail << ")\n";
      gate_csv += csv::format_row({g.name, g.pass ? "PASS" : "FAIL", g.detail});
      all_pass &= g.pass;
    }
    write_file_atomic(run_dir / "report.txt", text);
    write_file_atomic(run_dir / "report.csv", report_table(runs, false));
    write_file_atomic(run_dir / "gates.csv", gate_csv);
    if (!absent.empty()) {
      std::string list;
      for (const auto& a : absent) list += (list.empty() ? "" : ", ") + a;
      throw DataError("missing bank-mode runs for: " + list);
    }
    return int(all_pass ? kExitOk : kExitGate);
  });
}

struct GradCase {
  std::string name;
  double max_error = 0.0;
  std::size_t coordinates = 0;
};

// Finite-difference checks over random small decoder configurations and the
// self-attention and sequence-decoder baselines.
inline std::vector<GradCase> run_grad_suite(std::size_t tqn_seeds, std::uint64_t base_seed = 0) {
  std::vector<GradCase> out;
  for (std::size_t trial = 0; trial < tqn_seeds; ++trial) {
    Rng rng = Rng::stream(base_seed, {0x67726164, trial});
    TqnConfig c;
    c.heads = 1 + rng.index(2);
    c.model_dim = c.heads * (2 + rng.index(3));
    c.feature_dim = 2 + rng.index(4);
    c.layers = 1 + rng.index(2);
    c.ff_dim = 2 + rng.index(6);
    const std::size_t k = 1 + rng.index(3);
    std::vector<std::size_t> targets;
    for (std::size_t i = 0; i < k; ++i) {
      c.attribute_counts.push_back(2 + rng.index(3));
      targets.push_back(rng.index(c.attribute_counts.back()));
    }
    const auto model = init_model(c, rng);
    const std::size_t t = 1 + rng.index(6);
    std::vector<double> v(t * c.feature_dim);
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    const Tensor phi({t, c.feature_dim}, v, true);
    auto params = model.params.tensors();
    params.push_back(phi);
    const auto r = finite_diff_grad_check(
        [&] { return multi_task_loss(classify_responses(model, tqn_forward(model, phi, ForwardMode{}).responses), targets); },
        params, 1e-6);
    out.push_back({"tqn seed " + std::to_string(trial), r.max_error, r.coordinates});
  }
  // Two queries, four categories including a null attribute.
  const FactorizationSchema toy(
      {{0, "type", {{0, "null"}, {1, "a"}, {2, "b"}}}, {1, "turns", {{0, "null"}, {3, "half"}, {4, "full"}}}},
      {{0, "a-half", {1, 3}}, {1, "a-full", {1, 4}}, {2, "b-full", {2, 4}}, {3, "b", {2, 0}}});
  HeadConfig h;
  h.model_dim = 6;
  h.layers = 2;
  h.heads = 2;
  h.ff_dim = 8;
  for (auto v : {Variant::selfattn_cls, Variant::seq2seq, Variant::multilabel_bce, Variant::avgpool}) {
    ParameterSet params;
    Rng rng = Rng::stream(base_seed, {0x62617365, static_cast<std::uint64_t>(v)});
    std::unique_ptr<Head> head;
    if (v == Variant::selfattn_cls) head = std::make_unique<SelfAttnClsHead>(params, toy, 4, h, rng);
    else if (v == Variant::seq2seq) head = std::make_unique<Seq2SeqHead>(params, toy, 4, h, rng);
    else if (v == Variant::multilabel_bce) head = std::make_unique<MultiLabelBceHead>(params, toy, 4, h, rng);
    else head = std::make_unique<AvgPoolHead>(params, toy, 4, h, rng);
    std::vector<double> x(5 * 4);
    for (auto& e : x) e = rng.uniform(-1.0, 1.0);
    const Tensor phi({5, 4}, x, true);
    auto tensors = params.tensors();
    tensors.push_back(phi);
    const auto r = finite_diff_grad_check([&] { return head->loss(phi, 2, ForwardMode{}); }, tensors, 1e-6);
    out.push_back({variant_name(v), r.max_error, r.coordinates});
  }
  return out;
}

inline int cmd_grad_check(std::size_t seeds, std::ostream& out) {
  return run_command("grad-check", [&] {
    const auto cases = run_grad_suite(seeds);
    double worst = 0.0;
    for (const auto& c : cases) {
      out << c.name << ": max relative error " << std::scientific << std::setprecision(2) << c.max_error << " over "
          << c.coordinates << " coordinates\n"
          << std::defaultfloat;
      worst = std::max(worst, c.max_error);
    }
    const bool pass = worst < 1e-4;
    out << (pass ? "PASS" : "FAIL") << ": worst " << std::scientific << std::setprecision(2) << worst << std::defaultfloat
        << " (tolerance 1e-4)\n";
    return int(pass ? kExitOk : kExitGate);
  });
}

inline int cmd_validate_schema(const fs::path& queries, const fs::path& classes, std::ostream& out) {
  return run_command("validate-schema", [&] {
    for (const auto& p : {queries, classes}) {
      if (!fs::exists(p)) throw DataError("schema file not found: " + p.string());
    }
    const auto schema = parse_schema(queries.string(), classes.string());
    const auto report = validate_schema(schema);
    for (const auto& issue : report.issues) {
      out << (issue.severity == SchemaIssue::Severity::error ? "error: " : "warning: ") << issue.message << "\n";
    }
    out << schema.category_count() << " classes, " << schema.query_count() << " queries; " << report.error_count()
        << " errors, " << report.warning_count() << " warnings\n";
    return int(report.valid() ? kExitOk : kExitData);
  });
}

}  // namespace tqn
