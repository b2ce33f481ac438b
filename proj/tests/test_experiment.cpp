#include <gtest/gtest.h>

#include <fstream>

#include "test_support.hpp"
#include "tqn/experiment.hpp"

namespace tqn {
namespace {

namespace fs = std::filesystem;
using testing::schema_file;

class ScratchDir {
 public:
  ScratchDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    path_ = fs::temp_directory_path() / (std::string("tqn_") + info->test_suite_name() + "_" + info->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~ScratchDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

json small_config(const std::string& variant = "tqn") {
  return {{"schema", {{"name", "synth"}, {"queries", schema_file("synth_queries.csv")}, {"classes", schema_file("synth_classes.csv")}}},
          {"dataset", "data/dataset.bin"},
          {"output_dir", "runs/" + variant},
          {"seeds", {{"data", 11}, {"init", 12}, {"train", 13}}},
          {"generator", {{"train_count", 40}, {"test_count", 12}}},
          {"model",
           {{"variant", variant},
            {"encoder", {{"hidden_dim", 8}, {"feature_dim", 8}}},
            {"head", {{"model_dim", 8}, {"layers", 1}, {"ff_dim", 8}}}}},
          {"train", {{"schedule", {{"stage1_epochs", 1}, {"stage2_epochs", 2}, {"n_online", 4}}}, {"eval_each_epoch", false}}}};
}

fs::path write_config(const fs::path& dir, const json& j, const std::string& name = "config.json") {
  const auto p = dir / name;
  std::ofstream(p) << j.dump(2);
  return p;
}

CommandOptions quiet(const fs::path& config) {
  static std::ostringstream sink;
  CommandOptions o;
  o.config = config;
  o.log = &sink;
  return o;
}

TEST(ExperimentConfig, ResolvesPathsAgainstConfigFile) {
  ScratchDir dir;
  const auto c = load_experiment(write_config(dir.path(), small_config()));
  EXPECT_EQ(c.dataset, dir.path() / "data/dataset.bin");
  EXPECT_EQ(c.output_dir, dir.path() / "runs/tqn");
  EXPECT_EQ(c.generator.seed, 11u);
  EXPECT_EQ(c.train.seed, 13u);
  EXPECT_EQ(c.generator.train_count, 40u);
  EXPECT_EQ(c.model.encoder.feature_dim, 8u);
}

TEST(ExperimentConfig, RejectsUnknownAndMisplacedKeys) {
  ScratchDir dir;
  auto bad = small_config();
  bad["extra"] = 1;
  EXPECT_THROW(load_experiment(write_config(dir.path(), bad)), ConfigError);
  bad = small_config();
  bad["train"]["schedule"]["stage3_epochs"] = 1;
  EXPECT_THROW(load_experiment(write_config(dir.path(), bad)), ConfigError);
  bad = small_config();
  bad["generator"]["seed"] = 4;
  EXPECT_THROW(load_experiment(write_config(dir.path(), bad)), ConfigError);
  bad = small_config();
  bad["seeds"].erase("init");
  EXPECT_THROW(load_experiment(write_config(dir.path(), bad)), ConfigError);
  bad = small_config();
  bad.erase("output_dir");
  EXPECT_THROW(load_experiment(write_config(dir.path(), bad)), ConfigError);
  bad = small_config();
  bad["model"]["variant"] = "lstm";
  EXPECT_THROW(load_experiment(write_config(dir.path(), bad)), ConfigError);
}

TEST(ExperimentConfig, SeedOverridesAndOutputOverride) {
  ScratchDir dir;
  const auto path = write_config(dir.path(), small_config());
  const auto c = load_experiment(path, {"train=99", "data=5"}, dir.path() / "elsewhere");
  EXPECT_EQ(c.seeds.train, 99u);
  EXPECT_EQ(c.train.seed, 99u);
  EXPECT_EQ(c.generator.seed, 5u);
  EXPECT_EQ(c.seeds.init, 12u);
  EXPECT_EQ(c.output_dir, dir.path() / "elsewhere");
  EXPECT_THROW(load_experiment(path, {"noise=1"}), ConfigError);
  EXPECT_THROW(load_experiment(path, {"train=abc"}), ConfigError);
  EXPECT_THROW(load_experiment(path, {"train"}), ConfigError);
}

TEST(ExperimentConfig, MissingSchemaFileIsDataErrorNamingPath) {
  ScratchDir dir;
  auto c = small_config();
  c["schema"]["classes"] = "no_such_classes.csv";
  const auto path = write_config(dir.path(), c);
  try {
    load_experiment(path);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("no_such_classes.csv"), std::string::npos);
  }
  ::testing::internal::CaptureStderr();
  EXPECT_EQ(cmd_gen_data(quiet(path)), kExitData);
  EXPECT_NE(::testing::internal::GetCapturedStderr().find("no_such_classes.csv"), std::string::npos);
}

TEST(GenData, IdenticalSeedsGiveIdenticalBytes) {
  ScratchDir dir;
  auto a = small_config();
  auto b = small_config();
  b["dataset"] = "other/dataset.bin";
  ASSERT_EQ(cmd_gen_data(quiet(write_config(dir.path(), a, "a.json"))), kExitOk);
  ASSERT_EQ(cmd_gen_data(quiet(write_config(dir.path(), b, "b.json"))), kExitOk);
  EXPECT_EQ(sha256_file(dir.path() / "data/dataset.bin"), sha256_file(dir.path() / "other/dataset.bin"));
  auto c = small_config();
  c["dataset"] = "third/dataset.bin";
  const auto cp = write_config(dir.path(), c, "c.json");
  ASSERT_EQ(cmd_gen_data(quiet(cp)), kExitOk);
  auto opt = quiet(cp);
  opt.seed_overrides = {"data=12"};
  ASSERT_EQ(cmd_gen_data(opt), kExitOk);
  EXPECT_NE(sha256_file(dir.path() / "data/dataset.bin"), sha256_file(dir.path() / "third/dataset.bin"));
}

TEST(Manifest, VerifiesAndDetectsTampering) {
  ScratchDir dir;
  ASSERT_EQ(cmd_gen_data(quiet(write_config(dir.path(), small_config()))), kExitOk);
  const auto manifest = dir.path() / "data/dataset_manifest.json";
  const auto m = read_json(manifest);
  EXPECT_EQ(m.at("artifacts").size(), 1u);
  EXPECT_EQ(m.at("config").at("seeds").at("data"), 11);
  EXPECT_TRUE(verify_manifest(manifest).empty());
  std::ofstream(dir.path() / "data/dataset.bin", std::ios::app) << "x";
  EXPECT_EQ(verify_manifest(manifest).size(), 1u);
}

TEST(RunLock, SecondClaimFails) {
  ScratchDir dir;
  {
    RunLock first(dir.path() / "out");
    EXPECT_THROW(RunLock second(dir.path() / "out"), IoError);
  }
  EXPECT_NO_THROW(RunLock again(dir.path() / "out"));
}

TEST(Train, LockedOutputDirectoryIsIoError) {
  ScratchDir dir;
  const auto path = write_config(dir.path(), small_config());
  ASSERT_EQ(cmd_gen_data(quiet(path)), kExitOk);
  RunLock held(dir.path() / "runs/tqn");
  ::testing::internal::CaptureStderr();
  EXPECT_EQ(cmd_train(quiet(path)), kExitIo);
  EXPECT_NE(::testing::internal::GetCapturedStderr().find("locked"), std::string::npos);
}

TEST(Train, MissingDatasetAndSchemaMismatch) {
  ScratchDir dir;
  const auto path = write_config(dir.path(), small_config());
  ::testing::internal::CaptureStderr();
  EXPECT_EQ(cmd_train(quiet(path)), kExitData);
  ASSERT_EQ(cmd_gen_data(quiet(path)), kExitOk);
  auto renamed = small_config();
  renamed["schema"]["name"] = "diving";
  EXPECT_EQ(cmd_train(quiet(write_config(dir.path(), renamed, "renamed.json"))), kExitConfig);
  ::testing::internal::GetCapturedStderr();
}

TEST(Train, RepeatedRunsAreByteIdenticalAndResumeMatches) {
  ScratchDir dir;
  const auto path = write_config(dir.path(), small_config());
  ASSERT_EQ(cmd_gen_data(quiet(path)), kExitOk);
  auto run = [&](const std::string& out, std::optional<std::size_t> stop) {
    auto o = quiet(path);
    o.out = dir.path() / out;
    if (stop) {
      o.max_epochs = stop;
      EXPECT_EQ(cmd_train(o), kExitOk);
      o.max_epochs.reset();
      o.resume = true;
    }
    EXPECT_EQ(cmd_train(o), kExitOk);
  };
  run("a", std::nullopt);
  run("b", std::nullopt);
  run("c", 2);
  for (const auto* f : {"checkpoint.bin", "metrics.csv", "predictions.csv", "bank.bin"}) {
    const auto ha = sha256_file(dir.path() / "a" / f);
    EXPECT_EQ(ha, sha256_file(dir.path() / "b" / f)) << f;
    EXPECT_EQ(ha, sha256_file(dir.path() / "c" / f)) << f;
  }
  auto sa = read_json(dir.path() / "a/summary.json");
  auto sc = read_json(dir.path() / "c/summary.json");
  EXPECT_EQ(sa.at("name"), "a");
  sa.erase("name");
  sc.erase("name");
  EXPECT_EQ(sa, sc);
  EXPECT_TRUE(verify_manifest(dir.path() / "a/manifest.json").empty());
  const auto rows = csv::parse(read_file_bytes(dir.path() / "a/metrics.csv"));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0], (csv::Row{"epoch", "stage", "train_loss", "eval_per_video_acc", "eval_per_class_acc"}));
  const auto summary = summary_from_json(read_json(dir.path() / "a/summary.json"));
  EXPECT_TRUE(summary.localization.has_value());
  EXPECT_EQ(summary.terciles.size(), 3u);
}

TEST(Attend, RowsAreDistributionsAndMeanIsTheirAverage) {
  ScratchDir dir;
  const auto path = write_config(dir.path(), small_config());
  ASSERT_EQ(cmd_gen_data(quiet(path)), kExitOk);
  ASSERT_EQ(cmd_train(quiet(path)), kExitOk);
  auto o = quiet(path);
  o.ids = {0, 41};
  ASSERT_EQ(cmd_attend(o), kExitOk);
  const auto data = load_dataset(dir.path() / "data/dataset.bin");
  for (std::size_t id : o.ids) {
    const auto rows = csv::read_file((dir.path() / "runs/tqn/attention" / ("sequence_" + std::to_string(id) + ".csv")).string());
    ASSERT_EQ(rows.size(), 5u);
    const std::size_t clips = rows[0].size() - 1;
    const auto& seq = id < data.train.size() ? data.train[id] : data.test[id - data.train.size()];
    ASSERT_EQ(seq.id, id);
    EXPECT_EQ(clips, seq.clips);
    EXPECT_EQ(rows[1][0], "motion");
    EXPECT_EQ(rows[4][0], "mean");
    for (std::size_t r = 1; r < rows.size(); ++r) {
      double sum = 0.0;
      for (std::size_t c = 1; c <= clips; ++c) sum += std::stod(rows[r][c]);
      EXPECT_NEAR(sum, 1.0, 1e-9);
    }
    for (std::size_t c = 1; c <= clips; ++c) {
      const double mean = (std::stod(rows[1][c]) + std::stod(rows[2][c]) + std::stod(rows[3][c])) / 3.0;
      EXPECT_NEAR(std::stod(rows[4][c]), mean, 1e-15);
    }
  }
  o.ids = {999};
  ::testing::internal::CaptureStderr();
  EXPECT_EQ(cmd_attend(o), kExitData);
  ::testing::internal::GetCapturedStderr();
}

TEST(Attend, NonTqnCheckpointIsConfigError) {
  ScratchDir dir;
  auto c = small_config("avgpool");
  const auto path = write_config(dir.path(), c);
  ASSERT_EQ(cmd_gen_data(quiet(path)), kExitOk);
  ASSERT_EQ(cmd_train(quiet(path)), kExitOk);
  auto o = quiet(path);
  o.ids = {0};
  ::testing::internal::CaptureStderr();
  EXPECT_EQ(cmd_attend(o), kExitConfig);
  EXPECT_NE(::testing::internal::GetCapturedStderr().find("avgpool"), std::string::npos);
}

RunSummary summary(const std::string& name, Variant v, double acc, Stage2Mode mode = Stage2Mode::bank, double crop = 0.0) {
  RunSummary s;
  s.name = name;
  s.variant = v;
  s.mode = mode;
  s.crop_fraction = crop;
  s.per_video = acc;
  s.per_class = acc;
  s.terciles = {acc, acc, acc};
  return s;
}

std::vector<RunSummary> passing_sweep() {
  auto tqn = summary("tqn", Variant::tqn, 0.8);
  tqn.terciles = {0.85, 0.8, 0.75};
  tqn.localization = 0.9;
  tqn.chance = 0.1;
  auto avg = summary("avgpool", Variant::avgpool, 0.5);
  avg.terciles = {0.65, 0.5, 0.35};
  return {tqn,
          avg,
          summary("selfattn", Variant::selfattn_cls, 0.6),
          summary("bce", Variant::multilabel_bce, 0.4),
          summary("s2s", Variant::seq2seq, 0.45),
          summary("frozen", Variant::tqn, 0.7, Stage2Mode::frozen),
          summary("crop", Variant::avgpool, 0.45, Stage2Mode::bank, 0.25)};
}

TEST(Gates, AllPassOnAConformingSweep) {
  const auto gates = evaluate_gates(passing_sweep());
  ASSERT_EQ(gates.size(), 6u);
  for (const auto& g : gates) EXPECT_TRUE(g.pass) << g.name << ": " << g.detail;
}

TEST(Gates, EachGateCanFail) {
  auto runs = passing_sweep();
  runs[0].terciles = {0.95, 0.8, 0.6};  // long-third gap no larger than short-third gap
  runs[5].per_video = 0.78;
  runs[6].per_video = 0.5;
  runs[4].per_video = 0.81;
  runs[0].localization = 0.39;
  std::map<std::string, bool> result;
  for (const auto& g : evaluate_gates(runs)) result[g.name] = g.pass;
  EXPECT_FALSE(result.at("tqn_beats_avgpool"));
  EXPECT_FALSE(result.at("bank_beats_frozen"));
  EXPECT_FALSE(result.at("crop_below_full"));
  EXPECT_FALSE(result.at("tqn_at_least_baselines"));
  EXPECT_FALSE(result.at("factored_supervision_below_multiclass"));
  EXPECT_FALSE(result.at("localization_above_chance"));
}

void write_summary(const fs::path& root, const RunSummary& s) {
  fs::create_directories(root / s.name);
  write_json(root / s.name / "summary.json", to_json(s));
}

TEST(Report, EmptyDirectoryFailsWithoutTable) {
  ScratchDir dir;
  std::ostringstream out;
  ::testing::internal::CaptureStderr();
  EXPECT_EQ(cmd_report(dir.path(), out), kExitData);
  EXPECT_NE(::testing::internal::GetCapturedStderr().find("no completed runs"), std::string::npos);
  EXPECT_TRUE(out.str().empty());
  EXPECT_FALSE(fs::exists(dir.path() / "report.csv"));
}

TEST(Report, TabulatesRunsAndPassesGates) {
  ScratchDir dir;
  for (const auto& s : passing_sweep()) write_summary(dir.path(), s);
  std::ostringstream out;
  EXPECT_EQ(cmd_report(dir.path(), out), kExitOk);
  const auto rows = csv::read_file((dir.path() / "report.csv").string());
  ASSERT_EQ(rows.size(), 8u);
  EXPECT_EQ(rows[0][0], "run");
  EXPECT_EQ(rows[0][5], "per_video_acc");
  // sorted by directory name
  EXPECT_EQ(rows[1][0], "avgpool");
  EXPECT_EQ(rows[1][5], "0.5000");
  EXPECT_EQ(rows[7][0], "tqn");
  EXPECT_EQ(rows[7][6], "0.9000");
  EXPECT_EQ(rows[2][6], "-");
  EXPECT_NE(out.str().find("gate localization_above_chance: PASS"), std::string::npos);
  EXPECT_EQ(read_file_bytes(dir.path() / "report.txt"), report_table(collect_runs(dir.path()), true));
}

TEST(Report, MissingVariantAndFailedGateAreNonZero) {
  ScratchDir dir;
  auto runs = passing_sweep();
  runs[2].per_video = 0.9;
  for (const auto& s : runs) write_summary(dir.path(), s);
  std::ostringstream out;
  EXPECT_EQ(cmd_report(dir.path(), out), kExitGate);
  EXPECT_NE(out.str().find("gate tqn_at_least_baselines: FAIL"), std::string::npos);
  fs::remove_all(dir.path() / "s2s");
  out.str("");
  ::testing::internal::CaptureStderr();
  EXPECT_EQ(cmd_report(dir.path(), out), kExitData);
  EXPECT_NE(::testing::internal::GetCapturedStderr().find("seq2seq"), std::string::npos);
}

TEST(GradSuite, SmallSuitePasses) {
  const auto cases = run_grad_suite(3, 7);
  ASSERT_EQ(cases.size(), 7u);
  for (const auto& c : cases) {
    EXPECT_LT(c.max_error, 1e-4) << c.name;
    EXPECT_GT(c.coordinates, 0u) << c.name;
  }
}

TEST(ValidateSchema, ExitCodes) {
  ScratchDir dir;
  std::ostringstream out;
  EXPECT_EQ(cmd_validate_schema(schema_file("synth_queries.csv"), schema_file("synth_classes.csv"), out), kExitOk);
  std::ofstream(dir.path() / "dup.csv") << "class_index,class_name,att_q0,att_q1,att_q2\n0,a,1,4,7\n1,b,1,4,7\n";
  ::testing::internal::CaptureStderr();
  EXPECT_EQ(cmd_validate_schema(schema_file("synth_queries.csv"), dir.path() / "dup.csv", out), kExitData);
  EXPECT_EQ(cmd_validate_schema(schema_file("synth_queries.csv"), dir.path() / "absent.csv", out), kExitData);
  ::testing::internal::GetCapturedStderr();
}

}  // namespace
}  // namespace tqn
