#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mphm/errors.hpp"
#include "scratch.hpp"
#include "mphm/harness.hpp"
#include "mphm/objective.hpp"
#include "mphm/train.hpp"

namespace mphm {
namespace {

namespace fs = std::filesystem;

using scratch::fresh_dir;

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

size_t line_count(const fs::path& path) {
  std::ifstream in(path);
  size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

RunConfig tiny_run(const fs::path& data) {
  RunConfig cfg;
  cfg.model.base_channels = 8;
  cfg.model.stage_depths = {1, 1, 1};
  cfg.steps = 4;
  cfg.batch = 2;
  cfg.crop = 32;
  cfg.log_every = 1;
  cfg.seed = 3;
  cfg.data_dir = data.string();
  return cfg;
}

const PairedDataset& shared_data() {
  static const PairedDataset data = [] {
    auto root = fresh_dir("train_data");
    generate_pairs(root, 4, 32, 32, 1);
    return load_paired_root(root);
  }();
  return data;
}

fs::path shared_root() { return scratch::root() / "train_data"; }

class EnvGuard {
 public:
  EnvGuard(const char* name, const char* value) : name_(name) {
    if (const char* old = std::getenv(name)) old_ = old;
    ::setenv(name, value, 1);
  }
  ~EnvGuard() {
    if (old_) {
      ::setenv(name_, old_->c_str(), 1);
    } else {
      ::unsetenv(name_);
    }
  }

 private:
  const char* name_;
  std::optional<std::string> old_;
};

TEST(Schedule, CosineEndpointsAndMidpoint) {
  EXPECT_DOUBLE_EQ(cosine_lr(1e-3, 1e-5, 0, 101), 1e-3);
  EXPECT_NEAR(cosine_lr(1e-3, 1e-5, 50, 101), (1e-3 + 1e-5) / 2, 1e-15);
  EXPECT_NEAR(cosine_lr(1e-3, 1e-5, 100, 101), 1e-5, 1e-15);
  EXPECT_DOUBLE_EQ(cosine_lr(1e-3, 1e-5, 0, 1), 1e-3);
  double previous = 1.0;
  for (int64_t t = 0; t < 101; ++t) {
    const double lr = cosine_lr(1e-3, 1e-5, t, 101);
    EXPECT_LE(lr, previous);
    previous = lr;
  }
}

TEST(RunConfigText, RoundTripAndComments) {
  RunConfig cfg;
  cfg.lr = 2e-4;
  cfg.steps = 123;
  cfg.model.prompt = "No rain";
  cfg.model.base_channels = 16;
  const auto back = RunConfig::from_text("# header\n\n" + cfg.to_text());
  EXPECT_EQ(back.to_text(), cfg.to_text());
  EXPECT_THROW(RunConfig::from_text("steps 5\n"), ConfigError);
  EXPECT_THROW(RunConfig::from_text("nonsense = 1\n"), ConfigError);
  RunConfig bad;
  EXPECT_THROW(bad.apply_override("steps"), ConfigError);
  bad.steps = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(RunConfigText, PrecedenceDefaultsFileEnvOverride) {
  const auto dir = fresh_dir("precedence");
  std::ofstream(dir / "run.cfg") << "seed = 5\nsteps = 7\nlr = 0.002\n";
  {
    const auto cfg = resolve_run_config(dir / "run.cfg", {});
    EXPECT_EQ(cfg.seed, 5u);
    EXPECT_EQ(cfg.steps, 7);
    EXPECT_EQ(cfg.batch, RunConfig{}.batch);
  }
  {
    EnvGuard env("MPHM_SEED", "11");
    EXPECT_EQ(resolve_run_config(dir / "run.cfg", {}).seed, 11u);
    const auto cfg = resolve_run_config(dir / "run.cfg", {"seed=13", "lr=0.1"});
    EXPECT_EQ(cfg.seed, 13u);
    EXPECT_EQ(cfg.lr, 0.1);
  }
  EXPECT_THROW(resolve_run_config(dir / "absent.cfg", {}), ConfigError);
}

TEST(Metrics, LogRejectsNonIncreasingSteps) {
  const auto dir = fresh_dir("metrics");
  MetricsLog log(dir / "m.csv");
  log.append({0, 1e-3, 0.5});
  log.append({5, 1e-3, 0.4});
  EXPECT_THROW(log.append({5, 1e-3, 0.4}), Error);
  EXPECT_EQ(line_count(dir / "m.csv"), 3u);
}

TEST(Training, SameSeedSameLosses) {
  auto cfg = tiny_run(shared_root());
  cfg.steps = 10;
  const auto a = train(cfg, shared_data());
  const auto b = train(cfg, shared_data());
  ASSERT_EQ(a.records.size(), 10u);
  for (size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_NEAR(a.records[i].loss, b.records[i].loss, 1e-6) << "step " << i;
    EXPECT_TRUE(std::isfinite(a.records[i].loss));
  }
  cfg.seed = 4;
  const auto c = train(cfg, shared_data());
  EXPECT_NE(a.records[0].loss, c.records[0].loss);
}

TEST(Training, WritesArtifactsAndSchedule) {
  const auto out = fresh_dir("train_out");
  auto cfg = tiny_run(shared_root());
  cfg.out_dir = out.string();
  cfg.checkpoint_every = 2;
  const auto result = train(cfg, shared_data());
  EXPECT_EQ(result.state.step, 4);
  EXPECT_TRUE(fs::exists(out / "last.ckpt"));
  EXPECT_EQ(line_count(out / "metrics.csv"), 5u);
  EXPECT_EQ(RunConfig::from_file(out / "config.txt").to_text(), cfg.to_text());
  EXPECT_DOUBLE_EQ(result.records.front().lr, cfg.lr);
  EXPECT_NEAR(result.records.back().lr, cfg.lr_min, 1e-15);
}

TEST(Training, NonFiniteLossAbortsAndKeepsCheckpoint) {
  const auto out = fresh_dir("train_nan");
  auto cfg = tiny_run(shared_root());
  cfg.out_dir = out.string();
  auto model = build_model(cfg.model, cfg.seed);
  train(cfg, shared_data(), model);
  const auto before = read_text(out / "last.ckpt");
  {
    torch::NoGradGuard guard;
    model->output->conv->bias.fill_(std::numeric_limits<float>::quiet_NaN());
  }
  try {
    train(cfg, shared_data(), model);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos) << e.what();
  }
  EXPECT_EQ(read_text(out / "last.ckpt"), before);
}

TEST(Training, EmptyDatasetIsDataError) {
  EXPECT_THROW(train(tiny_run(shared_root()), PairedDataset{}), DataError);
}

TEST(Evaluation, CsvRowsAndIdentityBaseline) {
  const auto dir = fresh_dir("eval");
  auto cfg = tiny_run(shared_root());
  auto model = build_model(cfg.model, 1);
  model->make_identity();
  const auto summary = evaluate(model, shared_data(), dir / "eval.csv");
  EXPECT_EQ(line_count(dir / "eval.csv"), shared_data().size() + 2);
  EXPECT_NE(read_text(dir / "eval.csv").find("image_id,psnr,ssim"), std::string::npos);
  double mean = 0;
  for (size_t i = 0; i < shared_data().size(); ++i) {
    const auto s = shared_data().get(i);
    const double expected = psnr(s.rainy, s.clean);
    EXPECT_NEAR(summary.rows[i].psnr, expected, 1e-9);
    mean += expected;
  }
  EXPECT_NEAR(summary.mean_psnr, mean / static_cast<double>(shared_data().size()), 1e-9);
  EXPECT_THROW(evaluate(model, PairedDataset{}), DataError);
}

TEST(Inference, OddSizedImageIsDeterministic) {
  const auto dir = fresh_dir("infer");
  auto cfg = tiny_run(shared_root());
  cfg.out_dir = (dir / "run").string();
  cfg.steps = 2;
  train(cfg, shared_data());
  write_png(dir / "in.png", synth_rain(synth_clean(67, 93, 2), RainParams{}));
  auto model = load_model(dir / "run" / "last.ckpt");
  infer_file(model, dir / "in.png", dir / "a.png");
  auto again = load_model(dir / "run" / "last.ckpt");
  infer_file(again, dir / "in.png", dir / "b.png");
  EXPECT_EQ(png_size(dir / "a.png"), (std::pair<int64_t, int64_t>{93, 67}));
  EXPECT_EQ(read_text(dir / "a.png"), read_text(dir / "b.png"));
}

TEST(Ablation, VariantsDifferOnlyOnTheirAxis) {
  RunConfig base = tiny_run(shared_root());
  const std::vector<std::pair<std::string, size_t>> axes{
      {"hmm_branches", 3}, {"branch_fusion", 3}, {"prior_injection", 4}, {"priors_fusion", 4}};
  for (const auto& [axis, count] : axes) {
    const auto variants = ablation_variants(base, axis);
    ASSERT_EQ(variants.size(), count) << axis;
    const auto keys = ablation_axis_keys(axis);
    for (const auto& v : variants) {
      EXPECT_EQ(v.config.seed, base.seed);
      EXPECT_EQ(v.config.steps, base.steps);
      for (const auto& key : ModelConfig::diff(base.model, v.config.model)) {
        EXPECT_NE(std::find(keys.begin(), keys.end(), key), keys.end()) << axis << " " << key;
      }
    }
  }
  EXPECT_THROW(ablation_variants(base, "depth"), ConfigError);
}

TEST(Ablation, WritesTableWithOneRowPerVariant) {
  const auto dir = fresh_dir("ablate");
  auto cfg = tiny_run(shared_root());
  cfg.steps = 2;
  const auto rows = ablate(cfg, "hmm_branches", shared_data(), shared_data(), dir);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(line_count(dir / "ablation.csv"), 4u);
  EXPECT_EQ(line_count(dir / "ablation.md"), 5u);
  EXPECT_LT(rows[1].params_m, rows[2].params_m);
  for (const auto& row : rows) EXPECT_EQ(row.seed, cfg.seed);
}

TEST(Visualization, HeatmapRamp) {
  auto gt = torch::zeros({3, 1, 3});
  EXPECT_TRUE(torch::equal(residual_heatmap(gt, gt), torch::zeros({3, 1, 3})));
  auto pred = gt.clone();
  pred.select(2, 1).fill_(1.0 / 6);
  pred.select(2, 2).fill_(1.0 / 3);
  auto map = residual_heatmap(pred, gt);
  // Error 0, 0.5 and 1 of the peak: black, (1, 0.5, 0), white.
  EXPECT_TRUE(torch::allclose(map.select(2, 0).flatten(), torch::zeros({3})));
  EXPECT_TRUE(torch::allclose(map.select(2, 1).flatten(), torch::tensor({1.0f, 0.5f, 0.0f})));
  EXPECT_TRUE(torch::allclose(map.select(2, 2).flatten(), torch::ones({3})));
  EXPECT_THROW(residual_heatmap(pred, torch::zeros({3, 2, 3})), StructuralError);
}

TEST(Visualization, PcaOfRankOneFeatures) {
  // Every channel vector lies on one direction: only the first component varies.
  auto ramp = torch::linspace(-1, 1, 20).view({1, 4, 5});
  auto direction = torch::tensor({1.0, 2.0, -1.0, 0.5}).view({4, 1, 1});
  auto rgb = pca_features(direction * ramp);
  EXPECT_EQ(rgb.sizes(), (std::vector<int64_t>{3, 4, 5}));
  EXPECT_NEAR(rgb[0].min().item<float>(), 0.0f, 1e-6);
  EXPECT_NEAR(rgb[0].max().item<float>(), 1.0f, 1e-6);
  EXPECT_EQ(rgb[1].abs().max().item<float>(), 0.0f);
  EXPECT_EQ(rgb[2].abs().max().item<float>(), 0.0f);
}

TEST(Visualization, CaptureFeatureByName) {
  auto cfg = tiny_run(shared_root());
  auto model = build_model(cfg.model, 1);
  auto feature = capture_feature(model, torch::rand({3, 32, 32}), "bottleneck");
  EXPECT_EQ(feature.sizes(), (std::vector<int64_t>{16, 16, 16}));
  try {
    capture_feature(model, torch::rand({3, 32, 32}), "encoder.9");
    FAIL() << "expected StructuralError";
  } catch (const StructuralError& e) {
    EXPECT_NE(std::string(e.what()).find("bottleneck"), std::string::npos) << e.what();
  }
}

// Command-line exit codes.

int run_cli(const std::string& args) {
  const std::string command = std::string(MPHM_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(command.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Cli, ExitCodes) {
  const auto dir = fresh_dir("cli");
  EXPECT_EQ(run_cli("config-defaults"), 0);
  EXPECT_EQ(run_cli("complexity"), 0);
  EXPECT_EQ(run_cli("no-such-command"), 2);
  EXPECT_EQ(run_cli("train --set no_such_key=1"), 2);
  EXPECT_EQ(run_cli("train --set base_channels=6"), 2);
  EXPECT_EQ(run_cli("gen-data --out " + (dir / "data").string() + " --n 2 --size 32"), 0);
  EXPECT_EQ(run_cli("train --set data_dir=" + (dir / "missing").string()), 3);
  EXPECT_EQ(run_cli("eval --ckpt " + (dir / "missing.ckpt").string() + " --data " +
                    (dir / "data").string() + " --out " + (dir / "e.csv").string()),
            3);
  const std::string run = (dir / "run").string();
  EXPECT_EQ(run_cli("train --set base_channels=8 --set stage_depths=1,1,1 --set steps=2 "
                    "--set batch=1 --set crop=32 --set data_dir=" +
                    (dir / "data").string() + " --set out_dir=" + run),
            0);
  EXPECT_EQ(run_cli("eval --ckpt " + run + "/last.ckpt --data " + (dir / "data").string() +
                    " --out " + (dir / "e.csv").string()),
            0);
  EXPECT_EQ(line_count(dir / "e.csv"), 4u);
  EXPECT_EQ(run_cli("infer --ckpt " + run + "/last.ckpt --in " + (dir / "data/rain/0000.png").string() +
                    " --out " + (dir / "o.png").string()),
            0);
  EXPECT_EQ(run_cli("visualize --kind pca_features --ckpt " + run + "/last.ckpt --in " +
                    (dir / "data/rain/0000.png").string() + " --out " + (dir / "p.png").string()),
            0);
  EXPECT_EQ(png_size(dir / "p.png"), (std::pair<int64_t, int64_t>{32, 32}));
  EXPECT_EQ(run_cli("visualize --kind residual_heatmap --pred " + (dir / "o.png").string() +
                    " --gt " + (dir / "data/norain/0000.png").string() + " --out " +
                    (dir / "h.png").string()),
            0);
  EXPECT_EQ(run_cli("visualize --kind pca_features --layer nowhere --ckpt " + run +
                    "/last.ckpt --in " + (dir / "data/rain/0000.png").string() + " --out " +
                    (dir / "p.png").string()),
            2);
}

}  // namespace
}  // namespace mphm
