#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "mphm/errors.hpp"
#include "scratch.hpp"
#include "mphm/priors.hpp"

namespace mphm {
namespace {

namespace fs = std::filesystem;

fs::path temp_path(const std::string& name) { return scratch::fresh_dir("priors") / name; }

std::vector<StageShape> sites() { return {{8, 32, 32}, {16, 16, 16}, {32, 8, 8}}; }

TEST(MockProvider, DeterministicPerSeed) {
  auto images = torch::rand({2, 3, 32, 48});
  MockPriorProvider a(ProviderOptions{.seed = 3});
  MockPriorProvider b(ProviderOptions{.seed = 3});
  MockPriorProvider c(ProviderOptions{.seed = 4});
  auto va = a.encode_visual(images);
  EXPECT_EQ(va.tokens.sizes(), (std::vector<int64_t>{2, 6, 384}));
  EXPECT_EQ(va.grid_h, 2);
  EXPECT_EQ(va.grid_w, 3);
  EXPECT_TRUE(torch::equal(va.tokens, b.encode_visual(images).tokens));
  EXPECT_FALSE(torch::equal(va.tokens, c.encode_visual(images).tokens));
  EXPECT_FALSE(va.tokens.requires_grad());

  auto ta = a.encode_text("No rain");
  EXPECT_EQ(ta.tokens.sizes(), (std::vector<int64_t>{1, 512}));
  EXPECT_NEAR(ta.tokens.norm().item<double>(), 1.0, 1e-6);
  EXPECT_TRUE(torch::equal(ta.tokens, b.encode_text("No rain").tokens));
  EXPECT_FALSE(torch::equal(ta.tokens, a.encode_text("Heavy rain").tokens));
}

TEST(MockProvider, Errors) {
  MockPriorProvider p;
  EXPECT_THROW(p.encode_visual(torch::rand({1, 3, 8, 8})), StructuralError);
  EXPECT_THROW(p.encode_text(""), ConfigError);
  EXPECT_THROW(make_provider("dinov2", {}), ConfigError);
}

TEST(FeatureFile, RoundTripAndExternalProvider) {
  FeatureFile file;
  file.visual_tokens = torch::randn({2, 3, 384});
  file.text_tokens = torch::randn({4, 512});
  file.source = "unit-test";
  const auto path = temp_path("features.bin");
  write_feature_file(path, file);
  const auto back = read_feature_file(path);
  EXPECT_TRUE(torch::equal(back.visual_tokens, file.visual_tokens));
  EXPECT_TRUE(torch::equal(back.text_tokens, file.text_tokens));
  EXPECT_EQ(back.source, "unit-test");

  ProviderOptions options;
  options.feature_file = path;
  auto provider = make_provider("external", options);
  auto visual = provider->encode_visual(torch::rand({3, 3, 64, 64}));
  EXPECT_EQ(visual.tokens.sizes(), (std::vector<int64_t>{3, 6, 384}));
  EXPECT_EQ(provider->encode_text("anything").tokens.sizes(), (std::vector<int64_t>{4, 512}));
}

TEST(FeatureFile, DimensionMismatchNamesDims) {
  FeatureFile file;
  file.visual_tokens = torch::randn({2, 2, 100});
  file.text_tokens = torch::randn({1, 512});
  const auto path = temp_path("features_bad.bin");
  write_feature_file(path, file);
  ProviderOptions options;
  options.feature_file = path;
  try {
    ExternalPriorProvider provider(options);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("384"), std::string::npos) << msg;
    EXPECT_NE(msg.find("100"), std::string::npos) << msg;
  }
}

TEST(FeatureFile, CorruptFileRejected) {
  const auto path = temp_path("features_corrupt.bin");
  {
    std::ofstream out(path, std::ios::binary);
    out << "MPHMFEAT garbage";
  }
  EXPECT_THROW(read_feature_file(path), DataError);
  EXPECT_THROW(read_feature_file(temp_path("does_not_exist.bin")), DataError);
}

TEST(Adapters, ProduceStageShapes) {
  torch::manual_seed(0);
  PriorGenerator generator(PriorOptions{}, std::vector<int64_t>{8, 16, 32}, true, true);
  const auto stages = sites();
  auto bundle = generator->forward(torch::rand({2, 3, 32, 32}), stages);
  ASSERT_EQ(bundle.visual.size(), 3u);
  ASSERT_EQ(bundle.text.size(), 3u);
  for (size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(bundle.visual[i].sizes(),
              (std::vector<int64_t>{2, stages[i].channels, stages[i].height, stages[i].width}));
    EXPECT_EQ(bundle.text[i].sizes(), (std::vector<int64_t>{2, 1, stages[i].channels}));
  }
  EXPECT_NO_THROW(bundle.validate(stages, 2));
}

TEST(Adapters, GradientsReachAdapterButNotEncoder) {
  torch::manual_seed(0);
  PriorGenerator generator(PriorOptions{}, std::vector<int64_t>{8, 16, 32}, true, true);
  auto images = torch::rand({1, 3, 32, 32}, torch::requires_grad());
  auto bundle = generator->forward(images, sites());
  (bundle.visual[2].sum() + bundle.text[2].sum()).backward();
  EXPECT_TRUE(generator->visual_adapter->reduce->weight.grad().defined());
  EXPECT_TRUE(generator->text_adapter->down->weight.grad().defined());
  EXPECT_FALSE(images.grad().defined());
}

TEST(Adapters, StageErrors) {
  PriorGenerator generator(PriorOptions{}, std::vector<int64_t>{8, 16, 32}, true, false);
  std::vector<StageShape> not_halving{{8, 32, 32}, {16, 32, 32}, {32, 8, 8}};
  EXPECT_THROW(generator->forward(torch::rand({1, 3, 32, 32}), not_halving), ConfigError);
  std::vector<StageShape> wrong_channels{{8, 32, 32}, {8, 16, 16}, {32, 8, 8}};
  EXPECT_THROW(generator->forward(torch::rand({1, 3, 32, 32}), wrong_channels), ConfigError);
}

TEST(Bundle, ValidateRejectsMismatch) {
  PriorBundle bundle;
  bundle.visual = {torch::zeros({1, 8, 32, 32}), torch::zeros({1, 16, 16, 16}),
                   torch::zeros({1, 32, 4, 4})};
  EXPECT_THROW(bundle.validate(sites(), 1), ConfigError);
  bundle.visual.pop_back();
  EXPECT_THROW(bundle.validate(sites(), 1), ConfigError);
}

}  // namespace
}  // namespace mphm
