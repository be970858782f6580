#include "mphm/priors.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mphm/errors.hpp"
#include "mphm/ops.hpp"

namespace mphm {
namespace {

constexpr char kFeatureMagic[8] = {'M', 'P', 'H', 'M', 'F', 'E', 'A', 'T'};
constexpr uint32_t kFeatureVersion = 1;

uint64_t fnv1a(std::string_view text) {
  uint64_t hash = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    hash ^= ch;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

void put_u32(std::ostream& out, uint32_t v) {
  unsigned char bytes[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                            static_cast<unsigned char>(v >> 16),
                            static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(bytes), 4);
}

uint32_t get_u32(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

static_assert(std::endian::native == std::endian::little,
              "feature files are little-endian float32; add byte swapping for this target");

}  // namespace

torch::Tensor RawVisualPrior::grid() const {
  return tokens.transpose(1, 2).reshape({tokens.size(0), tokens.size(2), grid_h, grid_w});
}

std::string to_string(const StageShape& shape) {
  std::ostringstream out;
  out << "(" << shape.channels << ", " << shape.height << ", " << shape.width << ")";
  return out.str();
}

void PriorBundle::validate(std::span<const StageShape> stages, int64_t batch) const {
  auto check_count = [&](const std::vector<torch::Tensor>& list, const char* what) {
    if (!list.empty() && list.size() != stages.size()) {
      throw ConfigError(std::string("prior bundle has ") + std::to_string(list.size()) + " " +
                        what + " maps for " + std::to_string(stages.size()) + " stages");
    }
  };
  check_count(visual, "visual");
  check_count(text, "text");
  for (size_t i = 0; i < visual.size(); ++i) {
    const auto& v = visual[i];
    const auto& s = stages[i];
    if (v.dim() != 4 || v.size(0) != batch || v.size(1) != s.channels || v.size(2) != s.height ||
        v.size(3) != s.width) {
      throw ConfigError("visual prior for stage " + std::to_string(i) + " has shape " +
                        c10::str(v.sizes()) + ", stage expects " + to_string(s));
    }
  }
  for (size_t i = 0; i < text.size(); ++i) {
    const auto& t = text[i];
    if (t.dim() != 3 || t.size(0) != batch || t.size(2) != stages[i].channels) {
      throw ConfigError("text prior for stage " + std::to_string(i) + " has shape " +
                        c10::str(t.sizes()) + ", stage expects width " +
                        std::to_string(stages[i].channels));
    }
  }
}

MockPriorProvider::MockPriorProvider(const ProviderOptions& options)
    : seed_(options.seed),
      visual_dim_(options.visual_dim),
      text_dim_(options.text_dim),
      patch_(options.patch) {
  if (patch_ <= 0 || visual_dim_ <= 0 || text_dim_ <= 0) {
    throw ConfigError("mock provider: patch and feature dims must be positive");
  }
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed_);
  const auto fan_in = 3 * patch_ * patch_;
  projection_ = torch::randn({fan_in, visual_dim_}, gen, torch::kFloat) /
                std::sqrt(static_cast<double>(fan_in));
}

RawVisualPrior MockPriorProvider::encode_visual(const torch::Tensor& images) const {
  if (images.dim() != 4 || images.size(1) != 3) {
    throw StructuralError("mock visual encoder expects (batch, 3, H, W)");
  }
  const auto h = images.size(2);
  const auto w = images.size(3);
  if (h < patch_ || w < patch_) {
    throw StructuralError("mock visual encoder: image " + std::to_string(h) + "x" +
                          std::to_string(w) + " is smaller than one " + std::to_string(patch_) +
                          "px patch");
  }
  torch::NoGradGuard guard;
  const auto gh = h / patch_;
  const auto gw = w / patch_;
  const auto b = images.size(0);
  auto cropped = images.detach().slice(2, 0, gh * patch_).slice(3, 0, gw * patch_);
  auto patches = cropped.reshape({b, 3, gh, patch_, gw, patch_})
                     .permute({0, 2, 4, 1, 3, 5})
                     .reshape({b, gh * gw, 3 * patch_ * patch_});
  auto tokens = torch::matmul(patches, projection_.to(images.scalar_type()));
  return RawVisualPrior{tokens, gh, gw, "mock:" + std::to_string(seed_)};
}

RawTextPrior MockPriorProvider::encode_text(const std::string& prompt) const {
  if (prompt.empty()) throw ConfigError("text prompt must not be empty");
  torch::NoGradGuard guard;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed_ ^ fnv1a(prompt));
  auto token = torch::randn({1, text_dim_}, gen, torch::kFloat);
  token = token / token.norm();
  return RawTextPrior{token, prompt};
}

ExternalPriorProvider::ExternalPriorProvider(const ProviderOptions& options) {
  auto file = read_feature_file(options.feature_file);
  const auto dv = file.visual_tokens.size(2);
  const auto dt = file.text_tokens.size(1);
  if (dv != options.visual_dim) {
    throw DataError("external features " + options.feature_file.string() +
                    ": visual_tokens d_v expected " + std::to_string(options.visual_dim) +
                    ", got " + std::to_string(dv));
  }
  if (dt != options.text_dim) {
    throw DataError("external features " + options.feature_file.string() +
                    ": text_tokens d_t expected " + std::to_string(options.text_dim) + ", got " +
                    std::to_string(dt));
  }
  source_ = file.source;
  visual_ = file.visual_tokens;
  text_ = file.text_tokens;
}

RawVisualPrior ExternalPriorProvider::encode_visual(const torch::Tensor& images) const {
  const auto b = images.size(0);
  const auto gh = visual_.size(0);
  const auto gw = visual_.size(1);
  auto tokens = visual_.reshape({1, gh * gw, visual_.size(2)})
                    .expand({b, gh * gw, visual_.size(2)})
                    .to(images.scalar_type())
                    .contiguous();
  return RawVisualPrior{tokens, gh, gw, source_};
}

RawTextPrior ExternalPriorProvider::encode_text(const std::string& prompt) const {
  return RawTextPrior{text_, prompt};
}

std::shared_ptr<PriorProvider> make_provider(const std::string& name,
                                             const ProviderOptions& options) {
  if (name == "mock") return std::make_shared<MockPriorProvider>(options);
  if (name == "external") return std::make_shared<ExternalPriorProvider>(options);
  throw ConfigError("unknown prior provider '" + name + "' (expected mock or external)");
}

void write_feature_file(const std::filesystem::path& path, const FeatureFile& features) {
  auto visual = features.visual_tokens.to(torch::kFloat).contiguous();
  auto text = features.text_tokens.to(torch::kFloat).contiguous();
  if (visual.dim() != 3 || text.dim() != 2) {
    throw StructuralError("feature file: visual_tokens must be 3-D and text_tokens 2-D");
  }
  const auto visual_bytes = visual.numel() * static_cast<int64_t>(sizeof(float));
  nlohmann::json header = {
      {"visual_tokens", {{"shape", visual.sizes().vec()}, {"offset", 0}}},
      {"text_tokens", {{"shape", text.sizes().vec()}, {"offset", visual_bytes}}},
      {"source", features.source},
  };
  const auto header_text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write feature file " + path.string());
  out.write(kFeatureMagic, sizeof(kFeatureMagic));
  put_u32(out, kFeatureVersion);
  put_u32(out, static_cast<uint32_t>(header_text.size()));
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  out.write(reinterpret_cast<const char*>(visual.data_ptr<float>()), visual_bytes);
  out.write(reinterpret_cast<const char*>(text.data_ptr<float>()),
            text.numel() * static_cast<int64_t>(sizeof(float)));
  if (!out) throw DataError("failed writing feature file " + path.string());
}

FeatureFile read_feature_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open feature file " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  const auto fail = [&](const std::string& why) -> DataError {
    return DataError("feature file " + path.string() + ": " + why);
  };
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kFeatureMagic, 8) != 0) {
    throw fail("bad magic");
  }
  const auto version = get_u32(bytes.data() + 8);
  if (version != kFeatureVersion) throw fail("unsupported version " + std::to_string(version));
  const auto header_len = get_u32(bytes.data() + 12);
  if (bytes.size() < 16 + static_cast<size_t>(header_len)) throw fail("truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + header_len);
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("malformed header: ") + e.what());
  }
  const size_t payload = 16 + header_len;

  auto load = [&](const char* key, size_t rank) {
    if (!header.contains(key)) throw fail(std::string("missing array '") + key + "'");
    auto shape = header[key].at("shape").get<std::vector<int64_t>>();
    auto offset = header[key].at("offset").get<int64_t>();
    if (shape.size() != rank) {
      throw fail(std::string("array '") + key + "' must have rank " + std::to_string(rank));
    }
    int64_t count = 1;
    for (auto d : shape) {
      if (d <= 0) throw fail(std::string("array '") + key + "' has a non-positive dim");
      count *= d;
    }
    const auto begin = payload + static_cast<size_t>(offset);
    const auto size = static_cast<size_t>(count) * sizeof(float);
    if (offset < 0 || begin + size > bytes.size()) {
      throw fail(std::string("array '") + key + "' runs past end of file");
    }
    auto tensor = torch::empty(shape, torch::kFloat);
    std::memcpy(tensor.data_ptr<float>(), bytes.data() + begin, size);
    return tensor;
  };

  FeatureFile file;
  file.visual_tokens = load("visual_tokens", 3);
  file.text_tokens = load("text_tokens", 2);
  file.source = header.value("source", std::string("external"));
  return file;
}

DinoAdapterImpl::DinoAdapterImpl(int64_t visual_dim, std::vector<int64_t> stage_channels_)
    : stage_channels(std::move(stage_channels_)) {
  if (stage_channels.empty()) throw ConfigError("visual adapter needs at least one stage");
  reduce = register_module("reduce", pointwise_conv(visual_dim, stage_channels[0]));
  refine = register_module("refine", torch::nn::ModuleList());
  down = register_module("down", torch::nn::ModuleList());
  project = register_module("project", torch::nn::ModuleList());
  refine->push_back(Conv(stage_channels[0], stage_channels[0], 3));
  for (size_t i = 1; i < stage_channels.size(); ++i) {
    const auto prev = stage_channels[i - 1];
    down->push_back(Conv(prev, prev, 3));
    project->push_back(pointwise_conv(4 * prev, stage_channels[i]));
  }
}

std::vector<torch::Tensor> DinoAdapterImpl::forward(const RawVisualPrior& raw,
                                                    std::span<const StageShape> stages) {
  if (stages.size() != stage_channels.size()) {
    throw ConfigError("visual adapter built for " + std::to_string(stage_channels.size()) +
                      " stages, asked for " + std::to_string(stages.size()));
  }
  for (size_t i = 0; i < stages.size(); ++i) {
    if (stages[i].channels != stage_channels[i]) {
      throw ConfigError("visual adapter stage " + std::to_string(i) + " has " +
                        std::to_string(stage_channels[i]) + " channels, stage wants " +
                        to_string(stages[i]));
    }
    if (i > 0 && (stages[i - 1].height != 2 * stages[i].height ||
                  stages[i - 1].width != 2 * stages[i].width)) {
      throw ConfigError("visual adapter stages must halve resolution: " +
                        to_string(stages[i - 1]) + " -> " + to_string(stages[i]));
    }
  }

  std::vector<torch::Tensor> outputs;
  auto x = reduce->forward(raw.grid());
  x = bilinear_resize(x, stages[0].height, stages[0].width);
  x = refine[0]->as<ConvImpl>()->forward(x);
  outputs.push_back(x);
  for (size_t i = 1; i < stages.size(); ++i) {
    auto y = torch::gelu(down[i - 1]->as<ConvImpl>()->forward(x));
    y = space_to_depth(y, 2);
    x = project[i - 1]->as<torch::nn::Conv2dImpl>()->forward(y);
    outputs.push_back(x);
  }
  return outputs;
}

ClipAdapterImpl::ClipAdapterImpl(int64_t text_dim, int64_t bottleneck,
                                 std::vector<int64_t> stage_channels) {
  down = register_module("down", torch::nn::Linear(text_dim, bottleneck));
  hidden = register_module("hidden", torch::nn::Linear(bottleneck, bottleneck));
  heads = register_module("heads", torch::nn::ModuleList());
  for (auto c : stage_channels) heads->push_back(torch::nn::Linear(bottleneck, c));
}

std::vector<torch::Tensor> ClipAdapterImpl::forward(const torch::Tensor& tokens) {
  auto z = torch::gelu(down->forward(tokens));
  z = torch::gelu(hidden->forward(z));
  std::vector<torch::Tensor> outputs;
  for (const auto& head : *heads) {
    outputs.push_back(head->as<torch::nn::LinearImpl>()->forward(z));
  }
  return outputs;
}

PriorGeneratorImpl::PriorGeneratorImpl(PriorOptions options_, std::vector<int64_t> stage_channels,
                                       bool visual, bool text)
    : options(std::move(options_)), use_visual(visual), use_text(text) {
  provider = make_provider(options.provider, options.provider_options);
  if (use_visual) {
    visual_adapter =
        register_module("visual_adapter", DinoAdapter(provider->visual_dim(), stage_channels));
  }
  if (use_text) {
    if (options.prompt.empty()) throw ConfigError("text prompt must not be empty");
    text_adapter = register_module(
        "text_adapter",
        ClipAdapter(provider->text_dim(), options.clip_bottleneck, stage_channels));
  }
}

PriorBundle PriorGeneratorImpl::forward(const torch::Tensor& images,
                                        std::span<const StageShape> stages) {
  PriorBundle bundle;
  const auto batch = images.size(0);
  if (use_visual) {
    auto raw = provider->encode_visual(images);
    bundle.visual = visual_adapter->forward(raw, stages);
  }
  if (use_text) {
    auto raw = provider->encode_text(options.prompt);
    auto dtype = images.scalar_type();
    for (auto& t : text_adapter->forward(raw.tokens.to(dtype))) {
      bundle.text.push_back(t.unsqueeze(0).expand({batch, t.size(0), t.size(1)}));
    }
  }
  return bundle;
}

}  // namespace mphm
