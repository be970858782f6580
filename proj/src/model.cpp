#include "mphm/model.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>

#include "mphm/errors.hpp"

namespace mphm {
namespace {

std::string join(const std::vector<int64_t>& values) {
  std::ostringstream out;
  for (size_t i = 0; i < values.size(); ++i) out << (i ? "," : "") << values[i];
  return out.str();
}

std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const auto t = trim(text);
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), value);
  if (ec != std::errc() || ptr != t.data() + t.size()) {
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  }
  return value;
}

double parse_double(const std::string& key, const std::string& text) {
  try {
    size_t used = 0;
    const auto t = trim(text);
    double v = std::stod(t, &used);
    if (used != t.size()) throw std::invalid_argument(t);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "' as a number");
  }
}

bool parse_bool(const std::string& key, const std::string& text) {
  const auto t = trim(text);
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + text + "'");
}

std::vector<int64_t> parse_list(const std::string& key, const std::string& text) {
  std::vector<int64_t> values;
  if (trim(text).empty()) return values;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) values.push_back(parse_number<int64_t>(key, item));
  return values;
}

std::string format_double(double v) {
  // Shortest text that parses back to the same value.
  char buffer[32];
  const auto result = std::to_chars(buffer, buffer + sizeof buffer, v);
  return std::string(buffer, result.ptr);
}

uint64_t fnv1a(const std::string& text) {
  uint64_t hash = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    hash ^= ch;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

torch::nn::Sequential make_stage(const ModelConfig& cfg, int64_t stage) {
  torch::nn::Sequential blocks;
  const auto depth = cfg.stage_depths[static_cast<size_t>(stage)];
  for (int64_t i = 0; i < depth; ++i) blocks->push_back(Hmm(cfg.hmm_config(stage)));
  return blocks;
}

void check_finite(const torch::Tensor& x, int64_t stage) {
  if (!torch::isfinite(x).all().item<bool>()) {
    throw NumericError("non-finite activations after stage " + std::to_string(stage));
  }
}

}  // namespace

std::vector<int64_t> ModelConfig::channels() const {
  if (!channel_plan.empty()) return channel_plan;
  std::vector<int64_t> plan;
  const auto s = stage_count();
  for (int64_t i = 0; i < s; ++i) plan.push_back(base_channels << std::min(i, s - 1 - i));
  return plan;
}

std::vector<int64_t> ModelConfig::stage_heads() const {
  if (!heads.empty()) return heads;
  std::vector<int64_t> out;
  const auto s = stage_count();
  for (int64_t i = 0; i < s; ++i) out.push_back(int64_t{1} << std::min(i, s - 1 - i));
  return out;
}

HmmConfig ModelConfig::hmm_config(int64_t stage) const {
  HmmConfig hc;
  hc.channels = channels()[static_cast<size_t>(stage)];
  hc.dw_kernel = dw_kernel;
  hc.ffcm_enabled = ffcm_enabled;
  hc.dw_enabled = dw_enabled;
  hc.fusion = branch_fusion;
  hc.vssm = VssmOptions{vssm_expand, d_state};
  hc.ffcm_expand = ffcm_expand;
  hc.heads = stage_heads()[static_cast<size_t>(stage)];
  hc.max_attention_tokens = max_attention_tokens;
  hc.max_kv_tokens = max_kv_tokens;
  return hc;
}

PfiConfig ModelConfig::pfi_config(int64_t stage) const {
  PfiConfig pc;
  pc.channels = channels()[static_cast<size_t>(stage)];
  pc.heads = stage_heads()[static_cast<size_t>(stage)];
  pc.inject_visual = inject_visual;
  pc.inject_text = inject_text;
  pc.fusion = prior_fusion;
  pc.text_queries = text_queries;
  pc.gdfn_expansion = gdfn_expansion;
  pc.max_attention_tokens = max_attention_tokens;
  pc.max_kv_tokens = max_kv_tokens;
  return pc;
}

PriorOptions ModelConfig::prior_options() const {
  PriorOptions po;
  po.provider = prior_provider;
  po.prompt = prompt;
  po.clip_bottleneck = clip_bottleneck;
  po.provider_options.seed = prior_seed;
  po.provider_options.visual_dim = visual_dim;
  po.provider_options.text_dim = text_dim;
  po.provider_options.patch = patch;
  po.provider_options.feature_file = feature_file;
  return po;
}

void ModelConfig::validate() const {
  const auto s = stage_count();
  if (s < 1 || s % 2 == 0) {
    throw ConfigError("stage_depths must have odd length, got " + std::to_string(s));
  }
  for (auto d : stage_depths) {
    if (d < 0) throw ConfigError("stage depths must be non-negative");
  }
  if (base_channels <= 0) throw ConfigError("base_channels must be positive");
  const auto plan = channels();
  const auto hs = stage_heads();
  if (static_cast<int64_t>(plan.size()) != s) {
    throw ConfigError("channel_plan has " + std::to_string(plan.size()) + " entries for " +
                      std::to_string(s) + " stages");
  }
  if (static_cast<int64_t>(hs.size()) != s) {
    throw ConfigError("heads has " + std::to_string(hs.size()) + " entries for " +
                      std::to_string(s) + " stages");
  }
  for (int64_t i = 0; i < s; ++i) {
    const auto c = plan[static_cast<size_t>(i)];
    if (c != plan[static_cast<size_t>(s - 1 - i)]) {
      throw ConfigError("channel_plan must be symmetric: " + join(plan));
    }
    if (c <= 0 || c % 4 != 0) {
      throw ConfigError("stage " + std::to_string(i) + " channels " + std::to_string(c) +
                        " not divisible by 4");
    }
    const auto h = hs[static_cast<size_t>(i)];
    if (h <= 0 || c % h != 0) {
      throw ConfigError("stage " + std::to_string(i) + " heads " + std::to_string(h) +
                        " do not divide channels " + std::to_string(c));
    }
  }
  if (dw_kernel % 2 == 0 || dw_kernel <= 0) throw ConfigError("dw_kernel must be odd");
  if (vssm_expand <= 0 || d_state <= 0) throw ConfigError("vssm_expand and d_state must be positive");
  if (ffcm_expand <= 0 || gdfn_expansion <= 0) throw ConfigError("expansions must be positive");
  if (max_attention_tokens <= 0 || max_kv_tokens <= 0) {
    throw ConfigError("attention token budgets must be positive");
  }
  if (prompt.empty()) throw ConfigError("prompt must not be empty");
  if (patch <= 0 || visual_dim <= 0 || text_dim <= 0 || clip_bottleneck <= 0) {
    throw ConfigError("prior dims must be positive");
  }
}

std::vector<std::pair<std::string, std::string>> ModelConfig::entries() const {
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  return {
      {"base_channels", std::to_string(base_channels)},
      {"stage_depths", join(stage_depths)},
      {"channel_plan", join(channel_plan)},
      {"heads", join(heads)},
      {"dw_kernel", std::to_string(dw_kernel)},
      {"ffcm_enabled", b(ffcm_enabled)},
      {"dw_enabled", b(dw_enabled)},
      {"branch_fusion", to_string(branch_fusion)},
      {"vssm_expand", std::to_string(vssm_expand)},
      {"d_state", std::to_string(d_state)},
      {"ffcm_expand", format_double(ffcm_expand)},
      {"inject_visual", b(inject_visual)},
      {"inject_text", b(inject_text)},
      {"prior_fusion", to_string(prior_fusion)},
      {"text_queries", b(text_queries)},
      {"gdfn_expansion", format_double(gdfn_expansion)},
      {"max_attention_tokens", std::to_string(max_attention_tokens)},
      {"max_kv_tokens", std::to_string(max_kv_tokens)},
      {"prior_provider", prior_provider},
      {"prompt", prompt},
      {"prior_seed", std::to_string(prior_seed)},
      {"feature_file", feature_file},
      {"visual_dim", std::to_string(visual_dim)},
      {"text_dim", std::to_string(text_dim)},
      {"patch", std::to_string(patch)},
      {"clip_bottleneck", std::to_string(clip_bottleneck)},
  };
}

void ModelConfig::set(const std::string& key, const std::string& value) {
  if (key == "base_channels") base_channels = parse_number<int64_t>(key, value);
  else if (key == "stage_depths") stage_depths = parse_list(key, value);
  else if (key == "channel_plan") channel_plan = parse_list(key, value);
  else if (key == "heads") heads = parse_list(key, value);
  else if (key == "dw_kernel") dw_kernel = parse_number<int64_t>(key, value);
  else if (key == "ffcm_enabled") ffcm_enabled = parse_bool(key, value);
  else if (key == "dw_enabled") dw_enabled = parse_bool(key, value);
  else if (key == "branch_fusion") branch_fusion = parse_branch_fusion(trim(value));
  else if (key == "vssm_expand") vssm_expand = parse_number<int64_t>(key, value);
  else if (key == "d_state") d_state = parse_number<int64_t>(key, value);
  else if (key == "ffcm_expand") ffcm_expand = parse_double(key, value);
  else if (key == "inject_visual") inject_visual = parse_bool(key, value);
  else if (key == "inject_text") inject_text = parse_bool(key, value);
  else if (key == "prior_fusion") prior_fusion = parse_prior_fusion(trim(value));
  else if (key == "text_queries") text_queries = parse_bool(key, value);
  else if (key == "gdfn_expansion") gdfn_expansion = parse_double(key, value);
  else if (key == "max_attention_tokens") max_attention_tokens = parse_number<int64_t>(key, value);
  else if (key == "max_kv_tokens") max_kv_tokens = parse_number<int64_t>(key, value);
  else if (key == "prior_provider") prior_provider = trim(value);
  else if (key == "prompt") prompt = trim(value);
  else if (key == "prior_seed") prior_seed = parse_number<uint64_t>(key, value);
  else if (key == "feature_file") feature_file = trim(value);
  else if (key == "visual_dim") visual_dim = parse_number<int64_t>(key, value);
  else if (key == "text_dim") text_dim = parse_number<int64_t>(key, value);
  else if (key == "patch") patch = parse_number<int64_t>(key, value);
  else if (key == "clip_bottleneck") clip_bottleneck = parse_number<int64_t>(key, value);
  else throw ConfigError("unknown model config key '" + key + "'");
}

std::string ModelConfig::to_text() const {
  std::ostringstream out;
  for (const auto& [k, v] : entries()) out << k << " = " << v << "\n";
  return out.str();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  ModelConfig cfg;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (trim(line).empty()) continue;
    if (eq == std::string::npos) throw ConfigError("malformed model config line: " + line);
    cfg.set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return cfg;
}

uint64_t ModelConfig::hash() const { return fnv1a(to_text()); }

std::vector<std::string> ModelConfig::diff(const ModelConfig& a, const ModelConfig& b) {
  std::vector<std::string> keys;
  const auto ea = a.entries();
  const auto eb = b.entries();
  for (size_t i = 0; i < ea.size(); ++i) {
    if (ea[i].second != eb[i].second) keys.push_back(ea[i].first);
  }
  return keys;
}

MphmImpl::MphmImpl(ModelConfig cfg_) : cfg(std::move(cfg_)) {
  cfg.validate();
  const auto plan = cfg.channels();
  const auto s = cfg.stage_count();
  const auto levels = cfg.levels();

  stem = register_module("stem", Conv(3, plan[0], 3));
  encoder = register_module("encoder", torch::nn::ModuleList());
  downsample = register_module("downsample", torch::nn::ModuleList());
  for (int64_t i = 0; i < levels; ++i) {
    encoder->push_back(make_stage(cfg, i));
    // conv to C_{i+1}/4, then 2x2 space-to-channel
    downsample->push_back(Conv(plan[static_cast<size_t>(i)], plan[static_cast<size_t>(i + 1)] / 4, 3));
  }
  bottleneck = register_module("bottleneck", make_stage(cfg, levels));

  upsample = register_module("upsample", torch::nn::ModuleList());
  skip_fuse = register_module("skip_fuse", torch::nn::ModuleList());
  decoder = register_module("decoder", torch::nn::ModuleList());
  pfi = register_module("pfi", torch::nn::ModuleList());
  pfi->push_back(Pfi(cfg.pfi_config(levels)));
  for (int64_t j = levels + 1; j < s; ++j) {
    const auto c = plan[static_cast<size_t>(j)];
    upsample->push_back(Conv(plan[static_cast<size_t>(j - 1)], 4 * c, 3));
    skip_fuse->push_back(pointwise_conv(2 * c, c));
    decoder->push_back(make_stage(cfg, j));
    pfi->push_back(Pfi(cfg.pfi_config(j)));
  }
  output = register_module("output", Conv(plan.back(), 3, 3));

  std::vector<int64_t> site_channels;
  for (const auto& shape : injection_shapes(cfg.size_multiple(), cfg.size_multiple())) {
    site_channels.push_back(shape.channels);
  }
  if (cfg.inject_visual || cfg.inject_text) {
    prior_generator = register_module(
        "prior_generator",
        PriorGenerator(cfg.prior_options(), site_channels, cfg.inject_visual, cfg.inject_text));
  }
}

std::vector<StageShape> MphmImpl::stage_shapes(int64_t height, int64_t width) const {
  const auto plan = cfg.channels();
  const auto s = cfg.stage_count();
  const auto levels = cfg.levels();
  std::vector<StageShape> shapes;
  for (int64_t i = 0; i < s; ++i) {
    const auto level = std::min(i, s - 1 - i);
    shapes.push_back({plan[static_cast<size_t>(i)], height >> level, width >> level});
  }
  (void)levels;
  return shapes;
}

std::vector<StageShape> MphmImpl::injection_shapes(int64_t height, int64_t width) const {
  auto all = stage_shapes(height, width);
  return std::vector<StageShape>(all.rbegin(), all.rbegin() + cfg.levels() + 1);
}

std::vector<std::string> MphmImpl::tap_names() const {
  std::vector<std::string> names{"stem"};
  for (int64_t i = 0; i < cfg.levels(); ++i) names.push_back("encoder." + std::to_string(i));
  names.push_back("bottleneck");
  names.push_back("pfi.0");
  for (int64_t j = 0; j < cfg.levels(); ++j) {
    names.push_back("decoder." + std::to_string(j));
    names.push_back("pfi." + std::to_string(j + 1));
  }
  names.push_back("residual");
  return names;
}

PriorBundle MphmImpl::priors(const torch::Tensor& padded_rainy) {
  if (!prior_generator) return {};
  return prior_generator->forward(padded_rainy,
                                  injection_shapes(padded_rainy.size(2), padded_rainy.size(3)));
}

torch::Tensor MphmImpl::residual(const torch::Tensor& rainy, const PriorBundle& bundle) {
  const auto h = rainy.size(2);
  const auto w = rainy.size(3);
  const auto m = cfg.size_multiple();
  if (rainy.dim() != 4 || rainy.size(1) != 3) {
    throw StructuralError("network input must be (batch, 3, H, W), got " + c10::str(rainy.sizes()));
  }
  if (h % m != 0 || w % m != 0) {
    throw StructuralError("padded input " + std::to_string(h) + "x" + std::to_string(w) +
                          " is not a multiple of " + std::to_string(m));
  }
  const auto sites = injection_shapes(h, w);
  bundle.validate(sites, rainy.size(0));
  if (cfg.inject_visual && bundle.visual.empty()) {
    throw ConfigError("visual injection enabled but the prior bundle has no visual maps");
  }
  if (cfg.inject_text && bundle.text.empty()) {
    throw ConfigError("text injection enabled but the prior bundle has no text tokens");
  }
  auto prior_at = [&](const std::vector<torch::Tensor>& list, size_t site) {
    return list.empty() || !(site < list.size()) ? torch::Tensor() : list[site];
  };
  auto tap = [&](const std::string& name, const torch::Tensor& t) {
    if (taps != nullptr) (*taps)[name] = t.detach();
  };

  const auto levels = cfg.levels();
  // An empty stage is a passthrough.
  auto run = [](torch::nn::Sequential& blocks, const torch::Tensor& t) {
    return blocks->is_empty() ? t : blocks->forward(t);
  };
  int64_t stage = 0;
  auto x = stem->forward(rainy);
  tap("stem", x);
  std::vector<torch::Tensor> skips;
  for (int64_t i = 0; i < levels; ++i, ++stage) {
    auto blocks = torch::nn::Sequential(encoder->ptr<torch::nn::SequentialImpl>(i));
    x = run(blocks, x);
    check_finite(x, stage);
    tap("encoder." + std::to_string(i), x);
    skips.push_back(x);
    x = space_to_depth(downsample[i]->as<ConvImpl>()->forward(x), 2);
  }
  x = run(bottleneck, x);
  check_finite(x, stage);
  tap("bottleneck", x);
  // Sites are finest first; the bottleneck is the coarsest.
  auto site = static_cast<size_t>(levels);
  x = pfi[0]->as<PfiImpl>()->forward(x, prior_at(bundle.visual, site), prior_at(bundle.text, site));
  check_finite(x, stage);
  tap("pfi.0", x);
  ++stage;
  for (int64_t j = 0; j < levels; ++j, ++stage) {
    x = depth_to_space(upsample[j]->as<ConvImpl>()->forward(x), 2);
    const auto& skip = skips[static_cast<size_t>(levels - 1 - j)];
    x = skip_fuse[j]->as<torch::nn::Conv2dImpl>()->forward(torch::cat({x, skip}, 1));
    auto blocks = torch::nn::Sequential(decoder->ptr<torch::nn::SequentialImpl>(j));
    x = run(blocks, x);
    tap("decoder." + std::to_string(j), x);
    site = static_cast<size_t>(levels - 1 - j);
    x = pfi[j + 1]->as<PfiImpl>()->forward(x, prior_at(bundle.visual, site),
                                           prior_at(bundle.text, site));
    check_finite(x, stage);
    tap("pfi." + std::to_string(j + 1), x);
  }
  auto r = output->forward(x);
  tap("residual", r);
  return r;
}

torch::Tensor MphmImpl::forward_padded(const torch::Tensor& rainy, const PriorBundle& bundle,
                                       bool clamp) {
  auto pred = rainy - residual(rainy, bundle);
  return clamp ? pred.clamp(0.0, 1.0) : pred;
}

torch::Tensor MphmImpl::forward(const torch::Tensor& rainy, bool clamp) {
  if (rainy.dim() != 4 || rainy.size(1) != 3) {
    throw StructuralError("network input must be (batch, 3, H, W), got " + c10::str(rainy.sizes()));
  }
  const auto h = rainy.size(2);
  const auto w = rainy.size(3);
  const auto m = cfg.size_multiple();
  const auto ph = (m - h % m) % m;
  const auto pw = (m - w % m) % m;
  auto padded = reflect_pad(rainy, 0, pw, 0, ph);
  auto pred = forward_padded(padded, priors(padded), clamp);
  if (ph != 0 || pw != 0) pred = pred.slice(2, 0, h).slice(3, 0, w);
  return pred;
}

void MphmImpl::zero_output() {
  torch::NoGradGuard guard;
  output->conv->weight.zero_();
  output->conv->bias.zero_();
}

void MphmImpl::make_identity() {
  zero_output();
  for (auto& block : *pfi) block->as<PfiImpl>()->zero_residual();
}

int64_t count_parameters(torch::nn::Module& module) {
  int64_t total = 0;
  for (const auto& p : module.parameters()) total += p.numel();
  return total;
}

}  // namespace mphm
