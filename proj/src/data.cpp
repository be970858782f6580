#include "mphm/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <set>

#include "mphm/errors.hpp"

namespace mphm {
namespace fs = std::filesystem;
namespace {

/// Uniform in [0, 1) from the top 53 bits; identical on every platform.
double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

void check_range(double v, double lo, double hi, const char* name) {
  if (!(v >= lo && v <= hi)) {
    throw ConfigError(std::string(name) + " = " + std::to_string(v) + " outside [" +
                      std::to_string(lo) + ", " + std::to_string(hi) + "]");
  }
}

std::vector<std::string> png_names(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  std::vector<std::string> names;
  for (const auto& item : fs::directory_iterator(dir)) {
    if (item.is_regular_file() && item.path().extension() == ".png") {
      names.push_back(item.path().filename().string());
    }
  }
  std::sort(names.begin(), names.end());
  return names;
}

}  // namespace

torch::Tensor read_png(const fs::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw DataError("cannot read PNG " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<uint8_t> pixels(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, pixels.data(), 0, nullptr)) {
    png_image_free(&image);
    throw DataError("cannot decode PNG " + path.string() + ": " + image.message);
  }
  const int64_t h = image.height;
  const int64_t w = image.width;
  auto hwc = torch::from_blob(pixels.data(), {h, w, 3}, torch::kUInt8);
  return hwc.permute({2, 0, 1}).to(torch::kFloat32).div(255.0).contiguous();
}

void write_png(const fs::path& path, const torch::Tensor& image) {
  auto x = image.dim() == 4 ? image.squeeze(0) : image;
  if (x.dim() != 3 || x.size(0) != 3) {
    throw StructuralError("write_png expects (3, H, W), got " + c10::str(image.sizes()));
  }
  auto bytes = torch::floor(x.detach().to(torch::kFloat64).clamp(0.0, 1.0) * 255.0 + 0.5)
                   .clamp(0, 255)
                   .to(torch::kUInt8)
                   .permute({1, 2, 0})
                   .contiguous();
  png_image out{};
  out.version = PNG_IMAGE_VERSION;
  out.width = static_cast<png_uint_32>(x.size(2));
  out.height = static_cast<png_uint_32>(x.size(1));
  out.format = PNG_FORMAT_RGB;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!png_image_write_to_file(&out, path.c_str(), 0, bytes.data_ptr<uint8_t>(), 0, nullptr)) {
    throw DataError("cannot write PNG " + path.string() + ": " + out.message);
  }
}

std::pair<int64_t, int64_t> png_size(const fs::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw DataError("cannot read PNG " + path.string() + ": " + image.message);
  }
  std::pair<int64_t, int64_t> size{image.width, image.height};
  png_image_free(&image);
  return size;
}

void RainParams::validate() const {
  check_range(streak_density, 0.0, 1.0, "streak_density");
  check_range(angle_degrees, -60.0, 60.0, "angle_degrees");
  check_range(intensity, 0.0, 1.0, "intensity");
  if (!(streak_length_px >= 1.0)) throw ConfigError("streak_length_px must be >= 1");
  if (!(streak_width_px > 0.0)) throw ConfigError("streak_width_px must be > 0");
}

torch::Tensor streak_kernel(const RainParams& params) {
  const auto radius = static_cast<int64_t>(std::ceil(params.streak_length_px / 2.0 +
                                                     params.streak_width_px / 2.0));
  const auto size = 2 * radius + 1;
  const double theta = params.angle_degrees * std::numbers::pi / 180.0;
  // Direction along the streak in (x, y) with y pointing down.
  const double dx = std::sin(theta);
  const double dy = std::cos(theta);
  auto kernel = torch::zeros({size, size}, torch::kFloat64);
  auto k = kernel.accessor<double, 2>();
  for (int64_t i = 0; i < size; ++i) {
    for (int64_t j = 0; j < size; ++j) {
      const double x = static_cast<double>(j - radius);
      const double y = static_cast<double>(i - radius);
      const double along = x * dx + y * dy;
      const double across = std::abs(x * dy - y * dx);
      if (std::abs(along) <= params.streak_length_px / 2.0 &&
          across <= params.streak_width_px / 2.0) {
        k[i][j] = 1.0;
      }
    }
  }
  k[radius][radius] = 1.0;
  return kernel;
}

torch::Tensor synth_rain(const torch::Tensor& clean, const RainParams& params) {
  params.validate();
  if (clean.dim() != 3 || clean.size(0) != 3) {
    throw StructuralError("synth_rain expects (3, H, W), got " + c10::str(clean.sizes()));
  }
  if (params.streak_density == 0.0 || params.intensity == 0.0) return clean.clone();
  const auto h = clean.size(1);
  const auto w = clean.size(2);
  std::mt19937_64 rng(params.seed);
  auto mask = torch::zeros({1, 1, h, w}, torch::kFloat64);
  auto m = mask.accessor<double, 4>();
  for (int64_t i = 0; i < h; ++i) {
    for (int64_t j = 0; j < w; ++j) m[0][0][i][j] = unit(rng) < params.streak_density ? 1.0 : 0.0;
  }
  const auto kernel = streak_kernel(params);
  const auto pad = kernel.size(0) / 2;
  auto layer = torch::conv2d(mask, kernel.view({1, 1, kernel.size(0), kernel.size(1)}), {}, 1, pad)
                   .clamp(0.0, 1.0)
                   .mul(params.intensity)
                   .view({1, h, w});
  return (clean.to(torch::kFloat64) + layer).clamp(0.0, 1.0).to(clean.scalar_type());
}

torch::Tensor synth_clean(int64_t height, int64_t width, uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto ys = torch::linspace(0.0, 1.0, height, torch::kFloat64).view({height, 1});
  auto xs = torch::linspace(0.0, 1.0, width, torch::kFloat64).view({1, width});
  std::vector<torch::Tensor> channels;
  for (int c = 0; c < 3; ++c) {
    auto plane = torch::full({height, width}, 0.2 + 0.3 * unit(rng), torch::kFloat64);
    for (int wave = 0; wave < 3; ++wave) {
      const double fx = 1.0 + 4.0 * unit(rng);
      const double fy = 1.0 + 4.0 * unit(rng);
      const double phase = 2.0 * std::numbers::pi * unit(rng);
      plane = plane + 0.08 * torch::sin(2.0 * std::numbers::pi * (fx * xs + fy * ys) + phase);
    }
    channels.push_back(plane);
  }
  auto image = torch::stack(channels);
  for (int r = 0; r < 4; ++r) {
    const auto top = static_cast<int64_t>(unit(rng) * height * 0.8);
    const auto left = static_cast<int64_t>(unit(rng) * width * 0.8);
    const auto bottom = std::min(height, top + 1 + static_cast<int64_t>(unit(rng) * height * 0.4));
    const auto right = std::min(width, left + 1 + static_cast<int64_t>(unit(rng) * width * 0.4));
    for (int c = 0; c < 3; ++c) {
      image[c].slice(0, top, bottom).slice(1, left, right).fill_(0.1 + 0.6 * unit(rng));
    }
  }
  return image.clamp(0.0, 1.0).to(torch::kFloat32);
}

PairedSample PairedDataset::get(size_t i) const {
  const auto& e = entries_.at(i);
  PairedSample sample{read_png(e.rainy), read_png(e.clean), e.id};
  if (sample.rainy.sizes() != sample.clean.sizes()) {
    throw DataError("dimension mismatch for " + e.id);
  }
  return sample;
}

PairedDataset load_paired_dir(const fs::path& rain_dir, const fs::path& clean_dir) {
  const auto rain = png_names(rain_dir);
  const auto clean = png_names(clean_dir);
  std::vector<std::string> orphans;
  std::set_symmetric_difference(rain.begin(), rain.end(), clean.begin(), clean.end(),
                                std::back_inserter(orphans));
  if (!orphans.empty()) {
    std::string list;
    for (const auto& name : orphans) list += (list.empty() ? "" : ", ") + name;
    throw DataError("unpaired files between " + rain_dir.string() + " and " +
                    clean_dir.string() + ": " + list);
  }
  std::vector<PairedDataset::Entry> entries;
  for (const auto& name : rain) {
    PairedDataset::Entry e{fs::path(name).stem().string(), rain_dir / name, clean_dir / name};
    const auto [rw, rh] = png_size(e.rainy);
    const auto [cw, ch] = png_size(e.clean);
    if (rw != cw || rh != ch) {
      throw DataError("dimension mismatch for " + name + ": rain " + std::to_string(rw) + "x" +
                      std::to_string(rh) + ", clean " + std::to_string(cw) + "x" +
                      std::to_string(ch));
    }
    e.height = rh;
    e.width = rw;
    entries.push_back(std::move(e));
  }
  return PairedDataset(std::move(entries));
}

PairedDataset load_paired_root(const fs::path& root) {
  return load_paired_dir(root / "rain", root / "norain");
}

BatchIterator::BatchIterator(const PairedDataset& dataset, BatchOptions options)
    : dataset_(dataset), options_(options), rng_(options.seed), cache_(dataset.size()) {
  if (dataset.empty()) throw DataError("cannot iterate an empty dataset");
  if (options_.batch < 1) throw ConfigError("batch must be >= 1");
  if (options_.crop < 1) throw ConfigError("crop must be >= 1");
  for (size_t i = 0; i < dataset.size(); ++i) {
    const auto& e = dataset.entry(i);
    if (options_.crop > std::min(e.height, e.width)) {
      throw ConfigError("crop " + std::to_string(options_.crop) + " exceeds image " + e.id +
                        " (" + std::to_string(e.width) + "x" + std::to_string(e.height) + ")");
    }
  }
  order_.resize(dataset.size());
  std::iota(order_.begin(), order_.end(), size_t{0});
  reshuffle();
}

void BatchIterator::reshuffle() {
  cursor_ = 0;
  if (!options_.shuffle) return;
  // Fisher-Yates with explicit draws; std::shuffle is library-specific.
  for (size_t i = order_.size(); i > 1; --i) {
    std::swap(order_[i - 1], order_[static_cast<size_t>(unit(rng_) * static_cast<double>(i))]);
  }
}

Batch BatchIterator::next() {
  Batch batch;
  std::vector<torch::Tensor> rainy, clean;
  const auto crop = options_.crop;
  for (int64_t b = 0; b < options_.batch; ++b) {
    if (cursor_ == order_.size()) reshuffle();
    const auto index = order_[cursor_++];
    auto& cached = cache_[index];
    if (!cached) cached = dataset_.get(index);
    const auto h = cached->rainy.size(1);
    const auto w = cached->rainy.size(2);
    int64_t top = (h - crop) / 2;
    int64_t left = (w - crop) / 2;
    bool flip = false;
    if (options_.augment) {
      top = static_cast<int64_t>(unit(rng_) * static_cast<double>(h - crop + 1));
      left = static_cast<int64_t>(unit(rng_) * static_cast<double>(w - crop + 1));
      flip = unit(rng_) < 0.5;
    }
    auto view = [&](const torch::Tensor& img) {
      auto patch = img.slice(1, top, top + crop).slice(2, left, left + crop);
      return flip ? patch.flip({2}) : patch;
    };
    rainy.push_back(view(cached->rainy));
    clean.push_back(view(cached->clean));
    batch.ids.push_back(cached->id);
  }
  batch.rainy = torch::stack(rainy).contiguous();
  batch.clean = torch::stack(clean).contiguous();
  return batch;
}

void generate_pairs(const fs::path& root, int64_t count, int64_t height, int64_t width,
                    uint64_t seed) {
  if (count < 1 || height < 1 || width < 1) throw ConfigError("gen-data sizes must be positive");
  std::mt19937_64 rng(seed);
  for (int64_t i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "%04lld.png", static_cast<long long>(i));
    const auto clean = synth_clean(height, width, rng());
    RainParams params;
    params.streak_density = 0.01 + 0.03 * unit(rng);
    params.angle_degrees = -30.0 + 60.0 * unit(rng);
    params.streak_length_px = 8.0 + 16.0 * unit(rng);
    params.streak_width_px = 1.0 + unit(rng);
    params.intensity = 0.4 + 0.4 * unit(rng);
    params.seed = rng();
    write_png(root / "norain" / name, clean);
    write_png(root / "rain" / name, synth_rain(clean, params));
  }
}

}  // namespace mphm
