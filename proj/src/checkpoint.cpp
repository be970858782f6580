#include "mphm/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "mphm/errors.hpp"

namespace mphm {
namespace fs = std::filesystem;
namespace {

constexpr char kMagic[8] = {'M', 'P', 'H', 'M', 'C', 'K', 'P', 'T'};

uint64_t fnv1a(const char* data, size_t size) {
  uint64_t hash = 0xcbf29ce484222325ULL;
  for (size_t i = 0; i < size; ++i) {
    hash ^= static_cast<unsigned char>(data[i]);
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

class Writer {
 public:
  template <typename T>
  void pod(T value) {
    buffer_.append(reinterpret_cast<const char*>(&value), sizeof(T));
  }
  void str(const std::string& s) {
    pod(static_cast<uint32_t>(s.size()));
    buffer_.append(s);
  }
  void tensor(const torch::Tensor& t) {
    auto c = t.detach().cpu().contiguous();
    pod(static_cast<uint8_t>(c.scalar_type()));
    pod(static_cast<uint32_t>(c.dim()));
    for (auto d : c.sizes()) pod(static_cast<int64_t>(d));
    buffer_.append(static_cast<const char*>(c.data_ptr()), c.nbytes());
  }
  std::string& bytes() { return buffer_; }

 private:
  std::string buffer_;
};

class Reader {
 public:
  Reader(const std::string& data, size_t end) : data_(data), end_(end) {}

  template <typename T>
  T pod() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  std::string str() {
    const auto n = pod<uint32_t>();
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  torch::Tensor tensor() {
    const auto type = static_cast<torch::ScalarType>(pod<uint8_t>());
    if (type != torch::kFloat32 && type != torch::kFloat64 && type != torch::kInt64) {
      throw CheckpointError("unsupported tensor dtype code " + std::to_string(int(type)));
    }
    const auto ndim = pod<uint32_t>();
    if (ndim > 8) throw CheckpointError("implausible tensor rank " + std::to_string(ndim));
    std::vector<int64_t> dims;
    for (uint32_t i = 0; i < ndim; ++i) {
      dims.push_back(pod<int64_t>());
      if (dims.back() < 0) throw CheckpointError("negative tensor dimension");
    }
    auto t = torch::empty(dims, torch::TensorOptions().dtype(type));
    need(t.nbytes());
    std::memcpy(t.data_ptr(), data_.data() + pos_, t.nbytes());
    pos_ += t.nbytes();
    return t;
  }
  bool done() const { return pos_ == end_; }

 private:
  void need(size_t n) const {
    if (n > end_ - pos_) throw CheckpointError("checkpoint truncated");
  }
  const std::string& data_;
  size_t end_;
  size_t pos_ = 0;
};

struct Contents {
  uint64_t hash = 0;
  std::string config_text;
  TrainState state;
  std::vector<std::pair<std::string, torch::Tensor>> tensors;
  bool has_optimizer = false;
  struct Moment {
    int64_t step;
    torch::Tensor exp_avg, exp_avg_sq;
  };
  std::vector<Moment> moments;
};

std::vector<std::pair<std::string, torch::Tensor>> named_state(torch::nn::Module& model) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& item : model.named_parameters()) out.emplace_back(item.key(), item.value());
  for (const auto& item : model.named_buffers()) out.emplace_back(item.key(), item.value());
  return out;
}

Contents parse(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto min_size = sizeof(kMagic) + sizeof(uint32_t) + sizeof(uint64_t);
  if (data.size() < min_size) throw CheckpointError("checkpoint truncated: " + path.string());
  if (std::memcmp(data.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("not a checkpoint (bad magic): " + path.string());
  }
  const auto body = data.size() - sizeof(uint64_t);
  uint64_t stored;
  std::memcpy(&stored, data.data() + body, sizeof(stored));
  if (stored != fnv1a(data.data(), body)) {
    throw CheckpointError("checkpoint corrupt or truncated (checksum mismatch): " + path.string());
  }

  Reader r(data, body);
  for (size_t i = 0; i < sizeof(kMagic); ++i) r.pod<char>();
  const auto version = r.pod<uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  Contents c;
  c.hash = r.pod<uint64_t>();
  c.config_text = r.str();
  c.state.step = r.pod<int64_t>();
  c.state.seed = r.pod<uint64_t>();
  c.state.lr = r.pod<double>();
  const auto count = r.pod<uint32_t>();
  for (uint32_t i = 0; i < count; ++i) {
    auto name = r.str();
    c.tensors.emplace_back(std::move(name), r.tensor());
  }
  c.has_optimizer = r.pod<uint8_t>() != 0;
  if (c.has_optimizer) {
    for (uint32_t i = 0; i < count; ++i) {
      Contents::Moment m;
      m.step = r.pod<int64_t>();
      m.exp_avg = r.tensor();
      m.exp_avg_sq = r.tensor();
      c.moments.push_back(std::move(m));
    }
  }
  if (!r.done()) throw CheckpointError("trailing bytes in checkpoint " + path.string());
  return c;
}

ModelConfig stored_config(const Contents& c) {
  try {
    return ModelConfig::from_text(c.config_text);
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint config unreadable: ") + e.what());
  }
}

}  // namespace

void save_checkpoint(const fs::path& path, const ModelConfig& cfg, torch::nn::Module& model,
                     const TrainState& state, torch::optim::Adam* optimizer) {
  Writer w;
  w.bytes().append(kMagic, sizeof(kMagic));
  w.pod(kCheckpointVersion);
  w.pod(cfg.hash());
  w.str(cfg.to_text());
  w.pod(state.step);
  w.pod(state.seed);
  w.pod(state.lr);
  const auto tensors = named_state(model);
  w.pod(static_cast<uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.str(name);
    w.tensor(t);
  }
  w.pod(static_cast<uint8_t>(optimizer != nullptr));
  if (optimizer != nullptr) {
    const auto& states = optimizer->state();
    for (const auto& [name, t] : tensors) {
      auto it = states.find(t.unsafeGetTensorImpl());
      if (it == states.end()) {
        w.pod(int64_t{0});
        w.tensor(torch::zeros_like(t));
        w.tensor(torch::zeros_like(t));
        continue;
      }
      const auto& s = static_cast<const torch::optim::AdamParamState&>(*it->second);
      w.pod(s.step());
      w.tensor(s.exp_avg());
      w.tensor(s.exp_avg_sq());
    }
  }
  w.pod(fnv1a(w.bytes().data(), w.bytes().size()));

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto temp = path;
  temp += ".tmp";
  {
    std::ofstream out(temp, std::ios::binary | std::ios::trunc);
    out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
    out.flush();
    if (!out) {
      std::error_code ignored;
      fs::remove(temp, ignored);
      throw CheckpointError("failed writing checkpoint " + temp.string());
    }
  }
  fs::rename(temp, path);
}

TrainState load_checkpoint(const fs::path& path, const ModelConfig& cfg, torch::nn::Module& model,
                           torch::optim::Adam* optimizer) {
  const auto c = parse(path);
  if (c.hash != cfg.hash()) {
    const auto stored = stored_config(c);
    std::string fields;
    for (const auto& key : ModelConfig::diff(stored, cfg)) {
      fields += (fields.empty() ? "" : ", ") + key;
    }
    throw ConfigMismatchError("checkpoint " + path.string() +
                              " was saved with a different model config; differing fields: " +
                              (fields.empty() ? "(hash only)" : fields));
  }
  auto targets = named_state(model);
  if (targets.size() != c.tensors.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(c.tensors.size()) +
                          " tensors, model has " + std::to_string(targets.size()));
  }
  for (size_t i = 0; i < targets.size(); ++i) {
    const auto& [name, target] = targets[i];
    const auto& [stored_name, stored] = c.tensors[i];
    if (name != stored_name || target.sizes() != stored.sizes() ||
        target.scalar_type() != stored.scalar_type()) {
      throw CheckpointError("checkpoint tensor '" + stored_name + "' " +
                            c10::str(stored.sizes()) + " does not match model tensor '" + name +
                            "' " + c10::str(target.sizes()));
    }
  }
  if (optimizer != nullptr && !c.has_optimizer) {
    throw CheckpointError("checkpoint has no optimizer state: " + path.string());
  }

  torch::NoGradGuard guard;
  for (size_t i = 0; i < targets.size(); ++i) targets[i].second.copy_(c.tensors[i].second);
  if (optimizer != nullptr) {
    auto& states = optimizer->state();
    for (size_t i = 0; i < targets.size(); ++i) {
      const auto& t = targets[i].second;
      const auto& m = c.moments[i];
      if (m.step == 0) {
        states.erase(t.unsafeGetTensorImpl());
        continue;
      }
      auto s = std::make_unique<torch::optim::AdamParamState>();
      s->step(m.step);
      s->exp_avg(m.exp_avg.clone());
      s->exp_avg_sq(m.exp_avg_sq.clone());
      states[t.unsafeGetTensorImpl()] = std::move(s);
    }
  }
  return c.state;
}

ModelConfig read_checkpoint_config(const fs::path& path) { return stored_config(parse(path)); }

}  // namespace mphm
