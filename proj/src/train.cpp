#include "mphm/train.hpp"

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "mphm/errors.hpp"

namespace mphm {
namespace fs = std::filesystem;
namespace {

std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

std::string format_double(double v) {
  // Shortest text that parses back to the same value.
  char buffer[32];
  const auto result = std::to_chars(buffer, buffer + sizeof buffer, v);
  return std::string(buffer, result.ptr);
}

double to_double(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    const auto t = trim(value);
    const double v = std::stod(t, &used);
    if (used == t.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as a number");
}

int64_t to_int(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    const auto t = trim(value);
    const long long v = std::stoll(t, &used);
    if (used == t.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as an integer");
}

uint64_t to_uint(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    const auto t = trim(value);
    if (!t.empty() && t[0] != '-') {
      const unsigned long long v = std::stoull(t, &used);
      if (used == t.size()) return v;
    }
  } catch (const std::exception&) {
  }
  throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as an unsigned integer");
}

bool to_bool(const std::string& key, const std::string& value) {
  const auto t = trim(value);
  if (t == "true" || t == "1") return true;
  if (t == "false" || t == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + value + "'");
}

void set_lr(torch::optim::Adam& optimizer, double lr) {
  for (auto& group : optimizer.param_groups()) {
    static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
  }
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  loss.validate();
  if (!(lr > 0) || !(lr_min >= 0) || lr_min > lr) {
    throw ConfigError("learning rates must satisfy 0 <= lr_min <= lr and lr > 0");
  }
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(grad_clip > 0)) throw ConfigError("grad_clip must be > 0");
  if (steps < 1) throw ConfigError("steps must be >= 1");
  if (crop < 1 || batch < 1) throw ConfigError("crop and batch must be >= 1");
  if (log_every < 1 || checkpoint_every < 0) throw ConfigError("invalid logging cadence");
}

std::vector<std::pair<std::string, std::string>> RunConfig::entries() const {
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  std::vector<std::pair<std::string, std::string>> out{
      {"lr", format_double(lr)},
      {"lr_min", format_double(lr_min)},
      {"beta1", format_double(beta1)},
      {"beta2", format_double(beta2)},
      {"grad_clip", format_double(grad_clip)},
      {"steps", std::to_string(steps)},
      {"crop", std::to_string(crop)},
      {"batch", std::to_string(batch)},
      {"augment", b(augment)},
      {"seed", std::to_string(seed)},
      {"log_every", std::to_string(log_every)},
      {"checkpoint_every", std::to_string(checkpoint_every)},
      {"data_dir", data_dir},
      {"eval_dir", eval_dir},
      {"out_dir", out_dir},
      {"lambda_fcr", format_double(loss.lambda_fcr)},
      {"n_negatives", std::to_string(loss.n_negatives)},
      {"epsilon", format_double(loss.epsilon)},
  };
  for (auto& entry : model.entries()) out.push_back(std::move(entry));
  return out;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (key == "lr") lr = to_double(key, value);
  else if (key == "lr_min") lr_min = to_double(key, value);
  else if (key == "beta1") beta1 = to_double(key, value);
  else if (key == "beta2") beta2 = to_double(key, value);
  else if (key == "grad_clip") grad_clip = to_double(key, value);
  else if (key == "steps") steps = to_int(key, value);
  else if (key == "crop") crop = to_int(key, value);
  else if (key == "batch") batch = to_int(key, value);
  else if (key == "augment") augment = to_bool(key, value);
  else if (key == "seed") seed = to_uint(key, value);
  else if (key == "log_every") log_every = to_int(key, value);
  else if (key == "checkpoint_every") checkpoint_every = to_int(key, value);
  else if (key == "data_dir") data_dir = trim(value);
  else if (key == "eval_dir") eval_dir = trim(value);
  else if (key == "out_dir") out_dir = trim(value);
  else if (key == "lambda_fcr") loss.lambda_fcr = to_double(key, value);
  else if (key == "n_negatives") loss.n_negatives = to_int(key, value);
  else if (key == "epsilon") loss.epsilon = to_double(key, value);
  else model.set(key, value);
}

void RunConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ConfigError("override '" + assignment + "' is not key=value");
  }
  set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

std::string RunConfig::to_text() const {
  std::ostringstream out;
  for (const auto& [k, v] : entries()) out << k << " = " << v << "\n";
  return out.str();
}

RunConfig RunConfig::from_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(number) + " is not key = value: " + line);
    }
    cfg.set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return cfg;
}

RunConfig RunConfig::from_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream text;
  text << in.rdbuf();
  return from_text(text.str());
}

RunConfig resolve_run_config(const fs::path& file, const std::vector<std::string>& overrides) {
  RunConfig cfg = file.empty() ? RunConfig{} : RunConfig::from_file(file);
  if (const char* env = std::getenv("MPHM_SEED"); env != nullptr && *env != '\0') {
    cfg.seed = to_uint("MPHM_SEED", env);
  }
  for (const auto& o : overrides) cfg.apply_override(o);
  cfg.validate();
  return cfg;
}

double cosine_lr(double lr0, double lr_min, int64_t step, int64_t steps) {
  if (steps <= 1) return lr0;
  const double t = static_cast<double>(std::clamp<int64_t>(step, 0, steps - 1)) /
                   static_cast<double>(steps - 1);
  return lr_min + (lr0 - lr_min) * (1.0 + std::cos(std::numbers::pi * t)) / 2.0;
}

MetricsLog::MetricsLog(const fs::path& csv) {
  if (csv.empty()) return;
  if (csv.has_parent_path()) fs::create_directories(csv.parent_path());
  out_.open(csv, std::ios::app);
  if (!out_) throw DataError("cannot open metrics log " + csv.string());
  if (fs::file_size(csv) == 0) out_ << "step,lr,loss,l_rec,l_fcr,psnr,seconds\n";
}

void MetricsLog::append(const StepRecord& r) {
  if (!records_.empty() && r.step <= records_.back().step) {
    throw Error("metrics log steps must increase");
  }
  records_.push_back(r);
  if (out_.is_open()) {
    out_ << r.step << ',' << std::setprecision(9) << r.lr << ',' << r.loss << ',' << r.rec << ','
         << r.fcr << ',' << r.psnr << ',' << r.seconds << '\n';
    out_.flush();
  }
}

Mphm build_model(const ModelConfig& cfg, uint64_t seed) {
  torch::manual_seed(seed);
  return Mphm(cfg);
}

TrainResult train(const RunConfig& cfg, const PairedDataset& data, Mphm model,
                  const std::function<void(const StepRecord&)>& on_step) {
  cfg.validate();
  if (data.empty()) throw DataError("training dataset is empty");
  if (!model) model = build_model(cfg.model, cfg.seed);
  model->train();

  torch::optim::Adam optimizer(
      model->parameters(),
      torch::optim::AdamOptions(cfg.lr).betas({cfg.beta1, cfg.beta2}));
  BatchIterator batches(data, BatchOptions{cfg.crop, cfg.batch, cfg.augment, true, cfg.seed});
  std::mt19937_64 negative_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

  TrainResult result;
  const bool write = !cfg.out_dir.empty();
  const fs::path out_dir = cfg.out_dir;
  MetricsLog log(write ? out_dir / "metrics.csv" : fs::path());
  if (write) {
    fs::create_directories(out_dir);
    std::ofstream(out_dir / "config.txt") << cfg.to_text();
    result.checkpoint = out_dir / "last.ckpt";
  }

  const auto start = std::chrono::steady_clock::now();
  TrainState state{0, cfg.seed, cfg.lr};
  for (int64_t step = 0; step < cfg.steps; ++step) {
    const double lr = cosine_lr(cfg.lr, cfg.lr_min, step, cfg.steps);
    set_lr(optimizer, lr);
    auto batch = batches.next();
    auto negatives = sample_negatives(batch.rainy, cfg.loss.n_negatives, negative_rng);

    optimizer.zero_grad();
    auto pred = model->forward(batch.rainy);
    auto rec = l_rec(pred, batch.clean);
    auto fcr = cfg.loss.lambda_fcr > 0 ? l_fcr(pred, batch.clean, negatives, cfg.loss)
                                        : torch::zeros({});
    auto loss = rec + cfg.loss.lambda_fcr * fcr;
    if (!std::isfinite(loss.item<double>())) {
      throw NumericError("non-finite loss at step " + std::to_string(step) +
                         (write ? "; last good checkpoint kept at " + result.checkpoint.string()
                                : std::string()));
    }
    loss.backward();
    const double norm =
        torch::nn::utils::clip_grad_norm_(model->parameters(), cfg.grad_clip);
    if (!std::isfinite(norm)) {
      throw NumericError("non-finite gradient norm at step " + std::to_string(step));
    }
    optimizer.step();

    state = TrainState{step + 1, cfg.seed, lr};
    StepRecord record{step,
                      lr,
                      loss.item<double>(),
                      rec.item<double>(),
                      fcr.item<double>(),
                      psnr(pred.detach().clamp(0.0, 1.0), batch.clean),
                      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
                          .count()};
    result.records.push_back(record);
    if (step % cfg.log_every == 0 || step + 1 == cfg.steps) log.append(record);
    if (on_step) on_step(record);
    const bool last = step + 1 == cfg.steps;
    if (write && (last || (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0))) {
      save_checkpoint(result.checkpoint, cfg.model, *model, state, &optimizer);
    }
  }
  result.state = state;
  return result;
}

}  // namespace mphm
