#include "mphm/harness.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <set>

#include "mphm/checkpoint.hpp"
#include "mphm/complexity.hpp"
#include "mphm/errors.hpp"
#include "mphm/objective.hpp"

namespace mphm {
namespace fs = std::filesystem;
namespace {

std::string join(const std::vector<std::string>& items, const char* sep) {
  std::string out;
  for (const auto& item : items) out += (out.empty() ? "" : sep) + item;
  return out;
}

}  // namespace

EvalSummary evaluate(Mphm& model, const PairedDataset& data, const fs::path& csv) {
  if (data.empty()) throw DataError("evaluation dataset is empty");
  torch::NoGradGuard guard;
  model->eval();
  EvalSummary summary;
  for (size_t i = 0; i < data.size(); ++i) {
    const auto sample = data.get(i);
    auto pred = model->forward(sample.rainy.unsqueeze(0), true).squeeze(0);
    summary.rows.push_back({sample.id, psnr(pred, sample.clean), ssim(pred, sample.clean)});
    summary.mean_psnr += summary.rows.back().psnr;
    summary.mean_ssim += summary.rows.back().ssim;
  }
  summary.mean_psnr /= static_cast<double>(summary.rows.size());
  summary.mean_ssim /= static_cast<double>(summary.rows.size());
  if (!csv.empty()) {
    if (csv.has_parent_path()) fs::create_directories(csv.parent_path());
    std::ofstream out(csv);
    if (!out) throw DataError("cannot write " + csv.string());
    out << "image_id,psnr,ssim\n" << std::setprecision(10);
    for (const auto& row : summary.rows) out << row.id << ',' << row.psnr << ',' << row.ssim << '\n';
    out << "mean," << summary.mean_psnr << ',' << summary.mean_ssim << '\n';
  }
  return summary;
}

Mphm load_model(const fs::path& checkpoint) {
  const auto cfg = read_checkpoint_config(checkpoint);
  Mphm model(cfg);
  load_checkpoint(checkpoint, cfg, *model);
  model->eval();
  return model;
}

void infer_file(Mphm& model, const fs::path& in, const fs::path& out) {
  const auto image = read_png(in);
  torch::NoGradGuard guard;
  model->eval();
  write_png(out, model->forward(image.unsqueeze(0), true));
}

std::vector<std::string> ablation_axis_keys(const std::string& axis) {
  if (axis == "hmm_branches") return {"ffcm_enabled", "dw_enabled"};
  if (axis == "branch_fusion") return {"branch_fusion"};
  if (axis == "prior_injection") return {"inject_visual", "inject_text"};
  if (axis == "priors_fusion") return {"prior_fusion"};
  throw ConfigError("unknown ablation axis '" + axis +
                    "' (expected hmm_branches, branch_fusion, prior_injection or priors_fusion)");
}

std::vector<AblationVariant> ablation_variants(const RunConfig& base, const std::string& axis) {
  const auto keys = ablation_axis_keys(axis);
  std::vector<std::pair<std::string, std::vector<std::pair<std::string, std::string>>>> table;
  if (axis == "hmm_branches") {
    table = {{"no_ffcm", {{"ffcm_enabled", "false"}, {"dw_enabled", "true"}}},
             {"no_dw", {{"ffcm_enabled", "true"}, {"dw_enabled", "false"}}},
             {"full", {{"ffcm_enabled", "true"}, {"dw_enabled", "true"}}}};
  } else if (axis == "branch_fusion") {
    table = {{"addition", {{"branch_fusion", "addition"}}},
             {"cross_attention", {{"branch_fusion", "cross_attention"}}},
             {"concat_conv", {{"branch_fusion", "concat_conv"}}}};
  } else if (axis == "prior_injection") {
    table = {{"none", {{"inject_visual", "false"}, {"inject_text", "false"}}},
             {"visual", {{"inject_visual", "true"}, {"inject_text", "false"}}},
             {"text", {{"inject_visual", "false"}, {"inject_text", "true"}}},
             {"both", {{"inject_visual", "true"}, {"inject_text", "true"}}}};
  } else {
    table = {{"addition", {{"prior_fusion", "addition"}}},
             {"concat", {{"prior_fusion", "concat"}}},
             {"joint_cross_attention", {{"prior_fusion", "joint_cross_attention"}}},
             {"hierarchical", {{"prior_fusion", "hierarchical"}}}};
  }

  const std::set<std::string> allowed(keys.begin(), keys.end());
  std::vector<AblationVariant> variants;
  for (const auto& [name, settings] : table) {
    AblationVariant v{name, base};
    for (const auto& [k, value] : settings) v.config.set(k, value);
    v.config.validate();
    for (const auto& key : ModelConfig::diff(base.model, v.config.model)) {
      if (!allowed.contains(key)) {
        throw StructuralError("ablation variant '" + name + "' changes '" + key +
                              "' outside axis " + axis);
      }
    }
    if (v.config.seed != base.seed || v.config.steps != base.steps) {
      throw StructuralError("ablation variant '" + name + "' changed the seed or budget");
    }
    variants.push_back(std::move(v));
  }
  return variants;
}

std::vector<AblationRow> ablate(const RunConfig& base, const std::string& axis,
                                const PairedDataset& train_data, const PairedDataset& eval_data,
                                const fs::path& out_dir) {
  const auto keys = ablation_axis_keys(axis);
  std::vector<AblationRow> rows;
  for (auto& variant : ablation_variants(base, axis)) {
    auto cfg = variant.config;
    cfg.out_dir = out_dir.empty() ? std::string() : (out_dir / variant.name).string();
    auto model = build_model(cfg.model, cfg.seed);
    train(cfg, train_data, model);
    const auto summary =
        evaluate(model, eval_data, out_dir.empty() ? fs::path() : out_dir / variant.name / "eval.csv");
    const auto cost = count_params_flops(cfg.model);
    AblationRow row{variant.name, {}, summary.mean_psnr, summary.mean_ssim,
                    static_cast<double>(cost.params) / 1e6, static_cast<double>(cost.macs) / 1e9,
                    cfg.seed};
    for (const auto& [k, v] : cfg.model.entries()) {
      if (std::find(keys.begin(), keys.end(), k) != keys.end()) row.settings.emplace_back(k, v);
    }
    rows.push_back(std::move(row));
  }

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream md(out_dir / "ablation.md");
    std::ofstream csv(out_dir / "ablation.csv");
    md << "| Variant | " << join(keys, " | ") << " | PSNR | SSIM | Params (M) | GMACs | Seed |\n|---|";
    for (size_t i = 0; i < keys.size() + 5; ++i) md << "---|";
    md << "\n" << std::fixed;
    csv << "variant," << join(keys, ",") << ",psnr,ssim,params_m,gmacs,seed\n";
    for (const auto& row : rows) {
      md << "| " << row.name << " | ";
      csv << row.name << ',';
      for (const auto& [k, v] : row.settings) {
        md << v << " | ";
        csv << v << ',';
      }
      md << std::setprecision(2) << row.psnr << " | " << std::setprecision(4) << row.ssim << " | "
         << std::setprecision(3) << row.params_m << " | " << std::setprecision(2) << row.gmacs
         << " | " << row.seed << " |\n";
      csv << std::setprecision(6) << row.psnr << ',' << row.ssim << ',' << row.params_m << ','
          << row.gmacs << ',' << row.seed << '\n';
    }
  }
  return rows;
}

torch::Tensor residual_heatmap(const torch::Tensor& pred, const torch::Tensor& gt) {
  if (pred.sizes() != gt.sizes()) {
    throw StructuralError("heatmap inputs differ: " + c10::str(pred.sizes()) + " vs " +
                          c10::str(gt.sizes()));
  }
  auto p = pred.dim() == 4 ? pred.squeeze(0) : pred;
  auto g = gt.dim() == 4 ? gt.squeeze(0) : gt;
  auto d = (p.to(torch::kFloat64) - g.to(torch::kFloat64)).abs().sum(0);
  const double peak = d.max().item<double>();
  auto t = peak > 0 ? d / peak : torch::zeros_like(d);
  auto r = (3 * t).clamp(0, 1);
  auto gr = (3 * t - 1).clamp(0, 1);
  auto b = (3 * t - 2).clamp(0, 1);
  return torch::stack({r, gr, b}).to(torch::kFloat32);
}

torch::Tensor pca_features(const torch::Tensor& feature) {
  auto f = feature.dim() == 4 ? feature.squeeze(0) : feature;
  if (f.dim() != 3) throw StructuralError("pca_features expects (C, H, W)");
  const auto c = f.size(0);
  const auto h = f.size(1);
  const auto w = f.size(2);
  auto x = f.to(torch::kFloat64).reshape({c, h * w}).t();  // (HW, C)
  x = x - x.mean(0, true);
  auto cov = torch::matmul(x.t(), x) / static_cast<double>(std::max<int64_t>(1, h * w - 1));
  auto [values, vectors] = torch::linalg_eigh(cov);  // ascending
  const auto k = std::min<int64_t>(3, c);
  auto top = vectors.flip({1}).slice(1, 0, k);
  auto proj = torch::matmul(x, top);  // (HW, k)

  std::vector<torch::Tensor> channels;
  double lead_range = 0;
  for (int64_t i = 0; i < 3; ++i) {
    if (i >= k) {
      channels.push_back(torch::zeros({h, w}, torch::kFloat64));
      continue;
    }
    auto comp = proj.select(1, i);
    const double lo = comp.min().item<double>();
    const double range = comp.max().item<double>() - lo;
    if (i == 0) lead_range = range;
    if (range <= 1e-6 * lead_range || range == 0.0) {
      channels.push_back(torch::zeros({h, w}, torch::kFloat64));
    } else {
      channels.push_back(((comp - lo) / range).reshape({h, w}));
    }
  }
  return torch::stack(channels).to(torch::kFloat32);
}

torch::Tensor capture_feature(Mphm& model, const torch::Tensor& image, const std::string& layer) {
  const auto names = model->tap_names();
  if (std::find(names.begin(), names.end(), layer) == names.end()) {
    throw StructuralError("unknown layer '" + layer + "'; valid: " + join(names, ", "));
  }
  torch::NoGradGuard guard;
  model->eval();
  FeatureTaps taps;
  model->taps = &taps;
  try {
    model->forward(image.dim() == 3 ? image.unsqueeze(0) : image, true);
  } catch (...) {
    model->taps = nullptr;
    throw;
  }
  model->taps = nullptr;
  return taps.at(layer).squeeze(0);
}

}  // namespace mphm
