/*
 * Copyright 2026 The SSOD Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Run configuration, training loop, evaluation and ablation drivers.
//
// Everything here is a pure function of (config, input files, seed): the
// training log, checkpoints and metrics CSVs are reproducible byte for byte.
// Wall-clock timings only go to run_summary.json.

#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "ssod/adamw.hpp"
#include "ssod/baselines.hpp"
#include "ssod/datagen.hpp"
#include "ssod/error.hpp"
#include "ssod/metrics.hpp"
#include "ssod/nets.hpp"
#include "ssod/objective.hpp"
#include "ssod/ops.hpp"
#include "ssod/rng.hpp"
#include "ssod/tensor.hpp"

namespace ssod {

namespace fs = std::filesystem;

inline const std::vector<std::string>& all_methods() {
  static const std::vector<std::string> m{"ssod", "msp", "energy", "maxlogit", "react+energy", "mahalanobis", "knn"};
  return m;
}

inline bool needs_bank(const std::string& method) {
  return method == "react+energy" || method == "mahalanobis" || method == "knn";
}

struct RunConfig {
  std::string manifest;
  std::string train_split = "train";
  std::string val_split = "val";
  std::string ood_val_split;  // empty: select checkpoints by val ID ACC
  std::vector<std::string> ood_splits{"ood-unseen", "ood-background"};
  std::vector<std::size_t> widths{3, 32, 64, 128, 128};
  std::size_t kernel = 3;
  double gamma = 0.95;
  double alpha = 1.0;
  std::string scheme = "LWB";
  std::optional<double> lw_weight;
  double lr = 1e-4;
  std::size_t lr_halving_epochs = 30;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  std::string output_dir = "ssod-run";
  std::vector<std::string> methods = all_methods();
  std::string bank;  // feature bank index for react+energy / mahalanobis / knn
  std::size_t knn_k = 10;
  double react_percentile = 90.0;
  std::size_t histogram_bins = 50;
  std::vector<double> ablation_alphas{0.0, 0.5, 0.7, 1.0, 1.2, 1.5};
  std::vector<std::string> ablation_schemes{"LW", "DR", "LWB"};

  /// Range checks that do not touch the file system.
  void validate() const {
    check_gamma(gamma);
    if (!(alpha >= 0.0)) throw ConfigError("alpha must be nonnegative");
    parse_scheme(scheme);
    if (lw_weight && !(*lw_weight > 0.0)) throw ConfigError("lw_weight must be positive");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (lr_halving_epochs == 0) throw ConfigError("lr_halving_epochs must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be nonnegative");
    if (widths.size() < 2 || widths.front() != 3) throw ConfigError("widths must start at 3 and name at least one block");
    if (kernel % 2 == 0) throw ConfigError("kernel must be odd");
    if (knn_k == 0) throw ConfigError("knn_k must be positive");
    if (histogram_bins < 2) throw ConfigError("histogram_bins must be at least 2");
    for (const auto& m : methods) {
      if (std::find(all_methods().begin(), all_methods().end(), m) == all_methods().end()) {
        throw ConfigError("unknown method '" + m + "'");
      }
    }
    for (const auto& s : ablation_schemes) parse_scheme(s);
  }

  void check_paths() const {
    if (manifest.empty()) throw ConfigError("config: 'manifest' is required");
    if (!fs::exists(manifest)) throw ConfigError("config: manifest not found: " + manifest);
    if (!bank.empty() && !fs::exists(bank)) throw ConfigError("config: feature bank not found: " + bank);
  }
};

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j{{"manifest", c.manifest},
                   {"train_split", c.train_split},
                   {"val_split", c.val_split},
                   {"ood_val_split", c.ood_val_split},
                   {"ood_splits", c.ood_splits},
                   {"widths", c.widths},
                   {"kernel", c.kernel},
                   {"gamma", c.gamma},
                   {"alpha", c.alpha},
                   {"scheme", c.scheme},
                   {"lr", c.lr},
                   {"lr_halving_epochs", c.lr_halving_epochs},
                   {"epochs", c.epochs},
                   {"batch_size", c.batch_size},
                   {"weight_decay", c.weight_decay},
                   {"seed", c.seed},
                   {"output_dir", c.output_dir},
                   {"methods", c.methods},
                   {"bank", c.bank},
                   {"knn_k", c.knn_k},
                   {"react_percentile", c.react_percentile},
                   {"histogram_bins", c.histogram_bins},
                   {"ablation_alphas", c.ablation_alphas},
                   {"ablation_schemes", c.ablation_schemes}};
  j["lw_weight"] = c.lw_weight ? nlohmann::json(*c.lw_weight) : nlohmann::json(nullptr);
  return j;
}

/// Fills a RunConfig from JSON over the defaults. Unknown keys are rejected.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  const auto known = to_json(c);
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError("config: unknown key '" + key + "'");
  }
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("manifest", c.manifest);
    get("train_split", c.train_split);
    get("val_split", c.val_split);
    get("ood_val_split", c.ood_val_split);
    get("ood_splits", c.ood_splits);
    get("widths", c.widths);
    get("kernel", c.kernel);
    get("gamma", c.gamma);
    get("alpha", c.alpha);
    get("scheme", c.scheme);
    get("lr", c.lr);
    get("lr_halving_epochs", c.lr_halving_epochs);
    get("epochs", c.epochs);
    get("batch_size", c.batch_size);
    get("weight_decay", c.weight_decay);
    get("seed", c.seed);
    get("output_dir", c.output_dir);
    get("methods", c.methods);
    get("bank", c.bank);
    get("knn_k", c.knn_k);
    get("react_percentile", c.react_percentile);
    get("histogram_bins", c.histogram_bins);
    get("ablation_alphas", c.ablation_alphas);
    get("ablation_schemes", c.ablation_schemes);
    if (j.contains("lw_weight") && !j.at("lw_weight").is_null()) c.lw_weight = j.at("lw_weight").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

inline RunConfig load_run_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config file not found: " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

namespace detail {

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

inline std::string fixed(double v, int digits = 6) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
}

}  // namespace detail

/// Per-image outputs of one forward pass over a dataset.
struct ForwardOutputs {
  std::size_t n = 0, classes = 0, channels = 0;
  std::vector<float> features;  // GAP(h(x)), [N][C]
  std::vector<float> logits;    // [N][M]
  std::vector<float> factor;    // sigmoid(f_ood(GAP)), [N]
  std::vector<int> predictions;
};

inline ForwardOutputs run_forward(const SsodModel& model, const Tensor& images, std::size_t batch = 100) {
  NoGradGuard no_grad;
  ForwardOutputs out;
  out.n = images.dim(0);
  out.classes = model.config().num_classes;
  out.channels = model.config().feature_channels();
  for (std::size_t start = 0; start < out.n; start += batch) {
    const std::size_t end = std::min(out.n, start + batch);
    const Tensor fm = model.forward_features(data::slice_images(images, start, end));
    const Tensor pooled = gap(fm);
    const Tensor logits = linear(pooled, model.cls_weight(), model.cls_bias());
    const auto f = ood_factor(model, fm);
    out.features.insert(out.features.end(), pooled.data().begin(), pooled.data().end());
    out.logits.insert(out.logits.end(), logits.data().begin(), logits.data().end());
    out.factor.insert(out.factor.end(), f.begin(), f.end());
  }
  for (std::size_t i = 0; i < out.n; ++i) {
    const auto row = std::span<const float>(out.logits).subspan(i * out.classes, out.classes);
    out.predictions.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
  }
  return out;
}

/// Scores of one method for every image (higher = more ID).
inline std::vector<double> method_scores(const std::string& method, const SsodModel& model, const ForwardOutputs& fw,
                                         const FeatureBank* bank, std::size_t knn_k) {
  if (needs_bank(method) && bank == nullptr) {
    throw ConfigError("method '" + method + "' needs a feature bank; run `ssod fit-bank` first and pass --bank");
  }
  std::vector<double> out(fw.n);
  const auto logits = std::span<const float>(fw.logits);
  const auto feats = std::span<const float>(fw.features);
  for (std::size_t i = 0; i < fw.n; ++i) {
    const auto z = logits.subspan(i * fw.classes, fw.classes);
    const auto f = feats.subspan(i * fw.channels, fw.channels);
    if (method == "ssod") out[i] = fw.factor[i];
    else if (method == "msp") out[i] = msp_score(z);
    else if (method == "energy") out[i] = energy_score(z);
    else if (method == "maxlogit") out[i] = maxlogit_score(z);
    else if (method == "mahalanobis") out[i] = bank->mahalanobis_score(f);
    else if (method == "knn") out[i] = bank->knn_score(f, knn_k);
    else if (method == "react+energy") {
      NoGradGuard no_grad;
      const Tensor clipped({1, fw.channels}, react_clip(f, bank->react_threshold()));
      const Tensor zc = linear(clipped, model.cls_weight(), model.cls_bias());
      out[i] = energy_score(zc.data());
    } else {
      throw ConfigError("unknown method '" + method + "'");
    }
  }
  return out;
}

struct MetricRow {
  std::string method, dataset;
  std::uint64_t seed = 0;
  std::size_t n_id = 0, n_ood = 0;
  double fpr95 = 0, auroc = 0, id_acc = 0;
};

struct EvalResult {
  std::vector<MetricRow> rows;
  double id_acc = 0.0;

  const MetricRow& find(const std::string& method, const std::string& dataset) const {
    for (const auto& r : rows) {
      if (r.method == method && r.dataset == dataset) return r;
    }
    throw ConfigError("no metrics row for " + method + " on " + dataset);
  }
};

inline std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::ostringstream os;
  std::set<std::pair<std::size_t, std::size_t>> counts;
  for (const auto& r : rows) counts.insert({r.n_id, r.n_ood});
  os << "# equalized counts:";
  for (const auto& [a, b] : counts) os << " id=" << a << " ood=" << b << ';';
  os << '\n';
  os << "method,dataset,seed,n_id,n_ood,fpr95,auroc,id_acc\n";
  for (const auto& r : rows) {
    os << r.method << ',' << r.dataset << ',' << r.seed << ',' << r.n_id << ',' << r.n_ood << ','
       << detail::fixed(r.fpr95) << ',' << detail::fixed(r.auroc) << ',' << detail::fixed(r.id_acc) << '\n';
  }
  return os.str();
}

/// Scores every method on the ID set against each OOD set, with ID/OOD counts
/// equalized by seeded subsampling. Writes metrics.csv plus one histogram
/// CSV/SVG per (method, dataset) when `out_dir` is non-empty.
inline EvalResult evaluate(const SsodModel& model, const data::Dataset& id_set,
                           const std::vector<std::pair<std::string, const data::Dataset*>>& ood_sets,
                           const std::vector<std::string>& methods, std::uint64_t seed, const FeatureBank* bank = nullptr,
                           std::size_t knn_k = 10, std::size_t bins = 50, const fs::path& out_dir = {}) {
  for (const auto& m : methods) {
    if (needs_bank(m) && bank == nullptr) {
      throw ConfigError("method '" + m + "' needs a feature bank; run `ssod fit-bank` first and pass --bank");
    }
  }
  const ForwardOutputs id_fw = run_forward(model, id_set.images);
  EvalResult res;
  res.id_acc = id_accuracy(id_fw.predictions, id_set.labels);
  std::vector<ForwardOutputs> ood_fw;
  for (const auto& [name, ds] : ood_sets) ood_fw.push_back(run_forward(model, ds->images));
  if (!out_dir.empty()) detail::ensure_dir(out_dir);

  for (const auto& m : methods) {
    const auto id_scores = method_scores(m, model, id_fw, bank, knn_k);
    for (std::size_t d = 0; d < ood_sets.size(); ++d) {
      const auto& name = ood_sets[d].first;
      const ScoreSet eq = equalize_counts({id_scores, method_scores(m, model, ood_fw[d], bank, knn_k)}, seed);
      res.rows.push_back({m, name, seed, eq.id_scores.size(), eq.ood_scores.size(), fpr_at_tpr(eq, 0.95), auroc(eq),
                          res.id_acc});
      if (!out_dir.empty()) {
        std::string stem = "hist_" + m + "_" + name;
        std::replace(stem.begin(), stem.end(), '+', '-');
        const Histogram h = confidence_histogram(eq, bins);
        write_histogram_csv(out_dir / (stem + ".csv"), h);
        write_histogram_svg(out_dir / (stem + ".svg"), m + " on " + name, h);
      }
    }
  }
  if (!out_dir.empty()) detail::write_text(out_dir / "metrics.csv", metrics_csv(res.rows));
  return res;
}

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0, cls_loss = 0;
  std::optional<double> ood_loss;
  double id_frac = 0, ood_frac = 0, na_frac = 0;
  double val_acc = 0;
  std::optional<double> val_auroc;
};

inline std::string training_log_csv(const std::vector<EpochLog>& log) {
  std::ostringstream os;
  os << "epoch,lr,cls_loss,ood_loss,id_frac,ood_frac,na_frac,val_acc,val_auroc\n";
  for (const auto& e : log) {
    os << e.epoch << ',' << detail::fmt(e.lr) << ',' << detail::fmt(e.cls_loss) << ','
       << (e.ood_loss ? detail::fmt(*e.ood_loss) : "") << ',' << detail::fmt(e.id_frac) << ',' << detail::fmt(e.ood_frac)
       << ',' << detail::fmt(e.na_frac) << ',' << detail::fmt(e.val_acc) << ','
       << (e.val_auroc ? detail::fmt(*e.val_auroc) : "") << '\n';
  }
  return os.str();
}

struct TrainResult {
  SsodModel best;
  SsodModel last;
  std::size_t best_epoch = 0;
  std::vector<EpochLog> log;
  double seconds = 0.0;
};

/// Datasets a run needs, loaded once and shared read-only between runs.
struct RunData {
  data::Dataset train, val;
  std::optional<data::Dataset> ood_val;
  std::vector<std::pair<std::string, data::Dataset>> ood;

  static RunData load(const RunConfig& cfg, bool with_ood = true) {
    cfg.check_paths();
    RunData d;
    d.train = data::load_dataset(cfg.manifest, cfg.train_split);
    d.val = data::load_dataset(cfg.manifest, cfg.val_split);
    if (!cfg.ood_val_split.empty()) d.ood_val = data::load_dataset(cfg.manifest, cfg.ood_val_split);
    if (with_ood) {
      for (const auto& s : cfg.ood_splits) d.ood.emplace_back(s, data::load_dataset(cfg.manifest, s));
    }
    return d;
  }

  std::vector<std::pair<std::string, const data::Dataset*>> ood_refs() const {
    std::vector<std::pair<std::string, const data::Dataset*>> out;
    for (const auto& [name, ds] : ood) out.emplace_back(name, &ds);
    return out;
  }
};

inline ModelConfig model_config(const RunConfig& cfg, const data::Dataset& train) {
  ModelConfig mc;
  mc.widths = cfg.widths;
  mc.kernel = cfg.kernel;
  mc.num_classes = train.num_classes;
  mc.input_extent = train.images.dim(2);
  return mc;
}

/// Joint training of classifier and OOD head. Writes config.json,
/// train_log.csv, best.json/.ssdt and last.json/.ssdt under output_dir.
/// A non-finite loss or gradient saves last_good.json and throws
/// NumericError.
inline TrainResult train(const RunConfig& cfg, const RunData& data) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path out(cfg.output_dir);
  detail::ensure_dir(out);
  detail::write_text(out / "config.json", to_json(cfg).dump(2) + "\n");

  const BalanceScheme scheme = parse_scheme(cfg.scheme);
  const ModelConfig mc = model_config(cfg, data.train);
  SsodModel model(mc, cfg.seed);
  auto params = model.parameters();
  AdamWState opt(cfg.lr, cfg.weight_decay);
  opt.init<float>(params);

  Rng root(cfg.seed);
  Rng order_rng = root.fork(1);
  Rng sampler_rng = root.fork(2);

  TrainResult res{model.clone(), model.clone(), 0, {}, 0.0};
  double best_key = -1.0;
  const std::size_t n = data.train.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  auto numeric_failure = [&](const std::string& what) {
    model.save(out / "last_good.json");
    detail::write_text(out / "train_log.csv", training_log_csv(res.log));
    throw NumericError(what + "; last good checkpoint saved to " + (out / "last_good.json").string());
  };

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.lr = cfg.lr * std::pow(0.5, static_cast<double>(epoch / cfg.lr_halving_epochs));
    order_rng.shuffle(order);
    double cls_sum = 0.0, ood_sum = 0.0;
    std::size_t batches = 0, ood_batches = 0, n_id = 0, n_ood = 0, n_na = 0;

    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const Tensor x = data::gather_images(data.train.images, idx);
      std::vector<int> y;
      for (auto i : idx) y.push_back(data.train.labels[i]);

      const Tensor fm = model.forward_features(x);
      const Tensor cls = softmax_ce(model.pooled_logits(fm), y);
      const auto labels = label_batch(patch_confidence_map(model, fm), y, cfg.gamma);
      for (const auto& l : labels) {
        n_id += l.id_count;
        n_ood += l.ood_count;
        n_na += l.na_count;
      }
      Tensor loss = cls;
      if (cfg.alpha > 0.0) {
        const auto ood = ood_head_loss(model.ood_patch_logits(fm), labels, scheme, sampler_rng, cfg.lw_weight);
        loss = total_loss(cls, ood.loss, cfg.alpha);
        ood_sum += ood.loss.item();
        ++ood_batches;
      }
      if (!std::isfinite(loss.item())) {
        numeric_failure("non-finite loss at epoch " + std::to_string(epoch + 1));
      }
      cls_sum += cls.item();
      ++batches;

      model.zero_grad();
      backward(loss);
      try {
        adamw_step<float>(params, opt);
      } catch (const NumericError& e) {
        numeric_failure(e.what());
      }
    }

    EpochLog e;
    e.epoch = epoch + 1;
    e.lr = opt.lr;
    e.cls_loss = cls_sum / static_cast<double>(batches);
    if (cfg.alpha > 0.0) e.ood_loss = ood_sum / static_cast<double>(std::max<std::size_t>(ood_batches, 1));
    const double total = static_cast<double>(n_id + n_ood + n_na);
    e.id_frac = static_cast<double>(n_id) / total;
    e.ood_frac = static_cast<double>(n_ood) / total;
    e.na_frac = static_cast<double>(n_na) / total;
    const ForwardOutputs val_fw = run_forward(model, data.val.images);
    e.val_acc = id_accuracy(val_fw.predictions, data.val.labels);
    double key = e.val_acc;
    if (data.ood_val) {
      const ForwardOutputs ood_fw = run_forward(model, data.ood_val->images);
      e.val_auroc = auroc({{val_fw.factor.begin(), val_fw.factor.end()}, {ood_fw.factor.begin(), ood_fw.factor.end()}});
      key = *e.val_auroc;
    }
    res.log.push_back(e);
    // Ties go to the later epoch.
    if (key >= best_key) {
      best_key = key;
      res.best_epoch = e.epoch;
      res.best = model.clone();
      res.best.save(out / "best.json");
    }
    detail::write_text(out / "train_log.csv", training_log_csv(res.log));
  }
  res.last = model.clone();
  res.last.save(out / "last.json");
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  nlohmann::json summary{{"best_epoch", res.best_epoch}, {"train_seconds", res.seconds}};
  detail::write_text(out / "run_summary.json", summary.dump(2) + "\n");
  return res;
}

/// Pooled training features and labels fitted into a FeatureBank.
inline FeatureBank fit_bank(const SsodModel& model, const data::Dataset& train, double react_percentile = 90.0) {
  const ForwardOutputs fw = run_forward(model, train.images);
  return FeatureBank::fit(fw.features, train.labels, model.config().num_classes, -1.0, react_percentile);
}

struct AblationCell {
  double alpha = 0;
  std::string scheme;
  bool ok = false;
  std::string error;
  EvalResult eval;
  std::size_t best_epoch = 0;
};

inline std::string ablation_csv(const std::vector<AblationCell>& cells) {
  std::ostringstream os;
  os << "alpha,scheme,status,method,dataset,fpr95,auroc,id_acc\n";
  for (const auto& c : cells) {
    if (!c.ok) {
      std::string msg = c.error;
      std::replace(msg.begin(), msg.end(), ',', ';');
      std::replace(msg.begin(), msg.end(), '\n', ' ');
      os << detail::fmt(c.alpha) << ',' << c.scheme << ",failed: " << msg << ",,,,,\n";
      continue;
    }
    for (const auto& r : c.eval.rows) {
      os << detail::fmt(c.alpha) << ',' << c.scheme << ",ok," << r.method << ',' << r.dataset << ','
         << detail::fixed(r.fpr95) << ',' << detail::fixed(r.auroc) << ',' << detail::fixed(r.id_acc) << '\n';
    }
  }
  return os.str();
}

/// Worker count from SSOD_THREADS (default 1), capped by the cell count.
inline std::size_t worker_threads(std::size_t cells) {
  std::size_t n = 1;
  if (const char* env = std::getenv("SSOD_THREADS")) {
    try {
      n = static_cast<std::size_t>(std::max(1L, std::stol(env)));
    } catch (const std::exception&) {
      throw ConfigError(std::string("SSOD_THREADS must be a positive integer, got '") + env + "'");
    }
  }
  return std::max<std::size_t>(1, std::min(n, cells));
}

/// One training run per (alpha, scheme) cell with the shared seed; each cell
/// is scored with the logit-only methods and written under
/// output_dir/alpha-<a>_<scheme>. Failed cells are recorded and the grid
/// continues. The merged table goes to output_dir/ablation.csv.
inline std::vector<AblationCell> ablate(const RunConfig& cfg, const RunData& data,
                                        std::vector<std::string> methods = {"ssod", "msp"}) {
  cfg.validate();
  std::vector<AblationCell> cells;
  for (double a : cfg.ablation_alphas) {
    for (const auto& s : cfg.ablation_schemes) cells.push_back({a, s, false, "", {}, 0});
  }
  detail::ensure_dir(cfg.output_dir);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      auto& cell = cells[i];
      RunConfig c = cfg;
      c.alpha = cell.alpha;
      c.scheme = cell.scheme;
      c.output_dir = (fs::path(cfg.output_dir) / ("alpha-" + detail::fmt(cell.alpha) + "_" + cell.scheme)).string();
      try {
        const TrainResult tr = train(c, data);
        cell.best_epoch = tr.best_epoch;
        cell.eval = evaluate(tr.best, data.val, data.ood_refs(), methods, c.seed, nullptr, c.knn_k, c.histogram_bins,
                             c.output_dir);
        cell.ok = true;
      } catch (const std::exception& e) {
        cell.error = e.what();
      }
    }
  };
  const std::size_t workers = worker_threads(cells.size());
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  detail::write_text(fs::path(cfg.output_dir) / "ablation.csv", ablation_csv(cells));
  return cells;
}

}  // namespace ssod
