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

// ssod: train, eval, ablate, fit-bank, dst-check, gen-data.
//
// Exit codes: 0 success, 2 configuration error, 3 numeric failure,
// 1 anything else (I/O).

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ssod/datagen.hpp"
#include "ssod/dst.hpp"
#include "ssod/pipeline.hpp"

namespace {

namespace fs = std::filesystem;

// Flags shared by the training-style subcommands. Unset flags leave the
// config file (or the defaults) untouched.
struct Overrides {
  std::string config;
  std::optional<std::string> manifest, output_dir, scheme, bank, ood_val_split;
  std::optional<double> gamma, alpha, lr, lw_weight;
  std::optional<std::size_t> epochs, batch_size, lr_halving_epochs, knn_k;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> methods, ood_splits;

  void add(CLI::App* app) {
    app->add_option("-c,--config", config, "JSON run config");
    app->add_option("--manifest", manifest, "dataset manifest.json");
    app->add_option("-o,--output-dir", output_dir, "output directory");
    app->add_option("--scheme", scheme, "balancing scheme: LW, DR or LWB");
    app->add_option("--gamma", gamma, "patch confidence threshold in (0.5, 1]");
    app->add_option("--alpha", alpha, "OOD loss weight");
    app->add_option("--lr", lr, "initial learning rate");
    app->add_option("--lw-weight", lw_weight, "LW weight on OOD patches");
    app->add_option("--epochs", epochs, "training epochs");
    app->add_option("--batch-size", batch_size, "batch size");
    app->add_option("--lr-halving-epochs", lr_halving_epochs, "halve the learning rate every N epochs");
    app->add_option("--seed", seed, "random seed");
    app->add_option("--bank", bank, "feature bank index (from fit-bank)");
    app->add_option("--knn-k", knn_k, "neighbour rank for the knn scorer");
    app->add_option("--ood-val-split", ood_val_split, "OOD split used for checkpoint selection");
    app->add_option("--methods", methods, "scoring methods")->delimiter(',');
    app->add_option("--ood-splits", ood_splits, "OOD splits to evaluate")->delimiter(',');
  }

  ssod::RunConfig resolve() const {
    ssod::RunConfig c = config.empty() ? ssod::RunConfig{} : ssod::load_run_config(config);
    if (manifest) c.manifest = *manifest;
    if (output_dir) c.output_dir = *output_dir;
    if (scheme) c.scheme = *scheme;
    if (bank) c.bank = *bank;
    if (ood_val_split) c.ood_val_split = *ood_val_split;
    if (gamma) c.gamma = *gamma;
    if (alpha) c.alpha = *alpha;
    if (lr) c.lr = *lr;
    if (lw_weight) c.lw_weight = *lw_weight;
    if (epochs) c.epochs = *epochs;
    if (batch_size) c.batch_size = *batch_size;
    if (lr_halving_epochs) c.lr_halving_epochs = *lr_halving_epochs;
    if (knn_k) c.knn_k = *knn_k;
    if (seed) c.seed = *seed;
    if (!methods.empty()) c.methods = methods;
    if (!ood_splits.empty()) c.ood_splits = ood_splits;
    c.validate();
    c.check_paths();
    return c;
  }
};

int run(int argc, char** argv) {
  CLI::App app{"Self-supervised OOD detection at desk scale"};
  app.require_subcommand(1);

  Overrides train_o, eval_o, ablate_o, bank_o;
  std::string eval_ckpt, bank_ckpt, bank_out = "bank.json";
  std::string gen_out = "data";
  ssod::data::SceneConfig scene;
  std::string scene_config;
  std::size_t dst_draws = 10000;
  std::uint64_t dst_seed = 0;

  auto* train = app.add_subcommand("train", "train classifier and OOD head jointly");
  train_o.add(train);
  auto* eval = app.add_subcommand("eval", "score a checkpoint with every method");
  eval_o.add(eval);
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint index (best.json)")->required();
  auto* ablate = app.add_subcommand("ablate", "alpha x scheme grid");
  ablate_o.add(ablate);
  std::vector<double> grid_alphas;
  std::vector<std::string> grid_schemes;
  ablate->add_option("--alphas", grid_alphas, "alpha axis of the grid")->delimiter(',');
  ablate->add_option("--schemes", grid_schemes, "scheme axis of the grid")->delimiter(',');
  auto* fit = app.add_subcommand("fit-bank", "fit the feature bank for feature-space scorers");
  bank_o.add(fit);
  fit->add_option("--checkpoint", bank_ckpt, "checkpoint index")->required();
  fit->add_option("--out", bank_out, "feature bank index path");
  auto* dst = app.add_subcommand("dst-check", "run the evidence-combination identity suite");
  dst->add_option("--draws", dst_draws, "random draws");
  dst->add_option("--seed", dst_seed, "random seed");
  auto* gen = app.add_subcommand("gen-data", "write the synthetic benchmark");
  gen->add_option("-o,--out", gen_out, "output directory");
  gen->add_option("--scene-config", scene_config, "JSON scene config");
  auto* gen_seed = gen->add_option("--seed", scene.seed, "generator seed");
  auto* gen_classes = gen->add_option("--classes", scene.num_classes, "ID class count");
  auto* gen_train = gen->add_option("--train", scene.train_count, "train images");
  auto* gen_val = gen->add_option("--val", scene.val_count, "val images");
  auto* gen_ood = gen->add_option("--ood", scene.ood_count, "images per OOD kind");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*train) {
      const auto cfg = train_o.resolve();
      const auto data = ssod::RunData::load(cfg, false);
      const auto res = ssod::train(cfg, data);
      std::printf("trained %zu epochs in %.1f s; best epoch %zu (val acc %.4f); checkpoint %s\n", cfg.epochs,
                  res.seconds, res.best_epoch, res.log[res.best_epoch - 1].val_acc,
                  (fs::path(cfg.output_dir) / "best.json").c_str());
    } else if (*eval) {
      const auto cfg = eval_o.resolve();
      const auto model = ssod::SsodModel::load(eval_ckpt);
      const auto val = ssod::data::load_dataset(cfg.manifest, cfg.val_split);
      std::vector<ssod::data::Dataset> oods;
      for (const auto& s : cfg.ood_splits) oods.push_back(ssod::data::load_dataset(cfg.manifest, s));
      std::vector<std::pair<std::string, const ssod::data::Dataset*>> refs;
      for (std::size_t i = 0; i < oods.size(); ++i) refs.emplace_back(cfg.ood_splits[i], &oods[i]);
      std::optional<ssod::FeatureBank> bank;
      if (!cfg.bank.empty()) bank = ssod::FeatureBank::load(cfg.bank);
      const auto res = ssod::evaluate(model, val, refs, cfg.methods, cfg.seed, bank ? &*bank : nullptr, cfg.knn_k,
                                      cfg.histogram_bins, cfg.output_dir);
      std::cout << ssod::metrics_csv(res.rows);
    } else if (*ablate) {
      auto cfg = ablate_o.resolve();
      if (!grid_alphas.empty()) cfg.ablation_alphas = grid_alphas;
      if (!grid_schemes.empty()) cfg.ablation_schemes = grid_schemes;
      cfg.validate();
      const auto data = ssod::RunData::load(cfg);
      const auto cells = ssod::ablate(cfg, data);
      std::cout << ssod::ablation_csv(cells);
    } else if (*fit) {
      const auto cfg = bank_o.resolve();
      const auto model = ssod::SsodModel::load(bank_ckpt);
      const auto train_set = ssod::data::load_dataset(cfg.manifest, cfg.train_split);
      const auto b = ssod::fit_bank(model, train_set, cfg.react_percentile);
      b.save(bank_out);
      std::printf("feature bank: %zu rows x %zu features, ridge %.3g, ReAct threshold %.4f -> %s\n", b.size(), b.dim(),
                  b.ridge(), b.react_threshold(), bank_out.c_str());
    } else if (*dst) {
      const auto rep = ssod::dst::check_identities(dst_draws, dst_seed);
      std::printf("draws %zu  combine-vs-softmax %.3e  factorized-vs-softmax %.3e  normalization %.3e  "
                  "argmax mismatches %zu  %.3f s\n",
                  rep.draws, rep.max_combine_vs_softmax, rep.max_factorized_vs_softmax, rep.max_normalization_error,
                  rep.argmax_mismatches, rep.seconds);
      if (rep.max_error() >= 1e-12 || rep.argmax_mismatches != 0) {
        std::fprintf(stderr, "identity check failed\n");
        return 3;
      }
    } else if (*gen) {
      ssod::data::SceneConfig cfg = scene;
      if (!scene_config.empty()) {
        std::ifstream is(scene_config);
        if (!is) throw ssod::ConfigError("scene config not found: " + scene_config);
        nlohmann::json j;
        is >> j;
        cfg = ssod::data::scene_config_from_json(j);
        // Flags given on the command line win over the file.
        if (*gen_seed) cfg.seed = scene.seed;
        if (*gen_classes) cfg.num_classes = scene.num_classes;
        if (*gen_train) cfg.train_count = scene.train_count;
        if (*gen_val) cfg.val_count = scene.val_count;
        if (*gen_ood) cfg.ood_count = scene.ood_count;
      }
      ssod::data::generate_all(cfg, gen_out);
      std::printf("wrote %s\n", (fs::path(gen_out) / "manifest.json").c_str());
    }
  } catch (const ssod::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const ssod::NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 3;
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
