#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "taskcodec/dataset.hpp"

namespace taskcodec {

// Experiment configuration. Every field has a working default, so an empty
// JSON object is a valid config; parsing is strict — unknown keys are errors
// naming the allowed set, because silent typos in schedule names are the
// main way batch experiments go wrong.

struct TaskPretrainConfig {
  int epochs = 0;
  int batch_size = 16;
  double lr = 3e-3;
  uint64_t seed = 0;
  double floor = 0;  // val-metric gate; 0 disables
};

struct ExperimentConfig {
  std::string run_dir = "runs/default";
  std::vector<int> seeds = {1, 2, 3};
  std::vector<std::string> regimes = {"baseline", "tft", "cft", "jft", "jft_fd",
                                      "jft_tft",  "jft_conn_avgpool3",
                                      "jft_conn_depthwise3", "jft_conn_conv3"};
  std::vector<double> betas = {1.0, 0.6675, 0.3186, 0.1};
  std::vector<std::string> qualities = {"q1", "q2", "q3", "q4"};
  std::string connector_target = "reference_reconstruction";

  DatasetSpec dataset;

  // Rate-distortion pretraining, one run per quality preset.
  int codec_epochs = 12;
  int codec_batch = 8;
  double codec_lr = 1e-3;
  uint64_t codec_seed = 7;

  TaskPretrainConfig detector_pretrain{60, 16, 3e-3, 11, 0.7};
  TaskPretrainConfig classifier_pretrain{40, 16, 3e-3, 12, 0.9};
  TaskPretrainConfig segmenter_pretrain{40, 16, 3e-3, 13, 0.6};

  // Fine-tune schedules. Defaults follow the published settings; epoch
  // counts are interpreted against this dataset's scale and stay adjustable.
  int tft_epochs = 6;
  int tft_batch = 8;
  double tft_lr = 0.01;  // plain SGD

  int cft_epochs = 6;
  int cft_batch = 2;
  double cft_lr = 1e-4;  // Adam

  int jft_epochs = 5;       // joint epochs
  int jft_task_epochs = 1;  // extra detector-only epochs with the codec frozen
  int jft_batch = 2;
  double jft_lr = 1e-4;  // Adam

  int jft_tft_cls_epochs = 5;
  double jft_tft_cls_lr = 1e-3;
  double jft_tft_cls_momentum = 0.9;  // SGD

  int jft_tft_seg_epochs = 50;
  double jft_tft_seg_lr = 0.01;
  double jft_tft_seg_weight_decay = 5e-4;
  double jft_tft_seg_poly_power = 0.9;  // SGD, polynomial decay

  int connector_epochs = 30;
  int connector_batch = 8;
  double connector_lr = 0.1;
  int connector_lr_drop = 10;  // x0.1 after each this-many epochs

  ExperimentConfig() {
    // Experiment-scale dataset: large enough that the task models generalize
    // past their sanity floors instead of memorizing the train split.
    dataset.train_count = 480;
    dataset.val_count = 96;
  }

  // Canonical JSON (round-trips through config_from_json).
  nlohmann::json to_json() const;

  // Hash of the canonical JSON; keys run-dir manifests and reproducibility
  // checks.
  uint64_t config_hash() const;
};

// Strict parse: unknown keys, wrong types, and out-of-range values are
// "config:" errors. Missing keys keep their defaults.
ExperimentConfig config_from_json(const nlohmann::json& j);

ExperimentConfig load_config(const std::string& path);

const std::vector<std::string>& known_regimes();

}  // namespace taskcodec
