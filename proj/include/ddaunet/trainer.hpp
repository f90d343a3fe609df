#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ddaunet/losses.hpp"
#include "ddaunet/network.hpp"
#include "ddaunet/phantom.hpp"
#include "ddaunet/sampler.hpp"

namespace ddaunet {

struct OptimConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  NetworkConfig network;
  LossConfig loss;
  SamplerConfig sampler;
  OptimConfig optimizer;
  int64_t epochs = 1;
  int64_t steps_per_epoch = 1;
  int64_t batch_size = 7;
  uint64_t seed = 0;
  int split_id = 1;  // one of the three repeatability splits
  int workers = 1;
  bool augment = true;
  bool verbose = false;  // per-epoch progress on stderr
  // Re-estimate batchnorm running statistics on whole training volumes before
  // each validation pass. Patch sampling is tumor-balanced, so patch-level
  // running stats are biased relative to whole-volume inference.
  bool bn_refresh = true;
  // Optional early stop, checked at epoch ends (0 = disabled).
  double stop_train_dsc = 0;
  double stop_val_dsc = 0;

  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

struct TrainLogEntry {
  int64_t step = 0;   // 1-based, monotone
  int64_t epoch = 0;  // 1-based
  double loss = 0;
  std::optional<double> val_dsc;  // present on the last step of an epoch
  double wall_seconds = 0;
};

struct TrainLog {
  std::vector<TrainLogEntry> entries;
  void save_csv(const std::filesystem::path& path) const;  // step,epoch,loss,val_dsc
};

struct TrainResult {
  std::filesystem::path best_checkpoint;
  std::filesystem::path final_checkpoint;
  TrainLog log;
  double best_val_dsc = 0;
  int64_t steps_run = 0;
  double final_train_dsc = -1;  // filled when stop_train_dsc monitoring is on
};

// Re-partitions the manifest's train+val cases deterministically by split id
// (sizes preserved, test split untouched).
struct SplitAssignment {
  std::vector<const ManifestCase*> train, val, test;
};
SplitAssignment assign_split(const Manifest& manifest, int split_id);

// Full training loop: optimizer steps over the concurrent patch stream,
// per-epoch validation DSC via whole-volume inference, best/final
// checkpoints and the step log written under out_dir.
TrainResult train(const TrainConfig& cfg, const Manifest& manifest,
                  const std::filesystem::path& data_root,
                  const std::filesystem::path& out_dir);

// Mean whole-scan DSC (threshold 0.5 + largest component) over cases.
double evaluate_mean_dsc(Network& net, const std::vector<const ManifestCase*>& cases,
                         const std::filesystem::path& data_root);

}  // namespace ddaunet
