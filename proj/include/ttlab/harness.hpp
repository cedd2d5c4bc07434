#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ttlab/data.hpp"
#include "ttlab/model.hpp"
#include "ttlab/telemetry.hpp"
#include "ttlab/training.hpp"

namespace ttlab::harness {

struct LrFinderConfig {
  double lr_min = 1e-5;
  double lr_max = 1.0;
  int steps = 60;
};

// Everything a run needs, loadable from JSON.  Seeds for data generation,
// weight init, and shuffling derive from master_seed unless the file pins
// them explicitly.
struct ExperimentConfig {
  data::DatasetSpec dataset;
  model::ModelConfig model;
  train::TrainConfig train;
  LrFinderConfig lr_finder;
  bool lr_auto = true;  // run the range finder; train.lr is used otherwise
  std::vector<std::string> tracked_tokens = {"[t]", "[ts]"};
  std::string output_dir = "runs/out";
  bool deterministic = true;
  uint64_t master_seed = 1;
  std::optional<uint64_t> seed_dataset, seed_init, seed_shuffle;

  uint64_t dataset_seed() const { return seed_dataset.value_or(master_seed + 1); }
  uint64_t init_seed() const { return seed_init.value_or(master_seed + 2); }
  uint64_t shuffle_seed() const { return seed_shuffle.value_or(master_seed + 3); }

  void validate() const;
};

ExperimentConfig default_config();
ExperimentConfig load_config(const std::string& path);
std::string config_to_json_text(const ExperimentConfig& cfg);  // full echo, sorted keys

struct TrainOutcome {
  double test_accuracy = 0;
  double final_loss = 0;
  int64_t steps = 0;
  double used_lr = 0;
  telemetry::MetricReport report;
  std::string dir;
};

// The train pipeline: build data, resolve lr, train with telemetry, evaluate,
// and write corpus/checkpoint/logs/metrics/manifest under cfg.output_dir.
TrainOutcome run_training(const ExperimentConfig& cfg);

// Writes train.txt / test.txt / manifest under cfg.output_dir.
void run_gen_data(const ExperimentConfig& cfg);

// Runs the lr sweep only; writes the curve and suggestion. Returns the lr.
double run_find_lr(const ExperimentConfig& cfg);

// checkpoint + corpus file -> accuracy (also written to a manifest when
// output_dir is non-empty).
double run_eval(const std::string& checkpoint_path, const std::string& data_path,
                const std::string& output_dir);

// All four rendering modes with shared seeds; returns accuracies in
// {baseline, tt, cot, tt_cot} order and writes sweep.csv.
std::vector<TrainOutcome> run_sweep(const ExperimentConfig& cfg);

// Matched single vs two thinking-token runs; writes comparison.csv.
struct GradStudyOutcome {
  TrainOutcome single_run;
  TrainOutcome dual_run;
};
GradStudyOutcome run_grad_study(const ExperimentConfig& cfg);

// Manifest JSON with volatile fields (timestamp, wall clock) removed, for
// byte-level comparison of reruns.
std::string manifest_stable_view(const std::string& manifest_text);

// argv-style entry point used by main(); exit code 0 on success, 1 for
// usage/config errors, 2 for runtime failures.
int run_cli(int argc, const char* const* argv);

}  // namespace ttlab::harness
