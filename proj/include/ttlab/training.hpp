#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "ttlab/data.hpp"
#include "ttlab/model.hpp"
#include "ttlab/telemetry.hpp"

namespace ttlab::train {

// Raised when the training loss stops being finite; carries the step that
// produced it.
struct DivergenceError : std::runtime_error {
  int64_t step;
  DivergenceError(int64_t s, const std::string& msg) : std::runtime_error(msg), step(s) {}
};

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip = 1.0;  // global-norm ceiling; <= 0 disables clipping
  int batch_size = 128;
  int epochs = 100;
  int64_t max_steps = 0;  // 0: bounded by epochs only
  uint64_t seed = 1;      // shuffle order
  int telemetry_every = 50;
  // sgd exists for experiments that need a closed-form optimizer trajectory;
  // real runs use adamw.
  enum class Optimizer { adamw, sgd } optimizer = Optimizer::adamw;

  void validate() const {
    if (!(lr > 0)) throw std::invalid_argument("train: lr must be positive");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
      throw std::invalid_argument("train: betas must lie in [0, 1)");
    if (!(eps > 0)) throw std::invalid_argument("train: eps must be positive");
    if (weight_decay < 0) throw std::invalid_argument("train: weight_decay must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
    if (max_steps < 0) throw std::invalid_argument("train: max_steps must be >= 0");
    if (telemetry_every < 1) throw std::invalid_argument("train: telemetry_every must be >= 1");
  }
};

// First- and second-moment buffers, parallel to params.named() order.
struct OptimizerState {
  int64_t step = 0;
  std::vector<std::vector<float>> m, v;
  static OptimizerState init(model::Parameters& params);
};

// Decoupled-weight-decay Adam over every requires_grad parameter.  Gradients
// must be populated; weight decay bypasses the moment estimates.  lr_override
// (when > 0) substitutes the config lr for this step.
void adamw_step(model::Parameters& params, OptimizerState& state, const TrainConfig& cfg,
                double lr_override = 0);

// Plain gradient descent, matching the optimizer selector above.
void sgd_step(model::Parameters& params, const TrainConfig& cfg, double lr_override = 0);

double global_grad_norm(model::Parameters& params);

// Scales all gradients so the global norm is at most max_norm.  Returns the
// pre-clip norm.
double clip_gradients(model::Parameters& params, double max_norm);

struct StepLog {
  int64_t step = 0;
  int epoch = 0;
  double loss = 0;
  double lr = 0;
  double grad_norm = 0;  // pre-clip global norm
};

struct TrainingLog {
  std::vector<StepLog> steps;
  double final_loss() const { return steps.empty() ? 0.0 : steps.back().loss; }
};

void write_training_log_csv(const TrainingLog& log, const std::string& path);

// Runs the full loop: shuffled epochs, masked batch loss, clip, optimizer
// step.  When a recorder is given it receives the post-clip embedding-table
// gradient every step and embedding snapshots at step 0, every
// telemetry_every steps, and the final step.
TrainingLog train(model::Parameters& params, const std::vector<data::RenderedSample>& train_set,
                  const TrainConfig& cfg, telemetry::Recorder* recorder = nullptr);

// Fraction of test samples whose greedy completion carries the right final
// answer.  Prompts run through the first '='; only the last '='-field of the
// generation is compared, so chain-of-thought detours and thinking tokens do
// not matter.  Unparsable generations count as wrong, never as errors.
double evaluate_exact_match(model::Parameters& params,
                            const std::vector<data::RenderedSample>& test_set,
                            const data::Vocab& vocab = data::Vocab::standard());

// One optimisation problem exposed to the learning-rate sweep: each call
// applies a single step at the given lr and reports the pre-update loss.
struct SweepProblem {
  virtual ~SweepProblem() = default;
  virtual double step(double lr) = 0;
};

// Exponential lr sweep from lr_min to lr_max.  Tracks bias-corrected
// EMA-smoothed loss, aborts once it exceeds 4x its minimum (or goes
// non-finite), and suggests the lr at the steepest smoothed descent divided
// by 10, clamped into [lr_min, lr_max].  The factory supplies a fresh
// problem so the sweep never disturbs caller state.
double lr_range_test(const std::function<std::unique_ptr<SweepProblem>()>& factory,
                     double lr_min, double lr_max, int steps,
                     std::vector<std::pair<double, double>>* curve = nullptr);

// SweepProblem running real training steps on a freshly initialised model.
std::unique_ptr<SweepProblem> make_training_sweep(const model::ModelConfig& mcfg,
                                                  uint64_t init_seed,
                                                  const std::vector<data::RenderedSample>& data,
                                                  const TrainConfig& tcfg);

}  // namespace ttlab::train
