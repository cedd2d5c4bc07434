#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ttlab/data.hpp"
#include "ttlab/tensor.hpp"

namespace ttlab::telemetry {

// Per-step embedding gradient rows for one token id.
struct GradTrace {
  int token_id = -1;
  std::vector<std::pair<int64_t, std::vector<float>>> steps;
};

// Embedding snapshots for one token id; first entry is step 0 (init).
struct EmbeddingTrace {
  int token_id = -1;
  std::vector<std::pair<int64_t, std::vector<float>>> snapshots;
};

struct CumulativeGradient {
  double cum_norm = 0;     // || sum_t g_t ||
  double sum_norms = 0;    // sum_t || g_t ||
  double signal_ratio = 0; // cum_norm / sum_norms, 0 when no gradient ever arrived
};

// || e_final - e_init ||.  Needs at least two snapshots.
double displacement(const EmbeddingTrace& trace);

CumulativeGradient cumulative_gradient(const GradTrace& trace);

// 1 - || mean of unit gradient vectors ||, over steps with non-zero gradient.
// 0 means every step pushed the same way; near 1 means directions cancel.
double direction_variance(const GradTrace& trace);

struct TokenMetrics {
  int token_id = -1;
  std::string token;
  double displacement = 0;
  double cum_grad_norm = 0;
  double sum_grad_norms = 0;
  double signal_ratio = 0;
  double direction_variance = 0;
  bool no_signal = false;  // tracked token with no occurrence: no gradient ever
  // Percentile rank among corpus-occurring tokens: fraction of that population
  // strictly below this token's value.
  double displacement_pct = 0;
  double cum_grad_pct = 0;
  double signal_ratio_pct = 0;
};

struct MetricReport {
  std::vector<TokenMetrics> tokens;  // tracked tokens, in tracked order
  int64_t steps_recorded = 0;
};

// Observes embedding state during training.  record_step ingests the full
// [vocab x dim] gradient of the embedding table after each optimizer-visible
// step; snapshot ingests the table itself at chosen steps.  Per-token traces
// are kept for tracked ids; vocab-wide running sums (cumulative gradient,
// norm total, unit-direction total) are kept for every row so percentile
// ranks never need the full history in memory.
class Recorder {
 public:
  Recorder(std::vector<int> tracked_ids, int vocab_size, int dim);

  void record_step(int64_t step, const TensorF& embedding_grad);
  void snapshot(int64_t step, const TensorF& embedding);

  const GradTrace& grad_trace(int token_id) const;
  const EmbeddingTrace& embedding_trace(int token_id) const;
  const std::vector<int>& tracked_ids() const { return tracked_; }
  int64_t steps_recorded() const { return n_steps_; }
  int64_t snapshots_taken() const { return n_snapshots_; }
  int vocab_size() const { return vocab_; }
  int dim() const { return dim_; }

  // Vocab-wide views of the running accumulators.
  std::vector<double> vocab_cum_grad_norm() const;
  std::vector<double> vocab_sum_grad_norms() const;
  std::vector<double> vocab_signal_ratio() const;
  std::vector<double> vocab_displacement() const;  // first vs latest snapshot
  std::vector<double> vocab_direction_variance() const;

 private:
  std::vector<int> tracked_;
  int vocab_ = 0;
  int dim_ = 0;
  int64_t last_step_ = -1;
  int64_t n_steps_ = 0;
  int64_t last_snapshot_step_ = -1;
  int64_t n_snapshots_ = 0;
  std::map<int, GradTrace> grads_;
  std::map<int, EmbeddingTrace> embeddings_;
  std::vector<double> sum_grad_;       // vocab x dim
  std::vector<double> sum_unit_;       // vocab x dim
  std::vector<double> sum_norm_;       // vocab
  std::vector<int64_t> nonzero_steps_; // vocab
  std::vector<float> emb_first_, emb_last_;
};

// Metrics for the tracked tokens with percentile ranks computed against the
// rows listed in population_ids (callers pass the ids that occur in the
// training corpus).  Tracked tokens outside the population get no_signal set
// when no gradient ever reached them.
MetricReport build_report(const Recorder& rec, const std::vector<int>& population_ids,
                          const data::Vocab& vocab);

void write_metrics_csv(const MetricReport& report, const std::string& path);

// Long-format per-step series for tracked tokens:
// step,token,grad_norm,cum_norm_so_far,displacement_so_far
void write_series_csv(const Recorder& rec, const data::Vocab& vocab, const std::string& path);

}  // namespace ttlab::telemetry
