#include "ttlab/telemetry.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "ttlab/textio.hpp"

namespace ttlab::telemetry {

namespace {

double l2(const std::vector<float>& v) {
  double s = 0;
  for (float x : v) s += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(s);
}

double l2_diff(const std::vector<float>& a, const std::vector<float>& b) {
  double s = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return std::sqrt(s);
}

}  // namespace

double displacement(const EmbeddingTrace& trace) {
  if (trace.snapshots.size() < 2)
    throw std::invalid_argument("displacement: need at least 2 snapshots, have " +
                                std::to_string(trace.snapshots.size()));
  return l2_diff(trace.snapshots.back().second, trace.snapshots.front().second);
}

CumulativeGradient cumulative_gradient(const GradTrace& trace) {
  if (trace.steps.empty())
    throw std::invalid_argument("cumulative_gradient: empty gradient trace");
  size_t d = trace.steps.front().second.size();
  std::vector<double> acc(d, 0.0);
  CumulativeGradient out;
  for (const auto& [step, g] : trace.steps) {
    for (size_t i = 0; i < d; ++i) acc[i] += static_cast<double>(g[i]);
    out.sum_norms += l2(g);
  }
  double s = 0;
  for (double x : acc) s += x * x;
  out.cum_norm = std::sqrt(s);
  out.signal_ratio = out.sum_norms > 0 ? out.cum_norm / out.sum_norms : 0.0;
  return out;
}

double direction_variance(const GradTrace& trace) {
  if (trace.steps.empty())
    throw std::invalid_argument("direction_variance: empty gradient trace");
  size_t d = trace.steps.front().second.size();
  std::vector<double> mean(d, 0.0);
  int64_t n = 0;
  for (const auto& [step, g] : trace.steps) {
    double norm = l2(g);
    if (norm == 0.0) continue;
    for (size_t i = 0; i < d; ++i) mean[i] += static_cast<double>(g[i]) / norm;
    ++n;
  }
  if (n == 0)
    throw std::invalid_argument("direction_variance: no steps with non-zero gradient");
  double s = 0;
  for (double x : mean) s += (x / n) * (x / n);
  return 1.0 - std::sqrt(s);
}

Recorder::Recorder(std::vector<int> tracked_ids, int vocab_size, int dim)
    : tracked_(std::move(tracked_ids)), vocab_(vocab_size), dim_(dim) {
  if (vocab_ < 1 || dim_ < 1)
    throw std::invalid_argument("recorder: vocab and dim must be positive");
  for (int id : tracked_) {
    if (id < 0 || id >= vocab_)
      throw std::out_of_range("recorder: tracked id " + std::to_string(id) + " outside [0, " +
                              std::to_string(vocab_) + ")");
    grads_[id].token_id = id;
    embeddings_[id].token_id = id;
  }
  size_t n = static_cast<size_t>(vocab_) * static_cast<size_t>(dim_);
  sum_grad_.assign(n, 0.0);
  sum_unit_.assign(n, 0.0);
  sum_norm_.assign(static_cast<size_t>(vocab_), 0.0);
  nonzero_steps_.assign(static_cast<size_t>(vocab_), 0);
}

void Recorder::record_step(int64_t step, const TensorF& embedding_grad) {
  if (embedding_grad.ndim() != 2 || embedding_grad.dim(0) != vocab_ ||
      embedding_grad.dim(1) != dim_)
    throw std::invalid_argument("record_step: gradient shape " +
                                shape_str(embedding_grad.shape()) + ", expected [" +
                                std::to_string(vocab_) + ", " + std::to_string(dim_) + "]");
  if (step <= last_step_)
    throw std::invalid_argument("record_step: step " + std::to_string(step) +
                                " not after step " + std::to_string(last_step_));
  last_step_ = step;
  ++n_steps_;

  const float* g = embedding_grad.data();
  for (int r = 0; r < vocab_; ++r) {
    const float* row = g + static_cast<int64_t>(r) * dim_;
    double s = 0;
    for (int c = 0; c < dim_; ++c) s += static_cast<double>(row[c]) * row[c];
    double norm = std::sqrt(s);
    double* sg = sum_grad_.data() + static_cast<int64_t>(r) * dim_;
    for (int c = 0; c < dim_; ++c) sg[c] += row[c];
    sum_norm_[static_cast<size_t>(r)] += norm;
    if (norm > 0) {
      double* su = sum_unit_.data() + static_cast<int64_t>(r) * dim_;
      for (int c = 0; c < dim_; ++c) su[c] += row[c] / norm;
      ++nonzero_steps_[static_cast<size_t>(r)];
    }
  }
  for (int id : tracked_) {
    const float* row = g + static_cast<int64_t>(id) * dim_;
    grads_[id].steps.emplace_back(step, std::vector<float>(row, row + dim_));
  }
}

void Recorder::snapshot(int64_t step, const TensorF& embedding) {
  if (embedding.ndim() != 2 || embedding.dim(0) != vocab_ || embedding.dim(1) != dim_)
    throw std::invalid_argument("snapshot: embedding shape " + shape_str(embedding.shape()) +
                                ", expected [" + std::to_string(vocab_) + ", " +
                                std::to_string(dim_) + "]");
  if (step <= last_snapshot_step_)
    throw std::invalid_argument("snapshot: step " + std::to_string(step) + " not after step " +
                                std::to_string(last_snapshot_step_));
  last_snapshot_step_ = step;
  ++n_snapshots_;
  const float* e = embedding.data();
  if (emb_first_.empty()) emb_first_.assign(e, e + embedding.numel());
  emb_last_.assign(e, e + embedding.numel());
  for (int id : tracked_) {
    const float* row = e + static_cast<int64_t>(id) * dim_;
    embeddings_[id].snapshots.emplace_back(step, std::vector<float>(row, row + dim_));
  }
}

const GradTrace& Recorder::grad_trace(int token_id) const {
  auto it = grads_.find(token_id);
  if (it == grads_.end())
    throw std::out_of_range("grad_trace: token " + std::to_string(token_id) + " not tracked");
  return it->second;
}

const EmbeddingTrace& Recorder::embedding_trace(int token_id) const {
  auto it = embeddings_.find(token_id);
  if (it == embeddings_.end())
    throw std::out_of_range("embedding_trace: token " + std::to_string(token_id) +
                            " not tracked");
  return it->second;
}

std::vector<double> Recorder::vocab_cum_grad_norm() const {
  std::vector<double> out(static_cast<size_t>(vocab_), 0.0);
  for (int r = 0; r < vocab_; ++r) {
    const double* sg = sum_grad_.data() + static_cast<int64_t>(r) * dim_;
    double s = 0;
    for (int c = 0; c < dim_; ++c) s += sg[c] * sg[c];
    out[static_cast<size_t>(r)] = std::sqrt(s);
  }
  return out;
}

std::vector<double> Recorder::vocab_sum_grad_norms() const {
  return {sum_norm_.begin(), sum_norm_.end()};
}

std::vector<double> Recorder::vocab_signal_ratio() const {
  std::vector<double> cum = vocab_cum_grad_norm();
  std::vector<double> out(static_cast<size_t>(vocab_), 0.0);
  for (int r = 0; r < vocab_; ++r)
    out[static_cast<size_t>(r)] =
        sum_norm_[static_cast<size_t>(r)] > 0 ? cum[static_cast<size_t>(r)] / sum_norm_[static_cast<size_t>(r)] : 0.0;
  return out;
}

std::vector<double> Recorder::vocab_displacement() const {
  if (n_snapshots_ < 2)
    throw std::invalid_argument("vocab_displacement: need at least 2 snapshots, have " +
                                std::to_string(n_snapshots_));
  std::vector<double> out(static_cast<size_t>(vocab_), 0.0);
  for (int r = 0; r < vocab_; ++r) {
    double s = 0;
    for (int c = 0; c < dim_; ++c) {
      size_t i = static_cast<size_t>(r) * static_cast<size_t>(dim_) + static_cast<size_t>(c);
      double d = static_cast<double>(emb_last_[i]) - static_cast<double>(emb_first_[i]);
      s += d * d;
    }
    out[static_cast<size_t>(r)] = std::sqrt(s);
  }
  return out;
}

std::vector<double> Recorder::vocab_direction_variance() const {
  std::vector<double> out(static_cast<size_t>(vocab_), 0.0);
  for (int r = 0; r < vocab_; ++r) {
    int64_t n = nonzero_steps_[static_cast<size_t>(r)];
    if (n == 0) continue;
    const double* su = sum_unit_.data() + static_cast<int64_t>(r) * dim_;
    double s = 0;
    for (int c = 0; c < dim_; ++c) s += (su[c] / n) * (su[c] / n);
    out[static_cast<size_t>(r)] = 1.0 - std::sqrt(s);
  }
  return out;
}

MetricReport build_report(const Recorder& rec, const std::vector<int>& population_ids,
                          const data::Vocab& vocab) {
  if (rec.steps_recorded() == 0)
    throw std::invalid_argument("build_report: no gradient steps recorded");
  std::vector<double> disp = rec.vocab_displacement();
  std::vector<double> cum = rec.vocab_cum_grad_norm();
  std::vector<double> ratio = rec.vocab_signal_ratio();

  auto pct_among = [&](const std::vector<double>& values, int id) {
    double v = values[static_cast<size_t>(id)];
    int64_t below = 0, total = 0;
    for (int other : population_ids) {
      if (other == id) continue;
      ++total;
      if (values[static_cast<size_t>(other)] < v) ++below;
    }
    return total > 0 ? static_cast<double>(below) / static_cast<double>(total) : 0.0;
  };

  MetricReport rep;
  rep.steps_recorded = rec.steps_recorded();
  for (int id : rec.tracked_ids()) {
    TokenMetrics m;
    m.token_id = id;
    m.token = vocab.token(id);
    m.no_signal = rec.vocab_sum_grad_norms()[static_cast<size_t>(id)] == 0.0;
    m.displacement = disp[static_cast<size_t>(id)];
    m.cum_grad_norm = cum[static_cast<size_t>(id)];
    m.sum_grad_norms = rec.vocab_sum_grad_norms()[static_cast<size_t>(id)];
    m.signal_ratio = ratio[static_cast<size_t>(id)];
    if (!m.no_signal) m.direction_variance = direction_variance(rec.grad_trace(id));
    m.displacement_pct = pct_among(disp, id);
    m.cum_grad_pct = pct_among(cum, id);
    m.signal_ratio_pct = pct_among(ratio, id);
    rep.tokens.push_back(std::move(m));
  }
  return rep;
}

void write_metrics_csv(const MetricReport& report, const std::string& path) {
  std::string out =
      "token_id,token,no_signal,displacement,cum_grad_norm,sum_grad_norms,signal_ratio,"
      "direction_variance,displacement_pct,cum_grad_pct,signal_ratio_pct\n";
  for (const auto& m : report.tokens) {
    out += std::to_string(m.token_id) + "," + m.token + "," + (m.no_signal ? "1" : "0") + "," +
           fmt_g(m.displacement) + "," + fmt_g(m.cum_grad_norm) + "," +
           fmt_g(m.sum_grad_norms) + "," + fmt_g(m.signal_ratio) + "," +
           fmt_g(m.direction_variance) + "," + fmt_g(m.displacement_pct) + "," +
           fmt_g(m.cum_grad_pct) + "," + fmt_g(m.signal_ratio_pct) + "\n";
  }
  atomic_write_text(path, out);
}

void write_series_csv(const Recorder& rec, const data::Vocab& vocab, const std::string& path) {
  std::string out = "step,token,grad_norm,cum_norm_so_far,displacement_so_far\n";
  for (int id : rec.tracked_ids()) {
    const GradTrace& gt = rec.grad_trace(id);
    const EmbeddingTrace& et = rec.embedding_trace(id);
    std::vector<double> acc(static_cast<size_t>(rec.dim()), 0.0);
    size_t snap = 0;
    for (const auto& [step, g] : gt.steps) {
      for (size_t i = 0; i < g.size(); ++i) acc[i] += static_cast<double>(g[i]);
      double cum = 0;
      for (double x : acc) cum += x * x;
      // latest snapshot at or before this step, against the first one
      while (snap + 1 < et.snapshots.size() && et.snapshots[snap + 1].first <= step) ++snap;
      double disp = 0;
      if (!et.snapshots.empty()) {
        const auto& a = et.snapshots.front().second;
        const auto& b = et.snapshots[snap].second;
        disp = l2_diff(b, a);
      }
      out += std::to_string(step) + "," + vocab.token(id) + "," + fmt_g(l2(g)) + "," +
             fmt_g(std::sqrt(cum)) + "," + fmt_g(disp) + "\n";
    }
  }
  atomic_write_text(path, out);
}

}  // namespace ttlab::telemetry
