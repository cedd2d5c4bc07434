#include "ttlab/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>

#include "ttlab/textio.hpp"

namespace ttlab::train {

OptimizerState OptimizerState::init(model::Parameters& params) {
  OptimizerState st;
  for (auto& [name, t] : params.named()) {
    st.m.emplace_back(static_cast<size_t>(t->numel()), 0.0f);
    st.v.emplace_back(static_cast<size_t>(t->numel()), 0.0f);
  }
  return st;
}

void adamw_step(model::Parameters& params, OptimizerState& state, const TrainConfig& cfg,
                double lr_override) {
  auto named = params.named();
  if (state.m.size() != named.size())
    throw std::invalid_argument("adamw_step: optimizer state built for a different model");
  double lr = lr_override > 0 ? lr_override : cfg.lr;
  state.step += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (size_t pi = 0; pi < named.size(); ++pi) {
    TensorF* t = named[pi].second;
    if (!t->requires_grad()) continue;
    if (!t->has_grad())
      throw std::invalid_argument("adamw_step: no gradient for " + named[pi].first);
    float* p = t->data();
    const float* g = t->grad();
    float* m = state.m[pi].data();
    float* v = state.v[pi].data();
    int64_t n = t->numel();
    for (int64_t i = 0; i < n; ++i) {
      double gi = g[i];
      double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      double update = (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps) + cfg.weight_decay * p[i];
      p[i] = static_cast<float>(p[i] - lr * update);
    }
  }
}

void sgd_step(model::Parameters& params, const TrainConfig& cfg, double lr_override) {
  double lr = lr_override > 0 ? lr_override : cfg.lr;
  for (auto& [name, t] : params.named()) {
    if (!t->requires_grad()) continue;
    if (!t->has_grad()) throw std::invalid_argument("sgd_step: no gradient for " + name);
    float* p = t->data();
    const float* g = t->grad();
    int64_t n = t->numel();
    for (int64_t i = 0; i < n; ++i) p[i] = static_cast<float>(p[i] - lr * g[i]);
  }
}

double global_grad_norm(model::Parameters& params) {
  double s = 0;
  for (auto& [name, t] : params.named()) {
    if (!t->requires_grad() || !t->has_grad()) continue;
    const float* g = t->grad();
    int64_t n = t->numel();
    for (int64_t i = 0; i < n; ++i) s += static_cast<double>(g[i]) * g[i];
  }
  return std::sqrt(s);
}

double clip_gradients(model::Parameters& params, double max_norm) {
  if (!(max_norm > 0)) throw std::invalid_argument("clip_gradients: max_norm must be positive");
  double norm = global_grad_norm(params);
  if (norm > max_norm) {
    float sc = static_cast<float>(max_norm / norm);
    for (auto& [name, t] : params.named()) {
      if (!t->requires_grad() || !t->has_grad()) continue;
      float* g = t->grad();
      int64_t n = t->numel();
      for (int64_t i = 0; i < n; ++i) g[i] *= sc;
    }
  }
  return norm;
}

void write_training_log_csv(const TrainingLog& log, const std::string& path) {
  std::string out = "step,epoch,loss,lr,grad_norm\n";
  for (const auto& s : log.steps)
    out += std::to_string(s.step) + "," + std::to_string(s.epoch) + "," + fmt_g(s.loss) + "," +
           fmt_g(s.lr) + "," + fmt_g(s.grad_norm) + "\n";
  atomic_write_text(path, out);
}

namespace {

// Loss, backward, clip, record, update, zero.  Shared by train() and the lr
// sweep so both apply exactly the same step.
double run_one_step(model::Parameters& params, const std::vector<data::RenderedSample>& batch,
                    const TrainConfig& cfg, OptimizerState& state, double lr, int64_t step,
                    telemetry::Recorder* recorder, double* grad_norm_out) {
  double loss_value;
  {
    Tape<float> tape;
    TensorF loss = model::loss_on_batch(params, batch);
    loss_value = loss.item();
    if (!std::isfinite(loss_value))
      throw DivergenceError(step, "training diverged: loss " + fmt_g(loss_value) + " at step " +
                                      std::to_string(step));
    tape.backward(loss);
  }
  double gnorm = cfg.grad_clip > 0 ? clip_gradients(params, cfg.grad_clip)
                                   : global_grad_norm(params);
  if (grad_norm_out) *grad_norm_out = gnorm;
  if (recorder) {
    TensorF gview = TensorF::from_data(params.wte.shape(),
                                       std::vector<float>(params.wte.grad(),
                                                          params.wte.grad() + params.wte.numel()));
    recorder->record_step(step, gview);
  }
  if (cfg.optimizer == TrainConfig::Optimizer::adamw)
    adamw_step(params, state, cfg, lr);
  else
    sgd_step(params, cfg, lr);
  params.zero_grads();
  return loss_value;
}

}  // namespace

TrainingLog train(model::Parameters& params, const std::vector<data::RenderedSample>& train_set,
                  const TrainConfig& cfg, telemetry::Recorder* recorder) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");

  OptimizerState state = OptimizerState::init(params);
  std::mt19937_64 rng(cfg.seed);
  std::vector<size_t> order(train_set.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  if (recorder) recorder->snapshot(0, params.wte);

  TrainingLog log;
  int64_t step = 0;
  int64_t last_snap = 0;
  bool stop = false;
  std::vector<data::RenderedSample> batch;
  for (int epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (size_t at = 0; at < order.size() && !stop; at += static_cast<size_t>(cfg.batch_size)) {
      size_t end = std::min(order.size(), at + static_cast<size_t>(cfg.batch_size));
      batch.clear();
      for (size_t i = at; i < end; ++i) batch.push_back(train_set[order[i]]);
      ++step;
      double gnorm = 0;
      double loss = run_one_step(params, batch, cfg, state, cfg.lr, step, recorder, &gnorm);
      log.steps.push_back({step, epoch, loss, cfg.lr, gnorm});
      if (recorder && step % cfg.telemetry_every == 0) {
        recorder->snapshot(step, params.wte);
        last_snap = step;
      }
      if (cfg.max_steps > 0 && step >= cfg.max_steps) stop = true;
    }
  }
  if (recorder && last_snap != step) recorder->snapshot(step, params.wte);
  return log;
}

double evaluate_exact_match(model::Parameters& params,
                            const std::vector<data::RenderedSample>& test_set,
                            const data::Vocab& vocab) {
  if (test_set.empty()) throw std::invalid_argument("evaluate_exact_match: empty test set");

  // Group prompts by length so batched greedy decoding can run in lockstep.
  struct Item {
    std::vector<int> prompt;
    int64_t gold = 0;
    int completion_len = 0;
  };
  std::map<size_t, std::vector<Item>> groups;
  int64_t correct = 0, total = 0;
  for (const auto& s : test_set) {
    ++total;
    size_t eq = s.ids.size();
    for (size_t i = 0; i < s.ids.size(); ++i)
      if (s.ids[i] == data::Vocab::kEquals) {
        eq = i;
        break;
      }
    if (eq == s.ids.size()) continue;  // no '=' in sample: nothing to prompt with
    Item it;
    it.prompt.assign(s.ids.begin(), s.ids.begin() + static_cast<int64_t>(eq) + 1);
    std::string head = data::strip_think_markers(vocab.decode(it.prompt));
    size_t star = head.find('*');
    size_t eqc = head.find('=');
    if (star == std::string::npos || eqc == std::string::npos || star == 0 || eqc <= star + 1)
      continue;
    try {
      int64_t a = std::stoll(head.substr(0, star));
      int64_t b = std::stoll(head.substr(star + 1, eqc - star - 1));
      it.gold = a * b;
    } catch (const std::exception&) {
      continue;
    }
    it.completion_len = static_cast<int>(s.ids.size() - it.prompt.size());
    groups[it.prompt.size()].push_back(std::move(it));
  }

  constexpr size_t kEvalBatch = 256;
  for (auto& [plen, items] : groups) {
    int max_new = 8;
    for (const auto& it : items) max_new = std::max(max_new, it.completion_len + 8);
    for (size_t at = 0; at < items.size(); at += kEvalBatch) {
      size_t end = std::min(items.size(), at + kEvalBatch);
      std::vector<std::vector<int>> prompts;
      prompts.reserve(end - at);
      for (size_t i = at; i < end; ++i) prompts.push_back(items[i].prompt);
      auto outs = model::generate_greedy_batch(params, prompts, max_new, data::Vocab::kStop);
      for (size_t i = at; i < end; ++i) {
        auto parsed = data::parse_final_answer(vocab.decode(outs[i - at]));
        if (parsed && *parsed == items[i].gold) ++correct;
      }
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

double lr_range_test(const std::function<std::unique_ptr<SweepProblem>()>& factory,
                     double lr_min, double lr_max, int steps,
                     std::vector<std::pair<double, double>>* curve) {
  if (!(lr_min > 0) || !(lr_max > lr_min))
    throw std::invalid_argument("lr_range_test: need 0 < lr_min < lr_max");
  if (steps < 10) throw std::invalid_argument("lr_range_test: need at least 10 steps");
  auto problem = factory();

  std::vector<double> lrs, smoothed;
  constexpr double kBeta = 0.9;
  double ema = 0;
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < steps; ++i) {
    double lr = lr_min * std::pow(lr_max / lr_min, static_cast<double>(i) / (steps - 1));
    double loss = problem->step(lr);
    if (!std::isfinite(loss)) break;
    ema = kBeta * ema + (1.0 - kBeta) * loss;
    double sm = ema / (1.0 - std::pow(kBeta, i + 1));
    lrs.push_back(lr);
    smoothed.push_back(sm);
    if (curve) curve->emplace_back(lr, sm);
    best = std::min(best, sm);
    if (i > 0 && sm > 4.0 * best) break;
  }
  if (lrs.size() < 2)
    throw std::runtime_error("lr_range_test: sweep diverged before producing two points");

  size_t steepest = 1;
  double best_slope = std::numeric_limits<double>::infinity();
  for (size_t i = 1; i < smoothed.size(); ++i) {
    double slope = smoothed[i] - smoothed[i - 1];
    if (slope < best_slope) {
      best_slope = slope;
      steepest = i;
    }
  }
  return std::clamp(lrs[steepest] / 10.0, lr_min, lr_max);
}

namespace {

struct TrainingSweep : SweepProblem {
  model::Parameters params;
  OptimizerState state;
  std::vector<data::RenderedSample> data;
  TrainConfig cfg;
  std::mt19937_64 rng;
  std::vector<size_t> order;
  size_t cursor = 0;
  int64_t step_count = 0;

  double step(double lr) override {
    std::vector<data::RenderedSample> batch;
    for (int i = 0; i < cfg.batch_size; ++i) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(data[order[cursor++]]);
    }
    ++step_count;
    return run_one_step(params, batch, cfg, state, lr, step_count, nullptr, nullptr);
  }
};

}  // namespace

std::unique_ptr<SweepProblem> make_training_sweep(const model::ModelConfig& mcfg,
                                                  uint64_t init_seed,
                                                  const std::vector<data::RenderedSample>& data,
                                                  const TrainConfig& tcfg) {
  if (data.empty()) throw std::invalid_argument("make_training_sweep: empty data");
  auto sw = std::make_unique<TrainingSweep>();
  sw->params = model::init_parameters<float>(mcfg, init_seed);
  sw->state = OptimizerState::init(sw->params);
  sw->data = data;
  sw->cfg = tcfg;
  sw->rng.seed(tcfg.seed);
  sw->order.resize(data.size());
  for (size_t i = 0; i < data.size(); ++i) sw->order[i] = i;
  std::shuffle(sw->order.begin(), sw->order.end(), sw->rng);
  return sw;
}

}  // namespace ttlab::train
