#include "ttlab/harness.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"

#include "ttlab/blas.hpp"
#include "ttlab/checkpoint.hpp"
#include "ttlab/textio.hpp"

namespace ttlab::harness {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json dataset_to_json(const data::DatasetSpec& d) {
  return {{"digits", d.digits},
          {"n_train", d.n_train},
          {"n_test", d.n_test},
          {"mode", data::to_string(d.mode)},
          {"n_think", d.n_think},
          {"think_set", d.think_set},
          {"placement", data::to_string(d.placement)},
          {"supervise_think", d.supervise_think}};
}

data::DatasetSpec dataset_from_json(const json& j, data::DatasetSpec d) {
  d.digits = j.value("digits", d.digits);
  d.n_train = j.value("n_train", d.n_train);
  d.n_test = j.value("n_test", d.n_test);
  if (j.contains("mode")) d.mode = data::render_mode_from_string(j.at("mode").get<std::string>());
  d.n_think = j.value("n_think", d.n_think);
  if (j.contains("think_set")) d.think_set = j.at("think_set").get<std::vector<std::string>>();
  if (j.contains("placement"))
    d.placement = data::think_placement_from_string(j.at("placement").get<std::string>());
  d.supervise_think = j.value("supervise_think", d.supervise_think);
  return d;
}

json model_to_json(const model::ModelConfig& m) {
  return {{"n_layers", m.n_layers}, {"n_heads", m.n_heads},
          {"d_model", m.d_model},   {"d_ff", m.d_ff},
          {"ctx_len", m.ctx_len},   {"vocab_size", m.vocab_size},
          {"tie_embeddings", m.tie_embeddings}, {"init_std", m.init_std}};
}

model::ModelConfig model_from_json(const json& j, model::ModelConfig m) {
  m.n_layers = j.value("n_layers", m.n_layers);
  m.n_heads = j.value("n_heads", m.n_heads);
  m.d_model = j.value("d_model", m.d_model);
  m.d_ff = j.value("d_ff", m.d_ff);
  m.ctx_len = j.value("ctx_len", m.ctx_len);
  m.vocab_size = j.value("vocab_size", m.vocab_size);
  m.tie_embeddings = j.value("tie_embeddings", m.tie_embeddings);
  m.init_std = j.value("init_std", m.init_std);
  return m;
}

json train_to_json(const train::TrainConfig& t, bool lr_auto) {
  json j = {{"beta1", t.beta1},
            {"beta2", t.beta2},
            {"eps", t.eps},
            {"weight_decay", t.weight_decay},
            {"grad_clip", t.grad_clip},
            {"batch_size", t.batch_size},
            {"epochs", t.epochs},
            {"max_steps", t.max_steps},
            {"telemetry_every", t.telemetry_every},
            {"optimizer", t.optimizer == train::TrainConfig::Optimizer::adamw ? "adamw" : "sgd"}};
  if (lr_auto)
    j["lr"] = "auto";
  else
    j["lr"] = t.lr;
  return j;
}

train::TrainConfig train_from_json(const json& j, train::TrainConfig t, bool& lr_auto) {
  if (j.contains("lr")) {
    if (j.at("lr").is_string()) {
      if (j.at("lr").get<std::string>() != "auto")
        throw std::invalid_argument("config: train.lr must be a number or \"auto\"");
      lr_auto = true;
    } else {
      t.lr = j.at("lr").get<double>();
      lr_auto = false;
    }
  }
  t.beta1 = j.value("beta1", t.beta1);
  t.beta2 = j.value("beta2", t.beta2);
  t.eps = j.value("eps", t.eps);
  t.weight_decay = j.value("weight_decay", t.weight_decay);
  t.grad_clip = j.value("grad_clip", t.grad_clip);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.epochs = j.value("epochs", t.epochs);
  t.max_steps = j.value("max_steps", t.max_steps);
  t.telemetry_every = j.value("telemetry_every", t.telemetry_every);
  if (j.contains("optimizer")) {
    std::string o = j.at("optimizer").get<std::string>();
    if (o == "adamw")
      t.optimizer = train::TrainConfig::Optimizer::adamw;
    else if (o == "sgd")
      t.optimizer = train::TrainConfig::Optimizer::sgd;
    else
      throw std::invalid_argument("config: unknown optimizer \"" + o + "\"");
  }
  return t;
}

json config_to_json(const ExperimentConfig& c) {
  json j;
  j["dataset"] = dataset_to_json(c.dataset);
  j["model"] = model_to_json(c.model);
  j["train"] = train_to_json(c.train, c.lr_auto);
  j["lr_finder"] = {{"lr_min", c.lr_finder.lr_min},
                    {"lr_max", c.lr_finder.lr_max},
                    {"steps", c.lr_finder.steps}};
  j["tracked_tokens"] = c.tracked_tokens;
  j["output_dir"] = c.output_dir;
  j["deterministic"] = c.deterministic;
  j["master_seed"] = c.master_seed;
  if (c.seed_dataset || c.seed_init || c.seed_shuffle) {
    json s;
    if (c.seed_dataset) s["dataset"] = *c.seed_dataset;
    if (c.seed_init) s["init"] = *c.seed_init;
    if (c.seed_shuffle) s["shuffle"] = *c.seed_shuffle;
    j["seeds"] = s;
  }
  return j;
}

std::string now_utc() {
  std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

json seeds_json(const ExperimentConfig& c) {
  return {{"master", c.master_seed},
          {"dataset", c.dataset_seed()},
          {"init", c.init_seed()},
          {"shuffle", c.shuffle_seed()}};
}

void write_manifest(const std::string& dir, const std::string& command,
                    const ExperimentConfig& cfg, const json& results, const json& files,
                    double wall_sec) {
  json m;
  m["schema_version"] = 1;
  m["code_version"] = TTLAB_VERSION;
  m["blas_backend"] = blas::backend_name();
  m["command"] = command;
  m["config"] = config_to_json(cfg);
  m["seeds"] = seeds_json(cfg);
  m["results"] = results;
  m["files"] = files;
  m["timestamp_utc"] = now_utc();
  m["wall_clock_sec"] = wall_sec;
  atomic_write_text((fs::path(dir) / "manifest.json").string(), m.dump(2) + "\n");
}

struct Timer {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
};

data::Dataset build_run_dataset(const ExperimentConfig& cfg) {
  data::DatasetSpec ds = cfg.dataset;
  ds.seed = cfg.dataset_seed();
  data::Dataset d = data::build_dataset(ds);
  size_t longest = 0;
  for (const auto& s : d.train) longest = std::max(longest, s.ids.size());
  for (const auto& s : d.test) longest = std::max(longest, s.ids.size());
  if (longest > static_cast<size_t>(cfg.model.ctx_len))
    throw std::invalid_argument("config: longest rendered sample has " +
                                std::to_string(longest) + " tokens but ctx_len is " +
                                std::to_string(cfg.model.ctx_len));
  return d;
}

std::vector<int> tracked_ids(const ExperimentConfig& cfg) {
  const auto& vocab = data::Vocab::standard();
  std::vector<int> ids;
  for (const auto& t : cfg.tracked_tokens) ids.push_back(vocab.id(t));
  return ids;
}

double resolve_lr(const ExperimentConfig& cfg, const data::Dataset& d,
                  std::vector<std::pair<double, double>>* curve = nullptr) {
  if (!cfg.lr_auto) return cfg.train.lr;
  train::TrainConfig tc = cfg.train;
  tc.seed = cfg.shuffle_seed();
  auto factory = [&]() {
    return train::make_training_sweep(cfg.model, cfg.init_seed(), d.train, tc);
  };
  return train::lr_range_test(factory, cfg.lr_finder.lr_min, cfg.lr_finder.lr_max,
                              cfg.lr_finder.steps, curve);
}

}  // namespace

void ExperimentConfig::validate() const {
  dataset.validate();
  model.validate();
  train.validate();
  const auto& vocab = data::Vocab::standard();
  if (model.vocab_size != vocab.size())
    throw std::invalid_argument("config: vocab_size must be " + std::to_string(vocab.size()) +
                                " to match the multiplication vocabulary");
  if (lr_finder.lr_min <= 0 || lr_finder.lr_max <= lr_finder.lr_min)
    throw std::invalid_argument("config: lr_finder needs 0 < lr_min < lr_max");
  if (lr_finder.steps < 10)
    throw std::invalid_argument("config: lr_finder.steps must be >= 10");
  for (const auto& t : tracked_tokens) vocab.id(t);  // throws on unknown tokens
  if (output_dir.empty()) throw std::invalid_argument("config: output_dir is empty");
}

ExperimentConfig default_config() { return {}; }

ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("config: cannot open " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw std::invalid_argument("config: " + path + " is not valid JSON: " + e.what());
  }
  ExperimentConfig c = default_config();
  if (j.contains("dataset")) c.dataset = dataset_from_json(j.at("dataset"), c.dataset);
  if (j.contains("model")) c.model = model_from_json(j.at("model"), c.model);
  if (j.contains("train")) c.train = train_from_json(j.at("train"), c.train, c.lr_auto);
  if (j.contains("lr_finder")) {
    const json& lf = j.at("lr_finder");
    c.lr_finder.lr_min = lf.value("lr_min", c.lr_finder.lr_min);
    c.lr_finder.lr_max = lf.value("lr_max", c.lr_finder.lr_max);
    c.lr_finder.steps = lf.value("steps", c.lr_finder.steps);
  }
  if (j.contains("tracked_tokens"))
    c.tracked_tokens = j.at("tracked_tokens").get<std::vector<std::string>>();
  c.output_dir = j.value("output_dir", c.output_dir);
  c.deterministic = j.value("deterministic", c.deterministic);
  c.master_seed = j.value("master_seed", c.master_seed);
  if (j.contains("seeds")) {
    const json& s = j.at("seeds");
    if (s.contains("dataset")) c.seed_dataset = s.at("dataset").get<uint64_t>();
    if (s.contains("init")) c.seed_init = s.at("init").get<uint64_t>();
    if (s.contains("shuffle")) c.seed_shuffle = s.at("shuffle").get<uint64_t>();
  }
  return c;
}

std::string config_to_json_text(const ExperimentConfig& cfg) {
  return config_to_json(cfg).dump(2) + "\n";
}

void run_gen_data(const ExperimentConfig& cfg) {
  Timer timer;
  data::Dataset d = build_run_dataset(cfg);
  fs::create_directories(cfg.output_dir);
  const auto& vocab = data::Vocab::standard();
  data::write_corpus(d.train, vocab, (fs::path(cfg.output_dir) / "train.txt").string());
  data::write_corpus(d.test, vocab, (fs::path(cfg.output_dir) / "test.txt").string());
  write_manifest(cfg.output_dir, "gen-data", cfg,
                 {{"n_train", d.train.size()}, {"n_test", d.test.size()}},
                 {{"train", "train.txt"}, {"test", "test.txt"}}, timer.seconds());
}

double run_find_lr(const ExperimentConfig& cfg) {
  Timer timer;
  data::Dataset d = build_run_dataset(cfg);
  std::vector<std::pair<double, double>> curve;
  train::TrainConfig tc = cfg.train;
  tc.seed = cfg.shuffle_seed();
  auto factory = [&]() {
    return train::make_training_sweep(cfg.model, cfg.init_seed(), d.train, tc);
  };
  double lr = train::lr_range_test(factory, cfg.lr_finder.lr_min, cfg.lr_finder.lr_max,
                                   cfg.lr_finder.steps, &curve);
  fs::create_directories(cfg.output_dir);
  std::string csv = "lr,smoothed_loss\n";
  for (auto& [l, s] : curve) csv += fmt_g(l) + "," + fmt_g(s) + "\n";
  atomic_write_text((fs::path(cfg.output_dir) / "lr_curve.csv").string(), csv);
  write_manifest(cfg.output_dir, "find-lr", cfg,
                 {{"suggested_lr", lr}, {"sweep_points", curve.size()}},
                 {{"curve", "lr_curve.csv"}}, timer.seconds());
  return lr;
}

TrainOutcome run_training(const ExperimentConfig& cfg) {
  Timer timer;
  data::Dataset d = build_run_dataset(cfg);
  fs::create_directories(cfg.output_dir);
  const auto& vocab = data::Vocab::standard();
  data::write_corpus(d.train, vocab, (fs::path(cfg.output_dir) / "train.txt").string());
  data::write_corpus(d.test, vocab, (fs::path(cfg.output_dir) / "test.txt").string());

  double lr = resolve_lr(cfg, d);
  train::TrainConfig tc = cfg.train;
  tc.lr = lr;
  tc.seed = cfg.shuffle_seed();

  model::Parameters params = model::init_parameters<float>(cfg.model, cfg.init_seed());
  telemetry::Recorder rec(tracked_ids(cfg), cfg.model.vocab_size, cfg.model.d_model);
  train::TrainingLog log = train::train(params, d.train, tc, &rec);
  double acc = train::evaluate_exact_match(params, d.test, vocab);
  telemetry::MetricReport report =
      telemetry::build_report(rec, data::occurring_token_ids(d.train), vocab);

  model::save_checkpoint(params, (fs::path(cfg.output_dir) / "checkpoint.bin").string());
  train::write_training_log_csv(log, (fs::path(cfg.output_dir) / "training_log.csv").string());
  telemetry::write_metrics_csv(report,
                               (fs::path(cfg.output_dir) / "telemetry_metrics.csv").string());
  telemetry::write_series_csv(rec, vocab,
                              (fs::path(cfg.output_dir) / "telemetry_series.csv").string());

  TrainOutcome out;
  out.test_accuracy = acc;
  out.final_loss = log.final_loss();
  out.steps = static_cast<int64_t>(log.steps.size());
  out.used_lr = lr;
  out.report = report;
  out.dir = cfg.output_dir;

  write_manifest(cfg.output_dir, "train", cfg,
                 {{"test_accuracy", acc},
                  {"final_loss", out.final_loss},
                  {"steps", out.steps},
                  {"used_lr", lr}},
                 {{"checkpoint", "checkpoint.bin"},
                  {"training_log", "training_log.csv"},
                  {"telemetry_metrics", "telemetry_metrics.csv"},
                  {"telemetry_series", "telemetry_series.csv"},
                  {"train_corpus", "train.txt"},
                  {"test_corpus", "test.txt"}},
                 timer.seconds());
  return out;
}

double run_eval(const std::string& checkpoint_path, const std::string& data_path,
                const std::string& output_dir) {
  Timer timer;
  const auto& vocab = data::Vocab::standard();
  auto samples = data::read_corpus(data_path, vocab);
  if (samples.empty())
    throw std::invalid_argument("eval: no samples in " + data_path);
  model::Parameters params = model::load_checkpoint(checkpoint_path);
  double acc = train::evaluate_exact_match(params, samples, vocab);
  if (!output_dir.empty()) {
    fs::create_directories(output_dir);
    json m;
    m["schema_version"] = 1;
    m["code_version"] = TTLAB_VERSION;
    m["command"] = "eval";
    m["checkpoint"] = checkpoint_path;
    m["data"] = data_path;
    m["results"] = {{"test_accuracy", acc}, {"n_samples", samples.size()}};
    m["timestamp_utc"] = now_utc();
    m["wall_clock_sec"] = timer.seconds();
    atomic_write_text((fs::path(output_dir) / "eval_manifest.json").string(), m.dump(2) + "\n");
  }
  return acc;
}

std::vector<TrainOutcome> run_sweep(const ExperimentConfig& cfg) {
  Timer timer;
  const data::RenderMode modes[] = {data::RenderMode::baseline, data::RenderMode::tt,
                                    data::RenderMode::cot, data::RenderMode::tt_cot};
  const char* labels[] = {"Baseline", "TT", "CoT", "TT+CoT"};
  std::vector<TrainOutcome> outcomes;
  fs::create_directories(cfg.output_dir);
  for (int i = 0; i < 4; ++i) {
    ExperimentConfig sub = cfg;
    sub.dataset.mode = modes[i];
    sub.output_dir = (fs::path(cfg.output_dir) / data::to_string(modes[i])).string();
    std::cout << "[sweep] mode " << data::to_string(modes[i]) << "\n" << std::flush;
    outcomes.push_back(run_training(sub));
    std::cout << "[sweep] mode " << data::to_string(modes[i]) << ": accuracy "
              << outcomes.back().test_accuracy << " after " << outcomes.back().steps
              << " steps\n"
              << std::flush;
  }
  std::string csv = "mode,label,test_accuracy,steps,final_loss,used_lr\n";
  json results = json::object();
  for (int i = 0; i < 4; ++i) {
    csv += std::string(data::to_string(modes[i])) + "," + labels[i] + "," +
           fmt_g(outcomes[static_cast<size_t>(i)].test_accuracy) + "," +
           std::to_string(outcomes[static_cast<size_t>(i)].steps) + "," +
           fmt_g(outcomes[static_cast<size_t>(i)].final_loss) + "," +
           fmt_g(outcomes[static_cast<size_t>(i)].used_lr) + "\n";
    results[data::to_string(modes[i])] = outcomes[static_cast<size_t>(i)].test_accuracy;
  }
  atomic_write_text((fs::path(cfg.output_dir) / "sweep.csv").string(), csv);
  write_manifest(cfg.output_dir, "sweep", cfg, results, {{"table", "sweep.csv"}},
                 timer.seconds());
  return outcomes;
}

GradStudyOutcome run_grad_study(const ExperimentConfig& cfg) {
  Timer timer;
  ExperimentConfig base = cfg;
  if (base.dataset.mode != data::RenderMode::tt && base.dataset.mode != data::RenderMode::tt_cot)
    base.dataset.mode = data::RenderMode::tt;

  ExperimentConfig single = base;
  single.dataset.think_set = {"[t]"};
  single.output_dir = (fs::path(cfg.output_dir) / "single").string();
  ExperimentConfig dual = base;
  dual.dataset.think_set = {"[t]", "[ts]"};
  dual.output_dir = (fs::path(cfg.output_dir) / "dual").string();

  GradStudyOutcome out;
  std::cout << "[grad-study] single thinking token\n" << std::flush;
  out.single_run = run_training(single);
  std::cout << "[grad-study] two thinking tokens\n" << std::flush;
  out.dual_run = run_training(dual);

  fs::create_directories(cfg.output_dir);
  std::string csv =
      "run,token,no_signal,displacement,cum_grad_norm,signal_ratio,direction_variance,"
      "displacement_pct,cum_grad_pct\n";
  auto add_rows = [&](const char* run, const telemetry::MetricReport& rep) {
    for (const auto& m : rep.tokens)
      csv += std::string(run) + "," + m.token + "," + (m.no_signal ? "1" : "0") + "," +
             fmt_g(m.displacement) + "," + fmt_g(m.cum_grad_norm) + "," +
             fmt_g(m.signal_ratio) + "," + fmt_g(m.direction_variance) + "," +
             fmt_g(m.displacement_pct) + "," + fmt_g(m.cum_grad_pct) + "\n";
  };
  add_rows("single", out.single_run.report);
  add_rows("dual", out.dual_run.report);
  atomic_write_text((fs::path(cfg.output_dir) / "comparison.csv").string(), csv);
  write_manifest(cfg.output_dir, "grad-study", cfg,
                 {{"single_accuracy", out.single_run.test_accuracy},
                  {"dual_accuracy", out.dual_run.test_accuracy}},
                 {{"comparison", "comparison.csv"}}, timer.seconds());
  return out;
}

std::string manifest_stable_view(const std::string& manifest_text) {
  json m = json::parse(manifest_text);
  m.erase("timestamp_utc");
  m.erase("wall_clock_sec");
  return m.dump(2) + "\n";
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"toy transformer laboratory for thinking-token experiments"};
  app.require_subcommand(1);

  std::string config_path, output_dir, checkpoint_path, data_path;
  uint64_t seed = 0;
  bool seed_given = false, det_flag = false;
  int64_t max_steps = -1;

  auto add_common = [&](CLI::App* sub, bool needs_config) {
    auto* c = sub->add_option("--config", config_path, "experiment config (json)");
    if (needs_config) c->required();
    sub->add_option("--seed", seed, "master seed override")->each([&](const std::string&) {
      seed_given = true;
    });
    sub->add_option("--output-dir", output_dir, "artifact directory override");
    sub->add_flag("--deterministic", det_flag, "force single-threaded reproducible math");
    sub->add_option("--max-steps", max_steps, "cap optimizer steps (smoke tests)");
  };

  CLI::App* cmd_gen = app.add_subcommand("gen-data", "render a multiplication corpus to disk");
  add_common(cmd_gen, true);
  CLI::App* cmd_findlr = app.add_subcommand("find-lr", "run the learning-rate range sweep");
  add_common(cmd_findlr, true);
  CLI::App* cmd_train = app.add_subcommand("train", "train one model and write artifacts");
  add_common(cmd_train, true);
  CLI::App* cmd_sweep = app.add_subcommand("sweep", "train all four rendering modes");
  add_common(cmd_sweep, true);
  CLI::App* cmd_study =
      app.add_subcommand("grad-study", "matched single vs dual thinking-token runs");
  add_common(cmd_study, true);
  CLI::App* cmd_eval = app.add_subcommand("eval", "exact-match accuracy of a checkpoint");
  cmd_eval->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
  cmd_eval->add_option("--data", data_path, "corpus file to evaluate")->required();
  cmd_eval->add_option("--output-dir", output_dir, "where to write the eval manifest");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  ExperimentConfig cfg;
  try {
    if (!config_path.empty()) {
      cfg = load_config(config_path);
      if (seed_given) {
        cfg.master_seed = seed;
        cfg.seed_dataset.reset();
        cfg.seed_init.reset();
        cfg.seed_shuffle.reset();
      }
      if (!output_dir.empty()) cfg.output_dir = output_dir;
      if (det_flag) cfg.deterministic = true;
      if (max_steps >= 0) cfg.train.max_steps = max_steps;
      cfg.validate();
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (cfg.deterministic) setenv("TTLAB_BLAS_THREADS", "1", 1);
    if (cmd_gen->parsed()) {
      run_gen_data(cfg);
      std::cout << "corpus written to " << cfg.output_dir << "\n";
    } else if (cmd_findlr->parsed()) {
      double lr = run_find_lr(cfg);
      std::cout << "suggested_lr " << fmt_g(lr) << "\n";
    } else if (cmd_train->parsed()) {
      TrainOutcome out = run_training(cfg);
      std::cout << "lr " << fmt_g(out.used_lr) << " steps " << out.steps << " final_loss "
                << fmt_g(out.final_loss) << " test_accuracy " << fmt_g(out.test_accuracy)
                << "\nartifacts in " << out.dir << "\n";
    } else if (cmd_sweep->parsed()) {
      auto outs = run_sweep(cfg);
      std::cout << "sweep test accuracy: baseline " << fmt_g(outs[0].test_accuracy) << ", tt "
                << fmt_g(outs[1].test_accuracy) << ", cot " << fmt_g(outs[2].test_accuracy)
                << ", tt_cot " << fmt_g(outs[3].test_accuracy) << "\n";
    } else if (cmd_study->parsed()) {
      run_grad_study(cfg);
      std::cout << "comparison written to " << cfg.output_dir << "\n";
    } else if (cmd_eval->parsed()) {
      double acc = run_eval(checkpoint_path, data_path, output_dir);
      std::cout << "test_accuracy " << fmt_g(acc) << "\n";
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace ttlab::harness
