#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <random>
#include <vector>

#include "ttlab/checkpoint.hpp"
#include "ttlab/data.hpp"
#include "ttlab/gradcheck.hpp"
#include "ttlab/model.hpp"

using namespace ttlab;
using data::Vocab;

namespace {

model::ModelConfig tiny_cfg() {
  model::ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_model = 16;
  cfg.d_ff = 32;
  cfg.ctx_len = 16;
  cfg.vocab_size = 17;
  return cfg;
}

double sample_std(const TensorF& t) {
  double s = 0, s2 = 0;
  for (int64_t i = 0; i < t.numel(); ++i) {
    double v = t.data()[i];
    s += v;
    s2 += v * v;
  }
  double n = static_cast<double>(t.numel());
  return std::sqrt(s2 / n - (s / n) * (s / n));
}

std::vector<int> random_ids(size_t n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, 16);
  std::vector<int> out(n);
  for (auto& v : out) v = pick(rng);
  return out;
}

}  // namespace

TEST_CASE("initialisation is seeded and shaped as documented") {
  auto cfg = tiny_cfg();
  auto p = model::init_parameters<float>(cfg, 5);
  auto q = model::init_parameters<float>(cfg, 5);
  auto r = model::init_parameters<float>(cfg, 6);

  bool pq_same = true, pr_same = true;
  auto pn = p.named(), qn = q.named(), rn = r.named();
  REQUIRE(pn.size() == qn.size());
  for (size_t i = 0; i < pn.size(); ++i) {
    CHECK(pn[i].first == qn[i].first);
    for (int64_t j = 0; j < pn[i].second->numel(); ++j) {
      pq_same = pq_same && pn[i].second->data()[j] == qn[i].second->data()[j];
      pr_same = pr_same && pn[i].second->data()[j] == rn[i].second->data()[j];
    }
  }
  CHECK(pq_same);
  CHECK(!pr_same);

  CHECK(pn.front().first == "wte");
  CHECK(pn[1].first == "wpe");
  CHECK(pn.back().first == "lnf_b");
  CHECK(p.wte.shape() == Shape{17, 16});
  CHECK(p.wpe.shape() == Shape{16, 16});
  CHECK(p.blocks.size() == 2);

  for (auto& b : p.blocks) {
    for (int64_t i = 0; i < 16; ++i) {
      CHECK(b.ln1_g.data()[i] == 1.0f);
      CHECK(b.ln1_b.data()[i] == 0.0f);
      CHECK(b.bo.data()[i] == 0.0f);
      CHECK(b.b_proj.data()[i] == 0.0f);
    }
  }

  // Residual-feeding projections are drawn tighter by 1/sqrt(2 * n_layers).
  model::ModelConfig wide = cfg;
  wide.d_model = 64;
  wide.d_ff = 256;
  wide.n_layers = 4;
  auto w = model::init_parameters<float>(wide, 9);
  CHECK(sample_std(w.blocks[0].wq) > 0.017);
  CHECK(sample_std(w.blocks[0].wq) < 0.023);
  CHECK(sample_std(w.blocks[0].wo) > 0.005);
  CHECK(sample_std(w.blocks[0].wo) < 0.009);
  CHECK(sample_std(w.blocks[0].w_proj) < 0.009);
}

TEST_CASE("parameter count matches the closed form") {
  auto cfg = tiny_cfg();
  auto p = model::init_parameters<float>(cfg, 1);
  int64_t d = cfg.d_model, dff = cfg.d_ff, v = cfg.vocab_size, ctx = cfg.ctx_len;
  int64_t per_block = 4 * d * d + 2 * d * dff + 9 * d + dff;
  int64_t expect = v * d + ctx * d + cfg.n_layers * per_block + 2 * d;
  CHECK(p.num_parameters() == expect);

  cfg.tie_embeddings = false;
  auto u = model::init_parameters<float>(cfg, 1);
  CHECK(u.num_parameters() == expect + v * d);
  CHECK(u.named().back().first == "head");
}

TEST_CASE("output projection reads the embedding only when tied") {
  auto cfg = tiny_cfg();
  auto tied = model::init_parameters<float>(cfg, 3);
  CHECK(tied.output_matrix().same_storage(tied.wte));

  cfg.tie_embeddings = false;
  auto untied = model::init_parameters<float>(cfg, 3);
  CHECK(!untied.output_matrix().same_storage(untied.wte));

  // Embeddings match across the two (same draw order up to the head), so any
  // logits difference comes from the head alone.
  auto ids = random_ids(8, 21);
  auto lt = model::forward(tied, ids);
  auto lu = model::forward(untied, ids);
  REQUIRE(lt.shape() == lu.shape());
  bool differ = false;
  for (int64_t i = 0; i < lt.numel(); ++i) differ = differ || lt.data()[i] != lu.data()[i];
  CHECK(differ);
}

TEST_CASE("forward logits stay pinned to recorded values") {
  model::ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.n_heads = 1;
  cfg.d_model = 8;
  cfg.d_ff = 16;
  cfg.ctx_len = 10;
  cfg.vocab_size = 17;
  auto p = model::init_parameters<float>(cfg, 7);
  auto ids = Vocab::standard().encode("12*34=408$");
  auto logits = model::forward(p, ids);
  REQUIRE(logits.shape() == Shape{10, 17});

  // Recorded once from this configuration; tolerances leave room for fused
  // multiply-add reassociation but not for any change in semantics.
  double total = 0;
  for (int64_t i = 0; i < logits.numel(); ++i) total += logits.data()[i];
  CHECK(total == doctest::Approx(0.157875304).epsilon(1e-4));
  CHECK(logits.data()[0] == doctest::Approx(0.0937896967).epsilon(1e-5));
  CHECK(logits.data()[7] == doctest::Approx(-0.0526397005).epsilon(1e-5));
  CHECK(logits.data()[75] == doctest::Approx(-0.0901420936).epsilon(1e-5));
  CHECK(logits.data()[97] == doctest::Approx(0.106061779).epsilon(1e-5));
  CHECK(logits.data()[139] == doctest::Approx(-0.0218466353).epsilon(1e-5));
  CHECK(logits.data()[169] == doctest::Approx(-0.0418650843).epsilon(1e-5));
}

TEST_CASE("every parameter of a small model passes a finite-difference check") {
  model::ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_model = 8;
  cfg.d_ff = 16;
  cfg.ctx_len = 12;
  cfg.vocab_size = 17;
  auto p = model::init_parameters<double>(cfg, 3);
  const Vocab& v = Vocab::standard();
  std::vector<data::RenderedSample> batch = {
      data::tokenize("3*4=[t]12$", v),
      data::tokenize("9*9=81$", v),
  };
  for (auto& [name, t] : p.named()) {
    std::function<TensorD(TensorD&)> fn = [&](TensorD&) { return model::loss_on_batch(p, batch); };
    double err = finite_diff_check<double>(fn, *t, 1e-5);
    CAPTURE(name);
    CHECK(err < 1e-5);
  }
}

TEST_CASE("future tokens cannot touch earlier logits, bit for bit") {
  auto cfg = tiny_cfg();
  auto p = model::init_parameters<float>(cfg, 11);
  for (uint64_t trial = 0; trial < 6; ++trial) {
    auto ids = random_ids(12, 100 + trial);
    auto base = model::forward(p, ids);
    size_t k = 3 + trial;  // perturb from position k onward
    auto mutated = ids;
    auto repl = random_ids(12, 200 + trial);
    for (size_t i = k; i < mutated.size(); ++i) mutated[i] = repl[i];
    auto changed = model::forward(p, mutated);
    CHECK(std::memcmp(base.data(), changed.data(),
                      sizeof(float) * k * static_cast<size_t>(cfg.vocab_size)) == 0);
  }
}

TEST_CASE("padded batching leaves per-sample losses intact") {
  auto cfg = tiny_cfg();
  cfg.ctx_len = 24;
  auto p = model::init_parameters<float>(cfg, 13);
  const Vocab& v = Vocab::standard();
  auto long_s = data::tokenize("12*34=48+360=408$", v);
  auto short_s = data::tokenize("3*3=9$", v);

  auto supervised = [](const data::RenderedSample& s) {
    int64_t m = 0;
    for (size_t i = 0; i + 1 < s.ids.size(); ++i) m += s.loss_mask[i] ? 1 : 0;
    return m;
  };
  double l1 = model::loss_on_batch(p, {long_s}).item();
  double l2 = model::loss_on_batch(p, {short_s}).item();
  double both = model::loss_on_batch(p, {long_s, short_s}).item();
  double m1 = static_cast<double>(supervised(long_s));
  double m2 = static_cast<double>(supervised(short_s));
  CHECK(both == doctest::Approx((l1 * m1 + l2 * m2) / (m1 + m2)).epsilon(1e-6));

  double twice = model::loss_on_batch(p, {short_s, short_s}).item();
  CHECK(twice == doctest::Approx(l2).epsilon(1e-6));
}

TEST_CASE("forward and loss reject malformed input") {
  auto cfg = tiny_cfg();
  auto p = model::init_parameters<float>(cfg, 17);
  const Vocab& v = Vocab::standard();

  CHECK_THROWS_AS(model::forward_batch(p, random_ids(10, 1), 3, 4), std::invalid_argument);
  CHECK_THROWS_AS(model::forward(p, random_ids(17, 1)), std::invalid_argument);  // ctx is 16
  CHECK_NOTHROW(model::forward(p, random_ids(16, 1)));

  CHECK_THROWS_AS(model::loss_on_batch(p, {}), std::invalid_argument);
  auto one_tok = data::tokenize("=", v);
  CHECK_THROWS_AS(model::loss_on_batch(p, {one_tok}), std::invalid_argument);
  auto unsupervised = data::tokenize("123", v);  // no '=' so empty mask
  CHECK_THROWS_AS(model::loss_on_batch(p, {unsupervised}), std::invalid_argument);
  auto broken = data::tokenize("3*3=9$", v);
  broken.loss_mask.pop_back();
  CHECK_THROWS_AS(model::loss_on_batch(p, {broken}), std::invalid_argument);
}

TEST_CASE("lockstep greedy decoding matches one prompt at a time") {
  auto cfg = tiny_cfg();
  auto p = model::init_parameters<float>(cfg, 19);
  std::vector<std::vector<int>> prompts;
  for (uint64_t i = 0; i < 6; ++i) prompts.push_back(random_ids(5, 300 + i));

  auto batched = model::generate_greedy_batch(p, prompts, 8, Vocab::kStop);
  REQUIRE(batched.size() == prompts.size());
  for (size_t i = 0; i < prompts.size(); ++i) {
    auto single = model::generate_greedy(p, prompts[i], 8, Vocab::kStop);
    CHECK(batched[i] == single);
    CHECK(batched[i].size() <= prompts[i].size() + 8);
    // Nothing after a stop, and the prompt comes through verbatim.
    REQUIRE(batched[i].size() >= prompts[i].size());
    for (size_t j = 0; j < prompts[i].size(); ++j) CHECK(batched[i][j] == prompts[i][j]);
    for (size_t j = prompts[i].size(); j + 1 < batched[i].size(); ++j)
      CHECK(batched[i][j] != Vocab::kStop);
  }

  SUBCASE("context-length prompts can still emit one token") {
    auto full = model::generate_greedy(p, random_ids(16, 500), 8, Vocab::kStop);
    CHECK(full.size() == 17);
  }
  SUBCASE("ragged or empty batches are rejected") {
    CHECK_THROWS_AS(
        model::generate_greedy_batch(p, {{1, 2, 3}, {1, 2}}, 4, Vocab::kStop),
        std::invalid_argument);
    CHECK_THROWS_AS(model::generate_greedy(p, {}, 4, Vocab::kStop), std::invalid_argument);
    CHECK(model::generate_greedy_batch(p, {}, 4, Vocab::kStop).empty());
  }
  SUBCASE("max_new of zero returns the prompts unchanged") {
    auto out = model::generate_greedy_batch(p, prompts, 0, Vocab::kStop);
    for (size_t i = 0; i < prompts.size(); ++i) CHECK(out[i] == prompts[i]);
  }
}

TEST_CASE("checkpoints restore weights bit for bit") {
  auto cfg = tiny_cfg();
  auto p = model::init_parameters<float>(cfg, 23);
  std::string path = "test_ckpt_tmp.bin";
  model::save_checkpoint(p, path);
  auto back = model::load_checkpoint(path);
  CHECK(back.cfg == cfg);

  auto pn = p.named(), bn = back.named();
  REQUIRE(pn.size() == bn.size());
  bool identical = true;
  for (size_t i = 0; i < pn.size(); ++i) {
    identical = identical && pn[i].second->shape() == bn[i].second->shape();
    if (identical)
      identical = std::memcmp(pn[i].second->data(), bn[i].second->data(),
                              sizeof(float) * static_cast<size_t>(pn[i].second->numel())) == 0;
  }
  CHECK(identical);

  auto ids = random_ids(9, 77);
  auto a = model::forward(p, ids);
  auto b = model::forward(back, ids);
  CHECK(std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<size_t>(a.numel())) == 0);
  std::remove(path.c_str());

  SUBCASE("corrupt or missing files are refused") {
    CHECK_THROWS(model::load_checkpoint("no_such_ckpt.bin"));
    std::ofstream bad("bad_ckpt_tmp.bin", std::ios::binary);
    bad << "NOTACKPTxxxxxxxxxxxxxxxx";
    bad.close();
    CHECK_THROWS(model::load_checkpoint("bad_ckpt_tmp.bin"));
    std::remove("bad_ckpt_tmp.bin");
  }
}
