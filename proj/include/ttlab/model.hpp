#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ttlab/data.hpp"
#include "ttlab/tensor.hpp"

namespace ttlab::model {

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 128;
  int d_ff = 512;
  int ctx_len = 128;
  int vocab_size = 17;
  bool tie_embeddings = true;
  double init_std = 0.02;

  void validate() const {
    if (n_layers < 1) throw std::invalid_argument("model: n_layers must be >= 1");
    if (n_heads < 1 || d_model % n_heads != 0)
      throw std::invalid_argument("model: d_model " + std::to_string(d_model) +
                                  " not divisible by n_heads " + std::to_string(n_heads));
    if (d_ff < 1) throw std::invalid_argument("model: d_ff must be >= 1");
    if (ctx_len < 2) throw std::invalid_argument("model: ctx_len must be >= 2");
    if (vocab_size < 2) throw std::invalid_argument("model: vocab_size must be >= 2");
    if (init_std < 0) throw std::invalid_argument("model: init_std must be >= 0");
  }

  bool operator==(const ModelConfig&) const = default;
};

template <typename S>
struct BlockT {
  TensorT<S> ln1_g, ln1_b;
  TensorT<S> wq, bq, wk, bk, wv, bv, wo, bo;
  TensorT<S> ln2_g, ln2_b;
  TensorT<S> w_fc, b_fc, w_proj, b_proj;
};

// All learned state.  With tie_embeddings the output projection reads the
// token embedding matrix directly, so `head` stays undefined.
template <typename S>
struct ParametersT {
  ModelConfig cfg;
  TensorT<S> wte;  // [vocab x d_model]
  TensorT<S> wpe;  // [ctx_len x d_model]
  std::vector<BlockT<S>> blocks;
  TensorT<S> lnf_g, lnf_b;
  TensorT<S> head;  // [vocab x d_model], untied only

  TensorT<S>& output_matrix() { return cfg.tie_embeddings ? wte : head; }

  std::vector<std::pair<std::string, TensorT<S>*>> named() {
    std::vector<std::pair<std::string, TensorT<S>*>> out;
    out.emplace_back("wte", &wte);
    out.emplace_back("wpe", &wpe);
    for (size_t l = 0; l < blocks.size(); ++l) {
      auto& b = blocks[l];
      std::string p = "block" + std::to_string(l) + ".";
      out.emplace_back(p + "ln1_g", &b.ln1_g);
      out.emplace_back(p + "ln1_b", &b.ln1_b);
      out.emplace_back(p + "wq", &b.wq);
      out.emplace_back(p + "bq", &b.bq);
      out.emplace_back(p + "wk", &b.wk);
      out.emplace_back(p + "bk", &b.bk);
      out.emplace_back(p + "wv", &b.wv);
      out.emplace_back(p + "bv", &b.bv);
      out.emplace_back(p + "wo", &b.wo);
      out.emplace_back(p + "bo", &b.bo);
      out.emplace_back(p + "ln2_g", &b.ln2_g);
      out.emplace_back(p + "ln2_b", &b.ln2_b);
      out.emplace_back(p + "w_fc", &b.w_fc);
      out.emplace_back(p + "b_fc", &b.b_fc);
      out.emplace_back(p + "w_proj", &b.w_proj);
      out.emplace_back(p + "b_proj", &b.b_proj);
    }
    out.emplace_back("lnf_g", &lnf_g);
    out.emplace_back("lnf_b", &lnf_b);
    if (!cfg.tie_embeddings) out.emplace_back("head", &head);
    return out;
  }

  void zero_grads() {
    for (auto& [name, t] : named()) t->zero_grad();
  }

  int64_t num_parameters() {
    int64_t n = 0;
    for (auto& [name, t] : named()) n += t->numel();
    return n;
  }

  bool all_finite() {
    for (auto& [name, t] : named())
      for (int64_t i = 0; i < t->numel(); ++i)
        if (!std::isfinite(static_cast<double>(t->data()[i]))) return false;
    return true;
  }
};

using Parameters = ParametersT<float>;

// Gaussian init for projection matrices, ones/zeros for layer norms, zeros
// for biases.  Residual-feeding projections (attention out, mlp out) are
// drawn at std / sqrt(2 * n_layers) so residual variance stays flat across
// depth.  Draw order is fixed, so a seed pins every weight.
template <typename S>
ParametersT<S> init_parameters(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  double resid_std = cfg.init_std / std::sqrt(2.0 * cfg.n_layers);

  ParametersT<S> p;
  p.cfg = cfg;
  auto mat = [&](int64_t r, int64_t c, double std) {
    TensorT<S> t({r, c}, S(0), true);
    fill_normal(t, 0.0, std, rng);
    return t;
  };
  auto vec_of = [&](int64_t n, S v) { return TensorT<S>(Shape{n}, v, true); };

  int64_t d = cfg.d_model, v = cfg.vocab_size;
  p.wte = mat(v, d, cfg.init_std);
  p.wpe = mat(cfg.ctx_len, d, cfg.init_std);
  p.blocks.resize(static_cast<size_t>(cfg.n_layers));
  for (auto& b : p.blocks) {
    b.ln1_g = vec_of(d, S(1));
    b.ln1_b = vec_of(d, S(0));
    b.wq = mat(d, d, cfg.init_std);
    b.bq = vec_of(d, S(0));
    b.wk = mat(d, d, cfg.init_std);
    b.bk = vec_of(d, S(0));
    b.wv = mat(d, d, cfg.init_std);
    b.bv = vec_of(d, S(0));
    b.wo = mat(d, d, resid_std);
    b.bo = vec_of(d, S(0));
    b.ln2_g = vec_of(d, S(1));
    b.ln2_b = vec_of(d, S(0));
    b.w_fc = mat(d, cfg.d_ff, cfg.init_std);
    b.b_fc = vec_of(cfg.d_ff, S(0));
    b.w_proj = mat(cfg.d_ff, d, resid_std);
    b.b_proj = vec_of(d, S(0));
  }
  p.lnf_g = vec_of(d, S(1));
  p.lnf_b = vec_of(d, S(0));
  if (!cfg.tie_embeddings) p.head = mat(v, d, cfg.init_std);
  return p;
}

// Next-token logits for `batch` packed sequences of equal length t.
// ids is row-major [batch x t]; returns [batch*t x vocab].
template <typename S>
TensorT<S> forward_batch(ParametersT<S>& p, const std::vector<int>& ids, int64_t batch,
                         int64_t t) {
  if (batch < 1 || t < 1 || static_cast<int64_t>(ids.size()) != batch * t)
    throw std::invalid_argument("forward: ids size " + std::to_string(ids.size()) +
                                " does not match batch " + std::to_string(batch) + " x t " +
                                std::to_string(t));
  if (t > p.cfg.ctx_len)
    throw std::invalid_argument("forward: sequence length " + std::to_string(t) +
                                " exceeds context length " + std::to_string(p.cfg.ctx_len));
  int64_t heads = p.cfg.n_heads;
  int64_t hd = p.cfg.d_model / heads;
  S att_scale = S(1) / static_cast<S>(std::sqrt(static_cast<double>(hd)));

  std::vector<int> pos(ids.size());
  for (int64_t i = 0; i < batch * t; ++i) pos[static_cast<size_t>(i)] = static_cast<int>(i % t);

  TensorT<S> x = add(embedding_lookup(p.wte, ids), embedding_lookup(p.wpe, pos));
  for (auto& b : p.blocks) {
    TensorT<S> h = layer_norm(x, b.ln1_g, b.ln1_b);
    TensorT<S> q = split_heads(add_bias(matmul(h, b.wq), b.bq), batch, t, heads);
    TensorT<S> k = split_heads(add_bias(matmul(h, b.wk), b.bk), batch, t, heads);
    TensorT<S> v = split_heads(add_bias(matmul(h, b.wv), b.bv), batch, t, heads);
    TensorT<S> att = softmax_rows(apply_causal_mask(scale(batched_matmul_nt(q, k), att_scale)));
    TensorT<S> ctx = merge_heads(batched_matmul(att, v), batch, t, heads);
    x = add(x, add_bias(matmul(ctx, b.wo), b.bo));
    TensorT<S> m = gelu(add_bias(matmul(layer_norm(x, b.ln2_g, b.ln2_b), b.w_fc), b.b_fc));
    x = add(x, add_bias(matmul(m, b.w_proj), b.b_proj));
  }
  x = layer_norm(x, p.lnf_g, p.lnf_b);
  return matmul_nt(x, p.output_matrix());
}

template <typename S>
TensorT<S> forward(ParametersT<S>& p, const std::vector<int>& ids) {
  return forward_batch(p, ids, 1, static_cast<int64_t>(ids.size()));
}

// Mean masked next-token loss over a batch of variable-length samples.
// Sequences are right-padded to the longest sample; position i is supervised
// when its own mask bit is set and a next token exists.
template <typename S>
TensorT<S> loss_on_batch(ParametersT<S>& p, const std::vector<data::RenderedSample>& batch,
                         int pad_id = data::Vocab::kPad) {
  if (batch.empty()) throw std::invalid_argument("loss_on_batch: empty batch");
  int64_t t_max = 0;
  for (const auto& s : batch) {
    if (s.ids.size() < 2)
      throw std::invalid_argument("loss_on_batch: sample shorter than 2 tokens");
    if (s.loss_mask.size() != s.ids.size())
      throw std::invalid_argument("loss_on_batch: mask length != sample length");
    bool any = false;
    for (size_t i = 0; i + 1 < s.ids.size(); ++i) any |= (s.loss_mask[i] != 0);
    if (!any)
      throw std::invalid_argument("loss_on_batch: sample has no supervised positions");
    t_max = std::max<int64_t>(t_max, static_cast<int64_t>(s.ids.size()));
  }
  int64_t bsz = static_cast<int64_t>(batch.size());
  std::vector<int> ids(static_cast<size_t>(bsz * t_max), pad_id);
  std::vector<int> targets(static_cast<size_t>(bsz * t_max), 0);
  std::vector<uint8_t> mask(static_cast<size_t>(bsz * t_max), 0);
  for (int64_t r = 0; r < bsz; ++r) {
    const auto& s = batch[static_cast<size_t>(r)];
    int64_t len = static_cast<int64_t>(s.ids.size());
    for (int64_t i = 0; i < len; ++i) ids[static_cast<size_t>(r * t_max + i)] = s.ids[static_cast<size_t>(i)];
    for (int64_t i = 0; i + 1 < len; ++i) {
      targets[static_cast<size_t>(r * t_max + i)] = s.ids[static_cast<size_t>(i + 1)];
      mask[static_cast<size_t>(r * t_max + i)] = s.loss_mask[static_cast<size_t>(i)];
    }
  }
  TensorT<S> logits = forward_batch(p, ids, bsz, t_max);
  return cross_entropy(logits, targets, mask);
}

// Greedy decoding for a batch of equal-length prompts, running all rows in
// lockstep (rows are independent under the causal mask, so this matches
// one-at-a-time decoding exactly).  Each row stops contributing once it has
// emitted stop_id; decoding ends when all rows have stopped or max_new is
// reached.  Ties pick the lowest token id.
template <typename S>
std::vector<std::vector<int>> generate_greedy_batch(ParametersT<S>& p,
                                                    const std::vector<std::vector<int>>& prompts,
                                                    int max_new, int stop_id) {
  if (prompts.empty()) return {};
  size_t plen = prompts[0].size();
  if (plen == 0) throw std::invalid_argument("generate: empty prompt");
  for (const auto& q : prompts)
    if (q.size() != plen)
      throw std::invalid_argument("generate: prompts in one batch must share a length");
  int64_t bsz = static_cast<int64_t>(prompts.size());

  // work keeps all rows the same length (finished rows grow with padding);
  // out collects the real generations.
  std::vector<std::vector<int>> work = prompts;
  std::vector<std::vector<int>> out = prompts;
  std::vector<uint8_t> done(static_cast<size_t>(bsz), 0);
  for (int step = 0; step < max_new; ++step) {
    int64_t t = static_cast<int64_t>(plen) + step + 1;
    if (t > p.cfg.ctx_len + 1) break;  // next forward would exceed the context
    int64_t cur = t - 1;
    std::vector<int> ids(static_cast<size_t>(bsz * cur));
    for (int64_t r = 0; r < bsz; ++r)
      for (int64_t i = 0; i < cur; ++i)
        ids[static_cast<size_t>(r * cur + i)] = work[static_cast<size_t>(r)][static_cast<size_t>(i)];
    TensorT<S> logits = forward_batch(p, ids, bsz, cur);
    const S* pl = logits.data();
    int64_t v = p.cfg.vocab_size;
    bool all_done = true;
    for (int64_t r = 0; r < bsz; ++r) {
      if (done[static_cast<size_t>(r)]) {
        work[static_cast<size_t>(r)].push_back(data::Vocab::kPad);
        continue;
      }
      const S* row = pl + ((r + 1) * cur - 1) * v;
      int best = 0;
      for (int j = 1; j < v; ++j)
        if (row[j] > row[best]) best = j;
      work[static_cast<size_t>(r)].push_back(best);
      out[static_cast<size_t>(r)].push_back(best);
      if (best == stop_id)
        done[static_cast<size_t>(r)] = 1;
      else
        all_done = false;
    }
    if (all_done) break;
  }
  return out;
}

template <typename S>
std::vector<int> generate_greedy(ParametersT<S>& p, const std::vector<int>& prompt, int max_new,
                                 int stop_id) {
  return generate_greedy_batch(p, std::vector<std::vector<int>>{prompt}, max_new, stop_id)[0];
}

}  // namespace ttlab::model
