#include "ttlab/data.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace ttlab::data {

namespace {

int64_t pow10_i64(int e) {
  int64_t r = 1;
  while (e-- > 0) r *= 10;
  return r;
}

}  // namespace

Vocab::Vocab() {
  for (int d = 0; d <= 9; ++d) tokens_.push_back(std::string(1, static_cast<char>('0' + d)));
  tokens_.push_back("*");
  tokens_.push_back("+");
  tokens_.push_back("=");
  tokens_.push_back("$");
  tokens_.push_back("_");  // pad; never appears in corpus text
  tokens_.push_back("[t]");
  tokens_.push_back("[ts]");
  for (int i = 0; i < size(); ++i) ids_[tokens_[static_cast<size_t>(i)]] = i;
}

const Vocab& Vocab::standard() {
  static const Vocab v;
  return v;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size())
    throw std::out_of_range("vocab: id " + std::to_string(id) + " outside [0, " +
                            std::to_string(size()) + ")");
  return tokens_[static_cast<size_t>(id)];
}

int Vocab::id(const std::string& token) const {
  auto it = ids_.find(token);
  if (it == ids_.end()) throw std::out_of_range("vocab: unknown token \"" + token + "\"");
  return it->second;
}

std::vector<int> Vocab::encode(const std::string& text) const {
  std::vector<int> out;
  out.reserve(text.size());
  size_t i = 0;
  while (i < text.size()) {
    if (text[i] == '[') {
      size_t j = text.find(']', i);
      if (j == std::string::npos)
        throw std::invalid_argument("encode: unterminated '[' at offset " + std::to_string(i));
      out.push_back(id(text.substr(i, j - i + 1)));
      i = j + 1;
    } else {
      out.push_back(id(std::string(1, text[i])));
      ++i;
    }
  }
  return out;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int t : ids) out += token(t);
  return out;
}

RenderMode render_mode_from_string(const std::string& s) {
  if (s == "baseline") return RenderMode::baseline;
  if (s == "tt") return RenderMode::tt;
  if (s == "cot") return RenderMode::cot;
  if (s == "tt_cot") return RenderMode::tt_cot;
  throw std::invalid_argument("unknown render mode \"" + s + "\"");
}

std::string to_string(RenderMode m) {
  switch (m) {
    case RenderMode::baseline: return "baseline";
    case RenderMode::tt: return "tt";
    case RenderMode::cot: return "cot";
    case RenderMode::tt_cot: return "tt_cot";
  }
  return "?";
}

ThinkPlacement think_placement_from_string(const std::string& s) {
  if (s == "after_equals") return ThinkPlacement::after_equals;
  if (s == "before_equals") return ThinkPlacement::before_equals;
  throw std::invalid_argument("unknown think placement \"" + s + "\"");
}

std::string to_string(ThinkPlacement p) {
  return p == ThinkPlacement::after_equals ? "after_equals" : "before_equals";
}

int64_t DatasetSpec::space() const {
  int64_t span = pow10_i64(digits) - pow10_i64(digits - 1);
  return span * span;
}

int64_t DatasetSpec::resolved_n_train() const {
  if (n_train > 0) return n_train;
  return std::min<int64_t>(10000 * digits, space() - n_test);
}

int DatasetSpec::resolved_n_think() const {
  return n_think >= 0 ? n_think : 2 * digits + 1;
}

void DatasetSpec::validate() const {
  if (digits < 1 || digits > 9)
    throw std::invalid_argument("dataset: digits must be in [1, 9], got " +
                                std::to_string(digits));
  if (n_test < 0) throw std::invalid_argument("dataset: n_test must be >= 0");
  if (resolved_n_train() < 1)
    throw std::invalid_argument("dataset: resolved train size is " +
                                std::to_string(resolved_n_train()));
  if (resolved_n_train() + n_test > space())
    throw std::invalid_argument("dataset: " + std::to_string(resolved_n_train() + n_test) +
                                " samples requested but only " + std::to_string(space()) +
                                " distinct operand pairs exist for " + std::to_string(digits) +
                                "-digit operands");
  if (mode == RenderMode::tt || mode == RenderMode::tt_cot) {
    if (resolved_n_think() < 1)
      throw std::invalid_argument("dataset: thinking-token modes need n_think >= 1");
    if (think_set.empty())
      throw std::invalid_argument("dataset: thinking-token modes need a non-empty think_set");
    const Vocab& v = Vocab::standard();
    for (const auto& t : think_set)
      if (!v.is_think(v.id(t)))
        throw std::invalid_argument("dataset: \"" + t + "\" is not a thinking token");
  }
}

std::vector<MulProblem> gen_problems(int digits, int64_t n, uint64_t seed) {
  if (digits < 1 || digits > 9)
    throw std::invalid_argument("gen_problems: digits must be in [1, 9]");
  int64_t lo = pow10_i64(digits - 1);
  int64_t span = pow10_i64(digits) - lo;
  int64_t space = span * span;
  if (n < 0 || n > space)
    throw std::invalid_argument("gen_problems: n=" + std::to_string(n) + " but only " +
                                std::to_string(space) + " distinct pairs exist");
  std::mt19937_64 rng(seed);
  std::vector<MulProblem> out;
  out.reserve(static_cast<size_t>(n));
  // Dense spaces get a partial Fisher-Yates over the full enumeration; sparse
  // ones use rejection sampling, where collisions are rare by construction.
  if (space <= (int64_t{1} << 22) && 3 * n >= space) {
    std::vector<int64_t> idx(static_cast<size_t>(space));
    for (int64_t i = 0; i < space; ++i) idx[static_cast<size_t>(i)] = i;
    for (int64_t i = 0; i < n; ++i) {
      std::uniform_int_distribution<int64_t> pick(i, space - 1);
      std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(pick(rng))]);
      int64_t k = idx[static_cast<size_t>(i)];
      out.push_back({lo + k / span, lo + k % span});
    }
  } else {
    std::unordered_set<int64_t> seen;
    seen.reserve(static_cast<size_t>(n) * 2);
    std::uniform_int_distribution<int64_t> pick(0, space - 1);
    while (static_cast<int64_t>(out.size()) < n) {
      int64_t k = pick(rng);
      if (seen.insert(k).second) out.push_back({lo + k / span, lo + k % span});
    }
  }
  return out;
}

std::string render_baseline(const MulProblem& p) {
  return std::to_string(p.a) + "*" + std::to_string(p.b) + "=" + std::to_string(p.a * p.b) + "$";
}

std::string render_cot(const MulProblem& p) {
  // One partial product per multiplier digit, least significant first, zeros
  // included; then fold the terms left to right, one addition per stage.
  std::vector<int64_t> terms;
  int64_t b = p.b, shift = 1;
  while (b > 0) {
    terms.push_back(p.a * (b % 10) * shift);
    b /= 10;
    shift *= 10;
  }
  auto join = [](const std::vector<int64_t>& v) {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) {
      if (i) s += "+";
      s += std::to_string(v[i]);
    }
    return s;
  };
  std::string out = std::to_string(p.a) + "*" + std::to_string(p.b) + "=" + join(terms);
  while (terms.size() > 1) {
    terms[1] += terms[0];
    terms.erase(terms.begin());
    out += "=" + join(terms);
  }
  out += "$";
  return out;
}

std::string insert_think_tokens(const std::string& text, int n_think,
                                const std::vector<std::string>& think_set,
                                ThinkPlacement placement) {
  if (n_think < 0) throw std::invalid_argument("insert_think_tokens: n_think must be >= 0");
  if (n_think == 0) return text;
  if (think_set.empty())
    throw std::invalid_argument("insert_think_tokens: empty think_set");
  size_t eq = text.find('=');
  if (eq == std::string::npos)
    throw std::invalid_argument("insert_think_tokens: no '=' in \"" + text + "\"");
  std::string block;
  for (int i = 0; i < n_think; ++i) block += think_set[static_cast<size_t>(i) % think_set.size()];
  size_t at = placement == ThinkPlacement::after_equals ? eq + 1 : eq;
  std::string out = text;
  out.insert(at, block);
  return out;
}

RenderedSample tokenize(const std::string& text, const Vocab& vocab) {
  RenderedSample s;
  s.ids = vocab.encode(text);
  s.loss_mask.assign(s.ids.size(), 0);
  size_t first_eq = s.ids.size();
  for (size_t i = 0; i < s.ids.size(); ++i) {
    if (s.ids[i] == Vocab::kEquals) {
      first_eq = i;
      break;
    }
  }
  for (size_t i = first_eq; i < s.ids.size(); ++i) s.loss_mask[i] = 1;

  size_t last_eq = std::string::npos;
  for (size_t i = 0; i < s.ids.size(); ++i)
    if (s.ids[i] == Vocab::kEquals) last_eq = i;
  if (last_eq != std::string::npos) {
    size_t b = last_eq + 1;
    while (b < s.ids.size() && vocab.is_think(s.ids[b])) ++b;
    size_t e = b;
    while (e < s.ids.size() && vocab.is_digit(s.ids[e])) ++e;
    if (e > b) {
      s.answer_begin = static_cast<int>(b);
      s.answer_end = static_cast<int>(e);
    }
  }
  return s;
}

Dataset build_dataset(const DatasetSpec& spec, const Vocab& vocab) {
  spec.validate();
  int64_t n_train = spec.resolved_n_train();
  auto problems = gen_problems(spec.digits, n_train + spec.n_test, spec.seed);

  auto render = [&](const MulProblem& p) {
    std::string text = (spec.mode == RenderMode::cot || spec.mode == RenderMode::tt_cot)
                           ? render_cot(p)
                           : render_baseline(p);
    if (spec.mode == RenderMode::tt || spec.mode == RenderMode::tt_cot)
      text = insert_think_tokens(text, spec.resolved_n_think(), spec.think_set, spec.placement);
    RenderedSample s = tokenize(text, vocab);
    if (!spec.supervise_think) {
      for (size_t i = 0; i + 1 < s.ids.size(); ++i)
        if (vocab.is_think(s.ids[i + 1])) s.loss_mask[i] = 0;
    }
    return s;
  };

  Dataset d;
  d.train.reserve(static_cast<size_t>(n_train));
  d.test.reserve(static_cast<size_t>(spec.n_test));
  for (int64_t i = 0; i < n_train; ++i) d.train.push_back(render(problems[static_cast<size_t>(i)]));
  for (int64_t i = n_train; i < n_train + spec.n_test; ++i)
    d.test.push_back(render(problems[static_cast<size_t>(i)]));
  return d;
}

std::string strip_think_markers(const std::string& text) {
  std::string out;
  size_t i = 0;
  while (i < text.size()) {
    if (text[i] == '[') {
      size_t j = text.find(']', i);
      if (j == std::string::npos) {
        out += text.substr(i);
        break;
      }
      i = j + 1;
    } else {
      out += text[i];
      ++i;
    }
  }
  return out;
}

std::optional<int64_t> parse_final_answer(const std::string& text) {
  std::string t = strip_think_markers(text);
  size_t stop = t.find('$');
  if (stop == std::string::npos) return std::nullopt;
  size_t eq = t.rfind('=', stop);
  if (eq == std::string::npos) return std::nullopt;
  std::string field = t.substr(eq + 1, stop - eq - 1);
  if (field.empty() || field.size() > 18) return std::nullopt;
  for (char c : field)
    if (c < '0' || c > '9') return std::nullopt;
  return std::stoll(field);
}

std::vector<int> occurring_token_ids(const std::vector<RenderedSample>& samples) {
  std::set<int> ids;
  for (const auto& s : samples)
    for (int t : s.ids) ids.insert(t);
  return {ids.begin(), ids.end()};
}

void write_corpus(const std::vector<RenderedSample>& samples, const Vocab& vocab,
                  const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_corpus: cannot open " + path);
  for (const auto& s : samples) f << vocab.decode(s.ids) << "\n";
  if (!f) throw std::runtime_error("write_corpus: write to " + path + " failed");
}

std::vector<RenderedSample> read_corpus(const std::string& path, const Vocab& vocab) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_corpus: cannot open " + path);
  std::vector<RenderedSample> out;
  std::string line;
  while (std::getline(f, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
    if (line.empty()) continue;
    out.push_back(tokenize(line, vocab));
  }
  return out;
}

}  // namespace ttlab::data
