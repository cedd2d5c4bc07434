#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace ttlab::data {

// Fixed 17-token vocabulary: digits, arithmetic symbols, stop, pad, and the
// two thinking tokens.  Thinking tokens are single ids; in corpus text they
// appear bracketed ("[t]", "[ts]") so lines stay unambiguous.
class Vocab {
 public:
  static constexpr int kStar = 10;
  static constexpr int kPlus = 11;
  static constexpr int kEquals = 12;
  static constexpr int kStop = 13;   // '$'
  static constexpr int kPad = 14;
  static constexpr int kThink = 15;  // "[t]"
  static constexpr int kThinkS = 16; // "[ts]"

  Vocab();
  static const Vocab& standard();

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const;
  int id(const std::string& token) const;
  bool is_think(int id) const { return id == kThink || id == kThinkS; }
  bool is_digit(int id) const { return id >= 0 && id <= 9; }

  // Tokeniser over rendered sample text; throws on any unknown character or
  // malformed bracket sequence.
  std::vector<int> encode(const std::string& text) const;
  std::string decode(const std::vector<int>& ids) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

struct MulProblem {
  int64_t a = 0;
  int64_t b = 0;
};

enum class RenderMode { baseline, tt, cot, tt_cot };
enum class ThinkPlacement { after_equals, before_equals };

RenderMode render_mode_from_string(const std::string& s);
std::string to_string(RenderMode m);
ThinkPlacement think_placement_from_string(const std::string& s);
std::string to_string(ThinkPlacement p);

struct DatasetSpec {
  int digits = 2;
  int64_t n_train = 0;  // 0: min(10000 * digits, space - n_test)
  int64_t n_test = 1000;
  RenderMode mode = RenderMode::baseline;
  int n_think = -1;  // -1: 2 * digits + 1
  std::vector<std::string> think_set = {"[t]"};
  ThinkPlacement placement = ThinkPlacement::after_equals;
  bool supervise_think = true;
  uint64_t seed = 1;

  int64_t space() const;          // count of ordered operand pairs
  int64_t resolved_n_train() const;
  int resolved_n_think() const;
  void validate() const;
};

struct RenderedSample {
  std::vector<int> ids;
  std::vector<uint8_t> loss_mask;  // true from the first '=' onwards
  int answer_begin = -1;           // digit span of the final answer
  int answer_end = -1;
};

struct Dataset {
  std::vector<RenderedSample> train;
  std::vector<RenderedSample> test;
};

// Uniform sample of n distinct ordered pairs of `digits`-digit operands.
// Deterministic per seed; throws if n exceeds the pair space.
std::vector<MulProblem> gen_problems(int digits, int64_t n, uint64_t seed);

// "12*34=408$"
std::string render_baseline(const MulProblem& p);

// "123*456=738+6150+49200=6888+49200=56088$": one partial product per
// multiplier digit (least significant first, zeros kept), then left-fold
// partial sums until a single value remains.
std::string render_cot(const MulProblem& p);

// Inserts n_think thinking tokens adjacent to the first '=', cycling through
// think_set.  placement selects which side of the '=' they land on.
std::string insert_think_tokens(const std::string& text, int n_think,
                                const std::vector<std::string>& think_set,
                                ThinkPlacement placement = ThinkPlacement::after_equals);

// Encodes text and derives the supervision mask and final-answer span.
RenderedSample tokenize(const std::string& text, const Vocab& vocab);

Dataset build_dataset(const DatasetSpec& spec, const Vocab& vocab = Vocab::standard());

// Final '='-delimited field before the stop marker, ignoring thinking tokens;
// nullopt when the text has no well-formed all-digit final field.
std::optional<int64_t> parse_final_answer(const std::string& text);

std::string strip_think_markers(const std::string& text);

// Distinct token ids appearing in the samples, ascending.
std::vector<int> occurring_token_ids(const std::vector<RenderedSample>& samples);

void write_corpus(const std::vector<RenderedSample>& samples, const Vocab& vocab,
                  const std::string& path);
std::vector<RenderedSample> read_corpus(const std::string& path, const Vocab& vocab);

}  // namespace ttlab::data
