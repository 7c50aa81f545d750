#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "capwm/attacks/attacks.hpp"
#include "capwm/common.hpp"
#include "capwm/prf.hpp"
#include "capwm/toylm/ngram.hpp"

namespace capwm {

// Token layout of the arithmetic task vocabulary.
namespace task_tokens {
inline constexpr TokenId kBos = 0;
inline constexpr TokenId kEos = 1;
inline constexpr TokenId kSep = 2;
inline constexpr TokenId kQuestion = 3;
inline constexpr TokenId kEquals = 4;
inline constexpr TokenId kPlus = 5;
inline constexpr TokenId kAnswer = 6;
inline constexpr TokenId kDigit0 = 7;
}  // namespace task_tokens

struct TaskSpec {
  int vocab_size = 64;
  int modulus = 10;
  // Free filler tokens closing each completion, drawn uniformly from a class.
  int filler_length = 6;
  int filler_class = 4;
  // Style tokens after the scratch result: one preferred token per slot,
  // otherwise a uniform other member of the class.
  int style_length = 4;
  int style_class = 10;
  double style_noise = 0.3;
  // Probability that the scratch result in a training document is wrong.
  double answer_noise = 0.3;
  int shots = 5;

  void validate() const;
};

struct TaskItem {
  TokenSeq prompt;
  TokenSeq reference;
  int answer = 0;
};

// Questions "Q a b" whose completion works out (a + b) mod m:
//   a PLUS b EQ s SEP styles ANS s SEP fillers EOS
class SyntheticTask {
 public:
  explicit SyntheticTask(TaskSpec spec = {});

  const TaskSpec& spec() const { return spec_; }
  int vocab_size() const { return spec_.vocab_size; }
  TokenId digit(int d) const { return task_tokens::kDigit0 + d; }
  TokenId filler(int i) const { return filler_begin_ + i; }
  TokenId style(int i) const { return style_begin_ + i; }

  // Completion for a + b; `rng` draws fillers and, when `noisy`, the
  // training-time errors.
  TokenSeq completion(int a, int b, SplitMix64& rng, bool noisy) const;
  TokenSeq question(int a, int b) const;
  // BOS, `shots` worked examples, then a question.
  TaskItem sample(SplitMix64& rng) const;
  // Training document: BOS followed by shots + 1 noisy examples.
  TokenSeq training_document(SplitMix64& rng) const;

  // Digit after the first ANS, which must be followed by SEP; the completion
  // must be terminated by EOS.
  std::optional<int> extract(std::span<const TokenId> completion) const;

  SynonymTable synonyms() const;

 private:
  TaskSpec spec_;
  TokenId filler_begin_;
  TokenId style_begin_;
};

std::vector<TaskItem> gen_corpus(const SyntheticTask& task, int n, std::uint64_t seed);

NGramParams train_task_model(const SyntheticTask& task, int documents, std::uint64_t seed, int order = 8,
                             double alpha = 0.01);

void save_corpus(std::span<const TaskItem> corpus, const std::filesystem::path& path);
std::vector<TaskItem> load_corpus(const std::filesystem::path& path);

}  // namespace capwm
