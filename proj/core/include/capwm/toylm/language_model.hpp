#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "capwm/common.hpp"

namespace capwm {

// How a session computes next-position logits for several uncommitted
// candidates that share the committed prefix.
enum class BranchMode {
  kTree,        // one masked pass over all candidates
  kSequential,  // one candidate at a time on a forked cache
  kBatched,     // every candidate on its own cache copy, all held at once
};

// Pre-generated next-position logits for each candidate, plus the backend
// state needed to commit any one of them without recomputation.
struct BranchSet {
  std::vector<TokenId> candidates;
  std::vector<LogitsRow> logits;
  std::vector<std::vector<double>> state;
};

struct DecodeCounters {
  std::size_t extend_calls = 0;
  std::size_t branch_calls = 0;
  std::size_t commit_calls = 0;
  std::size_t rows_computed = 0;
  std::size_t peak_scratch_bytes = 0;
};

// One generation session. Owns its cache; never shared between threads.
class DecodeSession {
 public:
  virtual ~DecodeSession() = default;

  // Commits `tokens` to the prefix and returns the logits for the position
  // after the last of them. `tokens` must be non-empty.
  virtual LogitsRow extend(std::span<const TokenId> tokens) = 0;

  // Logits for the position after each candidate, leaving the prefix as is.
  virtual BranchSet branch(std::span<const TokenId> candidates,
                           BranchMode mode = BranchMode::kTree) = 0;

  // Appends branches.candidates[index] to the prefix using the state
  // computed by branch().
  virtual void commit(const BranchSet& branches, std::size_t index) = 0;

  virtual std::size_t length() const = 0;

  const DecodeCounters& counters() const { return counters_; }

 protected:
  void note_scratch(std::size_t bytes) {
    if (bytes > counters_.peak_scratch_bytes) counters_.peak_scratch_bytes = bytes;
  }
  DecodeCounters counters_;
};

// Uniform next-token interface over the built-in backends. Implementations
// are immutable and safe to share across sessions.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;
  virtual int vocab_size() const = 0;
  virtual std::string backend_name() const = 0;
  virtual std::unique_ptr<DecodeSession> open_session() const = 0;
};

// Uncached convenience: logits following `prefix` (non-empty).
LogitsRow next_logits(const LanguageModel& model, std::span<const TokenId> prefix);

// Rejects candidate lists that are empty or contain duplicates.
void check_candidates(std::span<const TokenId> candidates, int vocab_size);

}  // namespace capwm
