#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace capwm {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

// Pre-softmax scores over the vocabulary.
using LogitsRow = std::vector<double>;
// Nonnegative, sums to one.
using ProbDist = std::vector<double>;

// Invalid configuration values (bad dimensions, out-of-range fractions, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A call that violates an operation's precondition.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Input data that cannot support the requested computation
// (too-short text, degenerate distribution, single-class dataset, ...).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numerically stable softmax.
ProbDist softmax(std::span<const double> logits);

// Log-softmax, used for likelihood scoring.
std::vector<double> log_softmax(std::span<const double> logits);

// Index of the largest entry; the lowest index wins ties.
TokenId argmax(std::span<const double> values);

// Shannon entropy in nats. Zero-probability entries contribute nothing.
double entropy(std::span<const double> dist);

// Entropy divided by ln(V); 0 for V < 2.
double normalized_entropy(std::span<const double> dist);

// Indices of the k largest entries, descending by value, ties to lower index.
std::vector<TokenId> top_k_indices(std::span<const double> values, std::size_t k);

// True when every entry is >= 0 and the sum is within tol of one.
bool is_valid_distribution(std::span<const double> dist, double tol = 1e-9);

}  // namespace capwm
