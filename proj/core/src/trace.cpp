#include <fstream>
#include <nlohmann/json.hpp>
#include <string>

#include "capwm/adaptive/adaptive.hpp"

namespace capwm {

namespace {

Outcome parse_outcome(const std::string& name) {
  for (Outcome o : {Outcome::kNone, Outcome::kTopK, Outcome::kGlobalBest, Outcome::kGreenBest}) {
    if (to_string(o) == name) return o;
  }
  throw DataError("unknown outcome '" + name + "'");
}

}  // namespace

void save_trace(std::span<const TraceRecord> trace, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& r : trace) {
    nlohmann::json j = {{"position", r.position},
                        {"dist_hash", r.dist_hash},
                        {"score", r.score},
                        {"outcome", to_string(r.outcome)},
                        {"top_k", r.top_k},
                        {"delta", r.delta},
                        {"greedy", r.greedy},
                        {"chosen", r.chosen},
                        {"candidates", r.candidates}};
    out << j.dump() << '\n';
  }
}

std::vector<TraceRecord> load_trace(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::vector<TraceRecord> trace;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      TraceRecord r;
      r.position = j.at("position").get<std::size_t>();
      r.dist_hash = j.at("dist_hash").get<std::uint64_t>();
      r.score = j.at("score").get<double>();
      r.outcome = parse_outcome(j.at("outcome").get<std::string>());
      r.top_k = j.at("top_k").get<int>();
      r.delta = j.at("delta").get<double>();
      r.greedy = j.at("greedy").get<TokenId>();
      r.chosen = j.at("chosen").get<TokenId>();
      r.candidates = j.at("candidates").get<std::vector<TokenId>>();
      trace.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return trace;
}

}  // namespace capwm
