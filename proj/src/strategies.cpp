#include "alseg/strategies.hpp"

namespace alseg {

UncertaintyRanking::UncertaintyRanking(std::vector<RankedSample> entries)
    : entries_(std::move(entries)) {
  std::sort(entries_.begin(), entries_.end(), [](const RankedSample& a, const RankedSample& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
}

Strategy parse_strategy(std::string_view name) {
  if (name == "entropy") return Strategy::kEntropy;
  if (name == "margin") return Strategy::kMargin;
  if (name == "random") return Strategy::kRandom;
  throw std::invalid_argument("unknown strategy '" + std::string(name) + "'");
}

std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kEntropy:
      return "entropy";
    case Strategy::kMargin:
      return "margin";
    case Strategy::kRandom:
      return "random";
  }
  return "?";
}

UncertaintyRanking random_ranking(std::span<const SampleId> ids, std::uint64_t seed) {
  if (ids.empty()) throw std::invalid_argument("random_ranking: no ids");
  std::vector<SampleId> order(ids.begin(), ids.end());
  std::sort(order.begin(), order.end());
  Rng rng(seed);
  shuffle_in_place(order, rng);
  std::vector<RankedSample> out;
  out.reserve(order.size());
  const auto n = static_cast<double>(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    out.push_back({order[i], n - static_cast<double>(i)});
  }
  return UncertaintyRanking(std::move(out));
}

std::vector<SampleId> select_top_q(const UncertaintyRanking& ranking, std::size_t q) {
  if (q < 1 || q > ranking.size()) {
    throw std::invalid_argument("select_top_q: q=" + std::to_string(q) + " outside [1," +
                                std::to_string(ranking.size()) + "]");
  }
  std::vector<SampleId> out;
  out.reserve(q);
  for (std::size_t i = 0; i < q; ++i) out.push_back(ranking.entries()[i].id);
  return out;
}

}  // namespace alseg
