#ifndef ALSEG_STRATEGIES_HPP
#define ALSEG_STRATEGIES_HPP

#include "alseg/pool.hpp"
#include "alseg/seed.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <string_view>

namespace alseg {

/// Per-sample class probabilities produced by a learner over a pool.
template <typename Scalar>
class PredictionScores {
 public:
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  static constexpr double kRowSumTolerance = 1e-6;

  PredictionScores(Matrix rows, std::vector<SampleId> row_ids)
      : rows_(std::move(rows)), ids_(std::move(row_ids)) {
    if (static_cast<std::size_t>(rows_.rows()) != ids_.size()) {
      throw std::invalid_argument("PredictionScores: row count differs from id count");
    }
    std::vector<SampleId> sorted = ids_;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
      throw std::invalid_argument("PredictionScores: duplicate sample id");
    }
    for (Eigen::Index i = 0; i < rows_.rows(); ++i) {
      double sum = 0.0;
      for (Eigen::Index k = 0; k < rows_.cols(); ++k) {
        const double p = static_cast<double>(rows_(i, k));
        if (std::isnan(p) || p < 0.0 || p > 1.0) {
          throw std::invalid_argument("PredictionScores: probability outside [0,1] for " +
                                      ids_[static_cast<std::size_t>(i)].str());
        }
        sum += p;
      }
      if (std::abs(sum - 1.0) > kRowSumTolerance) {
        throw std::invalid_argument("PredictionScores: row for " + ids_[static_cast<std::size_t>(i)].str() +
                                    " does not sum to 1");
      }
    }
  }

  const Matrix& rows() const { return rows_; }
  const std::vector<SampleId>& ids() const { return ids_; }
  Eigen::Index num_samples() const { return rows_.rows(); }
  Eigen::Index num_classes() const { return rows_.cols(); }

 private:
  Matrix rows_;
  std::vector<SampleId> ids_;
};

struct RankedSample {
  SampleId id;
  double score = 0.0;
};

/// Samples ordered by (score desc, id asc).
class UncertaintyRanking {
 public:
  UncertaintyRanking() = default;
  /// Sorts the entries into ranking order.
  explicit UncertaintyRanking(std::vector<RankedSample> entries);

  const std::vector<RankedSample>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

 private:
  std::vector<RankedSample> entries_;
};

enum class Strategy { kEntropy, kMargin, kRandom };

Strategy parse_strategy(std::string_view name);
std::string_view strategy_name(Strategy s);

/// -sum p ln p of one row, with 0 ln 0 = 0.
template <typename Derived>
double row_entropy(const Eigen::DenseBase<Derived>& row) {
  double h = 0.0;
  for (Eigen::Index k = 0; k < row.size(); ++k) {
    const double p = static_cast<double>(row(k));
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

/// Difference between the two largest entries of a row.
template <typename Derived>
double row_margin(const Eigen::DenseBase<Derived>& row) {
  double first = -1.0;
  double second = -1.0;
  for (Eigen::Index k = 0; k < row.size(); ++k) {
    const double p = static_cast<double>(row(k));
    if (p > first) {
      second = first;
      first = p;
    } else if (p > second) {
      second = p;
    }
  }
  return first - second;
}

template <typename Scalar>
UncertaintyRanking entropy_scores(const PredictionScores<Scalar>& scores) {
  std::vector<RankedSample> out;
  out.reserve(scores.ids().size());
  for (Eigen::Index i = 0; i < scores.num_samples(); ++i) {
    out.push_back({scores.ids()[static_cast<std::size_t>(i)], row_entropy(scores.rows().row(i))});
  }
  return UncertaintyRanking(std::move(out));
}

/// Uncertainty is the negated top-2 margin, so the smallest margin ranks first.
template <typename Scalar>
UncertaintyRanking margin_scores(const PredictionScores<Scalar>& scores) {
  if (scores.num_classes() < 2) throw std::invalid_argument("margin_scores: need at least two classes");
  std::vector<RankedSample> out;
  out.reserve(scores.ids().size());
  for (Eigen::Index i = 0; i < scores.num_samples(); ++i) {
    out.push_back({scores.ids()[static_cast<std::size_t>(i)], -row_margin(scores.rows().row(i))});
  }
  return UncertaintyRanking(std::move(out));
}

/// Seeded uniform permutation; score of position i is n - i.
UncertaintyRanking random_ranking(std::span<const SampleId> ids, std::uint64_t seed);

/// First q ids of the ranking.
std::vector<SampleId> select_top_q(const UncertaintyRanking& ranking, std::size_t q);

}  // namespace alseg

#endif  // ALSEG_STRATEGIES_HPP
