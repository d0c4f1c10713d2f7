#include "alseg/active_learner.hpp"

#include "helpers.hpp"

#include <gtest/gtest.h>

#include <set>
#include <sstream>

using namespace alseg;

namespace {

std::string manifest_bytes(const SelectionResult& r, std::uint64_t seed) {
  std::ostringstream out;
  write_manifest(out, r, "h", seed);
  return out.str();
}

}  // namespace

TEST(Sizing, WorkedExample) {
  const auto s = sizes_for_target(0.1, 0.5, 34);
  EXPECT_EQ(s.init_size, 4u);
  EXPECT_EQ(s.per_query, 2u);
}

TEST(Sizing, DeepGlobePool) {
  SelectionConfig cfg;
  cfg.alpha_init = 0.1;
  cfg.beta_q = 0.5;
  const std::size_t expect_target[] = {12, 32, 80};
  const std::size_t expect_init[] = {2, 4, 8};
  const std::size_t expect_nq[] = {1, 2, 4};
  const double ratios[] = {0.02, 0.05, 0.125};
  for (int i = 0; i < 3; ++i) {
    cfg.labeled_ratio = ratios[i];
    const auto s = init_sizes(cfg, 642);
    EXPECT_EQ(s.target, expect_target[i]);
    EXPECT_EQ(s.init_size, expect_init[i]);
    EXPECT_EQ(s.per_query, expect_nq[i]);
  }
}

TEST(Sizing, ExactProductsDoNotRoundUp) {
  EXPECT_EQ(sizes_for_target(0.1, 0.5, 30).init_size, 3u);
  EXPECT_EQ(sizes_for_target(0.3, 1.0, 10).init_size, 3u);
  EXPECT_EQ(sizes_for_target(0.1, 0.3, 100).per_query, 3u);
}

TEST(Sizing, ClampsAndFloors) {
  EXPECT_EQ(sizes_for_target(0.01, 0.5, 5).init_size, 1u);
  EXPECT_EQ(sizes_for_target(0.01, 0.5, 5).per_query, 1u);
  EXPECT_EQ(sizes_for_target(1.0, 1.0, 7).init_size, 7u);
  EXPECT_THROW(sizes_for_target(0.1, 0.5, 0), std::invalid_argument);
}

TEST(Sizing, MatchesDirectFormulaOnGrid) {
  for (std::size_t t = 1; t <= 200; ++t) {
    for (int a = 1; a <= 20; ++a) {
      for (int b = 1; b <= 20; ++b) {
        // Integer arithmetic on hundredths and twentieths keeps the oracle exact.
        const std::size_t init = std::clamp<std::size_t>((a * t + 19) / 20, 1, t);
        const std::size_t nq = std::max<std::size_t>(1, b * init / 20);
        const auto s = sizes_for_target(a / 20.0, b / 20.0, t);
        ASSERT_EQ(s.init_size, init) << t << ' ' << a;
        ASSERT_EQ(s.per_query, nq) << t << ' ' << a << ' ' << b;
      }
    }
  }
}

TEST(SelectionLoop, InvariantsOverRandomConfigs) {
  std::mt19937_64 rng(99);
  const Strategy strategies[] = {Strategy::kEntropy, Strategy::kMargin, Strategy::kRandom};
  for (int trial = 0; trial < 50; ++trial) {
    SelectionConfig cfg;
    cfg.labeled_ratio = std::uniform_real_distribution<double>(0.01, 1.0)(rng);
    cfg.alpha_init = std::uniform_real_distribution<double>(0.01, 1.0)(rng);
    cfg.beta_q = std::uniform_real_distribution<double>(0.01, 1.0)(rng);
    cfg.strategy = strategies[trial % 3];
    cfg.seed = rng();
    const auto ids = test::make_ids(std::uniform_int_distribution<std::size_t>(1, 300)(rng));
    const int k = std::uniform_int_distribution<int>(2, 6)(rng);
    const Oracle oracle = test::hashed_oracle(ids, k);
    const auto sizes = init_sizes(cfg, ids.size());

    std::set<SampleId> seen;
    std::size_t observed = 0;
    auto audit = [&](const PoolPartition& p, const SelectionResult& r) {
      ASSERT_TRUE(p.invariants_hold());
      ASSERT_EQ(p.labeled_ids().size() + p.unlabeled_ids().size(), ids.size());
      ASSERT_EQ(p.labeled_ids().size(), r.labeled_ids.size());
      for (std::size_t i = observed; i < r.labeled_ids.size(); ++i) {
        ASSERT_TRUE(seen.insert(r.labeled_ids[i]).second) << "queried twice: " << r.labeled_ids[i].str();
        ASSERT_TRUE(p.labeled_ids().contains(r.labeled_ids[i]));
      }
      observed = r.labeled_ids.size();
    };

    test::FakeLearner learner(k);
    const auto r = run_active_selection(cfg, ids, oracle, learner, audit);
    EXPECT_EQ(r.labeled_ids.size(), sizes.target);
    EXPECT_EQ(r.labels.size(), sizes.target);
    const std::size_t remaining = sizes.target - sizes.init_size;
    EXPECT_EQ(r.iterations_run, (remaining + sizes.per_query - 1) / sizes.per_query);
    for (std::size_t i = 0; i < r.labeled_ids.size(); ++i) EXPECT_EQ(r.labels[i], oracle.label(r.labeled_ids[i]));
    for (const auto& rec : r.log) EXPECT_LE(rec.queried.size(), sizes.per_query);

    test::FakeLearner again(k);
    EXPECT_EQ(manifest_bytes(r, cfg.seed), manifest_bytes(run_active_selection(cfg, ids, oracle, again), cfg.seed));
  }
}

TEST(SelectionLoop, LastQueryIsClamped) {
  SelectionConfig cfg;
  cfg.labeled_ratio = 1.0;
  cfg.alpha_init = 0.2;
  cfg.beta_q = 1.0;
  const auto ids = test::make_ids(11);  // init 3, N_Q 3: queries of 3, 3, 2
  test::FakeLearner learner(3);
  const auto r = run_active_selection(cfg, ids, test::hashed_oracle(ids, 3), learner);
  ASSERT_EQ(r.log.size(), 3u);
  EXPECT_EQ(r.log.back().queried.size(), 2u);
  EXPECT_EQ(r.log.back().pool_size, 0u);
}

TEST(SelectionLoop, TeachesBeforeEveryQueryButNotAfterTheLast) {
  SelectionConfig cfg;
  cfg.labeled_ratio = 0.5;
  const auto ids = test::make_ids(68);  // X_NL 34, init 4, N_Q 2
  test::FakeLearner learner(4);
  const auto r = run_active_selection(cfg, ids, test::hashed_oracle(ids, 4), learner);
  EXPECT_EQ(r.iterations_run, 15u);
  EXPECT_EQ(learner.teach_calls, 15u);
  EXPECT_EQ(learner.predict_calls, 15);
  EXPECT_EQ(learner.last_taught, 32u);
}

TEST(SelectionLoop, RandomStrategyNeverConsultsLearner) {
  SelectionConfig cfg;
  cfg.strategy = Strategy::kRandom;
  cfg.labeled_ratio = 0.5;
  const auto ids = test::make_ids(40);
  test::FakeLearner learner(2);
  const auto r = run_active_selection(cfg, ids, test::hashed_oracle(ids, 2), learner);
  EXPECT_EQ(learner.teach_calls, 0u);
  EXPECT_EQ(learner.predict_calls, 0);
  for (const auto& rec : r.log) EXPECT_TRUE(std::isnan(rec.pool_accuracy));
}

TEST(SelectionLoop, TargetEqualToInitSkipsQueries) {
  SelectionConfig cfg;
  cfg.labeled_ratio = 0.1;
  cfg.alpha_init = 1.0;
  const auto ids = test::make_ids(20);
  test::FakeLearner learner(2);
  const auto r = run_active_selection(cfg, ids, test::hashed_oracle(ids, 2), learner);
  EXPECT_EQ(r.labeled_ids.size(), 2u);
  EXPECT_EQ(r.iterations_run, 0u);
  EXPECT_EQ(learner.teach_calls, 0u);
}

TEST(SelectionLoop, EntropyQueriesTopOfRanking) {
  const auto ids = test::make_ids(30);
  const Oracle oracle = test::hashed_oracle(ids, 3);
  PoolPartition p(ids);
  test::FakeLearner learner(3);
  const std::vector<SampleId> pool(p.unlabeled_ids().begin(), p.unlabeled_ids().end());
  const auto expected = select_top_q(entropy_scores(learner.predict(pool)), 4);
  const auto q = query_step(learner, p, Strategy::kEntropy, 4, 100, oracle, 0);
  EXPECT_EQ(q.batch.ids, expected);
  EXPECT_EQ(p.unlabeled_ids().size(), 26u);
}

TEST(SelectionLoop, ConfigValidation) {
  SelectionConfig cfg;
  cfg.alpha_init = 0.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg.alpha_init = 0.1;
  cfg.beta_q = -1;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg.beta_q = 0.5;
  cfg.labeled_ratio = 1.5;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Oracle, MissingIdIsAnError) {
  const auto ids = test::make_ids(3);
  const Oracle o = test::hashed_oracle(std::span(ids).first(2), 2);
  EXPECT_NO_THROW(o.label(ids[0]));
  EXPECT_THROW(o.label(ids[2]), std::out_of_range);
}

TEST(Manifest, RoundTrip) {
  SelectionResult r;
  r.labeled_ids = {SampleId("b"), SampleId("a")};
  r.labels = {ImageLabel(2, 3), ImageLabel(0, 3)};
  std::stringstream s;
  write_manifest(s, r, "abc", 17);
  const Manifest m = read_manifest(s, 3);
  EXPECT_EQ(m.ids, r.labeled_ids);
  EXPECT_EQ(m.labels, r.labels);
  EXPECT_EQ(m.config_hash, "abc");
  EXPECT_EQ(m.seed, 17u);
}

TEST(CnnLearner, FitsASeparableSet) {
  const Dataset ds = test::tiny_dataset(40, 8, 8, 3, 5);
  const auto ids = ds.ids();
  const Oracle oracle = Oracle::from_dataset(ds, ids);
  LearnerSpec spec;
  spec.epochs_per_teach = 30;
  spec.base_lr = 0.05;
  spec.lr_step_epochs = 20;
  spec.feature_scale = 10.0;
  CnnLearner learner(ds, spec, 3);
  learner.teach(ids, oracle.labels(ids));
  const auto scores = learner.predict(ids);
  int correct = 0;
  for (Eigen::Index i = 0; i < scores.num_samples(); ++i) {
    Eigen::Index arg = 0;
    scores.rows().row(i).maxCoeff(&arg);
    correct += arg == oracle.label(ids[static_cast<std::size_t>(i)]).class_index();
  }
  EXPECT_GE(correct / 40.0, 0.95);
}

TEST(CnnLearner, SameSeedSameWeights) {
  const Dataset ds = test::tiny_dataset(8, 6, 6, 2, 1);
  const auto ids = ds.ids();
  const Oracle oracle = Oracle::from_dataset(ds, ids);
  LearnerSpec spec;
  spec.epochs_per_teach = 2;
  CnnLearner a(ds, spec, 4), b(ds, spec, 4), c(ds, spec, 5);
  a.teach(ids, oracle.labels(ids));
  b.teach(ids, oracle.labels(ids));
  c.teach(ids, oracle.labels(ids));
  EXPECT_TRUE((a.weights().array() == b.weights().array()).all());
  EXPECT_FALSE((a.weights().array() == c.weights().array()).all());
}
