#include "alseg/s4gan_trainer.hpp"

#include "helpers.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace alseg;
using V = Var<double>;

namespace {

V probs_from(const std::vector<double>& values, const nn::Shape& s) {
  return nn::constant<double>(s, Eigen::Map<const nn::Buffer<double>>(values.data(), static_cast<Index>(values.size())));
}

GanConfig toy_config(int iterations) {
  GanConfig c;
  c.iterations = iterations;
  c.batch_size = 2;
  c.unlabeled_batch_size = 2;
  c.pseudo_draw = 1;
  c.segmenter_width = 4;
  c.disc_widths = {4, 4, 8, 8};
  c.seed = 21;
  return c;
}

struct ToyRun {
  Dataset dataset;
  std::vector<SampleId> labeled;
  std::vector<SampleId> unlabeled;
};

ToyRun toy_run() {
  ToyRun r{test::tiny_dataset(12, 16, 16, 3, 8), {}, {}};
  const auto ids = r.dataset.ids();
  r.labeled.assign(ids.begin(), ids.begin() + 4);
  r.unlabeled.assign(ids.begin() + 4, ids.end());
  return r;
}

std::vector<std::string> run_rows(S4GanTrainer& t, int steps) {
  std::vector<std::string> rows;
  for (int i = 0; i < steps; ++i) rows.push_back(format_log_row(t.step()));
  return rows;
}

}  // namespace

TEST(Losses, CrossEntropyPerfectAndUniform) {
  const nn::Shape s{1, 4, 2, 2};
  std::vector<double> onehot(16, 0.0);
  const std::vector<int> mask{0, 1, 2, 3};
  for (int p = 0; p < 4; ++p) onehot[static_cast<std::size_t>(mask[p] * 4 + p)] = 1.0;
  EXPECT_NEAR(cross_entropy_loss(probs_from(onehot, s), std::span<const int>(mask)).item(), 0.0, 1e-9);
  EXPECT_NEAR(cross_entropy_loss(probs_from(std::vector<double>(16, 0.25), s), std::span<const int>(mask)).item(),
              std::log(4.0), 1e-9);
}

TEST(Losses, CrossEntropySkipsIgnore) {
  const nn::Shape s{1, 2, 1, 2};
  const std::vector<double> p{0.5, 0.9, 0.5, 0.1};
  const std::vector<int> t{kIgnore, 1};
  EXPECT_NEAR(cross_entropy_loss(probs_from(p, s), std::span<const int>(t)).item(), -std::log(0.1), 1e-12);
}

TEST(Losses, SelfTrainingGate) {
  const nn::Shape s{1, 2, 2, 2};
  // channel 0 is 0.7 everywhere, channel 1 is 0.3
  const std::vector<double> p{0.7, 0.7, 0.7, 0.7, 0.3, 0.3, 0.3, 0.3};
  EXPECT_EQ(self_training_loss(probs_from(p, s), 0.59, 0.6).item(), 0.0);
  EXPECT_EQ(self_training_loss(probs_from(p, s), 0.0, 0.6).item(), 0.0);
  EXPECT_NEAR(self_training_loss(probs_from(p, s), 0.9, 0.6).item(), -std::log(0.7), 1e-12);
  EXPECT_NEAR(self_training_loss(probs_from(p, s), 0.9, 0.6).item(), 0.356675, 1e-6);
  EXPECT_GT(self_training_loss(probs_from(p, s), 0.6, 0.6).item(), 0.0);
}

TEST(Losses, FeatureMatching) {
  const V a = probs_from({1, 2, 3, 4, 5, 6}, nn::Shape{2, 3, 1, 1});
  const V shuffled = probs_from({4, 5, 6, 1, 2, 3}, nn::Shape{2, 3, 1, 1});
  EXPECT_EQ(feature_matching_from(a, a).item(), 0.0);
  EXPECT_EQ(feature_matching_from(a, shuffled).item(), 0.0);
  const V real = probs_from({1, 2}, nn::Shape{1, 2, 1, 1});
  const V fake = probs_from({4, 6}, nn::Shape{1, 2, 1, 1});
  EXPECT_NEAR(feature_matching_from(real, fake).item(), 5.0, 1e-12);
  EXPECT_NEAR(feature_matching_from(real, fake, FeatureNorm::kL1).item(), 7.0, 1e-12);
}

TEST(Losses, GeneratorWeightedSum) {
  EXPECT_NEAR(generator_loss(1.0, 2.0, 3.0, 0.1, 1.0), 4.2, 1e-12);
  const V t = generator_loss(nn::constant<double>(nn::Shape{}, 1.0), nn::constant<double>(nn::Shape{}, 2.0),
                             nn::constant<double>(nn::Shape{}, 3.0), 0.1, 1.0);
  EXPECT_NEAR(t.item(), 4.2, 1e-12);
}

TEST(Losses, DiscriminatorUninformative) {
  const V half = nn::constant<double>(nn::Shape{3, 1, 1, 1}, 0.5);
  EXPECT_NEAR(discriminator_loss_from(half, half).item(), 2.0 * std::log(2.0), 1e-12);
  EXPECT_NEAR(discriminator_loss_from(half, half).item(), 1.386294, 1e-6);
  // Saturated outputs stay finite through the clamp.
  const V one = nn::constant<double>(nn::Shape{1, 1, 1, 1}, 1.0);
  EXPECT_TRUE(std::isfinite(discriminator_loss_from(one, one).item()));
}

TEST(Losses, GeneratorGradientMatchesFiniteDifferences) {
  const test::GradientCheck g = test::generator_gradient_check();
  EXPECT_LE(g.parameters, 1000);
  EXPECT_TRUE(g.pseudo_labels_stable);
  EXPECT_LT(g.relative_error, 1e-3);
}

TEST(PseudoBuffer, GateAndOverwriteRule) {
  const SampleId a("a"), b("b");
  PseudoLabelBuffer buf({a, b}, 0.6);
  const PixelMask m0(1, 1, 2, 0), m1(1, 1, 2, 1);
  EXPECT_FALSE(buf.offer(a, {m0, 0.59, 0}));
  EXPECT_EQ(buf.size(), 0u);
  EXPECT_TRUE(buf.offer(a, {m0, 0.6, 1}));
  EXPECT_FALSE(buf.offer(a, {m1, 0.55, 2}));
  EXPECT_FALSE(buf.offer(a, {m1, 0.59999, 2}));
  EXPECT_EQ(buf.entries().at(a).mask[0], 0);
  EXPECT_FALSE(buf.offer(a, {m1, 0.6 - 1e-12, 3}));
  EXPECT_TRUE(buf.offer(a, {m1, 0.8, 4}));
  EXPECT_EQ(buf.entries().at(a).mask[0], 1);
  EXPECT_FALSE(buf.offer(a, {m0, 0.7, 5}));
  EXPECT_TRUE(buf.offer(a, {m0, 0.8, 6}));
  EXPECT_EQ(buf.entries().at(a).iteration, 6u);
  EXPECT_THROW(buf.offer(SampleId("z"), {m0, 0.9, 7}), std::invalid_argument);
  for (const auto& [_, e] : buf.entries()) EXPECT_GE(e.confidence, 0.6);
}

TEST(PseudoBuffer, SaveLoadRoundTrip) {
  const SampleId a("a"), b("b");
  PseudoLabelBuffer buf({a, b}, 0.6);
  buf.offer(b, {PixelMask(2, 1, 3, std::vector<int>{2, 1}), 0.75, 9, 1, 0});
  std::stringstream s;
  buf.save(s);
  PseudoLabelBuffer back({a, b}, 0.6);
  back.load(s);
  ASSERT_EQ(back.size(), 1u);
  const auto& e = back.entries().at(b);
  EXPECT_EQ(e.confidence, 0.75);
  EXPECT_EQ(e.iteration, 9u);
  EXPECT_EQ(e.y0, 1);
  EXPECT_EQ(std::vector<int>(e.mask.classes().begin(), e.mask.classes().end()), (std::vector<int>{2, 1}));
}

TEST(GanConfig, Validation) {
  GanConfig c;
  EXPECT_NO_THROW(c.validate());
  c.tau = 1.5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = GanConfig{};
  c.iterations = -1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = GanConfig{};
  c.lambda_fm = -0.1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(GanConfig, StepHashIgnoresBudgetUnlessPolyDecay) {
  GanConfig a, b;
  b.iterations = 7;
  EXPECT_EQ(a.step_hash(), b.step_hash());
  a.poly_lr = b.poly_lr = true;
  EXPECT_NE(a.step_hash(), b.step_hash());
  GanConfig c;
  c.tau = 0.7;
  EXPECT_NE(GanConfig{}.step_hash(), c.step_hash());
}

TEST(Trainer, RejectsBadInputs) {
  const ToyRun r = toy_run();
  EXPECT_THROW(S4GanTrainer(r.dataset, {}, r.unlabeled, toy_config(1)), std::invalid_argument);
  EXPECT_THROW(S4GanTrainer(r.dataset, r.labeled, r.labeled, toy_config(1)), std::invalid_argument);
  GanConfig wrong_k = toy_config(1);
  wrong_k.num_classes = 5;
  EXPECT_THROW(S4GanTrainer(r.dataset, r.labeled, r.unlabeled, wrong_k), std::invalid_argument);
}

TEST(Trainer, OneIterationProducesFiniteLosses) {
  const ToyRun r = toy_run();
  S4GanTrainer t(r.dataset, r.labeled, r.unlabeled, toy_config(1));
  const StepMetrics m = t.step();
  EXPECT_EQ(m.iteration, 0u);
  EXPECT_EQ(t.iteration(), 1u);
  for (double v : {m.ce, m.fm, m.st, m.d}) EXPECT_TRUE(std::isfinite(v));
  EXPECT_GT(m.ce, 0.0);
  const std::string row = format_log_row(m);
  EXPECT_EQ(std::count(row.begin(), row.end(), '\t'), 5);
}

TEST(Trainer, SupervisedOnlyWhenNoUnlabeledData) {
  const ToyRun r = toy_run();
  S4GanTrainer t(r.dataset, r.labeled, {}, toy_config(2));
  const StepMetrics m = t.step();
  EXPECT_EQ(m.fm, 0.0);
  EXPECT_EQ(m.st, 0.0);
  EXPECT_EQ(m.buffer_size, 0u);
}

TEST(Trainer, DeterministicPerSeed) {
  const ToyRun r = toy_run();
  S4GanTrainer a(r.dataset, r.labeled, r.unlabeled, toy_config(3));
  S4GanTrainer b(r.dataset, r.labeled, r.unlabeled, toy_config(3));
  EXPECT_EQ(run_rows(a, 3), run_rows(b, 3));
}

TEST(Trainer, EveryBufferedEntryPassedTheGate) {
  const ToyRun r = toy_run();
  for (double tau : {0.6, 0.3}) {
    GanConfig c = toy_config(12);
    c.tau = tau;
    S4GanTrainer t(r.dataset, r.labeled, r.unlabeled, c);
    std::ostringstream log, pseudo;
    run_training(t, {&log, &pseudo, {}, ""});
    std::istringstream rows(pseudo.str());
    std::string line;
    while (std::getline(rows, line)) {
      const double conf = std::stod(line.substr(line.rfind('\t') + 1));
      EXPECT_GE(conf, tau) << line;
    }
    for (const auto& [_, e] : t.buffer().entries()) EXPECT_GE(e.confidence, tau);
  }
}

TEST(Trainer, ResumeReproducesRemainingRows) {
  const ToyRun r = toy_run();
  test::TempDir dir("resume");
  GanConfig c = toy_config(6);
  c.tau = 0.3;  // exercise the buffer in the saved state
  S4GanTrainer full(r.dataset, r.labeled, r.unlabeled, c);
  const auto expected = run_rows(full, 6);

  S4GanTrainer first(r.dataset, r.labeled, r.unlabeled, c);
  const auto head = run_rows(first, 3);
  EXPECT_EQ(head, std::vector<std::string>(expected.begin(), expected.begin() + 3));
  first.save_checkpoint(dir.path() / "ck.bin", "h");
  EXPECT_EQ(read_checkpoint_header(dir.path() / "ck.bin").iteration, 3u);

  S4GanTrainer resumed(r.dataset, r.labeled, r.unlabeled, c);
  resumed.load_checkpoint(dir.path() / "ck.bin");
  EXPECT_EQ(resumed.iteration(), 3u);
  EXPECT_EQ(resumed.buffer().size(), first.buffer().size());
  EXPECT_EQ(run_rows(resumed, 3), std::vector<std::string>(expected.begin() + 3, expected.end()));
  EXPECT_TRUE((resumed.segmenter().parameters().flatten() == full.segmenter().parameters().flatten()).all());
}

TEST(Trainer, CheckpointRejectsChangedStepConfig) {
  const ToyRun r = toy_run();
  test::TempDir dir("ckmismatch");
  S4GanTrainer a(r.dataset, r.labeled, r.unlabeled, toy_config(2));
  a.step();
  a.save_checkpoint(dir.path() / "ck.bin", "h");
  GanConfig other = toy_config(2);
  other.lambda_st = 0.5;
  S4GanTrainer b(r.dataset, r.labeled, r.unlabeled, other);
  EXPECT_THROW(b.load_checkpoint(dir.path() / "ck.bin"), std::invalid_argument);
}

TEST(Trainer, SegmenterRoundTripsThroughCheckpoint) {
  const ToyRun r = toy_run();
  test::TempDir dir("ckseg");
  S4GanTrainer a(r.dataset, r.labeled, r.unlabeled, toy_config(1));
  a.step();
  a.save_checkpoint(dir.path() / "ck.bin", "h");
  const SegmentationNet<float> s = load_segmenter(dir.path() / "ck.bin");
  EXPECT_TRUE((s.parameters().flatten() == a.segmenter().parameters().flatten()).all());
  const auto ids = r.dataset.ids();
  const ConfusionMatrix cm = evaluate_segmenter(s, r.dataset, ids);
  EXPECT_EQ(cm.total(), static_cast<std::int64_t>(ids.size()) * 16 * 16);
}
