#include "unirag/trainer.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "support/testutil.hpp"
#include "support/tolerances.hpp"
#include "unirag/eval.hpp"

namespace unirag {
namespace {

// Unit vector in the plane with a prescribed cosine against [1, 0, 0...].
Vec planar_unit(double cosine, std::size_t d) {
  Vec v(d, 0.0);
  v[0] = cosine;
  v[1] = std::sqrt(1.0 - cosine * cosine);
  return v;
}

TEST(TripletLoss, HandArithmetic) {
  const std::size_t d = 4;
  Vec x_f(d, 0.0);
  x_f[0] = 1.0;
  const Vec x_r = planar_unit(0.7, d);  // d_pos = 0.3
  const Vec x_h = planar_unit(0.9, d);  // d_neg = 0.1
  EXPECT_NEAR(triplet_loss(x_f, x_r, x_h, 0.2), 0.4, tol::kWorkedExample);
}

TEST(TripletLoss, EqualDistancesLeaveTheMargin) {
  Vec x_f{1.0, 0.0};
  Vec same{0.6, 0.8};
  EXPECT_NEAR(triplet_loss(x_f, same, same, 0.2), 0.2, tol::kWorkedExample);
}

TEST(TripletLoss, SatisfiedMarginClampsToZero) {
  Vec x_f{1.0, 0.0, 0.0};
  const Vec x_h = planar_unit(0.5, 3);  // d_neg = 0.5 >= margin
  EXPECT_EQ(triplet_loss(x_f, x_f, x_h, 0.2), 0.0);
}

TEST(KeyAlignment, ZeroWhenKeysEqualTheEmbedding) {
  auto bank = Bank::init(BankConfig{.entries = 3,
                                    .select_n = 2,
                                    .experts = 2,
                                    .rank = 2,
                                    .top_e = 1,
                                    .dimension = 4},
                         1);
  Vec e{0.5, 0.5, 0.5, 0.5};
  for (auto& entry : bank.mutable_entries()) entry.key = e;
  const Selection sel = select_prompts(bank, e, 2);
  EXPECT_NEAR(key_alignment_loss(bank, e, sel), 0.0, tol::kWorkedExample);
}

TEST(KeyAlignment, AntipodalKeyScoresTwo) {
  auto bank = Bank::init(BankConfig{.entries = 2,
                                    .select_n = 1,
                                    .experts = 2,
                                    .rank = 2,
                                    .top_e = 1,
                                    .dimension = 4},
                         2);
  Vec e{1.0, 0.0, 0.0, 0.0};
  bank.mutable_entries()[0].key = Vec{-1.0, 0.0, 0.0, 0.0};
  Selection sel;
  sel.indices = {0};
  sel.scores = {-1.0};
  EXPECT_NEAR(key_alignment_loss(bank, e, sel), 2.0, tol::kWorkedExample);
}

TEST(KeyAlignment, SumsPerKeyOracleDistances) {
  const auto bank = Bank::init(BankConfig{.entries = 5,
                                          .select_n = 3,
                                          .experts = 2,
                                          .rank = 2,
                                          .top_e = 1,
                                          .dimension = 8},
                               3);
  Rng rng(3, "keyloss_query");
  Vec e(8);
  for (auto& v : e) v = rng.next_gaussian();
  e = normalized(e);
  const auto sel = select_prompts(bank, e, 3);
  double expected = 0.0;
  for (std::size_t idx : sel.indices) {
    expected += 1.0 - oracle::o_cosine(e, bank.entries()[idx].key);
  }
  EXPECT_NEAR(key_alignment_loss(bank, e, sel), expected, tol::kLowRankVsDense);
  Selection empty;
  EXPECT_THROW(key_alignment_loss(bank, e, empty), Error);
}

TEST(Forward, SingleTripletWithoutKeyTermEqualsTripletLoss) {
  auto s = gradcheck::try_setup(40, Insertion::deep, 2);
  s.train_cfg.lambda = 0.0;
  const std::vector<Triplet> one{s.batch[0]};
  const auto tape =
      forward(one, s.bank, *s.encoder, *s.tokenizer, *s.embedder, s.train_cfg);
  const auto a =
      trace_feature(one[0].anchor, s.bank, *s.encoder, *s.tokenizer, *s.embedder);
  const auto p = trace_feature(one[0].positive, s.bank, *s.encoder, *s.tokenizer,
                               *s.embedder);
  const auto n = trace_feature(one[0].negative, s.bank, *s.encoder, *s.tokenizer,
                               *s.embedder);
  EXPECT_DOUBLE_EQ(tape.loss,
                   triplet_loss(a.feature, p.feature, n.feature, 0.2));
}

TEST(Forward, MatchesNoTapeRecomputation) {
  auto s = gradcheck::try_setup(41, Insertion::deep, 1);
  const auto tape = forward(s.batch, s.bank, *s.encoder, *s.tokenizer,
                            *s.embedder, s.train_cfg);
  // Recompute the scalar with primitive calls and no tape.
  double total = 0.0;
  for (const auto& t : s.batch) {
    auto feature = [&](const Query& q) {
      const Vec e = s.embedder->embed(q).vector;
      const auto out = retrieve_adapted(s.bank, e, s.bank.config().select_n);
      const auto content = s.tokenizer->tokenize(q, e);
      const auto seq = compose(s.encoder->cls(), out.prompts, content,
                               s.enc_cfg.token_num);
      return std::pair{s.encoder->encode(seq, out.prompts, s.enc_cfg.insertion),
                       out.selection};
    };
    const auto [fa, sel_a] = feature(t.anchor);
    const auto [fp, sel_p] = feature(t.positive);
    const auto [fn, sel_n] = feature(t.negative);
    total += triplet_loss(fa, fp, fn, s.train_cfg.margin) +
             s.train_cfg.lambda *
                 key_alignment_loss(s.bank, s.embedder->embed(t.anchor).vector,
                                    sel_a);
  }
  EXPECT_DOUBLE_EQ(tape.loss, total / 3.0);
  EXPECT_GE(tape.loss, 0.0);
}

TEST(Forward, EmptyBatchRejected) {
  auto s = gradcheck::try_setup(42, Insertion::shallow, 1);
  EXPECT_THROW(
      forward({}, s.bank, *s.encoder, *s.tokenizer, *s.embedder, s.train_cfg),
      Error);
}

TEST(Forward, NonFiniteLossIsDetected) {
  auto s = gradcheck::try_setup(43, Insertion::shallow, 2);
  auto flat = s.bank.flatten();
  // Keys serialize first; poisoning them all guarantees a NaN key term.
  const std::size_t key_coords =
      s.bank_cfg.entries * s.bank_cfg.dimension;
  for (std::size_t i = 0; i < key_coords; ++i) {
    flat[i] = std::numeric_limits<double>::quiet_NaN();
  }
  s.bank.unflatten(flat);
  try {
    forward(s.batch, s.bank, *s.encoder, *s.tokenizer, *s.embedder, s.train_cfg);
    FAIL() << "expected non-finite loss";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NonFiniteLoss);
  }
}

TEST(Backward, ClampedHingeAndZeroLambdaGiveZeroGradients) {
  auto s = gradcheck::try_setup(44, Insertion::deep, 2);
  s.train_cfg.lambda = 0.0;
  // Identical payload and style make the positive branch bit-equal to the
  // anchor, so d_pos collapses; a probe run reads off d_neg and the margin
  // is then pinned below it, clamping the hinge with certainty.
  std::vector<Triplet> batch{
      Triplet{Query{"a", Style::image, "c0#0"}, Query{"p", Style::image, "c0#0"},
              Query{"n", Style::image, "c1#0"}}};
  const auto probe =
      forward(batch, s.bank, *s.encoder, *s.tokenizer, *s.embedder, s.train_cfg);
  ASSERT_GT(probe.items[0].d_neg, 1e-6);
  s.train_cfg.margin = probe.items[0].d_neg / 2.0;
  const auto tape =
      forward(batch, s.bank, *s.encoder, *s.tokenizer, *s.embedder, s.train_cfg);
  ASSERT_EQ(tape.loss, 0.0) << "d_neg " << tape.items[0].d_neg;
  const auto grads = backward(tape, s.bank, *s.encoder).flatten();
  for (double g : grads) EXPECT_EQ(g, 0.0);
}

TEST(Backward, ZeroLambdaLeavesKeysUntouched) {
  auto s = gradcheck::try_setup(45, Insertion::deep, 1);
  s.train_cfg.lambda = 0.0;
  // Probe, then raise the margin past the widest satisfied gap so at least
  // one hinge is active regardless of how this seed's features landed.
  const auto probe =
      forward(s.batch, s.bank, *s.encoder, *s.tokenizer, *s.embedder, s.train_cfg);
  double widest_gap = 0.0;
  for (const auto& item : probe.items) {
    widest_gap = std::max(widest_gap, item.d_neg - item.d_pos);
  }
  s.train_cfg.margin = widest_gap + 0.1;
  const auto tape =
      forward(s.batch, s.bank, *s.encoder, *s.tokenizer, *s.embedder, s.train_cfg);
  ASSERT_GT(tape.loss, 0.0);  // hinge active so prompt gradients exist
  const auto grads = backward(tape, s.bank, *s.encoder);
  bool any_prompt_grad = false;
  for (const auto& e : grads.entries) {
    for (double g : e.key) EXPECT_EQ(g, 0.0);
    for (double g : e.base_prompt) any_prompt_grad |= (g != 0.0);
  }
  EXPECT_TRUE(any_prompt_grad);
}

TEST(Backward, StaleTapeIsRejected) {
  auto s = gradcheck::try_setup(46, Insertion::shallow, 2);
  const auto tape =
      forward(s.batch, s.bank, *s.encoder, *s.tokenizer, *s.embedder, s.train_cfg);
  auto flat = s.bank.flatten();
  flat[0] += 0.01;
  s.bank.unflatten(flat);
  try {
    backward(tape, s.bank, *s.encoder);
    FAIL() << "expected stale tape";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::StaleTape);
  }
}

TEST(Backward, MatchesFiniteDifferencesOnSeededConfigs) {
  // Every trainable coordinate, both insertion modes, sparse and dense
  // routing, against central differences.
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    auto s = gradcheck::make_separated_setup(trial);
    const auto r = gradcheck::check_gradients(s);
    EXPECT_EQ(r.failures, 0u)
        << "trial " << trial << ": " << r.failures << "/" << r.coords
        << " coords off, worst rel " << r.worst_rel << ", worst abs "
        << r.worst_abs;
  }
}

TEST(Optimizer, ZeroGradZeroDecayIsIdentity) {
  std::vector<double> params{1.0, -2.0, 3.0};
  const std::vector<double> zeros(3, 0.0);
  AdamWState state;
  optimizer_step(params, zeros, state, 0.01, 0.0);
  optimizer_step(params, zeros, state, 0.01, 0.0);
  EXPECT_EQ(params, (std::vector<double>{1.0, -2.0, 3.0}));
}

TEST(Optimizer, HandExecutedSingleStep) {
  std::vector<double> params{1.0};
  AdamWState state;
  optimizer_step(params, {0.5}, state, 0.01, 0.1);
  // Hand execution: m = 0.1*0.5 = 0.05; v = 0.001*0.25 = 0.00025;
  // bias-corrected m_hat = 0.5, v_hat = 0.25;
  // step = 0.01 * (0.5 / (0.5 + 1e-8) + 0.1 * 1.0).
  const double expected = 1.0 - 0.01 * (0.5 / (0.5 + 1e-8) + 0.1);
  EXPECT_NEAR(params[0], expected, tol::kOptimizerStep);
}

TEST(Optimizer, HandExecutedSecondStepUsesMoments) {
  std::vector<double> params{1.0};
  AdamWState state;
  optimizer_step(params, {0.5}, state, 0.01, 0.0);
  const double p1 = 1.0 - 0.01 * (0.5 / (0.5 + 1e-8));
  ASSERT_NEAR(params[0], p1, tol::kOptimizerStep);
  optimizer_step(params, {0.3}, state, 0.01, 0.0);
  const double m2 = 0.9 * 0.05 + 0.1 * 0.3;
  const double v2 = 0.999 * 0.00025 + 0.001 * 0.09;
  const double m_hat = m2 / (1.0 - 0.9 * 0.9);
  const double v_hat = v2 / (1.0 - 0.999 * 0.999);
  const double expected = p1 - 0.01 * (m_hat / (std::sqrt(v_hat) + 1e-8));
  EXPECT_NEAR(params[0], expected, tol::kOptimizerStep);
}

TEST(Optimizer, RejectsShapeMismatch) {
  std::vector<double> params{1.0, 2.0};
  AdamWState state;
  EXPECT_THROW(optimizer_step(params, {0.5}, state, 0.01, 0.0), Error);
}

TEST(Schedule, WarmupThenCosineToZero) {
  const double base = 1e-3;
  EXPECT_NEAR(schedule_lr(base, 0, 100, 10), base * 0.1, tol::kWorkedExample);
  EXPECT_NEAR(schedule_lr(base, 9, 100, 10), base, tol::kWorkedExample);
  EXPECT_NEAR(schedule_lr(base, 10, 100, 10), base, tol::kWorkedExample);
  EXPECT_NEAR(schedule_lr(base, 55, 100, 10), base * 0.5, 1e-12);
  EXPECT_EQ(schedule_lr(base, 100, 100, 10), 0.0);
  EXPECT_EQ(schedule_lr(base, 0, 100, 0), base);
  EXPECT_EQ(schedule_lr(base, 5, 5, 5), 0.0);
  EXPECT_GT(schedule_lr(base, 99, 100, 10), 0.0);
}

gradcheck::Setup train_setup(std::uint64_t seed) {
  auto s = gradcheck::try_setup(seed, Insertion::deep, 2);
  for (int i = 0; i < 3; ++i) {
    Triplet t;
    t.anchor = Query{"a2" + std::to_string(i), Style::art,
                     "c" + std::to_string(i) + "#5"};
    t.positive = Query{"p2" + std::to_string(i), Style::lowres,
                       "c" + std::to_string(i) + "#6"};
    t.negative = Query{"n2" + std::to_string(i), Style::image,
                       "c" + std::to_string(3 - i) + "#7"};
    s.batch.push_back(std::move(t));
  }
  return s;
}

TEST(Train, ZeroEpochsLeavesEverythingUntouched) {
  auto s = train_setup(50);
  s.train_cfg.epochs = 0;
  const auto before = s.bank.flatten();
  const auto result = train(s.batch, s.bank, *s.encoder, *s.tokenizer,
                            *s.embedder, s.train_cfg);
  EXPECT_TRUE(result.history.empty());
  EXPECT_EQ(s.bank.flatten(), before);
}

TEST(Train, ZeroLrLeavesBankUntouched) {
  auto s = train_setup(51);
  s.train_cfg.epochs = 3;
  s.train_cfg.batch = 2;
  s.train_cfg.lr = 0.0;
  const auto before = s.bank.flatten();
  const auto result = train(s.batch, s.bank, *s.encoder, *s.tokenizer,
                            *s.embedder, s.train_cfg);
  EXPECT_EQ(s.bank.flatten(), before);
  ASSERT_EQ(result.history.size(), 3u);
  for (const auto& row : result.history) {
    EXPECT_NEAR(row.mean_loss, result.history[0].mean_loss, 1e-12);
    EXPECT_EQ(row.lr, 0.0);
  }
}

TEST(Train, DeterministicAcrossRuns) {
  auto s1 = train_setup(52);
  auto s2 = train_setup(52);
  TrainConfig cfg = s1.train_cfg;
  cfg.epochs = 3;
  cfg.batch = 2;
  cfg.lr = 1e-3;
  const auto r1 =
      train(s1.batch, s1.bank, *s1.encoder, *s1.tokenizer, *s1.embedder, cfg);
  const auto r2 =
      train(s2.batch, s2.bank, *s2.encoder, *s2.tokenizer, *s2.embedder, cfg);
  EXPECT_EQ(s1.bank.flatten(), s2.bank.flatten());
  EXPECT_EQ(s1.bank.checksum(), s2.bank.checksum());
  ASSERT_EQ(r1.history.size(), r2.history.size());
  for (std::size_t i = 0; i < r1.history.size(); ++i) {
    EXPECT_EQ(r1.history[i].mean_loss, r2.history[i].mean_loss);
    EXPECT_EQ(r1.history[i].lr, r2.history[i].lr);
  }
}

TEST(Train, TrainingMovesTheBankAndKeepsFrozenPartsFrozen) {
  auto s = train_setup(53);
  TrainConfig cfg = s.train_cfg;
  cfg.epochs = 2;
  cfg.batch = 3;
  cfg.lr = 1e-3;
  const auto bank_before = s.bank.flatten();
  const auto enc_sum = s.encoder->checksum();
  const auto emb_sum = s.embedder->checksum();
  const auto result =
      train(s.batch, s.bank, *s.encoder, *s.tokenizer, *s.embedder, cfg);
  EXPECT_NE(s.bank.flatten(), bank_before);
  EXPECT_EQ(s.encoder->checksum(), enc_sum);
  EXPECT_EQ(s.embedder->checksum(), emb_sum);
  for (const auto& row : result.history) EXPECT_GE(row.mean_loss, 0.0);
}

TEST(Train, EmptyDatasetRejected) {
  auto s = train_setup(54);
  s.batch.clear();
  EXPECT_THROW(
      train(s.batch, s.bank, *s.encoder, *s.tokenizer, *s.embedder, s.train_cfg),
      Error);
}

TEST(Train, HistoryCsvRoundTrips) {
  TrainResult result;
  result.history.push_back(EpochStats{1, 0.5, 1e-5});
  result.history.push_back(EpochStats{2, 0.25, 5e-6});
  testutil::TempDir dir("history");
  const auto path = dir.file("history.csv");
  write_history_csv(path, result);
  const auto text = testutil::read_file(path);
  EXPECT_EQ(text.substr(0, 19), "epoch,mean_loss,lr\n");
  EXPECT_NE(text.find("\n1,0.5,"), std::string::npos);
  EXPECT_NE(text.find("\n2,0.25,"), std::string::npos);
}

TEST(Train, HingeAloneHalvesAtAnAdequateLearningRate) {
  // At full pinned scale the combined objective is dominated by the
  // key-alignment sum, which bottoms out near the anchor-cluster centroids
  // and cannot halve. The metric-learning component itself must halve once
  // the learning rate is sized to the synthetic gradient magnitudes; this
  // pins that mechanism on the default bench shapes.
  const auto bench = gen_bench(SynthBenchConfig{});
  const auto dataset = build_triplets(bench, 240, bench.cfg.seed);
  SystemConfig sys;
  Bank bank = Bank::init(sys.bank, sys.seed);
  const auto encoder = FrozenEncoder::seeded(sys.encoder);
  const auto embedder = make_embedder(sys.embedder);
  const Tokenizer tokenizer(sys.encoder, sys.embedder.provider);
  auto cfg = sys.train;
  cfg.lambda = 0.0;
  cfg.lr = 3e-3;
  const auto result =
      train(dataset, bank, encoder, tokenizer, *embedder, cfg);
  const double first = result.history.front().mean_loss;
  const double last = result.history.back().mean_loss;
  ASSERT_GT(first, 0.0);
  EXPECT_LE(last, tol::kLossHalving * first)
      << "first " << first << " last " << last;
}

TEST(TrainConfigChecks, Validation) {
  TrainConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.margin = 0.0;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = TrainConfig{};
  cfg.lambda = -0.1;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = TrainConfig{};
  cfg.lr = -1e-5;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = TrainConfig{};
  cfg.batch = 0;
  EXPECT_THROW(cfg.validate(), Error);
}

}  // namespace
}  // namespace unirag
