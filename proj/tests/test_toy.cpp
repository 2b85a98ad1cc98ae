#include <gtest/gtest.h>

#include <cmath>

#include "sinktag/toy_model.hpp"

using namespace sinktag;
using namespace sinktag::toy;

namespace {

ToySequence seq_12s46() { return make_sequence({1, 2, 0, 4, 6}, 2); }

std::vector<ToySequence> sample(std::size_t n, std::size_t T, std::uint64_t seed) {
  return generate_dataset(n, T, seed);
}

}  // namespace

TEST(ToyData, TargetsAndSeparatorRange) {
  const auto a = sample(500, 16, 3);
  const auto b = sample(500, 16, 3);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].values, b[i].values);
    EXPECT_EQ(a[i].sep, b[i].sep);
    ASSERT_LE(a[i].sep, 14u);
    double s = 0.0;
    for (std::size_t j = a[i].sep + 1; j < 16; ++j) s += a[i].values[j];
    EXPECT_NEAR(a[i].target, s / static_cast<double>(15 - a[i].sep), 1e-15);
    for (double v : a[i].values) {
      EXPECT_GE(v, -1.0);
      EXPECT_LE(v, 1.0);
    }
  }
  EXPECT_NE(sample(5, 16, 4)[0].values, a[0].values);
  EXPECT_THROW(generate_dataset(1, 2, 0), DataError);
  EXPECT_THROW(make_sequence({1, 2}, 1), DataError);
}

TEST(ToyData, WorkedExamples) {
  EXPECT_DOUBLE_EQ(seq_12s46().target, 5.0);
  EXPECT_DOUBLE_EQ(make_sequence({0.3, 0.3, 0.3, 0.3}, 1).target, 0.3);
}

TEST(ToyEmbed, Rows) {
  const auto s = make_sequence({3, 9, 5}, 1);
  const Matrix e = embed(s, 0.0, 10.0);
  EXPECT_EQ(e, (Matrix{{3, -1}, {0, -10}, {5, -1}}));
  const Matrix e2 = embed(s, 0.7, 2.0);
  EXPECT_EQ(e2(1, 0), 0.7);
  EXPECT_EQ(e2(1, 1), -2.0);
}

TEST(ToyForward, AnalyticConstructionAveragesAfterSeparator) {
  // x = 6 has self-logit 37, so s_tag = 40 does not yet dominate it; the
  // error still has to vanish as s_tag grows.
  const auto s = seq_12s46();
  double prev = INFINITY;
  for (double st : {40.0, 50.0, 60.0, 80.0}) {
    const double err = std::abs(predict(analytic_params(st, 0.0, 1.0), s) - 5.0);
    EXPECT_LE(err, prev);
    prev = err;
  }
  EXPECT_NEAR(predict(analytic_params(60.0, 0.0, 1.0), s), 5.0, 1e-4);
  const auto tr = forward(analytic_params(40.0, 0.0, 1.0), s);
  EXPECT_EQ(tr.a1.rows(), 5u);
  EXPECT_EQ(tr.h.cols(), 2u);
  EXPECT_EQ(tr.a2.size(), 5u);
}

TEST(ToyForward, LimitOnUnitRangeInputs) {
  const auto p = analytic_params(40.0, 0.0, 1.0);
  for (const auto& q : sample(100, 16, 10)) EXPECT_NEAR(predict(p, q), q.target, 1e-4);
}

TEST(ToyForward, ZeroTagStaysFinite) {
  const auto s = make_sequence(Vector(8, 0.25), 3);
  const auto tr = forward(analytic_params(0.0, 0.0, 1.0), s);
  EXPECT_TRUE(std::isfinite(tr.output));
  for (std::size_t i = 0; i < 8; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < 8; ++j) {
      row += tr.a1(i, j);
      if (j > i) {
        EXPECT_EQ(tr.a1(i, j), 0.0);
      }
    }
    EXPECT_NEAR(row, 1.0, 1e-12);
  }
}

TEST(ToyForward, ErrorShrinksAsTagGrows) {
  const auto data = sample(100, 16, 11);
  auto errors = [&](double s) {
    const auto p = analytic_params(s, 0.0, 1.0);
    std::vector<double> err;
    for (const auto& q : data) err.push_back(std::abs(predict(p, q) - q.target));
    return err;
  };
  double prev_max = INFINITY;
  for (double s : {5.0, 10.0, 20.0, 40.0}) {
    const auto err = errors(s);
    const double mx = *std::max_element(err.begin(), err.end());
    EXPECT_LE(mx, prev_max);
    prev_max = mx;
  }
  const auto e5 = errors(5.0), e40 = errors(40.0);
  for (std::size_t i = 0; i < e5.size(); ++i) {
    // One number after the separator is averaged exactly at any s_tag.
    if (e5[i] == 0.0) EXPECT_EQ(e40[i], 0.0);
    else EXPECT_LT(e40[i], e5[i]) << "seq " << i;
  }
}

TEST(ToyForward, IndependentOfBiasTerm) {
  const auto data = sample(50, 16, 12);
  for (const auto& q : data) {
    const double f0 = predict(analytic_params(40, 0, 1), q);
    EXPECT_NEAR(predict(analytic_params(40, -3, 1), q), f0, 1e-4);
    EXPECT_NEAR(predict(analytic_params(40, 3, 1), q), f0, 1e-4);
  }
}

TEST(ToyForward, PostSeparatorPermutationInvariant) {
  Rng rng(13);
  const auto p = analytic_params(40, 0, 1);
  for (const auto& q : sample(50, 16, 14)) {
    Vector v = q.values;
    std::vector<double> tail(v.begin() + static_cast<std::ptrdiff_t>(q.sep + 1), v.end());
    rng.shuffle(tail);
    std::copy(tail.begin(), tail.end(), v.begin() + static_cast<std::ptrdiff_t>(q.sep + 1));
    const auto r = make_sequence(v, q.sep);
    EXPECT_NEAR(r.target, q.target, 1e-12);
    EXPECT_NEAR(predict(p, r), predict(p, q), 1e-6);
  }
}

TEST(ToyMechanism, CatchTagRelease) {
  const auto s = make_sequence(sample(1, 16, 15)[0].values, 4);
  const auto tr = forward(analytic_params(40, 0, 1), s);

  const auto c = verify_catch(tr, 4, 0.99);
  EXPECT_TRUE(c.pass);
  EXPECT_EQ(c.rows.size(), 12u);
  EXPECT_TRUE(c.failing_rows.empty());

  const auto t = verify_tag(tr, 4);
  EXPECT_TRUE(t.pass);
  EXPECT_EQ(t.max_untagged_abs, 0.0);  // rows before the separator see only numbers
  for (std::size_t i = 5; i < 16; ++i) EXPECT_NEAR(tr.h(i, 1), 39.0, 0.01);
  EXPECT_LE(t.max_first_coordinate_drift, 1e-3);

  const auto r = verify_release(tr, 4, 1e-3);
  EXPECT_TRUE(r.pass);
  for (std::size_t j = 5; j < 16; ++j) EXPECT_NEAR(tr.a2[j], 1.0 / 11.0, 1e-3);
  EXPECT_NEAR(r.row_sum, 1.0, 1e-12);
  EXPECT_LE(r.max_before, 1e-3);
}

TEST(ToyMechanism, NegativeControls) {
  const auto s = make_sequence(sample(1, 16, 16)[0].values, 4);
  ToyParams rnd;
  rnd.w_v1 = Matrix{{0.3, -0.2}, {0.5, 0.1}};
  rnd.m2 = Matrix{{0.2, 0.4}, {-0.3, 0.1}};
  rnd.w_v2 = {0.5, 0.5};
  rnd.s_tag = 0.5;
  const auto c = verify_catch(forward(rnd, s), 4, 0.99);
  EXPECT_FALSE(c.pass);
  EXPECT_FALSE(c.failing_rows.empty());
  for (std::size_t row : c.failing_rows) EXPECT_GE(row, 4u);

  const auto t = verify_tag(forward(analytic_params(0.0, 0, 1), s), 4);
  EXPECT_FALSE(t.separation_ok);
  EXPECT_FALSE(t.pass);

  EXPECT_FALSE(verify_release(forward(rnd, s), 4, 1e-3).pass);
  EXPECT_THROW(analytic_params(40, 0, 0), DataError);
  EXPECT_THROW(analytic_params(40, 0, -1), DataError);
}

TEST(ToyGradient, MatchesFiniteDifferences) {
  Rng rng(17);
  const auto data = sample(8, 10, 18);
  for (int trial = 0; trial < 20; ++trial) {
    Vector theta(ToyParams::kCount);
    for (double& x : theta) x = rng.uniform(-1.5, 1.5);
    theta[11] = rng.uniform(0.5, 6.0);
    Vector grad(ToyParams::kCount);
    loss_and_gradient(ToyParams::unflatten(theta), data, grad);
    Vector scratch(ToyParams::kCount);
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double h = 1e-5;
      Vector tp = theta, tm = theta;
      tp[i] += h;
      tm[i] -= h;
      const double fd = (loss_and_gradient(ToyParams::unflatten(tp), data, scratch) -
                         loss_and_gradient(ToyParams::unflatten(tm), data, scratch)) /
                        (2 * h);
      EXPECT_LE(std::abs(fd - grad[i]), 1e-4 * std::max(1.0, std::abs(fd))) << "param " << i << " trial " << trial;
    }
  }
}

TEST(ToyMetrics, RSquared) {
  const Vector y{1, 2, 3, 4};
  EXPECT_DOUBLE_EQ(r_squared(y, y), 1.0);
  EXPECT_DOUBLE_EQ(r_squared(Vector(4, 2.5), y), 0.0);
  EXPECT_THROW(r_squared(Vector{1, 2}, Vector{3, 3}), DataError);
  EXPECT_GT(evaluate_r2(analytic_params(40, 0, 1), sample(500, 16, 19)), 0.999);
}

TEST(ToyOptim, AdamWSingleStepAndSchedule) {
  AdamW opt(1, {0.1, 0.01});
  Vector p{1.0};
  opt.step(p, Vector{0.5}, 0.1);
  // decay 1 * (1 - 0.001), then m_hat = 0.5, v_hat = 0.25
  EXPECT_NEAR(p[0], 0.999 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_DOUBLE_EQ(cosine_lr(2.0, 0, 100), 2.0);
  EXPECT_NEAR(cosine_lr(2.0, 50, 100), 1.0, 1e-15);
  EXPECT_NEAR(cosine_lr(2.0, 100, 100), 0.0, 1e-15);
}

TEST(ToyTrain, ZeroEpochsReturnsInitialization) {
  TrainConfig cfg;
  cfg.n_train = 64;
  cfg.n_eval = 64;
  cfg.epochs = 0;
  cfg.seed = 5;
  const auto r = train(cfg);
  EXPECT_EQ(r.params, r.initial);
  EXPECT_EQ(r.initial, initial_params(cfg.s_tag_init, 5));
  EXPECT_TRUE(r.curve.empty());
}

TEST(ToyTrain, ShortRunDeterministicAndLearns) {
  TrainConfig cfg;
  cfg.n_train = 512;
  cfg.n_eval = 256;
  cfg.epochs = 4;
  cfg.seed = 6;
  const auto a = train(cfg);
  const auto b = train(cfg);
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.eval_r2, b.eval_r2);
  ASSERT_EQ(a.curve.size(), 4u);
  EXPECT_LT(a.curve.back().train_loss, a.curve.front().train_loss);
  EXPECT_NEAR(a.curve.back().lr, cosine_lr(cfg.lr, 4 * 16 - 1, 4 * 16), 1e-15);

  cfg.factored_qk = true;
  const auto f = train(cfg);
  EXPECT_EQ(f.curve.size(), 4u);
  EXPECT_TRUE(std::isfinite(f.eval_r2));
}

TEST(ToyTrain, DivergenceIsReported) {
  TrainConfig cfg;
  cfg.n_train = 64;
  cfg.n_eval = 64;
  cfg.epochs = 3;
  cfg.s_tag_init = 1e300;
  const auto r = train(cfg);
  ASSERT_TRUE(r.diverged_epoch.has_value());
  EXPECT_EQ(*r.diverged_epoch, 1u);
  EXPECT_FALSE(std::isfinite(r.eval_r2));
  cfg.batch_size = 0;
  EXPECT_THROW(train(cfg), DataError);
}
