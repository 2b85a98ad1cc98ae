#pragma once

// Two-layer attention-only model for the post-separator averaging task.
//
// Task: x_1 .. x_T with a [SEP] at position t; predict the mean of the
// numbers after [SEP]. Number tokens embed as (x, -1) and [SEP] as
// (s_num, -s_tag). The model is
//
//     A1 = causal_softmax(E E^T)
//     H  = A1 (E W_V1) + E
//     a2 = softmax(h_T^T M2 H^T)          (query = last row, keys = all rows)
//     f  = a2 (H w_V2)
//
// with M2 standing in for the product W_Q2 W_K2; only the product enters the
// forward pass. Attention logits are not scaled by 1/sqrt(d).
//
// Positions are 0-based in code: `sep` is in [0, T-2] so that at least one
// number follows the separator.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sinktag/error.hpp"
#include "sinktag/optim.hpp"
#include "sinktag/rng.hpp"
#include "sinktag/tensor.hpp"

namespace sinktag::toy {

struct ToySequence {
  Vector values;  // length T; the entry at `sep` is ignored
  std::size_t sep = 0;
  std::optional<std::size_t> sep2;  // extended task only
  double target = 0.0;

  std::size_t length() const { return values.size(); }
};

inline double segment_mean(const Vector& v, std::size_t begin, std::size_t end) {
  if (end <= begin) throw DataError("segment_mean: empty segment");
  double s = 0.0;
  for (std::size_t i = begin; i < end; ++i) s += v[i];
  return s / static_cast<double>(end - begin);
}

inline ToySequence make_sequence(Vector values, std::size_t sep) {
  if (values.size() < 2 || sep + 1 >= values.size()) {
    throw DataError("make_sequence: separator must leave at least one number after it");
  }
  values[sep] = 0.0;
  const double target = segment_mean(values, sep + 1, values.size());
  return {std::move(values), sep, std::nullopt, target};
}

// x_i ~ U[-1, 1] i.i.d.; sep uniform over [0, T-2].
inline std::vector<ToySequence> generate_dataset(std::size_t n, std::size_t T, std::uint64_t seed) {
  if (T < 3) throw DataError("generate_dataset: T must be at least 3");
  Rng rng(seed);
  std::vector<ToySequence> out;
  out.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    Vector x(T);
    for (double& v : x) v = rng.uniform(-1.0, 1.0);
    const auto sep = static_cast<std::size_t>(rng.index(T - 1));
    out.push_back(make_sequence(std::move(x), sep));
  }
  return out;
}

struct ToyParams {
  Matrix w_v1{Matrix(2, 2)};  // 2 x 2
  Matrix m2{Matrix(2, 2)};    // W_Q2 W_K2, 2 x 2
  Vector w_v2{0.0, 0.0};      // 2 x 1
  double s_num = 0.0;
  double s_tag = 0.0;

  static constexpr std::size_t kCount = 12;

  // [w_v1 row-major (4), m2 row-major (4), w_v2 (2), s_num, s_tag]
  Vector flatten() const {
    Vector p;
    p.reserve(kCount);
    p.insert(p.end(), w_v1.data().begin(), w_v1.data().end());
    p.insert(p.end(), m2.data().begin(), m2.data().end());
    p.insert(p.end(), w_v2.begin(), w_v2.end());
    p.push_back(s_num);
    p.push_back(s_tag);
    return p;
  }

  static ToyParams unflatten(std::span<const double> p) {
    if (p.size() != kCount) throw DimensionError("ToyParams: expected 12 values");
    ToyParams out;
    out.w_v1 = Matrix(2, 2, Vector(p.begin(), p.begin() + 4));
    out.m2 = Matrix(2, 2, Vector(p.begin() + 4, p.begin() + 8));
    out.w_v2 = Vector(p.begin() + 8, p.begin() + 10);
    out.s_num = p[10];
    out.s_tag = p[11];
    return out;
  }

  friend bool operator==(const ToyParams&, const ToyParams&) = default;
};

inline Matrix embed(const ToySequence& seq, double s_num, double s_tag) {
  const std::size_t T = seq.length();
  Matrix e(T, 2);
  for (std::size_t i = 0; i < T; ++i) {
    e(i, 0) = i == seq.sep ? s_num : seq.values[i];
    e(i, 1) = i == seq.sep ? -s_tag : -1.0;
  }
  return e;
}

struct ForwardTrace {
  Matrix e;   // T x 2
  Matrix a1;  // T x T
  Matrix p;   // E W_V1, T x 2
  Matrix h;   // T x 2
  Vector a2;  // second-layer attention of the last token, length T
  Vector u;   // H w_V2
  double output = 0.0;
  std::size_t sep = 0;
};

inline ForwardTrace forward(const ToyParams& params, const ToySequence& seq) {
  const std::size_t T = seq.length();
  ForwardTrace tr;
  tr.sep = seq.sep;
  tr.e = embed(seq, params.s_num, params.s_tag);
  tr.a1 = causal_softmax_rows(matmul_nt(tr.e, tr.e));
  tr.p = matmul(tr.e, params.w_v1);
  tr.h = matmul(tr.a1, tr.p) + tr.e;

  const auto hT = tr.h.row(T - 1);
  std::array<double, 2> q{};
  for (std::size_t c = 0; c < 2; ++c) q[c] = hT[0] * params.m2(0, c) + hT[1] * params.m2(1, c);
  Vector scores(T);
  tr.u.resize(T);
  for (std::size_t j = 0; j < T; ++j) {
    scores[j] = q[0] * tr.h(j, 0) + q[1] * tr.h(j, 1);
    tr.u[j] = tr.h(j, 0) * params.w_v2[0] + tr.h(j, 1) * params.w_v2[1];
  }
  tr.a2 = softmax(scores);
  tr.output = dot(tr.a2, tr.u);
  return tr;
}

inline double predict(const ToyParams& params, const ToySequence& seq) { return forward(params, seq).output; }

// Accumulates d(output)/d(theta) * g_out into grad (flattened layout).
inline void backward(const ToyParams& params, const ForwardTrace& tr, double g_out, std::span<double> grad) {
  const std::size_t T = tr.a2.size();
  const std::size_t t = tr.sep;
  Matrix dh(T, 2);

  // Second layer.
  std::array<double, 2> q{};
  const auto hT = tr.h.row(T - 1);
  for (std::size_t c = 0; c < 2; ++c) q[c] = hT[0] * params.m2(0, c) + hT[1] * params.m2(1, c);
  std::array<double, 2> dq{};
  for (std::size_t j = 0; j < T; ++j) {
    const double gu = g_out * tr.a2[j];
    const double gs = gu * (tr.u[j] - tr.output);
    grad[8] += gu * tr.h(j, 0);
    grad[9] += gu * tr.h(j, 1);
    for (std::size_t c = 0; c < 2; ++c) {
      dh(j, c) += gu * params.w_v2[c] + gs * q[c];
      dq[c] += gs * tr.h(j, c);
    }
  }
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t c = 0; c < 2; ++c) {
      grad[4 + 2 * r + c] += hT[r] * dq[c];
      dh(T - 1, r) += params.m2(r, c) * dq[c];
    }
  }

  // H = A1 P + E.
  Matrix de = dh;
  Matrix dp(T, 2);
  Matrix ds(T, T);
  for (std::size_t i = 0; i < T; ++i) {
    double inner = 0.0;
    Vector da(i + 1);
    for (std::size_t j = 0; j <= i; ++j) {
      da[j] = dh(i, 0) * tr.p(j, 0) + dh(i, 1) * tr.p(j, 1);
      inner += tr.a1(i, j) * da[j];
      dp(j, 0) += tr.a1(i, j) * dh(i, 0);
      dp(j, 1) += tr.a1(i, j) * dh(i, 1);
    }
    for (std::size_t j = 0; j <= i; ++j) ds(i, j) = tr.a1(i, j) * (da[j] - inner);
  }
  // P = E W_V1.
  for (std::size_t i = 0; i < T; ++i) {
    for (std::size_t r = 0; r < 2; ++r) {
      for (std::size_t c = 0; c < 2; ++c) {
        grad[2 * r + c] += tr.e(i, r) * dp(i, c);
        de(i, r) += dp(i, c) * params.w_v1(r, c);
      }
    }
  }
  // S = E E^T.
  for (std::size_t i = 0; i < T; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      const double g = ds(i, j);
      if (g == 0.0) continue;
      for (std::size_t c = 0; c < 2; ++c) {
        de(i, c) += g * tr.e(j, c);
        de(j, c) += g * tr.e(i, c);
      }
    }
  }
  grad[10] += de(t, 0);
  grad[11] -= de(t, 1);
}

// Mean squared error over a batch and its gradient.
inline double loss_and_gradient(const ToyParams& params, std::span<const ToySequence> batch, std::span<double> grad) {
  std::fill(grad.begin(), grad.end(), 0.0);
  if (batch.empty()) return 0.0;
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  for (const auto& seq : batch) {
    const auto tr = forward(params, seq);
    const double err = tr.output - seq.target;
    loss += err * err;
    backward(params, tr, 2.0 * err * inv_n, grad);
  }
  return loss * inv_n;
}

inline double mse(const ToyParams& params, std::span<const ToySequence> data) {
  double s = 0.0;
  for (const auto& seq : data) {
    const double e = predict(params, seq) - seq.target;
    s += e * e;
  }
  return data.empty() ? 0.0 : s / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// Closed-form construction and its catch / tag / release checks.

inline ToyParams analytic_params(double s_tag, double b, double d) {
  if (!(d > 0.0)) throw DataError("analytic_params: d must be positive");
  ToyParams p;
  p.s_num = 0.0;
  p.s_tag = s_tag;
  p.w_v1 = Matrix{{0.0, 0.0}, {0.0, -1.0}};
  p.m2 = Matrix{{0.0, b}, {0.0, d}};
  p.w_v2 = {1.0, 0.0};
  return p;
}

struct RowMargin {
  std::size_t row = 0;
  double sink_weight = 0.0;   // A1[row, sep]
  double other_mass = 0.0;    // sum over j != sep of A1[row, j]
  double margin = 0.0;        // sink_weight - threshold
};

struct CatchReport {
  bool pass = true;
  double threshold = 0.0;
  std::vector<RowMargin> rows;  // rows i >= sep
  std::vector<std::size_t> failing_rows;
};

// Every row at or after [SEP] puts at least `threshold` on [SEP], and rows
// strictly after it leave at most 1 - threshold elsewhere. Earlier rows are
// not constrained.
inline CatchReport verify_catch(const ForwardTrace& tr, std::size_t sep, double threshold) {
  CatchReport rep;
  rep.threshold = threshold;
  const std::size_t T = tr.a1.rows();
  for (std::size_t i = sep; i < T; ++i) {
    RowMargin m{i, tr.a1(i, sep), 0.0, 0.0};
    for (std::size_t j = 0; j <= i; ++j)
      if (j != sep) m.other_mass += tr.a1(i, j);
    m.margin = m.sink_weight - threshold;
    const bool ok = m.sink_weight >= threshold && (i == sep || m.other_mass <= 1.0 - threshold);
    if (!ok) {
      rep.pass = false;
      rep.failing_rows.push_back(i);
    }
    rep.rows.push_back(m);
  }
  return rep;
}

struct TagReport {
  bool pass = false;
  bool separation_ok = false;
  bool first_coordinate_ok = false;
  double min_tagged = 0.0;          // min over i > sep of H[i, 1]
  double max_untagged_abs = 0.0;    // max over i < sep of |H[i, 1]|
  double max_first_coordinate_drift = 0.0;  // max over i > sep of |H[i, 0] - x_i|
};

// The tag coordinate of every token after [SEP] is positive and at least ten
// times the magnitude of the same coordinate before [SEP]; the number
// coordinate after [SEP] is carried through unchanged (within 1e-6).
inline TagReport verify_tag(const ForwardTrace& tr, std::size_t sep) {
  TagReport rep;
  const std::size_t T = tr.h.rows();
  rep.min_tagged = std::numeric_limits<double>::infinity();
  for (std::size_t i = sep + 1; i < T; ++i) {
    rep.min_tagged = std::min(rep.min_tagged, tr.h(i, 1));
    rep.max_first_coordinate_drift = std::max(rep.max_first_coordinate_drift, std::abs(tr.h(i, 0) - tr.e(i, 0)));
  }
  for (std::size_t i = 0; i < sep; ++i) rep.max_untagged_abs = std::max(rep.max_untagged_abs, std::abs(tr.h(i, 1)));
  rep.separation_ok = rep.min_tagged > 0.0 && rep.min_tagged >= 10.0 * rep.max_untagged_abs;
  rep.first_coordinate_ok = rep.max_first_coordinate_drift <= 1e-6;
  rep.pass = rep.separation_ok && rep.first_coordinate_ok;
  return rep;
}

struct ReleaseReport {
  bool pass = false;
  double max_before = 0.0;       // max over j < sep of a2[j]
  double sink_weight = 0.0;      // a2[sep]
  double max_uniform_dev = 0.0;  // max over j > sep of |a2[j] - 1/(T-1-sep)|
  double row_sum = 0.0;
};

// Second-layer attention vanishes on and before [SEP] and is uniform after it.
inline ReleaseReport verify_release(const ForwardTrace& tr, std::size_t sep, double tol) {
  ReleaseReport rep;
  const std::size_t T = tr.a2.size();
  const double uniform = 1.0 / static_cast<double>(T - 1 - sep);
  for (std::size_t j = 0; j < sep; ++j) rep.max_before = std::max(rep.max_before, tr.a2[j]);
  rep.sink_weight = tr.a2[sep];
  for (std::size_t j = sep + 1; j < T; ++j) {
    rep.max_uniform_dev = std::max(rep.max_uniform_dev, std::abs(tr.a2[j] - uniform));
  }
  rep.row_sum = pairwise_sum(tr.a2);
  rep.pass = rep.max_before <= tol && rep.sink_weight <= tol && rep.max_uniform_dev <= tol;
  return rep;
}

// ---------------------------------------------------------------------------
// Evaluation and training.

inline double r_squared(std::span<const double> predicted, std::span<const double> actual) {
  if (actual.empty() || predicted.size() != actual.size()) throw DataError("r_squared: empty or mismatched input");
  const double mean = pairwise_sum(actual) / static_cast<double>(actual.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < actual.size(); ++i) {
    ss_res += (actual[i] - predicted[i]) * (actual[i] - predicted[i]);
    ss_tot += (actual[i] - mean) * (actual[i] - mean);
  }
  if (ss_tot == 0.0) throw DataError("r_squared: targets have zero variance");
  return 1.0 - ss_res / ss_tot;
}

inline double evaluate_r2(const ToyParams& params, std::span<const ToySequence> eval) {
  if (eval.empty()) throw DataError("evaluate_r2: empty evaluation set");
  Vector pred, actual;
  pred.reserve(eval.size());
  actual.reserve(eval.size());
  for (const auto& s : eval) {
    pred.push_back(predict(params, s));
    actual.push_back(s.target);
  }
  return r_squared(pred, actual);
}

struct TrainConfig {
  std::size_t n_train = 8192;
  std::size_t n_eval = 8192;
  std::size_t seq_len = 16;
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double lr = 5e-2;
  double weight_decay = 1e-3;
  double s_tag_init = 10.0;
  std::uint64_t seed = 0;
  bool factored_qk = false;
};

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double lr = 0.0;  // learning rate at the end of the epoch
};

struct TrainResult {
  ToyParams initial;
  ToyParams params;
  std::vector<EpochStats> curve;
  double eval_r2 = 0.0;
  std::optional<std::size_t> diverged_epoch;  // 1-based epoch whose loss went non-finite
};

inline constexpr double kSuccessR2 = 0.95;

// Weight entries start i.i.d. N(0, 1), M2 as the product of two such 2 x 2
// matrices (W_Q W_K^T); s_num = 0 and s_tag = s_tag_init.
inline ToyParams initial_params(double s_tag_init, std::uint64_t seed, Matrix* wq_out = nullptr,
                                Matrix* wk_out = nullptr) {
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  auto draw = [&](std::size_t r, std::size_t c) {
    Matrix m(r, c);
    for (double& x : m.data()) x = rng.normal();
    return m;
  };
  ToyParams p;
  p.w_v1 = draw(2, 2);
  const Matrix wq = draw(2, 2);
  const Matrix wk = draw(2, 2);
  p.m2 = matmul_nt(wq, wk);
  if (wq_out) *wq_out = wq;
  if (wk_out) *wk_out = wk;
  p.w_v2 = draw(2, 1).col_copy(0);
  p.s_num = 0.0;
  p.s_tag = s_tag_init;
  return p;
}

struct Split {
  std::vector<ToySequence> train;
  std::vector<ToySequence> eval;
};

// One pool of n_train + n_eval sequences; the first n_train train.
inline Split make_split(const TrainConfig& cfg) {
  auto all = generate_dataset(cfg.n_train + cfg.n_eval, cfg.seq_len, cfg.seed);
  Split s;
  s.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(cfg.n_train));
  s.eval.assign(all.begin() + static_cast<std::ptrdiff_t>(cfg.n_train), all.end());
  return s;
}

inline TrainResult train(const TrainConfig& cfg, const Split& data) {
  if (cfg.n_train == 0 || cfg.batch_size == 0 || cfg.seq_len < 3 || !(cfg.lr > 0.0)) {
    throw DataError("train: invalid configuration");
  }
  TrainResult res;
  Matrix wq, wk;
  res.initial = initial_params(cfg.s_tag_init, cfg.seed, &wq, &wk);
  // Trainable vector: the 12 ToyParams entries, or with factored_qk the M2
  // slot replaced by W_Q (4) followed by W_K (4) with M2 = W_Q W_K^T.
  Vector theta = res.initial.flatten();
  if (cfg.factored_qk) {
    theta.erase(theta.begin() + 4, theta.begin() + 8);
    theta.insert(theta.begin() + 4, wk.data().begin(), wk.data().end());
    theta.insert(theta.begin() + 4, wq.data().begin(), wq.data().end());
  }
  auto to_params = [&](const Vector& th) {
    if (!cfg.factored_qk) return ToyParams::unflatten(th);
    const Matrix q(2, 2, Vector(th.begin() + 4, th.begin() + 8));
    const Matrix k(2, 2, Vector(th.begin() + 8, th.begin() + 12));
    const Matrix m2 = matmul_nt(q, k);
    Vector flat(ToyParams::kCount);
    std::copy(th.begin(), th.begin() + 4, flat.begin());
    std::copy(m2.data().begin(), m2.data().end(), flat.begin() + 4);
    std::copy(th.begin() + 12, th.end(), flat.begin() + 8);
    return ToyParams::unflatten(flat);
  };
  AdamW opt(theta.size(), {cfg.lr, cfg.weight_decay});
  Rng order_rng(cfg.seed + 1);

  const std::size_t batches = (data.train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = batches * cfg.epochs;
  std::vector<std::size_t> order(data.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<ToySequence> batch;
  Vector grad(ToyParams::kCount);
  Vector theta_grad(theta.size());
  std::size_t step = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    double loss_sum = 0.0;
    double lr = cfg.lr;
    for (std::size_t b = 0; b < batches; ++b) {
      batch.clear();
      for (std::size_t i = b * cfg.batch_size; i < std::min(order.size(), (b + 1) * cfg.batch_size); ++i) {
        batch.push_back(data.train[order[i]]);
      }
      const double loss = loss_and_gradient(to_params(theta), batch, grad);
      loss_sum += loss * static_cast<double>(batch.size());
      if (!std::isfinite(loss) ||
          !std::all_of(grad.begin(), grad.end(), [](double g) { return std::isfinite(g); })) {
        res.diverged_epoch = epoch;
        break;
      }
      if (cfg.factored_qk) {
        const Matrix dm2(2, 2, Vector(grad.begin() + 4, grad.begin() + 8));
        const Matrix q(2, 2, Vector(theta.begin() + 4, theta.begin() + 8));
        const Matrix k(2, 2, Vector(theta.begin() + 8, theta.begin() + 12));
        const Matrix dq = matmul(dm2, k);
        const Matrix dk = matmul_tn(dm2, q);
        std::copy(grad.begin(), grad.begin() + 4, theta_grad.begin());
        std::copy(dq.data().begin(), dq.data().end(), theta_grad.begin() + 4);
        std::copy(dk.data().begin(), dk.data().end(), theta_grad.begin() + 8);
        std::copy(grad.begin() + 8, grad.end(), theta_grad.begin() + 12);
      } else {
        theta_grad = grad;
      }
      lr = cosine_lr(cfg.lr, step, total_steps);
      opt.step(theta, theta_grad, lr);
      ++step;
    }
    res.curve.push_back({epoch, loss_sum / static_cast<double>(data.train.size()), lr});
    if (res.diverged_epoch) break;
  }
  res.params = to_params(theta);
  if (!res.diverged_epoch && !data.eval.empty()) {
    const double r2 = evaluate_r2(res.params, data.eval);
    res.eval_r2 = std::isfinite(r2) ? r2 : -std::numeric_limits<double>::infinity();
  } else {
    res.eval_r2 = -std::numeric_limits<double>::infinity();
  }
  return res;
}

inline TrainResult train(const TrainConfig& cfg) { return train(cfg, make_split(cfg)); }

}  // namespace sinktag::toy
