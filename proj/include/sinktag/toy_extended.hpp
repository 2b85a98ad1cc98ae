#pragma once

// Two-separator variant of the averaging task: predict
//     mean(numbers after [SEP]) + mean(numbers between [SEP] and [SEP2]).
// Numbers embed as (x, -1, -1); the [SEP] and [SEP2] embeddings are learned.
// Two attention-only layers, each with two heads of dimension 3 and an output
// projection W_O (3 x 6) from the concatenated heads back to the embedding:
//
//     Y_l = concat_h( causal_softmax(X W_Q^h (X W_K^h)^T) X W_V^h ) W_O^T
//     X_1 = E + Y_1,   f = Y_2[T-1, 0]
//
// Positions are 0-based: sep in [0, T-3], sep2 in [sep+2, T-1], so both
// segments hold at least one number.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include "sinktag/error.hpp"
#include "sinktag/optim.hpp"
#include "sinktag/rng.hpp"
#include "sinktag/tensor.hpp"
#include "sinktag/toy_model.hpp"

namespace sinktag::toy::ext {

inline constexpr std::size_t kDim = 3;
inline constexpr std::size_t kHeads = 2;
inline constexpr std::size_t kLayers = 2;

inline ToySequence make_sequence(Vector values, std::size_t sep, std::size_t sep2) {
  const std::size_t T = values.size();
  if (sep2 >= T || sep + 2 > sep2) {
    throw DataError("make_sequence: need sep + 2 <= sep2 < T (got sep=" + std::to_string(sep) +
                    ", sep2=" + std::to_string(sep2) + ", T=" + std::to_string(T) + ")");
  }
  values[sep] = 0.0;
  values[sep2] = 0.0;
  double after = 0.0, between = 0.0;
  for (std::size_t i = sep + 1; i < T; ++i) {
    if (i == sep2) continue;
    after += values[i];
    if (i < sep2) between += values[i];
  }
  const double target =
      after / static_cast<double>(T - sep - 2) + between / static_cast<double>(sep2 - sep - 1);
  return {std::move(values), sep, sep2, target};
}

inline std::vector<ToySequence> generate_dataset(std::size_t n, std::size_t T, std::uint64_t seed) {
  if (T < 4) throw DataError("generate_dataset: T must be at least 4");
  Rng rng(seed);
  std::vector<ToySequence> out;
  out.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    Vector x(T);
    for (double& v : x) v = rng.uniform(-1.0, 1.0);
    const auto sep = static_cast<std::size_t>(rng.index(T - 2));
    const auto sep2 = sep + 2 + static_cast<std::size_t>(rng.index(T - sep - 2));
    out.push_back(make_sequence(std::move(x), sep, sep2));
  }
  return out;
}

struct LayerParams {
  std::array<Matrix, kHeads> wq{Matrix(kDim, kDim), Matrix(kDim, kDim)};
  std::array<Matrix, kHeads> wk{Matrix(kDim, kDim), Matrix(kDim, kDim)};
  std::array<Matrix, kHeads> wv{Matrix(kDim, kDim), Matrix(kDim, kDim)};
  Matrix wo{Matrix(kDim, kHeads * kDim)};

  static constexpr std::size_t kCount = kHeads * 3 * kDim * kDim + kDim * kHeads * kDim;

  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

struct ExtParams {
  std::array<LayerParams, kLayers> layers;
  Vector sep{0.0, 0.0, 0.0};
  Vector sep2{0.0, 0.0, 0.0};

  static constexpr std::size_t kCount = kLayers * LayerParams::kCount + 2 * kDim;

  // Per layer: for each head W_Q, W_K, W_V (row-major), then W_O; then the
  // [SEP] and [SEP2] embeddings.
  Vector flatten() const {
    Vector p;
    p.reserve(kCount);
    auto put = [&](const Matrix& m) { p.insert(p.end(), m.data().begin(), m.data().end()); };
    for (const auto& l : layers) {
      for (std::size_t h = 0; h < kHeads; ++h) {
        put(l.wq[h]);
        put(l.wk[h]);
        put(l.wv[h]);
      }
      put(l.wo);
    }
    p.insert(p.end(), sep.begin(), sep.end());
    p.insert(p.end(), sep2.begin(), sep2.end());
    return p;
  }

  static ExtParams unflatten(std::span<const double> p) {
    if (p.size() != kCount) throw DimensionError("ExtParams: expected " + std::to_string(kCount) + " values");
    ExtParams out;
    std::size_t at = 0;
    auto take = [&](Matrix& m) {
      std::copy(p.begin() + static_cast<std::ptrdiff_t>(at),
                p.begin() + static_cast<std::ptrdiff_t>(at + m.data().size()), m.data().begin());
      at += m.data().size();
    };
    for (auto& l : out.layers) {
      for (std::size_t h = 0; h < kHeads; ++h) {
        take(l.wq[h]);
        take(l.wk[h]);
        take(l.wv[h]);
      }
      take(l.wo);
    }
    out.sep.assign(p.begin() + static_cast<std::ptrdiff_t>(at), p.begin() + static_cast<std::ptrdiff_t>(at + kDim));
    at += kDim;
    out.sep2.assign(p.begin() + static_cast<std::ptrdiff_t>(at), p.end());
    return out;
  }

  friend bool operator==(const ExtParams&, const ExtParams&) = default;
};

inline Matrix embed(const ExtParams& params, const ToySequence& seq) {
  if (!seq.sep2) throw DataError("embed: sequence has no [SEP2]");
  const std::size_t T = seq.length();
  Matrix e(T, kDim);
  for (std::size_t i = 0; i < T; ++i) {
    if (i == seq.sep) {
      for (std::size_t c = 0; c < kDim; ++c) e(i, c) = params.sep[c];
    } else if (i == *seq.sep2) {
      for (std::size_t c = 0; c < kDim; ++c) e(i, c) = params.sep2[c];
    } else {
      e(i, 0) = seq.values[i];
      e(i, 1) = -1.0;
      e(i, 2) = -1.0;
    }
  }
  return e;
}

struct HeadTrace {
  Matrix q, k, v;
  Matrix a;  // T x T causal
};

struct LayerTrace {
  Matrix x;  // layer input
  std::array<HeadTrace, kHeads> heads;
  Matrix concat;  // T x (kHeads * kDim)
  Matrix y;       // T x kDim
};

struct ExtTrace {
  Matrix e;
  std::array<LayerTrace, kLayers> layers;
  double output = 0.0;
  std::size_t sep = 0;
  std::size_t sep2 = 0;
};

inline LayerTrace layer_forward(const LayerParams& lp, const Matrix& x) {
  const std::size_t T = x.rows();
  LayerTrace lt;
  lt.x = x;
  lt.concat = Matrix(T, kHeads * kDim);
  for (std::size_t h = 0; h < kHeads; ++h) {
    auto& ht = lt.heads[h];
    ht.q = matmul(x, lp.wq[h]);
    ht.k = matmul(x, lp.wk[h]);
    ht.v = matmul(x, lp.wv[h]);
    ht.a = causal_softmax_rows(matmul_nt(ht.q, ht.k));
    const Matrix o = matmul(ht.a, ht.v);
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t c = 0; c < kDim; ++c) lt.concat(i, h * kDim + c) = o(i, c);
  }
  lt.y = matmul_nt(lt.concat, lp.wo);
  return lt;
}

inline ExtTrace forward(const ExtParams& params, const ToySequence& seq) {
  ExtTrace tr;
  tr.sep = seq.sep;
  tr.sep2 = seq.sep2.value_or(0);
  tr.e = embed(params, seq);
  tr.layers[0] = layer_forward(params.layers[0], tr.e);
  tr.layers[1] = layer_forward(params.layers[1], tr.e + tr.layers[0].y);
  tr.output = tr.layers[1].y(seq.length() - 1, 0);
  return tr;
}

inline double predict(const ExtParams& params, const ToySequence& seq) { return forward(params, seq).output; }

// Accumulates the layer's parameter gradient into `grad` (LayerParams::kCount
// entries, flattened layout) and returns dL/dX.
inline Matrix layer_backward(const LayerParams& lp, const LayerTrace& lt, const Matrix& dy, std::span<double> grad) {
  const std::size_t T = lt.x.rows();
  const std::size_t block = kDim * kDim;
  const Matrix dconcat = matmul(dy, lp.wo);
  const Matrix dwo = matmul_tn(dy, lt.concat);
  for (std::size_t i = 0; i < dwo.data().size(); ++i) grad[kHeads * 3 * block + i] += dwo.data()[i];

  Matrix dx(T, kDim);
  for (std::size_t h = 0; h < kHeads; ++h) {
    const auto& ht = lt.heads[h];
    Matrix dout(T, kDim);
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t c = 0; c < kDim; ++c) dout(i, c) = dconcat(i, h * kDim + c);
    const Matrix dv = matmul_tn(ht.a, dout);
    const Matrix da = matmul_nt(dout, ht.v);
    Matrix ds(T, T);
    for (std::size_t i = 0; i < T; ++i) {
      double inner = 0.0;
      for (std::size_t j = 0; j <= i; ++j) inner += ht.a(i, j) * da(i, j);
      for (std::size_t j = 0; j <= i; ++j) ds(i, j) = ht.a(i, j) * (da(i, j) - inner);
    }
    const Matrix dq = matmul(ds, ht.k);
    const Matrix dk = matmul_tn(ds, ht.q);
    const std::array<const Matrix*, 3> dproj{&dq, &dk, &dv};
    const std::array<const Matrix*, 3> w{&lp.wq[h], &lp.wk[h], &lp.wv[h]};
    for (std::size_t m = 0; m < 3; ++m) {
      const Matrix dw = matmul_tn(lt.x, *dproj[m]);
      const std::size_t off = (h * 3 + m) * block;
      for (std::size_t i = 0; i < block; ++i) grad[off + i] += dw.data()[i];
      dx = dx + matmul_nt(*dproj[m], *w[m]);
    }
  }
  return dx;
}

inline void backward(const ExtParams& params, const ExtTrace& tr, double g_out, std::span<double> grad) {
  const std::size_t T = tr.e.rows();
  const std::size_t n = LayerParams::kCount;
  Matrix dy2(T, kDim);
  dy2(T - 1, 0) = g_out;
  const Matrix dx1 = layer_backward(params.layers[1], tr.layers[1], dy2, grad.subspan(n, n));
  const Matrix de = dx1 + layer_backward(params.layers[0], tr.layers[0], dx1, grad.subspan(0, n));
  for (std::size_t c = 0; c < kDim; ++c) {
    grad[kLayers * n + c] += de(tr.sep, c);
    grad[kLayers * n + kDim + c] += de(tr.sep2, c);
  }
}

inline double loss_and_gradient(const ExtParams& params, std::span<const ToySequence> batch, std::span<double> grad) {
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

inline double evaluate_r2(const ExtParams& params, std::span<const ToySequence> eval) {
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

inline constexpr double kSuccessR2 = 0.9;

// Weights i.i.d. N(0, 1/3); [SEP] starts at (0, -s, 0) and [SEP2] at (0, 0, -s)
// with s = cfg.s_tag_init.
inline ExtParams initial_params(double s_init, std::uint64_t seed) {
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  const double sd = 1.0 / std::sqrt(static_cast<double>(kDim));
  Vector flat(ExtParams::kCount);
  for (double& x : flat) x = sd * rng.normal();
  ExtParams p = ExtParams::unflatten(flat);
  p.sep = {0.0, -s_init, 0.0};
  p.sep2 = {0.0, 0.0, -s_init};
  return p;
}

struct ExtTrainResult {
  ExtParams initial;
  ExtParams params;
  std::vector<EpochStats> curve;
  double eval_r2 = 0.0;
  std::optional<std::size_t> diverged_epoch;
};

// Same optimizer, schedule and data sizes as the single-separator model;
// cfg.factored_qk is ignored.
inline ExtTrainResult train(const TrainConfig& cfg) {
  if (cfg.n_train == 0 || cfg.batch_size == 0 || cfg.seq_len < 4 || !(cfg.lr > 0.0)) {
    throw DataError("train: invalid configuration");
  }
  const auto all = generate_dataset(cfg.n_train + cfg.n_eval, cfg.seq_len, cfg.seed);
  const std::span<const ToySequence> train_set(all.data(), cfg.n_train);
  const std::span<const ToySequence> eval_set(all.data() + cfg.n_train, cfg.n_eval);

  ExtTrainResult res;
  res.initial = initial_params(cfg.s_tag_init, cfg.seed);
  Vector theta = res.initial.flatten();
  AdamW opt(theta.size(), {cfg.lr, cfg.weight_decay});
  Rng order_rng(cfg.seed + 1);

  const std::size_t batches = (cfg.n_train + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = batches * cfg.epochs;
  std::vector<std::size_t> order(cfg.n_train);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<ToySequence> batch;
  Vector grad(ExtParams::kCount);
  std::size_t step = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    double loss_sum = 0.0;
    double lr = cfg.lr;
    for (std::size_t b = 0; b < batches; ++b) {
      batch.clear();
      for (std::size_t i = b * cfg.batch_size; i < std::min(order.size(), (b + 1) * cfg.batch_size); ++i) {
        batch.push_back(train_set[order[i]]);
      }
      const double loss = loss_and_gradient(ExtParams::unflatten(theta), batch, grad);
      loss_sum += loss * static_cast<double>(batch.size());
      if (!std::isfinite(loss) ||
          !std::all_of(grad.begin(), grad.end(), [](double g) { return std::isfinite(g); })) {
        res.diverged_epoch = epoch;
        break;
      }
      lr = cosine_lr(cfg.lr, step, total_steps);
      opt.step(theta, grad, lr);
      ++step;
    }
    res.curve.push_back({epoch, loss_sum / static_cast<double>(cfg.n_train), lr});
    if (res.diverged_epoch) break;
  }
  res.params = ExtParams::unflatten(theta);
  if (!res.diverged_epoch && !eval_set.empty()) {
    const double r2 = evaluate_r2(res.params, eval_set);
    res.eval_r2 = std::isfinite(r2) ? r2 : -std::numeric_limits<double>::infinity();
  } else {
    res.eval_r2 = -std::numeric_limits<double>::infinity();
  }
  return res;
}

// Long-format TSV of every head's attention: layer, head, query, key, weight
// (causal entries only).
inline std::string attention_tsv(const ExtTrace& tr) {
  std::string out = "layer\thead\tquery\tkey\tweight\n";
  char buf[96];
  for (std::size_t l = 0; l < kLayers; ++l) {
    for (std::size_t h = 0; h < kHeads; ++h) {
      const auto& a = tr.layers[l].heads[h].a;
      for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
          std::snprintf(buf, sizeof buf, "%zu\t%zu\t%zu\t%zu\t%.6g\n", l, h, i, j, a(i, j));
          out += buf;
        }
      }
    }
  }
  return out;
}

}  // namespace sinktag::toy::ext
