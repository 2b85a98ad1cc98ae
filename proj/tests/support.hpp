#pragma once

#include <string>
#include <vector>

#include "sinktag/bundle.hpp"
#include "sinktag/probe.hpp"
#include "sinktag/rng.hpp"
#include "sinktag/tensor.hpp"

namespace testing_support {

using sinktag::Matrix;
using sinktag::Rng;

inline Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0) {
  Matrix m(r, c);
  for (double& x : m.data()) x = rng.uniform(lo, hi);
  return m;
}

// Random causal row-stochastic matrix. Each column gets a random boost so
// that some positions behave like sinks.
inline Matrix random_causal(Rng& rng, std::size_t T, double boost = 4.0) {
  std::vector<double> col_boost(T);
  for (double& b : col_boost) b = rng.uniform() < 0.2 ? boost * rng.uniform() : 0.0;
  Matrix a(T, T);
  for (std::size_t i = 0; i < T; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      a(i, j) = std::exp(rng.uniform(-1.0, 1.0) + col_boost[j]);
      s += a(i, j);
    }
    for (std::size_t j = 0; j <= i; ++j) a(i, j) /= s;
  }
  return a;
}

inline Matrix uniform_causal(std::size_t T) {
  Matrix a(T, T);
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = 0; j <= i; ++j) a(i, j) = 1.0 / static_cast<double>(i + 1);
  return a;
}

// Every row puts all its mass on column t once it can see it.
inline Matrix perfect_sink(std::size_t T, std::size_t t) {
  Matrix a = uniform_causal(T);
  for (std::size_t i = t; i < T; ++i) {
    for (std::size_t j = 0; j <= i; ++j) a(i, j) = 0.0;
    a(i, t) = 1.0;
  }
  return a;
}

// Row i spreads its mass evenly over the listed sink positions it can see;
// rows that see none attend to themselves.
inline Matrix block_sinks(std::size_t T, const std::vector<std::size_t>& sinks) {
  Matrix a(T, T);
  for (std::size_t i = 0; i < T; ++i) {
    std::size_t seen = 0;
    for (std::size_t s : sinks) seen += s <= i;
    if (seen == 0) {
      a(i, i) = 1.0;
      continue;
    }
    for (std::size_t s : sinks)
      if (s <= i) a(i, s) = 1.0 / static_cast<double>(seen);
  }
  return a;
}

// Sinks at positions 0 and 1 with scores exactly 0.35 and 0.25; every other
// score stays below 0.02 for T = 128. Row 1 is (0.5, 0.5); later rows put p0
// on token 0, p1 on token 1 and spread the rest uniformly.
inline Matrix two_alpha_head(std::size_t T) {
  const double n = static_cast<double>(T);
  const double p0 = (0.35 * n - 1.5) / (n - 2.0);
  const double p1 = (0.25 * (n - 1.0) - 0.5) / (n - 2.0);
  Matrix a(T, T);
  a(0, 0) = 1.0;
  a(1, 0) = a(1, 1) = 0.5;
  for (std::size_t i = 2; i < T; ++i) {
    a(i, 0) = p0;
    a(i, 1) = p1;
    for (std::size_t j = 2; j <= i; ++j) a(i, j) = (1.0 - p0 - p1) / static_cast<double>(i - 1);
  }
  return a;
}

// Bundle with one layer and the given attention maps; values are random.
inline sinktag::ActivationBundle bundle_from_heads(Rng& rng, const std::vector<Matrix>& maps, std::size_t d_head = 4) {
  sinktag::ActivationBundle b;
  b.model_name = "constructed";
  const std::size_t T = maps.front().rows();
  for (std::size_t i = 0; i < T; ++i) b.tokens.push_back("t" + std::to_string(i));
  b.n_layers = 1;
  b.n_heads = maps.size();
  b.d_head = d_head;
  b.d_model = d_head * maps.size();
  for (const auto& m : maps) b.heads.push_back({m, random_matrix(rng, T, d_head)});
  b.layers.resize(1);
  return b;
}

// Two isotropic unit-variance Gaussian classes in d dimensions with means
// +sep e1 (label 1) and -sep e1 (label 0), alternating labels, ids 0..2n-1.
inline sinktag::LabeledActivations gaussian_classes(Rng& rng, std::size_t n_per_class, std::size_t d, double sep) {
  sinktag::LabeledActivations out;
  for (std::size_t i = 0; i < 2 * n_per_class; ++i) {
    const int label = static_cast<int>(i % 2 == 0);
    sinktag::Vector x(d);
    for (double& v : x) v = rng.normal();
    x[0] += label ? sep : -sep;
    out.add(std::move(x), label, i);
  }
  return out;
}

inline Matrix round_to_f32(Matrix m) {
  for (double& x : m.data()) x = static_cast<double>(static_cast<float>(x));
  return m;
}

// Random valid bundle with f32-representable payloads. Each optional layer
// tensor is present with probability 1/2 unless `all_optional` is set.
inline sinktag::ActivationBundle random_bundle(Rng& rng, std::size_t L, std::size_t H, std::size_t T,
                                               std::size_t d_head, std::size_t d_model, bool all_optional = false) {
  sinktag::ActivationBundle b;
  b.model_name = "synthetic-" + std::to_string(rng.index(1000));
  for (std::size_t i = 0; i < T; ++i) b.tokens.push_back(i == 0 ? "<s>" : "tok" + std::to_string(rng.index(50)));
  b.n_layers = L;
  b.n_heads = H;
  b.d_head = d_head;
  b.d_model = d_model;
  for (std::size_t i = 0; i < L * H; ++i) {
    b.heads.push_back({round_to_f32(random_causal(rng, T)), round_to_f32(random_matrix(rng, T, d_head))});
  }
  for (std::size_t l = 0; l < L; ++l) {
    sinktag::LayerTensors lt;
    if (all_optional || rng.uniform() < 0.5) lt.residual_input = round_to_f32(random_matrix(rng, T, d_model));
    if (all_optional || rng.uniform() < 0.5) lt.attn_output = round_to_f32(random_matrix(rng, T, d_model));
    if (all_optional || rng.uniform() < 0.5) lt.output_projection = round_to_f32(random_matrix(rng, d_model, H * d_head));
    b.layers.push_back(std::move(lt));
  }
  return b;
}

}  // namespace testing_support
