#pragma once

// Attention-sink identification and tag-variance metrics.
//
// Positions are 0-based throughout. The sink score of column t is the column
// sum normalized by the number of rows that can causally attend to t:
//
//     alpha_t = (1 / (T - t)) * sum_k A[k, t]        (0-based t)
//
// which is the 1-based normalizer T - t + 1. Rows k < t contribute exact
// zeros under causal masking and the diagonal entry A[t, t] is included.

#include <algorithm>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sinktag/bundle.hpp"
#include "sinktag/error.hpp"
#include "sinktag/tensor.hpp"

namespace sinktag {

inline constexpr double kDefaultEpsilon = 0.2;
inline constexpr double kTagRankTolerance = 1e-10;
inline const std::string kFirstTokenLabel = "[FIRST]";

inline const std::vector<double>& default_epsilon_grid() {
  static const std::vector<double> grid{0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09, 0.1, 0.15, 0.2, 0.3, 0.4};
  return grid;
}

struct SinkScore {
  std::size_t index = 0;
  double alpha = 0.0;
};

struct SinkSet {
  std::size_t layer = 0;
  std::size_t head = 0;
  double epsilon = kDefaultEpsilon;
  std::vector<SinkScore> sinks;  // ascending index, every alpha > epsilon

  bool empty() const { return sinks.empty(); }
  std::size_t size() const { return sinks.size(); }
  bool contains(std::size_t t) const {
    return std::any_of(sinks.begin(), sinks.end(), [t](const SinkScore& s) { return s.index == t; });
  }
  std::vector<std::size_t> indices() const {
    std::vector<std::size_t> out;
    out.reserve(sinks.size());
    for (const auto& s : sinks) out.push_back(s.index);
    return out;
  }
};

// Orthonormal basis (d_head x n) of the span of the sink tags.
struct TagSubspace {
  Matrix basis;
  std::vector<std::size_t> source;

  std::size_t rank() const { return basis.cols(); }
  std::size_t dim() const { return basis.rows(); }
};

inline SinkScore sink_score(const Matrix& a, std::size_t t) {
  const std::size_t T = a.rows();
  if (a.cols() != T) throw DimensionError("sink_score: attention map must be square");
  if (t >= T) throw DimensionError("sink_score: position " + std::to_string(t) + " out of range [0," + std::to_string(T) + ")");
  const double column_sum = detail::pairwise_reduce(0, T, [&](std::size_t k) { return a(k, t); });
  return {t, std::clamp(column_sum / static_cast<double>(T - t), 0.0, 1.0)};
}

inline std::vector<SinkScore> sink_scores(const Matrix& a) {
  std::vector<SinkScore> out;
  out.reserve(a.cols());
  for (std::size_t t = 0; t < a.cols(); ++t) out.push_back(sink_score(a, t));
  return out;
}

inline SinkSet find_sinks(const Matrix& a, double epsilon, std::size_t layer = 0, std::size_t head = 0) {
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw DataError("find_sinks: epsilon must lie in (0,1)");
  SinkSet set{layer, head, epsilon, {}};
  for (const auto& s : sink_scores(a))
    if (s.alpha > epsilon) set.sinks.push_back(s);
  return set;
}

namespace detail {

inline void orthonormalize_columns(Matrix& u) {
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t c = 0; c < u.cols(); ++c) {
      for (std::size_t p = 0; p < c; ++p) {
        double proj = 0.0;
        for (std::size_t r = 0; r < u.rows(); ++r) proj += u(r, p) * u(r, c);
        for (std::size_t r = 0; r < u.rows(); ++r) u(r, c) -= proj * u(r, p);
      }
      const double n = norm(u.col_copy(c));
      for (std::size_t r = 0; r < u.rows(); ++r) u(r, c) /= n;
    }
  }
}

}  // namespace detail

// Eigenvectors of V_tag^T V_tag with eigenvalue above 1e-10 * lambda_max.
// When there are fewer tags than dimensions the n x n Gram matrix is
// diagonalized instead and mapped back through V_tag^T; the nonzero spectrum
// and eigenvectors are the same.
inline TagSubspace tag_subspace_from_rows(const Matrix& v, std::span<const std::size_t> rows) {
  if (rows.empty()) throw DataError("tag_subspace: empty sink set");
  const std::size_t d = v.cols();
  Matrix tags(rows.size(), d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= v.rows()) throw DimensionError("tag_subspace: sink index out of range");
    std::copy(v.row(rows[i]).begin(), v.row(rows[i]).end(), tags.row(i).begin());
  }
  const std::size_t n = rows.size();

  Matrix basis;
  if (n < d) {
    const Matrix gram = matmul_nt(tags, tags);
    const auto eig = sym_eigen(gram, n);
    const double lmax = eig.eigenvalues.empty() ? 0.0 : eig.eigenvalues.front();
    std::size_t rank = 0;
    while (rank < n && lmax > 0.0 && eig.eigenvalues[rank] > kTagRankTolerance * lmax) ++rank;
    basis = Matrix(d, rank);
    for (std::size_t c = 0; c < rank; ++c) {
      const double inv = 1.0 / std::sqrt(eig.eigenvalues[c]);
      for (std::size_t r = 0; r < d; ++r) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += tags(i, r) * eig.eigenvectors(i, c);
        basis(r, c) = acc * inv;
      }
    }
    detail::orthonormalize_columns(basis);
  } else {
    const auto eig = sym_eigen(matmul_tn(tags, tags), d);
    const double lmax = eig.eigenvalues.empty() ? 0.0 : eig.eigenvalues.front();
    std::size_t rank = 0;
    while (rank < d && lmax > 0.0 && eig.eigenvalues[rank] > kTagRankTolerance * lmax) ++rank;
    basis = Matrix(d, rank);
    for (std::size_t c = 0; c < rank; ++c)
      for (std::size_t r = 0; r < d; ++r) basis(r, c) = eig.eigenvectors(r, c);
  }
  for (std::size_t c = 0; c < basis.cols(); ++c) detail::fix_sign(basis, c);
  return {std::move(basis), {rows.begin(), rows.end()}};
}

inline TagSubspace tag_subspace(const Matrix& v, const SinkSet& sinks) {
  const auto idx = sinks.indices();
  return tag_subspace_from_rows(v, idx);
}

// ||A V U U^T||_F / ||A V||_F, unsquared unless `squared` is set.
inline double variance_explained(const Matrix& a, const Matrix& v, const TagSubspace& u, bool squared = false) {
  if (a.cols() != v.rows()) throw DimensionError("variance_explained: A and V disagree on T");
  if (u.dim() != v.cols()) throw DimensionError("variance_explained: subspace dimension != d_head");
  const Matrix out = matmul(a, v);
  const double denom = frobenius_norm(out);
  if (denom == 0.0) throw DataError("variance_explained: attention output has zero norm");
  double num = 0.0;
  if (u.rank() > 0) num = frobenius_norm(matmul_nt(matmul(out, u.basis), u.basis));
  const double ratio = std::clamp(num / denom, 0.0, 1.0);
  return squared ? ratio * ratio : ratio;
}

// Variance explained for one head with the empty-sink-set convention: a head
// with no sinks has an empty tag subspace and explains 0. Returns nullopt when
// the head output is identically zero.
inline std::optional<double> head_variance_explained(const Matrix& a, const Matrix& v, const SinkSet& sinks,
                                                     bool squared = false) {
  if (frobenius_norm(matmul(a, v)) == 0.0) return std::nullopt;
  if (sinks.empty()) return 0.0;
  return variance_explained(a, v, tag_subspace(v, sinks), squared);
}

// ---------------------------------------------------------------------------
// Aggregates over bundles.

struct HeadStat {
  std::size_t layer = 0;
  std::size_t head = 0;
  double sink_count = 0.0;                  // mean over prompts
  std::optional<double> variance_explained;  // mean over prompts with a defined value
};

struct SinkStats {
  double epsilon = kDefaultEpsilon;
  std::size_t prompts = 0;
  std::vector<HeadStat> heads;  // layer-major
  double average_sinks = 0.0;
  std::optional<double> average_variance_explained;
};

inline SinkStats sink_stats(std::span<const ActivationBundle> bundles, double epsilon, bool squared = false) {
  SinkStats st;
  st.epsilon = epsilon;
  st.prompts = bundles.size();
  if (bundles.empty()) return st;
  const std::size_t L = bundles.front().n_layers;
  const std::size_t H = bundles.front().n_heads;
  for (const auto& b : bundles) {
    if (b.n_layers != L || b.n_heads != H) throw DataError("sink_stats: bundles disagree on layer/head counts");
  }
  std::vector<double> count_sum(L * H, 0.0), ve_sum(L * H, 0.0);
  std::vector<std::size_t> ve_n(L * H, 0);
  for (const auto& b : bundles) {
    for (std::size_t l = 0; l < L; ++l) {
      for (std::size_t h = 0; h < H; ++h) {
        const auto& ht = b.head(l, h);
        const auto sinks = find_sinks(ht.attention, epsilon, l, h);
        count_sum[l * H + h] += static_cast<double>(sinks.size());
        if (auto ve = head_variance_explained(ht.attention, ht.values, sinks, squared)) {
          ve_sum[l * H + h] += *ve;
          ++ve_n[l * H + h];
        }
      }
    }
  }
  const double P = static_cast<double>(bundles.size());
  std::vector<double> counts, ves;
  for (std::size_t i = 0; i < L * H; ++i) {
    HeadStat hs{i / H, i % H, count_sum[i] / P, std::nullopt};
    if (ve_n[i] > 0) {
      hs.variance_explained = ve_sum[i] / static_cast<double>(ve_n[i]);
      ves.push_back(*hs.variance_explained);
    }
    counts.push_back(hs.sink_count);
    st.heads.push_back(hs);
  }
  if (!counts.empty()) st.average_sinks = pairwise_sum(counts) / static_cast<double>(counts.size());
  if (!ves.empty()) st.average_variance_explained = pairwise_sum(ves) / static_cast<double>(ves.size());
  return st;
}

inline SinkStats head_sink_counts(const ActivationBundle& bundle, double epsilon) {
  return sink_stats(std::span<const ActivationBundle>(&bundle, 1), epsilon);
}

struct SensitivityPoint {
  double epsilon = 0.0;
  double average_sinks = 0.0;
  std::optional<double> average_variance_explained;
};

inline std::vector<SensitivityPoint> threshold_sensitivity(std::span<const ActivationBundle> bundles,
                                                           std::span<const double> epsilons) {
  for (std::size_t i = 0; i < epsilons.size(); ++i) {
    if (!(epsilons[i] > 0.0 && epsilons[i] < 1.0)) throw DataError("threshold_sensitivity: epsilon outside (0,1)");
    if (i > 0 && !(epsilons[i] > epsilons[i - 1])) {
      throw DataError("threshold_sensitivity: epsilons must be strictly increasing");
    }
  }
  std::vector<SensitivityPoint> curve;
  for (double eps : epsilons) {
    const auto st = sink_stats(bundles, eps);
    curve.push_back({eps, st.average_sinks, st.average_variance_explained});
  }
  return curve;
}

inline std::vector<SensitivityPoint> threshold_sensitivity(const ActivationBundle& bundle,
                                                           std::span<const double> epsilons) {
  return threshold_sensitivity(std::span<const ActivationBundle>(&bundle, 1), epsilons);
}

struct TaxonomyEntry {
  std::string token;
  std::size_t frequency = 0;
  double mean_variance_explained = 0.0;
};

// Counts how often each token string is a sink across all heads of all
// bundles. Position-0 sinks are pooled under [FIRST]. The variance explained
// attributed to a sink occurrence is that of its own (rank-1) tag.
inline std::vector<TaxonomyEntry> sink_taxonomy(std::span<const ActivationBundle> bundles, double epsilon) {
  struct Acc {
    std::size_t freq = 0;
    double ve_sum = 0.0;
    std::size_t ve_n = 0;
  };
  std::map<std::string, Acc> acc;
  for (const auto& b : bundles) {
    for (std::size_t l = 0; l < b.n_layers; ++l) {
      for (std::size_t h = 0; h < b.n_heads; ++h) {
        const auto& ht = b.head(l, h);
        const auto sinks = find_sinks(ht.attention, epsilon, l, h);
        if (sinks.empty()) continue;
        const Matrix out = matmul(ht.attention, ht.values);
        const bool degenerate = frobenius_norm(out) == 0.0;
        for (const auto& s : sinks.sinks) {
          auto& a = acc[s.index == 0 ? kFirstTokenLabel : b.tokens.at(s.index)];
          ++a.freq;
          if (degenerate) continue;
          const std::size_t idx[1] = {s.index};
          a.ve_sum += variance_explained(ht.attention, ht.values, tag_subspace_from_rows(ht.values, idx));
          ++a.ve_n;
        }
      }
    }
  }
  std::vector<TaxonomyEntry> table;
  for (const auto& [tok, a] : acc) {
    table.push_back({tok, a.freq, a.ve_n ? a.ve_sum / static_cast<double>(a.ve_n) : 0.0});
  }
  std::stable_sort(table.begin(), table.end(), [](const TaxonomyEntry& x, const TaxonomyEntry& y) {
    if (x.frequency != y.frequency) return x.frequency > y.frequency;
    if (x.mean_variance_explained != y.mean_variance_explained) {
      return x.mean_variance_explained > y.mean_variance_explained;
    }
    return x.token < y.token;
  });
  return table;
}

}  // namespace sinktag
