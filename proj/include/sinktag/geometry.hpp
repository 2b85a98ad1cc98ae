#pragma once

// Tag separability: place per-head tag vectors in the residual stream through
// the layer's output projection and compare them with each other and with the
// residual input they are added to. Attention-output biases are not modeled.

#include <algorithm>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sinktag/bundle.hpp"
#include "sinktag/error.hpp"
#include "sinktag/probe.hpp"
#include "sinktag/sinks.hpp"
#include "sinktag/tensor.hpp"

namespace sinktag {

struct ResidualTagVector {
  Vector vec;  // d_model
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t token = 0;
};

// e_h (x) v: v in block h of an H * d_head vector, zeros elsewhere.
inline Vector pad_head_vector(std::span<const double> v, std::size_t h, std::size_t n_heads) {
  if (h >= n_heads) {
    throw DimensionError("pad_head_vector: head " + std::to_string(h) + " out of range for " +
                         std::to_string(n_heads) + " heads");
  }
  Vector out(n_heads * v.size(), 0.0);
  std::copy(v.begin(), v.end(), out.begin() + static_cast<std::ptrdiff_t>(h * v.size()));
  return out;
}

inline ResidualTagVector residual_tag(const Matrix& w_o, std::span<const double> v, std::size_t h,
                                      std::size_t n_heads) {
  if (w_o.cols() != n_heads * v.size()) {
    throw DimensionError("residual_tag: W_O has " + std::to_string(w_o.cols()) + " columns, expected " +
                         std::to_string(n_heads * v.size()));
  }
  return {matvec(w_o, pad_head_vector(v, h, n_heads)), 0, h, 0};
}

struct TagPair {
  std::size_t a = 0;
  std::size_t b = 0;
  double cosine = 0.0;
};

struct TagCosines {
  std::vector<TagPair> pairs;         // all unordered pairs of non-zero tags, (a, b) lexicographic
  std::vector<std::size_t> excluded;  // indices of zero-norm tags
};

inline TagCosines pairwise_tag_cosines(const std::vector<ResidualTagVector>& tags) {
  TagCosines out;
  std::vector<std::size_t> live;
  std::vector<double> norms(tags.size());
  for (std::size_t i = 0; i < tags.size(); ++i) {
    norms[i] = norm(tags[i].vec);
    if (norms[i] == 0.0) out.excluded.push_back(i);
    else live.push_back(i);
  }
  for (std::size_t x = 0; x < live.size(); ++x) {
    for (std::size_t y = x + 1; y < live.size(); ++y) {
      const auto i = live[x], j = live[y];
      const double c = std::clamp(dot(tags[i].vec, tags[j].vec) / (norms[i] * norms[j]), -1.0, 1.0);
      out.pairs.push_back({i, j, c});
    }
  }
  return out;
}

struct HistogramBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
};

// Equal-width bins over [lo, hi]; the top edge belongs to the last bin.
inline std::vector<HistogramBin> histogram(std::span<const double> values, std::size_t bins, double lo = -1.0,
                                           double hi = 1.0) {
  if (bins == 0) throw DataError("histogram: need at least one bin");
  std::vector<HistogramBin> out(bins);
  const double w = (hi - lo) / static_cast<double>(bins);
  for (std::size_t i = 0; i < bins; ++i) out[i] = {lo + w * static_cast<double>(i), lo + w * static_cast<double>(i + 1), 0};
  for (double v : values) {
    if (v < lo || v > hi) continue;
    auto i = static_cast<std::size_t>((v - lo) / w);
    if (i >= bins) i = bins - 1;
    ++out[i].count;
  }
  return out;
}

// Residual-stream images of every sink tag in every layer that carries W_O,
// ordered by (layer, head, token).
inline std::vector<ResidualTagVector> collect_residual_tags(const ActivationBundle& b, double epsilon) {
  std::vector<ResidualTagVector> tags;
  for (std::size_t l = 0; l < b.n_layers; ++l) {
    const auto& w_o = b.layers[l].output_projection;
    if (!w_o) continue;
    for (std::size_t h = 0; h < b.n_heads; ++h) {
      const auto& ht = b.head(l, h);
      for (const auto& s : find_sinks(ht.attention, epsilon, l, h).sinks) {
        auto r = residual_tag(*w_o, ht.values.row(s.index), h, b.n_heads);
        r.layer = l;
        r.token = s.index;
        tags.push_back(std::move(r));
      }
    }
  }
  return tags;
}

// W_O applied to the head-concatenated tag components at position t.
inline Vector mapped_tag_component(const ActivationBundle& b, std::size_t layer, std::size_t t, double epsilon) {
  if (layer >= b.n_layers) throw DimensionError("layer out of range");
  const auto& w_o = b.layers[layer].output_projection;
  if (!w_o) throw DataError("layer " + std::to_string(layer) + " has no output_projection");
  Vector concat;
  concat.reserve(b.n_heads * b.d_head);
  for (std::size_t h = 0; h < b.n_heads; ++h) {
    const auto& ht = b.head(layer, h);
    const auto split = decompose(ht.attention, ht.values, t, find_sinks(ht.attention, epsilon, layer, h));
    concat.insert(concat.end(), split.z_tag.begin(), split.z_tag.end());
  }
  return matvec(*w_o, concat);
}

// cos(W_O z~_tag,t , x_t). nullopt when either vector is zero (no sink
// attention at t, or a zero residual row).
inline std::optional<double> tag_embedding_cosine(const ActivationBundle& b, std::size_t layer, std::size_t t,
                                                  double epsilon) {
  if (layer >= b.n_layers) throw DimensionError("layer out of range");
  const auto& x = b.layers[layer].residual_input;
  if (!x) throw DataError("layer " + std::to_string(layer) + " has no residual_input");
  if (t >= b.seq_len()) throw DimensionError("token index out of range");
  const Vector tag = mapped_tag_component(b, layer, t, epsilon);
  if (norm(tag) == 0.0 || norm(x->row(t)) == 0.0) return std::nullopt;
  return cosine(tag, x->row(t));
}

}  // namespace sinktag
