#pragma once

// Tag / non-tag decomposition of a head's output at one token, and mass-mean
// probes fitted on either component (or on the full head output).

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sinktag/bundle.hpp"
#include "sinktag/error.hpp"
#include "sinktag/rng.hpp"
#include "sinktag/sinks.hpp"
#include "sinktag/tensor.hpp"

namespace sinktag {

struct ActivationSplit {
  Vector z_tag;
  Vector z_no_tag;
  std::size_t token = 0;
  std::vector<std::size_t> sinks;

  Vector full() const {
    Vector z = z_tag;
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += z_no_tag[i];
    return z;
  }
};

// Position k contributes to z_tag when it is in the sink set (alpha_k > eps)
// and to z_no_tag otherwise, so alpha_k == eps lands in z_no_tag and the two
// parts always add back to row t of A V.
inline ActivationSplit decompose(const Matrix& a, const Matrix& v, std::size_t t, const SinkSet& sinks) {
  if (a.rows() != a.cols() || a.cols() != v.rows()) throw DimensionError("decompose: A and V shapes disagree");
  if (t >= a.rows()) throw DimensionError("decompose: token index out of range");
  const std::size_t d = v.cols();
  ActivationSplit out{Vector(d, 0.0), Vector(d, 0.0), t, sinks.indices()};
  std::vector<bool> is_sink(a.cols(), false);
  for (std::size_t k : out.sinks) is_sink.at(k) = true;
  for (std::size_t k = 0; k < a.cols(); ++k) {
    const double w = a(t, k);
    if (w == 0.0) continue;
    Vector& dst = is_sink[k] ? out.z_tag : out.z_no_tag;
    for (std::size_t j = 0; j < d; ++j) dst[j] += w * v(k, j);
  }
  return out;
}

enum class ProbeVariant { tag, no_tag, activation };

inline std::string to_string(ProbeVariant v) {
  switch (v) {
    case ProbeVariant::tag: return "tag";
    case ProbeVariant::no_tag: return "no_tag";
    case ProbeVariant::activation: return "activation";
  }
  return "activation";
}

inline ProbeVariant parse_probe_variant(const std::string& s) {
  if (s == "tag") return ProbeVariant::tag;
  if (s == "no_tag") return ProbeVariant::no_tag;
  if (s == "activation") return ProbeVariant::activation;
  throw DataError("unknown probe variant '" + s + "' (expected tag, no_tag or activation)");
}

inline Vector select_component(const ActivationSplit& split, ProbeVariant variant) {
  switch (variant) {
    case ProbeVariant::tag: return split.z_tag;
    case ProbeVariant::no_tag: return split.z_no_tag;
    case ProbeVariant::activation: return split.full();
  }
  return split.full();
}

struct LabeledActivations {
  std::vector<Vector> vectors;
  std::vector<int> labels;          // 1 = positive / true, 0 = negative / false
  std::vector<std::size_t> ids;     // provenance, one per vector

  std::size_t size() const { return vectors.size(); }
  std::size_t dim() const { return vectors.empty() ? 0 : vectors.front().size(); }
  std::size_t n_pos() const { return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1)); }
  std::size_t n_neg() const { return size() - n_pos(); }

  void add(Vector v, int label, std::size_t id) {
    vectors.push_back(std::move(v));
    labels.push_back(label ? 1 : 0);
    ids.push_back(id);
  }
};

struct MassMeanProbe {
  Vector direction;  // Sigma^-1 (mu+ - mu-)
  Vector mu_pos;
  Vector mu_neg;
  double ridge = 0.0;
  ProbeVariant variant = ProbeVariant::activation;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
  std::vector<std::size_t> train_ids;
  // Where the activations came from; informational.
  std::optional<std::size_t> layer;
  std::optional<std::size_t> head;
  double epsilon = kDefaultEpsilon;
};

// Class means and the pooled within-class covariance with Bessel correction:
//   Sigma = (S+ (N+ - 1) + S- (N- - 1)) / (N+ + N- - 2).
// A negative ridge selects the default 1e-6 * trace(Sigma) / dim, escalated
// x10 up to three times if the factorization fails.
inline MassMeanProbe fit_probe(const LabeledActivations& data, double ridge = -1.0,
                               ProbeVariant variant = ProbeVariant::activation) {
  const std::size_t np = data.n_pos(), nn = data.n_neg();
  if (np < 2 || nn < 2) {
    throw DataError("fit_probe: need at least 2 samples per class, got " + std::to_string(np) + " positive and " +
                    std::to_string(nn) + " negative");
  }
  const std::size_t d = data.dim();
  MassMeanProbe p;
  p.variant = variant;
  p.n_pos = np;
  p.n_neg = nn;
  p.train_ids = data.ids;
  p.mu_pos.assign(d, 0.0);
  p.mu_neg.assign(d, 0.0);
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.vectors[i].size() != d) throw DimensionError("fit_probe: inconsistent activation dimension");
    Vector& mu = data.labels[i] ? p.mu_pos : p.mu_neg;
    for (std::size_t j = 0; j < d; ++j) mu[j] += data.vectors[i][j];
  }
  for (std::size_t j = 0; j < d; ++j) {
    p.mu_pos[j] /= static_cast<double>(np);
    p.mu_neg[j] /= static_cast<double>(nn);
  }

  Matrix sigma(d, d);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Vector& mu = data.labels[i] ? p.mu_pos : p.mu_neg;
    const Vector& x = data.vectors[i];
    for (std::size_t r = 0; r < d; ++r) {
      const double dr = x[r] - mu[r];
      for (std::size_t c = r; c < d; ++c) sigma(r, c) += dr * (x[c] - mu[c]);
    }
  }
  const double denom = static_cast<double>(np + nn - 2);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = r; c < d; ++c) sigma(c, r) = sigma(r, c) = sigma(r, c) / denom;

  Vector delta(d);
  for (std::size_t j = 0; j < d; ++j) delta[j] = p.mu_pos[j] - p.mu_neg[j];
  if (std::all_of(delta.begin(), delta.end(), [](double x) { return x == 0.0; })) {
    p.direction.assign(d, 0.0);
    p.ridge = ridge < 0.0 ? default_ridge(sigma) : ridge;
    return p;
  }
  auto solved = solve_spd_escalating(sigma, delta, ridge);
  p.direction = std::move(solved.x);
  p.ridge = solved.ridge;
  return p;
}

inline double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double probe_predict(const MassMeanProbe& probe, std::span<const double> z) {
  if (z.size() != probe.direction.size()) throw DimensionError("probe_predict: dimension mismatch");
  return logistic(dot(z, probe.direction));
}

inline bool probe_decision(const MassMeanProbe& probe, std::span<const double> z) {
  return probe_predict(probe, z) > 0.5;
}

inline double evaluate_probe(const MassMeanProbe& probe, const LabeledActivations& held_out) {
  if (held_out.size() == 0) throw DataError("evaluate_probe: empty held-out set");
  const std::set<std::size_t> train(probe.train_ids.begin(), probe.train_ids.end());
  std::size_t correct = 0;
  for (std::size_t i = 0; i < held_out.size(); ++i) {
    if (train.count(held_out.ids[i])) {
      throw DataError("evaluate_probe: held-out sample id " + std::to_string(held_out.ids[i]) +
                      " was used to fit the probe");
    }
    if (static_cast<int>(probe_decision(probe, held_out.vectors[i])) == held_out.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(held_out.size());
}

// Stratified, disjoint, seed-deterministic split. Each side receives half of
// its size from each class, so both sizes must be even.
inline std::pair<LabeledActivations, LabeledActivations> split_dataset(const LabeledActivations& all,
                                                                       std::size_t train_n, std::size_t val_n,
                                                                       std::uint64_t seed) {
  if (train_n % 2 || val_n % 2) throw DataError("split_dataset: train and validation sizes must be even");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < all.size(); ++i) (all.labels[i] ? pos : neg).push_back(i);
  const std::size_t need = (train_n + val_n) / 2;
  if (pos.size() < need || neg.size() < need) {
    throw DataError("split_dataset: need " + std::to_string(need) + " samples per class, have " +
                    std::to_string(pos.size()) + " positive and " + std::to_string(neg.size()) + " negative");
  }
  Rng rng(seed);
  rng.shuffle(pos);
  rng.shuffle(neg);
  LabeledActivations train, val;
  auto take = [&](LabeledActivations& dst, std::size_t from, std::size_t count) {
    std::vector<std::size_t> idx;
    for (std::size_t i = from; i < from + count; ++i) {
      idx.push_back(pos[i]);
      idx.push_back(neg[i]);
    }
    std::sort(idx.begin(), idx.end());
    for (std::size_t i : idx) dst.add(all.vectors[i], all.labels[i], all.ids[i]);
  };
  take(train, 0, train_n / 2);
  take(val, train_n / 2, val_n / 2);
  return {std::move(train), std::move(val)};
}

// ---------------------------------------------------------------------------
// Serialization.

inline nlohmann::json probe_to_json(const MassMeanProbe& p) {
  nlohmann::json j;
  j["kind"] = "mass_mean_probe";
  j["variant"] = to_string(p.variant);
  j["direction"] = p.direction;
  j["mu_pos"] = p.mu_pos;
  j["mu_neg"] = p.mu_neg;
  j["ridge"] = p.ridge;
  j["n_pos"] = p.n_pos;
  j["n_neg"] = p.n_neg;
  j["train_ids"] = p.train_ids;
  j["epsilon"] = p.epsilon;
  j["layer"] = p.layer ? nlohmann::json(*p.layer) : nlohmann::json(nullptr);
  j["head"] = p.head ? nlohmann::json(*p.head) : nlohmann::json(nullptr);
  j["bias_included"] = false;
  return j;
}

inline MassMeanProbe probe_from_json(const nlohmann::json& j) {
  try {
    MassMeanProbe p;
    p.variant = parse_probe_variant(j.at("variant").get<std::string>());
    p.direction = j.at("direction").get<Vector>();
    p.mu_pos = j.at("mu_pos").get<Vector>();
    p.mu_neg = j.at("mu_neg").get<Vector>();
    p.ridge = j.at("ridge").get<double>();
    p.n_pos = j.at("n_pos").get<std::size_t>();
    p.n_neg = j.at("n_neg").get<std::size_t>();
    p.train_ids = j.value("train_ids", std::vector<std::size_t>{});
    p.epsilon = j.value("epsilon", kDefaultEpsilon);
    if (j.contains("layer") && !j["layer"].is_null()) p.layer = j["layer"].get<std::size_t>();
    if (j.contains("head") && !j["head"].is_null()) p.head = j["head"].get<std::size_t>();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed probe file: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Labeled prompt manifests written by the exporter:
//   [{"prompt_id": ..., "path": ..., "label": true|false, "probe_token_index": n}, ...]
// `path` is resolved relative to the manifest's directory. A missing
// probe_token_index means the final token.

struct PromptEntry {
  std::string prompt_id;
  std::filesystem::path path;
  std::optional<int> label;
  std::optional<std::size_t> probe_token_index;
};

inline std::optional<int> parse_label(const nlohmann::json& v) {
  if (v.is_null()) return std::nullopt;
  if (v.is_boolean()) return v.get<bool>() ? 1 : 0;
  if (v.is_number_integer()) return v.get<int>() ? 1 : 0;
  if (v.is_string()) {
    std::string s = v.get<std::string>();
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    if (s == "true" || s == "pos" || s == "positive" || s == "1") return 1;
    if (s == "false" || s == "neg" || s == "negative" || s == "0") return 0;
  }
  throw DataError("unrecognized label value " + v.dump());
}

inline std::vector<PromptEntry> read_prompt_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open manifest '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest '" + path.string() + "' is not valid JSON: " + e.what());
  }
  const nlohmann::json& arr = j.is_object() && j.contains("prompts") ? j["prompts"] : j;
  if (!arr.is_array()) throw DataError("manifest must be a JSON array of prompt entries");
  std::vector<PromptEntry> out;
  const auto base = path.parent_path();
  for (const auto& e : arr) {
    try {
      PromptEntry p;
      p.prompt_id = e.contains("prompt_id") ? (e["prompt_id"].is_string() ? e["prompt_id"].get<std::string>()
                                                                          : e["prompt_id"].dump())
                                            : std::to_string(out.size());
      std::filesystem::path bp = e.at("path").get<std::string>();
      p.path = bp.is_absolute() ? bp : base / bp;
      if (e.contains("label")) p.label = parse_label(e["label"]);
      if (e.contains("probe_token_index") && !e["probe_token_index"].is_null()) {
        p.probe_token_index = e["probe_token_index"].get<std::size_t>();
      }
      out.push_back(std::move(p));
    } catch (const nlohmann::json::exception& ex) {
      throw DataError(std::string("malformed manifest entry: ") + ex.what());
    }
  }
  return out;
}

// Extracts the chosen component at each prompt's probe token for every
// (layer, head). Entries without a label are skipped. Result is layer-major.
inline std::vector<LabeledActivations> collect_activations(const std::vector<PromptEntry>& entries,
                                                           ProbeVariant variant, double epsilon,
                                                           std::optional<std::size_t> only_layer = std::nullopt,
                                                           std::optional<std::size_t> only_head = std::nullopt,
                                                           std::size_t* n_layers_out = nullptr,
                                                           std::size_t* n_heads_out = nullptr) {
  std::vector<LabeledActivations> per_head;
  std::size_t L = 0, H = 0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    if (!e.label) continue;
    const auto b = read_bundle(e.path);
    if (per_head.empty()) {
      L = b.n_layers;
      H = b.n_heads;
      per_head.resize(L * H);
    } else if (b.n_layers != L || b.n_heads != H) {
      throw DataError("bundle '" + e.path.string() + "' disagrees with earlier bundles on layer/head counts");
    }
    const std::size_t t = e.probe_token_index.value_or(b.seq_len() - 1);
    if (t >= b.seq_len()) throw DataError("probe_token_index out of range in '" + e.path.string() + "'");
    for (std::size_t l = 0; l < L; ++l) {
      if (only_layer && l != *only_layer) continue;
      for (std::size_t h = 0; h < H; ++h) {
        if (only_head && h != *only_head) continue;
        const auto& ht = b.head(l, h);
        const auto split = decompose(ht.attention, ht.values, t, find_sinks(ht.attention, epsilon, l, h));
        per_head[l * H + h].add(select_component(split, variant), *e.label, i);
      }
    }
  }
  if (n_layers_out) *n_layers_out = L;
  if (n_heads_out) *n_heads_out = H;
  return per_head;
}

}  // namespace sinktag
