// sinktag command-line front end.
//
// Exit codes: 0 success, 1 usage error, 2 data / validation error.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sinktag/bundle.hpp"
#include "sinktag/geometry.hpp"
#include "sinktag/pca_viz.hpp"
#include "sinktag/probe.hpp"
#include "sinktag/sinks.hpp"
#include "sinktag/toy_extended.hpp"
#include "sinktag/toy_model.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sinktag;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// --config reader: nested objects map onto subcommands, so
//   {"epsilon": 0.3, "toy": {"prove": {"trials": 10}}}
// sets the global --epsilon and `toy prove --trials`.
class JsonConfig : public CLI::Config {
 public:
  std::string to_config(const CLI::App*, bool, bool, std::string) const override { return "{}"; }

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    json j;
    try {
      j = json::parse(input);
    } catch (const json::exception& e) {
      throw DataError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw DataError("config must be a JSON object");
    std::vector<CLI::ConfigItem> items;
    walk(j, {}, items);
    return items;
  }

 private:
  static std::string scalar(const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    return v.dump();
  }

  static void walk(const json& obj, const std::vector<std::string>& parents, std::vector<CLI::ConfigItem>& out) {
    for (const auto& [key, v] : obj.items()) {
      if (v.is_object()) {
        auto p = parents;
        p.push_back(key);
        walk(v, p, out);
        continue;
      }
      CLI::ConfigItem item;
      item.parents = parents;
      item.name = key;
      if (v.is_array()) {
        for (const auto& x : v) item.inputs.push_back(scalar(x));
      } else {
        item.inputs.push_back(scalar(v));
      }
      out.push_back(std::move(item));
    }
  }
};

std::string num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", x);
  return buf;
}

// The same 6-significant-digit rounding for JSON output; non-finite -> null.
json jnum(double x) {
  if (!std::isfinite(x)) return nullptr;
  return std::stod(num(x));
}

json jnum(const std::optional<double>& x) { return x ? jnum(*x) : json(nullptr); }

std::string num(const std::optional<double>& x) { return x ? num(*x) : "NA"; }

json jvec(std::span<const double> v) {
  json a = json::array();
  for (double x : v) a.push_back(jnum(x));
  return a;
}

// Tab-separated output; tokens are escaped so a row always has the same
// number of fields.
std::string tsv_field(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '\t') out += "\\t";
    else if (c == '\n') out += "\\n";
    else if (c == '\r') out += "\\r";
    else if (c == '\\') out += "\\\\";
    else out += c;
  }
  return out;
}

template <class... Ts>
void row(std::ostream& os, const Ts&... fields) {
  bool first = true;
  ((os << (first ? "" : "\t") << fields, first = false), ...);
  os << '\n';
}

struct Globals {
  std::string format = "tsv";
  double epsilon = kDefaultEpsilon;
  std::optional<std::uint64_t> seed;

  bool json() const { return format == "json"; }

  std::uint64_t resolved_seed() const {
    if (seed) return *seed;
    if (const char* env = std::getenv("SINKTAG_SEED")) {
      try {
        std::size_t used = 0;
        const auto v = std::stoull(env, &used);
        if (used == std::string(env).size()) return v;
      } catch (const std::exception&) {
      }
      throw UsageError(std::string("SINKTAG_SEED is not an unsigned integer: '") + env + "'");
    }
    return 0;
  }
};

std::vector<ActivationBundle> read_all(const std::vector<std::string>& paths) {
  std::vector<ActivationBundle> out;
  out.reserve(paths.size());
  for (const auto& p : paths) out.push_back(read_bundle(p));
  return out;
}

void check_layer_head(const ActivationBundle& b, std::size_t layer, std::optional<std::size_t> head) {
  if (layer >= b.n_layers) {
    throw DataError("layer " + std::to_string(layer) + " out of range (bundle has " + std::to_string(b.n_layers) + ")");
  }
  if (head && *head >= b.n_heads) {
    throw DataError("head " + std::to_string(*head) + " out of range (bundle has " + std::to_string(b.n_heads) + ")");
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f << text;
  if (!f) throw IoError("writing '" + path.string() + "' failed");
}

std::string attention_matrix_tsv(const Matrix& a) {
  std::ostringstream os;
  row(os, "query", "key", "weight");
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j <= i && j < a.cols(); ++j) row(os, i, j, num(a(i, j)));
  return os.str();
}

std::string vector_tsv(std::span<const double> v) {
  std::ostringstream os;
  row(os, "key", "weight");
  for (std::size_t j = 0; j < v.size(); ++j) row(os, j, num(v[j]));
  return os.str();
}

// ---------------------------------------------------------------------------
// bundle

int cmd_bundle_validate(const Globals& g, const std::string& path) {
  const auto b = read_bundle(path, false);
  const auto rep = validate_bundle(b);
  if (g.json()) {
    json v = json::array();
    for (const auto& x : rep.violations) v.push_back({{"kind", x.kind}, {"message", x.message}});
    std::cout << json{{"path", path}, {"valid", rep.ok()}, {"violations", v}}.dump(2) << '\n';
  } else {
    row(std::cout, "kind", "message");
    for (const auto& x : rep.violations) row(std::cout, x.kind, tsv_field(x.message));
  }
  if (!rep.ok()) {
    std::cerr << path << ": " << rep.violations.size() << " violation(s)\n";
    return 2;
  }
  return 0;
}

int cmd_bundle_info(const Globals& g, const std::string& path) {
  const auto b = read_bundle(path);
  auto has = [](const auto& o) { return o.has_value(); };
  if (g.json()) {
    json layers = json::array();
    for (const auto& l : b.layers) {
      layers.push_back({{"residual_input", has(l.residual_input)},
                        {"attn_output", has(l.attn_output)},
                        {"output_projection", has(l.output_projection)}});
    }
    std::cout << json{{"model", b.model_name}, {"seq_len", b.seq_len()},  {"n_layers", b.n_layers},
                      {"n_heads", b.n_heads},  {"d_head", b.d_head},      {"d_model", b.d_model},
                      {"tokens", b.tokens},    {"layers", layers}}
                     .dump(2)
              << '\n';
    return 0;
  }
  row(std::cout, "key", "value");
  row(std::cout, "model", tsv_field(b.model_name));
  row(std::cout, "seq_len", b.seq_len());
  row(std::cout, "n_layers", b.n_layers);
  row(std::cout, "n_heads", b.n_heads);
  row(std::cout, "d_head", b.d_head);
  row(std::cout, "d_model", b.d_model);
  for (std::size_t l = 0; l < b.n_layers; ++l) {
    const auto& t = b.layers[l];
    const auto p = "layer" + std::to_string(l) + ".";
    row(std::cout, p + "residual_input", has(t.residual_input) ? "present" : "absent");
    row(std::cout, p + "attn_output", has(t.attn_output) ? "present" : "absent");
    row(std::cout, p + "output_projection", has(t.output_projection) ? "present" : "absent");
  }
  return 0;
}

// ---------------------------------------------------------------------------
// sinks / variance / decompose

struct DumpTarget {
  std::string path;
  std::size_t layer = 0;
  std::size_t head = 0;
};

int cmd_sinks_detect(const Globals& g, const std::string& path, const std::optional<DumpTarget>& dump) {
  const auto b = read_bundle(path);
  std::vector<SinkSet> sets;
  for (std::size_t l = 0; l < b.n_layers; ++l)
    for (std::size_t h = 0; h < b.n_heads; ++h) sets.push_back(find_sinks(b.head(l, h).attention, g.epsilon, l, h));
  if (dump) {
    check_layer_head(b, dump->layer, dump->head);
    write_text(dump->path, attention_matrix_tsv(b.head(dump->layer, dump->head).attention));
  }
  if (g.json()) {
    json arr = json::array();
    for (const auto& s : sets)
      for (const auto& k : s.sinks)
        arr.push_back({{"layer", s.layer}, {"head", s.head}, {"index", k.index}, {"token", b.tokens[k.index]},
                       {"alpha", jnum(k.alpha)}});
    std::cout << json{{"epsilon", jnum(g.epsilon)}, {"sinks", arr}}.dump(2) << '\n';
    return 0;
  }
  row(std::cout, "layer", "head", "index", "token", "alpha");
  for (const auto& s : sets)
    for (const auto& k : s.sinks) row(std::cout, s.layer, s.head, k.index, tsv_field(b.tokens[k.index]), num(k.alpha));
  return 0;
}

int cmd_sinks_stats(const Globals& g, const std::vector<std::string>& paths, bool squared) {
  const auto bundles = read_all(paths);
  const auto st = sink_stats(bundles, g.epsilon, squared);
  if (g.json()) {
    json heads = json::array();
    for (const auto& h : st.heads)
      heads.push_back({{"layer", h.layer},
                       {"head", h.head},
                       {"sink_count", jnum(h.sink_count)},
                       {"variance_explained", jnum(h.variance_explained)}});
    std::cout << json{{"epsilon", jnum(st.epsilon)},
                      {"prompts", st.prompts},
                      {"squared", squared},
                      {"average_sinks", jnum(st.average_sinks)},
                      {"average_variance_explained", jnum(st.average_variance_explained)},
                      {"heads", heads}}
                     .dump(2)
              << '\n';
    return 0;
  }
  row(std::cout, "layer", "head", "sink_count", "variance_explained");
  for (const auto& h : st.heads) row(std::cout, h.layer, h.head, num(h.sink_count), num(h.variance_explained));
  row(std::cout, "all", "all", num(st.average_sinks), num(st.average_variance_explained));
  return 0;
}

std::vector<double> parse_grid(const std::string& grid) {
  if (grid == "default") return default_epsilon_grid();
  std::vector<double> out;
  std::stringstream ss(grid);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError("--grid: '" + item + "' is not a number");
    }
  }
  if (out.empty()) throw UsageError("--grid: empty list");
  return out;
}

int cmd_sinks_sweep(const Globals& g, const std::vector<std::string>& paths, const std::string& grid) {
  const auto eps = parse_grid(grid);
  const auto bundles = read_all(paths);
  const auto curve = threshold_sensitivity(bundles, eps);
  if (g.json()) {
    json arr = json::array();
    for (const auto& p : curve)
      arr.push_back({{"epsilon", jnum(p.epsilon)},
                     {"average_sinks", jnum(p.average_sinks)},
                     {"average_variance_explained", jnum(p.average_variance_explained)}});
    std::cout << json{{"prompts", bundles.size()}, {"curve", arr}}.dump(2) << '\n';
    return 0;
  }
  row(std::cout, "epsilon", "average_sinks", "average_variance_explained");
  for (const auto& p : curve) row(std::cout, num(p.epsilon), num(p.average_sinks), num(p.average_variance_explained));
  return 0;
}

int cmd_sinks_taxonomy(const Globals& g, const std::vector<std::string>& paths, std::size_t top) {
  const auto bundles = read_all(paths);
  auto tax = sink_taxonomy(bundles, g.epsilon);
  if (tax.size() > top) tax.resize(top);
  if (g.json()) {
    json arr = json::array();
    for (const auto& e : tax)
      arr.push_back({{"token", e.token},
                     {"frequency", e.frequency},
                     {"mean_variance_explained", jnum(e.mean_variance_explained)}});
    std::cout << json{{"epsilon", jnum(g.epsilon)}, {"tokens", arr}}.dump(2) << '\n';
    return 0;
  }
  row(std::cout, "token", "frequency", "mean_variance_explained");
  for (const auto& e : tax) row(std::cout, tsv_field(e.token), e.frequency, num(e.mean_variance_explained));
  return 0;
}

int cmd_variance(const Globals& g, const std::string& path, std::optional<std::size_t> layer,
                 std::optional<std::size_t> head, bool squared) {
  const auto b = read_bundle(path);
  if (layer) check_layer_head(b, *layer, head);
  if (head && !layer) check_layer_head(b, 0, head);
  struct Row {
    std::size_t layer, head, sinks, rank;
    std::optional<double> ve;
  };
  std::vector<Row> rows;
  for (std::size_t l = 0; l < b.n_layers; ++l) {
    if (layer && l != *layer) continue;
    for (std::size_t h = 0; h < b.n_heads; ++h) {
      if (head && h != *head) continue;
      const auto& ht = b.head(l, h);
      const auto s = find_sinks(ht.attention, g.epsilon, l, h);
      rows.push_back({l, h, s.size(), tag_subspace(ht.values, s).rank(),
                      head_variance_explained(ht.attention, ht.values, s, squared)});
    }
  }
  if (g.json()) {
    json arr = json::array();
    for (const auto& r : rows)
      arr.push_back({{"layer", r.layer},
                     {"head", r.head},
                     {"sinks", r.sinks},
                     {"tag_rank", r.rank},
                     {"variance_explained", jnum(r.ve)}});
    std::cout << json{{"epsilon", jnum(g.epsilon)}, {"squared", squared}, {"heads", arr}}.dump(2) << '\n';
    return 0;
  }
  row(std::cout, "layer", "head", "sinks", "tag_rank", "variance_explained");
  for (const auto& r : rows) row(std::cout, r.layer, r.head, r.sinks, r.rank, num(r.ve));
  return 0;
}

int cmd_decompose(const Globals& g, const std::string& path, std::size_t layer, std::size_t head,
                  std::optional<std::size_t> token) {
  const auto b = read_bundle(path);
  check_layer_head(b, layer, head);
  const std::size_t t = token.value_or(b.seq_len() - 1);
  if (t >= b.seq_len()) throw DataError("token " + std::to_string(t) + " out of range");
  const auto& ht = b.head(layer, head);
  const auto split = decompose(ht.attention, ht.values, t, find_sinks(ht.attention, g.epsilon, layer, head));
  const Vector full = split.full();
  if (g.json()) {
    std::cout << json{{"layer", layer},
                      {"head", head},
                      {"token", t},
                      {"sinks", split.sinks},
                      {"z_tag", jvec(split.z_tag)},
                      {"z_no_tag", jvec(split.z_no_tag)},
                      {"z", jvec(full)}}
                     .dump(2)
              << '\n';
    return 0;
  }
  std::ostringstream head_line;
  head_line << "component";
  for (std::size_t j = 0; j < full.size(); ++j) head_line << "\tv" << j;
  std::cout << head_line.str() << '\n';
  auto line = [](const char* name, const Vector& v) {
    std::cout << name;
    for (double x : v) std::cout << '\t' << num(x);
    std::cout << '\n';
  };
  line("tag", split.z_tag);
  line("no_tag", split.z_no_tag);
  line("full", full);
  return 0;
}

// ---------------------------------------------------------------------------
// probe

struct ProbeFitArgs {
  std::string manifest;
  std::optional<std::size_t> layer, head;
  std::string variant = "tag";
  std::size_t train_n = 400;
  std::size_t val_n = 200;
  double ridge = -1.0;
  std::string out;
  bool shuffle_labels = false;
};

int cmd_probe_fit(const Globals& g, const ProbeFitArgs& a) {
  const auto variant = parse_probe_variant(a.variant);
  const auto seed = g.resolved_seed();
  const auto entries = read_prompt_manifest(a.manifest);
  std::size_t L = 0, H = 0;
  auto per_head = collect_activations(entries, variant, g.epsilon, a.layer, a.head, &L, &H);
  if (per_head.empty()) throw DataError("manifest has no labeled prompts");
  if (a.layer && *a.layer >= L) throw DataError("layer out of range");
  if (a.head && *a.head >= H) throw DataError("head out of range");

  // Shuffled-label control: permute labels across the whole pool first.
  if (a.shuffle_labels) {
    Rng rng(seed ^ 0x5bd1e995ULL);
    auto labels = per_head.front().labels;
    rng.shuffle(labels);
    for (auto& d : per_head)
      if (d.size() == labels.size()) d.labels = labels;
  }

  struct Candidate {
    std::size_t layer, head;
    double held_in = 0.0;
  };
  std::vector<Candidate> candidates;
  for (std::size_t l = 0; l < L; ++l) {
    if (a.layer && l != *a.layer) continue;
    for (std::size_t h = 0; h < H; ++h) {
      if (a.head && h != *a.head) continue;
      candidates.push_back({l, h});
    }
  }
  // Head selection, when layer or head is left open, scores each candidate on
  // a 75/25 split of the training portion only; validation stays untouched.
  const Candidate* best = &candidates.front();
  if (candidates.size() > 1) {
    const std::size_t inner_train = a.train_n * 3 / 4 / 2 * 2;
    for (auto& c : candidates) {
      const auto [train, val] = split_dataset(per_head[c.layer * H + c.head], a.train_n, a.val_n, seed);
      const auto [itrain, ival] = split_dataset(train, inner_train, a.train_n - inner_train, seed + 1);
      c.held_in = evaluate_probe(fit_probe(itrain, a.ridge, variant), ival);
    }
    for (const auto& c : candidates)
      if (c.held_in > best->held_in) best = &c;
  }
  const auto [train, val] = split_dataset(per_head[best->layer * H + best->head], a.train_n, a.val_n, seed);
  auto probe = fit_probe(train, a.ridge, variant);
  probe.layer = best->layer;
  probe.head = best->head;
  probe.epsilon = g.epsilon;
  const double train_acc = [&] {
    std::size_t ok = 0;
    for (std::size_t i = 0; i < train.size(); ++i)
      ok += static_cast<int>(probe_decision(probe, train.vectors[i])) == train.labels[i];
    return static_cast<double>(ok) / static_cast<double>(train.size());
  }();
  const double val_acc = evaluate_probe(probe, val);
  if (!a.out.empty()) write_text(a.out, probe_to_json(probe).dump(2) + "\n");

  if (g.json()) {
    json j{{"layer", best->layer},         {"head", best->head},          {"variant", to_string(variant)},
           {"seed", seed},                 {"train_n", train.size()},     {"val_n", val.size()},
           {"ridge", jnum(probe.ridge)},   {"train_accuracy", jnum(train_acc)},
           {"val_accuracy", jnum(val_acc)}, {"shuffled_labels", a.shuffle_labels}};
    if (candidates.size() > 1) j["selection_accuracy"] = jnum(best->held_in);
    if (a.out.empty()) j["probe"] = probe_to_json(probe);
    std::cout << j.dump(2) << '\n';
    return 0;
  }
  row(std::cout, "key", "value");
  row(std::cout, "layer", best->layer);
  row(std::cout, "head", best->head);
  row(std::cout, "variant", to_string(variant));
  row(std::cout, "seed", seed);
  row(std::cout, "train_n", train.size());
  row(std::cout, "val_n", val.size());
  row(std::cout, "ridge", num(probe.ridge));
  if (candidates.size() > 1) row(std::cout, "selection_accuracy", num(best->held_in));
  row(std::cout, "train_accuracy", num(train_acc));
  row(std::cout, "val_accuracy", num(val_acc));
  return 0;
}

int cmd_probe_eval(const Globals& g, const std::string& probe_path, const std::string& manifest) {
  std::ifstream f(probe_path);
  if (!f) throw IoError("cannot open probe file '" + probe_path + "'");
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw DataError(std::string("probe file is not valid JSON: ") + e.what());
  }
  const auto probe = probe_from_json(j);
  if (!probe.layer || !probe.head) throw DataError("probe file does not record its layer and head");
  const auto entries = read_prompt_manifest(manifest);
  std::size_t L = 0, H = 0;
  const auto per_head = collect_activations(entries, probe.variant, probe.epsilon, probe.layer, probe.head, &L, &H);
  if (per_head.empty()) throw DataError("manifest has no labeled prompts");
  if (*probe.layer >= L || *probe.head >= H) throw DataError("probe layer/head outside the manifest's bundles");
  const auto& all = per_head[*probe.layer * H + *probe.head];
  if (all.dim() != probe.direction.size()) throw DimensionError("probe dimension differs from the activations");
  // Samples the probe was fitted on are left out.
  const std::set<std::size_t> fitted(probe.train_ids.begin(), probe.train_ids.end());
  LabeledActivations held;
  for (std::size_t i = 0; i < all.size(); ++i)
    if (!fitted.count(all.ids[i])) held.add(all.vectors[i], all.labels[i], all.ids[i]);
  const double acc = evaluate_probe(probe, held);
  if (g.json()) {
    std::cout << json{{"layer", *probe.layer},
                      {"head", *probe.head},
                      {"variant", to_string(probe.variant)},
                      {"evaluated", held.size()},
                      {"excluded_training", all.size() - held.size()},
                      {"accuracy", jnum(acc)}}
                     .dump(2)
              << '\n';
    return 0;
  }
  row(std::cout, "key", "value");
  row(std::cout, "layer", *probe.layer);
  row(std::cout, "head", *probe.head);
  row(std::cout, "variant", to_string(probe.variant));
  row(std::cout, "evaluated", held.size());
  row(std::cout, "excluded_training", all.size() - held.size());
  row(std::cout, "accuracy", num(acc));
  return 0;
}

// ---------------------------------------------------------------------------
// geometry

void print_histogram(const Globals& g, const std::vector<HistogramBin>& hist, json meta) {
  if (g.json()) {
    json bins = json::array();
    for (const auto& b : hist) bins.push_back({{"lo", jnum(b.lo)}, {"hi", jnum(b.hi)}, {"count", b.count}});
    meta["histogram"] = bins;
    std::cout << meta.dump(2) << '\n';
    return;
  }
  for (const auto& [k, v] : meta.items()) std::cout << "# " << k << "=" << (v.is_string() ? v.get<std::string>() : v.dump()) << '\n';
  row(std::cout, "bin_lo", "bin_hi", "count");
  for (const auto& b : hist) row(std::cout, num(b.lo), num(b.hi), b.count);
}

int cmd_tag_cosines(const Globals& g, const std::vector<std::string>& paths, std::size_t bins, bool cross_head) {
  if (bins == 0) throw UsageError("--hist-bins must be positive");
  Vector cosines;
  std::size_t excluded = 0, tags = 0;
  for (const auto& p : paths) {
    const auto b = read_bundle(p);
    const auto t = collect_residual_tags(b, g.epsilon);
    tags += t.size();
    const auto c = pairwise_tag_cosines(t);
    excluded += c.excluded.size();
    for (const auto& pr : c.pairs) {
      if (cross_head && t[pr.a].layer == t[pr.b].layer && t[pr.a].head == t[pr.b].head) continue;
      cosines.push_back(pr.cosine);
    }
  }
  const double mean = cosines.empty() ? 0.0 : pairwise_sum(cosines) / static_cast<double>(cosines.size());
  json meta{{"tags", tags}, {"excluded_zero", excluded}, {"pairs", cosines.size()}, {"mean", jnum(mean)}};
  print_histogram(g, histogram(cosines, bins), meta);
  return 0;
}

int cmd_tag_vs_embed(const Globals& g, const std::vector<std::string>& paths, std::size_t bins) {
  std::vector<Vector> per_layer;
  for (const auto& p : paths) {
    const auto b = read_bundle(p);
    if (per_layer.size() < b.n_layers) per_layer.resize(b.n_layers);
    for (std::size_t l = 0; l < b.n_layers; ++l) {
      if (!b.layers[l].residual_input || !b.layers[l].output_projection) continue;
      for (std::size_t t = 0; t < b.seq_len(); ++t)
        if (auto c = tag_embedding_cosine(b, l, t, g.epsilon)) per_layer[l].push_back(*c);
    }
  }
  if (bins > 0) {
    Vector all;
    for (const auto& v : per_layer) all.insert(all.end(), v.begin(), v.end());
    print_histogram(g, histogram(all, bins), json{{"tokens", all.size()}});
    return 0;
  }
  auto mean = [](const Vector& v) { return v.empty() ? std::optional<double>{} : pairwise_sum(v) / double(v.size()); };
  if (g.json()) {
    json arr = json::array();
    for (std::size_t l = 0; l < per_layer.size(); ++l) {
      const auto& v = per_layer[l];
      arr.push_back({{"layer", l},
                     {"count", v.size()},
                     {"mean", jnum(mean(v))},
                     {"min", v.empty() ? json(nullptr) : jnum(*std::min_element(v.begin(), v.end()))},
                     {"max", v.empty() ? json(nullptr) : jnum(*std::max_element(v.begin(), v.end()))}});
    }
    std::cout << json{{"epsilon", jnum(g.epsilon)}, {"layers", arr}}.dump(2) << '\n';
    return 0;
  }
  row(std::cout, "layer", "count", "mean", "min", "max");
  for (std::size_t l = 0; l < per_layer.size(); ++l) {
    const auto& v = per_layer[l];
    if (v.empty()) {
      row(std::cout, l, 0, "NA", "NA", "NA");
      continue;
    }
    row(std::cout, l, v.size(), num(mean(v)), num(*std::min_element(v.begin(), v.end())),
        num(*std::max_element(v.begin(), v.end())));
  }
  return 0;
}

// ---------------------------------------------------------------------------
// viz

int cmd_viz_pca(const Globals& g, const std::string& path, std::size_t layer, const std::string& site,
                std::optional<std::size_t> head, std::size_t k, const std::string& out) {
  const auto b = read_bundle(path);
  check_layer_head(b, layer, head);
  const auto& lt = b.layers[layer];
  auto need = [&](const std::optional<Matrix>& m, const char* name) -> const Matrix& {
    if (!m) throw DataError("layer " + std::to_string(layer) + " has no " + name);
    return *m;
  };
  Matrix emb;
  std::string source;
  if (head) {
    emb = b.head(layer, *head).values;
    source = "values";
  } else if (site == "input") {
    emb = need(lt.residual_input, "residual_input");
    source = site;
  } else if (site == "attn_out") {
    emb = need(lt.attn_output, "attn_output");
    source = site;
  } else {
    emb = need(lt.residual_input, "residual_input") + need(lt.attn_output, "attn_output");
    source = site;
  }
  const auto strip = pca_colors(emb, k, b.tokens);
  render_strip(strip, out);
  if (g.json()) {
    std::cout << json{{"image", out},
                      {"csv", sidecar_path(out).string()},
                      {"source", source},
                      {"k", k},
                      {"tokens", strip.size()},
                      {"explained_variance_ratio", jnum(strip.explained_ratio)}}
                     .dump(2)
              << '\n';
    return 0;
  }
  row(std::cout, "key", "value");
  row(std::cout, "image", out);
  row(std::cout, "csv", sidecar_path(out).string());
  row(std::cout, "source", source);
  row(std::cout, "k", k);
  row(std::cout, "tokens", strip.size());
  row(std::cout, "explained_variance_ratio", num(strip.explained_ratio));
  return 0;
}

// ---------------------------------------------------------------------------
// toy

struct ProveArgs {
  double s_tag = 40.0;
  double b = 0.0;
  double d = 1.0;
  std::size_t trials = 100;
  std::size_t seq_len = 16;
  double catch_threshold = 0.99;
  std::string dump;
};

int cmd_toy_prove(const Globals& g, const ProveArgs& a) {
  using namespace sinktag::toy;
  if (a.seq_len < 3) throw UsageError("--seq-len must be at least 3");
  const auto data = generate_dataset(a.trials, a.seq_len, g.resolved_seed());
  const auto params = analytic_params(a.s_tag, a.b, a.d);

  struct Check {
    std::string name;
    std::size_t passed = 0;
    std::size_t total = 0;
    double worst = 0.0;
    std::string worst_of;
  };
  Check limit{"limit", 0, 0, 0.0, "max |f - target|"};
  Check katch{"catch", 0, 0, 1.0, "min A1[i, sep], i >= sep"};
  Check tag{"tag", 0, 0, INFINITY, "min tagged - max untagged"};
  Check release{"release", 0, 0, 0.0, "max A2 deviation"};
  Check bind{"b_independence", 0, 0, 0.0, "max |f(b') - f(b)|, b' in {-3, 0, 3}"};
  Check mono{"monotone_limit", 0, 1, 0.0, "max error at s_tag 40 over {5, 10, 20, 40}"};

  for (const auto& seq : data) {
    const auto tr = forward(params, seq);
    const double err = std::abs(tr.output - seq.target);
    limit.worst = std::max(limit.worst, err);
    limit.passed += err <= 1e-3;

    const auto c = verify_catch(tr, seq.sep, a.catch_threshold);
    for (const auto& r : c.rows) katch.worst = std::min(katch.worst, r.sink_weight);
    katch.passed += c.pass;

    const auto t = verify_tag(tr, seq.sep);
    tag.worst = std::min(tag.worst, t.min_tagged - t.max_untagged_abs);
    tag.passed += t.pass;

    const auto r = verify_release(tr, seq.sep, 1e-3);
    release.worst = std::max({release.worst, r.max_before, r.max_uniform_dev});
    release.passed += r.pass;

    double dev = 0.0;
    for (double bb : {-3.0, 0.0, 3.0}) dev = std::max(dev, std::abs(predict(analytic_params(a.s_tag, bb, a.d), seq) - tr.output));
    bind.worst = std::max(bind.worst, dev);
    bind.passed += dev < 1e-4;
  }
  limit.total = katch.total = tag.total = release.total = bind.total = data.size();

  double prev = INFINITY;
  bool monotone = true;
  for (double s : {5.0, 10.0, 20.0, 40.0}) {
    const auto p = analytic_params(s, a.b, a.d);
    double mx = 0.0;
    for (const auto& seq : data) mx = std::max(mx, std::abs(predict(p, seq) - seq.target));
    monotone = monotone && mx <= prev;
    prev = mx;
  }
  mono.passed = monotone;
  mono.worst = prev;

  if (!a.dump.empty() && !data.empty()) {
    fs::create_directories(a.dump);
    const auto tr = forward(params, data.front());
    write_text(fs::path(a.dump) / "a1.tsv", attention_matrix_tsv(tr.a1));
    write_text(fs::path(a.dump) / "a2.tsv", vector_tsv(tr.a2));
  }

  const std::vector<Check> checks{limit, katch, tag, release, bind, mono};
  if (g.json()) {
    json arr = json::array();
    for (const auto& c : checks)
      arr.push_back({{"check", c.name},
                     {"passed", c.passed},
                     {"total", c.total},
                     {"worst", jnum(c.worst)},
                     {"worst_of", c.worst_of}});
    std::cout << json{{"s_tag", jnum(a.s_tag)}, {"b", jnum(a.b)}, {"d", jnum(a.d)}, {"checks", arr}}.dump(2) << '\n';
    return 0;
  }
  row(std::cout, "check", "passed", "total", "worst", "worst_of");
  for (const auto& c : checks) row(std::cout, c.name, c.passed, c.total, num(c.worst), c.worst_of);
  return 0;
}

struct TrainArgs {
  toy::TrainConfig cfg;
  std::string dump;
};

json params_json(const toy::ToyParams& p) {
  return {{"w_v1", jvec(p.w_v1.data())}, {"m2", jvec(p.m2.data())}, {"w_v2", jvec(p.w_v2)},
          {"s_num", jnum(p.s_num)},      {"s_tag", jnum(p.s_tag)}};
}

void print_curve(const Globals& g, const std::vector<toy::EpochStats>& curve, json summary) {
  if (g.json()) {
    json arr = json::array();
    for (const auto& e : curve) arr.push_back({{"epoch", e.epoch}, {"train_loss", jnum(e.train_loss)}, {"lr", jnum(e.lr)}});
    summary["curve"] = arr;
    std::cout << summary.dump(2) << '\n';
    return;
  }
  for (const auto& [k, v] : summary.items()) {
    if (v.is_object() || v.is_array()) continue;
    std::cout << "# " << k << "=" << (v.is_string() ? v.get<std::string>() : v.dump()) << '\n';
  }
  row(std::cout, "epoch", "train_loss", "lr");
  for (const auto& e : curve) row(std::cout, e.epoch, num(e.train_loss), num(e.lr));
}

int cmd_toy_train(const Globals& g, TrainArgs a) {
  a.cfg.seed = g.resolved_seed();
  const auto split = toy::make_split(a.cfg);
  const auto res = toy::train(a.cfg, split);
  if (!a.dump.empty() && !split.eval.empty()) {
    fs::create_directories(a.dump);
    const auto tr = toy::forward(res.params, split.eval.front());
    write_text(fs::path(a.dump) / "a1.tsv", attention_matrix_tsv(tr.a1));
    write_text(fs::path(a.dump) / "a2.tsv", vector_tsv(tr.a2));
  }
  json s{{"seed", a.cfg.seed},
         {"s_tag_init", jnum(a.cfg.s_tag_init)},
         {"eval_r2", jnum(res.eval_r2)},
         {"success", res.eval_r2 > toy::kSuccessR2},
         {"diverged_epoch", res.diverged_epoch ? json(*res.diverged_epoch) : json(nullptr)},
         {"params", params_json(res.params)}};
  print_curve(g, res.curve, s);
  return 0;
}

int cmd_toy_sweep(const Globals& g, toy::TrainConfig cfg, std::size_t seeds) {
  const auto base = g.resolved_seed();
  struct Run {
    std::uint64_t seed;
    double r2;
    std::optional<std::size_t> diverged;
  };
  std::vector<Run> runs;
  std::size_t successes = 0;
  for (std::size_t i = 0; i < seeds; ++i) {
    cfg.seed = base + i;
    const auto r = toy::train(cfg);
    runs.push_back({cfg.seed, r.eval_r2, r.diverged_epoch});
    successes += r.eval_r2 > toy::kSuccessR2;
  }
  if (g.json()) {
    json arr = json::array();
    for (const auto& r : runs)
      arr.push_back({{"seed", r.seed},
                     {"eval_r2", jnum(r.r2)},
                     {"success", r.r2 > toy::kSuccessR2},
                     {"diverged_epoch", r.diverged ? json(*r.diverged) : json(nullptr)}});
    std::cout << json{{"s_tag_init", jnum(cfg.s_tag_init)},
                      {"threshold", jnum(toy::kSuccessR2)},
                      {"successes", successes},
                      {"runs", arr}}
                     .dump(2)
              << '\n';
    return 0;
  }
  std::cout << "# s_tag_init=" << num(cfg.s_tag_init) << " successes=" << successes << "/" << seeds << '\n';
  row(std::cout, "seed", "eval_r2", "success", "diverged_epoch");
  for (const auto& r : runs)
    row(std::cout, r.seed, num(r.r2), r.r2 > toy::kSuccessR2 ? 1 : 0, r.diverged ? std::to_string(*r.diverged) : "NA");
  return 0;
}

int cmd_toy_extended_train(const Globals& g, TrainArgs a) {
  a.cfg.seed = g.resolved_seed();
  const auto res = toy::ext::train(a.cfg);
  if (!a.dump.empty()) {
    fs::create_directories(a.dump);
    const auto eval = toy::ext::generate_dataset(a.cfg.n_train + 1, a.cfg.seq_len, a.cfg.seed);
    write_text(fs::path(a.dump) / "attention.tsv",
               toy::ext::attention_tsv(toy::ext::forward(res.params, eval.back())));
  }
  json s{{"seed", a.cfg.seed},
         {"s_init", jnum(a.cfg.s_tag_init)},
         {"eval_r2", jnum(res.eval_r2)},
         {"success", res.eval_r2 > toy::ext::kSuccessR2},
         {"diverged_epoch", res.diverged_epoch ? json(*res.diverged_epoch) : json(nullptr)}};
  print_curve(g, res.curve, s);
  return 0;
}

void add_train_options(CLI::App* sub, toy::TrainConfig& cfg) {
  sub->add_option("--s-tag-init", cfg.s_tag_init, "initial [SEP] tag magnitude")->capture_default_str();
  sub->add_option("--epochs", cfg.epochs)->capture_default_str();
  sub->add_option("--n-train", cfg.n_train)->capture_default_str()->check(CLI::PositiveNumber);
  sub->add_option("--n-eval", cfg.n_eval)->capture_default_str();
  sub->add_option("--seq-len", cfg.seq_len)->capture_default_str();
  sub->add_option("--batch-size", cfg.batch_size)->capture_default_str()->check(CLI::PositiveNumber);
  sub->add_option("--lr", cfg.lr)->capture_default_str()->check(CLI::PositiveNumber);
  sub->add_option("--weight-decay", cfg.weight_decay)->capture_default_str()->check(CLI::NonNegativeNumber);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sinktag: attention-sink analysis and the catch/tag/release toy model"};
  app.fallthrough();
  app.require_subcommand(1);
  app.config_formatter(std::make_shared<JsonConfig>());
  app.set_config("--config", "", "JSON file of option defaults; explicit flags win");

  Globals g;
  app.add_option("--format", g.format, "output format")->check(CLI::IsMember({"tsv", "json"}))->capture_default_str();
  app.add_option("--epsilon", g.epsilon, "sink threshold, in (0, 1)")
      ->check(CLI::Validator(
          [](std::string& s) -> std::string {
            double v = 0.0;
            try {
              v = std::stod(s);
            } catch (const std::exception&) {
              return "epsilon must be a number";
            }
            return v > 0.0 && v < 1.0 ? "" : "epsilon must lie in (0, 1)";
          },
          "(0,1)"))
      ->capture_default_str();
  app.add_option("--seed", g.seed, "random seed (falls back to SINKTAG_SEED, then 0)");

  std::function<int()> run;
  auto on = [&](CLI::App* sub, std::function<int()> f) { sub->callback([&run, f] { run = f; }); };

  // bundle
  auto* bundle = app.add_subcommand("bundle", "inspect ACTB files")->require_subcommand(1);
  std::string bundle_path;
  auto* bv = bundle->add_subcommand("validate", "check shapes, stochasticity and causality");
  bv->add_option("path", bundle_path)->required();
  on(bv, [&] { return cmd_bundle_validate(g, bundle_path); });
  auto* bi = bundle->add_subcommand("info", "print header fields");
  bi->add_option("path", bundle_path)->required();
  on(bi, [&] { return cmd_bundle_info(g, bundle_path); });

  // sinks
  auto* sinks = app.add_subcommand("sinks", "sink detection and statistics")->require_subcommand(1);
  std::vector<std::string> paths;
  bool squared = false;
  auto* sd = sinks->add_subcommand("detect", "list sinks of every head");
  sd->add_option("bundle", bundle_path)->required();
  std::string dump_path;
  std::size_t dump_layer = 0, dump_head = 0;
  auto* dump_opt = sd->add_option("--dump", dump_path, "write one head's attention matrix as TSV");
  sd->add_option("--layer", dump_layer)->needs(dump_opt);
  sd->add_option("--head", dump_head)->needs(dump_opt);
  on(sd, [&] {
    std::optional<DumpTarget> d;
    if (!dump_path.empty()) d = DumpTarget{dump_path, dump_layer, dump_head};
    return cmd_sinks_detect(g, bundle_path, d);
  });
  auto* ss = sinks->add_subcommand("stats", "per-head sink counts and variance explained");
  ss->add_option("bundles", paths)->required();
  ss->add_flag("--squared", squared, "report the energy fraction (squared ratio)");
  on(ss, [&] { return cmd_sinks_stats(g, paths, squared); });
  auto* sw = sinks->add_subcommand("sweep", "average sink count over an epsilon grid");
  sw->add_option("bundles", paths)->required();
  std::string grid = "default";
  sw->add_option("--grid", grid, "'default' or a comma-separated list")->capture_default_str();
  on(sw, [&] { return cmd_sinks_sweep(g, paths, grid); });
  auto* st = sinks->add_subcommand("taxonomy", "most frequent sink tokens");
  st->add_option("bundles", paths)->required();
  std::size_t top = 10;
  st->add_option("--top", top)->capture_default_str();
  on(st, [&] { return cmd_sinks_taxonomy(g, paths, top); });

  // variance / decompose
  std::optional<std::size_t> opt_layer, opt_head, opt_token;
  auto* var = app.add_subcommand("variance", "share of each head's output explained by its tags");
  var->add_option("bundle", bundle_path)->required();
  var->add_option("--layer", opt_layer);
  var->add_option("--head", opt_head);
  var->add_flag("--squared", squared);
  on(var, [&] { return cmd_variance(g, bundle_path, opt_layer, opt_head, squared); });

  std::size_t layer = 0, head = 0;
  auto* dec = app.add_subcommand("decompose", "split one attention output row into tag and non-tag parts");
  dec->add_option("bundle", bundle_path)->required();
  dec->add_option("--layer", layer)->required();
  dec->add_option("--head", head)->required();
  dec->add_option("--token", opt_token, "position (default: last)");
  on(dec, [&] { return cmd_decompose(g, bundle_path, layer, head, opt_token); });

  // probe
  auto* probe = app.add_subcommand("probe", "mass-mean probes")->require_subcommand(1);
  ProbeFitArgs pf;
  auto* pfit = probe->add_subcommand("fit", "fit on a labeled prompt manifest");
  pfit->add_option("manifest", pf.manifest)->required();
  pfit->add_option("--layer", pf.layer, "layer (default: choose by held-in accuracy)");
  pfit->add_option("--head", pf.head, "head (default: choose by held-in accuracy)");
  pfit->add_option("--variant", pf.variant)->check(CLI::IsMember({"tag", "no_tag", "activation"}))->capture_default_str();
  pfit->add_option("--train-n", pf.train_n)->capture_default_str();
  pfit->add_option("--val-n", pf.val_n)->capture_default_str();
  pfit->add_option("--ridge", pf.ridge, "negative selects the default ridge")->capture_default_str();
  pfit->add_option("--out", pf.out, "write the probe JSON here");
  pfit->add_flag("--shuffle-labels", pf.shuffle_labels, "label-permutation control");
  on(pfit, [&] { return cmd_probe_fit(g, pf); });
  std::string probe_file, manifest;
  auto* peval = probe->add_subcommand("eval", "accuracy of a saved probe");
  peval->add_option("probe", probe_file)->required();
  peval->add_option("manifest", manifest)->required();
  on(peval, [&] { return cmd_probe_eval(g, probe_file, manifest); });

  // geometry
  auto* geom = app.add_subcommand("geometry", "tag vectors in the residual stream")->require_subcommand(1);
  std::size_t bins = 50;
  bool cross_head = false;
  auto* gtc = geom->add_subcommand("tag-cosines", "histogram of pairwise tag cosines");
  gtc->add_option("bundles", paths)->required();
  gtc->add_option("--hist-bins", bins)->capture_default_str();
  gtc->add_flag("--cross-head", cross_head, "only pairs from different heads");
  on(gtc, [&] { return cmd_tag_cosines(g, paths, bins, cross_head); });
  std::size_t embed_bins = 0;
  auto* gte = geom->add_subcommand("tag-vs-embed", "cosine between the projected tag and the residual input");
  gte->add_option("bundles", paths)->required();
  gte->add_option("--hist-bins", embed_bins, "histogram instead of per-layer summary")->capture_default_str();
  on(gte, [&] { return cmd_tag_vs_embed(g, paths, embed_bins); });

  // viz
  auto* viz = app.add_subcommand("viz", "visualizations")->require_subcommand(1);
  std::string site = "residual", out;
  std::size_t k = 3;
  std::optional<std::size_t> viz_head;
  auto* pca = viz->add_subcommand("pca", "PCA colour strip (PPM + CSV)");
  pca->add_option("bundle", bundle_path)->required();
  pca->add_option("--layer", layer)->required();
  pca->add_option("--site", site)->check(CLI::IsMember({"input", "attn_out", "residual"}))->capture_default_str();
  pca->add_option("--head", viz_head, "colour this head's value vectors instead of a residual site");
  pca->add_option("--k", k)->check(CLI::IsMember({2, 3}))->capture_default_str();
  pca->add_option("--out", out)->required();
  on(pca, [&] { return cmd_viz_pca(g, bundle_path, layer, site, viz_head, k, out); });

  // toy
  auto* toyc = app.add_subcommand("toy", "two-layer toy model")->require_subcommand(1);
  ProveArgs pa;
  auto* prove = toyc->add_subcommand("prove", "check the closed-form construction on random sequences");
  prove->add_option("--s-tag", pa.s_tag)->capture_default_str();
  prove->add_option("--b", pa.b)->capture_default_str();
  prove->add_option("--d", pa.d)->capture_default_str();
  prove->add_option("--trials", pa.trials)->capture_default_str();
  prove->add_option("--seq-len", pa.seq_len)->capture_default_str();
  prove->add_option("--catch-threshold", pa.catch_threshold)->capture_default_str();
  prove->add_option("--dump", pa.dump, "directory for a1.tsv / a2.tsv of the first trial");
  on(prove, [&] { return cmd_toy_prove(g, pa); });

  TrainArgs ta;
  bool factored = false;
  auto* tr = toyc->add_subcommand("train", "train from a random initialization");
  add_train_options(tr, ta.cfg);
  tr->add_flag("--factored-qk", factored, "train W_Q and W_K separately");
  tr->add_option("--dump", ta.dump, "directory for a1.tsv / a2.tsv on one held-out sequence");
  on(tr, [&] {
    ta.cfg.factored_qk = factored;
    return cmd_toy_train(g, ta);
  });

  toy::TrainConfig sweep_cfg;
  std::size_t seeds = 10;
  auto* sweep = toyc->add_subcommand("sweep", "train over consecutive seeds and count successes");
  add_train_options(sweep, sweep_cfg);
  sweep->add_option("--seeds", seeds)->capture_default_str();
  on(sweep, [&] { return cmd_toy_sweep(g, sweep_cfg, seeds); });

  auto* ext = toyc->add_subcommand("extended", "two-separator variant")->require_subcommand(1);
  TrainArgs ea;
  auto* etr = ext->add_subcommand("train", "train the 3-D, two-head model");
  add_train_options(etr, ea.cfg);
  etr->add_option("--dump", ea.dump, "directory for attention.tsv on one held-out sequence");
  on(etr, [&] { return cmd_toy_extended_train(g, ea); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  } catch (const sinktag::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }

  try {
    return run ? run() : 1;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
