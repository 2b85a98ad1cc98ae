#pragma once

// ACTB v1: portable container for per-layer / per-head activations exported
// from a transformer.
//
// Layout (all integers little-endian):
//   [0, 8)    magic  'A' 'C' 'T' 'B' 0x00 0x00 0x00 0x01
//   [8, 16)   u64    manifest byte length N
//   [16, 16+N) UTF-8 JSON manifest
//   zero padding up to the next multiple of 64 (the data section start)
//   tensor blobs, raw little-endian f32, row-major. Every blob offset is
//   relative to the data section start and is a multiple of 64; the gaps
//   between blobs are zero padding. The file ends exactly at the end of the
//   last blob.
//
// Manifest keys: format ("ACTB"), version (1), endianness ("little"),
// dtype ("f32"), model_name, tokens, seq_len, n_layers, n_heads, d_head,
// d_model, layers[] (per layer: residual_input / attn_output /
// output_projection presence flags) and tensors[] (name, layer, head for
// per-head tensors, shape, offset, length).

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sinktag/error.hpp"
#include "sinktag/tensor.hpp"

namespace sinktag {

inline constexpr std::array<unsigned char, 8> kActbMagic{'A', 'C', 'T', 'B', 0, 0, 0, 1};
inline constexpr int kActbVersion = 1;
inline constexpr std::size_t kActbAlignment = 64;
inline constexpr double kRowSumTolerance = 1e-3;
inline constexpr double kUpperTriangleTolerance = 1e-6;

struct HeadTensors {
  Matrix attention;  // T x T, post-softmax
  Matrix values;     // T x d_head

  friend bool operator==(const HeadTensors&, const HeadTensors&) = default;
};

struct LayerTensors {
  std::optional<Matrix> residual_input;     // T x d_model
  std::optional<Matrix> attn_output;        // T x d_model
  std::optional<Matrix> output_projection;  // d_model x (H * d_head)

  friend bool operator==(const LayerTensors&, const LayerTensors&) = default;
};

struct ActivationBundle {
  std::string model_name;
  std::vector<std::string> tokens;
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::size_t d_head = 0;
  std::size_t d_model = 0;
  std::vector<HeadTensors> heads;    // layer-major, n_layers * n_heads
  std::vector<LayerTensors> layers;  // n_layers

  std::size_t seq_len() const { return tokens.size(); }
  HeadTensors& head(std::size_t layer, std::size_t h) { return heads.at(layer * n_heads + h); }
  const HeadTensors& head(std::size_t layer, std::size_t h) const { return heads.at(layer * n_heads + h); }

  friend bool operator==(const ActivationBundle&, const ActivationBundle&) = default;
};

struct Violation {
  std::string kind;  // "shape" | "stochasticity" | "causality" | "finite" | "count"
  std::string message;
};

struct ValidationReport {
  std::vector<Violation> violations;
  bool ok() const { return violations.empty(); }
};

namespace detail {

inline std::string where(std::size_t layer, std::size_t head) {
  return "layer " + std::to_string(layer) + " head " + std::to_string(head);
}

inline void check_shape(ValidationReport& rep, const Matrix& m, std::size_t rows, std::size_t cols,
                        const std::string& what) {
  if (m.rows() != rows || m.cols() != cols) {
    rep.violations.push_back({"shape", what + ": expected " + std::to_string(rows) + "x" + std::to_string(cols) +
                                           ", got " + std::to_string(m.rows()) + "x" + std::to_string(m.cols())});
  } else if (!m.all_finite()) {
    rep.violations.push_back({"finite", what + ": contains non-finite entries"});
  }
}

}  // namespace detail

inline ValidationReport validate_bundle(const ActivationBundle& b) {
  ValidationReport rep;
  const std::size_t T = b.seq_len();
  if (b.heads.size() != b.n_layers * b.n_heads) {
    rep.violations.push_back({"count", "expected " + std::to_string(b.n_layers * b.n_heads) +
                                           " head tensor pairs, got " + std::to_string(b.heads.size())});
    return rep;
  }
  if (b.layers.size() != b.n_layers) {
    rep.violations.push_back({"count", "expected " + std::to_string(b.n_layers) + " layer entries, got " +
                                           std::to_string(b.layers.size())});
    return rep;
  }
  if (!b.heads.empty() && b.heads.front().attention.rows() != T) {
    rep.violations.push_back({"shape", "tokens has length " + std::to_string(T) + " but attention maps have " +
                                           std::to_string(b.heads.front().attention.rows()) + " rows"});
    return rep;
  }
  for (std::size_t l = 0; l < b.n_layers; ++l) {
    for (std::size_t h = 0; h < b.n_heads; ++h) {
      const auto& ht = b.head(l, h);
      const std::string loc = detail::where(l, h);
      const std::size_t before = rep.violations.size();
      detail::check_shape(rep, ht.attention, T, T, loc + " attention");
      detail::check_shape(rep, ht.values, T, b.d_head, loc + " values");
      if (rep.violations.size() != before) continue;
      for (std::size_t r = 0; r < T; ++r) {
        auto row = ht.attention.row(r);
        const double s = pairwise_sum(row);
        if (std::abs(s - 1.0) > kRowSumTolerance) {
          rep.violations.push_back({"stochasticity", loc + " row " + std::to_string(r) + ": row sum " +
                                                         std::to_string(s) + " differs from 1"});
        }
        for (std::size_t c = 0; c < T; ++c) {
          if (c > r && std::abs(row[c]) > kUpperTriangleTolerance) {
            rep.violations.push_back({"causality", loc + " row " + std::to_string(r) + ": entry at column " +
                                                       std::to_string(c) + " above the diagonal"});
            break;
          }
          if (row[c] < -kUpperTriangleTolerance) {
            rep.violations.push_back({"stochasticity", loc + " row " + std::to_string(r) +
                                                           ": negative probability at column " + std::to_string(c)});
            break;
          }
        }
      }
    }
  }
  for (std::size_t l = 0; l < b.n_layers; ++l) {
    const auto& lt = b.layers[l];
    const std::string loc = "layer " + std::to_string(l);
    if (lt.residual_input) detail::check_shape(rep, *lt.residual_input, T, b.d_model, loc + " residual_input");
    if (lt.attn_output) detail::check_shape(rep, *lt.attn_output, T, b.d_model, loc + " attn_output");
    if (lt.output_projection) {
      detail::check_shape(rep, *lt.output_projection, b.d_model, b.n_heads * b.d_head, loc + " output_projection");
    }
  }
  return rep;
}

namespace detail {

inline std::size_t align_up(std::size_t n) { return (n + kActbAlignment - 1) / kActbAlignment * kActbAlignment; }

inline void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline void put_f32(unsigned char* dst, double x) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(x));
  for (int i = 0; i < 4; ++i) dst[i] = static_cast<unsigned char>(bits >> (8 * i));
}

inline double get_f32(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return static_cast<double>(std::bit_cast<float>(bits));
}

struct BlobRef {
  std::string name;
  std::size_t layer;
  std::optional<std::size_t> head;
  const Matrix* m;
};

inline std::vector<BlobRef> blob_order(const ActivationBundle& b) {
  std::vector<BlobRef> refs;
  for (std::size_t l = 0; l < b.n_layers; ++l) {
    for (std::size_t h = 0; h < b.n_heads; ++h) {
      refs.push_back({"attention", l, h, &b.head(l, h).attention});
      refs.push_back({"values", l, h, &b.head(l, h).values});
    }
    const auto& lt = b.layers[l];
    if (lt.residual_input) refs.push_back({"residual_input", l, std::nullopt, &*lt.residual_input});
    if (lt.attn_output) refs.push_back({"attn_output", l, std::nullopt, &*lt.attn_output});
    if (lt.output_projection) refs.push_back({"output_projection", l, std::nullopt, &*lt.output_projection});
  }
  return refs;
}

}  // namespace detail

// Serializes to the ACTB byte layout. Tensor entries are rounded to f32.
inline std::vector<unsigned char> encode_bundle(const ActivationBundle& b) {
  const auto rep = validate_bundle(b);
  if (!rep.ok()) throw DataError("write_bundle: invalid bundle: " + rep.violations.front().message);

  using nlohmann::json;
  json manifest;
  manifest["format"] = "ACTB";
  manifest["version"] = kActbVersion;
  manifest["endianness"] = "little";
  manifest["dtype"] = "f32";
  manifest["model_name"] = b.model_name;
  manifest["tokens"] = b.tokens;
  manifest["seq_len"] = b.seq_len();
  manifest["n_layers"] = b.n_layers;
  manifest["n_heads"] = b.n_heads;
  manifest["d_head"] = b.d_head;
  manifest["d_model"] = b.d_model;
  json layers = json::array();
  for (const auto& lt : b.layers) {
    layers.push_back({{"residual_input", lt.residual_input.has_value()},
                      {"attn_output", lt.attn_output.has_value()},
                      {"output_projection", lt.output_projection.has_value()}});
  }
  manifest["layers"] = layers;

  const auto refs = detail::blob_order(b);
  json tensors = json::array();
  std::size_t offset = 0;
  std::size_t end = 0;
  for (const auto& r : refs) {
    const std::size_t len = r.m->size() * 4;
    json t = {{"name", r.name}, {"layer", r.layer}, {"shape", {r.m->rows(), r.m->cols()}}, {"offset", offset},
              {"length", len}};
    if (r.head) t["head"] = *r.head;
    tensors.push_back(t);
    end = offset + len;
    offset = detail::align_up(end);
  }
  manifest["tensors"] = tensors;

  const std::string text = manifest.dump();
  std::vector<unsigned char> out(kActbMagic.begin(), kActbMagic.end());
  detail::put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  const std::size_t data_start = detail::align_up(out.size());
  out.resize(data_start + end, 0);
  for (std::size_t i = 0; i < refs.size(); ++i) {
    unsigned char* dst = out.data() + data_start + tensors[i]["offset"].get<std::size_t>();
    for (double x : refs[i].m->data()) {
      detail::put_f32(dst, x);
      dst += 4;
    }
  }
  return out;
}

// With validate = false only the container structure is checked, so callers
// can report every content violation themselves.
inline ActivationBundle decode_bundle(const std::vector<unsigned char>& bytes, bool validate = true) {
  using nlohmann::json;
  if (bytes.size() < 16) {
    throw DataError("truncated file: expected at least 16 header bytes, got " + std::to_string(bytes.size()));
  }
  if (std::memcmp(bytes.data(), kActbMagic.data(), 4) != 0) throw DataError("bad magic: not an ACTB file");
  if (std::memcmp(bytes.data() + 4, kActbMagic.data() + 4, 4) != 0) {
    throw DataError("unsupported ACTB version in magic");
  }
  const std::uint64_t mlen = detail::get_u64(bytes.data() + 8);
  if (mlen > bytes.size() - 16) {
    throw DataError("truncated file: expected at least " + std::to_string(16 + mlen) + " bytes, got " +
                    std::to_string(bytes.size()));
  }
  json m;
  try {
    m = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(mlen));
  } catch (const json::exception& e) {
    throw DataError(std::string("manifest is not valid JSON: ") + e.what());
  }

  ActivationBundle b;
  std::size_t T = 0;
  try {
    if (m.at("format").get<std::string>() != "ACTB") throw DataError("manifest format is not ACTB");
    if (m.at("version").get<int>() != kActbVersion) {
      throw DataError("version mismatch: file has " + m.at("version").dump() + ", reader supports 1");
    }
    if (m.at("endianness").get<std::string>() != "little") throw DataError("unsupported endianness marker");
    if (m.at("dtype").get<std::string>() != "f32") throw DataError("unsupported dtype");
    b.model_name = m.at("model_name").get<std::string>();
    b.tokens = m.at("tokens").get<std::vector<std::string>>();
    T = m.at("seq_len").get<std::size_t>();
    b.n_layers = m.at("n_layers").get<std::size_t>();
    b.n_heads = m.at("n_heads").get<std::size_t>();
    b.d_head = m.at("d_head").get<std::size_t>();
    b.d_model = m.at("d_model").get<std::size_t>();
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed manifest: ") + e.what());
  }
  if (T != b.tokens.size()) {
    throw DataError("shape mismatch: seq_len " + std::to_string(T) + " but " + std::to_string(b.tokens.size()) +
                    " tokens");
  }

  if (!m.contains("layers") || !m.contains("tensors") || !m["tensors"].is_array()) {
    throw DataError("malformed manifest: missing layers or tensors");
  }
  const auto& layers = m["layers"];
  if (!layers.is_array() || layers.size() != b.n_layers) throw DataError("shape mismatch: layers array length");
  b.heads.resize(b.n_layers * b.n_heads);
  b.layers.resize(b.n_layers);

  const std::size_t data_start = detail::align_up(16 + mlen);
  std::size_t file_end = data_start;
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  std::vector<std::vector<bool>> seen_head(b.n_layers, std::vector<bool>(2 * b.n_heads, false));

  for (const auto& t : m["tensors"]) {
    std::string name;
    std::size_t layer = 0, offset = 0, length = 0, rows = 0, cols = 0;
    std::optional<std::size_t> head;
    try {
      name = t.at("name").get<std::string>();
      layer = t.at("layer").get<std::size_t>();
      offset = t.at("offset").get<std::size_t>();
      length = t.at("length").get<std::size_t>();
      const auto shape = t.at("shape").get<std::vector<std::size_t>>();
      if (shape.size() != 2) throw DataError("shape mismatch: tensor " + name + " is not rank 2");
      rows = shape[0];
      cols = shape[1];
      if (t.contains("head")) head = t.at("head").get<std::size_t>();
    } catch (const json::exception& e) {
      throw DataError(std::string("malformed tensor entry: ") + e.what());
    }
    const std::string loc = name + " (layer " + std::to_string(layer) + (head ? " head " + std::to_string(*head) : "") + ")";
    if (layer >= b.n_layers) throw DataError("tensor " + loc + ": layer out of range");
    if (length != rows * cols * 4) {
      throw DataError("tensor " + loc + ": declared length " + std::to_string(length) + " disagrees with shape " +
                      std::to_string(rows) + "x" + std::to_string(cols));
    }
    if (offset % kActbAlignment != 0) throw DataError("tensor " + loc + ": offset not 64-byte aligned");
    if (data_start + offset + length > bytes.size()) {
      throw DataError("truncated file: tensor " + loc + " needs bytes up to " +
                      std::to_string(data_start + offset + length) + ", file has " + std::to_string(bytes.size()));
    }
    spans.emplace_back(offset, offset + length);
    file_end = std::max(file_end, data_start + offset + length);

    std::vector<double> data(rows * cols);
    const unsigned char* src = bytes.data() + data_start + offset;
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = detail::get_f32(src + 4 * i);
    Matrix mat(rows, cols, std::move(data));

    if (name == "attention" || name == "values") {
      if (!head || *head >= b.n_heads) throw DataError("tensor " + loc + ": missing or out-of-range head");
      const std::size_t slot = 2 * *head + (name == "values" ? 1 : 0);
      if (seen_head[layer][slot]) throw DataError("tensor " + loc + ": duplicated");
      seen_head[layer][slot] = true;
      (name == "attention" ? b.head(layer, *head).attention : b.head(layer, *head).values) = std::move(mat);
    } else {
      auto& lt = b.layers[layer];
      std::optional<Matrix>* slot = nullptr;
      if (name == "residual_input") slot = &lt.residual_input;
      else if (name == "attn_output") slot = &lt.attn_output;
      else if (name == "output_projection") slot = &lt.output_projection;
      else throw DataError("unknown tensor name '" + name + "'");
      if (!layers[layer].is_object() || !layers[layer].value(name, false)) throw DataError("tensor " + loc + ": present but flagged absent");
      if (slot->has_value()) throw DataError("tensor " + loc + ": duplicated");
      *slot = std::move(mat);
    }
  }

  for (std::size_t l = 0; l < b.n_layers; ++l) {
    for (std::size_t s = 0; s < 2 * b.n_heads; ++s) {
      if (!seen_head[l][s]) {
        throw DataError(std::string("missing ") + (s % 2 ? "values" : "attention") + " for " +
                        detail::where(l, s / 2));
      }
    }
    for (const char* name : {"residual_input", "attn_output", "output_projection"}) {
      const bool flagged = layers[l].is_object() && layers[l].value(name, false);
      const auto& lt = b.layers[l];
      const bool present = std::string(name) == "residual_input" ? lt.residual_input.has_value()
                           : std::string(name) == "attn_output"  ? lt.attn_output.has_value()
                                                                 : lt.output_projection.has_value();
      if (flagged != present) {
        throw DataError(std::string("layer ") + std::to_string(l) + " " + name + " flagged present but missing");
      }
    }
  }

  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 1; i < spans.size(); ++i) {
    if (spans[i].first < spans[i - 1].second) throw DataError("overlapping tensor blobs in manifest");
  }
  const std::size_t expected_size = spans.empty() ? 16 + mlen : file_end;
  if (expected_size != bytes.size()) {
    throw DataError("file length mismatch: expected " + std::to_string(expected_size) + " bytes, got " +
                    std::to_string(bytes.size()));
  }

  if (!validate) return b;
  const auto rep = validate_bundle(b);
  if (!rep.ok()) throw DataError("invalid bundle: " + rep.violations.front().message);
  return b;
}

inline void write_bundle(const ActivationBundle& b, const std::filesystem::path& path) {
  const auto bytes = encode_bundle(b);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write to '" + path.string() + "' failed");
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline ActivationBundle read_bundle(const std::filesystem::path& path, bool validate = true) {
  return decode_bundle(read_file_bytes(path), validate);
}

}  // namespace sinktag
