#pragma once

// PCA colouring of token embeddings: project mean-centred rows onto the top
// two or three principal directions, stretch each component to [0, 255] and
// use it as an R, G (, B) channel.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "sinktag/error.hpp"
#include "sinktag/tensor.hpp"

namespace sinktag {

inline constexpr std::size_t kStripHeight = 32;

struct ColorStrip {
  std::size_t channels = 3;  // 2 (RG) or 3 (RGB)
  std::vector<std::array<std::uint8_t, 3>> colors;  // unused channels are 0
  std::vector<std::string> tokens;
  double explained_ratio = 0.0;  // sum of top-k eigenvalues / total variance

  std::size_t size() const { return colors.size(); }
};

namespace detail {

// Top-k principal directions (d x k) and their variances.
inline EigenResult principal_axes(const Matrix& centred, std::size_t k) {
  const std::size_t T = centred.rows(), d = centred.cols();
  const double scale = T > 1 ? 1.0 / static_cast<double>(T - 1) : 1.0;
  if (d <= T) return sym_eigen(scale * matmul_tn(centred, centred), k);
  // Fewer samples than dimensions: diagonalize the T x T Gram matrix and map
  // its eigenvectors back (u = X^T w / sqrt(lambda)).
  auto g = sym_eigen(scale * matmul_nt(centred, centred), k);
  EigenResult out{g.eigenvalues, Matrix(d, k)};
  for (std::size_t c = 0; c < k; ++c) {
    const double lam = g.eigenvalues[c] / scale;
    if (!(lam > 0.0)) continue;
    const double inv = 1.0 / std::sqrt(lam);
    for (std::size_t r = 0; r < d; ++r) {
      double acc = 0.0;
      for (std::size_t i = 0; i < T; ++i) acc += centred(i, r) * g.eigenvectors(i, c);
      out.eigenvectors(r, c) = acc * inv;
    }
    fix_sign(out.eigenvectors, c);
  }
  return out;
}

inline std::uint8_t to_channel(double v, double lo, double hi) {
  const double x = (v - lo) / (hi - lo) * 255.0;
  const double r = std::floor(x + 0.5);
  return static_cast<std::uint8_t>(std::clamp(r, 0.0, 255.0));
}

}  // namespace detail

inline ColorStrip pca_colors(const Matrix& embeddings, std::size_t k, std::vector<std::string> tokens = {}) {
  if (k != 2 && k != 3) throw DataError("pca_colors: k must be 2 or 3");
  const std::size_t T = embeddings.rows(), d = embeddings.cols();
  if (T < k || d < k) {
    throw DimensionError("pca_colors: need at least k tokens and k dimensions, got " + std::to_string(T) + "x" +
                         std::to_string(d));
  }
  if (!tokens.empty() && tokens.size() != T) throw DimensionError("pca_colors: token count differs from rows");

  Matrix centred = embeddings;
  for (std::size_t c = 0; c < d; ++c) {
    const double mean =
        detail::pairwise_reduce(0, T, [&](std::size_t r) { return embeddings(r, c); }) / static_cast<double>(T);
    for (std::size_t r = 0; r < T; ++r) centred(r, c) -= mean;
  }

  ColorStrip strip;
  strip.channels = k;
  strip.colors.assign(T, {0, 0, 0});
  strip.tokens = tokens.empty() ? std::vector<std::string>(T) : std::move(tokens);

  const double scale = T > 1 ? 1.0 / static_cast<double>(T - 1) : 1.0;
  double total = 0.0;
  for (double x : centred.data()) total += x * x;
  total *= scale;
  if (!(total > 0.0)) return strip;

  const auto axes = detail::principal_axes(centred, k);
  double top = 0.0;
  for (std::size_t c = 0; c < k; ++c) top += std::max(axes.eigenvalues[c], 0.0);
  strip.explained_ratio = std::min(top / total, 1.0);

  for (std::size_t c = 0; c < k; ++c) {
    if (axes.eigenvalues[c] <= 1e-12 * total) continue;  // constant channel stays 0
    Vector proj(T);
    for (std::size_t r = 0; r < T; ++r) proj[r] = dot(centred.row(r), axes.eigenvectors.col_copy(c));
    const auto [lo, hi] = std::minmax_element(proj.begin(), proj.end());
    if (!(*hi > *lo)) continue;
    for (std::size_t r = 0; r < T; ++r) strip.colors[r][c] = detail::to_channel(proj[r], *lo, *hi);
  }
  return strip;
}

// Binary PPM (P6): one column per token, kStripHeight rows.
inline std::vector<unsigned char> encode_ppm(const ColorStrip& strip) {
  if (strip.size() == 0) throw DataError("render_strip: empty strip");
  const std::string header = "P6\n" + std::to_string(strip.size()) + " " + std::to_string(kStripHeight) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  out.reserve(header.size() + strip.size() * kStripHeight * 3);
  for (std::size_t y = 0; y < kStripHeight; ++y) {
    for (const auto& c : strip.colors) {
      out.push_back(c[0]);
      out.push_back(c[1]);
      out.push_back(strip.channels == 3 ? c[2] : 0);
    }
  }
  return out;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

// Sidecar: a '#' metadata line, then `token,c1,c2,c3` and one row per token.
inline std::string encode_strip_csv(const ColorStrip& strip) {
  char meta[96];
  std::snprintf(meta, sizeof meta, "# k=%zu explained_variance_ratio=%.6g\n", strip.channels, strip.explained_ratio);
  std::string out = meta;
  out += "token,c1,c2,c3\n";
  for (std::size_t i = 0; i < strip.size(); ++i) {
    const auto& c = strip.colors[i];
    out += csv_field(strip.tokens[i]) + "," + std::to_string(c[0]) + "," + std::to_string(c[1]) + "," +
           std::to_string(strip.channels == 3 ? c[2] : 0) + "\n";
  }
  return out;
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& image) {
  auto p = image;
  p.replace_extension(".csv");
  return p;
}

inline void render_strip(const ColorStrip& strip, const std::filesystem::path& path) {
  const auto bytes = encode_ppm(strip);
  std::ofstream img(path, std::ios::binary | std::ios::trunc);
  if (!img) throw IoError("cannot open '" + path.string() + "' for writing");
  img.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  std::ofstream csv(sidecar_path(path), std::ios::trunc);
  if (!csv) throw IoError("cannot open '" + sidecar_path(path).string() + "' for writing");
  csv << encode_strip_csv(strip);
  if (!img || !csv) throw IoError("writing strip '" + path.string() + "' failed");
}

}  // namespace sinktag
