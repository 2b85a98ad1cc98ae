#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "sinktag/pca_viz.hpp"
#include "support.hpp"

using namespace sinktag;
using namespace testing_support;
namespace fs = std::filesystem;

namespace {

Matrix two_clusters(std::size_t T, std::size_t d) {
  Matrix e(T, d);
  for (std::size_t i = 0; i < T; ++i) e(i, 0) = i % 3 == 0 ? 1.0 : -1.0;
  return e;
}

// Channel equal to the reference, or its mirror image, within one level.
bool same_up_to_reflection(const ColorStrip& a, const ColorStrip& b, std::size_t c) {
  bool direct = true, mirrored = true;
  for (std::size_t i = 0; i < a.size(); ++i) {
    direct = direct && std::abs(int(a.colors[i][c]) - int(b.colors[i][c])) <= 1;
    mirrored = mirrored && std::abs(int(a.colors[i][c]) - (255 - int(b.colors[i][c]))) <= 1;
  }
  return direct || mirrored;
}

}  // namespace

TEST(PcaColors, TwoClustersBimodalFirstChannel) {
  const auto s = pca_colors(two_clusters(9, 4), 2);
  EXPECT_EQ(s.channels, 2u);
  for (std::size_t i = 0; i < 9; ++i) {
    EXPECT_TRUE(s.colors[i][0] == 0 || s.colors[i][0] == 255);
    EXPECT_EQ(s.colors[i][1], 0);
    EXPECT_EQ(s.colors[i][2], 0);
  }
  EXPECT_NE(s.colors[0][0], s.colors[1][0]);
  EXPECT_NEAR(s.explained_ratio, 1.0, 1e-12);
}

TEST(PcaColors, RotationInvariant) {
  Rng rng(71);
  Matrix e(20, 2);
  for (std::size_t i = 0; i < 20; ++i) {
    e(i, 0) = 3.0 * rng.normal();
    e(i, 1) = rng.normal();
  }
  const auto ref = pca_colors(e, 2);
  for (int trial = 0; trial < 10; ++trial) {
    const double th = rng.uniform(0, 2 * std::numbers::pi);
    const Matrix rot{{std::cos(th), -std::sin(th)}, {std::sin(th), std::cos(th)}};
    const auto s = pca_colors(matmul(e, rot), 2);
    EXPECT_TRUE(same_up_to_reflection(ref, s, 0));
    EXPECT_TRUE(same_up_to_reflection(ref, s, 1));
  }
}

TEST(PcaColors, FullRangeAndShiftInvariant) {
  Rng rng(72);
  const Matrix e = random_matrix(rng, 15, 6);
  const auto s = pca_colors(e, 3);
  for (std::size_t c = 0; c < 3; ++c) {
    int lo = 255, hi = 0;
    for (const auto& col : s.colors) {
      lo = std::min<int>(lo, col[c]);
      hi = std::max<int>(hi, col[c]);
    }
    EXPECT_EQ(lo, 0);
    EXPECT_EQ(hi, 255);
  }
  Matrix shifted = e;
  for (std::size_t i = 0; i < 15; ++i)
    for (std::size_t j = 0; j < 6; ++j) shifted(i, j) += 10.0 * static_cast<double>(j + 1);
  const auto t = pca_colors(shifted, 3);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_TRUE(same_up_to_reflection(s, t, c));
  EXPECT_LE(s.explained_ratio, 1.0);
  EXPECT_GT(s.explained_ratio, 0.0);
}

TEST(PcaColors, IdenticalEmbeddingsAllZero) {
  const auto s = pca_colors(Matrix(5, 4, 2.5), 3);
  for (const auto& c : s.colors) EXPECT_EQ(c, (std::array<std::uint8_t, 3>{0, 0, 0}));
}

TEST(PcaColors, WideEmbeddingsMatchCovarianceRoute) {
  Rng rng(73);
  const Matrix e = random_matrix(rng, 6, 30);
  const auto s = pca_colors(e, 3);
  // Oracle: project centred rows onto eigenvectors of the d x d covariance.
  Matrix c = e;
  for (std::size_t j = 0; j < 30; ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < 6; ++i) m += e(i, j);
    for (std::size_t i = 0; i < 6; ++i) c(i, j) -= m / 6.0;
  }
  const auto eig = sym_eigen((1.0 / 5.0) * matmul_tn(c, c), 3);
  for (std::size_t k = 0; k < 3; ++k) {
    Vector proj(6);
    for (std::size_t i = 0; i < 6; ++i) proj[i] = dot(c.row(i), eig.eigenvectors.col_copy(k));
    const double lo = *std::min_element(proj.begin(), proj.end()), hi = *std::max_element(proj.begin(), proj.end());
    for (std::size_t i = 0; i < 6; ++i) {
      const int expect = static_cast<int>(std::floor((proj[i] - lo) / (hi - lo) * 255.0 + 0.5));
      EXPECT_LE(std::abs(expect - int(s.colors[i][k])), 1) << k << " " << i;
    }
  }
}

TEST(PcaColors, Errors) {
  EXPECT_THROW(pca_colors(Matrix(2, 5), 3), DimensionError);
  EXPECT_THROW(pca_colors(Matrix(5, 2), 3), DimensionError);
  EXPECT_THROW(pca_colors(Matrix(5, 5), 4), DataError);
  EXPECT_THROW(pca_colors(Matrix(5, 5), 2, {"a"}), DimensionError);
}

TEST(PcaColors, DeterministicBytes) {
  Rng rng(74);
  const Matrix e = random_matrix(rng, 12, 8);
  EXPECT_EQ(encode_ppm(pca_colors(e, 3)), encode_ppm(pca_colors(e, 3)));
}

TEST(RenderStrip, PpmLayout) {
  ColorStrip s;
  s.channels = 3;
  s.colors = {{1, 2, 3}, {4, 5, 6}, {7, 8, 9}};
  s.tokens = {"a", "b", "c"};
  const auto bytes = encode_ppm(s);
  const std::string header = "P6\n3 32\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 3 * 32 * 3);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 12), header);
  EXPECT_EQ(bytes[12], 1);
  EXPECT_EQ(bytes[12 + 9], 1);  // second pixel row repeats the first
  EXPECT_EQ(bytes.back(), 9);
}

TEST(RenderStrip, RgBlueIsZero) {
  ColorStrip s;
  s.channels = 2;
  s.colors = {{10, 20, 99}, {30, 40, 99}};
  s.tokens = {"x", "y"};
  const auto bytes = encode_ppm(s);
  for (std::size_t i = 12; i < bytes.size(); i += 3) EXPECT_EQ(bytes[i + 2], 0);
}

TEST(RenderStrip, EmptyStripAndFiles) {
  EXPECT_THROW(encode_ppm(ColorStrip{}), DataError);
  const auto dir = fs::temp_directory_path() / "sinktag_pca";
  fs::create_directories(dir);
  auto s = pca_colors(two_clusters(4, 3), 2, {"<s>", "a,b", "say \"hi\"", "."});
  render_strip(s, dir / "strip.ppm");
  EXPECT_EQ(fs::file_size(dir / "strip.ppm"), 12u + 4 * 32 * 3);
  std::ifstream csv(dir / "strip.csv");
  std::string meta, head, row;
  std::getline(csv, meta);
  std::getline(csv, head);
  EXPECT_EQ(meta.rfind("# k=2 explained_variance_ratio=", 0), 0u) << meta;
  EXPECT_EQ(head, "token,c1,c2,c3");
  std::getline(csv, row);
  std::getline(csv, row);
  EXPECT_EQ(row.substr(0, 6), "\"a,b\",");
  std::getline(csv, row);
  EXPECT_EQ(row.substr(0, 13), "\"say \"\"hi\"\"\",");
  EXPECT_THROW(render_strip(s, "/nonexistent_dir/x.ppm"), IoError);
}
