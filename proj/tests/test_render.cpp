#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "hypermvp/error.hpp"
#include "hypermvp/render.hpp"

using namespace hypermvp;
using namespace hypermvp::render;

namespace {

PointCloud parse_text(const std::string& text, bool ply) {
  std::istringstream in(text);
  return ply ? parse_ply(in) : parse_xyz(in);
}

std::string error_of(const std::string& text, bool ply) {
  try {
    parse_text(text, ply);
  } catch (const ParseError& e) {
    return e.what();
  }
  return "";
}

PointCloud random_cloud(Rng& rng, std::size_t n) {
  PointCloud c;
  for (std::size_t i = 0; i < n; ++i) {
    c.add({rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9)},
          {rng.uniform(), rng.uniform(), rng.uniform()});
  }
  return c;
}

}  // namespace

TEST(Loader, XyzThreePoints) {
  PointCloud c = parse_text("0 0 0\n1 0 0\n0 1 0\n", false);
  ASSERT_EQ(c.size(), 3u);
  EXPECT_EQ(c.positions[1], (Vec3{1, 0, 0}));
  for (const auto& col : c.colors) EXPECT_EQ(col, kDefaultGray);
}

TEST(Loader, XyzrgbScalesBytes) {
  PointCloud c = parse_text("0 0 0 255 0 0\n", false);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c.positions[0], (Vec3{0, 0, 0}));
  EXPECT_EQ(c.colors[0], (Vec3{1, 0, 0}));
}

TEST(Loader, RejectsBadRows) {
  EXPECT_NE(error_of("0 0 0\n1 x 0\n", false).find(":2:"), std::string::npos);
  EXPECT_NE(error_of("0 0\n", false).find("columns"), std::string::npos);
  EXPECT_NE(error_of("# nothing\n", false).find("no points"), std::string::npos);
}

TEST(Loader, PlyWithColors) {
  const std::string ply =
      "ply\nformat ascii 1.0\ncomment test\nelement vertex 2\nproperty float x\nproperty float y\n"
      "property float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\n"
      "element face 1\nproperty list uchar int vertex_indices\nend_header\n"
      "0 0 1 255 0 51\n1 2 3 0 255 0\n3 0 1 2\n";
  PointCloud c = parse_text(ply, true);
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c.positions[1], (Vec3{1, 2, 3}));
  EXPECT_DOUBLE_EQ(c.colors[0][2], 0.2);
  EXPECT_EQ(c.colors[1], (Vec3{0, 1, 0}));
}

TEST(Loader, PlyVertexCountMismatch) {
  const std::string ply =
      "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\n"
      "end_header\n0 0 0\n";
  EXPECT_NE(error_of(ply, true).find("vertex count mismatch"), std::string::npos);
  EXPECT_NE(error_of("plx\n", true).find("malformed header"), std::string::npos);
  EXPECT_NE(error_of("ply\nformat binary_little_endian 1.0\nend_header\n", true).find("ASCII"), std::string::npos);
}

TEST(Loader, UnknownExtension) {
  EXPECT_THROW(load_point_cloud("cloud.obj"), ParseError);
}

TEST(Loader, FromFile) {
  auto dir = std::filesystem::temp_directory_path() / "hypermvp_loader_test";
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "a.xyz") << "0 0 0\n1 1 1\n";
  EXPECT_EQ(load_point_cloud(dir / "a.xyz").size(), 2u);
  std::filesystem::remove_all(dir);
}

TEST(Normalize, CubeCorners) {
  PointCloud c;
  for (int i = 0; i < 8; ++i) c.add({double(i & 1), double((i >> 1) & 1), double((i >> 2) & 1)});
  Normalization n;
  PointCloud out = normalize_cloud(c, &n);
  EXPECT_EQ(n.centroid, (Vec3{0.5, 0.5, 0.5}));
  for (const auto& p : out.positions)
    for (double v : p) EXPECT_NEAR(std::abs(v), 0.9, 1e-15);
}

TEST(Normalize, SinglePoint) {
  PointCloud c;
  c.add({5, 5, 5});
  Normalization n;
  PointCloud out = normalize_cloud(c, &n);
  EXPECT_EQ(out.positions[0], (Vec3{0, 0, 0}));
  EXPECT_EQ(n.scale, 1.0);
}

TEST(Normalize, RandomExtentAndIdempotence) {
  Rng rng(11);
  for (int t = 0; t < 50; ++t) {
    PointCloud c;
    for (int i = 0; i < 100; ++i) c.add({rng.uniform(-30, 10), rng.uniform(3, 4), rng.uniform(-1, 100)});
    PointCloud a = normalize_cloud(c);
    double m = 0;
    for (const auto& p : a.positions)
      for (double v : p) m = std::max(m, std::abs(v));
    EXPECT_NEAR(m, 0.9, 1e-9);
    PointCloud b = normalize_cloud(a);
    for (std::size_t i = 0; i < a.size(); ++i)
      for (int k = 0; k < 3; ++k) EXPECT_NEAR(a.positions[i][k], b.positions[i][k], 1e-12);
  }
}

TEST(Views, FramesAreDistinctAxisAlignedAndRightHanded) {
  const auto& views = canonical_views();
  for (std::size_t i = 0; i < views.size(); ++i) {
    const auto& s = views[i];
    EXPECT_EQ(static_cast<std::size_t>(s.view), i);
    // right x up = -forward
    Vec3 cr{s.right[1] * s.up[2] - s.right[2] * s.up[1], s.right[2] * s.up[0] - s.right[0] * s.up[2],
            s.right[0] * s.up[1] - s.right[1] * s.up[0]};
    for (int k = 0; k < 3; ++k) EXPECT_EQ(cr[k], -s.forward[k]);
    for (std::size_t j = 0; j < i; ++j) EXPECT_NE(views[j].forward, s.forward);
  }
  // 180-degree yaw pairs: forward and right negate, up shared
  for (auto [a, b] : {std::pair{View::Front, View::Back}, std::pair{View::Left, View::Right}}) {
    const auto &sa = view_spec(a), &sb = view_spec(b);
    EXPECT_EQ(sa.up, sb.up);
    for (int k = 0; k < 3; ++k) {
      EXPECT_EQ(sa.forward[k], -sb.forward[k]);
      EXPECT_EQ(sa.right[k], -sb.right[k]);
    }
  }
  EXPECT_EQ(view_spec(View::Top).forward, (Vec3{0, 0, -1}));
}

TEST(Render, OriginPointHitsCenterInAllViews) {
  PointCloud c;
  c.add({0, 0, 0}, {1, 0, 0});
  for (const auto& s : canonical_views()) {
    RenderedView v = render_orthographic(c, s, 32, 1.0);
    EXPECT_TRUE(v.covered(16, 16));
    EXPECT_EQ(v.at(16, 16, 0), 1.0f);
    EXPECT_EQ(v.at(16, 16, 1), 0.0f);
    EXPECT_EQ(v.covered_count(), 5u);  // radius-1 disc
    EXPECT_TRUE(v.covered(15, 16) && v.covered(17, 16) && v.covered(16, 15) && v.covered(16, 17));
  }
  RenderedView dot = render_orthographic(c, view_spec(View::Top), 32, 0.0);
  EXPECT_EQ(dot.covered_count(), 1u);
}

TEST(Render, FrontViewShowsNearerPoint) {
  // front camera looks along -y, so larger y is nearer.
  PointCloud c;
  c.add({0.2, -0.5, 0.3}, {0, 0, 1});
  c.add({0.2, 0.5, 0.3}, {1, 0, 0});
  RenderedView v = render_orthographic(c, view_spec(View::Front), 32, 0.0);
  ASSERT_EQ(v.covered_count(), 1u);
  auto [col, row] = pixel_of(-0.2, 0.3, 32);
  EXPECT_EQ(v.at(row, col, 0), 1.0f);
  EXPECT_EQ(v.at(row, col, 2), 0.0f);
  RenderedView b = render_orthographic(c, view_spec(View::Back), 32, 0.0);
  auto [bc, br] = pixel_of(0.2, 0.3, 32);
  EXPECT_EQ(b.at(br, bc, 2), 1.0f);
}

TEST(Render, DepthTieGoesToLowerIndex) {
  PointCloud c;
  c.add({0.1, 0.1, 0.5}, {0, 1, 0});
  c.add({0.1, 0.1, 0.5}, {1, 0, 0});
  RenderedView v = render_orthographic(c, view_spec(View::Top), 32, 0.0);
  auto [col, row] = pixel_of(0.1, 0.1, 32);
  EXPECT_EQ(v.at(row, col, 1), 1.0f);
}

TEST(Render, OctantLeavesOppositeCornerBlank) {
  Rng rng(3);
  PointCloud c;
  for (int i = 0; i < 500; ++i) c.add({rng.uniform(0.05, 0.9), rng.uniform(0.05, 0.9), rng.uniform(0.05, 0.9)});
  RenderedView v = render_orthographic(c, view_spec(View::Top), 32, 1.0);
  // top: u = x, v = y; the positive octant lands top-right, bottom-left stays background.
  EXPECT_FALSE(v.covered(31, 0));
  for (int ch = 0; ch < 3; ++ch) EXPECT_EQ(v.at(31, 0, ch), 1.0f);
}

TEST(Render, RejectsBadPreconditions) {
  PointCloud c;
  c.add({0, 0, 0});
  EXPECT_THROW(render_orthographic(c, view_spec(View::Top), 8, 1.0), DomainError);
  EXPECT_THROW(render_orthographic(c, view_spec(View::Top), 32, -1.0), DomainError);
}

TEST(Render, OcclusionMatchesBruteForceOracle) {
  Rng rng(21);
  const std::size_t res = 32;
  for (int t = 0; t < 100; ++t) {
    PointCloud c = random_cloud(rng, 1 + rng.below(50));
    const double radius = static_cast<double>(rng.below(3));
    for (const auto& s : canonical_views()) {
      RenderedView v = render_orthographic(c, s, res, radius);
      for (std::size_t row = 0; row < res; ++row) {
        for (std::size_t col = 0; col < res; ++col) {
          // brute force: nearest covering point, lower index on ties
          int best = -1;
          double best_d = std::numeric_limits<double>::infinity();
          for (std::size_t i = 0; i < c.size(); ++i) {
            const auto& p = c.positions[i];
            double u = 0, w = 0, d = 0;
            for (int k = 0; k < 3; ++k) {
              u += p[k] * s.right[k];
              w += p[k] * s.up[k];
              d += p[k] * s.forward[k];
            }
            const double cx = std::min<double>(res - 1, std::floor((u + 1) * 0.5 * res));
            const double cy = std::min<double>(res - 1, std::floor((1 - w) * 0.5 * res));
            const double dx = double(col) - cx, dy = double(row) - cy;
            if (dx * dx + dy * dy <= radius * radius && d < best_d) {
              best_d = d;
              best = static_cast<int>(i);
            }
          }
          ASSERT_EQ(v.covered(row, col), best >= 0);
          for (int ch = 0; ch < 3; ++ch) {
            const float want = best >= 0 ? static_cast<float>(c.colors[best][ch]) : 1.0f;
            ASSERT_EQ(v.at(row, col, ch), want) << "cloud " << t << " view " << s.name;
          }
        }
      }
    }
  }
}

TEST(RenderAll, FiveViewsDeterministic) {
  PointCloud c = synthetic_cloud(5, 0, 2000);
  RenderConfig cfg;
  cfg.resolution = 64;
  MultiviewRender a = render_all_views(c, cfg), b = render_all_views(c, cfg);
  ASSERT_EQ(a.views.size(), 5u);
  const char* names[] = {"top", "front", "back", "left", "right"};
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(a.views[i].name, names[i]);
    EXPECT_EQ(a.views[i].pixels, b.views[i].pixels);
    EXPECT_EQ(sha256_hex(encode_png(a.views[i])), sha256_hex(encode_png(b.views[i])));
    EXPECT_GT(a.views[i].covered_count(), 0u);
  }
}

TEST(RenderAll, ConcurrencyDoesNotChangeOutput) {
  std::vector<PointCloud> clouds;
  for (std::size_t i = 0; i < 6; ++i) clouds.push_back(synthetic_cloud(9, i, 800));
  RenderConfig cfg;
  cfg.resolution = 32;
  auto serial = render_many(clouds, cfg, 1);
  auto parallel = render_many(clouds, cfg, 4);
  for (std::size_t i = 0; i < clouds.size(); ++i)
    for (std::size_t v = 0; v < 5; ++v) EXPECT_EQ(serial[i].views[v].pixels, parallel[i].views[v].pixels);
}

TEST(RenderAll, MirrorSymmetricCloudHasEqualSideSilhouettes) {
  Rng rng(8);
  PointCloud c;
  for (int i = 0; i < 400; ++i) {
    Vec3 p{rng.uniform(0.0, 0.8), rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.3)};
    c.add(p);
    c.add({-p[0], p[1], p[2]});
  }
  RenderConfig cfg;
  cfg.resolution = 64;
  MultiviewRender r = render_all_views(c, cfg);
  const auto& left = r.views[static_cast<std::size_t>(View::Left)];
  const auto& right = r.views[static_cast<std::size_t>(View::Right)];
  EXPECT_GT(left.covered_count(), 0u);
  EXPECT_EQ(left.covered_count(), right.covered_count());
}

TEST(RenderAll, SilhouetteSymmetryOracle) {
  // x -> -x symmetry: front and back silhouettes are mirror images of each other.
  Rng rng(12);
  PointCloud c;
  for (int i = 0; i < 300; ++i) {
    Vec3 p{rng.uniform(0.05, 0.8), rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8)};
    c.add(p);
    c.add({-p[0], p[1], p[2]});
  }
  PointCloud n = normalize_cloud(c);
  RenderedView f = render_orthographic(n, view_spec(View::Front), 64, 0.0);
  RenderedView b = render_orthographic(n, view_spec(View::Back), 64, 0.0);
  EXPECT_EQ(f.covered_count(), b.covered_count());
}

TEST(RenderAll, ManifestAndPngs) {
  auto dir = std::filesystem::temp_directory_path() / "hypermvp_render_test";
  std::filesystem::remove_all(dir);
  RenderConfig cfg;
  cfg.resolution = 32;
  MultiviewRender r = render_all_views(synthetic_cloud(1, 2, 500), cfg);
  auto text = write_render(r, "synthetic:1:2", dir, "cloud", cfg);
  auto m = nlohmann::json::parse(text);
  EXPECT_EQ(m["source"], "synthetic:1:2");
  ASSERT_EQ(m["views"].size(), 5u);
  for (const auto& v : m["views"]) {
    std::ifstream in(dir / v["file"].get<std::string>(), std::ios::binary);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), {});
    EXPECT_EQ(bytes.size() > 8 && bytes[1] == 'P' && bytes[2] == 'N' && bytes[3] == 'G', true);
    EXPECT_EQ(sha256_hex(bytes), v["sha256"]);
  }
  EXPECT_EQ(m["normalization"]["scale"].get<double>(), r.normalization.scale);
  EXPECT_TRUE(std::filesystem::exists(dir / "cloud.json"));
  std::filesystem::remove_all(dir);
}

TEST(Hash, KnownDigest) {
  EXPECT_EQ(sha256_hex("abc", 3), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Synthetic, ReproducibleAndVaried) {
  PointCloud a = synthetic_cloud(4, 7, 1000), b = synthetic_cloud(4, 7, 1000), c = synthetic_cloud(4, 8, 1000);
  EXPECT_EQ(a.size(), 1000u);
  EXPECT_EQ(a.positions, b.positions);
  EXPECT_NE(a.positions, c.positions);
}
