#pragma once

// Point-cloud ingestion and five-view orthographic splat rendering.

#include <array>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "hypermvp/random.hpp"

namespace hypermvp::render {

using Vec3 = std::array<double, 3>;

inline constexpr Vec3 kDefaultGray{0.5, 0.5, 0.5};

struct PointCloud {
  std::vector<Vec3> positions;
  std::vector<Vec3> colors;  // rgb in [0, 1]

  std::size_t size() const { return positions.size(); }
  void add(const Vec3& p, const Vec3& c = kDefaultGray) {
    positions.push_back(p);
    colors.push_back(c);
  }
};

// Format is chosen by extension: .ply (ASCII), .xyz, .xyzrgb, .txt.
PointCloud load_point_cloud(const std::filesystem::path& path);
PointCloud parse_xyz(std::istream& in, const std::string& source = "<stream>");
PointCloud parse_ply(std::istream& in, const std::string& source = "<stream>");

struct Normalization {
  Vec3 centroid{0, 0, 0};
  double scale = 1.0;
};

inline constexpr double kNormalizedExtent = 0.9;

// Centroid to the origin, then max |coordinate| = 0.9. A degenerate cloud keeps scale 1.
PointCloud normalize_cloud(const PointCloud& cloud, Normalization* applied = nullptr);

enum class View { Top = 0, Front, Back, Left, Right };
inline constexpr std::size_t kNumViews = 5;

struct ViewSpec {
  View view;
  std::string_view name;
  Vec3 right;    // camera u axis
  Vec3 up;       // camera v axis
  Vec3 forward;  // viewing direction; depth = p . forward
};

const std::array<ViewSpec, kNumViews>& canonical_views();
const ViewSpec& view_spec(View v);

struct RenderedView {
  std::string name;
  std::size_t resolution = 0;
  std::vector<float> pixels;  // H*W*3, row-major, row 0 at the top
  std::vector<float> depth;   // H*W, +inf where nothing was drawn

  float at(std::size_t row, std::size_t col, std::size_t ch) const {
    return pixels[(row * resolution + col) * 3 + ch];
  }
  bool covered(std::size_t row, std::size_t col) const;
  std::size_t covered_count() const;
};

struct RenderConfig {
  std::size_t resolution = 224;
  double splat_radius = -1.0;  // pixels; negative means resolution / 224
  Vec3 background{1.0, 1.0, 1.0};

  double effective_splat() const { return splat_radius < 0 ? resolution / 224.0 : splat_radius; }
};

// Pixel (column, row) of camera coordinates (u, v) in [-1, 1]^2.
std::pair<std::size_t, std::size_t> pixel_of(double u, double v, std::size_t resolution);

RenderedView render_orthographic(const PointCloud& cloud, const ViewSpec& spec, std::size_t resolution,
                                 double splat_radius, const Vec3& background = {1.0, 1.0, 1.0});

struct MultiviewRender {
  std::array<RenderedView, kNumViews> views;
  Normalization normalization;
};

// Normalizes, then renders top, front, back, left, right.
MultiviewRender render_all_views(const PointCloud& cloud, const RenderConfig& config);

// Renders many clouds, at most `threads` at a time; output order follows input order.
std::vector<MultiviewRender> render_many(const std::vector<PointCloud>& clouds, const RenderConfig& config,
                                         std::size_t threads);
// HYPERMVP_THREADS if set and positive, otherwise hardware concurrency.
std::size_t prefetch_threads();

// 8-bit RGB PNG bytes of a view (values rounded, clamped to [0, 255]).
std::vector<unsigned char> encode_png(const RenderedView& view);
void write_file(const std::filesystem::path& path, const std::vector<unsigned char>& bytes);
std::string sha256_hex(const void* data, std::size_t size);
std::string sha256_hex(const std::vector<unsigned char>& bytes);

// Writes <stem>_<view>.png plus <stem>.json into `out_dir` and returns the manifest text.
std::string write_render(const MultiviewRender& render, const std::string& source,
                         const std::filesystem::path& out_dir, const std::string& stem, const RenderConfig& config);

// ---- synthetic data ---------------------------------------------------------

enum class Primitive { Sphere, Box, Cylinder };

void add_sphere(PointCloud& cloud, Rng& rng, const Vec3& center, double radius, const Vec3& color, std::size_t n);
void add_box(PointCloud& cloud, Rng& rng, const Vec3& center, const Vec3& half, const Vec3& color, std::size_t n);
void add_cylinder(PointCloud& cloud, Rng& rng, const Vec3& base, double radius, double height, const Vec3& color,
                  std::size_t n);

// A table slab with one to four random primitives resting on it.
PointCloud synthetic_tabletop(Rng& rng, std::size_t points = 4096);
// Cloud i of a dataset depends only on (seed, i).
PointCloud synthetic_cloud(std::uint64_t seed, std::size_t index, std::size_t points = 4096);

}  // namespace hypermvp::render
