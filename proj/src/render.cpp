#include "hypermvp/render.hpp"

#include <png.h>
#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "hypermvp/error.hpp"

namespace hypermvp::render {

namespace {

std::vector<std::string> split_ws(const std::string& line) {
  std::istringstream ss(line);
  std::vector<std::string> out;
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

double parse_number(const std::string& tok, const std::string& source, std::size_t line) {
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(tok.c_str(), &end);
  if (end == tok.c_str() || *end != '\0' || errno == ERANGE || !std::isfinite(v)) {
    throw ParseError(source + ":" + std::to_string(line) + ": non-numeric value '" + tok + "'");
  }
  return v;
}

std::string lower(std::string s) {
  for (char& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return s;
}

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

}  // namespace

PointCloud parse_xyz(std::istream& in, const std::string& source) {
  PointCloud cloud;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto toks = split_ws(line);
    if (toks.empty() || toks[0][0] == '#') continue;
    if (toks.size() != 3 && toks.size() != 6) {
      throw ParseError(source + ":" + std::to_string(lineno) + ": expected 3 or 6 columns, got " +
                       std::to_string(toks.size()));
    }
    Vec3 p{};
    for (int k = 0; k < 3; ++k) p[k] = parse_number(toks[k], source, lineno);
    Vec3 c = kDefaultGray;
    if (toks.size() == 6) {
      for (int k = 0; k < 3; ++k) c[k] = std::clamp(parse_number(toks[3 + k], source, lineno) / 255.0, 0.0, 1.0);
    }
    cloud.add(p, c);
  }
  if (cloud.size() == 0) throw ParseError(source + ": no points");
  return cloud;
}

PointCloud parse_ply(std::istream& in, const std::string& source) {
  struct Element {
    std::string name;
    std::size_t count = 0;
    std::vector<std::pair<std::string, std::string>> props;  // (type, name)
  };
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& what) -> ParseError {
    return ParseError(source + ":" + std::to_string(lineno) + ": " + what);
  };

  if (!std::getline(in, line) || split_ws(line) != std::vector<std::string>{"ply"}) {
    lineno = 1;
    throw fail("malformed header: missing 'ply' magic");
  }
  ++lineno;
  std::vector<Element> elements;
  bool ascii = false, ended = false;
  while (std::getline(in, line)) {
    ++lineno;
    auto toks = split_ws(line);
    if (toks.empty() || toks[0] == "comment" || toks[0] == "obj_info") continue;
    if (toks[0] == "format") {
      if (toks.size() < 2) throw fail("malformed header: bad format line");
      if (toks[1] != "ascii") throw fail("unsupported PLY format '" + toks[1] + "' (ASCII only)");
      ascii = true;
    } else if (toks[0] == "element") {
      if (toks.size() != 3) throw fail("malformed header: bad element line");
      Element e;
      e.name = toks[1];
      e.count = static_cast<std::size_t>(parse_number(toks[2], source, lineno));
      elements.push_back(e);
    } else if (toks[0] == "property") {
      if (elements.empty() || toks.size() < 3) throw fail("malformed header: property outside an element");
      elements.back().props.emplace_back(toks[1], toks.back());
    } else if (toks[0] == "end_header") {
      ended = true;
      break;
    } else {
      throw fail("malformed header: unexpected '" + toks[0] + "'");
    }
  }
  if (!ascii) throw fail("malformed header: missing format line");
  if (!ended) throw fail("malformed header: missing end_header");

  PointCloud cloud;
  for (const Element& e : elements) {
    if (e.name != "vertex") {
      for (std::size_t i = 0; i < e.count; ++i) {
        if (!std::getline(in, line)) throw fail("unexpected end of file in element '" + e.name + "'");
        ++lineno;
      }
      continue;
    }
    int ix[3] = {-1, -1, -1}, ic[3] = {-1, -1, -1};
    bool byte_color = true;
    for (std::size_t k = 0; k < e.props.size(); ++k) {
      const auto& [type, name] = e.props[k];
      static const char* xyz[] = {"x", "y", "z"};
      static const char* rgb[] = {"red", "green", "blue"};
      for (int a = 0; a < 3; ++a) {
        if (name == xyz[a]) ix[a] = static_cast<int>(k);
        if (name == rgb[a]) {
          ic[a] = static_cast<int>(k);
          if (type == "float" || type == "double" || type == "float32" || type == "float64") byte_color = false;
        }
      }
    }
    if (ix[0] < 0 || ix[1] < 0 || ix[2] < 0) throw fail("malformed header: vertex element lacks x, y, z");
    const bool has_color = ic[0] >= 0 && ic[1] >= 0 && ic[2] >= 0;
    std::size_t read = 0;
    while (read < e.count && std::getline(in, line)) {
      ++lineno;
      auto toks = split_ws(line);
      if (toks.empty()) continue;
      if (toks.size() < e.props.size()) throw fail("vertex row has too few values");
      Vec3 p{}, c = kDefaultGray;
      for (int a = 0; a < 3; ++a) p[a] = parse_number(toks[ix[a]], source, lineno);
      if (has_color) {
        for (int a = 0; a < 3; ++a) {
          const double v = parse_number(toks[ic[a]], source, lineno);
          c[a] = std::clamp(byte_color ? v / 255.0 : v, 0.0, 1.0);
        }
      }
      cloud.add(p, c);
      ++read;
    }
    if (read != e.count) {
      throw fail("vertex count mismatch: header declares " + std::to_string(e.count) + ", found " +
                 std::to_string(read));
    }
  }
  if (cloud.size() == 0) throw ParseError(source + ": no points");
  return cloud;
}

PointCloud load_point_cloud(const std::filesystem::path& path) {
  const std::string ext = lower(path.extension().string());
  if (ext != ".ply" && ext != ".xyz" && ext != ".xyzrgb" && ext != ".txt") {
    throw ParseError(path.string() + ": unknown point-cloud extension '" + ext + "'");
  }
  std::ifstream in(path);
  if (!in) throw Error(path.string() + ": cannot open");
  return ext == ".ply" ? parse_ply(in, path.string()) : parse_xyz(in, path.string());
}

PointCloud normalize_cloud(const PointCloud& cloud, Normalization* applied) {
  if (cloud.size() == 0) throw DomainError("normalize_cloud: empty cloud");
  Normalization n;
  for (const auto& p : cloud.positions)
    for (int a = 0; a < 3; ++a) n.centroid[a] += p[a];
  for (int a = 0; a < 3; ++a) n.centroid[a] /= static_cast<double>(cloud.size());
  double extent = 0.0;
  for (const auto& p : cloud.positions)
    for (int a = 0; a < 3; ++a) extent = std::max(extent, std::abs(p[a] - n.centroid[a]));
  n.scale = extent > 1e-12 ? kNormalizedExtent / extent : 1.0;

  PointCloud out = cloud;
  for (auto& p : out.positions)
    for (int a = 0; a < 3; ++a) p[a] = (p[a] - n.centroid[a]) * n.scale;
  if (applied) *applied = n;
  return out;
}

const std::array<ViewSpec, kNumViews>& canonical_views() {
  static const std::array<ViewSpec, kNumViews> views{{
      {View::Top, "top", {1, 0, 0}, {0, 1, 0}, {0, 0, -1}},
      {View::Front, "front", {-1, 0, 0}, {0, 0, 1}, {0, -1, 0}},
      {View::Back, "back", {1, 0, 0}, {0, 0, 1}, {0, 1, 0}},
      {View::Left, "left", {0, -1, 0}, {0, 0, 1}, {1, 0, 0}},
      {View::Right, "right", {0, 1, 0}, {0, 0, 1}, {-1, 0, 0}},
  }};
  return views;
}

const ViewSpec& view_spec(View v) { return canonical_views()[static_cast<std::size_t>(v)]; }

bool RenderedView::covered(std::size_t row, std::size_t col) const {
  return std::isfinite(depth[row * resolution + col]);
}

std::size_t RenderedView::covered_count() const {
  return static_cast<std::size_t>(std::count_if(depth.begin(), depth.end(), [](float d) { return std::isfinite(d); }));
}

std::pair<std::size_t, std::size_t> pixel_of(double u, double v, std::size_t resolution) {
  const double r = static_cast<double>(resolution);
  auto cell = [&](double t) {
    const double x = std::floor(t * r);
    return static_cast<std::size_t>(std::clamp(x, 0.0, r - 1.0));
  };
  return {cell((u + 1.0) / 2.0), cell((1.0 - v) / 2.0)};
}

RenderedView render_orthographic(const PointCloud& cloud, const ViewSpec& spec, std::size_t resolution,
                                 double splat_radius, const Vec3& background) {
  if (resolution < 16) throw DomainError("render: resolution must be at least 16");
  if (!(splat_radius >= 0.0)) throw DomainError("render: splat radius must be non-negative");
  if (cloud.colors.size() != cloud.positions.size()) throw ShapeError("render: colors and positions differ in length");

  RenderedView view;
  view.name = std::string(spec.name);
  view.resolution = resolution;
  const std::size_t n = resolution * resolution;
  view.pixels.resize(n * 3);
  for (std::size_t i = 0; i < n; ++i)
    for (int ch = 0; ch < 3; ++ch) view.pixels[i * 3 + ch] = static_cast<float>(background[ch]);
  view.depth.assign(n, std::numeric_limits<float>::infinity());
  std::vector<double> zbuf(n, std::numeric_limits<double>::infinity());

  const int reach = static_cast<int>(std::floor(splat_radius));
  const double r2 = splat_radius * splat_radius;
  const int res = static_cast<int>(resolution);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3& p = cloud.positions[i];
    const double u = dot(p, spec.right), v = dot(p, spec.up), d = dot(p, spec.forward);
    if (std::abs(u) > 1.0 || std::abs(v) > 1.0) continue;
    const auto [cx, cy] = pixel_of(u, v, resolution);
    for (int dy = -reach; dy <= reach; ++dy) {
      for (int dx = -reach; dx <= reach; ++dx) {
        if (dx * dx + dy * dy > r2) continue;
        const int x = static_cast<int>(cx) + dx, y = static_cast<int>(cy) + dy;
        if (x < 0 || y < 0 || x >= res || y >= res) continue;
        const std::size_t k = static_cast<std::size_t>(y) * resolution + static_cast<std::size_t>(x);
        if (d < zbuf[k]) {
          zbuf[k] = d;
          view.depth[k] = static_cast<float>(d);
          for (int ch = 0; ch < 3; ++ch) view.pixels[k * 3 + ch] = static_cast<float>(cloud.colors[i][ch]);
        }
      }
    }
  }
  return view;
}

MultiviewRender render_all_views(const PointCloud& cloud, const RenderConfig& config) {
  MultiviewRender out;
  PointCloud norm = normalize_cloud(cloud, &out.normalization);
  for (const ViewSpec& spec : canonical_views()) {
    out.views[static_cast<std::size_t>(spec.view)] =
        render_orthographic(norm, spec, config.resolution, config.effective_splat(), config.background);
  }
  return out;
}

std::size_t prefetch_threads() {
  if (const char* env = std::getenv("HYPERMVP_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

std::vector<MultiviewRender> render_many(const std::vector<PointCloud>& clouds, const RenderConfig& config,
                                         std::size_t threads) {
  std::vector<MultiviewRender> out(clouds.size());
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(1, clouds.size()));
  if (threads == 1) {
    for (std::size_t i = 0; i < clouds.size(); ++i) out[i] = render_all_views(clouds[i], config);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(clouds.size());
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < clouds.size(); i = next++) {
          try {
            out[i] = render_all_views(clouds[i], config);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

std::vector<unsigned char> encode_png(const RenderedView& view) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw Error("png: cannot create writer");
  png_infop info = png_create_info_struct(png);
  std::vector<unsigned char> bytes;
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("png: encoding failed");
  }
  png_set_write_fn(
      png, &bytes,
      [](png_structp p, png_bytep data, png_size_t len) {
        auto* out = static_cast<std::vector<unsigned char>*>(png_get_io_ptr(p));
        out->insert(out->end(), data, data + len);
      },
      nullptr);
  const auto w = static_cast<png_uint_32>(view.resolution);
  png_set_IHDR(png, info, w, w, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_set_compression_level(png, 6);
  png_write_info(png, info);
  std::vector<unsigned char> row(view.resolution * 3);
  for (std::size_t y = 0; y < view.resolution; ++y) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      const float v = view.pixels[y * row.size() + i];
      row[i] = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return bytes;
}

void write_file(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(path.string() + ": cannot open for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(path.string() + ": write failed");
}

std::string sha256_hex(const void* data, std::size_t size) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data, size, digest, &len, EVP_sha256(), nullptr) != 1) throw Error("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 15]);
  }
  return out;
}

std::string sha256_hex(const std::vector<unsigned char>& bytes) { return sha256_hex(bytes.data(), bytes.size()); }

std::string write_render(const MultiviewRender& render, const std::string& source,
                         const std::filesystem::path& out_dir, const std::string& stem, const RenderConfig& config) {
  std::filesystem::create_directories(out_dir);
  nlohmann::json views = nlohmann::json::array();
  for (const RenderedView& v : render.views) {
    const std::string file = stem + "_" + v.name + ".png";
    auto bytes = encode_png(v);
    write_file(out_dir / file, bytes);
    views.push_back({{"name", v.name}, {"file", file}, {"sha256", sha256_hex(bytes)}});
  }
  nlohmann::json cameras = nlohmann::json::object();
  for (const ViewSpec& s : canonical_views()) {
    cameras[std::string(s.name)] = {{"right", s.right}, {"up", s.up}, {"forward", s.forward}};
  }
  nlohmann::json manifest = {
      {"source", source},
      {"views", views},
      {"normalization", {{"centroid", render.normalization.centroid}, {"scale", render.normalization.scale}}},
      {"resolution", config.resolution},
      {"splat_radius_px", config.effective_splat()},
      {"background", config.background},
      {"projection", "orthographic"},
      {"cameras", cameras},
  };
  std::string text = manifest.dump(2) + "\n";
  std::ofstream(out_dir / (stem + ".json")) << text;
  return text;
}

// ---- synthetic data ---------------------------------------------------------

namespace {

Vec3 random_color(Rng& rng) { return {rng.uniform(0.1, 0.95), rng.uniform(0.1, 0.95), rng.uniform(0.1, 0.95)}; }

}  // namespace

void add_sphere(PointCloud& cloud, Rng& rng, const Vec3& center, double radius, const Vec3& color, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const double z = rng.uniform(-1.0, 1.0);
    const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double s = std::sqrt(std::max(0.0, 1.0 - z * z));
    cloud.add({center[0] + radius * s * std::cos(phi), center[1] + radius * s * std::sin(phi), center[2] + radius * z},
              color);
  }
}

void add_box(PointCloud& cloud, Rng& rng, const Vec3& center, const Vec3& half, const Vec3& color, std::size_t n) {
  const double areas[3] = {half[1] * half[2], half[0] * half[2], half[0] * half[1]};
  const double total = areas[0] + areas[1] + areas[2];
  for (std::size_t i = 0; i < n; ++i) {
    double pick = rng.uniform(0.0, total);
    int axis = pick < areas[0] ? 0 : (pick < areas[0] + areas[1] ? 1 : 2);
    Vec3 p;
    for (int a = 0; a < 3; ++a) p[a] = center[a] + rng.uniform(-half[a], half[a]);
    p[axis] = center[axis] + (rng.uniform() < 0.5 ? -half[axis] : half[axis]);
    cloud.add(p, color);
  }
}

void add_cylinder(PointCloud& cloud, Rng& rng, const Vec3& base, double radius, double height, const Vec3& color,
                  std::size_t n) {
  const double side = 2.0 * std::numbers::pi * radius * height;
  const double cap = std::numbers::pi * radius * radius;
  for (std::size_t i = 0; i < n; ++i) {
    const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
    if (rng.uniform(0.0, side + cap) < side) {
      cloud.add({base[0] + radius * std::cos(phi), base[1] + radius * std::sin(phi), base[2] + rng.uniform(0.0, height)},
                color);
    } else {
      const double r = radius * std::sqrt(rng.uniform());
      cloud.add({base[0] + r * std::cos(phi), base[1] + r * std::sin(phi), base[2] + height}, color);
    }
  }
}

PointCloud synthetic_tabletop(Rng& rng, std::size_t points) {
  PointCloud cloud;
  const std::size_t table_pts = points / 4;
  const double tw = rng.uniform(0.8, 1.2), td = rng.uniform(0.6, 1.0);
  add_box(cloud, rng, {0, 0, -0.05}, {tw, td, 0.05}, {rng.uniform(0.4, 0.7), rng.uniform(0.25, 0.45), 0.15},
          table_pts);
  const std::size_t objects = 1 + rng.below(4);
  const std::size_t per = (points - table_pts) / objects;
  for (std::size_t k = 0; k < objects; ++k) {
    const double x = rng.uniform(-0.7, 0.7) * tw, y = rng.uniform(-0.7, 0.7) * td;
    const Vec3 color = random_color(rng);
    const std::size_t n = k + 1 == objects ? points - cloud.size() : per;
    switch (static_cast<Primitive>(rng.below(3))) {
      case Primitive::Sphere: {
        const double r = rng.uniform(0.1, 0.3);
        add_sphere(cloud, rng, {x, y, r}, r, color, n);
        break;
      }
      case Primitive::Box: {
        const Vec3 h{rng.uniform(0.08, 0.3), rng.uniform(0.08, 0.3), rng.uniform(0.08, 0.35)};
        add_box(cloud, rng, {x, y, h[2]}, h, color, n);
        break;
      }
      case Primitive::Cylinder:
        add_cylinder(cloud, rng, {x, y, 0.0}, rng.uniform(0.06, 0.2), rng.uniform(0.2, 0.7), color, n);
        break;
    }
  }
  return cloud;
}

PointCloud synthetic_cloud(std::uint64_t seed, std::size_t index, std::size_t points) {
  Rng rng(seed, index);
  return synthetic_tabletop(rng, points);
}

}  // namespace hypermvp::render
