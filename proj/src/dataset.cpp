#include "ralign/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace ralign {
namespace {

using nlohmann::json;

constexpr int kCanvas = 64;
constexpr int kScenePoints = 512;

struct Palette {
  const char* name;
  float r, g, b;
};
constexpr Palette kColors[] = {
    {"red", 1.0f, 0.0f, 0.0f},
    {"green", 0.0f, 1.0f, 0.0f},
    {"blue", 0.0f, 0.0f, 1.0f},
    {"yellow", 1.0f, 1.0f, 0.0f},
};
constexpr const char* kShapes[] = {"circle", "square", "triangle"};
constexpr const char* kPrimitives[] = {"sphere", "cube", "cone", "torus"};

struct Placed {
  int color_idx, shape_idx;
  int cx, cy, h;  // pixel center and half-extent
};

bool inside_shape(int shape_idx, double px, double py, double cx, double cy,
                  double h) {
  const double dx = px - cx, dy = py - cy;
  switch (shape_idx) {
    case 0:  // circle
      return dx * dx + dy * dy <= h * h;
    case 1:  // square
      return std::fabs(dx) <= h && std::fabs(dy) <= h;
    default: {  // upward triangle: apex (cx, cy-h), base corners (cx+-h, cy+h)
      if (dy < -h || dy > h) return false;
      // Width grows linearly from 0 at the apex to h at the base.
      const double half_width = (dy + h) * 0.5;
      return std::fabs(dx) <= half_width;
    }
  }
}

// Attempts one full scene layout; returns false when placement fails.
bool try_image_scene(u64 seed, ImageScene& out) {
  Rng rng(seed);
  const int n = rng.uniform_int(2, 4);

  std::vector<std::pair<int, int>> combos;
  for (int c = 0; c < 4; ++c)
    for (int s = 0; s < 3; ++s) combos.emplace_back(c, s);
  rng.shuffle(combos);

  std::vector<Placed> placed;
  for (int i = 0; i < n; ++i) {
    const int h = rng.uniform_int(4, 7);
    bool ok = false;
    for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
      const int cx = rng.uniform_int(h + 1, kCanvas - h - 2);
      const int cy = rng.uniform_int(h + 1, kCanvas - h - 2);
      ok = true;
      for (const Placed& p : placed) {
        // Non-overlap with >= 2 px pixel separation: the new bounding box
        // inflated by 2 must stay clear of every placed box.
        const bool clear_x = cx + h + 2 < p.cx - p.h || cx - h - 2 > p.cx + p.h;
        const bool clear_y = cy + h + 2 < p.cy - p.h || cy - h - 2 > p.cy + p.h;
        if (!(clear_x || clear_y)) {
          ok = false;
          break;
        }
      }
      if (ok)
        placed.push_back({combos[size_t(i)].first, combos[size_t(i)].second, cx, cy, h});
    }
    if (!ok) return false;
  }

  out.image = Image::blank(kCanvas, kCanvas);
  out.objects.clear();
  for (const Placed& p : placed) {
    const Palette& col = kColors[p.color_idx];
    const double cx = p.cx + 0.5, cy = p.cy + 0.5;
    int minx = kCanvas, miny = kCanvas, maxx = -1, maxy = -1;
    for (int y = p.cy - p.h; y <= p.cy + p.h; ++y)
      for (int x = p.cx - p.h; x <= p.cx + p.h; ++x)
        if (inside_shape(p.shape_idx, x + 0.5, y + 0.5, cx, cy, p.h)) {
          out.image.set(x, y, col.r, col.g, col.b);
          minx = std::min(minx, x);
          miny = std::min(miny, y);
          maxx = std::max(maxx, x);
          maxy = std::max(maxy, y);
        }
    SceneObject obj;
    obj.color = col.name;
    obj.shape = kShapes[p.shape_idx];
    obj.caption = "a " + obj.color + " " + obj.shape;
    obj.region = RegionSpec::box2d(minx / double(kCanvas), miny / double(kCanvas),
                                   (maxx + 1) / double(kCanvas),
                                   (maxy + 1) / double(kCanvas));
    obj.center = {cx, cy, 0.0};
    obj.scale = p.h;
    out.objects.push_back(std::move(obj));
  }

  std::sort(out.objects.begin(), out.objects.end(),
            [](const SceneObject& a, const SceneObject& b) {
              if (a.center[0] != b.center[0]) return a.center[0] < b.center[0];
              return a.center[1] < b.center[1];
            });

  if (out.objects.size() == 2) {
    const SceneObject& s = out.objects[0];
    const SceneObject& o = out.objects[1];
    const double dx = o.center[0] - s.center[0];
    const double dy = o.center[1] - s.center[1];
    std::string rel = "beside";
    // Raster rows grow downward, so a smaller y means visually higher.
    if (std::fabs(dy) > std::fabs(dx)) rel = s.center[1] < o.center[1] ? "above" : "below";
    out.caption = s.caption + " " + rel + " " + o.caption;
  } else {
    std::string cap;
    for (size_t i = 0; i < out.objects.size(); ++i) {
      if (i) cap += " and ";
      cap += out.objects[i].caption;
    }
    out.caption = cap;
  }
  return true;
}

struct PlacedPrim {
  int prim_idx;
  std::array<double, 3> center;
  double s;                      // primitive size parameter
  std::array<double, 3> extent;  // half-extent per axis
};

std::array<double, 3> prim_extent(int prim_idx, double s) {
  switch (prim_idx) {
    case 0:  // sphere radius s
    case 1:  // cube half-side s
    case 2:  // cone: base radius s, apex at +s, base at -s
      return {s, s, s};
    default:  // torus: major s, minor s/3, lying in the xy plane
      return {4.0 * s / 3.0, 4.0 * s / 3.0, s / 3.0};
  }
}

void sample_prim_surface(Rng& rng, const PlacedPrim& p, int count,
                         std::vector<float>& xyz) {
  for (int i = 0; i < count; ++i) {
    double lx = 0, ly = 0, lz = 0;
    switch (p.prim_idx) {
      case 0: {  // sphere: uniform direction scaled to the radius
        double nx, ny, nz, norm;
        do {
          nx = rng.normal();
          ny = rng.normal();
          nz = rng.normal();
          norm = std::sqrt(nx * nx + ny * ny + nz * nz);
        } while (norm < 1e-12);
        lx = p.s * nx / norm;
        ly = p.s * ny / norm;
        lz = p.s * nz / norm;
        break;
      }
      case 1: {  // cube: uniform over the six faces
        const int face = rng.uniform_int(0, 5);
        const double u = rng.uniform(-p.s, p.s);
        const double v = rng.uniform(-p.s, p.s);
        const double w = (face % 2 == 0) ? p.s : -p.s;
        if (face / 2 == 0) {
          lx = w;
          ly = u;
          lz = v;
        } else if (face / 2 == 1) {
          lx = u;
          ly = w;
          lz = v;
        } else {
          lx = u;
          ly = v;
          lz = w;
        }
        break;
      }
      case 2: {  // cone: lateral surface or base disk, area-weighted
        const double p_lateral = std::sqrt(5.0) / (1.0 + std::sqrt(5.0));
        const double theta = rng.uniform(0.0, 2.0 * M_PI);
        if (rng.uniform() < p_lateral) {
          const double t = std::sqrt(rng.uniform());  // area-uniform in radius
          const double rho = p.s * t;
          lx = rho * std::cos(theta);
          ly = rho * std::sin(theta);
          lz = p.s - 2.0 * p.s * t;  // apex +s down to base -s
        } else {
          const double rho = p.s * std::sqrt(rng.uniform());
          lx = rho * std::cos(theta);
          ly = rho * std::sin(theta);
          lz = -p.s;
        }
        break;
      }
      default: {  // torus: angle-uniform parameterization (toy density)
        const double theta = rng.uniform(0.0, 2.0 * M_PI);
        const double phi = rng.uniform(0.0, 2.0 * M_PI);
        const double R = p.s, r = p.s / 3.0;
        lx = (R + r * std::cos(phi)) * std::cos(theta);
        ly = (R + r * std::cos(phi)) * std::sin(theta);
        lz = r * std::sin(phi);
        break;
      }
    }
    xyz.push_back(static_cast<float>(p.center[0] + lx));
    xyz.push_back(static_cast<float>(p.center[1] + ly));
    xyz.push_back(static_cast<float>(p.center[2] + lz));
  }
}

bool try_point_scene(u64 seed, int min_objects, PointScene& out) {
  Rng rng(seed);
  const int n = rng.uniform_int(min_objects, 3);

  std::vector<int> prims = {0, 1, 2, 3};
  rng.shuffle(prims);
  prims.resize(static_cast<size_t>(n));

  std::vector<PlacedPrim> placed;
  for (int i = 0; i < n; ++i) {
    PlacedPrim p;
    p.prim_idx = prims[size_t(i)];
    p.s = rng.uniform(0.15, 0.35);
    p.extent = prim_extent(p.prim_idx, p.s);
    bool ok = false;
    for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
      for (int a = 0; a < 3; ++a)
        p.center[size_t(a)] = rng.uniform(-(1.0 - p.extent[size_t(a)]),
                                          1.0 - p.extent[size_t(a)]);
      ok = true;
      for (const PlacedPrim& q : placed) {
        bool separated = false;
        for (int a = 0; a < 3; ++a)
          if (std::fabs(p.center[size_t(a)] - q.center[size_t(a)]) >
              p.extent[size_t(a)] + q.extent[size_t(a)])
            separated = true;
        if (!separated) {
          ok = false;
          break;
        }
      }
    }
    if (!ok) return false;
    placed.push_back(p);
  }

  out.points.xyz.clear();
  out.objects.clear();
  int remaining = kScenePoints;
  for (int i = 0; i < n; ++i) {
    const int count = remaining / (n - i);
    remaining -= count;
    const PlacedPrim& p = placed[size_t(i)];
    SceneObject obj;
    obj.shape = kPrimitives[p.prim_idx];
    obj.caption = "a " + obj.shape;
    obj.center = p.center;
    obj.scale = p.s;
    obj.first_point = static_cast<int>(out.points.xyz.size() / 3);
    obj.point_count = count;
    sample_prim_surface(rng, p, count, out.points.xyz);

    double lo[3] = {1e9, 1e9, 1e9}, hi[3] = {-1e9, -1e9, -1e9};
    for (int j = obj.first_point; j < obj.first_point + count; ++j)
      for (int a = 0; a < 3; ++a) {
        const double v = out.points.xyz[static_cast<size_t>(j) * 3 + size_t(a)];
        lo[a] = std::min(lo[a], v);
        hi[a] = std::max(hi[a], v);
      }
    const double sx = std::max(hi[0] - lo[0], 1e-4);
    const double sy = std::max(hi[1] - lo[1], 1e-4);
    const double sz = std::max(hi[2] - lo[2], 1e-4);
    obj.region = RegionSpec::box3d(((lo[0] + hi[0]) / 2 + 1) / 2,
                                   ((lo[1] + hi[1]) / 2 + 1) / 2,
                                   ((lo[2] + hi[2]) / 2 + 1) / 2, sx / 2, sy / 2,
                                   sz / 2);
    out.objects.push_back(std::move(obj));
  }

  std::sort(out.objects.begin(), out.objects.end(),
            [](const SceneObject& a, const SceneObject& b) {
              return a.center[0] < b.center[0];
            });
  std::string cap;
  for (size_t i = 0; i < out.objects.size(); ++i) {
    if (i) cap += " and ";
    cap += out.objects[i].caption;
  }
  out.caption = cap;
  return true;
}

}  // namespace

ImageScene gen_image_scene(u64 seed) {
  u64 s = derive_seed(seed, "image_scene");
  for (int retry = 0; retry < 32; ++retry) {
    ImageScene scene;
    if (try_image_scene(s, scene)) return scene;
    s = derive_seed(s, "retry");
  }
  throw std::runtime_error("gen_image_scene: placement failed repeatedly");
}

PointScene gen_point_scene(u64 seed, int min_objects) {
  if (min_objects < 1 || min_objects > 3)
    throw std::runtime_error("gen_point_scene: min_objects must be in [1, 3]");
  u64 s = derive_seed(seed, "point_scene");
  for (int retry = 0; retry < 32; ++retry) {
    PointScene scene;
    if (try_point_scene(s, min_objects, scene)) return scene;
    s = derive_seed(s, "retry");
  }
  throw std::runtime_error("gen_point_scene: placement failed repeatedly");
}

void write_blob(const std::string& path, const std::vector<u64>& shape,
                const std::vector<float>& data) {
  u64 n = 1;
  for (u64 d : shape) n *= d;
  if (n != data.size())
    throw std::runtime_error("write_blob: shape does not match payload size");
  std::vector<char> out;
  auto put_u64 = [&out](u64 v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  put_u64(shape.size());
  for (u64 d : shape) put_u64(d);
  const char* p = reinterpret_cast<const char*>(data.data());
  out.insert(out.end(), p, p + data.size() * sizeof(float));
  write_binary_file(path, out.data(), out.size());
}

std::pair<std::vector<u64>, std::vector<float>> read_blob(const std::string& path) {
  const std::vector<char> bytes = read_binary_file(path);
  auto get_u64 = [&bytes, &path](size_t off) {
    if (off + 8 > bytes.size())
      throw std::runtime_error("blob '" + path + "' is truncated");
    u64 v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<u64>(static_cast<unsigned char>(bytes[off + size_t(i)]))
           << (8 * i);
    return v;
  };
  const u64 rank = get_u64(0);
  if (rank > 8) throw std::runtime_error("blob '" + path + "' has implausible rank");
  std::vector<u64> shape;
  u64 n = 1;
  for (u64 i = 0; i < rank; ++i) {
    shape.push_back(get_u64(8 + 8 * i));
    n *= shape.back();
  }
  const size_t header = 8 + 8 * static_cast<size_t>(rank);
  if (bytes.size() != header + n * sizeof(float))
    throw std::runtime_error("blob '" + path + "': header promises " +
                             std::to_string(n) + " floats but the file holds " +
                             std::to_string(bytes.size() - header) + " bytes");
  std::vector<float> data(n);
  std::memcpy(data.data(), bytes.data() + header, n * sizeof(float));
  return {std::move(shape), std::move(data)};
}

namespace {

json region_json(const RegionSpec& r) {
  if (r.kind == RegionKind::none) return nullptr;
  json coords = json::array();
  const int dim = r.target_dim();
  if (r.kind == RegionKind::box2d) {
    for (int i = 0; i < dim; ++i) coords.push_back(r.v[size_t(i)]);
  } else {
    for (int i = 0; i < 6; ++i) coords.push_back(r.v[size_t(i)]);
  }
  return json{{"kind", region_kind_name(r.kind)}, {"coords", coords}};
}

Sample make_sample(const std::string& id, Modality mod, u64 scene_seed) {
  Sample s;
  s.id = id;
  s.modality = mod;
  if (modality_is_point(mod)) {
    PointScene scene = gen_point_scene(scene_seed, modality_is_region(mod) ? 2 : 1);
    s.points = std::move(scene.points);
    if (modality_is_region(mod)) {
      Rng pick(derive_seed(scene_seed, "pick"));
      const SceneObject& obj =
          scene.objects[size_t(pick.uniform_int(0, int(scene.objects.size()) - 1))];
      s.region = obj.region;
      s.caption = obj.caption;
    } else {
      s.caption = scene.caption;
    }
  } else {
    ImageScene scene = gen_image_scene(scene_seed);
    s.image = std::move(scene.image);
    if (modality_is_region(mod)) {
      Rng pick(derive_seed(scene_seed, "pick"));
      const SceneObject& obj =
          scene.objects[size_t(pick.uniform_int(0, int(scene.objects.size()) - 1))];
      s.region = obj.region;
      s.caption = obj.caption;
    } else {
      s.caption = scene.caption;
    }
  }
  return s;
}

}  // namespace

GenStats generate_dataset(const std::string& root, const GenConfig& cfg) {
  if (cfg.train_per_modality < 1 || cfg.test_per_modality < 1)
    throw ConfigError("dataset generation needs at least one sample per split");
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(root) / "blobs");

  const Vocab vocab = Vocab::canonical();
  vocab.save((fs::path(root) / "vocab.txt").string());

  GenStats stats;
  for (const std::string split : {"train", "test"}) {
    std::string lines;
    const int count =
        split == "train" ? cfg.train_per_modality : cfg.test_per_modality;
    for (Modality mod : all_modalities()) {
      for (int i = 0; i < count; ++i) {
        char idx[16];
        std::snprintf(idx, sizeof(idx), "%06d", i);
        const std::string id =
            std::string(modality_name(mod)) + "_" + split + "_" + idx;
        const u64 scene_seed = derive_seed(
            cfg.seed, split + "/" + std::string(modality_name(mod)) + "/" + idx);
        Sample s = make_sample(id, mod, scene_seed);

        // The caption must round-trip through the shared vocabulary.
        vocab.encode(s.caption, false, false);

        const std::string payload = "blobs/" + id + ".f32";
        if (modality_is_point(mod)) {
          write_blob((fs::path(root) / payload).string(),
                     {static_cast<u64>(s.points.count()), 3}, s.points.xyz);
        } else {
          write_blob((fs::path(root) / payload).string(),
                     {static_cast<u64>(s.image.height),
                      static_cast<u64>(s.image.width), 3},
                     s.image.rgb);
        }

        json rec;
        rec["id"] = s.id;
        rec["modality"] = modality_name(mod);
        rec["payload"] = payload;
        rec["region"] = region_json(s.region);
        rec["caption"] = s.caption;
        lines += rec.dump();
        lines += '\n';
      }
      (split == "train" ? stats.train_counts
                        : stats.test_counts)[modality_name(mod)] = count;
    }
    write_text_file((fs::path(root) / (split + ".jsonl")).string(), lines);
  }
  return stats;
}

std::vector<Sample> read_dataset(const std::string& root, const std::string& split) {
  namespace fs = std::filesystem;
  const std::string list_path = (fs::path(root) / (split + ".jsonl")).string();
  const std::string text = read_text_file(list_path);

  std::vector<Sample> samples;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where =
        split + ".jsonl line " + std::to_string(line_no);
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error& e) {
      throw std::runtime_error("dataset: " + where + " is not valid JSON: " + e.what());
    }
    Sample s;
    try {
      s.id = rec.at("id").get<std::string>();
      s.modality = modality_from_name(rec.at("modality").get<std::string>());
      s.caption = rec.at("caption").get<std::string>();
      const json& region = rec.at("region");
      if (!region.is_null()) {
        const RegionKind kind =
            region_kind_from_name(region.at("kind").get<std::string>());
        const std::vector<double> c = region.at("coords").get<std::vector<double>>();
        if (kind == RegionKind::box2d) {
          if (c.size() != 4)
            throw std::runtime_error("box2d needs 4 coordinates");
          s.region = RegionSpec::box2d(c[0], c[1], c[2], c[3]);
        } else {
          if (c.size() != 6)
            throw std::runtime_error("box3d needs 6 coordinates");
          s.region = RegionSpec::box3d(c[0], c[1], c[2], c[3], c[4], c[5]);
        }
      }
      if (s.caption.empty()) throw std::runtime_error("caption is empty");
      if (modality_is_region(s.modality) != (s.region.kind != RegionKind::none))
        throw std::runtime_error(
            "region presence does not match the sample's modality");
      if (s.region.kind != RegionKind::none) {
        const RegionKind want =
            modality_is_point(s.modality) ? RegionKind::box3d : RegionKind::box2d;
        if (s.region.kind != want)
          throw std::runtime_error(std::string("region kind '") +
                                   region_kind_name(s.region.kind) +
                                   "' does not match modality '" +
                                   modality_name(s.modality) + "'");
      }

      const std::string payload = rec.at("payload").get<std::string>();
      const std::string blob_path = (fs::path(root) / payload).string();
      if (!fs::exists(blob_path))
        throw std::runtime_error("missing payload blob '" + payload + "'");
      auto [shape, data] = read_blob(blob_path);
      if (modality_is_point(s.modality)) {
        if (shape.size() != 2 || shape[1] != 3)
          throw std::runtime_error("blob '" + payload + "' is not an [n, 3] cloud");
        s.points.xyz = std::move(data);
      } else {
        if (shape.size() != 3 || shape[2] != 3)
          throw std::runtime_error("blob '" + payload +
                                   "' is not an [h, w, 3] raster");
        s.image.height = static_cast<int>(shape[0]);
        s.image.width = static_cast<int>(shape[1]);
        s.image.rgb = std::move(data);
      }
    } catch (const json::exception& e) {
      throw std::runtime_error("dataset: " + where + ": " + e.what());
    } catch (const std::runtime_error& e) {
      throw std::runtime_error("dataset: " + where + ": " + e.what());
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace ralign
