#include "ralign/mining.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <filesystem>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "ralign/common.hpp"
#include "ralign/dataset.hpp"

namespace ralign {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct NamedColor {
  const char* name;
  float r, g, b;
};

constexpr NamedColor kPalette[] = {
    {"red", 1.0f, 0.0f, 0.0f},
    {"green", 0.0f, 1.0f, 0.0f},
    {"blue", 0.0f, 0.0f, 1.0f},
    {"yellow", 1.0f, 1.0f, 0.0f},
};

const std::set<std::string>& shape_words() {
  static const std::set<std::string> s = {"circle", "square", "triangle", "sphere",
                                          "cube",   "cone",   "torus"};
  return s;
}

const std::set<std::string>& color_words() {
  static const std::set<std::string> s = {"red", "green", "blue", "yellow"};
  return s;
}

bool pixel_is_white(const Image& img, int x, int y) {
  return img.at(x, y, 0) == 1.0f && img.at(x, y, 1) == 1.0f && img.at(x, y, 2) == 1.0f;
}

bool same_color(const Image& img, int x0, int y0, int x1, int y1) {
  return img.at(x0, y0, 0) == img.at(x1, y1, 0) &&
         img.at(x0, y0, 1) == img.at(x1, y1, 1) &&
         img.at(x0, y0, 2) == img.at(x1, y1, 2);
}

std::vector<std::string> split_words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

// Pixel bounds of a normalized box; corners are multiples of 1/width so the
// rounding is exact for generator- and miner-produced boxes.
struct PixelBox {
  int minx, miny, maxx, maxy;
};

PixelBox to_pixels(const RegionSpec& r, int width, int height) {
  PixelBox b;
  b.minx = static_cast<int>(std::lround(r.v[0] * width));
  b.miny = static_cast<int>(std::lround(r.v[1] * height));
  b.maxx = static_cast<int>(std::lround(r.v[2] * width)) - 1;
  b.maxy = static_cast<int>(std::lround(r.v[3] * height)) - 1;
  return b;
}

}  // namespace

ChunkEmbedding bag_of_words_embedding(const std::string& chunk) {
  ChunkEmbedding vec;
  for (const std::string& w : split_words(chunk)) vec[w] += 1.0;
  double norm = 0.0;
  for (const auto& [w, v] : vec) norm += v * v;
  norm = std::sqrt(norm);
  if (norm > 0.0)
    for (auto& [w, v] : vec) v /= norm;
  return vec;
}

double embedding_dot(const ChunkEmbedding& a, const ChunkEmbedding& b) {
  double dot = 0.0;
  for (const auto& [w, v] : a) {
    auto it = b.find(w);
    if (it != b.end()) dot += v * it->second;
  }
  return dot;
}

void FilterConfig::validate() const {
  if (!(tau > 0.0) || tau > 1.0)
    throw ConfigError("filter: tau must be in (0, 1]");
  if (!embedder) throw ConfigError("filter: no embedder configured");
}

std::vector<RegionMask> color_components(const Image& img, double min_area_fraction) {
  const int w = img.width, h = img.height;
  std::vector<int> label(static_cast<size_t>(w) * h, -1);
  std::vector<RegionMask> out;

  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const size_t idx = static_cast<size_t>(y) * w + x;
      if (label[idx] >= 0 || pixel_is_white(img, x, y)) continue;

      // Flood-fill one component of identical color, 4-connected.
      RegionMask comp;
      comp.mask.assign(static_cast<size_t>(w) * h, 0);
      int minx = x, maxx = x, miny = y, maxy = y, area = 0;
      std::deque<std::pair<int, int>> queue = {{x, y}};
      label[idx] = static_cast<int>(out.size());
      while (!queue.empty()) {
        const auto [cx, cy] = queue.front();
        queue.pop_front();
        comp.mask[static_cast<size_t>(cy) * w + cx] = 1;
        ++area;
        minx = std::min(minx, cx);
        maxx = std::max(maxx, cx);
        miny = std::min(miny, cy);
        maxy = std::max(maxy, cy);
        const int nx[4] = {cx - 1, cx + 1, cx, cx};
        const int ny[4] = {cy, cy, cy - 1, cy + 1};
        for (int k = 0; k < 4; ++k) {
          if (nx[k] < 0 || nx[k] >= w || ny[k] < 0 || ny[k] >= h) continue;
          const size_t nidx = static_cast<size_t>(ny[k]) * w + nx[k];
          if (label[nidx] >= 0 || pixel_is_white(img, nx[k], ny[k])) continue;
          if (!same_color(img, x, y, nx[k], ny[k])) continue;
          label[nidx] = label[idx];
          queue.push_back({nx[k], ny[k]});
        }
      }

      if (static_cast<double>(area) / (static_cast<double>(w) * h) < min_area_fraction)
        continue;
      comp.box = RegionSpec::box2d(static_cast<double>(minx) / w,
                                   static_cast<double>(miny) / h,
                                   static_cast<double>(maxx + 1) / w,
                                   static_cast<double>(maxy + 1) / h);
      out.push_back(std::move(comp));
    }

  std::sort(out.begin(), out.end(), [](const RegionMask& a, const RegionMask& b) {
    if (a.box.v[0] != b.box.v[0]) return a.box.v[0] < b.box.v[0];
    return a.box.v[1] < b.box.v[1];
  });
  return out;
}

Segmenter default_segmenter(double min_area_fraction) {
  return [min_area_fraction](const Image& img) {
    return color_components(img, min_area_fraction);
  };
}

std::vector<RegionSpec> discover_regions(const Image& img, const Segmenter& segmenter) {
  std::vector<RegionSpec> boxes;
  for (const RegionMask& comp : segmenter(img)) boxes.push_back(comp.box);
  return boxes;
}

Image whiten_crop(const Image& img, const RegionSpec& region,
                  const std::vector<std::uint8_t>* mask) {
  region.validate();
  if (region.kind != RegionKind::box2d)
    throw std::runtime_error("whiten_crop: region must be a 2-D box");
  const PixelBox b = to_pixels(region, img.width, img.height);
  if (b.maxx < b.minx || b.maxy < b.miny)
    throw std::runtime_error("whiten_crop: box spans less than one pixel");
  if (b.minx < 0 || b.miny < 0 || b.maxx >= img.width || b.maxy >= img.height)
    throw std::runtime_error("whiten_crop: box exceeds the image");
  if (mask && mask->size() != static_cast<size_t>(img.width) * img.height)
    throw std::runtime_error("whiten_crop: mask size does not match the image");

  Image crop = Image::blank(b.maxx - b.minx + 1, b.maxy - b.miny + 1);
  for (int y = b.miny; y <= b.maxy; ++y)
    for (int x = b.minx; x <= b.maxx; ++x) {
      const bool keep =
          mask ? (*mask)[static_cast<size_t>(y) * img.width + x] != 0
               : !pixel_is_white(img, x, y);
      if (keep)
        crop.set(x - b.minx, y - b.miny, img.at(x, y, 0), img.at(x, y, 1),
                 img.at(x, y, 2));
    }
  return crop;
}

std::string toy_region_caption(const Image& crop) {
  int area = 0;
  double sr = 0, sg = 0, sb = 0;
  for (int y = 0; y < crop.height; ++y)
    for (int x = 0; x < crop.width; ++x) {
      if (pixel_is_white(crop, x, y)) continue;
      ++area;
      sr += crop.at(x, y, 0);
      sg += crop.at(x, y, 1);
      sb += crop.at(x, y, 2);
    }
  if (area == 0) return "";

  // Nearest palette color to the mean component color.
  const double mr = sr / area, mg = sg / area, mb = sb / area;
  const char* color = kPalette[0].name;
  double best = 1e9;
  for (const NamedColor& c : kPalette) {
    const double d = (mr - c.r) * (mr - c.r) + (mg - c.g) * (mg - c.g) +
                     (mb - c.b) * (mb - c.b);
    if (d < best) {
      best = d;
      color = c.name;
    }
  }

  // Shape from how much of the box the component fills; rasterized discs
  // cover 0.60-0.67 of their square, triangles about 0.50, squares all of it.
  const double fill =
      static_cast<double>(area) / (static_cast<double>(crop.width) * crop.height);
  const char* shape = "triangle";
  if (fill >= 0.85)
    shape = "square";
  else if (fill >= 0.56)
    shape = "circle";
  return std::string("a ") + color + " " + shape;
}

std::vector<std::string> noun_chunks(const std::string& caption) {
  const std::vector<std::string> w = split_words(caption);
  std::vector<std::string> chunks;
  for (size_t i = 0; i < w.size(); ++i) {
    if (color_words().count(w[i]) && i + 1 < w.size() && shape_words().count(w[i + 1])) {
      chunks.push_back(w[i] + " " + w[i + 1]);
      ++i;
    } else if (shape_words().count(w[i])) {
      chunks.push_back(w[i]);
    }
  }
  return chunks;
}

double max_chunk_similarity(const CandidatePair& pair, const FilterConfig& cfg) {
  cfg.validate();
  const std::vector<std::string> img_chunks = noun_chunks(pair.image_caption);
  const std::vector<std::string> reg_chunks = noun_chunks(pair.region_caption);
  if (img_chunks.empty() || reg_chunks.empty()) return -1.0;

  double best = -1.0;
  for (const std::string& ic : img_chunks) {
    const ChunkEmbedding ie = cfg.embedder(ic);
    for (const std::string& rc : reg_chunks)
      best = std::max(best, embedding_dot(ie, cfg.embedder(rc)));
  }
  return best;
}

FilterDecision similarity_filter(const CandidatePair& pair, const FilterConfig& cfg) {
  return max_chunk_similarity(pair, cfg) > cfg.tau ? FilterDecision::retain
                                                   : FilterDecision::filter_out;
}

namespace {

bool ascii_letters_only(const std::string& caption) {
  for (unsigned char c : caption) {
    if (c == ' ') continue;
    if (!((c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z'))) return false;
  }
  return true;
}

}  // namespace

RefineResult refine_captions(const std::vector<CandidatePair>& pairs) {
  RefineResult out;
  std::set<std::pair<std::string, std::string>> seen;  // (image id, caption)
  for (const CandidatePair& p : pairs) {
    if (!seen.insert({p.image_id, p.region_caption}).second) {
      ++out.removed_duplicates;
      continue;
    }
    if (!ascii_letters_only(p.region_caption)) {
      ++out.removed_language;
      continue;
    }
    out.pairs.push_back(p);
  }
  return out;
}

std::string mine_stats_json(const MineStats& stats) {
  json out;
  out["input_pairs"] = stats.input_pairs;
  out["retained"] = stats.retained;
  out["filtered_by_similarity"] = stats.filtered_by_similarity;
  out["filtered_by_dedup"] = stats.filtered_by_dedup;
  out["filtered_by_language"] = stats.filtered_by_language;
  return out.dump();
}

MineStats mine_regions(const std::string& dataset_root, const std::string& split,
                       const std::string& out_dir, const FilterConfig& cfg,
                       const Segmenter& segmenter, const Captioner& captioner) {
  cfg.validate();
  if (!segmenter) throw ConfigError("mining: no segmenter configured");
  if (!captioner) throw ConfigError("mining: no captioner configured");

  MineStats stats;
  std::vector<CandidatePair> candidates;
  for (const Sample& s : read_dataset(dataset_root, split)) {
    if (s.modality != Modality::img_text) continue;
    for (const RegionMask& comp : segmenter(s.image)) {
      const std::string caption = captioner(whiten_crop(s.image, comp.box, &comp.mask));
      if (caption.empty()) continue;
      candidates.push_back({s.id, comp.box, caption, s.caption});
      ++stats.input_pairs;
    }
  }

  std::vector<CandidatePair> kept;
  for (const CandidatePair& p : candidates) {
    if (similarity_filter(p, cfg) == FilterDecision::retain)
      kept.push_back(p);
    else
      ++stats.filtered_by_similarity;
  }

  const RefineResult refined = refine_captions(kept);
  stats.filtered_by_dedup = refined.removed_duplicates;
  stats.filtered_by_language = refined.removed_language;
  stats.retained = static_cast<int>(refined.pairs.size());

  fs::create_directories(out_dir);
  std::string lines;
  for (const CandidatePair& p : refined.pairs) {
    json rec;
    rec["image_id"] = p.image_id;
    json coords = json::array();
    for (int i = 0; i < 4; ++i) coords.push_back(p.region.v[size_t(i)]);
    rec["region"] = json{{"kind", "box2d"}, {"coords", coords}};
    rec["caption"] = p.region_caption;
    rec["image_caption"] = p.image_caption;
    lines += rec.dump();
    lines += '\n';
  }
  write_text_file((fs::path(out_dir) / "regions.jsonl").string(), lines);
  write_text_file((fs::path(out_dir) / "stats.json").string(),
                  mine_stats_json(stats) + "\n");
  return stats;
}

}  // namespace ralign
