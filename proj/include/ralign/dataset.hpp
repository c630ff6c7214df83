#pragma once

#include <array>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ralign/data_types.hpp"
#include "ralign/vocab.hpp"

namespace ralign {

// One placed object of a synthetic scene, with its ground truth.
struct SceneObject {
  std::string color;  // images only; empty for point primitives
  std::string shape;  // circle/square/triangle or sphere/cube/cone/torus
  RegionSpec region;  // tight normalized bounds of the rendered object
  std::string caption;  // "a red circle" / "a sphere"
  std::array<double, 3> center = {0, 0, 0};  // generation-truth placement
  double scale = 0;                          // half-extent / primitive size
  int first_point = 0, point_count = 0;      // index range (point scenes)
};

struct ImageScene {
  Image image;
  std::vector<SceneObject> objects;  // ordered left to right
  std::string caption;
};

struct PointScene {
  PointCloud points;
  std::vector<SceneObject> objects;  // ordered left to right
  std::string caption;
};

// 2-4 colored shapes on a white 64x64 canvas: exact palette colors, no
// anti-aliasing, pairwise pixel separation of at least two, distinct
// (color, shape) pairs so every per-object caption is unambiguous. Two-object
// scenes caption the spatial relation (above/below when the vertical gap
// dominates, else beside, subject = left object); larger scenes list objects
// left to right joined by "and".
ImageScene gen_image_scene(u64 seed);

// 1-3 distinct primitives sampled on their surfaces, 512 points total inside
// [-1, 1]^3, each with a tight normalized 3-D box. `min_objects` raises the
// lower object count (region samples need at least two).
PointScene gen_point_scene(u64 seed, int min_objects = 1);

// Raw tensor blob: [u64 rank][u64 extents...][float32 data], little-endian.
void write_blob(const std::string& path, const std::vector<u64>& shape,
                const std::vector<float>& data);
std::pair<std::vector<u64>, std::vector<float>> read_blob(const std::string& path);

// Dataset generation settings: sample counts per modality for each split.
struct GenConfig {
  u64 seed = 0;
  int train_per_modality = 64;
  int test_per_modality = 16;
};

struct GenStats {
  std::map<std::string, int> train_counts;
  std::map<std::string, int> test_counts;
};

// Writes <root>/train.jsonl, <root>/test.jsonl, <root>/vocab.txt and
// <root>/blobs/*.f32. One JSON object per line:
//   {"id", "modality", "payload", "region": null | {"kind", "coords"},
//    "caption"}
// with payload a blob path relative to the root. Train and test ids are
// disjoint by construction and generation is byte-deterministic in the seed.
GenStats generate_dataset(const std::string& root, const GenConfig& cfg);

// Reads <root>/<split>.jsonl and every referenced blob. Throws with the line
// number for malformed records, with the path for missing or malformed
// blobs, and for region/modality mismatches.
std::vector<Sample> read_dataset(const std::string& root, const std::string& split);

}  // namespace ralign
