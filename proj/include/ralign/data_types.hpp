#pragma once

#include <string>
#include <vector>

#include "ralign/region.hpp"

namespace ralign {

// RGB raster with channels-last layout, values in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> rgb;  // height * width * 3

  static Image blank(int w, int h, float r = 1.0f, float g = 1.0f, float b = 1.0f);
  size_t idx(int x, int y, int c) const {
    return (static_cast<size_t>(y) * width + x) * 3 + static_cast<size_t>(c);
  }
  float at(int x, int y, int c) const { return rgb[idx(x, y, c)]; }
  void set(int x, int y, float r, float g, float b);
};

struct PointCloud {
  std::vector<float> xyz;  // n * 3, scene coordinates in [-1, 1]
  int count() const { return static_cast<int>(xyz.size() / 3); }
  float x(int i) const { return xyz[static_cast<size_t>(i) * 3 + 0]; }
  float y(int i) const { return xyz[static_cast<size_t>(i) * 3 + 1]; }
  float z(int i) const { return xyz[static_cast<size_t>(i) * 3 + 2]; }
};

// The four sample families the model learns jointly. The *_text pairs align a
// whole image / point cloud with a caption; the *_region pairs align a region
// of it (with a position input and a regression target).
enum class Modality { img_text, img_region, pc_text, pc_region };

const char* modality_name(Modality m);
Modality modality_from_name(const std::string& name);
bool modality_is_region(Modality m);
bool modality_is_point(Modality m);
const std::vector<Modality>& all_modalities();

struct Sample {
  std::string id;
  Modality modality = Modality::img_text;
  Image image;        // populated for img_*
  PointCloud points;  // populated for pc_*
  RegionSpec region;  // kind none for *_text
  std::string caption;
};

}  // namespace ralign
