#include "ralign/region.hpp"

#include <stdexcept>

namespace ralign {

RegionSpec RegionSpec::box2d(double x1, double y1, double x2, double y2) {
  RegionSpec r;
  r.kind = RegionKind::box2d;
  r.v = {x1, y1, x2, y2, 0, 0};
  r.validate();
  return r;
}

RegionSpec RegionSpec::box3d(double cx, double cy, double cz, double sx, double sy,
                             double sz) {
  RegionSpec r;
  r.kind = RegionKind::box3d;
  r.v = {cx, cy, cz, sx, sy, sz};
  r.validate();
  return r;
}

void RegionSpec::validate() const {
  auto in_unit = [](double x) { return x >= 0.0 && x <= 1.0; };
  switch (kind) {
    case RegionKind::none:
      return;
    case RegionKind::box2d: {
      for (int i = 0; i < 4; ++i)
        if (!in_unit(v[static_cast<size_t>(i)]))
          throw std::runtime_error("region: box2d coordinate outside [0,1]");
      if (v[0] >= v[2] || v[1] >= v[3])
        throw std::runtime_error("region: box2d corners must satisfy x1<x2 and y1<y2");
      return;
    }
    case RegionKind::box3d: {
      for (int i = 0; i < 6; ++i)
        if (!in_unit(v[static_cast<size_t>(i)]))
          throw std::runtime_error("region: box3d coordinate outside [0,1]");
      if (v[3] <= 0 || v[4] <= 0 || v[5] <= 0)
        throw std::runtime_error("region: box3d side lengths must be positive");
      return;
    }
  }
  throw std::runtime_error("region: unknown kind");
}

int RegionSpec::target_dim() const {
  switch (kind) {
    case RegionKind::box2d:
      return 4;
    case RegionKind::box3d:
      return 6;
    default:
      throw std::runtime_error("region: no regression target for a region-less sample");
  }
}

std::array<float, 6> RegionSpec::feature() const {
  switch (kind) {
    case RegionKind::box2d:
      return {static_cast<float>(v[0]), static_cast<float>(v[1]), 0.0f,
              static_cast<float>(v[2]), static_cast<float>(v[3]), 0.0f};
    case RegionKind::box3d:
      return {static_cast<float>(v[0]), static_cast<float>(v[1]),
              static_cast<float>(v[2]), static_cast<float>(v[3]),
              static_cast<float>(v[4]), static_cast<float>(v[5])};
    default:
      throw std::runtime_error("region: no position feature for a region-less sample");
  }
}

std::array<double, 6> RegionSpec::target() const {
  if (kind == RegionKind::none)
    throw std::runtime_error("region: no regression target for a region-less sample");
  return v;
}

const char* region_kind_name(RegionKind k) {
  switch (k) {
    case RegionKind::none:
      return "none";
    case RegionKind::box2d:
      return "box2d";
    case RegionKind::box3d:
      return "box3d";
  }
  return "none";
}

RegionKind region_kind_from_name(const std::string& name) {
  if (name == "none") return RegionKind::none;
  if (name == "box2d") return RegionKind::box2d;
  if (name == "box3d") return RegionKind::box3d;
  throw std::runtime_error("region: unknown region kind '" + name + "'");
}

}  // namespace ralign
