#pragma once

#include <array>
#include <string>

#include "ralign/common.hpp"

namespace ralign {

// A region attached to a sample. 2-D boxes are (x1, y1, x2, y2) with corners
// normalized to [0, 1] of the image extent. 3-D boxes are
// (cx, cy, cz, sx, sy, sz): the box center and side lengths, both mapped from
// scene coordinates in [-1, 1] to [0, 1] (center via (c+1)/2, sides via s/2),
// so every stored coordinate lives in the unit interval and a sigmoid head
// can regress it directly.
enum class RegionKind { none, box2d, box3d };

struct RegionSpec {
  RegionKind kind = RegionKind::none;
  std::array<double, 6> v = {0, 0, 0, 0, 0, 0};  // box2d uses the first four

  static RegionSpec none_region() { return RegionSpec{}; }
  static RegionSpec box2d(double x1, double y1, double x2, double y2);
  static RegionSpec box3d(double cx, double cy, double cz, double sx, double sy,
                          double sz);

  // Throws with a descriptive message on out-of-range or degenerate boxes.
  void validate() const;

  // Number of regression targets (4 for box2d, 6 for box3d).
  int target_dim() const;

  // The position feature consumed by position-assisted extraction: always six
  // numbers so one module serves both kinds. 2-D boxes embed as
  // (x1, y1, 0, x2, y2, 0).
  std::array<float, 6> feature() const;

  // Regression target vector (length target_dim()).
  std::array<double, 6> target() const;
};

const char* region_kind_name(RegionKind k);
RegionKind region_kind_from_name(const std::string& name);

}  // namespace ralign
