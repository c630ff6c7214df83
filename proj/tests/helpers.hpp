#pragma once

// Shared finite-difference harness for the test binaries. Must be included
// after doctest.h.

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ralign/tensor.hpp"

namespace testing_helpers {

using namespace ralign;

// Single-op finite-difference property: L = sum(op(...) * W) with fixed random
// weights W so every output element gets a distinct gradient. Weight magnitude
// stays in [0.5, 1.5] so no output coordinate has a vanishing gradient, which
// would drown the comparison in f32 rounding noise.
inline Tensor weighted_sum(const Tensor& t, u64 seed) {
  Rng rng(seed);
  Tensor w = Tensor::zeros(t.shape);
  for (float& x : *w.data) {
    double mag = rng.uniform(0.5, 1.5);
    x = static_cast<float>(rng.uniform() < 0.5 ? -mag : mag);
  }
  return sum(mul(t, w));
}

inline void check_op(const char* name, const std::function<Tensor()>& f,
                     std::vector<std::pair<std::string, Tensor>> params, double tol = 1e-4,
                     double h = 5e-3) {
  GradCheckReport rep = grad_check(f, params, h, tol);
  if (!rep.pass) {
    for (const auto& e : rep.entries) {
      std::string msg = std::string(name) + " / " + e.name + ": max rel err " +
                        std::to_string(e.max_rel_err);
      MESSAGE(msg);
    }
  }
  CHECK(rep.pass);
}

inline Tensor randt(const std::vector<int>& shape, u64 seed, double lo = -1.0,
                    double hi = 1.0) {
  Rng rng(seed);
  Tensor t = Tensor::zeros(shape);
  for (float& x : *t.data) x = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

}  // namespace testing_helpers
