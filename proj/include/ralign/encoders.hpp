#pragma once

#include <vector>

#include "ralign/data_types.hpp"
#include "ralign/nn.hpp"
#include "ralign/tensor.hpp"

namespace ralign {

// Both encoders are frozen feature extractors: their parameters are created
// with requires_grad = false and no trainer ever flips them, so their forward
// passes record nothing on the tape.

struct ImageEncoderConfig {
  int image_size = 64;
  int patch = 16;
  int d = 64;
  int layers = 2;
  int heads = 4;
};

class ImageEncoder {
 public:
  static ImageEncoder create(const ImageEncoderConfig& cfg, u64 seed);

  int token_count() const { return n_patches_; }
  int dim() const { return cfg_.d; }
  const ImageEncoderConfig& config() const { return cfg_; }

  // Projected patch embeddings before the position embedding is added; a
  // spatially uniform image yields identical rows here.
  Tensor patch_tokens(const Image& im) const;
  // Full encoding: patches + positions through the transformer, final norm.
  Tensor encode(const Image& im) const;  // [n_patches, d]

  void register_params(ParamRegistry& reg, const std::string& prefix);

 private:
  ImageEncoderConfig cfg_;
  int n_patches_ = 0;
  LinearLayer patch_proj_;
  Tensor pos_emb_;  // [n_patches, d]
  std::vector<TransformerBlock> blocks_;
  LayerNorm ln_f_;
};

// Farthest-point sampling over n points (xyz packed x0,y0,z0,x1,...). Greedy
// max-min Euclidean distance starting from `start`; distance ties resolve to
// the lowest index. Returns k indices in selection order.
std::vector<int> farthest_point_sample(const std::vector<float>& xyz, int n, int k,
                                       int start = 0);

// Indices of the m nearest points to `center` (the center itself included),
// ordered by ascending distance with ties by index.
std::vector<int> knn_indices(const std::vector<float>& xyz, int n, int center, int m);

struct PointEncoderConfig {
  int groups = 32;      // output token count (FPS centers)
  int group_size = 16;  // points gathered per center
  int d = 64;
  int layers = 2;
  int heads = 4;
  // When true, each pooled group feature is re-projected together with its
  // absolute center coordinates; off by default so tokens are translation
  // invariant.
  bool absolute_center = false;
};

class PointEncoder {
 public:
  static PointEncoder create(const PointEncoderConfig& cfg, u64 seed);

  int token_count() const { return cfg_.groups; }
  int dim() const { return cfg_.d; }
  const PointEncoderConfig& config() const { return cfg_; }

  Tensor encode(const PointCloud& pc) const;  // [groups, d]

  void register_params(ParamRegistry& reg, const std::string& prefix);

 private:
  PointEncoderConfig cfg_;
  LinearLayer point_fc1_;   // 3 -> d (relative coordinates)
  LinearLayer point_fc2_;   // d -> d
  LinearLayer center_proj_; // d+3 -> d, only used with absolute_center
  std::vector<TransformerBlock> blocks_;
  LayerNorm ln_f_;
};

struct AugmentConfig {
  double dropout = 0.1;
  double scale_lo = 0.8;
  double scale_hi = 1.25;
  bool rotate_z = true;
  int floor = 64;  // never drop below this many points
};

// Training-time point-cloud augmentation: random point dropout (redrawn if it
// would leave fewer than `floor` points), uniform scaling, rotation about z.
PointCloud augment_points(const PointCloud& pc, Rng& rng, const AugmentConfig& cfg);

}  // namespace ralign
