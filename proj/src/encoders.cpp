#include "ralign/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ralign {

ImageEncoder ImageEncoder::create(const ImageEncoderConfig& cfg, u64 seed) {
  if (cfg.image_size % cfg.patch != 0)
    throw std::runtime_error("image encoder: image size not divisible by patch size");
  ImageEncoder e;
  e.cfg_ = cfg;
  const int per_side = cfg.image_size / cfg.patch;
  e.n_patches_ = per_side * per_side;
  Rng rng(derive_seed(seed, "image_encoder"));
  e.patch_proj_ = LinearLayer::create(cfg.patch * cfg.patch * 3, cfg.d, rng);
  // A large position scale gives patches a strong spatial identity, which the
  // region pathway depends on.
  e.pos_emb_ = Tensor::randn({e.n_patches_, cfg.d}, rng, 0.5);
  for (int i = 0; i < cfg.layers; ++i)
    e.blocks_.push_back(TransformerBlock::create(cfg.d, cfg.heads, 2 * cfg.d, rng));
  e.ln_f_ = LayerNorm::create(cfg.d);
  return e;
}

Tensor ImageEncoder::patch_tokens(const Image& im) const {
  if (im.width != cfg_.image_size || im.height != cfg_.image_size)
    throw std::runtime_error("image encoder: unexpected image dimensions");
  const int p = cfg_.patch;
  const int per_side = cfg_.image_size / p;
  const int patch_dim = p * p * 3;
  Tensor flat = Tensor::zeros({n_patches_, patch_dim});
  for (int py = 0; py < per_side; ++py) {
    for (int px = 0; px < per_side; ++px) {
      const int t = py * per_side + px;
      float* row = flat.ptr() + static_cast<size_t>(t) * patch_dim;
      int w = 0;
      for (int y = 0; y < p; ++y)
        for (int x = 0; x < p; ++x)
          for (int c = 0; c < 3; ++c) row[w++] = im.at(px * p + x, py * p + y, c);
    }
  }
  return patch_proj_.forward(flat);
}

Tensor ImageEncoder::encode(const Image& im) const {
  Tensor x = add(patch_tokens(im), pos_emb_);
  for (const TransformerBlock& b : blocks_) x = b.forward(x);
  return ln_f_.forward(x);
}

void ImageEncoder::register_params(ParamRegistry& reg, const std::string& prefix) {
  patch_proj_.register_params(reg, prefix + ".patch_proj");
  reg.add(prefix + ".pos_emb", &pos_emb_);
  for (size_t i = 0; i < blocks_.size(); ++i)
    blocks_[i].register_params(reg, prefix + ".block" + std::to_string(i));
  ln_f_.register_params(reg, prefix + ".ln_f");
}

std::vector<int> farthest_point_sample(const std::vector<float>& xyz, int n, int k,
                                       int start) {
  if (n <= 0 || k <= 0) return {};
  if (k > n) throw std::runtime_error("farthest_point_sample: k exceeds point count");
  if (start < 0 || start >= n)
    throw std::runtime_error("farthest_point_sample: start index out of range");
  std::vector<int> picked;
  picked.reserve(static_cast<size_t>(k));
  std::vector<double> best(static_cast<size_t>(n), 1e300);  // min dist^2 to picked set
  int cur = start;
  picked.push_back(cur);
  for (int round = 1; round < k; ++round) {
    double far_d = -1.0;
    int far_i = -1;
    for (int i = 0; i < n; ++i) {
      const double dx = double(xyz[3 * size_t(i)]) - double(xyz[3 * size_t(cur)]);
      const double dy = double(xyz[3 * size_t(i) + 1]) - double(xyz[3 * size_t(cur) + 1]);
      const double dz = double(xyz[3 * size_t(i) + 2]) - double(xyz[3 * size_t(cur) + 2]);
      best[size_t(i)] = std::min(best[size_t(i)], dx * dx + dy * dy + dz * dz);
      if (best[size_t(i)] > far_d) {  // strict: ties keep the lowest index
        far_d = best[size_t(i)];
        far_i = i;
      }
    }
    cur = far_i;
    picked.push_back(cur);
  }
  return picked;
}

std::vector<int> knn_indices(const std::vector<float>& xyz, int n, int center, int m) {
  if (m > n) throw std::runtime_error("knn_indices: m exceeds point count");
  std::vector<std::pair<double, int>> d(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double dx = double(xyz[3 * size_t(i)]) - double(xyz[3 * size_t(center)]);
    const double dy = double(xyz[3 * size_t(i) + 1]) - double(xyz[3 * size_t(center) + 1]);
    const double dz = double(xyz[3 * size_t(i) + 2]) - double(xyz[3 * size_t(center) + 2]);
    d[size_t(i)] = {dx * dx + dy * dy + dz * dz, i};
  }
  std::partial_sort(d.begin(), d.begin() + m, d.end());
  std::vector<int> out(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) out[size_t(i)] = d[size_t(i)].second;
  return out;
}

PointEncoder PointEncoder::create(const PointEncoderConfig& cfg, u64 seed) {
  PointEncoder e;
  e.cfg_ = cfg;
  Rng rng(derive_seed(seed, "point_encoder"));
  e.point_fc1_ = LinearLayer::create(3, cfg.d, rng, true, 0.3);
  e.point_fc2_ = LinearLayer::create(cfg.d, cfg.d, rng);
  e.center_proj_ = LinearLayer::create(cfg.d + 3, cfg.d, rng);
  for (int i = 0; i < cfg.layers; ++i)
    e.blocks_.push_back(TransformerBlock::create(cfg.d, cfg.heads, 2 * cfg.d, rng));
  e.ln_f_ = LayerNorm::create(cfg.d);
  return e;
}

Tensor PointEncoder::encode(const PointCloud& pc) const {
  const int n = pc.count();
  if (n < cfg_.groups)
    throw std::runtime_error("point encoder: cloud has fewer points than groups");
  const int m = std::min(cfg_.group_size, n);
  std::vector<int> centers = farthest_point_sample(pc.xyz, n, cfg_.groups, 0);

  Tensor tokens = Tensor::zeros({cfg_.groups, cfg_.d});
  Tensor centers_t = Tensor::zeros({cfg_.groups, 3});
  for (int g = 0; g < cfg_.groups; ++g) {
    const int c = centers[size_t(g)];
    std::vector<int> nb = knn_indices(pc.xyz, n, c, m);
    Tensor rel = Tensor::zeros({m, 3});
    for (int j = 0; j < m; ++j)
      for (int a = 0; a < 3; ++a)
        (*rel.data)[static_cast<size_t>(j) * 3 + a] =
            pc.xyz[3 * size_t(nb[size_t(j)]) + size_t(a)] - pc.xyz[3 * size_t(c) + size_t(a)];
    Tensor feat = point_fc2_.forward(gelu(point_fc1_.forward(rel)));  // [m, d]
    Tensor pooled = max(feat, 0);                                     // [d]
    std::copy(pooled.ptr(), pooled.ptr() + cfg_.d,
              tokens.ptr() + static_cast<size_t>(g) * cfg_.d);
    for (int a = 0; a < 3; ++a)
      (*centers_t.data)[static_cast<size_t>(g) * 3 + a] = pc.xyz[3 * size_t(c) + size_t(a)];
  }

  Tensor x = tokens;
  if (cfg_.absolute_center) x = center_proj_.forward(concat({tokens, centers_t}, 1));
  for (const TransformerBlock& b : blocks_) x = b.forward(x);
  return ln_f_.forward(x);
}

void PointEncoder::register_params(ParamRegistry& reg, const std::string& prefix) {
  point_fc1_.register_params(reg, prefix + ".point_fc1");
  point_fc2_.register_params(reg, prefix + ".point_fc2");
  center_proj_.register_params(reg, prefix + ".center_proj");
  for (size_t i = 0; i < blocks_.size(); ++i)
    blocks_[i].register_params(reg, prefix + ".block" + std::to_string(i));
  ln_f_.register_params(reg, prefix + ".ln_f");
}

PointCloud augment_points(const PointCloud& pc, Rng& rng, const AugmentConfig& cfg) {
  const int n = pc.count();
  std::vector<int> kept;
  for (int attempt = 0; attempt < 100; ++attempt) {
    kept.clear();
    for (int i = 0; i < n; ++i)
      if (rng.uniform() >= cfg.dropout) kept.push_back(i);
    if (static_cast<int>(kept.size()) >= std::min(cfg.floor, n)) break;
  }
  if (kept.empty())
    for (int i = 0; i < n; ++i) kept.push_back(i);

  const double s = rng.uniform(cfg.scale_lo, cfg.scale_hi);
  const double theta = cfg.rotate_z ? rng.uniform(0.0, 2.0 * 3.14159265358979323846) : 0.0;
  const double ct = std::cos(theta), st = std::sin(theta);

  PointCloud out;
  out.xyz.reserve(kept.size() * 3);
  for (int i : kept) {
    const double x = pc.x(i), y = pc.y(i), z = pc.z(i);
    out.xyz.push_back(static_cast<float>(s * (ct * x - st * y)));
    out.xyz.push_back(static_cast<float>(s * (st * x + ct * y)));
    out.xyz.push_back(static_cast<float>(s * z));
  }
  return out;
}

}  // namespace ralign
