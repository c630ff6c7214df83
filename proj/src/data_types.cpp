#include "ralign/data_types.hpp"

#include <stdexcept>

namespace ralign {

Image Image::blank(int w, int h, float r, float g, float b) {
  Image im;
  im.width = w;
  im.height = h;
  im.rgb.resize(static_cast<size_t>(w) * h * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) im.set(x, y, r, g, b);
  return im;
}

void Image::set(int x, int y, float r, float g, float b) {
  rgb[idx(x, y, 0)] = r;
  rgb[idx(x, y, 1)] = g;
  rgb[idx(x, y, 2)] = b;
}

const char* modality_name(Modality m) {
  switch (m) {
    case Modality::img_text:
      return "img_text";
    case Modality::img_region:
      return "img_region";
    case Modality::pc_text:
      return "pc_text";
    case Modality::pc_region:
      return "pc_region";
  }
  return "img_text";
}

Modality modality_from_name(const std::string& name) {
  if (name == "img_text") return Modality::img_text;
  if (name == "img_region") return Modality::img_region;
  if (name == "pc_text") return Modality::pc_text;
  if (name == "pc_region") return Modality::pc_region;
  throw ConfigError("unknown modality '" + name + "'");
}

bool modality_is_region(Modality m) {
  return m == Modality::img_region || m == Modality::pc_region;
}

bool modality_is_point(Modality m) {
  return m == Modality::pc_text || m == Modality::pc_region;
}

const std::vector<Modality>& all_modalities() {
  static const std::vector<Modality> mods = {Modality::img_text, Modality::img_region,
                                             Modality::pc_text, Modality::pc_region};
  return mods;
}

}  // namespace ralign
