#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ralign/data_types.hpp"

namespace ralign {

// One discovered image component: its tight normalized box plus a
// full-image 0/1 mask of the component's pixels.
struct RegionMask {
  RegionSpec box;
  std::vector<std::uint8_t> mask;  // height * width, nonzero = component
};

// Pluggable region discovery. The default labels 4-connected components of
// identical non-white color, standing in for a promptable segmenter.
using Segmenter = std::function<std::vector<RegionMask>(const Image&)>;

// Pluggable regional captioner over a background-whitened crop. The default
// names the component's palette color and classifies the shape from the
// box fill ratio.
using Captioner = std::function<std::string(const Image& whitened_crop)>;

// Sparse unit-norm text embedding of one noun chunk.
using ChunkEmbedding = std::map<std::string, double>;
using Embedder = std::function<ChunkEmbedding(const std::string& chunk)>;

// L2-normalized bag of words: each distinct word is an axis. The default
// embedder of FilterConfig.
ChunkEmbedding bag_of_words_embedding(const std::string& chunk);
double embedding_dot(const ChunkEmbedding& a, const ChunkEmbedding& b);

// A mined (region, caption) candidate attached to its source image.
struct CandidatePair {
  std::string image_id;
  RegionSpec region;  // box2d
  std::string region_caption;
  std::string image_caption;
};

struct FilterConfig {
  double tau = 0.9;  // retain strictly above this chunk similarity
  Embedder embedder = bag_of_words_embedding;
  void validate() const;  // 0 < tau <= 1, embedder present
};

// Connected components of identical non-white color (4-connected), keeping
// those covering at least `min_area_fraction` of the image, ordered by their
// box's top-left pixel.
std::vector<RegionMask> color_components(const Image& img, double min_area_fraction);
Segmenter default_segmenter(double min_area_fraction = 0.001);

// Tight boxes of every discovered component.
std::vector<RegionSpec> discover_regions(const Image& img,
                                         const Segmenter& segmenter = default_segmenter());

// Crop to the region's pixel box; every cropped pixel outside `mask` turns
// white. A null mask keeps all non-white pixels (components here never
// intrude on other boxes). Throws when the box spans less than one pixel.
Image whiten_crop(const Image& img, const RegionSpec& region,
                  const std::vector<std::uint8_t>* mask = nullptr);

// Deterministic toy regional caption, "a <color> <shape>": nearest palette
// color of the component, shape from the box fill ratio (squares fill their
// box, discs about 0.6-0.67 of it, triangles about half).
std::string toy_region_caption(const Image& whitened_crop);

// "<color> <shape>" / "<shape>" chunks of a template-grammar caption: a
// color immediately followed by a shape word forms one chunk, a bare shape
// word forms a colorless chunk, everything else is skipped. Unparsable
// captions (no shape words) yield an empty list.
std::vector<std::string> noun_chunks(const std::string& caption);

enum class FilterDecision { retain, filter_out };

// Best embedder dot product over all (image-chunk, region-chunk) pairs;
// -1 when either caption yields no chunks (so it can never exceed a valid
// threshold).
double max_chunk_similarity(const CandidatePair& pair, const FilterConfig& cfg);

// Retain if-and-only-if the max chunk similarity strictly exceeds tau.
// Equality filters out: the mining rule drops "similarity less than tau",
// and the boundary is assigned to the drop side.
FilterDecision similarity_filter(const CandidatePair& pair, const FilterConfig& cfg);

// Deduplication and language cleanup: exact-duplicate region captions per
// image are removed (first kept), then captions with any token containing a
// non-ASCII-letter character are removed.
struct RefineResult {
  std::vector<CandidatePair> pairs;
  int removed_duplicates = 0;
  int removed_language = 0;
};
RefineResult refine_captions(const std::vector<CandidatePair>& pairs);

struct MineStats {
  int input_pairs = 0;
  int retained = 0;
  int filtered_by_similarity = 0;
  int filtered_by_dedup = 0;
  int filtered_by_language = 0;
};
std::string mine_stats_json(const MineStats& stats);

// Full pipeline over every whole-image sample of <root>/<split>.jsonl:
// discover regions, caption each whitened crop, filter by chunk similarity
// against the image caption, refine, and write <out_dir>/regions.jsonl plus
// <out_dir>/stats.json. Deterministic given identical inputs.
MineStats mine_regions(const std::string& dataset_root, const std::string& split,
                       const std::string& out_dir, const FilterConfig& cfg,
                       const Segmenter& segmenter = default_segmenter(),
                       const Captioner& captioner = toy_region_caption);

}  // namespace ralign
