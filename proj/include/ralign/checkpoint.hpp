#pragma once

#include <string>
#include <vector>

#include "ralign/model.hpp"

namespace ralign {

inline constexpr int kCheckpointFormatVersion = 1;

// Header summary, readable without touching tensor data.
struct CheckpointInfo {
  int format_version = 0;
  u64 config_digest = 0;
  std::vector<Modality> modalities;  // registered extensions, name-sorted
  bool lm_pretrained = false;
  bool base_pretrained = false;
  std::vector<std::string> tensor_names;  // name-sorted manifest order
  std::vector<std::string> frozen;        // parameter names saved as frozen
};

// File layout: [u64 little-endian header length][UTF-8 JSON header]
// [raw float32 tensor data]. The header holds the format version, the
// architecture digest, registered modalities, stage flags, the frozen
// parameter list, and a name-sorted tensor manifest of shapes and byte
// offsets into the data section. Writing is deterministic, so an unchanged
// model saves byte-identical files.
void save_checkpoint(Model& model, const std::string& path);

// Restores a checkpoint into a model built from the same architecture
// configuration: registers the listed modalities, overwrites every tensor,
// applies the frozen set and stage flags. Throws on version mismatch,
// architecture digest mismatch, unknown or missing tensors, out-of-bounds or
// overlapping tensor data, and truncated files — each with a distinct
// message.
void load_checkpoint(Model& model, const std::string& path);

CheckpointInfo read_checkpoint_info(const std::string& path);

}  // namespace ralign
