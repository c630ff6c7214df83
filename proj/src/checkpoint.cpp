#include "ralign/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <set>
#include <stdexcept>

#include "json.hpp"

namespace ralign {
namespace {

using nlohmann::json;

std::vector<std::pair<std::string, Tensor*>> sorted_items(Model& model) {
  auto items = model.params().items();
  std::sort(items.begin(), items.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  return items;
}

struct RawCheckpoint {
  json header;
  const char* data = nullptr;  // tensor section, points into `bytes`
  size_t data_size = 0;
  std::vector<char> bytes;
};

RawCheckpoint read_raw(const std::string& path) {
  RawCheckpoint raw;
  raw.bytes = read_binary_file(path);
  if (raw.bytes.size() < 8)
    throw std::runtime_error("checkpoint is truncated: missing header length");
  u64 hlen = 0;
  for (int i = 0; i < 8; ++i)
    hlen |= static_cast<u64>(static_cast<unsigned char>(raw.bytes[size_t(i)])) << (8 * i);
  if (hlen > raw.bytes.size() - 8)
    throw std::runtime_error("checkpoint is truncated: header extends past end of file");
  try {
    raw.header = json::parse(raw.bytes.begin() + 8,
                             raw.bytes.begin() + 8 + static_cast<long>(hlen));
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string("checkpoint header is not valid JSON: ") +
                             e.what());
  }
  const int ver = raw.header.value("format_version", -1);
  if (ver != kCheckpointFormatVersion)
    throw std::runtime_error("unsupported checkpoint format version " +
                             std::to_string(ver) + " (this build reads version " +
                             std::to_string(kCheckpointFormatVersion) + ")");
  raw.data = raw.bytes.data() + 8 + hlen;
  raw.data_size = raw.bytes.size() - 8 - hlen;
  return raw;
}

struct ManifestEntry {
  std::string name;
  std::vector<int> shape;
  u64 offset = 0;
  u64 bytes = 0;
};

std::vector<ManifestEntry> parse_manifest(const json& header, size_t data_size) {
  std::vector<ManifestEntry> entries;
  for (const json& t : header.at("tensors")) {
    ManifestEntry e;
    e.name = t.at("name").get<std::string>();
    e.shape = t.at("shape").get<std::vector<int>>();
    e.offset = t.at("offset").get<u64>();
    u64 n = 1;
    for (int d : e.shape) {
      if (d < 0) throw std::runtime_error("checkpoint manifest: tensor '" + e.name +
                                          "' has a negative extent");
      n *= static_cast<u64>(d);
    }
    e.bytes = n * sizeof(float);
    if (e.offset > data_size || e.bytes > data_size - e.offset)
      throw std::runtime_error("checkpoint body is truncated: tensor '" + e.name +
                               "' needs " + std::to_string(e.bytes) + " bytes at offset " +
                               std::to_string(e.offset) + " but the data section holds " +
                               std::to_string(data_size));
    entries.push_back(std::move(e));
  }
  std::vector<const ManifestEntry*> by_offset;
  for (const ManifestEntry& e : entries) by_offset.push_back(&e);
  std::sort(by_offset.begin(), by_offset.end(),
            [](const ManifestEntry* a, const ManifestEntry* b) {
              return a->offset < b->offset;
            });
  for (size_t i = 1; i < by_offset.size(); ++i) {
    const ManifestEntry* prev = by_offset[i - 1];
    if (prev->offset + prev->bytes > by_offset[i]->offset)
      throw std::runtime_error("checkpoint manifest: tensor data of '" + prev->name +
                               "' overlaps '" + by_offset[i]->name + "'");
  }
  return entries;
}

}  // namespace

void save_checkpoint(Model& model, const std::string& path) {
  const auto items = sorted_items(model);

  json tensors = json::array();
  json frozen = json::array();
  u64 offset = 0;
  for (const auto& [name, t] : items) {
    json entry;
    entry["name"] = name;
    entry["shape"] = t->shape;
    entry["offset"] = offset;
    tensors.push_back(std::move(entry));
    offset += t->numel() * sizeof(float);
    if (!t->requires_grad) frozen.push_back(name);
  }

  json modalities = json::array();
  for (Modality m : model.extended_modalities()) modalities.push_back(modality_name(m));

  json header;
  header["format_version"] = kCheckpointFormatVersion;
  header["config_digest"] = config_digest(model.config());
  header["modalities"] = std::move(modalities);
  header["flags"] = {{"lm_pretrained", model.lm_pretrained},
                     {"base_pretrained", model.base_pretrained}};
  header["frozen"] = std::move(frozen);
  header["tensors"] = std::move(tensors);

  const std::string hs = header.dump();
  std::vector<char> out;
  out.reserve(8 + hs.size() + offset);
  for (int i = 0; i < 8; ++i)
    out.push_back(static_cast<char>((static_cast<u64>(hs.size()) >> (8 * i)) & 0xff));
  out.insert(out.end(), hs.begin(), hs.end());
  for (const auto& [name, t] : items) {
    const char* p = reinterpret_cast<const char*>(t->data->data());
    out.insert(out.end(), p, p + t->numel() * sizeof(float));
  }
  write_binary_file(path, out.data(), out.size());
}

void load_checkpoint(Model& model, const std::string& path) {
  RawCheckpoint raw = read_raw(path);
  const json& h = raw.header;

  const u64 want = config_digest(model.config());
  const u64 got = h.at("config_digest").get<u64>();
  if (want != got)
    throw std::runtime_error(
        "checkpoint architecture digest mismatch: file has " + std::to_string(got) +
        ", this model has " + std::to_string(want));

  for (const json& name : h.at("modalities")) {
    const Modality m = modality_from_name(name.get<std::string>());
    if (m != Modality::img_text && !model.has_modality(m)) model.register_modality(m);
  }

  const std::vector<ManifestEntry> manifest = parse_manifest(h, raw.data_size);
  ParamRegistry& reg = model.params();

  std::set<std::string> listed;
  for (const ManifestEntry& e : manifest) {
    Tensor* t = reg.find(e.name);
    if (!t)
      throw std::runtime_error("checkpoint names unknown tensor '" + e.name + "'");
    if (t->shape != e.shape)
      throw std::runtime_error("checkpoint tensor '" + e.name + "' has shape " +
                               shape_str(e.shape) + " but the model expects " +
                               shape_str(t->shape));
    listed.insert(e.name);
  }
  for (const auto& [name, t] : reg.items())
    if (!listed.count(name))
      throw std::runtime_error("checkpoint is missing tensor '" + name + "'");

  for (const ManifestEntry& e : manifest) {
    Tensor* t = reg.find(e.name);
    std::memcpy(t->data->data(), raw.data + e.offset, e.bytes);
    t->has_exact = false;
  }

  std::set<std::string> frozen;
  for (const json& name : h.at("frozen")) frozen.insert(name.get<std::string>());
  for (const auto& [name, t] : reg.items()) t->requires_grad = !frozen.count(name);

  const json& flags = h.at("flags");
  model.lm_pretrained = flags.at("lm_pretrained").get<bool>();
  model.base_pretrained = flags.at("base_pretrained").get<bool>();
}

CheckpointInfo read_checkpoint_info(const std::string& path) {
  RawCheckpoint raw = read_raw(path);
  const json& h = raw.header;
  CheckpointInfo info;
  info.format_version = h.at("format_version").get<int>();
  info.config_digest = h.at("config_digest").get<u64>();
  for (const json& name : h.at("modalities"))
    info.modalities.push_back(modality_from_name(name.get<std::string>()));
  const json& flags = h.at("flags");
  info.lm_pretrained = flags.at("lm_pretrained").get<bool>();
  info.base_pretrained = flags.at("base_pretrained").get<bool>();
  for (const json& t : h.at("tensors"))
    info.tensor_names.push_back(t.at("name").get<std::string>());
  for (const json& name : h.at("frozen")) info.frozen.push_back(name.get<std::string>());
  return info;
}

}  // namespace ralign
