#include "ralign/config.hpp"

#include <cstdlib>
#include <functional>
#include <fstream>
#include <map>
#include <sstream>

namespace ralign {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

[[noreturn]] void bad_value(const std::string& key, int line, const std::string& what) {
  throw ConfigError("config key '" + key + "' (line " + std::to_string(line) +
                    "): " + what);
}

long long parse_int(const std::string& key, int line, const std::string& v) {
  char* end = nullptr;
  errno = 0;
  long long x = std::strtoll(v.c_str(), &end, 10);
  if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE)
    bad_value(key, line, "expected an integer, got '" + v + "'");
  return x;
}

double parse_double(const std::string& key, int line, const std::string& v) {
  char* end = nullptr;
  errno = 0;
  double x = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE)
    bad_value(key, line, "expected a number, got '" + v + "'");
  return x;
}

bool parse_bool(const std::string& key, int line, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, line, "expected true/false, got '" + v + "'");
}

std::vector<Modality> parse_modalities(const std::string& key, int line,
                                       const std::string& v) {
  std::vector<Modality> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) bad_value(key, line, "empty modality name in list");
    try {
      out.push_back(modality_from_name(item));
    } catch (const std::exception&) {
      bad_value(key, line, "unknown modality '" + item + "'");
    }
  }
  return out;
}

// One mutation of the config per key; built once per parse so the handlers
// can close over the line number via reference.
using Setter = std::function<void(RunConfig&, const std::string& key, int line,
                                  const std::string& value)>;

const std::map<std::string, Setter>& key_table() {
  static const std::map<std::string, Setter> table = {
      {"seed",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         long long x = parse_int(k, l, v);
         if (x < 0) bad_value(k, l, "seed must be non-negative");
         c.seed = static_cast<u64>(x);
       }},
      // --- optimization stage ---
      {"peak_lr",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.train.peak_lr = parse_double(k, l, v);
       }},
      {"min_lr",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.train.min_lr = parse_double(k, l, v);
       }},
      {"warmup_steps",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.train.warmup_steps = static_cast<int>(parse_int(k, l, v));
       }},
      {"beta1",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.train.beta1 = parse_double(k, l, v);
       }},
      {"beta2",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.train.beta2 = parse_double(k, l, v);
       }},
      {"eps",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.train.eps = parse_double(k, l, v);
       }},
      {"weight_decay",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.train.weight_decay = parse_double(k, l, v);
       }},
      {"clip_norm",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.train.clip_norm = parse_double(k, l, v);
       }},
      {"total_steps",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.train.total_steps = static_cast<int>(parse_int(k, l, v));
       }},
      {"batch_size",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.train.batch_size = static_cast<int>(parse_int(k, l, v));
       }},
      {"lambda",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.train.lambda = parse_double(k, l, v);
       }},
      {"modality_order",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.train.modality_order = parse_modalities(k, l, v);
       }},
      {"use_pafe",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.train.use_pafe = parse_bool(k, l, v);
       }},
      // --- dataset generation ---
      {"train_per_modality",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.train_per_modality = static_cast<int>(parse_int(k, l, v));
       }},
      {"test_per_modality",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.test_per_modality = static_cast<int>(parse_int(k, l, v));
       }},
      // --- architecture ---
      {"image_size",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.model.image_enc.image_size = static_cast<int>(parse_int(k, l, v));
       }},
      {"patch",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.model.image_enc.patch = static_cast<int>(parse_int(k, l, v));
       }},
      {"image_layers",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.model.image_enc.layers = static_cast<int>(parse_int(k, l, v));
       }},
      {"image_heads",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.model.image_enc.heads = static_cast<int>(parse_int(k, l, v));
       }},
      {"point_groups",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.model.point_enc.groups = static_cast<int>(parse_int(k, l, v));
       }},
      {"point_group_size",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.model.point_enc.group_size = static_cast<int>(parse_int(k, l, v));
       }},
      {"point_layers",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.model.point_enc.layers = static_cast<int>(parse_int(k, l, v));
       }},
      {"point_heads",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.model.point_enc.heads = static_cast<int>(parse_int(k, l, v));
       }},
      {"enc_d",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         int d = static_cast<int>(parse_int(k, l, v));
         c.model.image_enc.d = d;
         c.model.point_enc.d = d;
         c.model.qformer.d = d;
         c.model.qformer.enc_dim = d;
       }},
      {"qformer_layers",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.model.qformer.layers = static_cast<int>(parse_int(k, l, v));
       }},
      {"qformer_heads",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.model.qformer.heads = static_cast<int>(parse_int(k, l, v));
       }},
      {"n_queries",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.model.qformer.n_queries = static_cast<int>(parse_int(k, l, v));
       }},
      {"d_itc",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.model.qformer.d_itc = static_cast<int>(parse_int(k, l, v));
       }},
      {"max_text",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.model.qformer.max_text = static_cast<int>(parse_int(k, l, v));
       }},
      {"lm_d",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.model.lm.d = static_cast<int>(parse_int(k, l, v));
       }},
      {"lm_layers",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.model.lm.layers = static_cast<int>(parse_int(k, l, v));
       }},
      {"lm_heads",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.model.lm.heads = static_cast<int>(parse_int(k, l, v));
       }},
      {"lm_max_len",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.model.lm.max_len = static_cast<int>(parse_int(k, l, v));
       }},
      {"lora_r",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.model.lora_r = static_cast<int>(parse_int(k, l, v));
       }},
      {"lora_alpha",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.model.lora_alpha = parse_double(k, l, v);
       }},
      {"pafe_hidden",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.model.pafe_hidden = static_cast<int>(parse_int(k, l, v));
       }},
      // --- evaluation and mining ---
      {"split",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         if (v != "train" && v != "test")
           bad_value(k, l, "expected 'train' or 'test', got '" + v + "'");
         c.split = v;
       }},
      {"mine_split",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         if (v != "train" && v != "test")
           bad_value(k, l, "expected 'train' or 'test', got '" + v + "'");
         c.mine_split = v;
       }},
      {"tau",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.tau = parse_double(k, l, v);
       }},
      {"min_area_fraction",
       [](RunConfig& c, const std::string& k, int l, const std::string& v) {
         c.min_area_fraction = parse_double(k, l, v);
       }},
  };
  return table;
}

}  // namespace

void RunConfig::validate() const {
  train.validate();
  if (train_per_modality < 1)
    throw ConfigError("train_per_modality must be at least 1");
  if (test_per_modality < 1)
    throw ConfigError("test_per_modality must be at least 1");
  if (model.qformer.d != model.qformer.enc_dim ||
      model.image_enc.d != model.qformer.d || model.point_enc.d != model.qformer.d)
    throw ConfigError("encoder and query-transformer widths must agree (enc_d)");
  if (model.image_enc.image_size <= 0 || model.image_enc.patch <= 0 ||
      model.image_enc.image_size % model.image_enc.patch != 0)
    throw ConfigError("image_size must be a positive multiple of patch");
  if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in (0, 1]");
  if (!(min_area_fraction >= 0.0 && min_area_fraction < 1.0))
    throw ConfigError("min_area_fraction must lie in [0, 1)");
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::map<std::string, int> seen;  // key -> first line, to reject duplicates
  std::istringstream in(text);
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    size_t hash = raw.find('#');
    if (hash != std::string::npos) raw.erase(hash);
    std::string s = trim(raw);
    if (s.empty()) continue;
    size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line) +
                        ": expected 'key = value', got '" + s + "'");
    std::string key = trim(s.substr(0, eq));
    std::string value = trim(s.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(line) + ": empty key");
    auto it = key_table().find(key);
    if (it == key_table().end())
      throw ConfigError("unknown config key '" + key + "' (line " +
                        std::to_string(line) + ")");
    auto ins = seen.emplace(key, line);
    if (!ins.second)
      throw ConfigError("config key '" + key + "' assigned twice (lines " +
                        std::to_string(ins.first->second) + " and " +
                        std::to_string(line) + ")");
    it->second(cfg, key, line, value);
  }
  cfg.train.seed = cfg.seed;
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string serialize_run_config(const RunConfig& cfg) {
  std::ostringstream o;
  o.precision(17);
  o << "seed = " << cfg.seed << "\n";
  o << "peak_lr = " << cfg.train.peak_lr << "\n";
  o << "min_lr = " << cfg.train.min_lr << "\n";
  o << "warmup_steps = " << cfg.train.warmup_steps << "\n";
  o << "beta1 = " << cfg.train.beta1 << "\n";
  o << "beta2 = " << cfg.train.beta2 << "\n";
  o << "eps = " << cfg.train.eps << "\n";
  o << "weight_decay = " << cfg.train.weight_decay << "\n";
  o << "clip_norm = " << cfg.train.clip_norm << "\n";
  o << "total_steps = " << cfg.train.total_steps << "\n";
  o << "batch_size = " << cfg.train.batch_size << "\n";
  o << "lambda = " << cfg.train.lambda << "\n";
  if (!cfg.train.modality_order.empty()) {
    o << "modality_order = ";
    for (size_t i = 0; i < cfg.train.modality_order.size(); ++i)
      o << (i ? "," : "") << modality_name(cfg.train.modality_order[i]);
    o << "\n";
  }
  o << "use_pafe = " << (cfg.train.use_pafe ? "true" : "false") << "\n";
  o << "train_per_modality = " << cfg.train_per_modality << "\n";
  o << "test_per_modality = " << cfg.test_per_modality << "\n";
  o << "image_size = " << cfg.model.image_enc.image_size << "\n";
  o << "patch = " << cfg.model.image_enc.patch << "\n";
  o << "image_layers = " << cfg.model.image_enc.layers << "\n";
  o << "image_heads = " << cfg.model.image_enc.heads << "\n";
  o << "point_groups = " << cfg.model.point_enc.groups << "\n";
  o << "point_group_size = " << cfg.model.point_enc.group_size << "\n";
  o << "point_layers = " << cfg.model.point_enc.layers << "\n";
  o << "point_heads = " << cfg.model.point_enc.heads << "\n";
  o << "enc_d = " << cfg.model.qformer.d << "\n";
  o << "qformer_layers = " << cfg.model.qformer.layers << "\n";
  o << "qformer_heads = " << cfg.model.qformer.heads << "\n";
  o << "n_queries = " << cfg.model.qformer.n_queries << "\n";
  o << "d_itc = " << cfg.model.qformer.d_itc << "\n";
  o << "max_text = " << cfg.model.qformer.max_text << "\n";
  o << "lm_d = " << cfg.model.lm.d << "\n";
  o << "lm_layers = " << cfg.model.lm.layers << "\n";
  o << "lm_heads = " << cfg.model.lm.heads << "\n";
  o << "lm_max_len = " << cfg.model.lm.max_len << "\n";
  o << "lora_r = " << cfg.model.lora_r << "\n";
  o << "lora_alpha = " << cfg.model.lora_alpha << "\n";
  o << "pafe_hidden = " << cfg.model.pafe_hidden << "\n";
  o << "split = " << cfg.split << "\n";
  o << "mine_split = " << cfg.mine_split << "\n";
  o << "tau = " << cfg.tau << "\n";
  o << "min_area_fraction = " << cfg.min_area_fraction << "\n";
  return o.str();
}

}  // namespace ralign
