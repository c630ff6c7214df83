#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace ralign {

using u64 = std::uint64_t;
using u32 = std::uint32_t;

// Configuration problems (bad flags, malformed config files, invalid key values).
// The CLI maps these to exit code 2; everything else lands on exit code 1.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

u64 splitmix64(u64& state);

// Hand-rolled generator so streams are identical across standard libraries.
// splitmix64 state progression, Box-Muller normals with a cached spare.
class Rng {
 public:
  explicit Rng(u64 seed) : state_(seed ^ 0x9e3779b97f4a7c15ULL) {}

  u64 next_u64() { return splitmix64(state_); }
  // uniform in [0, 1)
  double uniform();
  double uniform(double lo, double hi);
  // inclusive bounds
  int uniform_int(int lo, int hi);
  double normal(double mu = 0.0, double sigma = 1.0);
  // independent child stream; deterministic in (current state, salt)
  Rng derive(u64 salt) const;

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
      int j = uniform_int(0, i);
      std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
    }
  }

 private:
  u64 state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Seed derivation for named sub-streams (per step, per sample, per modality).
u64 derive_seed(u64 base, u64 salt);
u64 derive_seed(u64 base, const std::string& tag);

u64 fnv1a64(const void* data, size_t n, u64 seed = 0xcbf29ce484222325ULL);
u64 fnv1a64(const std::string& s);
u64 digest_floats(const std::vector<float>& v);
u64 digest_combine(u64 a, u64 b);

std::string shape_str(const std::vector<int>& shape);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);
std::vector<char> read_binary_file(const std::string& path);
void write_binary_file(const std::string& path, const void* data, size_t n);

std::vector<std::string> split_ws(const std::string& s);
std::vector<std::string> split_on(const std::string& s, char sep);
std::string join(const std::vector<std::string>& parts, const std::string& sep);

}  // namespace ralign
