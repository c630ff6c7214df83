#include "ralign/common.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace ralign {

u64 splitmix64(u64& state) {
  state += 0x9e3779b97f4a7c15ULL;
  u64 z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double Rng::uniform() {
  // 53 mantissa bits -> [0, 1)
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

int Rng::uniform_int(int lo, int hi) {
  if (hi < lo) throw std::invalid_argument("uniform_int: hi < lo");
  u64 span = static_cast<u64>(hi - lo) + 1;
  return lo + static_cast<int>(next_u64() % span);
}

double Rng::normal(double mu, double sigma) {
  if (has_spare_) {
    has_spare_ = false;
    return mu + sigma * spare_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 1e-300);
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * M_PI * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return mu + sigma * r * std::cos(theta);
}

Rng Rng::derive(u64 salt) const { return Rng(derive_seed(state_, salt)); }

u64 derive_seed(u64 base, u64 salt) {
  u64 buf[2] = {base, salt};
  return fnv1a64(buf, sizeof(buf));
}

u64 derive_seed(u64 base, const std::string& tag) {
  return derive_seed(base, fnv1a64(tag));
}

u64 fnv1a64(const void* data, size_t n, u64 seed) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  u64 h = seed;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

u64 fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

u64 digest_floats(const std::vector<float>& v) {
  return fnv1a64(v.data(), v.size() * sizeof(float));
}

u64 digest_combine(u64 a, u64 b) {
  u64 buf[2] = {a, b};
  return fnv1a64(buf, sizeof(buf));
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open file for reading: " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open file for writing: " + path);
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<char> read_binary_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw std::runtime_error("cannot open file for reading: " + path);
  std::streamsize n = in.tellg();
  in.seekg(0);
  std::vector<char> buf(static_cast<size_t>(n));
  if (n > 0) in.read(buf.data(), n);
  if (!in) throw std::runtime_error("read failed: " + path);
  return buf;
}

void write_binary_file(const std::string& path, const void* data, size_t n) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open file for writing: " + path);
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<std::string> split_ws(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

std::vector<std::string> split_on(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

}  // namespace ralign
