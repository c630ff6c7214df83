#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "ralign/common.hpp"

namespace ralign {

// Closed-world tokenizer: whitespace-split words over a fixed vocabulary.
// Ids 0..2 are reserved for <pad>, <bos>, <eos>.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;

  // The full caption vocabulary of the synthetic world.
  static Vocab canonical();
  static Vocab load(const std::string& path);
  void save(const std::string& path) const;

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const;
  int id(const std::string& token) const;  // throws on out-of-vocabulary
  bool contains(const std::string& token) const { return index_.count(token) > 0; }

  std::vector<int> encode(const std::string& text, bool add_bos = false,
                          bool add_eos = false) const;
  std::string decode(const std::vector<int>& ids, bool skip_special = true) const;

 private:
  explicit Vocab(std::vector<std::string> tokens);
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace ralign
