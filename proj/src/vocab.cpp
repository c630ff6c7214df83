#include "ralign/vocab.hpp"

#include <stdexcept>

namespace ralign {

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (size_t i = 0; i < tokens_.size(); ++i) {
    if (index_.count(tokens_[i]))
      throw std::runtime_error("vocab: duplicate token '" + tokens_[i] + "'");
    index_[tokens_[i]] = static_cast<int>(i);
  }
  if (tokens_.size() < 3 || tokens_[0] != "<pad>" || tokens_[1] != "<bos>" ||
      tokens_[2] != "<eos>")
    throw std::runtime_error("vocab: first three tokens must be <pad>, <bos>, <eos>");
}

Vocab Vocab::canonical() {
  return Vocab({"<pad>", "<bos>", "<eos>", "a",      "photo",  "point",    "cloud",
                "of",    "and",   "above", "below",  "beside", "red",      "green",
                "blue",  "yellow", "circle", "square", "triangle", "sphere", "cube",
                "cone",  "torus"});
}

Vocab Vocab::load(const std::string& path) {
  std::string text = read_text_file(path);
  std::vector<std::string> toks;
  std::string cur;
  for (char c : text) {
    if (c == '\n') {
      if (!cur.empty()) toks.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) toks.push_back(cur);
  return Vocab(std::move(toks));
}

void Vocab::save(const std::string& path) const {
  std::string out;
  for (const std::string& t : tokens_) {
    out += t;
    out += '\n';
  }
  write_text_file(path, out);
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size())
    throw std::runtime_error("vocab: token id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<size_t>(id)];
}

int Vocab::id(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end())
    throw std::runtime_error("vocab: out-of-vocabulary token '" + token + "'");
  return it->second;
}

std::vector<int> Vocab::encode(const std::string& text, bool add_bos, bool add_eos) const {
  std::vector<int> out;
  if (add_bos) out.push_back(kBos);
  for (const std::string& w : split_ws(text)) out.push_back(id(w));
  if (add_eos) out.push_back(kEos);
  return out;
}

std::string Vocab::decode(const std::vector<int>& ids, bool skip_special) const {
  std::string out;
  for (int id : ids) {
    if (skip_special && (id == kPad || id == kBos || id == kEos)) continue;
    if (!out.empty()) out += ' ';
    out += token(id);
  }
  return out;
}

}  // namespace ralign
