#include "pplug/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <stdexcept>

namespace pplug {

namespace {
const char* kSpecials[4] = {"<pad>", "<bos>", "<eos>", "<unk>"};
}

std::vector<std::string> Tokenizer::split(const std::string& text, bool lowercase) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  };
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(lowercase ? static_cast<char>(std::tolower(c)) : static_cast<char>(c));
    } else if (std::isspace(c)) {
      flush();
    } else {
      flush();
      out.emplace_back(1, static_cast<char>(c));
    }
  }
  flush();
  return out;
}

Tokenizer Tokenizer::build(const std::vector<std::string>& corpus, int vocab_size,
                           bool lowercase) {
  if (vocab_size <= 4)
    throw std::invalid_argument("build_tokenizer: vocab_size must exceed the 4 specials");
  std::map<std::string, long long> freq;
  bool any = false;
  for (const auto& line : corpus) {
    for (auto& tok : split(line, lowercase)) {
      ++freq[tok];
      any = true;
    }
  }
  if (!any) throw std::runtime_error("build_tokenizer: empty corpus");

  std::vector<std::pair<std::string, long long>> ranked(freq.begin(), freq.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Tokenizer t;
  t.lowercase_ = lowercase;
  for (const char* s : kSpecials) t.vocab_.emplace_back(s);
  for (const auto& [tok, n] : ranked) {
    (void)n;
    if (static_cast<int>(t.vocab_.size()) >= vocab_size) break;
    t.vocab_.push_back(tok);
  }
  for (int i = 0; i < static_cast<int>(t.vocab_.size()); ++i) t.index_[t.vocab_[i]] = i;
  return t;
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
  std::vector<int> ids;
  for (auto& tok : split(text, lowercase_)) ids.push_back(id_of(tok));
  return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id == kPad || id == kBos || id == kEos) continue;
    if (!out.empty()) out.push_back(' ');
    out += token(id);
  }
  return out;
}

int Tokenizer::id_of(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Tokenizer::token(int id) const {
  if (id < 0 || id >= static_cast<int>(vocab_.size()))
    throw std::out_of_range("Tokenizer::token: id out of range");
  return vocab_[static_cast<std::size_t>(id)];
}

void Tokenizer::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("Tokenizer::save: cannot open " + path);
  for (const auto& tok : vocab_) os << tok << '\n';
}

Tokenizer Tokenizer::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("Tokenizer::load: cannot open " + path);
  Tokenizer t;
  std::string line;
  while (std::getline(is, line)) t.vocab_.push_back(line);
  if (t.vocab_.size() < 4 || t.vocab_[0] != kSpecials[0])
    throw std::runtime_error("Tokenizer::load: malformed vocabulary file " + path);
  for (int i = 0; i < static_cast<int>(t.vocab_.size()); ++i) t.index_[t.vocab_[i]] = i;
  return t;
}

}  // namespace pplug
