#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace pplug {

// Whitespace + punctuation tokenizer with a frequency-ranked vocabulary.
// Specials occupy fixed ids 0-3.
class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  Tokenizer() = default;

  // Lowercase split into alphanumeric runs and single punctuation characters.
  static std::vector<std::string> split(const std::string& text, bool lowercase = true);

  // Most-frequent `vocab_size - 4` tokens kept, ties broken lexicographically.
  static Tokenizer build(const std::vector<std::string>& corpus, int vocab_size,
                         bool lowercase = true);

  std::vector<int> encode(const std::string& text) const;
  std::string decode(const std::vector<int>& ids) const;

  int id_of(const std::string& token) const;  // kUnk when absent
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(vocab_.size()); }
  bool lowercase() const { return lowercase_; }

  // One token per line, line number = id.
  void save(const std::string& path) const;
  static Tokenizer load(const std::string& path);

 private:
  std::vector<std::string> vocab_;
  std::unordered_map<std::string, int> index_;
  bool lowercase_ = true;
};

}  // namespace pplug
