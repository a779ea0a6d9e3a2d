#pragma once

#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace stclip {

// Lowercases and splits on every character that is not a letter or digit.
std::vector<std::string> tokenize_words(std::string_view text);

// Word-level vocabulary. Ids 0..3 are reserved for the special tokens.
class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0, kBos = 1, kEos = 2, kUnk = 3;

  Vocabulary();
  // Specials followed by every distinct word of `texts` in sorted order.
  static Vocabulary build(std::span<const std::string> texts);
  static Vocabulary from_words(std::vector<std::string> words);

  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }
  bool contains(std::string_view word) const;
  std::size_t id(std::string_view word) const;
  // [BOS, words..., EOS]; unknown words map to UNK.
  std::vector<std::size_t> encode(std::string_view text) const;
  bool fully_known(std::string_view text) const;

  // One word per line.
  std::string serialize() const;
  static Vocabulary deserialize(std::string_view text);

 private:
  void assign(std::vector<std::string> words);
  std::vector<std::string> words_;
  std::map<std::string, std::size_t, std::less<>> ids_;
};

}  // namespace stclip
