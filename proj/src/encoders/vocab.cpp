#include "stclip/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include "stclip/errors.hpp"

namespace stclip {

std::vector<std::string> tokenize_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

Vocabulary::Vocabulary() { assign({}); }

void Vocabulary::assign(std::vector<std::string> words) {
  words_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
  for (auto& w : words)
    if (std::find(words_.begin(), words_.begin() + 4, w) == words_.begin() + 4)
      words_.push_back(std::move(w));
  ids_.clear();
  for (std::size_t i = 0; i < words_.size(); ++i)
    if (!ids_.emplace(words_[i], i).second)
      throw InputError("vocabulary: duplicate word '" + words_[i] + "'");
}

Vocabulary Vocabulary::from_words(std::vector<std::string> words) {
  Vocabulary v;
  v.assign(std::move(words));
  return v;
}

Vocabulary Vocabulary::build(std::span<const std::string> texts) {
  std::set<std::string> distinct;
  for (const auto& t : texts)
    for (auto& w : tokenize_words(t)) distinct.insert(std::move(w));
  return from_words({distinct.begin(), distinct.end()});
}

bool Vocabulary::contains(std::string_view word) const { return ids_.find(word) != ids_.end(); }

std::size_t Vocabulary::id(std::string_view word) const {
  auto it = ids_.find(word);
  return it == ids_.end() ? kUnk : it->second;
}

std::vector<std::size_t> Vocabulary::encode(std::string_view text) const {
  std::vector<std::size_t> ids{kBos};
  for (const auto& w : tokenize_words(text)) ids.push_back(id(w));
  ids.push_back(kEos);
  return ids;
}

bool Vocabulary::fully_known(std::string_view text) const {
  const auto words = tokenize_words(text);
  return !words.empty() &&
         std::all_of(words.begin(), words.end(), [&](const auto& w) { return contains(w); });
}

std::string Vocabulary::serialize() const {
  std::string out;
  for (std::size_t i = 4; i < words_.size(); ++i) {
    out += words_[i];
    out += '\n';
  }
  return out;
}

Vocabulary Vocabulary::deserialize(std::string_view text) {
  std::vector<std::string> words;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    if (end > start) words.emplace_back(text.substr(start, end - start));
    start = end + 1;
  }
  return from_words(std::move(words));
}

}  // namespace stclip
