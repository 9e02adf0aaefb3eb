#include "aspd/tokenizer.hpp"

#include "aspd/errors.hpp"

namespace aspd {

namespace {
constexpr std::array<std::string_view, SpecialTokens::kCount> kMarkers = {
    "<Title>", "</Title>", "<Branch>", "</Branch>", "<Para>", "</Para>"};
}  // namespace

SpecialTokens SpecialTokens::top_of(int vocab_size) {
  if (vocab_size < kCount) {
    throw ConfigError("vocabulary too small to hold the six marker tokens");
  }
  SpecialTokens s;
  s.title_open = vocab_size - 6;
  s.title_close = vocab_size - 5;
  s.branch_open = vocab_size - 4;
  s.branch_close = vocab_size - 3;
  s.para_open = vocab_size - 2;
  s.para_close = vocab_size - 1;
  return s;
}

std::string_view SpecialTokens::marker(int index) {
  return kMarkers.at(static_cast<std::size_t>(index));
}

ByteTokenizer::ByteTokenizer(int vocab_size)
    : vocab_size_(vocab_size), specials_(SpecialTokens::top_of(vocab_size)) {
  if (vocab_size < kMinVocab) {
    throw ConfigError("byte tokenizer needs a vocabulary of at least " +
                      std::to_string(kMinVocab) + " ids, got " +
                      std::to_string(vocab_size));
  }
}

std::vector<int> ByteTokenizer::encode(std::string_view text) const {
  std::vector<int> out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    bool matched = false;
    if (text[i] == '<') {
      for (int m = 0; m < SpecialTokens::kCount; ++m) {
        std::string_view marker = kMarkers[static_cast<std::size_t>(m)];
        if (text.substr(i, marker.size()) == marker) {
          out.push_back(specials_.title_open + m);
          i += marker.size();
          matched = true;
          break;
        }
      }
    }
    if (!matched) {
      out.push_back(static_cast<unsigned char>(text[i]));
      ++i;
    }
  }
  return out;
}

std::string ByteTokenizer::decode(std::span<const int> tokens) const {
  std::string out;
  out.reserve(tokens.size());
  for (int id : tokens) {
    if (is_byte(id)) {
      out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    } else if (specials_.contains(id)) {
      out += kMarkers[static_cast<std::size_t>(id - specials_.title_open)];
    } else if (id == eos()) {
      // end-of-sequence carries no text
    } else {
      throw ValidationError("cannot decode token id " + std::to_string(id));
    }
  }
  return out;
}

}  // namespace aspd
