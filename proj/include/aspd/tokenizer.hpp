#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace aspd {

/// Ids of the six structural marker tokens plus helpers.  The markers always
/// occupy the six highest ids of whatever vocabulary they are embedded in, in
/// the fixed order below, so a model checkpoint and the tokenizer agree on
/// them by construction.
struct SpecialTokens {
  int title_open = -1;    ///< <Title>
  int title_close = -1;   ///< </Title>
  int branch_open = -1;   ///< <Branch>
  int branch_close = -1;  ///< </Branch>
  int para_open = -1;     ///< <Para>
  int para_close = -1;    ///< </Para>

  static constexpr int kCount = 6;

  /// The six highest ids of a vocabulary of the given size.
  static SpecialTokens top_of(int vocab_size);

  bool contains(int id) const {
    return id >= title_open && id <= para_close;
  }

  /// Marker string for the i-th special (0 = <Title> ... 5 = </Para>).
  static std::string_view marker(int index);
};

/// Byte-level tokenizer: ids 0..255 are raw bytes, 256 is end-of-sequence,
/// and the six highest ids of the vocabulary are the structural markers.
/// Marker strings are recognized greedily during encoding and re-emitted
/// verbatim by decode, so encode/decode round-trips any text that does not
/// contain a literal marker substring by accident (and round-trips marker
/// substrings too, just as single tokens).
class ByteTokenizer {
 public:
  static constexpr int kMinVocab = 256 + 1 + SpecialTokens::kCount;

  /// vocab_size must be at least kMinVocab (263).  Ids above 256 and below
  /// the marker range are unused padding, which lets the tokenizer line up
  /// with model vocabularies of any size.
  explicit ByteTokenizer(int vocab_size = kMinVocab);

  int vocab_size() const { return vocab_size_; }
  int eos() const { return 256; }
  const SpecialTokens& specials() const { return specials_; }

  std::vector<int> encode(std::string_view text) const;
  std::string decode(std::span<const int> tokens) const;

  bool is_byte(int id) const { return id >= 0 && id < 256; }

 private:
  int vocab_size_;
  SpecialTokens specials_;
};

}  // namespace aspd
