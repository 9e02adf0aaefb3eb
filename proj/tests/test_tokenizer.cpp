#include <doctest.h>

#include <string>
#include <vector>

#include "aspd/errors.hpp"
#include "aspd/tokenizer.hpp"

using namespace aspd;

// ============================================================================
// Special token block
// ============================================================================

TEST_CASE("special tokens occupy the six highest ids in fixed order") {
  SpecialTokens sp = SpecialTokens::top_of(263);
  CHECK(sp.title_open == 257);
  CHECK(sp.title_close == 258);
  CHECK(sp.branch_open == 259);
  CHECK(sp.branch_close == 260);
  CHECK(sp.para_open == 261);
  CHECK(sp.para_close == 262);

  SpecialTokens wide = SpecialTokens::top_of(1000);
  CHECK(wide.title_open == 994);
  CHECK(wide.para_close == 999);
}

TEST_CASE("special token membership and marker strings") {
  SpecialTokens sp = SpecialTokens::top_of(263);
  CHECK(sp.contains(257));
  CHECK(sp.contains(262));
  CHECK_FALSE(sp.contains(256));
  CHECK_FALSE(sp.contains(0));

  CHECK(SpecialTokens::marker(0) == "<Title>");
  CHECK(SpecialTokens::marker(1) == "</Title>");
  CHECK(SpecialTokens::marker(2) == "<Branch>");
  CHECK(SpecialTokens::marker(3) == "</Branch>");
  CHECK(SpecialTokens::marker(4) == "<Para>");
  CHECK(SpecialTokens::marker(5) == "</Para>");
}

// ============================================================================
// Encoding
// ============================================================================

TEST_CASE("plain text encodes byte by byte") {
  ByteTokenizer tok;
  std::vector<int> ids = tok.encode("ab c");
  REQUIRE(ids.size() == 4);
  CHECK(ids[0] == 'a');
  CHECK(ids[1] == 'b');
  CHECK(ids[2] == ' ');
  CHECK(ids[3] == 'c');
}

TEST_CASE("markers encode as single ids inside text") {
  ByteTokenizer tok;
  const SpecialTokens& sp = tok.specials();
  std::vector<int> ids = tok.encode("x<Para>y");
  REQUIRE(ids.size() == 3);
  CHECK(ids[0] == 'x');
  CHECK(ids[1] == sp.para_open);
  CHECK(ids[2] == 'y');
}

TEST_CASE("near-miss marker text stays plain bytes") {
  ByteTokenizer tok;
  CHECK(tok.encode("<Tit").size() == 4);
  CHECK(tok.encode("<para>").size() == 6);   // markers are case sensitive
  CHECK(tok.encode("< Para>").size() == 7);
  CHECK(tok.encode("<<Para>").size() == 2);  // '<' then the marker
}

TEST_CASE("encode and decode round-trip marker-bearing text") {
  ByteTokenizer tok;
  std::string text =
      "intro<Title>T</Title><Para><Branch>T: body</Branch></Para>tail";
  CHECK(tok.decode(tok.encode(text)) == text);
}

// ============================================================================
// Decoding
// ============================================================================

TEST_CASE("decode renders markers and swallows the end token") {
  ByteTokenizer tok;
  const SpecialTokens& sp = tok.specials();
  std::vector<int> ids = {'h', 'i', sp.para_open, tok.eos(), sp.para_close};
  CHECK(tok.decode(ids) == "hi<Para></Para>");
}

TEST_CASE("decode rejects ids outside the vocabulary") {
  ByteTokenizer tok;
  std::vector<int> too_big{263};
  std::vector<int> negative{-1};
  CHECK_THROWS_AS(tok.decode(too_big), ValidationError);
  CHECK_THROWS_AS(tok.decode(negative), ValidationError);
}

TEST_CASE("vocabulary must leave room for bytes, end token and specials") {
  CHECK_THROWS_AS(ByteTokenizer(262), ConfigError);
  CHECK_NOTHROW(ByteTokenizer(263));
  ByteTokenizer wide(300);
  CHECK(wide.specials().title_open == 294);
  CHECK(wide.eos() == 256);
}
