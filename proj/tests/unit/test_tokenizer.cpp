#include <doctest.h>

#include "lenspsych/errors.hpp"
#include "lenspsych/synthetic.hpp"
#include "lenspsych/tokenizer.hpp"
#include "support/temp_dir.hpp"

using namespace lenspsych;

namespace {

std::vector<std::string> pieces(std::string_view text) {
  std::vector<std::string> out;
  for (const auto& s : pretokenize(text)) out.emplace_back(text.substr(s.begin, s.end - s.begin));
  return out;
}

}  // namespace

TEST_CASE("byte tokenizer maps bytes to ids") {
  const auto tok = Tokenizer::chars(0);
  const auto enc = tok.encode("ab c");
  CHECK(enc.ids == std::vector<TokenId>{97, 98, 32, 99});
  CHECK(enc.offsets[2] == CharSpan{2, 3});
  CHECK(tok.decode(enc.ids) == "ab c");
  CHECK(tok.bos_id() == 0);
}

TEST_CASE("pre-tokenizer follows the GPT-2 split") {
  CHECK(pieces("Hello world's 42!") == std::vector<std::string>{"Hello", " world", "'s", " 42", "!"});
  CHECK(pieces("a  b") == std::vector<std::string>{"a", " ", " b"});
  CHECK(pieces("they'll go") == std::vector<std::string>{"they", "'ll", " go"});
  CHECK(pieces("caf\xc3\xa9 ok") == std::vector<std::string>{"caf\xc3\xa9", " ok"});
}

TEST_CASE("learned BPE applies merges in rank order") {
  const std::vector<std::string> corpus = {"ab ab ab"};
  const auto tok = learn_bpe(corpus, 2);
  REQUIRE(tok.merges().size() == 2);
  CHECK(tok.merges()[0] == std::pair<std::string, std::string>{"a", "b"});
  CHECK(tok.merges()[1] == std::pair<std::string, std::string>{"\xc4\xa0", "ab"});  // "Ġ" + "ab"
  const auto enc = tok.encode("ab ab");
  CHECK(enc.ids == std::vector<TokenId>{256, 257});
  CHECK(enc.offsets == std::vector<CharSpan>{{0, 2}, {2, 5}});
  CHECK(tok.token_string(257) == "\xc4\xa0" "ab");
  CHECK(tok.bos_id() == 258);
}

TEST_CASE("BPE round-trips arbitrary text") {
  const auto corpus = synthetic_sentences(3, 100);
  const auto tok = learn_bpe(corpus, 80);
  for (const std::string text : {"The old dog slept.", "Zebra quux 123 \xe2\x80\x9cquoted\xe2\x80\x9d", "  spaced  "}) {
    const auto enc = tok.encode(text);
    CHECK(tok.decode(enc.ids) == text);
    std::size_t pos = 0;
    for (const auto& o : enc.offsets) {
      CHECK(o.begin == pos);
      pos = o.end;
    }
    CHECK(pos == text.size());
  }
}

TEST_CASE("tokenizer files round-trip") {
  test_support::TempDir dir;
  const auto tok = learn_bpe(synthetic_sentences(4, 50), 40);
  save_tokenizer(tok, dir.path());
  CHECK(std::filesystem::exists(dir.path() / "vocab.json"));
  CHECK(std::filesystem::exists(dir.path() / "merges.txt"));
  const auto back = load_tokenizer(dir.path());
  CHECK(back.vocab() == tok.vocab());
  CHECK(back.merges() == tok.merges());
  CHECK(back.bos_id() == tok.bos_id());
  CHECK(back.encode("The dog ran.").ids == tok.encode("The dog ran.").ids);

  test_support::TempDir chars_dir;
  save_tokenizer(Tokenizer::chars(0), chars_dir.path());
  CHECK(load_tokenizer(chars_dir.path()).kind() == TokenizerKind::chars);
}

TEST_CASE("non-dense vocabularies are rejected") {
  std::map<std::string, TokenId> vocab = {{"a", 0}, {"b", 2}};
  CHECK_THROWS_AS(Tokenizer::bpe(vocab, {}, false), DataError);
}

TEST_CASE("split_words keeps punctuation attached") {
  CHECK(split_words("  The dog, slept.\t") == std::vector<std::string>{"The", "dog,", "slept."});
}

TEST_CASE("word alignment by first non-space byte; lone spaces join the next word") {
  const std::string text = "The dog.";
  const std::vector<std::string> words = {"The", "dog."};
  const auto tok = Tokenizer::chars();
  const auto a = align_words(words, tok.encode(text).offsets, text);
  CHECK(a.spans == std::vector<TokenSpan>{{0, 3}, {3, 8}});
  const std::string padded = "The dog. ";
  CHECK(align_words(words, tok.encode(padded).offsets, padded).spans == std::vector<TokenSpan>{{0, 3}, {3, 8}});

  const auto bpe = learn_bpe(std::vector<std::string>{"The dog. The dog. The dog."}, 10);
  const auto enc = bpe.encode(text);
  const auto b = align_words(words, enc.offsets, text);
  CHECK(b.spans.front().begin == 0);
  CHECK(b.spans.back().end == enc.ids.size());
  CHECK(b.spans[0].end == b.spans[1].begin);
}

TEST_CASE("alignment errors") {
  const std::string text = "ab cd";
  const std::vector<CharSpan> straddle = {{0, 4}, {4, 5}};
  CHECK_THROWS_AS(align_words(std::vector<std::string>{"ab", "cd"}, straddle, text), DataError);
  const std::vector<CharSpan> ok = {{0, 2}, {2, 5}};
  CHECK_THROWS_AS(align_words(std::vector<std::string>{"ab", "cx"}, ok, text), DataError);
}
