#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "mxe/text.hpp"

using namespace mxe;
namespace fs = std::filesystem;

TEST_CASE("tokenizer lowercases and splits on punctuation and whitespace") {
  REQUIRE(tokenize("Hello, World! 123") == std::vector<std::string>{"hello", "world", "123"});
  REQUIRE(tokenize("a-b  c\t d") == std::vector<std::string>{"a", "b", "c", "d"});
  REQUIRE(tokenize("...!?") == std::vector<std::string>{});
  REQUIRE(tokenize("") == std::vector<std::string>{});
  REQUIRE(tokenize("caf\xc3\xa9 time") == std::vector<std::string>{"caf\xc3\xa9", "time"});
  REQUIRE(tokenize("<pad>") == std::vector<std::string>{"pad"});  // markup cannot alias reserved rows
}

TEST_CASE("vocabulary orders by frequency then lexicographically") {
  std::vector<std::string> corpus{"the cat sat", "the cat ran", "a cat"};
  auto v = build_vocabulary(corpus, 1, 100);
  // counts: cat 3, the 2, a/ran/sat 1 each (ties resolved lexicographically)
  REQUIRE(v.tokens == std::vector<std::string>{"<pad>", "<cls>", "<unk>", "cat", "the", "a",
                                               "ran", "sat"});
  REQUIRE(v.id_of("cat") == 3);
  REQUIRE(v.id_of("missing") == Vocabulary::kUnk);
  REQUIRE(v.size() == 8);

  auto freq2 = build_vocabulary(corpus, 2, 100);
  REQUIRE(freq2.tokens == std::vector<std::string>{"<pad>", "<cls>", "<unk>", "cat", "the"});

  auto capped = build_vocabulary(corpus, 1, 4);
  REQUIRE(capped.tokens == std::vector<std::string>{"<pad>", "<cls>", "<unk>", "cat"});

  REQUIRE_THROWS_AS(build_vocabulary(corpus, 0, 100), std::invalid_argument);
  REQUIRE_THROWS_AS(build_vocabulary(corpus, 1, 3), std::invalid_argument);
}

TEST_CASE("reserved ids are pinned") {
  REQUIRE(Vocabulary::kPad == 0);
  REQUIRE(Vocabulary::kCls == 1);
  REQUIRE(Vocabulary::kUnk == 2);
  auto v = build_vocabulary({"x"}, 1, 10);
  REQUIRE(v.id_of("<pad>") == 0);
  REQUIRE(v.id_of("<cls>") == 1);
  REQUIRE(v.id_of("<unk>") == 2);
}

TEST_CASE("encode_text produces fixed-length CLS-first sequences") {
  auto v = build_vocabulary({"alpha beta gamma"}, 1, 100);
  auto seq = encode_text(v, "Beta alpha zzz", 6);
  REQUIRE(seq.ids.size() == 6);
  REQUIRE(seq.ids[0] == Vocabulary::kCls);
  REQUIRE(seq.ids[1] == v.id_of("beta"));
  REQUIRE(seq.ids[2] == v.id_of("alpha"));
  REQUIRE(seq.ids[3] == Vocabulary::kUnk);
  REQUIRE(seq.ids[4] == Vocabulary::kPad);
  REQUIRE(seq.ids[5] == Vocabulary::kPad);
  REQUIRE(seq.attn_len == 4);

  auto truncated = encode_text(v, "alpha beta gamma alpha beta", 4);
  REQUIRE(truncated.ids.size() == 4);
  REQUIRE(truncated.attn_len == 4);
  REQUIRE(truncated.ids == std::vector<int32_t>{Vocabulary::kCls, v.id_of("alpha"),
                                                v.id_of("beta"), v.id_of("gamma")});

  auto empty = encode_text(v, " ... ", 4);
  REQUIRE(empty.attn_len == 1);
  REQUIRE(empty.ids == std::vector<int32_t>{Vocabulary::kCls, Vocabulary::kPad, Vocabulary::kPad,
                                            Vocabulary::kPad});

  REQUIRE_THROWS_AS(encode_text(v, "x", 1), std::invalid_argument);
}

TEST_CASE("vocabulary save/load round trip") {
  auto v = build_vocabulary({"the cat sat on the mat"}, 1, 100);
  auto path = (fs::temp_directory_path() / "mxe_vocab_test.tsv").string();
  save_vocabulary(path, v);
  auto loaded = load_vocabulary(path);
  REQUIRE(loaded.tokens == v.tokens);
  REQUIRE(loaded.id_of("cat") == v.id_of("cat"));

  std::ofstream bad(path);
  bad << "0\t<pad>\n1\twrong\n2\t<unk>\n";
  bad.close();
  REQUIRE_THROWS_AS(load_vocabulary(path), std::invalid_argument);
  fs::remove(path);
}
