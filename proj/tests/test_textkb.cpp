#include <doctest.h>

#include <algorithm>
#include <string>

#include <nlohmann/json.hpp>

#include "kcdp/io_util.hpp"
#include "kcdp/synthcorpus.hpp"
#include "kcdp/textkb.hpp"

using namespace kcdp;

namespace {

TextEncoder small_encoder() { return TextEncoder({"man", "woman", "hugging", "is", "happy", "dog"}, 9); }

RowVector row_of(const TextEncoder& enc, const std::string& w) {
  return enc.table().value.row(enc.token_id(w));
}

}  // namespace

TEST_SUITE("textkb") {

TEST_CASE("parse_triples examples") {
  CHECK(parse_triples("a man is hugging a woman") == std::vector<KnowledgeTriple>{{"man", "hugging", "woman"}});
  CHECK(parse_triples("").empty());
  CHECK(parse_triples("a dog growls at a stranger") ==
        std::vector<KnowledgeTriple>{{"dog", "growls at", "stranger"}});
  CHECK(parse_triples("a girl is cheerful") == std::vector<KnowledgeTriple>{{"girl", "is", "cheerful"}});
}

TEST_CASE("golden caption corpus parses exactly") {
  const auto golden = nlohmann::json::parse(io::read_file(KCDP_GOLDEN_DIR "/captions.json"));
  REQUIRE(golden.size() == 30);
  int matched = 0;
  for (const auto& entry : golden) {
    std::vector<KnowledgeTriple> expected;
    for (const auto& t : entry["triples"]) expected.push_back({t[0], t[1], t[2]});
    const auto got = parse_triples(entry["caption"].get<std::string>());
    CHECK_MESSAGE(got == expected, entry["caption"].get<std::string>());
    matched += got == expected;
  }
  CHECK(matched == 30);
}

TEST_CASE("parse_triples is deterministic and total on junk") {
  for (const char* s : {"   ", "!!!", "is is is", "a", "a man", "the the a an", "a man is", "a dog at a cat"}) {
    CHECK(parse_triples(s) == parse_triples(s));
    CHECK(parse_triples(s).empty());
  }
}

TEST_CASE("tokenize lowercases and strips punctuation") {
  CHECK(tokenize("A Man, is HUGGING!") == std::vector<std::string>{"a", "man", "is", "hugging"});
  CHECK(tokenize("").empty());
}

TEST_CASE("encode_text pooling") {
  const TextEncoder enc = small_encoder();
  CHECK(enc.encode("man").pooled.isApprox(row_of(enc, "man")));
  CHECK(enc.encode("man man").pooled.isApprox(row_of(enc, "man")));
  const RowVector mean = 0.5 * (row_of(enc, "man") + row_of(enc, "woman"));
  CHECK((enc.encode("man woman").pooled - mean).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(enc.encode("").pooled.isZero());
}

TEST_CASE("OOV tokens map to the OOV row") {
  const TextEncoder enc = small_encoder();
  CHECK(enc.token_id("zebra") == enc.oov_id());
  CHECK(enc.encode("zebra").pooled.isApprox(enc.table().value.row(enc.oov_id())));
}

TEST_CASE("vocabulary covers the grammar, the labels and OOV") {
  const TextEncoder enc = TextEncoder::for_labels(default_emotion_names(), 0);
  CHECK(enc.vocabulary().front() == "<oov>");
  for (const auto& w : caption_vocabulary()) CHECK(enc.token_id(w) != enc.oov_id());
  for (const auto& w : default_emotion_names()) CHECK(enc.token_id(w) != enc.oov_id());
  for (const char* w : {"photo", "of", "an", "the"}) CHECK(enc.token_id(w) != enc.oov_id());
  CHECK(enc.table().value.cols() == kTextDim);
}

TEST_CASE("text prior 0 reproduces the plain table") {
  const TextEncoder a = TextEncoder::for_labels(default_emotion_names(), 3, 0.0);
  const std::vector<std::string> words(a.vocabulary().begin() + 1, a.vocabulary().end());
  const TextEncoder b(words, 3);
  CHECK(a.table().value == b.table().value);
}

TEST_CASE("encode_knowledge shapes and the triple token") {
  const TextEncoder enc = TextEncoder::for_labels(default_emotion_names(), 1);
  SUBCASE("zero triples") {
    const auto k = encode_knowledge("nothing to see", {}, enc);
    CHECK(k.triple_token.isZero());
    const Matrix seq = k.sequence();
    CHECK(seq.rows() == kKnowledgeRows);
    CHECK(seq.row(kCaptionTokens).isZero());
  }
  SUBCASE("one triple") {
    const KnowledgeTriple t{"man", "hugging", "woman"};
    const auto k = encode_knowledge("a man is hugging a woman", {t}, enc);
    CHECK(k.triple_token.isApprox(enc.encode("man hugging woman").pooled));
  }
  SUBCASE("two triples sum, in either order") {
    const KnowledgeTriple t1{"dog", "growls at", "stranger"};
    const KnowledgeTriple t2{"girl", "is", "cheerful"};
    const auto k = encode_knowledge("x", {t1, t2}, enc);
    const RowVector sum = enc.encode(t1.render()).pooled + enc.encode(t2.render()).pooled;
    CHECK((k.triple_token - sum).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(encode_knowledge("x", {t2, t1}, enc).triple_token.isApprox(k.triple_token));
  }
  SUBCASE("caption rows are padded and truncated to 16") {
    std::string longcap;
    for (int i = 0; i < 20; ++i) longcap += "man ";
    for (const char* cap : {"", "man", "a man is hugging a woman", longcap.c_str()}) {
      const auto k = encode_knowledge(cap, parse_triples(cap), enc);
      CHECK(k.sequence().rows() == kKnowledgeRows);
      const auto n = std::min<std::size_t>(tokenize(cap).size(), kCaptionTokens);
      for (Eigen::Index r = static_cast<Eigen::Index>(n); r < kCaptionTokens; ++r) CHECK(k.caption_tokens.row(r).isZero());
    }
  }
}

TEST_CASE("sequence is the row concatenation of c and t") {
  const TextEncoder enc = TextEncoder::for_labels(default_emotion_names(), 2);
  const auto k = encode_knowledge("a man is hugging a woman", parse_triples("a man is hugging a woman"), enc);
  const Matrix seq = k.sequence();
  CHECK(seq.topRows(kCaptionTokens) == k.caption_tokens);
  CHECK(seq.row(kCaptionTokens) == k.triple_token);
}

TEST_CASE("condition zeroes the documented rows") {
  const TextEncoder enc = TextEncoder::for_labels(default_emotion_names(), 2);
  const std::string cap = "a boss is scolding a worker";
  auto k = encode_knowledge(cap, parse_triples(cap), enc);
  auto c_only = k;
  apply_condition(c_only, Condition::kCaptionOnly);
  CHECK(c_only.triple_token.isZero());
  CHECK(c_only.caption_tokens == k.caption_tokens);
  auto t_only = k;
  apply_condition(t_only, Condition::kTriplesOnly);
  CHECK(t_only.caption_tokens.isZero());
  CHECK(t_only.triple_token == k.triple_token);
}

TEST_CASE("knowledge_on_tape matches encode_knowledge") {
  TextEncoder enc = TextEncoder::for_labels(default_emotion_names(), 4);
  for (const std::string cap : {"a boss is scolding a worker", "a boy is holding a balloon and a girl is cheerful", ""}) {
    const auto triples = parse_triples(cap);
    for (Condition c : {Condition::kBoth, Condition::kCaptionOnly, Condition::kTriplesOnly}) {
      auto k = encode_knowledge(cap, triples, enc);
      apply_condition(k, c);
      Tape tape(false);
      const Matrix got = knowledge_on_tape(tape, enc, tokenize_knowledge(cap, triples, enc), c).value();
      CHECK((got - k.sequence()).cwiseAbs().maxCoeff() < 1e-14);
    }
  }
}

TEST_CASE("condition strings round-trip") {
  for (Condition c : {Condition::kBoth, Condition::kCaptionOnly, Condition::kTriplesOnly}) {
    CHECK(condition_from_string(to_string(c)) == c);
  }
  CHECK_THROWS(condition_from_string("neither"));
}

}
