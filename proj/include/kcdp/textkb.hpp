#pragma once

// Knowledge triples and the conditioning sequence k = rows(c) ++ row(t).

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "kcdp/autograd.hpp"

namespace kcdp {

inline constexpr int kTextDim = 64;
inline constexpr int kCaptionTokens = 16;
inline constexpr int kKnowledgeRows = kCaptionTokens + 1;

struct KnowledgeTriple {
  std::string subject;
  std::string predicate;
  std::string object;

  /// "subject predicate object", the form fed to the text encoder.
  std::string render() const;
  friend bool operator==(const KnowledgeTriple&, const KnowledgeTriple&) = default;
};

/// Lowercase, punctuation stripped, whitespace split.
std::vector<std::string> tokenize(std::string_view text);

/// Rule grammar over clauses (split on "and" and , ; . ! ?):
///   R1  a X is V-ing a Y  -> (X, V-ing, Y)
///   R2  a X is ADJ        -> (X, is, ADJ)
///   R3  a X Vs at a Y     -> (X, Vs at, Y)
/// Articles a/an/the are stripped from arguments. Clauses that match no
/// rule contribute nothing.
std::vector<KnowledgeTriple> parse_triples(std::string_view caption);

/// Which parts of k are kept (the rest is zeroed).
enum class Condition { kCaptionOnly, kTriplesOnly, kBoth };

std::string_view to_string(Condition c);
Condition condition_from_string(std::string_view s);

struct TextEncoding {
  Matrix sequence;  // one row per token
  RowVector pooled;  // mean over rows; zero for empty text
};

/// Token ids of one sample's knowledge: caption ids padded with -1 to
/// kCaptionTokens, one id list per triple.
struct TokenizedKnowledge {
  std::vector<int> caption_ids;
  std::vector<std::vector<int>> triple_ids;
};

/// Frozen-by-default embedding-table text encoder. Token sequence rows are
/// the embedding rows of the tokens; padding rows are zero.
class TextEncoder {
 public:
  /// Vocabulary: <oov>, then `words` in order (duplicates dropped). Rows are
  /// N(0, 0.5²) noise; words with a group id >= 0 in `groups` also share
  /// that group's random direction scaled by `prior`.
  TextEncoder(const std::vector<std::string>& words, std::uint64_t seed, const std::vector<int>& groups = {},
              double prior = 0.0);

  /// Vocabulary covering the caption grammar, the given emotion names and the
  /// prompt template words. Caption words of one emotion and that emotion's
  /// name share a direction with weight `prior`, a small stand-in for the
  /// semantics a pretrained text encoder brings.
  static TextEncoder for_labels(const std::vector<std::string>& emotion_names, std::uint64_t seed,
                                double prior = 0.0);

  int token_id(std::string_view word) const;
  int oov_id() const { return 0; }
  const std::vector<std::string>& vocabulary() const { return vocab_; }
  Parameter& table() { return table_; }
  const Parameter& table() const { return table_; }

  TextEncoding encode(std::string_view text) const;
  std::vector<int> ids(std::string_view text) const;

 private:
  std::vector<std::string> vocab_;
  std::unordered_map<std::string, int> index_;
  Parameter table_;
};

/// The conditioning sequence k and its parts.
struct KnowledgeEmbedding {
  Matrix caption_tokens;  // kCaptionTokens × kTextDim
  RowVector triple_token;  // 1 × kTextDim

  /// rows(c) ++ row(t), (kCaptionTokens + 1) × kTextDim.
  Matrix sequence() const;
  /// Mean over the rows of k.
  RowVector pooled() const;
};

KnowledgeEmbedding encode_knowledge(std::string_view caption, const std::vector<KnowledgeTriple>& triples,
                                    const TextEncoder& encoder);

/// Zeroes the triple row (caption_only) or the caption rows (triples_only).
void apply_condition(KnowledgeEmbedding& k, Condition condition);

TokenizedKnowledge tokenize_knowledge(std::string_view caption, const std::vector<KnowledgeTriple>& triples,
                                      const TextEncoder& encoder);

/// Differentiable construction of k from token ids against the encoder
/// table, for runs where the text encoder is trainable.
Var knowledge_on_tape(Tape& tape, TextEncoder& encoder, const TokenizedKnowledge& tokens, Condition condition);

}  // namespace kcdp
