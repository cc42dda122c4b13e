#include "kcdp/textkb.hpp"

#include <algorithm>
#include <cctype>
#include <stdexcept>

#include "kcdp/rng.hpp"
#include "kcdp/synthcorpus.hpp"

namespace kcdp {

namespace {

bool is_article(const std::string& w) { return w == "a" || w == "an" || w == "the"; }

std::string join(const std::vector<std::string>& words, std::size_t begin, std::size_t end) {
  std::string out;
  for (std::size_t i = begin; i < end; ++i) {
    if (!out.empty()) out += ' ';
    out += words[i];
  }
  return out;
}

// Argument span [begin, end) with one leading article removed.
std::string argument(const std::vector<std::string>& w, std::size_t begin, std::size_t end) {
  if (begin < end && is_article(w[begin])) ++begin;
  return join(w, begin, end);
}

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() > suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::optional<KnowledgeTriple> parse_clause(const std::vector<std::string>& w) {
  const auto is_pos = std::find(w.begin(), w.end(), "is");
  if (is_pos != w.end()) {
    const auto i = static_cast<std::size_t>(is_pos - w.begin());
    std::string subject = argument(w, 0, i);
    if (subject.empty()) return std::nullopt;
    // R1: a X is V-ing a Y
    if (i + 3 < w.size() && ends_with(w[i + 1], "ing") && is_article(w[i + 2])) {
      std::string object = argument(w, i + 2, w.size());
      if (!object.empty()) return KnowledgeTriple{std::move(subject), w[i + 1], std::move(object)};
    }
    // R2: a X is ADJ
    if (i + 1 < w.size()) return KnowledgeTriple{std::move(subject), "is", join(w, i + 1, w.size())};
    return std::nullopt;
  }
  // R3: a X Vs at a Y
  const auto at_pos = std::find(w.begin(), w.end(), "at");
  if (at_pos == w.end()) return std::nullopt;
  const auto j = static_cast<std::size_t>(at_pos - w.begin());
  if (j < 2 || !ends_with(w[j - 1], "s")) return std::nullopt;
  std::string subject = argument(w, 0, j - 1);
  std::string object = argument(w, j + 1, w.size());
  if (subject.empty() || object.empty()) return std::nullopt;
  return KnowledgeTriple{std::move(subject), w[j - 1] + " at", std::move(object)};
}

}  // namespace

std::string KnowledgeTriple::render() const {
  std::string s = subject + " " + predicate;
  if (!object.empty()) s += " " + object;
  return s;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else if (std::isalnum(c)) {
      cur += static_cast<char>(std::tolower(c));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::vector<KnowledgeTriple> parse_triples(std::string_view caption) {
  std::vector<std::vector<std::string>> clauses(1);
  std::string word;
  auto end_word = [&] {
    for (auto& t : tokenize(word)) {
      if (t == "and") {
        clauses.emplace_back();
      } else {
        clauses.back().push_back(std::move(t));
      }
    }
    word.clear();
  };
  for (char ch : caption) {
    if (ch == ',' || ch == ';' || ch == '.' || ch == '!' || ch == '?') {
      end_word();
      clauses.emplace_back();
    } else if (std::isspace(static_cast<unsigned char>(ch))) {
      end_word();
    } else {
      word += ch;
    }
  }
  end_word();
  std::vector<KnowledgeTriple> triples;
  for (const auto& clause : clauses) {
    if (clause.empty()) continue;
    if (auto t = parse_clause(clause)) triples.push_back(std::move(*t));
  }
  return triples;
}

std::string_view to_string(Condition c) {
  switch (c) {
    case Condition::kCaptionOnly: return "caption_only";
    case Condition::kTriplesOnly: return "triples_only";
    case Condition::kBoth: return "both";
  }
  return "both";
}

Condition condition_from_string(std::string_view s) {
  if (s == "caption_only") return Condition::kCaptionOnly;
  if (s == "triples_only") return Condition::kTriplesOnly;
  if (s == "both") return Condition::kBoth;
  throw std::invalid_argument("unknown condition '" + std::string(s) + "'");
}

// ---- encoder --------------------------------------------------------------

TextEncoder::TextEncoder(const std::vector<std::string>& words, std::uint64_t seed, const std::vector<int>& groups,
                         double prior)
    : table_("text_encoder.embedding", "text_encoder", Matrix()) {
  if (!groups.empty() && groups.size() != words.size()) throw std::invalid_argument("TextEncoder: one group per word");
  vocab_.emplace_back("<oov>");
  index_.emplace("<oov>", 0);
  std::vector<int> row_group = {-1};
  for (std::size_t i = 0; i < words.size(); ++i) {
    const auto& w = words[i];
    if (index_.contains(w)) continue;
    index_.emplace(w, static_cast<int>(vocab_.size()));
    vocab_.push_back(w);
    row_group.push_back(groups.empty() ? -1 : groups[i]);
  }
  Rng rng(hash_combine(seed, 0x7E47));
  Matrix m(static_cast<Eigen::Index>(vocab_.size()), kTextDim);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = 0.5 * rng.normal();
  if (prior != 0.0) {
    const int n_groups = *std::max_element(row_group.begin(), row_group.end()) + 1;
    Matrix dirs(std::max(n_groups, 0), kTextDim);
    for (Eigen::Index i = 0; i < dirs.size(); ++i) dirs.data()[i] = 0.5 * rng.normal();
    for (std::size_t r = 0; r < row_group.size(); ++r) {
      if (row_group[r] >= 0) m.row(static_cast<Eigen::Index>(r)) += prior * dirs.row(row_group[r]);
    }
  }
  table_.value = std::move(m);
  table_.grad = Matrix::Zero(table_.value.rows(), table_.value.cols());
}

TextEncoder TextEncoder::for_labels(const std::vector<std::string>& emotion_names, std::uint64_t seed, double prior) {
  std::vector<std::string> words = caption_vocabulary();
  std::vector<int> groups;
  for (const auto& w : words) {
    const int e = word_emotion(w);
    groups.push_back(e < static_cast<int>(emotion_names.size()) ? e : -1);
  }
  for (std::size_t i = 0; i < emotion_names.size(); ++i) {
    words.push_back(emotion_names[i]);
    groups.push_back(static_cast<int>(i));
  }
  for (const char* w : {"an", "the", "photo", "of"}) {
    words.emplace_back(w);
    groups.push_back(-1);
  }
  return TextEncoder(words, seed, groups, prior);
}

int TextEncoder::token_id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? oov_id() : it->second;
}

std::vector<int> TextEncoder::ids(std::string_view text) const {
  std::vector<int> out;
  for (const auto& t : tokenize(text)) out.push_back(token_id(t));
  return out;
}

TextEncoding TextEncoder::encode(std::string_view text) const {
  const auto toks = ids(text);
  TextEncoding e;
  e.sequence.resize(static_cast<Eigen::Index>(toks.size()), kTextDim);
  for (std::size_t i = 0; i < toks.size(); ++i) e.sequence.row(static_cast<Eigen::Index>(i)) = table_.value.row(toks[i]);
  e.pooled = toks.empty() ? RowVector::Zero(kTextDim) : RowVector(e.sequence.colwise().mean());
  return e;
}

// ---- knowledge ------------------------------------------------------------

Matrix KnowledgeEmbedding::sequence() const {
  Matrix k(caption_tokens.rows() + 1, caption_tokens.cols());
  k.topRows(caption_tokens.rows()) = caption_tokens;
  k.row(caption_tokens.rows()) = triple_token;
  return k;
}

RowVector KnowledgeEmbedding::pooled() const { return sequence().colwise().mean(); }

KnowledgeEmbedding encode_knowledge(std::string_view caption, const std::vector<KnowledgeTriple>& triples,
                                    const TextEncoder& encoder) {
  KnowledgeEmbedding k;
  const TextEncoding c = encoder.encode(caption);
  k.caption_tokens = Matrix::Zero(kCaptionTokens, kTextDim);
  const Eigen::Index n = std::min<Eigen::Index>(c.sequence.rows(), kCaptionTokens);
  k.caption_tokens.topRows(n) = c.sequence.topRows(n);
  k.triple_token = RowVector::Zero(kTextDim);
  for (const auto& t : triples) k.triple_token += encoder.encode(t.render()).pooled;
  return k;
}

void apply_condition(KnowledgeEmbedding& k, Condition condition) {
  if (condition == Condition::kCaptionOnly) k.triple_token.setZero();
  if (condition == Condition::kTriplesOnly) k.caption_tokens.setZero();
}

TokenizedKnowledge tokenize_knowledge(std::string_view caption, const std::vector<KnowledgeTriple>& triples,
                                      const TextEncoder& encoder) {
  TokenizedKnowledge tk;
  tk.caption_ids = encoder.ids(caption);
  tk.caption_ids.resize(kCaptionTokens, -1);
  for (const auto& t : triples) tk.triple_ids.push_back(encoder.ids(t.render()));
  return tk;
}

Var knowledge_on_tape(Tape& tape, TextEncoder& encoder, const TokenizedKnowledge& tokens, Condition condition) {
  Var table = tape.param(encoder.table());
  Var caption = condition == Condition::kTriplesOnly ? tape.constant(Matrix::Zero(kCaptionTokens, kTextDim))
                                                     : gather_rows(table, tokens.caption_ids);
  Var triple = tape.constant(Matrix::Zero(1, kTextDim));
  if (condition != Condition::kCaptionOnly) {
    for (const auto& ids : tokens.triple_ids) {
      if (ids.empty()) continue;
      triple = add(triple, mean_rows(gather_rows(table, ids)));
    }
  }
  const Var parts[] = {caption, triple};
  return concat_rows(parts);
}

}  // namespace kcdp
