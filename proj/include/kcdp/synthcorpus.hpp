#pragma once

// Two-domain synthetic emotion corpus: a "realistic" source domain and a
// "sticker" target domain with knobs for style, label-prior and caption
// vocabulary divergence. See docs/corpus_tables.md for the fixed tables.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace kcdp {

inline constexpr int kImageChannels = 3;
inline constexpr int kImageSize = 32;
inline constexpr int kImageElements = kImageChannels * kImageSize * kImageSize;
inline constexpr int kMaxClasses = 6;

/// Default label list; index order is normative.
const std::vector<std::string>& default_emotion_names();

struct EmotionLabel {
  int index = 0;
  std::string name;

  /// Looks up an index in the default list; throws on out-of-range.
  static EmotionLabel from_index(int index);
  friend bool operator==(const EmotionLabel&, const EmotionLabel&) = default;
};

enum class Domain { kSource, kTarget };

std::string_view to_string(Domain d);
Domain domain_from_string(std::string_view s);

/// Channel-major (C, H, W) float image in [0, 1].
using ImageTensor = std::vector<float>;

class CaptionedImage {
 public:
  CaptionedImage(std::string id, ImageTensor pixels, std::string caption, Domain domain,
                 std::optional<EmotionLabel> label);

  const std::string& id() const { return id_; }
  const ImageTensor& pixels() const { return pixels_; }
  const std::string& caption() const { return caption_; }
  Domain domain() const { return domain_; }
  const std::optional<EmotionLabel>& label() const { return label_; }

  friend bool operator==(const CaptionedImage&, const CaptionedImage&) = default;

 private:
  std::string id_;
  ImageTensor pixels_;
  std::string caption_;
  Domain domain_;
  std::optional<EmotionLabel> label_;
};

struct DatasetSpec {
  int n_source = 6000;
  int n_target = 6000;
  int n_test = 1000;  // held-out samples per domain
  int num_classes = 6;
  double style_shift = 0.8;
  double prior_shift = 0.4;
  double vocab_shift = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static DatasetSpec from_json(const nlohmann::json& j);
  friend bool operator==(const DatasetSpec&, const DatasetSpec&) = default;
};

enum class SplitKind { kTrain, kTest };

struct Split {
  Domain domain = Domain::kSource;
  SplitKind kind = SplitKind::kTrain;
  std::vector<CaptionedImage> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  bool labeled() const;
};

struct Corpus {
  DatasetSpec spec;
  std::vector<std::string> label_names;
  std::vector<double> target_prior;
  Split source_train;
  Split target_train;  // unlabeled
  Split source_test;
  Split target_test;

  const Split& split(Domain d, SplitKind k) const;
  /// Looks up a split by name: source_train, target_train, source_test, target_test.
  const Split& split(std::string_view name) const;
};

/// Rendering mix for a domain: 0 = fully realistic, 1 = fully sticker.
double style_mix(Domain domain, double style_shift);

ImageTensor render_image(const EmotionLabel& label, Domain domain, double style_shift,
                         std::uint64_t rng_seed);
/// Renders with an explicit style mix; render_image delegates here.
ImageTensor render_with_mix(int label_index, double mix, std::uint64_t rng_seed);

std::string generate_caption(const EmotionLabel& label, Domain domain, double vocab_shift,
                             std::uint64_t rng_seed);

/// Every word that can appear in a generated caption, in table order.
std::vector<std::string> caption_vocabulary();

/// Emotion whose caption rows contain `word`; -1 for template words and for
/// words shared by several emotions.
int word_emotion(std::string_view word);

/// Per-emotion label prior of the target domain.
std::vector<double> target_label_prior(int num_classes, double prior_shift, std::uint64_t seed);

double total_variation(std::span<const double> p, std::span<const double> q);

Corpus generate_dataset(const DatasetSpec& spec, int threads = 1);

/// Writes manifest.json and tensors.bin into `dir` (created if absent).
void save_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus load_corpus(const std::filesystem::path& dir);

}  // namespace kcdp
