#include "kcdp/synthcorpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <thread>

#include "kcdp/rng.hpp"

namespace kcdp {

namespace {

enum class Shape { kCircle, kTeardrop, kTriangle, kDiamond, kStar, kSquare };

struct EmotionStyle {
  std::array<float, 3> rgb;
  Shape shape;
};

// Base hue and sticker shape per emotion, indexed like default_emotion_names().
constexpr std::array<EmotionStyle, kMaxClasses> kStyles = {{
    {{1.00F, 0.85F, 0.20F}, Shape::kCircle},    // joy: yellow
    {{0.15F, 0.20F, 0.55F}, Shape::kTeardrop},  // sadness: dark blue
    {{0.90F, 0.10F, 0.10F}, Shape::kTriangle},  // anger: red
    {{0.45F, 0.20F, 0.60F}, Shape::kDiamond},   // fear: purple
    {{1.00F, 0.55F, 0.10F}, Shape::kStar},      // surprise: orange
    {{0.35F, 0.60F, 0.15F}, Shape::kSquare},    // disgust: green
}};

struct CaptionRow {
  const char* subject;
  const char* verb_ing;
  const char* object;
  const char* adjective;
  const char* verb_s;
};

struct EmotionVocabulary {
  std::array<CaptionRow, 4> shared;
  std::array<CaptionRow, 3> source_only;
  std::array<CaptionRow, 3> target_only;
};

// Row 0 of the shared joy table is (man, hugging, woman).
constexpr std::array<EmotionVocabulary, kMaxClasses> kVocabulary = {{
    {// joy
     {{{"man", "hugging", "woman", "thrilled", "smiles"},
       {"girl", "tickling", "puppy", "cheerful", "laughs"},
       {"couple", "kissing", "baby", "joyful", "grins"},
       {"boy", "holding", "balloon", "delighted", "beams"}}},
     {{{"bride", "embracing", "groom", "elated", "giggles"},
       {"athlete", "lifting", "trophy", "ecstatic", "cheers"},
       {"grandma", "cuddling", "grandson", "merry", "winks"}}},
     {{{"bunny", "waving", "heart", "blissful", "twinkles"},
       {"kitty", "juggling", "cupcake", "bubbly", "chirps"},
       {"panda", "munching", "cookie", "sunny", "sparkles"}}}},
    {// sadness
     {{{"widow", "mourning", "husband", "heartbroken", "weeps"},
       {"child", "missing", "mother", "gloomy", "sobs"},
       {"orphan", "burying", "coffin", "sorrowful", "sighs"},
       {"soldier", "leaving", "family", "lonely", "cries"}}},
     {{{"mourner", "clutching", "photograph", "grieving", "stares"},
       {"patient", "losing", "friend", "depressed", "frowns"},
       {"refugee", "abandoning", "home", "miserable", "gazes"}}},
     {{{"penguin", "dropping", "icecream", "teary", "droops"},
       {"raincloud", "drenching", "teddy", "blue", "drizzles"},
       {"snowman", "melting", "carrot", "glum", "mopes"}}}},
    {// anger
     {{{"driver", "punching", "wall", "furious", "yells"},
       {"boss", "scolding", "worker", "angry", "shouts"},
       {"dog", "biting", "stranger", "hostile", "growls"},
       {"protester", "smashing", "window", "enraged", "screams"}}},
     {{{"fighter", "kicking", "opponent", "livid", "snarls"},
       {"referee", "punishing", "player", "irate", "glares"},
       {"neighbor", "threatening", "tenant", "outraged", "barks"}}},
     {{{"volcano", "stomping", "pebble", "steaming", "fumes"},
       {"tomato", "squashing", "fly", "grumpy", "huffs"},
       {"dragon", "burning", "castle", "fiery", "roars"}}}},
    {// fear
     {{{"hiker", "fleeing", "bear", "terrified", "trembles"},
       {"kid", "avoiding", "monster", "frightened", "shivers"},
       {"diver", "escaping", "shark", "scared", "gasps"},
       {"camper", "dreading", "ghost", "afraid", "shudders"}}},
     {{{"victim", "facing", "robber", "panicked", "cowers"},
       {"pilot", "watching", "storm", "anxious", "flinches"},
       {"swimmer", "sighting", "jellyfish", "nervous", "quivers"}}},
     {{{"mouse", "spotting", "cat", "jittery", "squeaks"},
       {"chick", "dodging", "hawk", "spooked", "quakes"},
       {"pumpkin", "sensing", "bat", "wary", "shakes"}}}},
    {// surprise
     {{{"student", "opening", "gift", "astonished", "gapes"},
       {"crowd", "witnessing", "magician", "amazed", "marvels"},
       {"mother", "discovering", "letter", "shocked", "blinks"},
       {"tourist", "seeing", "fireworks", "stunned", "gawks"}}},
     {{{"winner", "receiving", "prize", "speechless", "exclaims"},
       {"scientist", "finding", "fossil", "startled", "peers"},
       {"guest", "entering", "party", "dazzled", "whoops"}}},
     {{{"owl", "unwrapping", "box", "wowed", "hoots"},
       {"frog", "catching", "star", "awestruck", "pops"},
       {"robot", "noticing", "comet", "flabbergasted", "beeps"}}}},
    {// disgust
     {{{"chef", "smelling", "garbage", "disgusted", "gags"},
       {"diner", "tasting", "mold", "repulsed", "grimaces"},
       {"cleaner", "touching", "slime", "nauseated", "retches"},
       {"janitor", "scrubbing", "toilet", "grossed", "winces"}}},
     {{{"inspector", "examining", "sewage", "revolted", "scowls"},
       {"nurse", "handling", "vomit", "sickened", "cringes"},
       {"farmer", "shoveling", "manure", "appalled", "squirms"}}},
     {{{"skunk", "sniffing", "sock", "yucky", "pouts"},
       {"slug", "licking", "broccoli", "icky", "spits"},
       {"zombie", "chewing", "worm", "queasy", "burps"}}}},
}};

void check_label(int index, int num_classes = kMaxClasses) {
  if (index < 0 || index >= num_classes) {
    throw std::invalid_argument("invalid emotion label index " + std::to_string(index));
  }
}

float clamp01(double x) { return static_cast<float>(std::clamp(x, 0.0, 1.0)); }

// Signed "inside" test for the sticker shapes, in shape-local coordinates
// scaled so the shape spans roughly [-1, 1]. Returns a distance-like value
// that is <= 0 inside.
double shape_field(Shape shape, double x, double y) {
  switch (shape) {
    case Shape::kCircle:
      return std::hypot(x, y) - 1.0;
    case Shape::kTeardrop: {
      // Circle at the bottom with a point on top.
      const double body = std::hypot(x, y - 0.35) - 0.65;
      const double cone = std::abs(x) * 1.6 + (y - 0.35) * 0.9 - 0.0;
      return y < 0.35 ? std::max(cone - 0.6, -1.0 - y) : body;
    }
    case Shape::kTriangle:
      return std::max({-y - 0.8, y * 0.5 + std::abs(x) * 0.9 - 0.5, y - 0.85});
    case Shape::kDiamond:
      return std::abs(x) + std::abs(y) - 1.0;
    case Shape::kStar: {
      const double r = std::hypot(x, y);
      const double a = std::atan2(y, x);
      const double rim = 0.6 + 0.4 * std::cos(5.0 * a);
      return r - rim;
    }
    case Shape::kSquare:
      return std::max(std::abs(x), std::abs(y)) - 0.8;
  }
  return 1.0;
}

ImageTensor render_realistic(int label, Rng& rng) {
  const auto& hue = kStyles[static_cast<std::size_t>(label)].rgb;
  ImageTensor img(kImageElements);
  // Low-frequency natural background, independent of the emotion.
  std::array<double, 3> top{};
  std::array<double, 3> bottom{};
  for (int c = 0; c < 3; ++c) {
    top[static_cast<std::size_t>(c)] = rng.uniform(0.15, 0.55);
    bottom[static_cast<std::size_t>(c)] = rng.uniform(0.10, 0.45);
  }
  const int blobs = 3;
  std::array<std::array<double, 6>, blobs> blob{};
  for (auto& b : blob) {
    b[0] = rng.uniform(6.0, 26.0);
    b[1] = rng.uniform(6.0, 26.0);
    b[2] = rng.uniform(3.0, 6.0);
    for (int c = 0; c < 3; ++c) b[static_cast<std::size_t>(3 + c)] = hue[static_cast<std::size_t>(c)] + 0.08 * rng.normal();
  }
  for (int y = 0; y < kImageSize; ++y) {
    const double t = y / double(kImageSize - 1);
    for (int x = 0; x < kImageSize; ++x) {
      std::array<double, 3> px{};
      for (int c = 0; c < 3; ++c) {
        const auto cc = static_cast<std::size_t>(c);
        px[cc] = (1.0 - t) * top[cc] + t * bottom[cc];
      }
      for (const auto& b : blob) {
        const double d2 = (x - b[0]) * (x - b[0]) + (y - b[1]) * (y - b[1]);
        const double alpha = 0.85 * std::exp(-d2 / (2.0 * b[2] * b[2]));
        for (int c = 0; c < 3; ++c) {
          const auto cc = static_cast<std::size_t>(c);
          px[cc] = (1.0 - alpha) * px[cc] + alpha * b[3 + cc];
        }
      }
      for (int c = 0; c < 3; ++c) {
        img[static_cast<std::size_t>((c * kImageSize + y) * kImageSize + x)] =
            static_cast<float>(px[static_cast<std::size_t>(c)] + 0.03 * rng.normal());
      }
    }
  }
  return img;
}

ImageTensor render_sticker(int label, Rng& rng) {
  const auto& style = kStyles[static_cast<std::size_t>(label)];
  ImageTensor img(kImageElements);
  std::array<double, 3> paper{};
  for (auto& c : paper) c = rng.uniform(0.75, 1.0);
  const double cx = 16.0 + rng.uniform(-3.0, 3.0);
  const double cy = 16.0 + rng.uniform(-3.0, 3.0);
  const double radius = rng.uniform(8.0, 11.0);
  const double outline = 1.2 / radius;
  for (int y = 0; y < kImageSize; ++y) {
    for (int x = 0; x < kImageSize; ++x) {
      const double f = shape_field(style.shape, (x - cx) / radius, (y - cy) / radius);
      std::array<double, 3> px = paper;
      if (f <= -outline) {
        for (int c = 0; c < 3; ++c) px[static_cast<std::size_t>(c)] = style.rgb[static_cast<std::size_t>(c)];
      } else if (f <= outline * 0.5) {
        px = {0.05, 0.05, 0.05};
      }
      for (int c = 0; c < 3; ++c) {
        img[static_cast<std::size_t>((c * kImageSize + y) * kImageSize + x)] =
            static_cast<float>(px[static_cast<std::size_t>(c)]);
      }
    }
  }
  return img;
}

std::uint64_t sample_seed(std::uint64_t spec_seed, Domain domain, SplitKind kind, int index) {
  std::uint64_t h = hash_combine(spec_seed, domain == Domain::kSource ? 0x51U : 0x7AU);
  h = hash_combine(h, kind == SplitKind::kTrain ? 0x11U : 0x22U);
  return hash_combine(h, static_cast<std::uint64_t>(index));
}

int draw_label(std::span<const double> prior, double u) {
  double acc = 0.0;
  for (std::size_t i = 0; i < prior.size(); ++i) {
    acc += prior[i];
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(prior.size()) - 1;
}

std::string sample_id(Domain d, SplitKind k, int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s-%s-%06d", d == Domain::kSource ? "src" : "tgt",
                k == SplitKind::kTrain ? "train" : "test", index);
  return buf;
}

Split make_split(const DatasetSpec& spec, Domain domain, SplitKind kind, int count,
                 std::span<const double> prior, const std::vector<std::string>& names, bool keep_labels,
                 int threads) {
  Split split;
  split.domain = domain;
  split.kind = kind;
  std::vector<std::optional<CaptionedImage>> slots(static_cast<std::size_t>(count));
  auto work = [&](int begin, int end) {
    for (int i = begin; i < end; ++i) {
      const std::uint64_t s = sample_seed(spec.seed, domain, kind, i);
      const int label = draw_label(prior, unit_interval(splitmix64(s ^ 0xA5A5A5A5ULL)));
      EmotionLabel lab{label, names[static_cast<std::size_t>(label)]};
      ImageTensor px = render_image(lab, domain, spec.style_shift, hash_combine(s, 1));
      std::string cap = generate_caption(lab, domain, spec.vocab_shift, hash_combine(s, 2));
      slots[static_cast<std::size_t>(i)].emplace(sample_id(domain, kind, i), std::move(px), std::move(cap),
                                                 domain, keep_labels ? std::optional{lab} : std::nullopt);
    }
  };
  const int n_threads = std::max(1, std::min(threads, count));
  if (n_threads == 1) {
    work(0, count);
  } else {
    std::vector<std::jthread> pool;
    const int chunk = (count + n_threads - 1) / n_threads;
    for (int t = 0; t < n_threads; ++t) {
      const int b = t * chunk;
      const int e = std::min(count, b + chunk);
      if (b < e) pool.emplace_back(work, b, e);
    }
  }
  split.samples.reserve(slots.size());
  for (auto& s : slots) split.samples.push_back(std::move(*s));
  return split;
}

}  // namespace

// ---- labels and samples ---------------------------------------------------

const std::vector<std::string>& default_emotion_names() {
  static const std::vector<std::string> names = {"joy", "sadness", "anger", "fear", "surprise", "disgust"};
  return names;
}

EmotionLabel EmotionLabel::from_index(int index) {
  check_label(index);
  return {index, default_emotion_names()[static_cast<std::size_t>(index)]};
}

std::string_view to_string(Domain d) { return d == Domain::kSource ? "source" : "target"; }

Domain domain_from_string(std::string_view s) {
  if (s == "source") return Domain::kSource;
  if (s == "target") return Domain::kTarget;
  throw std::invalid_argument("unknown domain '" + std::string(s) + "'");
}

CaptionedImage::CaptionedImage(std::string id, ImageTensor pixels, std::string caption, Domain domain,
                               std::optional<EmotionLabel> label)
    : id_(std::move(id)), pixels_(std::move(pixels)), caption_(std::move(caption)), domain_(domain),
      label_(std::move(label)) {
  if (pixels_.size() != static_cast<std::size_t>(kImageElements)) {
    throw std::invalid_argument("CaptionedImage: expected a 3x32x32 tensor");
  }
  for (float v : pixels_) {
    if (!std::isfinite(v)) throw std::invalid_argument("CaptionedImage: non-finite pixel");
  }
}

bool Split::labeled() const {
  return std::all_of(samples.begin(), samples.end(), [](const auto& s) { return s.label().has_value(); });
}

const Split& Corpus::split(Domain d, SplitKind k) const {
  if (d == Domain::kSource) return k == SplitKind::kTrain ? source_train : source_test;
  return k == SplitKind::kTrain ? target_train : target_test;
}

const Split& Corpus::split(std::string_view name) const {
  if (name == "source_train") return source_train;
  if (name == "target_train") return target_train;
  if (name == "source_test") return source_test;
  if (name == "target_test") return target_test;
  throw std::invalid_argument("unknown split '" + std::string(name) + "'");
}

// ---- spec -----------------------------------------------------------------

void DatasetSpec::validate() const {
  if (n_source <= 0 || n_target <= 0 || n_test <= 0) throw std::invalid_argument("DatasetSpec: counts must be positive");
  if (num_classes < 2 || num_classes > kMaxClasses) {
    throw std::invalid_argument("DatasetSpec: num_classes must be in [2, 6]");
  }
  if (num_classes > n_source || num_classes > n_target || num_classes > n_test) {
    throw std::invalid_argument("DatasetSpec: more classes than samples in a split");
  }
  for (double s : {style_shift, prior_shift, vocab_shift}) {
    if (!(s >= 0.0 && s <= 1.0)) throw std::invalid_argument("DatasetSpec: shift knobs must be in [0, 1]");
  }
}

nlohmann::json DatasetSpec::to_json() const {
  return {{"n_source", n_source},       {"n_target", n_target},       {"n_test", n_test},
          {"K", num_classes},           {"style_shift", style_shift}, {"prior_shift", prior_shift},
          {"vocab_shift", vocab_shift}, {"seed", seed}};
}

DatasetSpec DatasetSpec::from_json(const nlohmann::json& j) {
  DatasetSpec s;
  s.n_source = j.value("n_source", s.n_source);
  s.n_target = j.value("n_target", s.n_target);
  s.n_test = j.value("n_test", s.n_test);
  s.num_classes = j.value("K", s.num_classes);
  s.style_shift = j.value("style_shift", s.style_shift);
  s.prior_shift = j.value("prior_shift", s.prior_shift);
  s.vocab_shift = j.value("vocab_shift", s.vocab_shift);
  s.seed = j.value("seed", s.seed);
  s.validate();
  return s;
}

// ---- rendering ------------------------------------------------------------

double style_mix(Domain domain, double style_shift) {
  return domain == Domain::kSource ? 0.5 * (1.0 - style_shift) : 0.5 * (1.0 + style_shift);
}

ImageTensor render_with_mix(int label_index, double mix, std::uint64_t rng_seed) {
  check_label(label_index);
  Rng real_rng(hash_combine(rng_seed, 0x4EA1));
  Rng stick_rng(hash_combine(rng_seed, 0x571C));
  const ImageTensor real = render_realistic(label_index, real_rng);
  const ImageTensor stick = render_sticker(label_index, stick_rng);
  ImageTensor out(kImageElements);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = clamp01((1.0 - mix) * real[i] + mix * stick[i]);
  }
  return out;
}

ImageTensor render_image(const EmotionLabel& label, Domain domain, double style_shift, std::uint64_t rng_seed) {
  if (!(style_shift >= 0.0 && style_shift <= 1.0)) throw std::invalid_argument("style_shift must be in [0, 1]");
  return render_with_mix(label.index, style_mix(domain, style_shift), rng_seed);
}

// ---- captions -------------------------------------------------------------

std::string generate_caption(const EmotionLabel& label, Domain domain, double vocab_shift, std::uint64_t rng_seed) {
  check_label(label.index);
  const auto& vocab = kVocabulary[static_cast<std::size_t>(label.index)];
  const int form = static_cast<int>(rng_seed % 3);
  const std::uint64_t pick = rng_seed / 3;
  const CaptionRow& shared = vocab.shared[pick % vocab.shared.size()];
  const auto& own = domain == Domain::kSource ? vocab.source_only : vocab.target_only;
  const CaptionRow& exclusive = own[(pick / vocab.shared.size()) % own.size()];
  // Each content slot independently switches to the domain-exclusive row.
  auto slot = [&](int i, const char* CaptionRow::*field) -> std::string {
    const bool excl = unit_interval(hash_combine(rng_seed, static_cast<std::uint64_t>(i))) < vocab_shift;
    return (excl ? exclusive : shared).*field;
  };
  const std::string subj = slot(0, &CaptionRow::subject);
  switch (form) {
    case 0:
      return "a " + subj + " is " + slot(1, &CaptionRow::verb_ing) + " a " + slot(2, &CaptionRow::object);
    case 1:
      return "a " + subj + " is " + slot(1, &CaptionRow::adjective);
    default:
      return "a " + subj + " " + slot(1, &CaptionRow::verb_s) + " at a " + slot(2, &CaptionRow::object);
  }
}

std::vector<std::string> caption_vocabulary() {
  std::vector<std::string> words = {"a", "is", "at"};
  auto add_row = [&](const CaptionRow& r) {
    for (const char* w : {r.subject, r.verb_ing, r.object, r.adjective, r.verb_s}) {
      if (std::find(words.begin(), words.end(), w) == words.end()) words.emplace_back(w);
    }
  };
  for (const auto& v : kVocabulary) {
    for (const auto& r : v.shared) add_row(r);
    for (const auto& r : v.source_only) add_row(r);
    for (const auto& r : v.target_only) add_row(r);
  }
  return words;
}

int word_emotion(std::string_view word) {
  int found = -1;
  for (std::size_t e = 0; e < kVocabulary.size(); ++e) {
    bool hit = false;
    auto scan = [&](const CaptionRow& r) {
      for (const char* w : {r.subject, r.verb_ing, r.object, r.adjective, r.verb_s}) hit = hit || word == w;
    };
    for (const auto& r : kVocabulary[e].shared) scan(r);
    for (const auto& r : kVocabulary[e].source_only) scan(r);
    for (const auto& r : kVocabulary[e].target_only) scan(r);
    if (!hit) continue;
    if (found >= 0) return -1;
    found = static_cast<int>(e);
  }
  return found;
}

// ---- label priors ---------------------------------------------------------

double total_variation(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("total_variation: size mismatch");
  double tv = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) tv += std::abs(p[i] - q[i]);
  return 0.5 * tv;
}

std::vector<double> target_label_prior(int num_classes, double prior_shift, std::uint64_t seed) {
  const auto k = static_cast<std::size_t>(num_classes);
  const std::vector<double> uniform(k, 1.0 / num_classes);
  if (prior_shift <= 0.0) return uniform;
  // Floor keeps every class represented in the target domain.
  const double floor = 0.25 / num_classes;
  Rng rng(hash_combine(seed, 0xD1));
  for (int attempt = 0; attempt < 256; ++attempt) {
    std::vector<double> d(k);
    double z = 0.0;
    for (auto& x : d) {
      x = rng.gamma(0.5);
      z += x;
    }
    for (auto& x : d) x /= z;
    const double tv = total_variation(d, uniform);
    if (tv <= 0.0) continue;
    const double lambda = prior_shift / tv;
    std::vector<double> p(k);
    bool ok = true;
    for (std::size_t i = 0; i < k; ++i) {
      p[i] = uniform[i] + lambda * (d[i] - uniform[i]);
      if (p[i] < floor) ok = false;
    }
    if (ok) return p;
  }
  throw std::invalid_argument("prior_shift too large to realize with every class represented");
}

Corpus generate_dataset(const DatasetSpec& spec, int threads) {
  spec.validate();
  Corpus c;
  c.spec = spec;
  c.label_names.assign(default_emotion_names().begin(), default_emotion_names().begin() + spec.num_classes);
  const std::vector<double> uniform(static_cast<std::size_t>(spec.num_classes), 1.0 / spec.num_classes);
  c.target_prior = target_label_prior(spec.num_classes, spec.prior_shift, spec.seed);
  c.source_train = make_split(spec, Domain::kSource, SplitKind::kTrain, spec.n_source, uniform, c.label_names, true, threads);
  c.target_train = make_split(spec, Domain::kTarget, SplitKind::kTrain, spec.n_target, c.target_prior, c.label_names, false, threads);
  c.source_test = make_split(spec, Domain::kSource, SplitKind::kTest, spec.n_test, uniform, c.label_names, true, threads);
  c.target_test = make_split(spec, Domain::kTarget, SplitKind::kTest, spec.n_test, c.target_prior, c.label_names, true, threads);
  return c;
}

}  // namespace kcdp
