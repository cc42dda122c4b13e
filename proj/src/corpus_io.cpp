// On-disk corpus layout:
//   manifest.json  {format, spec, labels, target_prior, samples: [{id, split,
//                   domain, caption, label?, tensor_file, offset}]}
//   tensors.bin    per record: 8-byte header (uint16 LE channels, height,
//                  width, reserved=0) followed by C*H*W float32 LE values.

#include <algorithm>
#include <map>
#include <sstream>
#include <stdexcept>

#include "kcdp/io_util.hpp"
#include "kcdp/synthcorpus.hpp"

namespace kcdp {

namespace {

constexpr const char* kTensorFile = "tensors.bin";
constexpr const char* kFormat = "kcdp-corpus/1";

std::string split_name(const Split& s) {
  return std::string(to_string(s.domain)) + (s.kind == SplitKind::kTrain ? "_train" : "_test");
}

void write_record(std::ostream& out, const ImageTensor& px) {
  const std::uint16_t header[4] = {kImageChannels, kImageSize, kImageSize, 0};
  for (std::uint16_t h : header) io::write_le(out, h);
  for (float v : px) io::write_le(out, v);
}

ImageTensor read_record(const std::vector<char>& blob, std::uint64_t offset) {
  if (offset + 8 > blob.size()) throw std::runtime_error("corpus: tensor offset past end of file");
  std::uint16_t header[4];
  for (int i = 0; i < 4; ++i) header[i] = io::read_le<std::uint16_t>(blob.data() + offset + 2 * i);
  if (header[0] != kImageChannels || header[1] != kImageSize || header[2] != kImageSize) {
    throw std::runtime_error("corpus: unexpected tensor shape in record");
  }
  const std::uint64_t bytes = static_cast<std::uint64_t>(kImageElements) * 4;
  if (offset + 8 + bytes > blob.size()) throw std::runtime_error("corpus: truncated tensor record");
  ImageTensor px(kImageElements);
  const char* p = blob.data() + offset + 8;
  for (int i = 0; i < kImageElements; ++i) px[static_cast<std::size_t>(i)] = io::read_le<float>(p + 4 * i);
  return px;
}

}  // namespace

void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = kFormat;
  manifest["spec"] = corpus.spec.to_json();
  manifest["labels"] = corpus.label_names;
  manifest["target_prior"] = corpus.target_prior;
  auto& samples = manifest["samples"] = nlohmann::json::array();

  std::ostringstream blob;
  std::uint64_t offset = 0;
  for (const Split* s : {&corpus.source_train, &corpus.target_train, &corpus.source_test, &corpus.target_test}) {
    for (const auto& img : s->samples) {
      nlohmann::json rec = {{"id", img.id()},
                            {"split", split_name(*s)},
                            {"domain", to_string(img.domain())},
                            {"caption", img.caption()},
                            {"tensor_file", kTensorFile},
                            {"offset", offset}};
      if (img.label()) rec["label"] = img.label()->index;
      samples.push_back(std::move(rec));
      write_record(blob, img.pixels());
      offset += 8 + static_cast<std::uint64_t>(kImageElements) * 4;
    }
  }
  io::atomic_write(dir / kTensorFile, blob.str());
  io::atomic_write(dir / "manifest.json", manifest.dump(1));
}

Corpus load_corpus(const std::filesystem::path& dir) {
  const nlohmann::json manifest = nlohmann::json::parse(io::read_file(dir / "manifest.json"));
  if (manifest.value("format", "") != kFormat) throw std::runtime_error("corpus: unsupported manifest format");
  Corpus c;
  c.spec = DatasetSpec::from_json(manifest.at("spec"));
  c.label_names = manifest.at("labels").get<std::vector<std::string>>();
  c.target_prior = manifest.at("target_prior").get<std::vector<double>>();
  c.source_train = {Domain::kSource, SplitKind::kTrain, {}};
  c.target_train = {Domain::kTarget, SplitKind::kTrain, {}};
  c.source_test = {Domain::kSource, SplitKind::kTest, {}};
  c.target_test = {Domain::kTarget, SplitKind::kTest, {}};

  std::map<std::string, std::vector<char>> blobs;
  for (const auto& rec : manifest.at("samples")) {
    const std::string file = rec.at("tensor_file").get<std::string>();
    auto it = blobs.find(file);
    if (it == blobs.end()) {
      const std::string data = io::read_file(dir / file);
      it = blobs.emplace(file, std::vector<char>(data.begin(), data.end())).first;
    }
    std::optional<EmotionLabel> label;
    if (rec.contains("label")) {
      const int idx = rec.at("label").get<int>();
      if (idx < 0 || idx >= static_cast<int>(c.label_names.size())) throw std::runtime_error("corpus: label out of range");
      label = EmotionLabel{idx, c.label_names[static_cast<std::size_t>(idx)]};
    }
    const std::string split = rec.at("split").get<std::string>();
    Split* dst = nullptr;
    if (split == "source_train") dst = &c.source_train;
    else if (split == "target_train") dst = &c.target_train;
    else if (split == "source_test") dst = &c.source_test;
    else if (split == "target_test") dst = &c.target_test;
    else throw std::runtime_error("corpus: unknown split '" + split + "'");
    dst->samples.emplace_back(rec.at("id").get<std::string>(), read_record(it->second, rec.at("offset").get<std::uint64_t>()),
                              rec.at("caption").get<std::string>(),
                              domain_from_string(rec.at("domain").get<std::string>()), std::move(label));
  }
  if (std::any_of(c.target_train.samples.begin(), c.target_train.samples.end(),
                  [](const CaptionedImage& s) { return s.label().has_value(); })) {
    throw std::runtime_error("corpus: target training split must be unlabeled");
  }
  return c;
}

}  // namespace kcdp
