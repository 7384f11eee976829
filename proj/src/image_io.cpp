#include "semshift/image_io.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace semshift {

namespace fs = std::filesystem;

namespace {

struct NetpbmHeader {
  std::string magic;
  std::size_t width = 0, height = 0, maxval = 0;
};

NetpbmHeader read_header(std::istream& in, const fs::path& path) {
  NetpbmHeader h;
  auto next_token = [&]() {
    std::string tok;
    for (;;) {
      in >> std::ws;
      if (in.peek() == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      in >> tok;
      return tok;
    }
  };
  h.magic = next_token();
  try {
    h.width = std::stoul(next_token());
    h.height = std::stoul(next_token());
    h.maxval = std::stoul(next_token());
  } catch (const std::exception&) {
    throw std::runtime_error("malformed netpbm header in " + path.string());
  }
  in.get();  // single whitespace before the raster
  if (!in || h.maxval != 255) throw std::runtime_error("unsupported netpbm file " + path.string());
  return h;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return in;
}

}  // namespace

void write_ppm(const fs::path& path, const Image& image) {
  auto out = open_out(path);
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  std::vector<unsigned char> raster(3 * image.width * image.height);
  for (std::size_t r = 0; r < image.height; ++r)
    for (std::size_t c = 0; c < image.width; ++c)
      for (std::size_t ch = 0; ch < 3; ++ch)
        raster[(r * image.width + c) * 3 + ch] =
            static_cast<unsigned char>(std::lround(std::clamp(image.at(ch, r, c), 0.0f, 1.0f) * 255.0f));
  out.write(reinterpret_cast<const char*>(raster.data()), static_cast<std::streamsize>(raster.size()));
}

Image read_ppm(const fs::path& path) {
  auto in = open_in(path);
  const auto h = read_header(in, path);
  if (h.magic != "P6") throw std::runtime_error(path.string() + " is not a binary PPM");
  std::vector<unsigned char> raster(3 * h.width * h.height);
  in.read(reinterpret_cast<char*>(raster.data()), static_cast<std::streamsize>(raster.size()));
  if (!in) throw std::runtime_error("truncated PPM " + path.string());
  Image image(h.height, h.width);
  for (std::size_t r = 0; r < h.height; ++r)
    for (std::size_t c = 0; c < h.width; ++c)
      for (std::size_t ch = 0; ch < 3; ++ch)
        image.at(ch, r, c) = static_cast<float>(raster[(r * h.width + c) * 3 + ch] / 255.0);
  return image;
}

void write_pgm(const fs::path& path, const LabelMap& labels) {
  auto out = open_out(path);
  out << "P5\n" << labels.width << ' ' << labels.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(labels.labels.data()), static_cast<std::streamsize>(labels.labels.size()));
}

LabelMap read_pgm(const fs::path& path) {
  auto in = open_in(path);
  const auto h = read_header(in, path);
  if (h.magic != "P5") throw std::runtime_error(path.string() + " is not a binary PGM");
  LabelMap labels(h.height, h.width);
  in.read(reinterpret_cast<char*>(labels.labels.data()), static_cast<std::streamsize>(labels.labels.size()));
  if (!in) throw std::runtime_error("truncated PGM " + path.string());
  return labels;
}

Image colorize_labels(const LabelMap& labels) {
  static constexpr std::array<std::array<float, 3>, 8> kColors{{{0.5f, 0.5f, 0.5f},
                                                                {0.9f, 0.1f, 0.1f},
                                                                {0.1f, 0.7f, 0.1f},
                                                                {0.1f, 0.3f, 0.9f},
                                                                {0.9f, 0.8f, 0.1f},
                                                                {0.8f, 0.2f, 0.8f},
                                                                {0.1f, 0.8f, 0.8f},
                                                                {1.0f, 1.0f, 1.0f}}};
  Image image(labels.height, labels.width);
  for (std::size_t r = 0; r < labels.height; ++r) {
    for (std::size_t c = 0; c < labels.width; ++c) {
      const auto k = labels.at(r, c);
      if (k == kIgnoreLabel) continue;
      const auto& col = kColors[k % kColors.size()];
      for (std::size_t ch = 0; ch < 3; ++ch) image.at(ch, r, c) = col[ch];
    }
  }
  return image;
}

void export_dataset(const DatasetBundle& bundle, const fs::path& dir) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "labels");
  std::ofstream manifest(dir / kManifestName);
  if (!manifest) throw std::runtime_error("cannot write manifest in " + dir.string());

  auto emit = [&](std::uint64_t id, Domain domain, const char* split, const Image& image, const LabelMap& label,
                  bool hidden) {
    const auto stem = std::string(domain_name(domain)) + "_" + std::to_string(id);
    const auto image_rel = fs::path("images") / (stem + ".ppm");
    const auto label_rel = fs::path("labels") / (stem + ".pgm");
    write_ppm(dir / image_rel, image);
    write_pgm(dir / label_rel, label);
    nlohmann::ordered_json rec;
    rec["id"] = id;
    rec["domain"] = domain_name(domain);
    rec["split"] = split;
    rec["image"] = image_rel.generic_string();
    rec["label"] = label_rel.generic_string();
    rec["label_hidden"] = hidden;
    manifest << rec.dump() << '\n';
  };
  for (const auto& s : bundle.source_train) emit(s.id, s.domain, "source_train", s.image, s.label, false);
  for (const auto& s : bundle.target_labeled) emit(s.id, s.domain, "target_labeled", s.image, s.label, false);
  for (const auto& s : bundle.target_unlabeled) {
    // Export writes the sealed ground truth without going through open().
    emit(s.id, s.domain, "target_unlabeled", s.image, s.label.label_, true);
  }
  for (const auto& s : bundle.target_val) emit(s.id, s.domain, "target_val", s.image, s.label, false);
}

DatasetBundle import_dataset(const fs::path& dir) {
  std::ifstream manifest(dir / kManifestName);
  if (!manifest) throw std::runtime_error("no dataset manifest at " + (dir / kManifestName).string());
  DatasetBundle bundle;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(manifest, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("manifest line " + std::to_string(lineno) + ": " + e.what());
    }
    const auto id = rec.at("id").get<std::uint64_t>();
    const auto domain = rec.at("domain").get<std::string>() == "source" ? Domain::Source : Domain::Target;
    const auto split = rec.at("split").get<std::string>();
    auto image = read_ppm(dir / rec.at("image").get<std::string>());
    auto label = read_pgm(dir / rec.at("label").get<std::string>());
    Sample s{id, domain, std::move(image), std::move(label)};
    if (split == "source_train") {
      bundle.source_train.push_back(std::move(s));
    } else if (split == "target_labeled") {
      bundle.target_labeled.push_back(std::move(s));
    } else if (split == "target_unlabeled") {
      bundle.target_unlabeled.push_back(
          UnlabeledSample{s.id, s.domain, std::move(s.image), SealedLabel(std::move(s.label), bundle.sealed_reads)});
    } else if (split == "target_val") {
      bundle.target_val.push_back(std::move(s));
    } else {
      throw std::runtime_error("manifest line " + std::to_string(lineno) + ": unknown split '" + split + "'");
    }
  }
  bundle.check_disjoint();
  return bundle;
}

}  // namespace semshift
