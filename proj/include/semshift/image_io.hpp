#pragma once

#include <filesystem>

#include "semshift/datagen.hpp"

namespace semshift {

/// Binary PPM (P6) for images, binary PGM (P5) for label maps.
void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const LabelMap& labels);
LabelMap read_pgm(const std::filesystem::path& path);

/// Maps class ids to display colors; kIgnoreLabel renders black.
Image colorize_labels(const LabelMap& labels);

inline constexpr const char* kManifestName = "manifest.jsonl";

/// Writes images/, labels/ and a line-delimited JSON manifest, one record per
/// sample: {"id","domain","split","image","label","label_hidden"}.
void export_dataset(const DatasetBundle& bundle, const std::filesystem::path& dir);

/// Inverse of export_dataset. Labels flagged hidden come back sealed.
DatasetBundle import_dataset(const std::filesystem::path& dir);

}  // namespace semshift
