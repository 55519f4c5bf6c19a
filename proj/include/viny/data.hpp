// SPDX-License-Identifier: Apache-2.0
//
// Folder layouts:
//   unlabeled       <root>/*.{png,jpg,jpeg}
//   classification  <root>/<class>/*.{png,jpg,jpeg}; class index = rank of
//                   the directory name in byte order
//   segmentation    <root>/images/<stem>.{png,jpg,jpeg} with
//                   <root>/trimaps/<stem>.png holding values {1, 2, 3}
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "viny/sample.hpp"

namespace viny {

enum class DataKind { unlabeled, classification, segmentation };

std::string kind_name(DataKind k);
/// Throws std::invalid_argument for an unknown name.
DataKind parse_kind(const std::string &name);

struct DatasetSpec {
  /// Folder path, or "synthetic".
  std::string source = "synthetic";
  DataKind kind = DataKind::segmentation;
  std::optional<std::size_t> size_limit;
  std::uint64_t seed = 0;
  /// Draw size_limit samples evenly across classes instead of uniformly.
  /// Only meaningful for classification data.
  bool class_balanced = false;

  bool synthetic() const { return source == "synthetic"; }
  bool operator==(const DatasetSpec &) const = default;
};

struct LoadReport {
  std::size_t loaded = 0;
  std::size_t skipped = 0;
  std::vector<std::string> skipped_files;
};

/// Prefixes relative paths with data_root, or with $DATA_ROOT when data_root
/// is empty.
std::filesystem::path resolve_data_path(const std::string &path,
                                        const std::string &data_root = {});

/// Decodes one 8-bit image, resized to size x size (bilinear) and scaled to
/// [0, 1]. Returns nullopt when the file cannot be decoded.
std::optional<Image> read_image(const std::filesystem::path &file, int size);

/// Decodes a trimap file (values 1 fg, 2 bg, 3 unknown), resized with
/// nearest-neighbour sampling. Returns nullopt when the file cannot be decoded
/// or holds other values.
std::optional<Trimap> read_trimap(const std::filesystem::path &file, int size);

/// Loads every sample of a folder dataset in byte-order path order.
/// Unreadable files are skipped with a warning and counted in report.
/// Throws DataError when the folder is missing or nothing could be loaded.
/// size_limit is applied afterwards with subsample().
SampleList load_folder(const DatasetSpec &spec, int image_size, LoadReport *report = nullptr,
                       const std::string &data_root = {});

/// n samples drawn uniformly without replacement, in draw order. Throws
/// DataError when n exceeds the sample count.
SampleList subsample(const SampleList &samples, std::size_t n, std::uint64_t seed);

/// Like subsample, drawing as evenly as possible from each class.
SampleList subsample_balanced(const SampleList &samples, std::size_t n, std::uint64_t seed);

struct Split {
  SampleList train;
  SampleList test;
};

/// Seeded partition into n_test test samples and the rest; both parts keep
/// input order. Throws DataError unless samples.size() > n_test.
Split split_holdout(const SampleList &samples, std::size_t n_test = 1000,
                    std::uint64_t seed = 42);

/// Deterministic procedural samples. Sample i depends only on (kind, seed, i,
/// image_size), so shorter runs are prefixes of longer ones.
SampleList synth_generate(DataKind kind, std::size_t n, std::uint64_t seed,
                          int image_size = 128);

/// Materializes spec: loads or generates, then applies size_limit.
SampleList load_dataset(const DatasetSpec &spec, int image_size, LoadReport *report = nullptr,
                        const std::string &data_root = {});

} // namespace viny
