// SPDX-License-Identifier: Apache-2.0
#include "viny/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <stdexcept>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <spdlog/spdlog.h>

#include "viny/errors.hpp"
#include "viny/seed.hpp"

namespace fs = std::filesystem;

namespace viny {

std::string kind_name(DataKind k) {
  switch (k) {
  case DataKind::unlabeled:
    return "unlabeled";
  case DataKind::classification:
    return "classification";
  case DataKind::segmentation:
    return "segmentation";
  }
  return "unknown";
}

DataKind parse_kind(const std::string &name) {
  if (name == "unlabeled")
    return DataKind::unlabeled;
  if (name == "classification")
    return DataKind::classification;
  if (name == "segmentation")
    return DataKind::segmentation;
  throw std::invalid_argument("unknown dataset kind '" + name + "'");
}

fs::path resolve_data_path(const std::string &path, const std::string &data_root) {
  fs::path p(path);
  if (p.is_absolute())
    return p;
  std::string root = data_root;
  if (root.empty())
    if (const char *env = std::getenv("DATA_ROOT"))
      root = env;
  return root.empty() ? p : fs::path(root) / p;
}

std::optional<Image> read_image(const fs::path &file, int size) {
  cv::Mat bgr = cv::imread(file.string(), cv::IMREAD_COLOR);
  if (bgr.empty() || bgr.depth() != CV_8U)
    return std::nullopt;
  if (bgr.rows != size || bgr.cols != size)
    cv::resize(bgr, bgr, cv::Size(size, size), 0, 0, cv::INTER_LINEAR);
  Image img(3, size, size);
  for (int y = 0; y < size; ++y) {
    const auto *row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = static_cast<float>(row[x][2 - c]) / 255.0f;
  }
  return img;
}

std::optional<Trimap> read_trimap(const fs::path &file, int size) {
  cv::Mat raw = cv::imread(file.string(), cv::IMREAD_UNCHANGED);
  if (raw.empty() || raw.depth() != CV_8U)
    return std::nullopt;
  if (raw.channels() > 1)
    cv::extractChannel(raw, raw, 0);
  if (raw.rows != size || raw.cols != size)
    cv::resize(raw, raw, cv::Size(size, size), 0, 0, cv::INTER_NEAREST);
  Trimap t(size, size);
  for (int y = 0; y < size; ++y) {
    const auto *row = raw.ptr<std::uint8_t>(y);
    for (int x = 0; x < size; ++x) {
      if (row[x] < 1 || row[x] > 3)
        return std::nullopt;
      t.at(y, x) = static_cast<std::uint8_t>(row[x] - 1);
    }
  }
  return t;
}

namespace {

bool is_image_file(const fs::path &p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

std::vector<fs::path> sorted_entries(const fs::path &dir, bool directories) {
  std::vector<fs::path> out;
  for (const auto &e : fs::directory_iterator(dir)) {
    if (directories ? e.is_directory() : (e.is_regular_file() && is_image_file(e.path())))
      out.push_back(e.path());
  }
  std::sort(out.begin(), out.end(),
            [](const fs::path &a, const fs::path &b) { return a.string() < b.string(); });
  return out;
}

void skip(LoadReport &report, const fs::path &file, const char *why) {
  spdlog::warn("skipping {}: {}", file.string(), why);
  ++report.skipped;
  report.skipped_files.push_back(file.string());
}

} // namespace

SampleList load_folder(const DatasetSpec &spec, int image_size, LoadReport *report,
                       const std::string &data_root) {
  LoadReport local;
  LoadReport &rep = report ? *report : local;
  rep = {};
  const fs::path root = resolve_data_path(spec.source, data_root);
  if (!fs::is_directory(root))
    throw DataError("dataset folder not found: " + root.string());

  SampleList out;
  switch (spec.kind) {
  case DataKind::unlabeled:
    for (const auto &f : sorted_entries(root, false)) {
      if (auto img = read_image(f, image_size))
        out.push_back({std::move(*img), std::monostate{}});
      else
        skip(rep, f, "unreadable image");
    }
    break;
  case DataKind::classification: {
    const auto classes = sorted_entries(root, true);
    for (std::size_t c = 0; c < classes.size(); ++c)
      for (const auto &f : sorted_entries(classes[c], false)) {
        if (auto img = read_image(f, image_size))
          out.push_back({std::move(*img), static_cast<int>(c)});
        else
          skip(rep, f, "unreadable image");
      }
    break;
  }
  case DataKind::segmentation: {
    const fs::path images = root / "images";
    const fs::path trimaps = root / "trimaps";
    if (!fs::is_directory(images) || !fs::is_directory(trimaps))
      throw DataError("segmentation folder needs images/ and trimaps/: " + root.string());
    std::map<std::string, fs::path> by_stem;
    for (const auto &f : sorted_entries(trimaps, false))
      by_stem.emplace(f.stem().string(), f);
    for (const auto &f : sorted_entries(images, false)) {
      const auto it = by_stem.find(f.stem().string());
      if (it == by_stem.end()) {
        skip(rep, f, "no matching trimap");
        continue;
      }
      auto img = read_image(f, image_size);
      if (!img) {
        skip(rep, f, "unreadable image");
        continue;
      }
      auto tri = read_trimap(it->second, image_size);
      if (!tri) {
        skip(rep, it->second, "unreadable trimap or values outside {1, 2, 3}");
        continue;
      }
      out.push_back({std::move(*img), std::move(*tri)});
    }
    break;
  }
  }
  rep.loaded = out.size();
  if (out.empty())
    throw DataError("no loadable samples in " + root.string());
  return out;
}

SampleList subsample(const SampleList &samples, std::size_t n, std::uint64_t seed) {
  if (n > samples.size())
    throw DataError("cannot draw " + std::to_string(n) + " samples from " +
                    std::to_string(samples.size()));
  std::vector<std::size_t> idx(samples.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  SampleList out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(samples[idx[i]]);
  return out;
}

SampleList subsample_balanced(const SampleList &samples, std::size_t n, std::uint64_t seed) {
  if (n > samples.size())
    throw DataError("cannot draw " + std::to_string(n) + " samples from " +
                    std::to_string(samples.size()));
  std::map<int, SampleList> by_class;
  for (const auto &s : samples) {
    if (!s.has_class())
      throw DataError("class-balanced subsampling needs class labels");
    by_class[s.class_id()].push_back(s);
  }
  // Round-robin quotas; classes that run out pass their share on.
  std::map<int, std::size_t> quota;
  std::size_t left = n;
  while (left > 0) {
    for (auto &[c, list] : by_class) {
      if (left == 0)
        break;
      if (quota[c] < list.size()) {
        ++quota[c];
        --left;
      }
    }
  }
  SampleList out;
  out.reserve(n);
  for (auto &[c, list] : by_class) {
    auto picked = subsample(list, quota[c], mix_seed({seed, static_cast<std::uint64_t>(c)}));
    for (auto &s : picked)
      out.push_back(std::move(s));
  }
  return subsample(out, out.size(), seed);
}

Split split_holdout(const SampleList &samples, std::size_t n_test, std::uint64_t seed) {
  if (samples.size() <= n_test)
    throw DataError("holdout of " + std::to_string(n_test) + " needs more than " +
                    std::to_string(samples.size()) + " samples");
  std::vector<std::size_t> idx(samples.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<bool> in_test(samples.size(), false);
  for (std::size_t i = 0; i < n_test; ++i)
    in_test[idx[i]] = true;
  Split s;
  s.train.reserve(samples.size() - n_test);
  s.test.reserve(n_test);
  for (std::size_t i = 0; i < samples.size(); ++i)
    (in_test[i] ? s.test : s.train).push_back(samples[i]);
  return s;
}

namespace {

using Rgb = std::array<float, 3>;

Rgb random_color(std::mt19937_64 &rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  return {u(rng), u(rng), u(rng)};
}

std::pair<Rgb, Rgb> contrasting_colors(std::mt19937_64 &rng) {
  const Rgb a = random_color(rng);
  Rgb b;
  do {
    b = random_color(rng);
  } while (std::abs(a[0] - b[0]) + std::abs(a[1] - b[1]) + std::abs(a[2] - b[2]) < 0.6f);
  return {a, b};
}

/// Fills img with mix(c0, c1, w(y, x)) plus small pixel noise, clamped.
template <typename W>
void paint(Image &img, const Rgb &c0, const Rgb &c1, W &&w, std::mt19937_64 &rng) {
  std::normal_distribution<float> noise(0.0f, 0.02f);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const float t = w(y, x);
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = std::clamp(c0[c] * (1.0f - t) + c1[c] * t + noise(rng), 0.0f, 1.0f);
    }
}

/// Foreground/background trimap with every pixel that touches the other
/// region (8-neighbourhood) marked unknown; the band is two pixels wide.
Trimap trimap_from_mask(const std::vector<std::uint8_t> &fg, int size) {
  Trimap t(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const bool inside = fg[static_cast<std::size_t>(y) * size + x];
      bool edge = false;
      for (int dy = -1; dy <= 1 && !edge; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || xx < 0 || yy >= size || xx >= size)
            continue;
          if (static_cast<bool>(fg[static_cast<std::size_t>(yy) * size + xx]) != inside) {
            edge = true;
            break;
          }
        }
      t.at(y, x) = edge ? kUnknown : (inside ? kForeground : kBackground);
    }
  return t;
}

Sample synth_shape(std::mt19937_64 &rng, int size) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (;;) {
    const auto [bg, fg_color] = contrasting_colors(rng);
    const bool ellipse = u(rng) < 0.5;
    const double cx = size * (0.3 + 0.4 * u(rng));
    const double cy = size * (0.3 + 0.4 * u(rng));
    const double a = size * (0.15 + 0.2 * u(rng));
    const double b = size * (0.15 + 0.2 * u(rng));
    const double angle = std::numbers::pi * u(rng);
    const double ca = std::cos(angle), sa = std::sin(angle);
    std::vector<std::uint8_t> fg(static_cast<std::size_t>(size) * size);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        bool in;
        if (ellipse) {
          const double p = (ca * dx + sa * dy) / a, q = (-sa * dx + ca * dy) / b;
          in = p * p + q * q <= 1.0;
        } else {
          in = std::abs(dx) <= a && std::abs(dy) <= b;
        }
        fg[static_cast<std::size_t>(y) * size + x] = in;
      }
    Trimap t = trimap_from_mask(fg, size);
    const auto has = [&](std::uint8_t v) {
      return std::find(t.labels.begin(), t.labels.end(), v) != t.labels.end();
    };
    if (!has(kForeground) || !has(kBackground) || !has(kUnknown))
      continue;
    Image img(3, size, size);
    paint(img, bg, fg_color,
          [&](int y, int x) { return fg[static_cast<std::size_t>(y) * size + x] ? 1.0f : 0.0f; },
          rng);
    return {std::move(img), std::move(t)};
  }
}

Sample synth_texture(std::mt19937_64 &rng, int size, int label) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto [c0, c1] = contrasting_colors(rng);
  const double period = size / (3.0 + 5.0 * u(rng));
  const double k = 2.0 * std::numbers::pi / period;
  const double phase = 2.0 * std::numbers::pi * u(rng);
  const double ox = size * u(rng), oy = size * u(rng);
  auto wave = [](double v) { return static_cast<float>(0.5 + 0.5 * std::sin(v)); };
  Image img(3, size, size);
  auto w = [&](int y, int x) -> float {
    switch (label) {
    case 0: // horizontal stripes
      return wave(k * y + phase);
    case 1: // vertical stripes
      return wave(k * x + phase);
    case 2: // checkerboard
      return (std::sin(k * x + phase) > 0) == (std::sin(k * y + phase) > 0) ? 1.0f : 0.0f;
    case 3: // diagonal stripes
      return wave(k * (x + y) / std::numbers::sqrt2 + phase);
    case 4: // rings
      return wave(k * std::hypot(x - ox, y - oy) + phase);
    default: // dot lattice
      return wave(k * x + phase) * wave(k * y + phase);
    }
  };
  paint(img, c0, c1, w, rng);
  return {std::move(img), label};
}

} // namespace

SampleList synth_generate(DataKind kind, std::size_t n, std::uint64_t seed, int image_size) {
  if (image_size < 8)
    throw std::invalid_argument("synthetic images need at least 8 pixels per side");
  SampleList out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::mt19937_64 rng(mix_seed({seed, static_cast<std::uint64_t>(kind), i}));
    switch (kind) {
    case DataKind::unlabeled: {
      Sample s = synth_shape(rng, image_size);
      s.label = std::monostate{};
      out.push_back(std::move(s));
      break;
    }
    case DataKind::classification:
      out.push_back(synth_texture(rng, image_size, static_cast<int>(i % kIntermediateClasses)));
      break;
    case DataKind::segmentation:
      out.push_back(synth_shape(rng, image_size));
      break;
    }
  }
  return out;
}

SampleList load_dataset(const DatasetSpec &spec, int image_size, LoadReport *report,
                        const std::string &data_root) {
  if (spec.synthetic()) {
    if (!spec.size_limit)
      throw DataError("synthetic dataset needs a size");
    if (report)
      *report = {*spec.size_limit, 0, {}};
    return synth_generate(spec.kind, *spec.size_limit, spec.seed, image_size);
  }
  SampleList all = load_folder(spec, image_size, report, data_root);
  if (!spec.size_limit || *spec.size_limit == all.size())
    return all;
  return spec.class_balanced ? subsample_balanced(all, *spec.size_limit, spec.seed)
                             : subsample(all, *spec.size_limit, spec.seed);
}

} // namespace viny
