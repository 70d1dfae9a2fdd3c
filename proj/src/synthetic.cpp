#include <algorithm>
#include <cmath>

#include "xray/checkpoint.hpp"
#include "xray/synthetic.hpp"

namespace xray {

namespace {

std::uint8_t clamp_u8(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
}

}  // namespace

ImageBuffer synth_upright(std::size_t size, Rng& rng) {
  if (size < 8) throw std::invalid_argument("synth_upright: size must be >= 8");
  ImageBuffer img(size, size, 1);
  const double s = static_cast<double>(size);
  const double top = rng.uniform(190.0, 240.0);
  const double bottom = rng.uniform(40.0, 80.0);
  const double cx = s * rng.uniform(0.46, 0.54);
  const double lung_dx = s * rng.uniform(0.18, 0.24);
  const double lung_cy = s * rng.uniform(0.52, 0.62);
  const double lung_rx = s * rng.uniform(0.11, 0.15);
  const double lung_ry = s * rng.uniform(0.22, 0.28);
  const double noise = rng.uniform(4.0, 12.0);
  for (std::size_t y = 0; y < size; ++y) {
    const double fy = (static_cast<double>(y) + 0.5) / s;
    for (std::size_t x = 0; x < size; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      double v = top + (bottom - top) * fy;
      for (double side : {-1.0, 1.0}) {
        const double ex = (px - (cx + side * lung_dx)) / lung_rx;
        const double ey = (py - lung_cy) / lung_ry;
        if (ex * ex + ey * ey < 1.0) v *= 0.45;
      }
      if (std::abs(px - cx) < s * 0.03 && fy > 0.2) v = std::max(v, 200.0);
      img.at(y, x) = clamp_u8(v + noise * rng.normal());
    }
  }
  return img;
}

ImageBuffer synth_blob(std::size_t cls, std::size_t size, Rng& rng) {
  static constexpr double kLevels[3] = {60.0, 128.0, 196.0};
  if (cls > 2) throw std::invalid_argument("synth_blob: class must be 0, 1 or 2");
  if (size < 8) throw std::invalid_argument("synth_blob: size must be >= 8");
  ImageBuffer img(size, size, 3);
  const double s = static_cast<double>(size);
  const double r = s * rng.uniform(0.2, 0.3);
  const double cy = rng.uniform(r, s - r), cx = rng.uniform(r, s - r);
  const double bg = rng.uniform(20.0, 40.0);
  const double level = kLevels[cls] + rng.uniform(-12.0, 12.0);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
      const double v = (dy * dy + dx * dx < r * r ? level : bg) + 8.0 * rng.normal();
      const auto u = clamp_u8(v);
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = u;
    }
  }
  return img;
}

InMemoryDataset make_filter_dataset(std::size_t per_class, std::size_t size, std::uint64_t seed) {
  Rng rng(seed);
  InMemoryDataset ds;
  for (std::size_t i = 0; i < per_class; ++i) {
    ds.add(synth_upright(size, rng), 0, "upright_" + std::to_string(i));
    const int turns = 1 + static_cast<int>(rng.below(3));
    ds.add(rotate_quarter(synth_upright(size, rng), turns), 1,
           "turned_" + std::to_string(i) + "_r" + std::to_string(turns));
  }
  return ds;
}

InMemoryDataset make_blob_dataset(const std::vector<std::size_t>& counts, std::size_t size,
                                  std::uint64_t seed) {
  Rng rng(seed);
  InMemoryDataset ds;
  const std::size_t longest = counts.empty() ? 0 : *std::max_element(counts.begin(), counts.end());
  // Interleaved so that a prefix holds every class.
  for (std::size_t i = 0; i < longest; ++i) {
    for (std::size_t c = 0; c < counts.size(); ++c) {
      if (i < counts[c]) {
        ds.add(synth_blob(c, size, rng), c, "blob_c" + std::to_string(c) + "_" + std::to_string(i));
      }
    }
  }
  return ds;
}

Manifest write_synthetic_corpus(const std::filesystem::path& dir, Task task,
                                const std::vector<std::size_t>& counts, std::size_t size,
                                std::uint64_t seed, std::size_t images_per_patient) {
  if (images_per_patient == 0) throw std::invalid_argument("images_per_patient must be >= 1");
  Rng rng(seed);
  Manifest m;
  m.task = task;
  m.base_dir = dir;
  std::size_t serial = 0;
  auto emit = [&](const ImageBuffer& img, Label label) {
    SampleRecord r;
    const std::string name = "img_" + std::to_string(serial) + ".png";
    write_file_bytes(dir / "images" / name, encode_png(img));
    r.image_path = "images/" + name;
    r.dataset_id = DatasetId::local;
    r.patient_id = "p" + std::to_string(serial / images_per_patient);
    r.label = label;
    r.view = View::PA;
    m.records.push_back(std::move(r));
    ++serial;
  };
  if (task == Task::filter) {
    const std::size_t n = counts.empty() ? 0 : counts[0];
    for (std::size_t i = 0; i < n; ++i) {
      emit(synth_upright(size, rng), Label::valid);
      emit(rotate_quarter(synth_upright(size, rng), 1 + static_cast<int>(rng.below(3))),
           Label::nonvalid);
    }
  } else {
    static constexpr Label kLabels[3] = {Label::no_finding, Label::lung_opacity, Label::covid19};
    if (counts.size() > 3) throw std::invalid_argument("write_synthetic_corpus: at most 3 classes");
    for (std::size_t c = 0; c < counts.size(); ++c) {
      for (std::size_t i = 0; i < counts[c]; ++i) emit(synth_blob(c, size, rng), kLabels[c]);
    }
  }
  save_manifest(dir / "manifest.csv", m);
  return m;
}

}  // namespace xray
