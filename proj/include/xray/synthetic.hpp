#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "xray/dataset.hpp"
#include "xray/image.hpp"
#include "xray/rng.hpp"

namespace xray {

/// Gray chest-like pattern: bright top fading downwards, two dark vertical lung
/// ellipses, a bright spine column and pixel noise. Geometry is jittered per draw.
ImageBuffer synth_upright(std::size_t size, Rng& rng);

/// Noisy background with one disc whose mean intensity identifies the class
/// (0: 60, 1: 128, 2: 196). RGB with equal channels.
ImageBuffer synth_blob(std::size_t cls, std::size_t size, Rng& rng);

/// Label 0 = upright (valid), 1 = quarter-turned by 1..3 (nonvalid).
InMemoryDataset make_filter_dataset(std::size_t per_class, std::size_t size, std::uint64_t seed);

/// counts[c] blob images of class c.
InMemoryDataset make_blob_dataset(const std::vector<std::size_t>& counts, std::size_t size,
                                  std::uint64_t seed);

/// Writes PNG files plus `manifest.csv` under `dir` and returns the manifest.
/// Filter task: `per_class` upright images labeled valid and as many rotated
/// copies labeled nonvalid. Classifier task: blob images for no_finding,
/// lung_opacity and covid19 with counts from `counts`. Each patient owns
/// `images_per_patient` consecutive images.
Manifest write_synthetic_corpus(const std::filesystem::path& dir, Task task,
                                const std::vector<std::size_t>& counts, std::size_t size,
                                std::uint64_t seed, std::size_t images_per_patient = 1);

}  // namespace xray
