#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "xray/rng.hpp"
#include "xray/tensor.hpp"

namespace xray {

/// 8-bit image, row-major with interleaved channels (1 = gray, 3 = RGB).
struct ImageBuffer {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> pixels;

  ImageBuffer() = default;
  ImageBuffer(std::size_t h, std::size_t w, std::size_t c, std::uint8_t fill = 0);
  ImageBuffer(std::size_t h, std::size_t w, std::size_t c, std::vector<std::uint8_t> px);

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c = 0) {
    return pixels[(y * width + x) * channels + c];
  }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c = 0) const {
    return pixels[(y * width + x) * channels + c];
  }

  friend bool operator==(const ImageBuffer&, const ImageBuffer&) = default;
};

/// Undecodable input. `format()` is the container sniffed from magic bytes
/// ("png", "jpeg", "gif", "bmp", "text", "unknown").
class NotAnImage : public std::runtime_error {
 public:
  NotAnImage(std::string sniffed_format, const std::string& detail);
  const std::string& format() const noexcept { return format_; }

 private:
  std::string format_;
};

std::string sniff_format(std::string_view bytes);

/// PNG and JPEG. Gray(+alpha) decodes to 1 channel, everything else to RGB.
ImageBuffer decode_image(std::string_view bytes);
std::string encode_png(const ImageBuffer& img);
std::string encode_jpeg(const ImageBuffer& img, int quality = 90);

ImageBuffer to_gray(const ImageBuffer& img);
ImageBuffer to_rgb(const ImageBuffer& img);

/// Bilinear resampling with half-pixel centers: output pixel (y, x) samples the
/// source at ((y + 0.5) * in_h / out_h - 0.5, ...) clamped to the image, and the
/// interpolated value is rounded half up.
ImageBuffer resize_bilinear(const ImageBuffer& img, std::size_t out_h, std::size_t out_w);

/// Lossless clockwise quarter turns.
ImageBuffer rotate_quarter(const ImageBuffer& img, int turns);

ImageBuffer flip_horizontal(const ImageBuffer& img);

enum class NormalizationMode { unit_interval, imagenet_stats };

inline constexpr float kImagenetMean[3] = {0.485f, 0.456f, 0.406f};
inline constexpr float kImagenetStd[3] = {0.229f, 0.224f, 0.225f};

/// [C,H,W] tensor. imagenet_stats replicates gray input to three channels.
Tensor normalize(const ImageBuffer& img, NormalizationMode mode);

enum class AugmentPipeline { filter, classifier };

struct AugmentSpec {
  AugmentPipeline pipeline = AugmentPipeline::filter;
  double max_rotation_deg = 0.0;
  double max_zoom_fraction = 0.0;
  double hflip_prob = 0.0;
  double brightness_delta = 0.0;
  double top_occlusion_max_fraction = 0.0;
  std::pair<double, double> crop_scale_range{1.0, 1.0};

  static AugmentSpec filter_defaults();
  static AugmentSpec classifier_defaults();
  static AugmentSpec none();
  void validate() const;
};

/// Random transforms in fixed order: horizontal flip, rotation + zoom about the
/// center (bilinear, border replication), crop then resize back, additive
/// brightness, black band over the top rows. Every call consumes the same number
/// of draws regardless of which magnitudes are zero.
ImageBuffer augment(const ImageBuffer& img, const AugmentSpec& spec, Rng& rng);

}  // namespace xray
