#include <algorithm>
#include <cmath>
#include <numbers>

#include "xray/image.hpp"

namespace xray {

namespace {

std::uint8_t round_u8(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
}

// Bilinear sample at continuous pixel-index coordinates with border replication.
double sample_bilinear(const ImageBuffer& img, double sy, double sx, std::size_t c) {
  const double max_y = static_cast<double>(img.height - 1);
  const double max_x = static_cast<double>(img.width - 1);
  sy = std::clamp(sy, 0.0, max_y);
  sx = std::clamp(sx, 0.0, max_x);
  const auto y0 = static_cast<std::size_t>(std::floor(sy));
  const auto x0 = static_cast<std::size_t>(std::floor(sx));
  const std::size_t y1 = std::min(y0 + 1, img.height - 1);
  const std::size_t x1 = std::min(x0 + 1, img.width - 1);
  const double wy = sy - static_cast<double>(y0);
  const double wx = sx - static_cast<double>(x0);
  const double top = (1.0 - wx) * img.at(y0, x0, c) + wx * img.at(y0, x1, c);
  const double bottom = (1.0 - wx) * img.at(y1, x0, c) + wx * img.at(y1, x1, c);
  return (1.0 - wy) * top + wy * bottom;
}

// Resamples the window [y_off, y_off + win_h) x [x_off, x_off + win_w) of the
// source (continuous pixel units) onto an out_h x out_w grid, half-pixel centers.
ImageBuffer resample_window(const ImageBuffer& img, double y_off, double x_off, double win_h,
                            double win_w, std::size_t out_h, std::size_t out_w) {
  ImageBuffer out(out_h, out_w, img.channels);
  const double sy_scale = win_h / static_cast<double>(out_h);
  const double sx_scale = win_w / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double sy = y_off + (static_cast<double>(y) + 0.5) * sy_scale - 0.5;
    for (std::size_t x = 0; x < out_w; ++x) {
      const double sx = x_off + (static_cast<double>(x) + 0.5) * sx_scale - 0.5;
      for (std::size_t c = 0; c < img.channels; ++c) {
        out.at(y, x, c) = round_u8(sample_bilinear(img, sy, sx, c));
      }
    }
  }
  return out;
}

// Rotation by `angle_deg` (counter-clockwise on screen) and zoom `scale` about the center.
ImageBuffer warp_rotate_zoom(const ImageBuffer& img, double angle_deg, double scale) {
  ImageBuffer out(img.height, img.width, img.channels);
  const double theta = angle_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  const double cy = static_cast<double>(img.height) / 2.0;
  const double cx = static_cast<double>(img.width) / 2.0;
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const double dy = (static_cast<double>(y) + 0.5 - cy) / scale;
      const double dx = (static_cast<double>(x) + 0.5 - cx) / scale;
      // inverse map: rotate the destination offset by -theta
      const double sx = cs * dx - sn * dy + cx - 0.5;
      const double sy = sn * dx + cs * dy + cy - 0.5;
      for (std::size_t c = 0; c < img.channels; ++c) {
        out.at(y, x, c) = round_u8(sample_bilinear(img, sy, sx, c));
      }
    }
  }
  return out;
}

}  // namespace

ImageBuffer to_gray(const ImageBuffer& img) {
  if (img.channels == 1) return img;
  ImageBuffer out(img.height, img.width, 1);
  for (std::size_t i = 0; i < img.height * img.width; ++i) {
    const auto* p = &img.pixels[i * 3];
    out.pixels[i] = round_u8(0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]);
  }
  return out;
}

ImageBuffer to_rgb(const ImageBuffer& img) {
  if (img.channels == 3) return img;
  ImageBuffer out(img.height, img.width, 3);
  for (std::size_t i = 0; i < img.height * img.width; ++i) {
    std::fill_n(&out.pixels[i * 3], 3, img.pixels[i]);
  }
  return out;
}

ImageBuffer resize_bilinear(const ImageBuffer& img, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw std::invalid_argument("resize_bilinear: zero output extent");
  if (out_h == img.height && out_w == img.width) return img;
  return resample_window(img, 0.0, 0.0, static_cast<double>(img.height),
                         static_cast<double>(img.width), out_h, out_w);
}

ImageBuffer rotate_quarter(const ImageBuffer& img, int turns) {
  turns = ((turns % 4) + 4) % 4;
  if (turns == 0) return img;
  const std::size_t H = img.height, W = img.width, C = img.channels;
  const bool swap = turns % 2 == 1;
  ImageBuffer out(swap ? W : H, swap ? H : W, C);
  for (std::size_t y = 0; y < out.height; ++y) {
    for (std::size_t x = 0; x < out.width; ++x) {
      std::size_t sy = 0, sx = 0;
      switch (turns) {
        case 1: sy = H - 1 - x; sx = y; break;
        case 2: sy = H - 1 - y; sx = W - 1 - x; break;
        case 3: sy = x; sx = W - 1 - y; break;
      }
      for (std::size_t c = 0; c < C; ++c) out.at(y, x, c) = img.at(sy, sx, c);
    }
  }
  return out;
}

ImageBuffer flip_horizontal(const ImageBuffer& img) {
  ImageBuffer out = img;
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < img.channels; ++c) {
        out.at(y, x, c) = img.at(y, img.width - 1 - x, c);
      }
    }
  }
  return out;
}

Tensor normalize(const ImageBuffer& img, NormalizationMode mode) {
  const ImageBuffer& src = img;
  ImageBuffer rgb;
  const ImageBuffer* use = &src;
  if (mode == NormalizationMode::imagenet_stats && img.channels == 1) {
    rgb = to_rgb(img);
    use = &rgb;
  }
  const std::size_t C = use->channels, H = use->height, W = use->width;
  Tensor out({C, H, W});
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        float v = static_cast<float>(use->at(y, x, c)) / 255.0f;
        if (mode == NormalizationMode::imagenet_stats) {
          v = (v - kImagenetMean[c]) / kImagenetStd[c];
        }
        out[(c * H + y) * W + x] = v;
      }
    }
  }
  return out;
}

AugmentSpec AugmentSpec::filter_defaults() {
  AugmentSpec s;
  s.pipeline = AugmentPipeline::filter;
  s.max_rotation_deg = 5.0;
  s.max_zoom_fraction = 0.10;
  return s;
}

AugmentSpec AugmentSpec::classifier_defaults() {
  AugmentSpec s;
  s.pipeline = AugmentPipeline::classifier;
  s.max_rotation_deg = 10.0;
  s.max_zoom_fraction = 0.10;
  s.hflip_prob = 0.5;
  s.brightness_delta = 0.2;
  s.top_occlusion_max_fraction = 0.15;
  s.crop_scale_range = {0.85, 1.0};
  return s;
}

AugmentSpec AugmentSpec::none() { return AugmentSpec{}; }

void AugmentSpec::validate() const {
  auto unit = [](double v, const char* what) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw std::invalid_argument(std::string("AugmentSpec: ") + what + " outside [0,1]");
    }
  };
  unit(max_zoom_fraction, "max_zoom_fraction");
  unit(hflip_prob, "hflip_prob");
  unit(brightness_delta, "brightness_delta");
  unit(top_occlusion_max_fraction, "top_occlusion_max_fraction");
  unit(crop_scale_range.first, "crop_scale_range.lo");
  unit(crop_scale_range.second, "crop_scale_range.hi");
  if (crop_scale_range.first > crop_scale_range.second || crop_scale_range.first <= 0.0) {
    throw std::invalid_argument("AugmentSpec: crop_scale_range must satisfy 0 < lo <= hi");
  }
  if (max_rotation_deg < 0.0) throw std::invalid_argument("AugmentSpec: negative rotation");
}

ImageBuffer augment(const ImageBuffer& img, const AugmentSpec& spec, Rng& rng) {
  spec.validate();
  // Fixed draw order keeps streams aligned across specs.
  const bool flip = rng.uniform() < spec.hflip_prob;
  const double angle = rng.uniform(-1.0, 1.0) * spec.max_rotation_deg;
  const double zoom = 1.0 + rng.uniform(-1.0, 1.0) * spec.max_zoom_fraction;
  const double crop = rng.uniform(spec.crop_scale_range.first, spec.crop_scale_range.second);
  const double crop_u = rng.uniform();
  const double crop_v = rng.uniform();
  const double brightness = rng.uniform(-1.0, 1.0) * spec.brightness_delta;
  const double occlusion = rng.uniform() * spec.top_occlusion_max_fraction;

  ImageBuffer out = flip ? flip_horizontal(img) : img;
  if (angle != 0.0 || zoom != 1.0) out = warp_rotate_zoom(out, angle, zoom);
  if (crop < 1.0) {
    const double win_h = crop * static_cast<double>(out.height);
    const double win_w = crop * static_cast<double>(out.width);
    const double y_off = crop_v * (static_cast<double>(out.height) - win_h);
    const double x_off = crop_u * (static_cast<double>(out.width) - win_w);
    out = resample_window(out, y_off, x_off, win_h, win_w, out.height, out.width);
  }
  if (brightness != 0.0) {
    const double shift = brightness * 255.0;
    for (auto& p : out.pixels) p = round_u8(p + shift);
  }
  const auto rows = static_cast<std::size_t>(occlusion * static_cast<double>(out.height));
  for (std::size_t y = 0; y < rows; ++y) {
    std::fill_n(&out.pixels[y * out.width * out.channels], out.width * out.channels, 0);
  }
  return out;
}

}  // namespace xray
