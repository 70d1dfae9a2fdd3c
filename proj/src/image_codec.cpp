#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <memory>

#include <jpeglib.h>
#include <png.h>

#include "xray/image.hpp"

namespace xray {

ImageBuffer::ImageBuffer(std::size_t h, std::size_t w, std::size_t c, std::uint8_t fill)
    : height(h), width(w), channels(c), pixels(h * w * c, fill) {
  if (h == 0 || w == 0) throw std::invalid_argument("ImageBuffer: zero extent");
  if (c != 1 && c != 3) throw std::invalid_argument("ImageBuffer: channels must be 1 or 3");
}

ImageBuffer::ImageBuffer(std::size_t h, std::size_t w, std::size_t c, std::vector<std::uint8_t> px)
    : height(h), width(w), channels(c), pixels(std::move(px)) {
  if (h == 0 || w == 0) throw std::invalid_argument("ImageBuffer: zero extent");
  if (c != 1 && c != 3) throw std::invalid_argument("ImageBuffer: channels must be 1 or 3");
  if (pixels.size() != h * w * c) {
    throw std::invalid_argument("ImageBuffer: pixel count " + std::to_string(pixels.size()) +
                                " != " + std::to_string(h * w * c));
  }
}

NotAnImage::NotAnImage(std::string sniffed_format, const std::string& detail)
    : std::runtime_error("not an image (sniffed " + sniffed_format + "): " + detail),
      format_(std::move(sniffed_format)) {}

std::string sniff_format(std::string_view b) {
  auto starts = [&](std::string_view magic) { return b.substr(0, magic.size()) == magic; };
  if (starts("\x89PNG\r\n\x1a\n")) return "png";
  if (starts("\xFF\xD8\xFF")) return "jpeg";
  if (starts("GIF87a") || starts("GIF89a")) return "gif";
  if (starts("BM")) return "bmp";
  if (b.empty()) return "empty";
  bool printable = true;
  for (std::size_t i = 0; i < std::min<std::size_t>(b.size(), 512); ++i) {
    const auto c = static_cast<unsigned char>(b[i]);
    if (c < 0x09 || (c > 0x0D && c < 0x20)) {
      printable = false;
      break;
    }
  }
  return printable ? "text" : "unknown";
}

namespace {

ImageBuffer decode_png(std::string_view bytes) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw NotAnImage("png", image.message);
  }
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  ImageBuffer out;
  out.height = image.height;
  out.width = image.width;
  out.channels = color ? 3 : 1;
  out.pixels.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw NotAnImage("png", msg);
  }
  if (out.height == 0 || out.width == 0) throw NotAnImage("png", "zero-sized image");
  return out;
}

struct JpegErrorContext {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* ctx = reinterpret_cast<JpegErrorContext*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, ctx->message);
  std::longjmp(ctx->jump, 1);
}

// Warnings (premature EOF, corrupt segments) are fatal: a partial decode is not an image.
void jpeg_emit_message(j_common_ptr cinfo, int level) {
  if (level < 0) jpeg_error_exit(cinfo);
}

ImageBuffer decode_jpeg(std::string_view bytes) {
  jpeg_decompress_struct cinfo;
  JpegErrorContext err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  err.mgr.emit_message = jpeg_emit_message;
  // Kept outside the setjmp scope so longjmp does not skip its destructor.
  ImageBuffer out;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw NotAnImage("jpeg", err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, reinterpret_cast<const unsigned char*>(bytes.data()),
               static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = cinfo.num_components == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(&cinfo);
  out.height = cinfo.output_height;
  out.width = cinfo.output_width;
  out.channels = static_cast<std::size_t>(cinfo.output_components);
  out.pixels.resize(out.height * out.width * out.channels);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = out.pixels.data() + cinfo.output_scanline * out.width * out.channels;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return out;
}

}  // namespace

ImageBuffer decode_image(std::string_view bytes) {
  const std::string fmt = sniff_format(bytes);
  if (fmt == "png") return decode_png(bytes);
  if (fmt == "jpeg") return decode_jpeg(bytes);
  throw NotAnImage(fmt, "unsupported or unrecognized container");
}

std::string encode_png(const ImageBuffer& img) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, img.pixels.data(), 0, nullptr)) {
    throw std::runtime_error(std::string("png encode failed: ") + image.message);
  }
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, img.pixels.data(), 0, nullptr)) {
    throw std::runtime_error(std::string("png encode failed: ") + image.message);
  }
  out.resize(size);
  return out;
}

std::string encode_jpeg(const ImageBuffer& img, int quality) {
  jpeg_compress_struct cinfo;
  JpegErrorContext err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  unsigned char* buffer = nullptr;
  unsigned long size = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_compress(&cinfo);
    std::free(buffer);
    throw std::runtime_error(std::string("jpeg encode failed: ") + err.message);
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, &buffer, &size);
  cinfo.image_width = static_cast<JDIMENSION>(img.width);
  cinfo.image_height = static_cast<JDIMENSION>(img.height);
  cinfo.input_components = static_cast<int>(img.channels);
  cinfo.in_color_space = img.channels == 3 ? JCS_RGB : JCS_GRAYSCALE;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW row = const_cast<std::uint8_t*>(img.pixels.data()) +
                   cinfo.next_scanline * img.width * img.channels;
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  std::string out(reinterpret_cast<char*>(buffer), size);
  jpeg_destroy_compress(&cinfo);
  std::free(buffer);
  return out;
}

}  // namespace xray
