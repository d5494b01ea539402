#include "wseg/png_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>

#include "wseg/errors.hpp"

namespace wseg {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::string& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw DataError("cannot open file: " + path);
  return f;
}

struct PngReader {
  png_structp png = nullptr;
  png_infop info = nullptr;

  PngReader() {
    png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (png) info = png_create_info_struct(png);
    if (!png || !info) throw Error("libpng allocation failed");
  }
  ~PngReader() { png_destroy_read_struct(&png, &info, nullptr); }
};

struct PngWriter {
  png_structp png = nullptr;
  png_infop info = nullptr;

  PngWriter() {
    png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (png) info = png_create_info_struct(png);
    if (!png || !info) throw Error("libpng allocation failed");
  }
  ~PngWriter() { png_destroy_write_struct(&png, &info); }
};

// Reads an arbitrary PNG into packed rows of `want_channels` bytes per
// pixel (1 = raw index/gray values kept as-is, 3 = forced RGB8).
std::vector<std::uint8_t> read_png_rows(const std::string& path, int want_channels, int* out_h,
                                        int* out_w) {
  FilePtr f = open_file(path, "rb");
  std::uint8_t sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8))
    throw DataError("unsupported format (not a PNG): " + path);

  PngReader r;
  if (setjmp(png_jmpbuf(r.png))) throw DataError("corrupt PNG: " + path);
  png_init_io(r.png, f.get());
  png_set_sig_bytes(r.png, 8);
  png_read_info(r.png, r.info);

  png_uint_32 w = png_get_image_width(r.png, r.info);
  png_uint_32 h = png_get_image_height(r.png, r.info);
  int bit_depth = png_get_bit_depth(r.png, r.info);
  int color_type = png_get_color_type(r.png, r.info);
  if (w == 0 || h == 0) throw DataError("zero-size image: " + path);

  if (want_channels == 3) {
    if (bit_depth == 16) png_set_strip_16(r.png);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(r.png);
    if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA) {
      if (bit_depth < 8) png_set_expand_gray_1_2_4_to_8(r.png);
      png_set_gray_to_rgb(r.png);
    }
    if (png_get_valid(r.png, r.info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(r.png);
    png_set_strip_alpha(r.png);
  } else {
    // Keep raw index values: palettes must not be applied to label masks.
    if (color_type != PNG_COLOR_TYPE_GRAY && color_type != PNG_COLOR_TYPE_PALETTE)
      throw DataError("mask must be a single-channel indexed PNG: " + path);
    if (bit_depth == 16) png_set_strip_16(r.png);
    if (bit_depth < 8) png_set_packing(r.png);
  }
  png_set_interlace_handling(r.png);
  png_read_update_info(r.png, r.info);

  size_t rowbytes = png_get_rowbytes(r.png, r.info);
  if (rowbytes != static_cast<size_t>(w) * want_channels)
    throw DataError("unsupported PNG layout: " + path);

  std::vector<std::uint8_t> data(static_cast<size_t>(h) * rowbytes);
  std::vector<png_bytep> rows(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = data.data() + y * rowbytes;
  png_read_image(r.png, rows.data());
  png_read_end(r.png, nullptr);

  *out_h = static_cast<int>(h);
  *out_w = static_cast<int>(w);
  return data;
}

void write_png(const std::string& path, int h, int w, int color_type, int bit_depth,
               const std::vector<png_bytep>& rows) {
  FilePtr f = open_file(path, "wb");
  PngWriter wr;
  if (setjmp(png_jmpbuf(wr.png))) throw DataError("PNG write failed: " + path);
  png_init_io(wr.png, f.get());
  png_set_IHDR(wr.png, wr.info, w, h, bit_depth, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(wr.png, wr.info);
  if (bit_depth == 16) png_set_swap(wr.png);  // rows are host little-endian
  png_write_image(wr.png, const_cast<png_bytep*>(rows.data()));
  png_write_end(wr.png, nullptr);
}

}  // namespace

Image load_image(const std::string& path) {
  int h = 0, w = 0;
  std::vector<std::uint8_t> rows = read_png_rows(path, 3, &h, &w);
  Image img(h, w);
  const int hw = h * w;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::uint8_t* px = &rows[(static_cast<size_t>(y) * w + x) * 3];
      img.data[y * w + x] = px[0] / 255.0;
      img.data[hw + y * w + x] = px[1] / 255.0;
      img.data[2 * hw + y * w + x] = px[2] / 255.0;
    }
  }
  return img;
}

void save_image(const Image& image, const std::string& path) {
  const int h = image.height, w = image.width, hw = h * w;
  std::vector<std::uint8_t> buf(static_cast<size_t>(hw) * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        double v = image.data[c * hw + y * w + x];
        v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        buf[(static_cast<size_t>(y) * w + x) * 3 + c] =
            static_cast<std::uint8_t>(v * 255.0 + 0.5);
      }
    }
  }
  std::vector<png_bytep> rows(h);
  for (int y = 0; y < h; ++y) rows[y] = buf.data() + static_cast<size_t>(y) * w * 3;
  write_png(path, h, w, PNG_COLOR_TYPE_RGB, 8, rows);
}

LabelMask load_mask(const std::string& path, int class_count) {
  int h = 0, w = 0;
  std::vector<std::uint8_t> rows = read_png_rows(path, 1, &h, &w);
  LabelMask mask(h, w, class_count);
  mask.labels.assign(rows.begin(), rows.end());
  mask.validate();
  return mask;
}

void save_mask(const LabelMask& mask, const std::string& path) {
  std::vector<png_bytep> rows(mask.height);
  for (int y = 0; y < mask.height; ++y)
    rows[y] = const_cast<png_bytep>(mask.labels.data() + static_cast<size_t>(y) * mask.width);
  write_png(path, mask.height, mask.width, PNG_COLOR_TYPE_GRAY, 8, rows);
}

Gray16 load_gray16(const std::string& path) {
  FilePtr f = open_file(path, "rb");
  std::uint8_t sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8))
    throw DataError("unsupported format (not a PNG): " + path);

  PngReader r;
  if (setjmp(png_jmpbuf(r.png))) throw DataError("corrupt PNG: " + path);
  png_init_io(r.png, f.get());
  png_set_sig_bytes(r.png, 8);
  png_read_info(r.png, r.info);

  if (png_get_color_type(r.png, r.info) != PNG_COLOR_TYPE_GRAY ||
      png_get_bit_depth(r.png, r.info) != 16)
    throw DataError("expected 16-bit grayscale PNG: " + path);

  png_set_swap(r.png);
  png_read_update_info(r.png, r.info);

  Gray16 out;
  out.height = static_cast<int>(png_get_image_height(r.png, r.info));
  out.width = static_cast<int>(png_get_image_width(r.png, r.info));
  out.values.resize(static_cast<size_t>(out.height) * out.width);
  std::vector<png_bytep> rows(out.height);
  for (int y = 0; y < out.height; ++y)
    rows[y] = reinterpret_cast<png_bytep>(out.values.data() + static_cast<size_t>(y) * out.width);
  png_read_image(r.png, rows.data());
  png_read_end(r.png, nullptr);
  return out;
}

void save_gray16(const Gray16& img, const std::string& path) {
  if (img.values.size() != static_cast<size_t>(img.height) * img.width)
    throw DataError("Gray16 buffer size does not match dimensions");
  std::vector<png_bytep> rows(img.height);
  for (int y = 0; y < img.height; ++y)
    rows[y] = reinterpret_cast<png_bytep>(
        const_cast<std::uint16_t*>(img.values.data() + static_cast<size_t>(y) * img.width));
  write_png(path, img.height, img.width, PNG_COLOR_TYPE_GRAY, 16, rows);
}

}  // namespace wseg
