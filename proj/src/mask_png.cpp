// 8-bit grayscale PNG masks via libpng.

#include <png.h>

#include <cstdio>
#include <memory>

#include "tsad/error.hpp"
#include "tsad/feature_store.hpp"

namespace tsad {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const fs::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw DataError("cannot open " + path.string());
  return f;
}

[[noreturn]] void png_fail(png_structp png, png_const_charp msg) {
  auto* where = static_cast<std::string*>(png_get_error_ptr(png));
  *where = msg;
  png_longjmp(png, 1);
}

void png_warn(png_structp, png_const_charp) {}

class PngReader {
 public:
  explicit PngReader(const fs::path& path) : path_(path), file_(open_file(path, "rb")) {
    png_byte sig[8];
    if (std::fread(sig, 1, 8, file_.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
      throw DataError("mask " + path.string() + " is not a PNG file");
    }
    png_ = png_create_read_struct(PNG_LIBPNG_VER_STRING, &error_, png_fail, png_warn);
    info_ = png_create_info_struct(png_);
    if (!png_ || !info_) throw DataError("libpng initialisation failed");
    png_init_io(png_, file_.get());
    png_set_sig_bytes(png_, 8);
  }
  ~PngReader() { png_destroy_read_struct(&png_, &info_, nullptr); }
  PngReader(const PngReader&) = delete;
  PngReader& operator=(const PngReader&) = delete;

  ImageDims read_info() {
    if (setjmp(png_jmpbuf(png_))) throw DataError("mask " + path_.string() + ": " + error_);
    png_read_info(png_, info_);
    const int depth = png_get_bit_depth(png_, info_);
    const int color = png_get_color_type(png_, info_);
    if (color != PNG_COLOR_TYPE_GRAY) {
      throw DataError("mask " + path_.string() + ": unsupported color type (need grayscale)");
    }
    if (depth != 8) {
      throw DataError("mask " + path_.string() + ": unsupported bit depth " +
                      std::to_string(depth) + " (need 8)");
    }
    return {png_get_image_height(png_, info_), png_get_image_width(png_, info_)};
  }

  Mask read_pixels(ImageDims dims) {
    std::vector<png_byte> row(dims.w);
    Mask mask(dims.h, dims.w);
    if (setjmp(png_jmpbuf(png_))) throw DataError("mask " + path_.string() + ": " + error_);
    for (std::uint32_t r = 0; r < dims.h; ++r) {
      png_read_row(png_, row.data(), nullptr);
      for (std::uint32_t c = 0; c < dims.w; ++c) mask(r, c) = row[c] > 0 ? 1 : 0;
    }
    return mask;
  }

 private:
  fs::path path_;
  FilePtr file_;
  std::string error_;
  png_structp png_ = nullptr;
  png_infop info_ = nullptr;
};

}  // namespace

ImageDims read_mask_dims(const fs::path& path) {
  PngReader reader(path);
  return reader.read_info();
}

Mask read_mask(const fs::path& path, ImageDims expected) {
  PngReader reader(path);
  const ImageDims dims = reader.read_info();
  if (dims != expected) {
    throw DataError("mask " + path.string() + " is " + std::to_string(dims.h) + "x" +
                    std::to_string(dims.w) + ", expected " + std::to_string(expected.h) +
                    "x" + std::to_string(expected.w) + " (masks are never resampled)");
  }
  return reader.read_pixels(dims);
}

void write_mask(const Mask& mask, const fs::path& path) {
  FilePtr file = open_file(path, "wb");
  std::string error;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &error, png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  if (!png || !info) throw DataError("libpng initialisation failed");
  std::vector<png_byte> row(mask.cols());
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("writing " + path.string() + ": " + error);
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(mask.cols()),
               static_cast<png_uint_32>(mask.rows()), 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t r = 0; r < mask.rows(); ++r) {
    for (std::size_t c = 0; c < mask.cols(); ++c) row[c] = mask(r, c) ? 255 : 0;
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace tsad
