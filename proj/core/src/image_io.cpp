#include "tfl/image_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <vector>

namespace tfl {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

uint16_t to_u16(double v) {
  double c = std::min(1.0, std::max(0.0, v));
  return static_cast<uint16_t>(std::lround(c * 65535.0));
}

uint8_t to_u8(double v) {
  double c = std::min(1.0, std::max(0.0, v));
  return static_cast<uint8_t>(std::lround(c * 255.0));
}

} // namespace

Tensor read_image(const std::string& path) {
  if (ends_with(path, ".png") || ends_with(path, ".PNG")) return read_png(path);
  if (ends_with(path, ".pgm") || ends_with(path, ".PGM")) return read_pgm(path);
  throw IoError("unsupported image extension: " + path);
}

Tensor read_png(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot open " + path);

  png_byte header[8];
  if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8))
    throw IoError(path + " is not a PNG file");

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("libpng init failed");
  }
  std::vector<png_bytep> row_ptrs;
  std::vector<png_byte> pixels;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng failed reading " + path);
  }

  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  png_uint_32 w = png_get_image_width(png, info);
  png_uint_32 h = png_get_image_height(png, info);
  int bit_depth = png_get_bit_depth(png, info);
  int color_type = png_get_color_type(png, info);

  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  bit_depth = png_get_bit_depth(png, info);
  int channels = png_get_channels(png, info);
  if (channels != 1 && channels != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError(path + ": unsupported channel count " + std::to_string(channels));
  }

  size_t rowbytes = png_get_rowbytes(png, info);
  pixels.resize(rowbytes * h);
  row_ptrs.resize(h);
  for (png_uint_32 y = 0; y < h; ++y) row_ptrs[y] = &pixels[y * rowbytes];
  png_read_image(png, row_ptrs.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Tensor out({static_cast<int64_t>(h), static_cast<int64_t>(w), channels});
  auto& ov = out.mutable_data();
  if (bit_depth == 16) {
    // PNG stores 16-bit samples big-endian.
    for (png_uint_32 y = 0; y < h; ++y) {
      const png_byte* row = &pixels[y * rowbytes];
      for (size_t i = 0; i < w * static_cast<size_t>(channels); ++i) {
        uint16_t v = static_cast<uint16_t>((row[2 * i] << 8) | row[2 * i + 1]);
        ov[y * w * channels + i] = v / 65535.0;
      }
    }
  } else {
    for (png_uint_32 y = 0; y < h; ++y) {
      const png_byte* row = &pixels[y * rowbytes];
      for (size_t i = 0; i < w * static_cast<size_t>(channels); ++i)
        ov[y * w * channels + i] = row[i] / 255.0;
    }
  }
  return out;
}

Tensor read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);

  auto next_token = [&]() -> std::string {
    std::string tok;
    int c;
    while ((c = in.get()) != EOF) {
      if (c == '#') {
        while ((c = in.get()) != EOF && c != '\n') {}
        continue;
      }
      if (std::isspace(c)) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(static_cast<char>(c));
    }
    if (tok.empty()) throw IoError(path + ": truncated PGM header");
    return tok;
  };

  if (next_token() != "P5") throw IoError(path + ": only binary (P5) PGM is supported");
  int64_t w = std::stoll(next_token());
  int64_t h = std::stoll(next_token());
  int64_t maxval = std::stoll(next_token());
  if (w < 1 || h < 1 || maxval < 1 || maxval > 65535)
    throw IoError(path + ": bad PGM dimensions");

  int64_t bytes_per = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> buf(static_cast<size_t>(w * h * bytes_per));
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size()))
    throw IoError(path + ": truncated PGM pixel data");

  Tensor out({h, w, 1});
  auto& ov = out.mutable_data();
  double scale = 1.0 / static_cast<double>(maxval);
  if (bytes_per == 2) {
    for (int64_t i = 0; i < w * h; ++i) {
      uint16_t v = static_cast<uint16_t>((buf[2 * i] << 8) | buf[2 * i + 1]); // big-endian
      ov[static_cast<size_t>(i)] = v * scale;
    }
  } else {
    for (int64_t i = 0; i < w * h; ++i) ov[static_cast<size_t>(i)] = buf[static_cast<size_t>(i)] * scale;
  }
  return out;
}

void write_png8(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || (image.dim(2) != 3 && image.dim(2) != 1))
    throw ShapeError("write_png8: image must be H x W x 3 or H x W x 1, got " +
                     shape_str(image.shape()));
  int64_t h = image.dim(0), w = image.dim(1), c = image.dim(2);

  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("cannot create " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("libpng init failed");
  }
  std::vector<png_byte> row(static_cast<size_t>(w * 3));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng failed writing " + path);
  }

  png_init_io(png, fp.get());
  // Pinned settings keep the byte stream reproducible across runs.
  png_set_compression_level(png, 6);
  png_set_filter(png, 0, PNG_FILTER_NONE);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  const auto& v = image.data();
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x)
      for (int64_t ch = 0; ch < 3; ++ch)
        row[static_cast<size_t>(x * 3 + ch)] =
            to_u8(v[static_cast<size_t>((y * w + x) * c + (c == 3 ? ch : 0))]);
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

void write_pgm16(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || (image.dim(2) != 3 && image.dim(2) != 1))
    throw ShapeError("write_pgm16: image must be H x W x 3 or H x W x 1, got " +
                     shape_str(image.shape()));
  int64_t h = image.dim(0), w = image.dim(1), c = image.dim(2);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot create " + path);
  out << "P5\n" << w << " " << h << "\n65535\n";
  const auto& v = image.data();
  std::vector<unsigned char> buf(static_cast<size_t>(w * h * 2));
  for (int64_t i = 0; i < w * h; ++i) {
    uint16_t u = to_u16(v[static_cast<size_t>(i * c)]);
    buf[static_cast<size_t>(2 * i)] = static_cast<unsigned char>(u >> 8);
    buf[static_cast<size_t>(2 * i + 1)] = static_cast<unsigned char>(u & 0xFF);
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("failed writing " + path);
}

} // namespace tfl
