#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include <zlib.h>

#include "gilab/tensor.hpp"

namespace gilab {

// 8-bit PNG read/write over zlib, covering what the pipeline stores: RGB
// images and single-channel masks. The reader additionally accepts RGBA and
// grayscale+alpha so externally produced reference images load too.
// No interlacing, no 16-bit.

namespace png_detail {

inline void put_u32_be(std::vector<unsigned char> &buf, std::uint32_t v) {
  buf.push_back((v >> 24) & 0xff);
  buf.push_back((v >> 16) & 0xff);
  buf.push_back((v >> 8) & 0xff);
  buf.push_back(v & 0xff);
}

inline void write_chunk(std::ofstream &os, const char type[4],
                        const std::vector<unsigned char> &payload) {
  std::vector<unsigned char> head;
  put_u32_be(head, std::uint32_t(payload.size()));
  os.write(reinterpret_cast<const char *>(head.data()), 4);
  os.write(type, 4);
  if (!payload.empty())
    os.write(reinterpret_cast<const char *>(payload.data()),
             std::streamsize(payload.size()));
  uLong crc = crc32(0L, reinterpret_cast<const Bytef *>(type), 4);
  if (!payload.empty())
    crc = crc32(crc, payload.data(), uInt(payload.size()));
  std::vector<unsigned char> tail;
  put_u32_be(tail, std::uint32_t(crc));
  os.write(reinterpret_cast<const char *>(tail.data()), 4);
}

inline void write_png(const std::filesystem::path &path, const unsigned char *pixels,
                      int w, int h, int channels) {
  std::ofstream os(path, std::ios::binary);
  require(bool(os), "png: cannot open '", path.string(), "' for writing");
  static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  os.write(reinterpret_cast<const char *>(sig), 8);

  std::vector<unsigned char> ihdr;
  put_u32_be(ihdr, std::uint32_t(w));
  put_u32_be(ihdr, std::uint32_t(h));
  ihdr.push_back(8);                                  // bit depth
  ihdr.push_back(channels == 3 ? 2 : 0);              // color type
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  write_chunk(os, "IHDR", ihdr);

  const std::size_t stride = std::size_t(w) * std::size_t(channels);
  std::vector<unsigned char> raw((stride + 1) * std::size_t(h));
  for (int y = 0; y < h; ++y) {
    raw[std::size_t(y) * (stride + 1)] = 0; // filter: none
    std::memcpy(raw.data() + std::size_t(y) * (stride + 1) + 1,
                pixels + std::size_t(y) * stride, stride);
  }
  uLongf comp_len = compressBound(uLong(raw.size()));
  std::vector<unsigned char> comp(comp_len);
  require(compress2(comp.data(), &comp_len, raw.data(), uLong(raw.size()), 6) == Z_OK,
          "png: deflate failed for '", path.string(), "'");
  comp.resize(comp_len);
  write_chunk(os, "IDAT", comp);
  write_chunk(os, "IEND", {});
  require(bool(os), "png: write to '", path.string(), "' failed");
}

inline std::uint32_t get_u32_be(const unsigned char *p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
         (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

struct DecodedPng {
  int width = 0, height = 0, channels = 0;
  std::vector<unsigned char> pixels; // row-major, `channels` bytes per pixel
};

inline int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc)
    return a;
  return pb <= pc ? b : c;
}

inline DecodedPng read_png(const std::filesystem::path &path) {
  std::ifstream is(path, std::ios::binary);
  require(bool(is), "png: cannot open '", path.string(), "'");
  std::vector<unsigned char> file((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
  require(file.size() > 8 && file[0] == 0x89 && file[1] == 'P' && file[2] == 'N' &&
              file[3] == 'G',
          "png: '", path.string(), "' is not a PNG file");

  DecodedPng out;
  int bit_depth = 0, color_type = -1, interlace = 0;
  std::vector<unsigned char> idat;
  std::size_t pos = 8;
  while (pos + 8 <= file.size()) {
    const std::uint32_t len = get_u32_be(file.data() + pos);
    require(pos + 12 + len <= file.size(), "png: truncated chunk in '", path.string(), "'");
    const char *type = reinterpret_cast<const char *>(file.data() + pos + 4);
    const unsigned char *payload = file.data() + pos + 8;
    if (std::memcmp(type, "IHDR", 4) == 0) {
      require(len == 13, "png: bad IHDR in '", path.string(), "'");
      out.width = int(get_u32_be(payload));
      out.height = int(get_u32_be(payload + 4));
      bit_depth = payload[8];
      color_type = payload[9];
      interlace = payload[12];
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), payload, payload + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      break;
    }
    pos += 12 + len;
  }
  require(out.width > 0 && out.height > 0, "png: missing IHDR in '", path.string(), "'");
  require(bit_depth == 8, "png: only 8-bit images supported ('", path.string(), "')");
  require(interlace == 0, "png: interlaced images unsupported ('", path.string(), "')");
  switch (color_type) {
  case 0: out.channels = 1; break;
  case 2: out.channels = 3; break;
  case 4: out.channels = 2; break;
  case 6: out.channels = 4; break;
  default: fail("png: unsupported color type ", color_type, " in '", path.string(), "'");
  }

  const std::size_t stride = std::size_t(out.width) * std::size_t(out.channels);
  std::vector<unsigned char> raw((stride + 1) * std::size_t(out.height));
  uLongf raw_len = uLongf(raw.size());
  require(uncompress(raw.data(), &raw_len, idat.data(), uLong(idat.size())) == Z_OK &&
              raw_len == raw.size(),
          "png: inflate failed for '", path.string(), "'");

  out.pixels.resize(stride * std::size_t(out.height));
  const int bpp = out.channels;
  for (int y = 0; y < out.height; ++y) {
    const unsigned char filter = raw[std::size_t(y) * (stride + 1)];
    const unsigned char *src = raw.data() + std::size_t(y) * (stride + 1) + 1;
    unsigned char *dst = out.pixels.data() + std::size_t(y) * stride;
    const unsigned char *up = y > 0 ? dst - stride : nullptr;
    for (std::size_t x = 0; x < stride; ++x) {
      const int a = x >= std::size_t(bpp) ? dst[x - std::size_t(bpp)] : 0;
      const int b = up ? up[x] : 0;
      const int c = (up && x >= std::size_t(bpp)) ? up[x - std::size_t(bpp)] : 0;
      int v = src[x];
      switch (filter) {
      case 0: break;
      case 1: v += a; break;
      case 2: v += b; break;
      case 3: v += (a + b) / 2; break;
      case 4: v += paeth(a, b, c); break;
      default: fail("png: bad filter type ", int(filter), " in '", path.string(), "'");
      }
      dst[x] = static_cast<unsigned char>(v & 0xff);
    }
  }
  return out;
}

} // namespace png_detail

inline void write_png_rgb(const std::filesystem::path &path, const Tensor<float> &img) {
  require(img.rank() == 3 && img.shape[2] == 3, "write_png_rgb: HxWx3 tensor required, got ",
          shape_str(img.shape));
  const int h = int(img.shape[0]), w = int(img.shape[1]);
  std::vector<unsigned char> bytes(std::size_t(h) * w * 3);
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const float v = std::clamp(img[std::int64_t(i)], 0.0f, 1.0f);
    bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
  }
  png_detail::write_png(path, bytes.data(), w, h, 3);
}

inline Tensor<float> read_png_rgb(const std::filesystem::path &path) {
  const auto dec = png_detail::read_png(path);
  Tensor<float> img({dec.height, dec.width, 3});
  for (int y = 0; y < dec.height; ++y)
    for (int x = 0; x < dec.width; ++x) {
      const unsigned char *px =
          dec.pixels.data() + (std::size_t(y) * dec.width + x) * dec.channels;
      for (int c = 0; c < 3; ++c) {
        const unsigned char v = dec.channels >= 3 ? px[c] : px[0];
        img.at(y, x, c) = float(v) / 255.0f;
      }
    }
  return img;
}

// Masks: single-channel PNG, 255 = masked.
inline void write_png_mask(const std::filesystem::path &path, const Tensor<std::uint8_t> &mask) {
  require(mask.rank() == 2, "write_png_mask: HxW tensor required, got ",
          shape_str(mask.shape));
  const int h = int(mask.shape[0]), w = int(mask.shape[1]);
  std::vector<unsigned char> bytes(std::size_t(h) * w);
  for (std::size_t i = 0; i < bytes.size(); ++i)
    bytes[i] = mask[std::int64_t(i)] ? 255 : 0;
  png_detail::write_png(path, bytes.data(), w, h, 1);
}

inline Tensor<std::uint8_t> read_png_mask(const std::filesystem::path &path) {
  const auto dec = png_detail::read_png(path);
  Tensor<std::uint8_t> mask({dec.height, dec.width});
  for (int y = 0; y < dec.height; ++y)
    for (int x = 0; x < dec.width; ++x)
      mask.at(y, x) =
          dec.pixels[(std::size_t(y) * dec.width + x) * dec.channels] >= 128 ? 1 : 0;
  return mask;
}

// Raw float32 depth: 16-byte header { "GIDPTH01", width u32 LE, height u32 LE }.
inline constexpr char kDepthMagic[8] = {'G', 'I', 'D', 'P', 'T', 'H', '0', '1'};

inline void write_depth(const std::filesystem::path &path, const Tensor<float> &depth) {
  require(depth.rank() == 2, "write_depth: HxW tensor required, got ",
          shape_str(depth.shape));
  std::ofstream os(path, std::ios::binary);
  require(bool(os), "depth: cannot open '", path.string(), "' for writing");
  os.write(kDepthMagic, 8);
  const std::uint32_t w = std::uint32_t(depth.shape[1]), h = std::uint32_t(depth.shape[0]);
  unsigned char dims[8] = {
      static_cast<unsigned char>(w),       static_cast<unsigned char>(w >> 8),
      static_cast<unsigned char>(w >> 16), static_cast<unsigned char>(w >> 24),
      static_cast<unsigned char>(h),       static_cast<unsigned char>(h >> 8),
      static_cast<unsigned char>(h >> 16), static_cast<unsigned char>(h >> 24)};
  os.write(reinterpret_cast<const char *>(dims), 8);
  os.write(reinterpret_cast<const char *>(depth.data.data()),
           std::streamsize(depth.data.size() * 4));
  require(bool(os), "depth: write to '", path.string(), "' failed");
}

inline Tensor<float> read_depth(const std::filesystem::path &path) {
  std::ifstream is(path, std::ios::binary);
  require(bool(is), "depth: cannot open '", path.string(), "'");
  char magic[8];
  is.read(magic, 8);
  require(bool(is) && std::memcmp(magic, kDepthMagic, 8) == 0, "depth: '", path.string(),
          "' has bad magic");
  unsigned char dims[8];
  is.read(reinterpret_cast<char *>(dims), 8);
  require(bool(is), "depth: truncated header in '", path.string(), "'");
  const std::uint32_t w = std::uint32_t(dims[0]) | (std::uint32_t(dims[1]) << 8) |
                          (std::uint32_t(dims[2]) << 16) | (std::uint32_t(dims[3]) << 24);
  const std::uint32_t h = std::uint32_t(dims[4]) | (std::uint32_t(dims[5]) << 8) |
                          (std::uint32_t(dims[6]) << 16) | (std::uint32_t(dims[7]) << 24);
  Tensor<float> depth({std::int64_t(h), std::int64_t(w)});
  is.read(reinterpret_cast<char *>(depth.data.data()),
          std::streamsize(depth.data.size() * 4));
  require(bool(is), "depth: truncated data in '", path.string(), "'");
  return depth;
}

} // namespace gilab
