#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "pixelseg/blob.hpp"
#include "pixelseg/common.hpp"

namespace pixelseg {

namespace detail {

inline std::vector<std::uint8_t> read_binary_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f.good()) throw IoError("cannot open '" + path + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

// Next whitespace-delimited PGM header token, skipping '#' comment lines.
inline std::string pgm_token(const std::vector<std::uint8_t>& bytes, std::size_t& pos,
                             const std::string& path) {
  auto is_space = [](std::uint8_t c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; };
  for (;;) {
    while (pos < bytes.size() && is_space(bytes[pos])) ++pos;
    if (pos < bytes.size() && bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  std::string tok;
  while (pos < bytes.size() && !is_space(bytes[pos])) tok += static_cast<char>(bytes[pos++]);
  if (tok.empty()) throw IoError("'" + path + "': truncated PGM header");
  return tok;
}

inline int pgm_int(const std::vector<std::uint8_t>& bytes, std::size_t& pos,
                   const std::string& path) {
  const std::string tok = pgm_token(bytes, pos, path);
  try {
    std::size_t used = 0;
    const int v = std::stoi(tok, &used);
    if (used != tok.size() || v < 0) throw IoError("");
    return v;
  } catch (...) {
    throw IoError("'" + path + "': bad PGM header number '" + tok + "'");
  }
}

}  // namespace detail

// Binary 8-bit PGM (P5) reader. Accepts comments in the header; requires
// maxval <= 255.
inline Plane<std::uint8_t> read_pgm(const std::string& path) {
  const auto bytes = detail::read_binary_file(path);
  std::size_t pos = 0;
  if (detail::pgm_token(bytes, pos, path) != "P5") {
    throw IoError("'" + path + "': not a binary PGM (P5) file");
  }
  const int w = detail::pgm_int(bytes, pos, path);
  const int h = detail::pgm_int(bytes, pos, path);
  const int maxval = detail::pgm_int(bytes, pos, path);
  if (w < 1 || h < 1) throw IoError("'" + path + "': bad PGM dimensions");
  if (maxval < 1 || maxval > 255) {
    throw IoError("'" + path + "': only 8-bit PGM supported (maxval " + std::to_string(maxval) +
                  ")");
  }
  pos += 1;  // single whitespace byte after maxval
  const std::size_t need = static_cast<std::size_t>(w) * h;
  if (bytes.size() < pos + need) throw IoError("'" + path + "': truncated PGM pixel data");
  Plane<std::uint8_t> img(h, w);
  std::memcpy(img.pix.data(), bytes.data() + pos, need);
  return img;
}

inline void write_pgm(const std::string& path, const Plane<std::uint8_t>& img) {
  if (img.height < 1 || img.width < 1) throw IoError("write_pgm: empty image");
  std::ofstream f(path, std::ios::binary);
  if (!f.good()) throw IoError("cannot open '" + path + "' for writing");
  f << "P5\n" << img.width << " " << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.pix.data()), static_cast<std::streamsize>(img.size()));
  if (!f.good()) throw IoError("write failed for '" + path + "'");
}

// Minimal PNG reader for the subset used by gray label/raw images: 8-bit
// grayscale (color type 0), non-interlaced. IDAT streams are inflated with
// zlib and the five standard scanline filters are reversed.
inline Plane<std::uint8_t> read_png_gray(const std::string& path) {
  const auto bytes = detail::read_binary_file(path);
  static const std::uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0) {
    throw IoError("'" + path + "': not a PNG file");
  }
  auto be32 = [&](std::size_t p) -> std::uint32_t {
    return (std::uint32_t(bytes[p]) << 24) | (std::uint32_t(bytes[p + 1]) << 16) |
           (std::uint32_t(bytes[p + 2]) << 8) | std::uint32_t(bytes[p + 3]);
  };
  std::size_t pos = 8;
  int w = 0, h = 0;
  bool have_header = false, done = false;
  std::vector<std::uint8_t> compressed;
  while (!done) {
    if (pos + 8 > bytes.size()) throw IoError("'" + path + "': truncated PNG chunk");
    const std::uint32_t len = be32(pos);
    const std::string type(bytes.begin() + pos + 4, bytes.begin() + pos + 8);
    if (pos + 12 + len > bytes.size()) throw IoError("'" + path + "': truncated PNG chunk");
    const std::uint8_t* data = bytes.data() + pos + 8;
    const std::uint32_t want_crc = be32(pos + 8 + len);
    const auto got_crc = static_cast<std::uint32_t>(
        crc32(crc32(0L, bytes.data() + pos + 4, 4), data, len));
    if (want_crc != got_crc) throw IoError("'" + path + "': PNG chunk CRC mismatch in " + type);
    if (type == "IHDR") {
      if (len != 13) throw IoError("'" + path + "': bad IHDR");
      w = static_cast<int>(be32(pos + 8));
      h = static_cast<int>(be32(pos + 12));
      const int bit_depth = data[8], color_type = data[9], interlace = data[12];
      if (bit_depth != 8 || color_type != 0 || interlace != 0) {
        throw IoError("'" + path + "': only 8-bit non-interlaced grayscale PNG supported");
      }
      have_header = true;
    } else if (type == "IDAT") {
      compressed.insert(compressed.end(), data, data + len);
    } else if (type == "IEND") {
      done = true;
    }
    pos += 12 + len;
  }
  if (!have_header || w < 1 || h < 1) throw IoError("'" + path + "': missing PNG header");

  // One filter byte plus `w` gray bytes per scanline.
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(h) * (w + 1));
  uLongf out_len = static_cast<uLongf>(raw.size());
  const int rc = uncompress(raw.data(), &out_len, compressed.data(),
                            static_cast<uLong>(compressed.size()));
  if (rc != Z_OK || out_len != raw.size()) {
    throw IoError("'" + path + "': PNG inflate failed");
  }

  Plane<std::uint8_t> img(h, w);
  for (int y = 0; y < h; ++y) {
    const std::uint8_t* line = raw.data() + static_cast<std::size_t>(y) * (w + 1);
    const int filter = line[0];
    for (int x = 0; x < w; ++x) {
      const int a = x > 0 ? img.at(y, x - 1) : 0;        // left
      const int b = y > 0 ? img.at(y - 1, x) : 0;        // up
      const int c = (x > 0 && y > 0) ? img.at(y - 1, x - 1) : 0;  // up-left
      int v = line[1 + x];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: {
          const int p = a + b - c;
          const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
          v += (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : c);
          break;
        }
        default:
          throw IoError("'" + path + "': unknown PNG filter " + std::to_string(filter));
      }
      img.at(y, x) = static_cast<std::uint8_t>(v & 0xff);
    }
  }
  return img;
}

// Reads a gray image by file extension: .pgm (primary) or .png (optional).
inline Plane<std::uint8_t> read_gray_image(const std::string& path) {
  auto ends_with = [&](const char* suf) {
    const std::size_t n = std::strlen(suf);
    return path.size() >= n && path.compare(path.size() - n, n, suf) == 0;
  };
  if (ends_with(".pgm") || ends_with(".PGM")) return read_pgm(path);
  if (ends_with(".png") || ends_with(".PNG")) return read_png_gray(path);
  throw IoError("'" + path + "': unsupported image extension (use .pgm or .png)");
}

}  // namespace pixelseg
