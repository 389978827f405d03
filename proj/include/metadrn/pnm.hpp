#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "metadrn/common.hpp"

namespace metadrn {

// Binary PPM (P6, RGB) and PGM (P5, gray), maxval 255. Headers are written
// exactly as "P6\n<w> <h>\n255\n"; the reader additionally accepts arbitrary
// whitespace and '#' comments between header tokens.
struct PnmImage {
  int64_t width = 0;
  int64_t height = 0;
  int64_t channels = 0;  // 1 (P5) or 3 (P6)
  std::vector<uint8_t> pixels;  // row-major, interleaved
};

namespace detail {

[[noreturn]] inline void pnm_fail(const std::string& path, size_t offset, const std::string& what) {
  fail("PNM error in '" + path + "' at byte " + std::to_string(offset) + ": " + what);
}

inline void skip_space_and_comments(const std::vector<char>& buf, size_t& pos) {
  while (pos < buf.size()) {
    const char c = buf[pos];
    if (c == '#') {
      while (pos < buf.size() && buf[pos] != '\n') ++pos;
    } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
      ++pos;
    } else {
      break;
    }
  }
}

inline int64_t parse_int(const std::vector<char>& buf, size_t& pos, const std::string& path) {
  skip_space_and_comments(buf, pos);
  if (pos >= buf.size() || buf[pos] < '0' || buf[pos] > '9')
    pnm_fail(path, pos, "expected integer");
  int64_t value = 0;
  while (pos < buf.size() && buf[pos] >= '0' && buf[pos] <= '9') {
    value = value * 10 + (buf[pos] - '0');
    ++pos;
  }
  return value;
}

}  // namespace detail

inline PnmImage read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("PNM error: cannot open '" + path + "'");
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  size_t pos = 0;
  if (buf.size() < 2 || buf[0] != 'P' || (buf[1] != '5' && buf[1] != '6'))
    detail::pnm_fail(path, 0, "bad magic number (want P5 or P6)");
  PnmImage img;
  img.channels = buf[1] == '6' ? 3 : 1;
  pos = 2;
  img.width = detail::parse_int(buf, pos, path);
  img.height = detail::parse_int(buf, pos, path);
  const int64_t maxval = detail::parse_int(buf, pos, path);
  if (maxval != 255) detail::pnm_fail(path, pos, "unsupported maxval " + std::to_string(maxval));
  if (pos >= buf.size() || (buf[pos] != '\n' && buf[pos] != ' ' && buf[pos] != '\t' &&
                            buf[pos] != '\r'))
    detail::pnm_fail(path, pos, "missing whitespace after header");
  ++pos;
  if (img.width <= 0 || img.height <= 0) detail::pnm_fail(path, pos, "non-positive dimensions");
  const size_t want = static_cast<size_t>(img.width * img.height * img.channels);
  if (buf.size() - pos < want)
    detail::pnm_fail(path, pos,
                     "truncated pixel data (need " + std::to_string(want) + " bytes, have " +
                         std::to_string(buf.size() - pos) + ")");
  img.pixels.assign(buf.begin() + static_cast<ptrdiff_t>(pos),
                    buf.begin() + static_cast<ptrdiff_t>(pos + want));
  return img;
}

inline void write_pnm(const std::string& path, const PnmImage& img) {
  check_arg(img.channels == 1 || img.channels == 3, "write_pnm: channels must be 1 or 3");
  check_arg(static_cast<int64_t>(img.pixels.size()) == img.width * img.height * img.channels,
            "write_pnm: pixel buffer size mismatch");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("PNM error: cannot write '" + path + "'");
  out << (img.channels == 3 ? "P6" : "P5") << "\n"
      << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
  if (!out) fail("PNM error: short write to '" + path + "'");
}

}  // namespace metadrn
