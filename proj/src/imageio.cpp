#include "bodysplat/imageio.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace bodysplat {

namespace {

void put_u32_be(std::string* s, uint32_t v) {
  s->push_back(static_cast<char>((v >> 24) & 0xff));
  s->push_back(static_cast<char>((v >> 16) & 0xff));
  s->push_back(static_cast<char>((v >> 8) & 0xff));
  s->push_back(static_cast<char>(v & 0xff));
}

uint32_t get_u32_be(const unsigned char* p) {
  return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

void write_chunk(std::ostream& f, const char type[4], const std::string& data) {
  std::string out;
  put_u32_be(&out, static_cast<uint32_t>(data.size()));
  out.append(type, 4);
  out += data;
  uint32_t crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(out.data() + 4), static_cast<uInt>(out.size() - 4));
  put_u32_be(&out, crc);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

const unsigned char kPngSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace

void write_png(const std::string& path, const Image& image) {
  if (image.c != 3) throw schema_error("write_png: expected 3-channel image");
  if (image.h < 1 || image.w < 1) throw schema_error("write_png: empty image");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(kPngSig), 8);

  std::string ihdr;
  put_u32_be(&ihdr, static_cast<uint32_t>(image.w));
  put_u32_be(&ihdr, static_cast<uint32_t>(image.h));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // color type RGB
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter
  ihdr.push_back(0);   // no interlace
  write_chunk(f, "IHDR", ihdr);

  // Filter 0 on every row keeps the stream bit-for-bit deterministic.
  std::vector<unsigned char> raw;
  raw.reserve(static_cast<size_t>(image.h) * (1 + 3 * static_cast<size_t>(image.w)));
  for (int y = 0; y < image.h; ++y) {
    raw.push_back(0);
    for (int x = 0; x < image.w; ++x)
      for (int ch = 0; ch < 3; ++ch) {
        const Scalar v = std::clamp(image.at(y, x, ch), 0.0, 1.0);
        raw.push_back(static_cast<unsigned char>(std::lround(v * 255.0)));
      }
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> packed(bound);
  if (compress2(packed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK)
    throw io_error("write_png: deflate failed");
  write_chunk(f, "IDAT", std::string(reinterpret_cast<char*>(packed.data()), bound));
  write_chunk(f, "IEND", std::string());
  if (!f) throw io_error("failed writing " + path);
}

Image read_png(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open: " + path);
  std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const unsigned char* p = reinterpret_cast<const unsigned char*>(blob.data());
  const size_t n = blob.size();
  if (n < 8 + 25 || std::memcmp(p, kPngSig, 8) != 0) throw schema_error("not a PNG: " + path);

  size_t pos = 8;
  uint32_t width = 0, height = 0;
  int channels = 0;
  std::string idat;
  bool saw_end = false;
  while (pos + 8 <= n && !saw_end) {
    const uint32_t len = get_u32_be(p + pos);
    if (pos + 12 + static_cast<size_t>(len) > n) throw schema_error("PNG: truncated chunk in " + path);
    const char* type = reinterpret_cast<const char*>(p + pos + 4);
    const unsigned char* data = p + pos + 8;
    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (len != 13) throw schema_error("PNG: bad IHDR");
      width = get_u32_be(data);
      height = get_u32_be(data + 4);
      const int depth = data[8], color = data[9], interlace = data[12];
      if (depth != 8) throw schema_error("PNG: only 8-bit supported");
      if (interlace != 0) throw schema_error("PNG: interlaced not supported");
      if (color == 0) channels = 1;
      else if (color == 2) channels = 3;
      else if (color == 6) channels = 4;
      else throw schema_error("PNG: unsupported color type");
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.append(reinterpret_cast<const char*>(data), len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      saw_end = true;
    }
    pos += 12 + len;
  }
  if (width == 0 || height == 0 || channels == 0 || idat.empty())
    throw schema_error("PNG: missing IHDR or IDAT in " + path);

  const size_t stride = static_cast<size_t>(width) * channels;
  std::vector<unsigned char> raw(static_cast<size_t>(height) * (stride + 1));
  {
    z_stream zs;
    std::memset(&zs, 0, sizeof(zs));
    if (inflateInit(&zs) != Z_OK) throw io_error("PNG: inflate init failed");
    zs.next_in = reinterpret_cast<Bytef*>(idat.data());
    zs.avail_in = static_cast<uInt>(idat.size());
    zs.next_out = raw.data();
    zs.avail_out = static_cast<uInt>(raw.size());
    const int rc = inflate(&zs, Z_FINISH);
    inflateEnd(&zs);
    if (rc != Z_STREAM_END || zs.avail_out != 0)
      throw schema_error("PNG: corrupt image data in " + path);
  }

  // Undo per-row filters in place.
  std::vector<unsigned char> prev(stride, 0);
  Image out(static_cast<int>(height), static_cast<int>(width), 3);
  for (uint32_t y = 0; y < height; ++y) {
    unsigned char* row = raw.data() + static_cast<size_t>(y) * (stride + 1);
    const int filter = row[0];
    unsigned char* cur = row + 1;
    for (size_t i = 0; i < stride; ++i) {
      const int a = (i >= static_cast<size_t>(channels)) ? cur[i - channels] : 0;
      const int b = prev[i];
      const int c = (i >= static_cast<size_t>(channels)) ? prev[i - channels] : 0;
      int v = cur[i];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, c); break;
        default: throw schema_error("PNG: unknown filter type");
      }
      cur[i] = static_cast<unsigned char>(v & 0xff);
    }
    std::memcpy(prev.data(), cur, stride);
    for (uint32_t x = 0; x < width; ++x)
      for (int ch = 0; ch < 3; ++ch) {
        const int src = (channels == 1) ? 0 : ch;
        out.at(static_cast<int>(y), static_cast<int>(x), ch) =
            cur[static_cast<size_t>(x) * channels + src] / 255.0;
      }
  }
  return out;
}

Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open: " + path);
  std::string magic;
  f >> magic;
  if (magic != "P6") throw schema_error("PPM: expected P6 in " + path);
  auto next_int = [&]() {
    // Skip whitespace and '#' comment lines between header fields.
    int c = f.get();
    while (c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '#') {
      if (c == '#')
        while (c != '\n' && c != EOF) c = f.get();
      c = f.get();
    }
    int v = 0;
    bool any = false;
    while (c >= '0' && c <= '9') {
      v = v * 10 + (c - '0');
      any = true;
      c = f.get();
    }
    if (!any) throw schema_error("PPM: malformed header in " + path);
    return v;
  };
  const int w = next_int(), h = next_int(), maxval = next_int();
  if (w < 1 || h < 1) throw schema_error("PPM: bad dimensions");
  if (maxval != 255) throw schema_error("PPM: only maxval 255 supported");
  std::vector<unsigned char> buf(static_cast<size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw schema_error("PPM: truncated pixel data in " + path);
  Image out(h, w, 3);
  for (size_t i = 0; i < buf.size(); ++i) out.data[i] = buf[i] / 255.0;
  return out;
}

Image read_image(const std::string& path) {
  const size_t dot = path.rfind('.');
  const std::string ext = (dot == std::string::npos) ? "" : path.substr(dot);
  if (ext == ".png") return read_png(path);
  if (ext == ".ppm") return read_ppm(path);
  throw schema_error("unsupported image extension (want .png or .ppm): " + path);
}

void write_pfm(const std::string& path, const Grid3& grid) {
  if (grid.c != 1 && grid.c != 3) throw schema_error("write_pfm: channels must be 1 or 3");
  if (grid.h < 1 || grid.w < 1) throw schema_error("write_pfm: empty grid");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open for writing: " + path);
  f << (grid.c == 3 ? "PF" : "Pf") << "\n" << grid.w << " " << grid.h << "\n-1.0\n";
  for (int y = grid.h - 1; y >= 0; --y)
    for (int x = 0; x < grid.w; ++x)
      for (int ch = 0; ch < grid.c; ++ch) {
        const float v = static_cast<float>(grid.at(y, x, ch));
        f.write(reinterpret_cast<const char*>(&v), 4);
      }
  if (!f) throw io_error("failed writing " + path);
}

Grid3 read_pfm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open: " + path);
  std::string magic;
  int w, h;
  double scale;
  f >> magic >> w >> h >> scale;
  if (magic != "PF" && magic != "Pf") throw schema_error("PFM: bad magic in " + path);
  if (w < 1 || h < 1) throw schema_error("PFM: bad dimensions");
  if (scale >= 0) throw schema_error("PFM: big-endian files not supported");
  f.get();  // single whitespace after the scale line
  const int c = (magic == "PF") ? 3 : 1;
  Grid3 out(h, w, c);
  for (int y = h - 1; y >= 0; --y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) {
        float v;
        f.read(reinterpret_cast<char*>(&v), 4);
        out.at(y, x, ch) = v;
      }
  if (!f) throw schema_error("PFM: truncated pixel data in " + path);
  return out;
}

}  // namespace bodysplat
