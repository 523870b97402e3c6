#include "apt/image_io.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace apt {

namespace {

void put_u32be(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v >> 24));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v));
}

uint32_t get_u32be(const uint8_t* p) {
  return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

void append_chunk(std::vector<uint8_t>& out, const char type[4], const std::vector<uint8_t>& data) {
  put_u32be(out, static_cast<uint32_t>(data.size()));
  size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  uint32_t crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, out.data() + start, static_cast<uInt>(4 + data.size()));
  put_u32be(out, crc);
}

int paeth(int a, int b, int c) {
  int p = a + b - c;
  int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace

void write_png(const std::string& path, const ImageU8& img) {
  if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("write_png: channels");
  if (img.pixels.size() != static_cast<size_t>(img.width) * img.height * img.channels)
    throw std::invalid_argument("write_png: pixel buffer size");

  // Raw scanlines, filter byte 0 per row.
  const size_t stride = static_cast<size_t>(img.width) * img.channels;
  std::vector<uint8_t> raw;
  raw.reserve((stride + 1) * img.height);
  for (int y = 0; y < img.height; ++y) {
    raw.push_back(0);
    const uint8_t* row = img.pixels.data() + y * stride;
    raw.insert(raw.end(), row, row + stride);
  }

  uLongf clen = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> compressed(clen);
  if (compress2(compressed.data(), &clen, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK)
    throw std::runtime_error("write_png: deflate failed");
  compressed.resize(clen);

  std::vector<uint8_t> ihdr;
  put_u32be(ihdr, static_cast<uint32_t>(img.width));
  put_u32be(ihdr, static_cast<uint32_t>(img.height));
  ihdr.push_back(8);                                   // bit depth
  ihdr.push_back(img.channels == 3 ? 2 : 0);           // color type
  ihdr.push_back(0);                                   // compression
  ihdr.push_back(0);                                   // filter
  ihdr.push_back(0);                                   // interlace

  std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  append_chunk(out, "IHDR", ihdr);
  append_chunk(out, "IDAT", compressed);
  append_chunk(out, "IEND", {});

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("write_png: cannot open " + path);
  os.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!os) throw std::runtime_error("write_png: write failed " + path);
}

ImageU8 read_png(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_png: cannot open " + path);
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  if (buf.size() < 8 || std::memcmp(buf.data(), sig, 8) != 0)
    throw std::runtime_error("read_png: not a PNG: " + path);

  ImageU8 img;
  std::vector<uint8_t> idat;
  size_t pos = 8;
  int bitdepth = 0, colortype = -1;
  while (pos + 8 <= buf.size()) {
    uint32_t len = get_u32be(buf.data() + pos);
    std::string type(reinterpret_cast<const char*>(buf.data() + pos + 4), 4);
    if (pos + 12 + len > buf.size()) throw std::runtime_error("read_png: truncated chunk");
    const uint8_t* data = buf.data() + pos + 8;
    if (type == "IHDR") {
      img.width = static_cast<int>(get_u32be(data));
      img.height = static_cast<int>(get_u32be(data + 4));
      bitdepth = data[8];
      colortype = data[9];
      if (bitdepth != 8 || (colortype != 2 && colortype != 0) || data[12] != 0)
        throw std::runtime_error("read_png: unsupported format (need 8-bit RGB/gray, no interlace)");
      img.channels = colortype == 2 ? 3 : 1;
    } else if (type == "IDAT") {
      idat.insert(idat.end(), data, data + len);
    } else if (type == "IEND") {
      break;
    }
    pos += 12 + len;
  }
  if (img.width <= 0 || img.height <= 0 || idat.empty())
    throw std::runtime_error("read_png: missing IHDR/IDAT in " + path);

  const size_t stride = static_cast<size_t>(img.width) * img.channels;
  std::vector<uint8_t> raw((stride + 1) * img.height);
  uLongf rlen = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &rlen, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
      rlen != raw.size())
    throw std::runtime_error("read_png: inflate failed for " + path);

  img.pixels.assign(stride * img.height, 0);
  const int bpp = img.channels;
  for (int y = 0; y < img.height; ++y) {
    uint8_t filter = raw[y * (stride + 1)];
    const uint8_t* src = raw.data() + y * (stride + 1) + 1;
    uint8_t* cur = img.pixels.data() + y * stride;
    const uint8_t* up = y > 0 ? img.pixels.data() + (y - 1) * stride : nullptr;
    for (size_t x = 0; x < stride; ++x) {
      int a = x >= static_cast<size_t>(bpp) ? cur[x - bpp] : 0;
      int b = up ? up[x] : 0;
      int c = (up && x >= static_cast<size_t>(bpp)) ? up[x - bpp] : 0;
      int v = src[x];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, c); break;
        default: throw std::runtime_error("read_png: bad filter byte");
      }
      cur[x] = static_cast<uint8_t>(v & 0xFF);
    }
  }
  return img;
}

ImageU8 to_u8(const Tensor& chw) {
  if (chw.ndim() != 3 || (chw.dim(0) != 1 && chw.dim(0) != 3))
    throw std::invalid_argument("to_u8: expects (1|3,H,W), got " + shape_str(chw.shape()));
  ImageU8 img;
  img.channels = chw.dim(0);
  img.height = chw.dim(1);
  img.width = chw.dim(2);
  img.pixels.resize(static_cast<size_t>(img.width) * img.height * img.channels);
  const int64_t hw = static_cast<int64_t>(img.height) * img.width;
  for (int c = 0; c < img.channels; ++c)
    for (int64_t k = 0; k < hw; ++k) {
      double v = (chw[c * hw + k] + 1.0) * 0.5;
      v = std::min(1.0, std::max(0.0, v));
      img.pixels[k * img.channels + c] = static_cast<uint8_t>(std::lround(v * 255.0));
    }
  return img;
}

Tensor from_u8(const ImageU8& img) {
  Tensor t({img.channels, img.height, img.width});
  const int64_t hw = static_cast<int64_t>(img.height) * img.width;
  for (int c = 0; c < img.channels; ++c)
    for (int64_t k = 0; k < hw; ++k)
      t[c * hw + k] = img.pixels[k * img.channels + c] / 255.0 * 2.0 - 1.0;
  return t;
}

Tensor make_grid(const std::vector<Tensor>& images, int cols, int pad, double fill) {
  if (images.empty()) throw std::invalid_argument("make_grid: no images");
  if (cols <= 0) throw std::invalid_argument("make_grid: cols must be positive");
  const Shape& s = images[0].shape();
  if (s.size() != 3) throw std::invalid_argument("make_grid: expects (C,H,W) images");
  for (const auto& im : images)
    if (!im.same_shape(images[0])) throw std::invalid_argument("make_grid: mixed shapes");
  int C = s[0], H = s[1], W = s[2];
  int n = static_cast<int>(images.size());
  int rows = (n + cols - 1) / cols;
  int GH = rows * H + (rows + 1) * pad;
  int GW = cols * W + (cols + 1) * pad;
  Tensor grid = Tensor::full({C, GH, GW}, fill);
  for (int i = 0; i < n; ++i) {
    int r = i / cols, q = i % cols;
    int oy = pad + r * (H + pad), ox = pad + q * (W + pad);
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          grid[(static_cast<int64_t>(c) * GH + oy + y) * GW + ox + x] =
              images[i][(static_cast<int64_t>(c) * H + y) * W + x];
  }
  return grid;
}

}  // namespace apt
