#include "taskcodec/image_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

namespace taskcodec {

namespace {

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("io: cannot open '" + path + "'");
  std::vector<uint8_t> data((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
  return data;
}

Tensor bytes_to_tensor(const uint8_t* rgb, int h, int w) {
  std::vector<float> v(static_cast<size_t>(3) * h * w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        v[(static_cast<size_t>(c) * h + y) * w + x] =
            static_cast<float>(rgb[(static_cast<size_t>(y) * w + x) * 3 + c]) / 255.0f;
      }
    }
  }
  return Tensor::from({3, h, w}, std::move(v));
}

// PPM token reader: skips whitespace and '#' comments.
int next_pnm_int(const std::vector<uint8_t>& d, size_t& pos) {
  while (pos < d.size()) {
    if (d[pos] == '#') {
      while (pos < d.size() && d[pos] != '\n') ++pos;
    } else if (std::isspace(d[pos])) {
      ++pos;
    } else {
      break;
    }
  }
  check(pos < d.size() && std::isdigit(d[pos]), "io: malformed PNM header");
  int v = 0;
  while (pos < d.size() && std::isdigit(d[pos])) {
    v = v * 10 + (d[pos] - '0');
    ++pos;
  }
  return v;
}

uint32_t be32(const uint8_t* p) {
  return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | p[3];
}

int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace

Tensor load_ppm(const std::string& path) {
  const auto d = read_file(path);
  check(d.size() > 2 && d[0] == 'P' && d[1] == '6', "io: '" + path + "' is not a binary PPM (P6)");
  size_t pos = 2;
  const int w = next_pnm_int(d, pos);
  const int h = next_pnm_int(d, pos);
  const int maxval = next_pnm_int(d, pos);
  check(maxval == 255, "io: PPM maxval must be 255, got " + std::to_string(maxval));
  ++pos;  // single whitespace byte after the header
  check(d.size() - pos >= static_cast<size_t>(3) * w * h, "io: PPM pixel data truncated");
  return bytes_to_tensor(d.data() + pos, h, w);
}

Tensor load_png(const std::string& path) {
  const auto d = read_file(path);
  static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  check(d.size() > 8 && std::memcmp(d.data(), sig, 8) == 0, "io: '" + path + "' is not a PNG");

  int w = 0, h = 0;
  std::vector<uint8_t> idat;
  size_t pos = 8;
  bool saw_ihdr = false, saw_iend = false;
  while (pos + 8 <= d.size() && !saw_iend) {
    const uint32_t len = be32(&d[pos]);
    check(pos + 12 + len <= d.size(), "io: PNG chunk overruns file");
    const char* type = reinterpret_cast<const char*>(&d[pos + 4]);
    const uint8_t* payload = &d[pos + 8];
    if (std::memcmp(type, "IHDR", 4) == 0) {
      check(len == 13, "io: PNG IHDR length invalid");
      w = static_cast<int>(be32(payload));
      h = static_cast<int>(be32(payload + 4));
      const int bit_depth = payload[8], color_type = payload[9];
      const int interlace = payload[12];
      check(bit_depth == 8 && color_type == 2,
            "io: PNG unsupported (need 8-bit RGB, got depth " + std::to_string(bit_depth) +
                " color type " + std::to_string(color_type) + ")");
      check(interlace == 0, "io: PNG interlaced images are unsupported");
      saw_ihdr = true;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), payload, payload + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      saw_iend = true;
    }
    pos += 12 + len;
  }
  check(saw_ihdr && w > 0 && h > 0, "io: PNG missing IHDR");
  check(!idat.empty(), "io: PNG missing IDAT");

  const size_t stride = static_cast<size_t>(w) * 3;
  std::vector<uint8_t> raw((stride + 1) * h);
  uLongf out_len = static_cast<uLongf>(raw.size());
  const int zrc = uncompress(raw.data(), &out_len, idat.data(), static_cast<uLong>(idat.size()));
  check(zrc == Z_OK && out_len == raw.size(), "io: PNG inflate failed");

  // Undo per-scanline filters (types 0..4).
  std::vector<uint8_t> img(stride * h);
  for (int y = 0; y < h; ++y) {
    const uint8_t filter = raw[(stride + 1) * y];
    const uint8_t* src = &raw[(stride + 1) * y + 1];
    uint8_t* dst = &img[stride * y];
    const uint8_t* up = y > 0 ? &img[stride * (y - 1)] : nullptr;
    for (size_t i = 0; i < stride; ++i) {
      const int left = i >= 3 ? dst[i - 3] : 0;
      const int above = up ? up[i] : 0;
      const int upleft = (up && i >= 3) ? up[i - 3] : 0;
      int v = src[i];
      switch (filter) {
        case 0: break;
        case 1: v += left; break;
        case 2: v += above; break;
        case 3: v += (left + above) / 2; break;
        case 4: v += paeth(left, above, upleft); break;
        default: fail("io: PNG unknown filter type " + std::to_string(filter));
      }
      dst[i] = static_cast<uint8_t>(v & 0xFF);
    }
  }
  return bytes_to_tensor(img.data(), h, w);
}

Tensor load_image(const std::string& path) {
  const auto d = read_file(path);
  if (d.size() > 2 && d[0] == 'P' && d[1] == '6') return load_ppm(path);
  if (d.size() > 4 && d[0] == 0x89 && d[1] == 'P') return load_png(path);
  fail("io: '" + path + "' is neither PPM nor PNG");
}

void save_ppm(const std::string& path, const Tensor& img) {
  check(img.shape().size() == 3 && img.dim(0) == 3,
        "io: save_ppm expects [3,H,W], got " + shape_str(img.shape()));
  const int h = img.dim(1), w = img.dim(2);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("io: cannot write '" + path + "'");
  out << "P6\n" << w << " " << h << "\n255\n";
  std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
  const float* v = img.data();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const float f = v[(static_cast<size_t>(c) * h + y) * w + x];
        const int b = static_cast<int>(std::lround(f * 255.0f));
        row[static_cast<size_t>(x) * 3 + c] = static_cast<uint8_t>(std::clamp(b, 0, 255));
      }
    }
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) fail("io: short write to '" + path + "'");
}

void save_pgm(const std::string& path, const unsigned char* data, int h, int w) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("io: cannot write '" + path + "'");
  out << "P5\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(h) * w);
  if (!out) fail("io: short write to '" + path + "'");
}

}  // namespace taskcodec
