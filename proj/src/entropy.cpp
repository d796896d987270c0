#include "taskcodec/entropy.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

namespace taskcodec {

namespace {

constexpr uint32_t kTopValue = 1u << 24;
constexpr uint8_t kVersion = 1;
const char kMagic[4] = {'T', 'C', 'B', 'S'};

uint32_t fnv1a32(const uint8_t* data, size_t len) {
  uint32_t h = 2166136261u;
  for (size_t i = 0; i < len; ++i) {
    h ^= data[i];
    h *= 16777619u;
  }
  return h;
}

void put_u8(std::vector<uint8_t>& b, uint8_t v) { b.push_back(v); }
void put_u16(std::vector<uint8_t>& b, uint16_t v) {
  b.push_back(static_cast<uint8_t>(v));
  b.push_back(static_cast<uint8_t>(v >> 8));
}
void put_u32(std::vector<uint8_t>& b, uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
void put_u64(std::vector<uint8_t>& b, uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

struct ByteReader {
  const uint8_t* p;
  const uint8_t* end;

  void need(size_t n) const {
    if (static_cast<size_t>(end - p) < n) fail("io: truncated bitstream");
  }
  uint8_t u8() {
    need(1);
    return *p++;
  }
  uint16_t u16() {
    need(2);
    uint16_t v = static_cast<uint16_t>(p[0] | (p[1] << 8));
    p += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
    p += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
    p += 8;
    return v;
  }
  const uint8_t* bytes(size_t n) {
    need(n);
    const uint8_t* q = p;
    p += n;
    return q;
  }
};

uint32_t zigzag(int32_t v) {
  return (static_cast<uint32_t>(v) << 1) ^ static_cast<uint32_t>(v >> 31);
}
int32_t unzigzag(uint32_t u) {
  return static_cast<int32_t>(u >> 1) ^ -static_cast<int32_t>(u & 1);
}

}  // namespace

CdfChannel quantize_cdf(const std::vector<double>& probs, int window) {
  check(window >= 0 && window <= 4096, "config: symbol window out of range");
  const size_t n = static_cast<size_t>(2 * window + 1);
  check(probs.size() == n, "config: probability vector does not match window");
  check(static_cast<int64_t>(kCdfTotal) - kEscapeFreq >= static_cast<int64_t>(n),
        "config: symbol window too large for the 16-bit grid");

  // Frequencies are the model probabilities on an absolute 2^16 scale (not
  // renormalized over the window), so in-window code lengths track the
  // continuous rate estimate. The escape symbol absorbs whatever tail mass
  // the window cuts off, floored at kEscapeFreq.
  std::vector<uint32_t> freq(n, 1);
  int64_t sum = 0;
  for (size_t i = 0; i < n; ++i) {
    const double p = std::max(probs[i], 0.0);
    const int64_t f = std::llround(p * static_cast<double>(kCdfTotal));
    freq[i] = static_cast<uint32_t>(std::max<int64_t>(1, f));
    sum += freq[i];
  }

  const int64_t cap = static_cast<int64_t>(kCdfTotal) - kEscapeFreq;
  if (sum > cap) {
    // Rounding pushed past the budget; shave the largest entries first. One
    // descending pass suffices because the strippable slack (sum - n) is at
    // least the deficit whenever n fits the grid.
    int64_t deficit = sum - cap;
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
      if (freq[a] != freq[b]) return freq[a] > freq[b];
      return a < b;
    });
    for (size_t idx : order) {
      if (deficit == 0) break;
      const int64_t take = std::min<int64_t>(deficit, freq[idx] - 1);
      freq[idx] -= static_cast<uint32_t>(take);
      deficit -= take;
    }
    check(deficit == 0, "runtime: CDF quantization could not fit the grid");
    sum = cap;
  }

  CdfChannel ch;
  ch.window = window;
  ch.cum.resize(n + 2);
  ch.cum[0] = 0;
  for (size_t i = 0; i < n; ++i) ch.cum[i + 1] = ch.cum[i] + freq[i];
  ch.cum[n + 1] = kCdfTotal;  // escape mass = 2^16 - sum >= kEscapeFreq
  return ch;
}

CdfChannel logistic_cdf_channel(double loc, double log_scale, int window) {
  const double s = std::exp(log_scale);
  std::vector<double> probs(static_cast<size_t>(2 * window + 1));
  for (int v = -window; v <= window; ++v) {
    const double a = (static_cast<double>(v) + 0.5 - loc) / s;
    const double b = (static_cast<double>(v) - 0.5 - loc) / s;
    probs[static_cast<size_t>(v + window)] =
        detail::logistic_cdf(a) - detail::logistic_cdf(b);
  }
  return quantize_cdf(probs, window);
}

CdfChannel gaussian_cdf_channel(double sigma, int window) {
  std::vector<double> probs(static_cast<size_t>(2 * window + 1));
  for (int v = -window; v <= window; ++v) {
    const double a = (static_cast<double>(v) + 0.5) / sigma;
    const double b = (static_cast<double>(v) - 0.5) / sigma;
    probs[static_cast<size_t>(v + window)] =
        detail::std_normal_cdf(a) - detail::std_normal_cdf(b);
  }
  return quantize_cdf(probs, window);
}

uint64_t cdf_hash(const std::vector<CdfChannel>& table) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& ch : table) {
    const uint32_t w = static_cast<uint32_t>(ch.window);
    h = fnv1a(&w, sizeof(w), h);
    h = fnv1a(ch.cum.data(), ch.cum.size() * sizeof(uint32_t), h);
  }
  return h;
}

void RangeEncoder::shift_low() {
  if (static_cast<uint32_t>(low_) < 0xFF000000u || (low_ >> 32) != 0) {
    uint8_t t = cache_;
    do {
      out_.push_back(static_cast<uint8_t>(t + static_cast<uint8_t>(low_ >> 32)));
      t = 0xFF;
    } while (--cache_size_ != 0);
    cache_ = static_cast<uint8_t>(low_ >> 24);
  }
  ++cache_size_;
  low_ = (low_ << 8) & 0xFFFFFFFFull;
}

void RangeEncoder::encode(uint32_t start, uint32_t size, uint32_t total) {
  range_ /= total;
  low_ += static_cast<uint64_t>(start) * range_;
  range_ *= size;
  while (range_ < kTopValue) {
    shift_low();
    range_ <<= 8;
  }
}

void RangeEncoder::encode_bits16(uint32_t v) { encode(v & 0xFFFFu, 1, kCdfTotal); }

std::vector<uint8_t> RangeEncoder::finish() {
  for (int i = 0; i < 5; ++i) shift_low();
  return std::move(out_);
}

RangeDecoder::RangeDecoder(const uint8_t* data, size_t len)
    : p_(data), end_(data + len) {
  for (int i = 0; i < 5; ++i) code_ = (code_ << 8) | next_byte();
}

// Reads past the payload return zero: the encoder's five-byte flush already
// pins every decision, so the extra bits feed renormalizations whose result
// no remaining symbol depends on. Genuine truncation is caught by the
// section framing before decoding starts.
uint8_t RangeDecoder::next_byte() { return p_ < end_ ? *p_++ : 0; }

uint32_t RangeDecoder::decode_freq(uint32_t total) {
  range_ /= total;
  const uint32_t v = code_ / range_;
  return v < total ? v : total - 1;
}

void RangeDecoder::decode_update(uint32_t start, uint32_t size) {
  code_ -= start * range_;
  range_ *= size;
  while (range_ < kTopValue) {
    code_ = (code_ << 8) | next_byte();
    range_ <<= 8;
  }
}

uint32_t RangeDecoder::decode_bits16() {
  const uint32_t v = decode_freq(kCdfTotal);
  decode_update(v, 1);
  return v;
}

void put_value(RangeEncoder& rc, const CdfChannel& t, int32_t v) {
  const int w = t.window;
  if (v >= -w && v <= w) {
    const size_t i = static_cast<size_t>(v + w);
    rc.encode(t.cum[i], t.cum[i + 1] - t.cum[i], kCdfTotal);
    return;
  }
  const size_t e = static_cast<size_t>(t.escape_index());
  rc.encode(t.cum[e], t.cum[e + 1] - t.cum[e], kCdfTotal);
  const uint32_t u = zigzag(v);
  rc.encode_bits16(u & 0xFFFFu);
  rc.encode_bits16(u >> 16);
}

int32_t get_value(RangeDecoder& rc, const CdfChannel& t) {
  const uint32_t f = rc.decode_freq(kCdfTotal);
  // cum is strictly increasing; find the symbol owning frequency slot f
  const auto it = std::upper_bound(t.cum.begin(), t.cum.end(), f);
  const size_t i = static_cast<size_t>(it - t.cum.begin()) - 1;
  rc.decode_update(t.cum[i], t.cum[i + 1] - t.cum[i]);
  if (static_cast<int>(i) == t.escape_index()) {
    const uint32_t lo = rc.decode_bits16();
    const uint32_t hi = rc.decode_bits16();
    return unzigzag(lo | (hi << 16));
  }
  return static_cast<int32_t>(i) - t.window;
}

std::vector<uint8_t> rc_encode(const std::vector<int32_t>& symbols, const CdfChannel& t) {
  if (symbols.empty()) return {};
  RangeEncoder rc;
  for (int32_t v : symbols) put_value(rc, t, v);
  return rc.finish();
}

std::vector<int32_t> rc_decode(const std::vector<uint8_t>& bytes, const CdfChannel& t,
                               size_t count) {
  std::vector<int32_t> out;
  if (count == 0) return out;
  out.reserve(count);
  RangeDecoder rc(bytes.data(), bytes.size());
  for (size_t i = 0; i < count; ++i) out.push_back(get_value(rc, t));
  return out;
}

double ideal_bits(const std::vector<int32_t>& symbols, const CdfChannel& t) {
  double bits = 0;
  for (int32_t v : symbols) {
    size_t i;
    if (v >= -t.window && v <= t.window) {
      i = static_cast<size_t>(v + t.window);
    } else {
      i = static_cast<size_t>(t.escape_index());
      bits += 32;  // raw zigzag halves
    }
    const double p = static_cast<double>(t.cum[i + 1] - t.cum[i]) / kCdfTotal;
    bits -= std::log2(p);
  }
  return bits;
}

namespace {

struct SectionPlan {
  int channels = 0, h = 0, w = 0;
  const std::vector<int>* windows = nullptr;
  uint64_t provenance = 0;
};

void write_section(std::vector<uint8_t>& out, const SectionPlan& plan,
                   const std::vector<uint8_t>& payload) {
  put_u16(out, static_cast<uint16_t>(plan.channels));
  put_u16(out, static_cast<uint16_t>(plan.h));
  put_u16(out, static_cast<uint16_t>(plan.w));
  for (int c = 0; c < plan.channels; ++c)
    put_u16(out, static_cast<uint16_t>((*plan.windows)[static_cast<size_t>(c)]));
  put_u64(out, plan.provenance);
  put_u32(out, static_cast<uint32_t>(payload.size()));
  put_u32(out, fnv1a32(payload.data(), payload.size()));
  out.insert(out.end(), payload.begin(), payload.end());
}

struct SectionData {
  int channels = 0, h = 0, w = 0;
  std::vector<int> windows;
  uint64_t provenance = 0;
  const uint8_t* payload = nullptr;
  size_t payload_len = 0;
};

SectionData read_section(ByteReader& r) {
  SectionData s;
  s.channels = r.u16();
  s.h = r.u16();
  s.w = r.u16();
  s.windows.resize(static_cast<size_t>(s.channels));
  for (auto& w : s.windows) w = r.u16();
  s.provenance = r.u64();
  s.payload_len = r.u32();
  const uint32_t checksum = r.u32();
  s.payload = r.bytes(s.payload_len);
  check(fnv1a32(s.payload, s.payload_len) == checksum,
        "io: payload checksum mismatch (corrupted or mismatched stream)");
  return s;
}

// z1 tables depend on the decoded hyper latent through the model, so their
// provenance is the window layout chained onto the decoder parameter hash.
uint64_t z1_provenance(HyperpriorCodec& codec) {
  uint64_t h = codec.decoder_hash();
  for (int w : codec.z1_window) {
    const uint32_t u = static_cast<uint32_t>(w);
    h = fnv1a(&u, sizeof(u), h);
  }
  return h;
}

void require_windows(const HyperpriorCodec& codec) {
  check(codec.z1_window.size() == static_cast<size_t>(codec.cfg.latent_ch) &&
            codec.z2_window.size() == static_cast<size_t>(codec.cfg.hyper_ch),
        "config: codec has no entropy windows; fit them after pretraining");
}

std::vector<CdfChannel> build_z2_table(const HyperpriorCodec& codec) {
  const auto& loc = codec.z2_loc.vals();
  const auto& ls = codec.z2_log_scale.vals();
  std::vector<CdfChannel> table;
  table.reserve(codec.z2_window.size());
  for (size_t c = 0; c < codec.z2_window.size(); ++c) {
    table.push_back(logistic_cdf_channel(static_cast<double>(loc[c]),
                                         static_cast<double>(ls[c]),
                                         codec.z2_window[c]));
  }
  return table;
}

}  // namespace

StreamInfo inspect_stream(const std::vector<uint8_t>& bytes) {
  ByteReader r{bytes.data(), bytes.data() + bytes.size()};
  const uint8_t* m = r.bytes(4);
  check(std::memcmp(m, kMagic, 4) == 0, "io: not a compressed-image stream (bad magic)");
  const uint8_t ver = r.u8();
  check(ver == kVersion, "io: unsupported bitstream version " + std::to_string(ver));
  StreamInfo info;
  info.height = r.u16();
  info.width = r.u16();
  const size_t tag_len = r.u8();
  const uint8_t* tag = r.bytes(tag_len);
  info.quality_tag.assign(reinterpret_cast<const char*>(tag), tag_len);
  info.total_bytes = bytes.size();
  return info;
}

std::vector<uint8_t> compress_image(HyperpriorCodec& codec, const Tensor& x) {
  check(x.shape().size() == 4 && x.dim(0) == 1 && x.dim(1) == 3,
        "config: compress expects a single [1,3,H,W] image");
  require_windows(codec);
  NoGrad ng;

  const int h = x.dim(2), w = x.dim(3);
  check(h % 16 == 0 && w % 16 == 0, "config: image dims must be divisible by 16");

  auto y1 = codec.analysis(x);
  auto y2 = codec.hyper_analysis(y1);
  auto z2q = round_latents(y2);
  auto sigma = codec.hyper_synthesis(z2q);
  auto z1q = round_latents(y1);

  // hyper latent: one learned logistic table per channel
  auto z2_table = build_z2_table(codec);
  RangeEncoder rc2;
  const int c2 = z2q.dim(1);
  const int64_t hw2 = static_cast<int64_t>(z2q.dim(2)) * z2q.dim(3);
  for (int c = 0; c < c2; ++c) {
    const float* p = z2q.data() + c * hw2;
    for (int64_t i = 0; i < hw2; ++i)
      put_value(rc2, z2_table[static_cast<size_t>(c)],
                static_cast<int32_t>(std::lround(p[i])));
  }
  auto payload2 = rc2.finish();

  // main latent: per-element Gaussian table from the predicted scales
  RangeEncoder rc1;
  const int c1 = z1q.dim(1);
  const int64_t hw1 = static_cast<int64_t>(z1q.dim(2)) * z1q.dim(3);
  for (int c = 0; c < c1; ++c) {
    const float* p = z1q.data() + c * hw1;
    const float* sg = sigma.data() + c * hw1;
    for (int64_t i = 0; i < hw1; ++i) {
      const auto t = gaussian_cdf_channel(static_cast<double>(sg[i]),
                                          codec.z1_window[static_cast<size_t>(c)]);
      put_value(rc1, t, static_cast<int32_t>(std::lround(p[i])));
    }
  }
  auto payload1 = rc1.finish();

  std::vector<uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u8(out, kVersion);
  put_u16(out, static_cast<uint16_t>(h));
  put_u16(out, static_cast<uint16_t>(w));
  put_u8(out, static_cast<uint8_t>(codec.quality_tag.size()));
  out.insert(out.end(), codec.quality_tag.begin(), codec.quality_tag.end());
  put_u64(out, codec.decoder_hash());

  SectionPlan p2{c2, z2q.dim(2), z2q.dim(3), &codec.z2_window, cdf_hash(z2_table)};
  write_section(out, p2, payload2);
  SectionPlan p1{c1, z1q.dim(2), z1q.dim(3), &codec.z1_window, z1_provenance(codec)};
  write_section(out, p1, payload1);
  return out;
}

DecompressResult decompress_image(HyperpriorCodec& codec, const std::vector<uint8_t>& bytes) {
  require_windows(codec);
  NoGrad ng;

  ByteReader r{bytes.data(), bytes.data() + bytes.size()};
  const uint8_t* m = r.bytes(4);
  check(std::memcmp(m, kMagic, 4) == 0, "io: not a compressed-image stream (bad magic)");
  const uint8_t ver = r.u8();
  check(ver == kVersion, "io: unsupported bitstream version " + std::to_string(ver));
  const int h = r.u16();
  const int w = r.u16();
  const size_t tag_len = r.u8();
  const uint8_t* tag_p = r.bytes(tag_len);
  const std::string tag(reinterpret_cast<const char*>(tag_p), tag_len);
  // The tag is a human label; what decoding actually requires is that the
  // decoder-side parameters match. An encoder-only fine-tune keeps them
  // intact, so its streams legitimately decode under the original codec.
  check(r.u64() == codec.decoder_hash(),
        "io: decoder parameters differ from the ones this stream was coded with "
        "(stream from codec '" + tag + "', decoding with '" + codec.quality_tag + "')");

  // hyper latent section
  auto s2 = read_section(r);
  check(s2.channels == codec.cfg.hyper_ch && s2.h == h / 16 && s2.w == w / 16,
        "io: hyper-latent geometry mismatch");
  check(s2.windows == codec.z2_window, "io: hyper-latent symbol window mismatch");
  auto z2_table = build_z2_table(codec);
  check(s2.provenance == cdf_hash(z2_table), "io: entropy table provenance mismatch");

  std::vector<float> z2v(static_cast<size_t>(s2.channels) * s2.h * s2.w);
  {
    RangeDecoder rc(s2.payload, s2.payload_len);
    const int64_t hw = static_cast<int64_t>(s2.h) * s2.w;
    for (int c = 0; c < s2.channels; ++c)
      for (int64_t i = 0; i < hw; ++i)
        z2v[static_cast<size_t>(c * hw + i)] =
            static_cast<float>(get_value(rc, z2_table[static_cast<size_t>(c)]));
  }
  auto z2 = Tensor::from({1, s2.channels, s2.h, s2.w}, std::move(z2v));
  auto sigma = codec.hyper_synthesis(z2);

  // main latent section
  auto s1 = read_section(r);
  check(s1.channels == codec.cfg.latent_ch && s1.h == h / 8 && s1.w == w / 8,
        "io: main-latent geometry mismatch");
  check(s1.windows == codec.z1_window, "io: main-latent symbol window mismatch");
  check(s1.provenance == z1_provenance(codec), "io: entropy table provenance mismatch");

  std::vector<float> z1v(static_cast<size_t>(s1.channels) * s1.h * s1.w);
  {
    RangeDecoder rc(s1.payload, s1.payload_len);
    const int64_t hw = static_cast<int64_t>(s1.h) * s1.w;
    for (int c = 0; c < s1.channels; ++c) {
      const float* sg = sigma.data() + c * hw;
      for (int64_t i = 0; i < hw; ++i) {
        const auto t = gaussian_cdf_channel(static_cast<double>(sg[i]),
                                            codec.z1_window[static_cast<size_t>(c)]);
        z1v[static_cast<size_t>(c * hw + i)] = static_cast<float>(get_value(rc, t));
      }
    }
  }
  auto z1 = Tensor::from({1, s1.channels, s1.h, s1.w}, std::move(z1v));

  DecompressResult res;
  res.recon = codec.synthesis(z1);
  res.z1 = z1;
  res.z2 = z2;
  res.bpp = 8.0 * static_cast<double>(bytes.size()) / (static_cast<double>(h) * w);
  return res;
}

}  // namespace taskcodec
