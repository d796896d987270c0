#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "taskcodec/codec.hpp"
#include "taskcodec/tensor.hpp"

namespace taskcodec {

// Lossless coding of quantized latents. The coder is a carry-propagating
// range coder (64-bit low with a byte cache, 32-bit range, byte-wise
// renormalization below 2^24). All state arithmetic is integer, so identical
// inputs give identical bytes on every platform.

constexpr uint32_t kCdfTotal = 1u << 16;
constexpr uint32_t kEscapeFreq = 16;

// One channel's quantized distribution over symbols v in [-window, window]
// plus a final escape symbol. cum has 2*window + 3 entries: cum[0] = 0,
// cum.back() = 2^16, strictly increasing (every symbol keeps mass >= 1).
struct CdfChannel {
  int window = 0;
  std::vector<uint32_t> cum;

  int symbol_count() const { return 2 * window + 2; }
  int escape_index() const { return 2 * window + 1; }
};

// Quantizes a probability vector onto the 16-bit grid: every in-window
// symbol gets mass >= 1 proportional to its absolute probability, the escape
// symbol gets the leftover tail mass (>= kEscapeFreq), and the total is
// exactly kCdfTotal. Deterministic.
CdfChannel quantize_cdf(const std::vector<double>& probs, int window);

// Interval masses of the continuous priors on the integer grid.
CdfChannel logistic_cdf_channel(double loc, double log_scale, int window);
CdfChannel gaussian_cdf_channel(double sigma, int window);

uint64_t cdf_hash(const std::vector<CdfChannel>& table);

class RangeEncoder {
 public:
  void encode(uint32_t start, uint32_t size, uint32_t total);
  void encode_bits16(uint32_t v);  // uniform 16-bit value
  std::vector<uint8_t> finish();

 private:
  void shift_low();
  uint64_t low_ = 0;
  uint32_t range_ = 0xFFFFFFFFu;
  uint8_t cache_ = 0;
  int64_t cache_size_ = 1;
  std::vector<uint8_t> out_;
};

class RangeDecoder {
 public:
  RangeDecoder(const uint8_t* data, size_t len);
  uint32_t decode_freq(uint32_t total);
  void decode_update(uint32_t start, uint32_t size);
  uint32_t decode_bits16();

 private:
  uint8_t next_byte();
  const uint8_t* p_;
  const uint8_t* end_;
  uint32_t range_ = 0xFFFFFFFFu;
  uint32_t code_ = 0;
};

// Symbol-level helpers. Values outside the table window are sent as the
// escape symbol followed by the zigzagged value in two uniform 16-bit
// halves.
void put_value(RangeEncoder& rc, const CdfChannel& t, int32_t v);
int32_t get_value(RangeDecoder& rc, const CdfChannel& t);

// Whole-sequence convenience under a single table. Empty input gives empty
// output (no coder state at all).
std::vector<uint8_t> rc_encode(const std::vector<int32_t>& symbols, const CdfChannel& t);
std::vector<int32_t> rc_decode(const std::vector<uint8_t>& bytes, const CdfChannel& t,
                               size_t count);

// Ideal code length of a symbol sequence under a quantized table, in bits.
double ideal_bits(const std::vector<int32_t>& symbols, const CdfChannel& t);

// Serialized image format: header (magic, version, dims, quality tag,
// decoder hash), then a hyper-latent section and a main-latent section. The
// main latent's per-element Gaussian tables are rebuilt from the decoded
// hyper latent, mirroring the decode order of the model itself. Each
// section carries its payload length, a payload checksum and a hash of the
// table provenance so a model/stream mismatch is reported, never silently
// decoded.
struct StreamInfo {
  int height = 0;
  int width = 0;
  std::string quality_tag;
  size_t total_bytes = 0;
};

StreamInfo inspect_stream(const std::vector<uint8_t>& bytes);

std::vector<uint8_t> compress_image(HyperpriorCodec& codec, const Tensor& x);

struct DecompressResult {
  Tensor recon;  // [1,3,H,W]
  Tensor z1;
  Tensor z2;
  double bpp = 0;
};

DecompressResult decompress_image(HyperpriorCodec& codec, const std::vector<uint8_t>& bytes);

}  // namespace taskcodec
