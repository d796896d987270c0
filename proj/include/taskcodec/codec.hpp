#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "taskcodec/checkpoint.hpp"
#include "taskcodec/layers.hpp"
#include "taskcodec/ops.hpp"

namespace taskcodec {

struct CodecSettings {
  int mid_ch = 16;     // channels after the first two analysis convs
  int latent_ch = 32;  // main latent y1
  int hyper_ch = 16;   // hyper latent y2
  double scale_floor = 0.11;
};

enum class QuantMode { kTrainNoise, kEvalRound };

template <typename S>
struct CodecOutputT {
  TensorOf<S> recon;      // [N,3,H,W]
  TensorOf<S> rate_bits;  // scalar, total bits over the batch
  TensorOf<S> z1;         // quantized main latent [N,latent,H/8,W/8]
  TensorOf<S> z2;         // quantized hyper latent [N,hyper,H/16,W/16]
  TensorOf<S> sigma;      // per-element scales for z1
  double bits_z1 = 0;
  double bits_z2 = 0;
  int64_t clamped = 0;  // interval masses that hit the probability floor
};

// Scale-hyperprior image codec. The analysis transform downsamples 8x and the
// hyper path adds one more 2x, so inputs must have height and width divisible
// by 16. The main latent is coded against a zero-mean Gaussian whose scale
// comes from the hyper decoder; the hyper latent is coded against a learned
// per-channel logistic.
template <typename S>
class HyperpriorCodecT {
 public:
  CodecSettings cfg;
  std::string quality_tag = "q0";
  double rate_weight = 0.0;  // weight on bpp during rate-distortion pretraining
  // Per-channel symbol windows [-w, w] for the entropy coder, frozen after
  // pretraining so encoder and decoder stay in agreement across fine-tunes.
  std::vector<int> z1_window;
  std::vector<int> z2_window;

  HyperpriorCodecT(const CodecSettings& c, uint64_t seed)
      : cfg(c),
        ga1(3, c.mid_ch, 5, 2, 2, true, rng_for(seed, 1)),
        ga2(c.mid_ch, c.mid_ch, 5, 2, 2, true, rng_for(seed, 2)),
        ga3(c.mid_ch, c.latent_ch, 5, 2, 2, true, rng_for(seed, 3)),
        gd1(c.mid_ch, false),
        gd2(c.mid_ch, false),
        gd3(c.latent_ch, false),
        ha1(c.latent_ch, c.hyper_ch, 3, 1, 1, true, rng_for(seed, 4)),
        ha2(c.hyper_ch, c.hyper_ch, 5, 2, 2, true, rng_for(seed, 5)),
        hs1(c.hyper_ch, c.latent_ch, 5, 2, 2, 1, true, rng_for(seed, 6)),
        hs2(c.latent_ch, c.latent_ch, 3, 1, 1, true, rng_for(seed, 7)),
        gs1(c.latent_ch, c.mid_ch, 5, 2, 2, 1, true, rng_for(seed, 8)),
        gs2(c.mid_ch, c.mid_ch, 5, 2, 2, 1, true, rng_for(seed, 9)),
        gs3(c.mid_ch, 3, 5, 2, 2, 1, true, rng_for(seed, 10)),
        ig1(c.mid_ch, true),
        ig2(c.mid_ch, true),
        ig3(3, true),
        z2_loc(TensorOf<S>::zeros({c.hyper_ch})),
        z2_log_scale(TensorOf<S>::zeros({c.hyper_ch})) {
    z2_loc.set_requires_grad(true);
    z2_log_scale.set_requires_grad(true);
  }

  TensorOf<S> analysis(const TensorOf<S>& x) {
    auto t = gd1(ga1(x));
    t = gd2(ga2(t));
    return gd3(ga3(t));
  }

  TensorOf<S> hyper_analysis(const TensorOf<S>& y1) {
    return ha2(relu(ha1(y1)));
  }

  TensorOf<S> hyper_synthesis(const TensorOf<S>& z2q) {
    auto raw = hs2(relu(hs1(z2q)));
    return max_with(softplus(raw), static_cast<S>(cfg.scale_floor));
  }

  TensorOf<S> synthesis(const TensorOf<S>& z1q) {
    auto t = ig1(gs1(z1q));
    t = ig2(gs2(t));
    return ig3(gs3(t));
  }

  // fixed_noise1/2, when given, replace the RNG draw so finite-difference
  // checks see a deterministic function of the inputs.
  CodecOutputT<S> forward(const TensorOf<S>& x, QuantMode mode, Rng* rng = nullptr,
                          const std::vector<S>* fixed_noise1 = nullptr,
                          const std::vector<S>* fixed_noise2 = nullptr) {
    check(x.shape().size() == 4 && x.dim(1) == 3,
          "config: codec input must be [N,3,H,W], got " + shape_str(x.shape()));
    check(x.dim(2) % 16 == 0 && x.dim(3) % 16 == 0,
          "config: codec input dims must be divisible by 16, got " + shape_str(x.shape()));

    auto y1 = analysis(x);
    auto y2 = hyper_analysis(y1);

    auto z2q = quantize(y2, mode, rng, fixed_noise2);
    auto sigma = hyper_synthesis(z2q);
    auto z1q = quantize(y1, mode, rng, fixed_noise1);

    CodecOutputT<S> out;
    out.recon = synthesis(z1q);
    RateStats st1, st2;
    auto bits1 = gaussian_interval_bits(z1q, sigma, &st1);
    auto bits2 = logistic_interval_bits(z2q, z2_loc, z2_log_scale, &st2);
    out.rate_bits = add(bits1, bits2);
    out.z1 = z1q;
    out.z2 = z2q;
    out.sigma = sigma;
    out.bits_z1 = static_cast<double>(bits1.item());
    out.bits_z2 = static_cast<double>(bits2.item());
    out.clamped = st1.clamped + st2.clamped;
    return out;
  }

  std::vector<Param<S>> params() {
    std::vector<Param<S>> ps;
    append_encoder(ps);
    append_decoder(ps);
    return ps;
  }

  // The encoder side: analysis and hyper-analysis. This is the set a
  // frozen-decoder fine-tune is allowed to touch.
  std::vector<Param<S>> encoder_params() {
    std::vector<Param<S>> ps;
    append_encoder(ps);
    return ps;
  }

  // Everything a decoder needs: synthesis, hyper-synthesis and the hyper
  // prior. Hashing these detects contract violations when only the encoder
  // was supposed to move.
  std::vector<Param<S>> decoder_params() {
    std::vector<Param<S>> ps;
    append_decoder(ps);
    return ps;
  }

  uint64_t decoder_hash() { return params_hash(decoder_params()); }
  uint64_t full_hash() { return params_hash(params()); }

  int latent_hw(int image_hw) const { return image_hw / 8; }
  int hyper_hw(int image_hw) const { return image_hw / 16; }

  Conv2dT<S> ga1, ga2, ga3;
  GdnT<S> gd1, gd2, gd3;
  Conv2dT<S> ha1, ha2;
  TransposedConv2dT<S> hs1;
  Conv2dT<S> hs2;
  TransposedConv2dT<S> gs1, gs2, gs3;
  GdnT<S> ig1, ig2, ig3;
  TensorOf<S> z2_loc, z2_log_scale;

 private:
  static Rng rng_for(uint64_t seed, uint64_t layer) { return Rng(seed).fork(layer); }

  TensorOf<S> quantize(const TensorOf<S>& t, QuantMode mode, Rng* rng,
                       const std::vector<S>* fixed) {
    if (mode == QuantMode::kEvalRound) return round_latents(t);
    if (fixed) return add_noise(t, *fixed);
    check(rng != nullptr, "config: training-mode quantization needs an RNG");
    std::vector<S> noise(static_cast<size_t>(t.size()));
    for (auto& v : noise) v = static_cast<S>(rng->uniform() - 0.5);
    return add_noise(t, noise);
  }

 private:
  void append_encoder(std::vector<Param<S>>& ps) {
    ga1.params("ga1", ps);
    gd1.params("gd1", ps);
    ga2.params("ga2", ps);
    gd2.params("gd2", ps);
    ga3.params("ga3", ps);
    gd3.params("gd3", ps);
    ha1.params("ha1", ps);
    ha2.params("ha2", ps);
  }

  void append_decoder(std::vector<Param<S>>& ps) {
    hs1.params("hs1", ps);
    hs2.params("hs2", ps);
    gs1.params("gs1", ps);
    ig1.params("ig1", ps);
    gs2.params("gs2", ps);
    ig2.params("ig2", ps);
    gs3.params("gs3", ps);
    ig3.params("ig3", ps);
    ps.push_back({"z2_loc", z2_loc, nullptr});
    ps.push_back({"z2_log_scale", z2_log_scale, nullptr});
  }
};

using HyperpriorCodec = HyperpriorCodecT<float>;
using CodecOutput = CodecOutputT<float>;

// Quality presets: tag and the weight on estimated bpp in the pretraining
// loss mse + rate_weight * bpp. Lower weight spends more bits.
struct QualityPreset {
  std::string tag;
  double rate_weight;
};
const std::vector<QualityPreset>& quality_presets();
const QualityPreset& quality_preset(const std::string& tag);

// Fine-tune settings keyed by the trade-off weight beta; quality_tag names
// the pretrained codec each run starts from.
struct BetaPoint {
  double beta;
  std::string quality_tag;
};
const std::vector<BetaPoint>& beta_ladder();

// Measures per-channel max |latent| over a set of images (eval-mode rounding)
// and freezes symbol windows with headroom. Call once after pretraining.
void fit_windows(HyperpriorCodec& codec, const std::vector<TensorOf<float>>& images);

Checkpoint codec_to_checkpoint(HyperpriorCodec& codec);
void codec_from_checkpoint(HyperpriorCodec& codec, const Checkpoint& ck);
void save_codec(HyperpriorCodec& codec, const std::string& path);
void load_codec(HyperpriorCodec& codec, const std::string& path);

struct PretrainReport {
  double final_loss = 0;
  double final_bpp = 0;
  double final_mse = 0;
  int steps = 0;
};

// Rate-distortion pretraining with Adam. Images are [3,H,W] in [0,1].
PretrainReport pretrain_codec(HyperpriorCodec& codec,
                              const std::vector<TensorOf<float>>& images,
                              int epochs, int batch_size, double lr,
                              uint64_t seed, bool verbose = false);

}  // namespace taskcodec
