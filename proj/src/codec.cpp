#include "taskcodec/codec.hpp"

#include <cmath>
#include <cstdio>

#include "taskcodec/optim.hpp"

namespace taskcodec {

const std::vector<QualityPreset>& quality_presets() {
  // Higher q spends more bits. Weights picked so the four models spread
  // roughly a factor of 6 in BPP on the synthetic corpus.
  static const std::vector<QualityPreset> presets = {
      {"q1", 0.0200},
      {"q2", 0.0080},
      {"q3", 0.0030},
      {"q4", 0.0012},
  };
  return presets;
}

const QualityPreset& quality_preset(const std::string& tag) {
  for (const auto& p : quality_presets()) {
    if (p.tag == tag) return p;
  }
  fail("config: unknown quality tag '" + tag + "'");
}

const std::vector<BetaPoint>& beta_ladder() {
  // Each fine-tuning trade-off weight starts from a pretrained quality point;
  // the two lowest weights share the highest-rate model.
  static const std::vector<BetaPoint> ladder = {
      {1.0, "q1"},
      {0.6675, "q2"},
      {0.3186, "q4"},
      {0.1, "q4"},
  };
  return ladder;
}

void fit_windows(HyperpriorCodec& codec, const std::vector<TensorOf<float>>& images) {
  check(!images.empty(), "config: window fitting needs at least one image");
  NoGrad ng;
  std::vector<int> w1(static_cast<size_t>(codec.cfg.latent_ch), 0);
  std::vector<int> w2(static_cast<size_t>(codec.cfg.hyper_ch), 0);
  for (size_t i = 0; i < images.size(); ++i) {
    auto x = stack_batch(images, {i});
    auto out = codec.forward(x, QuantMode::kEvalRound);
    auto scan = [](const TensorOf<float>& z, std::vector<int>& w) {
      const int c = z.dim(1);
      const int64_t hw = static_cast<int64_t>(z.dim(2)) * z.dim(3);
      const float* v = z.data();
      for (int n = 0; n < z.dim(0); ++n)
        for (int ch = 0; ch < c; ++ch) {
          int m = w[static_cast<size_t>(ch)];
          const float* p = v + (static_cast<int64_t>(n) * c + ch) * hw;
          for (int64_t i = 0; i < hw; ++i) {
            const int a = static_cast<int>(std::lround(std::fabs(p[i])));
            if (a > m) m = a;
          }
          w[static_cast<size_t>(ch)] = m;
        }
    };
    scan(out.z1, w1);
    scan(out.z2, w2);
  }
  const int margin = 4;
  for (auto& v : w1) v += margin;
  for (auto& v : w2) v += margin;
  codec.z1_window = std::move(w1);
  codec.z2_window = std::move(w2);
}

Checkpoint codec_to_checkpoint(HyperpriorCodec& codec) {
  Checkpoint ck = Checkpoint::from_params(codec.params(), nlohmann::json::object());
  ck.meta["kind"] = "codec";
  ck.meta["quality_tag"] = codec.quality_tag;
  ck.meta["rate_weight"] = codec.rate_weight;
  ck.meta["mid_ch"] = codec.cfg.mid_ch;
  ck.meta["latent_ch"] = codec.cfg.latent_ch;
  ck.meta["hyper_ch"] = codec.cfg.hyper_ch;
  ck.meta["scale_floor"] = codec.cfg.scale_floor;
  ck.meta["z1_window"] = codec.z1_window;
  ck.meta["z2_window"] = codec.z2_window;
  return ck;
}

void codec_from_checkpoint(HyperpriorCodec& codec, const Checkpoint& ck) {
  check(ck.meta.value("kind", "") == "codec",
        "io: checkpoint is not a codec (kind='" + ck.meta.value("kind", "") + "')");
  check(ck.meta.value("mid_ch", -1) == codec.cfg.mid_ch &&
            ck.meta.value("latent_ch", -1) == codec.cfg.latent_ch &&
            ck.meta.value("hyper_ch", -1) == codec.cfg.hyper_ch,
        "io: checkpoint channel configuration does not match this codec");
  auto ps = codec.params();
  ck.restore_params(ps);
  codec.quality_tag = ck.meta.value("quality_tag", "q0");
  codec.rate_weight = ck.meta.value("rate_weight", 0.0);
  codec.cfg.scale_floor = ck.meta.value("scale_floor", codec.cfg.scale_floor);
  codec.z1_window = ck.meta.value("z1_window", std::vector<int>{});
  codec.z2_window = ck.meta.value("z2_window", std::vector<int>{});
}

void save_codec(HyperpriorCodec& codec, const std::string& path) {
  codec_to_checkpoint(codec).save(path);
}

void load_codec(HyperpriorCodec& codec, const std::string& path) {
  codec_from_checkpoint(codec, Checkpoint::load(path));
}

PretrainReport pretrain_codec(HyperpriorCodec& codec,
                              const std::vector<TensorOf<float>>& images,
                              int epochs, int batch_size, double lr,
                              uint64_t seed, bool verbose) {
  check(!images.empty(), "config: pretraining needs a non-empty image list");
  check(batch_size >= 1, "config: batch size must be >= 1");
  Rng rng(seed);
  Rng noise_rng = rng.fork(1);
  AdamT<float> opt(codec.params(), lr);
  LossMonitor mon("codec pretrain");

  // Snapshot at each epoch boundary so a divergence aborts back to the last
  // finite state instead of leaving half-updated weights behind.
  Checkpoint last_good = codec_to_checkpoint(codec);

  std::vector<size_t> idx(images.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;

  PretrainReport rep;
  const double px = static_cast<double>(images[0].dim(1)) * images[0].dim(2);
  for (int ep = 0; ep < epochs; ++ep) {
    for (size_t i = idx.size(); i > 1; --i) {
      std::swap(idx[i - 1], idx[rng.uniform_int(static_cast<uint64_t>(i))]);
    }
    double ep_loss = 0, ep_bpp = 0, ep_mse = 0;
    int ep_batches = 0;
    for (size_t start = 0; start < idx.size(); start += static_cast<size_t>(batch_size)) {
      const size_t stop = std::min(idx.size(), start + static_cast<size_t>(batch_size));
      std::vector<size_t> pick(idx.begin() + static_cast<int64_t>(start),
                               idx.begin() + static_cast<int64_t>(stop));
      auto x = stack_batch(images, pick);
      auto out = codec.forward(x, QuantMode::kTrainNoise, &noise_rng);
      auto dist = mse(out.recon, x);
      auto bpp = mul_scalar(out.rate_bits,
                            static_cast<float>(1.0 / (px * static_cast<double>(pick.size()))));
      auto loss = add(dist, mul_scalar(bpp, static_cast<float>(codec.rate_weight)));
      const double lv = loss.item();
      ep_mse += dist.item();
      ep_bpp += bpp.item();
      ep_loss += lv;
      ++ep_batches;
      ++rep.steps;
      opt.zero_grad();
      try {
        mon.observe(lv);
      } catch (...) {
        auto ps = codec.params();
        last_good.restore_params(ps);
        throw;
      }
      loss.backward();
      opt.step();
    }
    last_good = codec_to_checkpoint(codec);
    rep.final_loss = ep_loss / ep_batches;
    rep.final_bpp = ep_bpp / ep_batches;
    rep.final_mse = ep_mse / ep_batches;
    if (verbose) {
      std::fprintf(stderr, "[pretrain %s] epoch %d/%d loss %.6f mse %.6f bpp %.4f\n",
                   codec.quality_tag.c_str(), ep + 1, epochs, rep.final_loss,
                   rep.final_mse, rep.final_bpp);
    }
  }
  return rep;
}

}  // namespace taskcodec
