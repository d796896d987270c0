#include "taskcodec/regimes.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>

#include "taskcodec/common.hpp"
#include "taskcodec/entropy.hpp"
#include "taskcodec/metrics.hpp"
#include "taskcodec/optim.hpp"

namespace taskcodec {

namespace fs = std::filesystem;

namespace {

// Caps on the reconstruction caches; full sweeps touch more codecs than fit
// in memory, and recomputing evicted entries is cheap relative to training.
constexpr size_t kMaxTrainReconSets = 3;
constexpr size_t kMaxEvalPacks = 6;

std::string num9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

Tensor single_chw(const Tensor& nchw) {
  return Tensor::from({nchw.dim(1), nchw.dim(2), nchw.dim(3)}, nchw.vals());
}

Tensor as_batch(const Tensor& img) {
  return stack_batch(std::vector<Tensor>{img}, {0});
}

void zero_param_grads(std::vector<Param<float>> ps) {
  for (auto& p : ps) p.t.zero_grad();
}

std::vector<size_t> shuffled_indices(size_t n, Rng& rng) {
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  for (size_t i = n; i > 1; --i) {
    std::swap(idx[i - 1], idx[rng.uniform_int(static_cast<uint64_t>(i))]);
  }
  return idx;
}

// Deterministic per-artifact stream for batch shuffling and quantization
// noise; the artifact name already encodes regime, beta and seed.
Rng run_rng(const std::string& key) { return Rng(fnv1a_str(key)); }

std::vector<size_t> batch_slice(const std::vector<size_t>& order, size_t start,
                                size_t batch) {
  const size_t stop = std::min(order.size(), start + batch);
  return {order.begin() + static_cast<int64_t>(start),
          order.begin() + static_cast<int64_t>(stop)};
}

}  // namespace

std::string results_csv_header() {
  return "regime,beta,q,seed,bpp_actual,bpp_est,det_ap,cls_top1,cls_top5,seg_miou,psnr,"
         "msssim";
}

std::string results_csv_line(const RateAccuracyPoint& p) {
  std::string s;
  s += p.regime;
  s += ',';
  s += num9(p.beta);
  s += ',';
  s += p.quality;
  s += ',';
  s += std::to_string(p.seed);
  for (double v : {p.bpp_actual, p.bpp_est, p.det_ap, p.cls_top1, p.cls_top5, p.seg_miou,
                   p.psnr_db, p.msssim}) {
    s += ',';
    s += num9(v);
  }
  return s;
}

void write_results_csv(const std::vector<RateAccuracyPoint>& points,
                       const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  check(static_cast<bool>(out), "io: cannot write '" + path + "'");
  out << results_csv_header() << '\n';
  for (const auto& p : points) out << results_csv_line(p) << '\n';
}

std::vector<RateAccuracyPoint> read_results_csv(const std::string& path) {
  std::ifstream in(path);
  check(static_cast<bool>(in), "io: cannot open '" + path + "'");
  std::string line;
  check(static_cast<bool>(std::getline(in, line)) && line == results_csv_header(),
        "io: '" + path + "' does not start with the results schema header");
  std::vector<RateAccuracyPoint> points;
  size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    size_t start = 0;
    while (true) {
      const size_t comma = line.find(',', start);
      cells.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    check(cells.size() == 12, "io: '" + path + "' line " + std::to_string(lineno) +
                                  " has " + std::to_string(cells.size()) +
                                  " fields, expected 12");
    RateAccuracyPoint p;
    p.regime = cells[0];
    p.quality = cells[2];
    try {
      p.beta = std::stod(cells[1]);
      p.seed = std::stoi(cells[3]);
      p.bpp_actual = std::stod(cells[4]);
      p.bpp_est = std::stod(cells[5]);
      p.det_ap = std::stod(cells[6]);
      p.cls_top1 = std::stod(cells[7]);
      p.cls_top5 = std::stod(cells[8]);
      p.seg_miou = std::stod(cells[9]);
      p.psnr_db = std::stod(cells[10]);
      p.msssim = std::stod(cells[11]);
    } catch (const std::exception&) {
      fail("io: '" + path + "' line " + std::to_string(lineno) +
           " holds a malformed number");
    }
    points.push_back(std::move(p));
  }
  return points;
}

std::map<std::string, std::vector<ReportPoint>> aggregate_report(
    const std::vector<RateAccuracyPoint>& points) {
  struct Acc {
    std::string quality;
    int runs = 0;
    double bpp = 0, ap = 0, top1 = 0, miou = 0, psnr = 0, msssim = 0;
  };
  std::map<std::string, std::map<double, Acc>> grid;
  for (const auto& p : points) {
    Acc& a = grid[p.regime][p.beta];
    a.quality = p.quality;
    ++a.runs;
    a.bpp += p.bpp_actual;
    a.ap += p.det_ap;
    a.top1 += p.cls_top1;
    a.miou += p.seg_miou;
    a.psnr += p.psnr_db;
    a.msssim += p.msssim;
  }
  std::map<std::string, std::vector<ReportPoint>> series;
  for (auto& [regime, cells] : grid) {
    auto& vec = series[regime];
    for (auto& [beta, a] : cells) {
      ReportPoint r;
      r.beta = beta;
      r.quality = a.quality;
      r.runs = a.runs;
      r.bpp_actual = a.bpp / a.runs;
      r.det_ap = a.ap / a.runs;
      r.cls_top1 = a.top1 / a.runs;
      r.seg_miou = a.miou / a.runs;
      r.psnr_db = a.psnr / a.runs;
      r.msssim = a.msssim / a.runs;
      vec.push_back(r);
    }
    std::sort(vec.begin(), vec.end(), [](const ReportPoint& a, const ReportPoint& b) {
      if (a.bpp_actual != b.bpp_actual) return a.bpp_actual < b.bpp_actual;
      return a.beta > b.beta;
    });
  }
  return series;
}

void write_report(const std::vector<RateAccuracyPoint>& points,
                  const ExperimentConfig& cfg, const std::string& dir) {
  auto series = aggregate_report(points);

  {
    std::ofstream out(dir + "/report.csv", std::ios::binary);
    check(static_cast<bool>(out), "io: cannot write '" + dir + "/report.csv'");
    out << "regime,beta,q,runs,bpp_actual,det_ap,cls_top1,seg_miou,psnr,msssim\n";
    for (const auto& [regime, vec] : series) {
      for (const auto& r : vec) {
        out << regime << ',' << num9(r.beta) << ',' << r.quality << ',' << r.runs << ','
            << num9(r.bpp_actual) << ',' << num9(r.det_ap) << ',' << num9(r.cls_top1)
            << ',' << num9(r.seg_miou) << ',' << num9(r.psnr_db) << ','
            << num9(r.msssim) << '\n';
      }
    }
  }

  nlohmann::json j;
  j["config_hash"] = hex64(cfg.config_hash());
  nlohmann::json s;
  for (const auto& [regime, vec] : series) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : vec) {
      arr.push_back({{"beta", r.beta},
                     {"quality", r.quality},
                     {"runs", r.runs},
                     {"bpp_actual", r.bpp_actual},
                     {"det_ap", r.det_ap},
                     {"cls_top1", r.cls_top1},
                     {"seg_miou", r.seg_miou},
                     {"psnr", r.psnr_db},
                     {"msssim", r.msssim}});
    }
    s[regime] = std::move(arr);
  }
  j["series"] = std::move(s);
  std::ofstream out(dir + "/report.json", std::ios::binary);
  check(static_cast<bool>(out), "io: cannot write '" + dir + "/report.json'");
  out << j.dump(2) << '\n';
}

Pipeline::Pipeline(const ExperimentConfig& cfg, bool verbose)
    : cfg_(cfg), verbose_(verbose) {
  fs::create_directories(cfg_.run_dir);
  // A run directory is bound to one configuration; mixing artifacts trained
  // under different schedules would silently corrupt comparisons.
  nlohmann::json rj;
  rj["config_hash"] = hex64(cfg_.config_hash());
  rj["dataset_key"] = hex64(cfg_.dataset.content_key());
  const std::string rp = path("run.json");
  if (fs::exists(rp)) {
    std::ifstream in(rp);
    nlohmann::json old;
    in >> old;
    check(old == rj, "config: run dir '" + cfg_.run_dir +
                         "' holds artifacts from a different configuration; use a fresh "
                         "run_dir");
  } else {
    std::ofstream out(rp, std::ios::binary);
    check(static_cast<bool>(out), "io: cannot write '" + rp + "'");
    out << rj.dump(2) << '\n';
  }
}

std::string Pipeline::path(const std::string& name) const {
  return cfg_.run_dir + "/" + name;
}

void Pipeline::note(const std::string& msg) const {
  if (verbose_) std::fprintf(stderr, "[pipeline] %s\n", msg.c_str());
}

const Dataset& Pipeline::data() {
  if (!data_) {
    note("generating dataset (" + std::to_string(cfg_.dataset.train_count) + " train / " +
         std::to_string(cfg_.dataset.val_count) + " val)");
    data_ = std::make_unique<Dataset>(generate_dataset(cfg_.dataset));
  }
  return *data_;
}

std::string Pipeline::quality_for(double beta) const {
  for (const auto& pt : beta_ladder()) {
    if (pt.beta == beta) return pt.quality_tag;
  }
  fail("config: beta " + num9(beta) + " is not a ladder point");
}

HyperpriorCodec& Pipeline::pretrained_codec(const std::string& quality) {
  auto it = codecs_.find(quality);
  if (it != codecs_.end()) return *it->second;
  const QualityPreset& preset = quality_preset(quality);
  auto codec = std::make_shared<HyperpriorCodec>(CodecSettings{}, cfg_.codec_seed);
  codec->quality_tag = quality;
  codec->rate_weight = preset.rate_weight;
  const std::string file = path("codec-" + quality + ".ck");
  if (fs::exists(file)) {
    load_codec(*codec, file);
    check(codec->quality_tag == quality,
          "io: '" + file + "' holds codec '" + codec->quality_tag + "', expected '" +
              quality + "'");
  } else {
    note("pretraining codec " + quality);
    auto images = images_of(data().train);
    pretrain_codec(*codec, images, cfg_.codec_epochs, cfg_.codec_batch, cfg_.codec_lr,
                   cfg_.codec_seed, verbose_);
    fit_windows(*codec, images);
    save_codec(*codec, file);
  }
  codecs_[quality] = codec;
  return *codec;
}

HyperpriorCodec& Pipeline::reference_codec() {
  // Highest quality = smallest rate weight among the configured presets.
  std::string best;
  double best_w = 0;
  for (const auto& q : cfg_.qualities) {
    const double w = quality_preset(q).rate_weight;
    if (best.empty() || w < best_w) {
      best = q;
      best_w = w;
    }
  }
  check(!best.empty(), "config: no qualities configured");
  return pretrained_codec(best);
}

Detector& Pipeline::base_detector() {
  if (base_det_) return *base_det_;
  base_det_ = std::make_shared<Detector>(cfg_.detector_pretrain.seed);
  const std::string file = path("detector-base.ck");
  if (fs::exists(file)) {
    load_detector(*base_det_, file);
  } else {
    note("pretraining detector");
    const auto& c = cfg_.detector_pretrain;
    pretrain_detector(*base_det_, data(), c.epochs, c.batch_size, c.lr, c.seed, verbose_,
                      c.floor);
    save_detector(*base_det_, file);
  }
  return *base_det_;
}

Classifier& Pipeline::base_classifier() {
  if (base_cls_) return *base_cls_;
  base_cls_ = std::make_shared<Classifier>(cfg_.classifier_pretrain.seed);
  const std::string file = path("classifier-base.ck");
  if (fs::exists(file)) {
    load_classifier(*base_cls_, file);
  } else {
    note("pretraining classifier");
    const auto& c = cfg_.classifier_pretrain;
    pretrain_classifier(*base_cls_, data(), c.epochs, c.batch_size, c.lr, c.seed,
                        verbose_, c.floor);
    save_classifier(*base_cls_, file);
  }
  return *base_cls_;
}

Segmenter& Pipeline::base_segmenter() {
  if (base_seg_) return *base_seg_;
  base_seg_ = std::make_shared<Segmenter>(cfg_.segmenter_pretrain.seed);
  const std::string file = path("segmenter-base.ck");
  if (fs::exists(file)) {
    load_segmenter(*base_seg_, file);
  } else {
    note("pretraining segmenter");
    const auto& c = cfg_.segmenter_pretrain;
    pretrain_segmenter(*base_seg_, data(), c.epochs, c.batch_size, c.lr, c.seed, verbose_,
                       c.floor);
    save_segmenter(*base_seg_, file);
  }
  return *base_seg_;
}

std::shared_ptr<HyperpriorCodec> Pipeline::clone_codec(HyperpriorCodec& src,
                                                       const std::string& tag) {
  auto dst = std::make_shared<HyperpriorCodec>(src.cfg, 0);
  auto ck = codec_to_checkpoint(src);
  codec_from_checkpoint(*dst, ck);
  dst->quality_tag = tag;
  return dst;
}

std::vector<Tensor> Pipeline::train_recons(HyperpriorCodec& codec) {
  const uint64_t key = codec.full_hash();
  auto it = train_recons_.find(key);
  if (it != train_recons_.end()) return it->second;
  NoGrad ng;
  std::vector<Tensor> recons;
  recons.reserve(data().train.size());
  for (const auto& s : data().train) {
    auto out = codec.forward(as_batch(s.image), QuantMode::kEvalRound);
    recons.push_back(single_chw(out.recon));
  }
  if (train_recons_.size() >= kMaxTrainReconSets) train_recons_.clear();
  return train_recons_.emplace(key, std::move(recons)).first->second;
}

const Pipeline::EvalPack& Pipeline::eval_pack(HyperpriorCodec& codec) {
  const uint64_t key = codec.full_hash();
  auto it = packs_.find(key);
  if (it != packs_.end()) return it->second;
  NoGrad ng;
  EvalPack pk;
  const auto& val = data().val;
  pk.recons.reserve(val.size());
  size_t bytes_total = 0;
  double bits_est = 0;
  int64_t pixels = 0;
  for (const auto& s : val) {
    auto x = as_batch(s.image);
    auto bytes = compress_image(codec, x);
    auto dr = decompress_image(codec, bytes);
    pk.recons.push_back(single_chw(dr.recon));
    bytes_total += bytes.size();
    auto out = codec.forward(x, QuantMode::kEvalRound);
    bits_est += static_cast<double>(out.rate_bits.item());
    pixels += static_cast<int64_t>(s.image.dim(1)) * s.image.dim(2);
  }
  pk.bpp_actual = 8.0 * static_cast<double>(bytes_total) / static_cast<double>(pixels);
  pk.bpp_est = bits_est / static_cast<double>(pixels);
  if (packs_.size() >= kMaxEvalPacks) packs_.clear();
  return packs_.emplace(key, std::move(pk)).first->second;
}

Detector& Pipeline::tft_detector(double beta, int seed) {
  const std::string key = "tft-beta" + beta_str(beta) + "-seed" + std::to_string(seed);
  auto it = tft_.find(key);
  if (it != tft_.end()) return *it->second;

  auto det = std::make_shared<Detector>(0);
  {
    auto ck = detector_to_checkpoint(base_detector());
    detector_from_checkpoint(*det, ck);
  }
  const std::string file = path(key + ".ck");
  if (fs::exists(file)) {
    load_detector(*det, file);
  } else {
    HyperpriorCodec& codec = pretrained_codec(quality_for(beta));
    const uint64_t codec_before = codec.full_hash();
    const auto recons = train_recons(codec);
    const auto boxes = boxes_of(data().train);
    const int grid = cfg_.dataset.image_size / kDetCell;

    note("training " + key);
    SgdT<float> opt(det->params(), cfg_.tft_lr);
    LossMonitor mon(key);
    Rng rng = run_rng(key);
    for (int ep = 0; ep < cfg_.tft_epochs; ++ep) {
      auto order = shuffled_indices(recons.size(), rng);
      for (size_t b = 0; b < order.size(); b += static_cast<size_t>(cfg_.tft_batch)) {
        auto pick = batch_slice(order, b, static_cast<size_t>(cfg_.tft_batch));
        std::vector<std::vector<Detection>> gt;
        gt.reserve(pick.size());
        for (size_t i : pick) gt.push_back(boxes[i]);
        opt.zero_grad();
        auto loss =
            detect_loss((*det)(stack_batch(recons, pick)),
                        build_detection_targets<float>(gt, grid));
        mon.observe(static_cast<double>(loss.item()));
        loss.backward();
        opt.step();
      }
    }
    check(codec.full_hash() == codec_before, "runtime: " + key + " moved the frozen codec");
    loss_flags_[key] = mon.decreased();
    save_detector(*det, file);
  }
  tft_[key] = det;
  return *det;
}

HyperpriorCodec& Pipeline::cft_codec(double beta, int seed) {
  const std::string key = "cft-beta" + beta_str(beta) + "-seed" + std::to_string(seed);
  auto it = cft_.find(key);
  if (it != cft_.end()) return *it->second;

  const std::string tag = "cft-seed" + std::to_string(seed) + "-beta" + beta_str(beta);
  auto codec = clone_codec(pretrained_codec(quality_for(beta)), tag);
  const std::string file = path(key + ".ck");
  if (fs::exists(file)) {
    load_codec(*codec, file);
  } else {
    Detector& det = base_detector();
    const uint64_t det_before = det.hash();
    const auto images = images_of(data().train);
    const auto boxes = boxes_of(data().train);
    const int grid = cfg_.dataset.image_size / kDetCell;

    note("training " + key);
    AdamT<float> opt(codec->params(), cfg_.cft_lr);
    LossMonitor mon(key);
    Rng rng = run_rng(key);
    for (int ep = 0; ep < cfg_.cft_epochs; ++ep) {
      auto order = shuffled_indices(images.size(), rng);
      for (size_t b = 0; b < order.size(); b += static_cast<size_t>(cfg_.cft_batch)) {
        auto pick = batch_slice(order, b, static_cast<size_t>(cfg_.cft_batch));
        std::vector<std::vector<Detection>> gt;
        gt.reserve(pick.size());
        for (size_t i : pick) gt.push_back(boxes[i]);
        auto x = stack_batch(images, pick);
        opt.zero_grad();
        zero_param_grads(det.params());  // pass-through grads, never applied
        auto out = codec->forward(x, QuantMode::kTrainNoise, &rng);
        auto task = detect_loss(det(out.recon), build_detection_targets<float>(gt, grid));
        const double scale =
            beta / (static_cast<double>(x.dim(0)) * x.dim(2) * x.dim(3));
        auto loss = add(task, mul_scalar(out.rate_bits, static_cast<float>(scale)));
        mon.observe(static_cast<double>(loss.item()));
        loss.backward();
        opt.step();
      }
    }
    check(det.hash() == det_before, "runtime: " + key + " moved the frozen detector");
    loss_flags_[key] = mon.decreased();
    save_codec(*codec, file);
  }
  cft_[key] = codec;
  return *codec;
}

JointResult& Pipeline::jft(double beta, int seed) {
  const std::string key = "jft-beta" + beta_str(beta) + "-seed" + std::to_string(seed);
  auto it = jft_.find(key);
  if (it != jft_.end()) return it->second;

  JointResult r;
  const std::string tag = "jft-seed" + std::to_string(seed) + "-beta" + beta_str(beta);
  r.codec = clone_codec(pretrained_codec(quality_for(beta)), tag);
  r.detector = std::make_shared<Detector>(0);
  {
    auto ck = detector_to_checkpoint(base_detector());
    detector_from_checkpoint(*r.detector, ck);
  }
  const std::string cfile = path(key + "-codec.ck");
  const std::string dfile = path(key + "-detector.ck");
  if (fs::exists(cfile) && fs::exists(dfile)) {
    load_codec(*r.codec, cfile);
    load_detector(*r.detector, dfile);
  } else {
    const auto images = images_of(data().train);
    const auto boxes = boxes_of(data().train);
    const int grid = cfg_.dataset.image_size / kDetCell;

    note("training " + key);
    auto joint = r.codec->params();
    {
      auto dp = r.detector->params();
      joint.insert(joint.end(), dp.begin(), dp.end());
    }
    AdamT<float> opt(joint, cfg_.jft_lr);
    LossMonitor mon(key);
    Rng rng = run_rng(key);
    for (int ep = 0; ep < cfg_.jft_epochs; ++ep) {
      auto order = shuffled_indices(images.size(), rng);
      for (size_t b = 0; b < order.size(); b += static_cast<size_t>(cfg_.jft_batch)) {
        auto pick = batch_slice(order, b, static_cast<size_t>(cfg_.jft_batch));
        std::vector<std::vector<Detection>> gt;
        gt.reserve(pick.size());
        for (size_t i : pick) gt.push_back(boxes[i]);
        auto x = stack_batch(images, pick);
        opt.zero_grad();
        auto out = r.codec->forward(x, QuantMode::kTrainNoise, &rng);
        auto task =
            detect_loss((*r.detector)(out.recon), build_detection_targets<float>(gt, grid));
        const double scale =
            beta / (static_cast<double>(x.dim(0)) * x.dim(2) * x.dim(3));
        auto loss = add(task, mul_scalar(out.rate_bits, static_cast<float>(scale)));
        mon.observe(static_cast<double>(loss.item()));
        loss.backward();
        opt.step();
      }
    }

    // Detector-only stage: the codec is frozen, so the detector adapts to the
    // hard-rounded reconstructions it will be evaluated on.
    const uint64_t codec_frozen = r.codec->full_hash();
    const auto recons = train_recons(*r.codec);
    AdamT<float> opt2(r.detector->params(), cfg_.jft_lr);
    for (int ep = 0; ep < cfg_.jft_task_epochs; ++ep) {
      auto order = shuffled_indices(recons.size(), rng);
      for (size_t b = 0; b < order.size(); b += static_cast<size_t>(cfg_.jft_batch)) {
        auto pick = batch_slice(order, b, static_cast<size_t>(cfg_.jft_batch));
        std::vector<std::vector<Detection>> gt;
        gt.reserve(pick.size());
        for (size_t i : pick) gt.push_back(boxes[i]);
        opt2.zero_grad();
        auto loss = detect_loss((*r.detector)(stack_batch(recons, pick)),
                                build_detection_targets<float>(gt, grid));
        mon.observe(static_cast<double>(loss.item()));
        loss.backward();
        opt2.step();
      }
    }
    check(r.codec->full_hash() == codec_frozen,
          "runtime: " + key + " moved the codec during the detector-only stage");
    loss_flags_[key] = mon.decreased();
    save_codec(*r.codec, cfile);
    save_detector(*r.detector, dfile);
  }
  return jft_.emplace(key, std::move(r)).first->second;
}

JointResult& Pipeline::jft_fd(double beta, int seed) {
  const std::string key = "jftfd-beta" + beta_str(beta) + "-seed" + std::to_string(seed);
  auto it = jftfd_.find(key);
  if (it != jftfd_.end()) return it->second;

  JointResult r;
  const std::string tag = "jftfd-seed" + std::to_string(seed) + "-beta" + beta_str(beta);
  HyperpriorCodec& pre = pretrained_codec(quality_for(beta));
  const uint64_t decoder_before = pre.decoder_hash();
  r.codec = clone_codec(pre, tag);
  r.detector = std::make_shared<Detector>(0);
  {
    auto ck = detector_to_checkpoint(base_detector());
    detector_from_checkpoint(*r.detector, ck);
  }
  const std::string cfile = path(key + "-codec.ck");
  const std::string dfile = path(key + "-detector.ck");
  if (fs::exists(cfile) && fs::exists(dfile)) {
    load_codec(*r.codec, cfile);
    load_detector(*r.detector, dfile);
  } else {
    const auto images = images_of(data().train);
    const auto boxes = boxes_of(data().train);
    const int grid = cfg_.dataset.image_size / kDetCell;

    note("training " + key);
    auto trainable = r.codec->encoder_params();
    {
      auto dp = r.detector->params();
      trainable.insert(trainable.end(), dp.begin(), dp.end());
    }
    AdamT<float> opt(trainable, cfg_.jft_lr);
    LossMonitor mon(key);
    Rng rng = run_rng(key);
    for (int ep = 0; ep < cfg_.jft_epochs; ++ep) {
      auto order = shuffled_indices(images.size(), rng);
      for (size_t b = 0; b < order.size(); b += static_cast<size_t>(cfg_.jft_batch)) {
        auto pick = batch_slice(order, b, static_cast<size_t>(cfg_.jft_batch));
        std::vector<std::vector<Detection>> gt;
        gt.reserve(pick.size());
        for (size_t i : pick) gt.push_back(boxes[i]);
        auto x = stack_batch(images, pick);
        opt.zero_grad();
        zero_param_grads(r.codec->decoder_params());  // pass-through grads only
        auto out = r.codec->forward(x, QuantMode::kTrainNoise, &rng);
        auto task =
            detect_loss((*r.detector)(out.recon), build_detection_targets<float>(gt, grid));
        const double scale =
            beta / (static_cast<double>(x.dim(0)) * x.dim(2) * x.dim(3));
        auto loss = add(task, mul_scalar(out.rate_bits, static_cast<float>(scale)));
        mon.observe(static_cast<double>(loss.item()));
        loss.backward();
        opt.step();
      }
    }

    const auto recons = train_recons(*r.codec);
    AdamT<float> opt2(r.detector->params(), cfg_.jft_lr);
    for (int ep = 0; ep < cfg_.jft_task_epochs; ++ep) {
      auto order = shuffled_indices(recons.size(), rng);
      for (size_t b = 0; b < order.size(); b += static_cast<size_t>(cfg_.jft_batch)) {
        auto pick = batch_slice(order, b, static_cast<size_t>(cfg_.jft_batch));
        std::vector<std::vector<Detection>> gt;
        gt.reserve(pick.size());
        for (size_t i : pick) gt.push_back(boxes[i]);
        opt2.zero_grad();
        auto loss = detect_loss((*r.detector)(stack_batch(recons, pick)),
                                build_detection_targets<float>(gt, grid));
        mon.observe(static_cast<double>(loss.item()));
        loss.backward();
        opt2.step();
      }
    }
    loss_flags_[key] = mon.decreased();
    save_codec(*r.codec, cfile);
    save_detector(*r.detector, dfile);
  }
  // The defining contract of this regime, checked on cached artifacts too.
  check(r.codec->decoder_hash() == decoder_before,
        "runtime: " + key + " changed decoder-side parameters");
  return jftfd_.emplace(key, std::move(r)).first->second;
}

Classifier& Pipeline::jft_tft_classifier(double beta, int seed) {
  const std::string key =
      "jfttft-beta" + beta_str(beta) + "-seed" + std::to_string(seed) + "-classifier";
  auto it = jt_cls_.find(key);
  if (it != jt_cls_.end()) return *it->second;

  auto cls = std::make_shared<Classifier>(0);
  {
    auto ck = classifier_to_checkpoint(base_classifier());
    classifier_from_checkpoint(*cls, ck);
  }
  const std::string file = path(key + ".ck");
  if (fs::exists(file)) {
    load_classifier(*cls, file);
  } else {
    JointResult& jr = jft(beta, seed);
    const uint64_t codec_before = jr.codec->full_hash();
    const auto recons = train_recons(*jr.codec);
    const auto labels = labels_of(data().train);

    note("training " + key);
    SgdT<float> opt(cls->params(), cfg_.jft_tft_cls_lr, cfg_.jft_tft_cls_momentum);
    LossMonitor mon(key);
    Rng rng = run_rng(key);
    for (int ep = 0; ep < cfg_.jft_tft_cls_epochs; ++ep) {
      auto order = shuffled_indices(recons.size(), rng);
      for (size_t b = 0; b < order.size(); b += static_cast<size_t>(cfg_.tft_batch)) {
        auto pick = batch_slice(order, b, static_cast<size_t>(cfg_.tft_batch));
        std::vector<int> lb;
        lb.reserve(pick.size());
        for (size_t i : pick) lb.push_back(labels[i]);
        opt.zero_grad();
        auto loss = classify_loss((*cls)(stack_batch(recons, pick)), lb);
        mon.observe(static_cast<double>(loss.item()));
        loss.backward();
        opt.step();
      }
    }
    check(jr.codec->full_hash() == codec_before,
          "runtime: " + key + " moved the frozen codec");
    loss_flags_[key] = mon.decreased();
    save_classifier(*cls, file);
  }
  jt_cls_[key] = cls;
  return *cls;
}

Segmenter& Pipeline::jft_tft_segmenter(double beta, int seed) {
  const std::string key =
      "jfttft-beta" + beta_str(beta) + "-seed" + std::to_string(seed) + "-segmenter";
  auto it = jt_seg_.find(key);
  if (it != jt_seg_.end()) return *it->second;

  auto seg = std::make_shared<Segmenter>(0);
  {
    auto ck = segmenter_to_checkpoint(base_segmenter());
    segmenter_from_checkpoint(*seg, ck);
  }
  const std::string file = path(key + ".ck");
  if (fs::exists(file)) {
    load_segmenter(*seg, file);
  } else {
    JointResult& jr = jft(beta, seed);
    const uint64_t codec_before = jr.codec->full_hash();
    const auto recons = train_recons(*jr.codec);
    const auto masks = masks_of(data().train);

    note("training " + key);
    SgdT<float> opt(seg->params(), cfg_.jft_tft_seg_lr, 0.0, cfg_.jft_tft_seg_weight_decay);
    LossMonitor mon(key);
    Rng rng = run_rng(key);
    const size_t steps_per_epoch =
        (recons.size() + static_cast<size_t>(cfg_.tft_batch) - 1) /
        static_cast<size_t>(cfg_.tft_batch);
    const int64_t max_iter =
        static_cast<int64_t>(cfg_.jft_tft_seg_epochs) * static_cast<int64_t>(steps_per_epoch);
    int64_t iter = 0;
    for (int ep = 0; ep < cfg_.jft_tft_seg_epochs; ++ep) {
      auto order = shuffled_indices(recons.size(), rng);
      for (size_t b = 0; b < order.size(); b += static_cast<size_t>(cfg_.tft_batch)) {
        auto pick = batch_slice(order, b, static_cast<size_t>(cfg_.tft_batch));
        std::vector<int> lb;
        lb.reserve(pick.size() * masks[0].size());
        for (size_t i : pick) {
          for (uint8_t v : masks[i]) lb.push_back(v);
        }
        opt.set_lr(poly_decay(cfg_.jft_tft_seg_lr, iter, max_iter, cfg_.jft_tft_seg_poly_power));
        ++iter;
        opt.zero_grad();
        auto loss = segment_loss((*seg)(stack_batch(recons, pick)), lb);
        mon.observe(static_cast<double>(loss.item()));
        loss.backward();
        opt.step();
      }
    }
    check(jr.codec->full_hash() == codec_before,
          "runtime: " + key + " moved the frozen codec");
    loss_flags_[key] = mon.decreased();
    save_segmenter(*seg, file);
  }
  jt_seg_[key] = seg;
  return *seg;
}

Connector& Pipeline::connector(ConnectorKind kind, double beta) {
  const std::string key = connector_file_key(kind, beta);
  auto it = conns_.find(key);
  if (it != conns_.end()) return *it->second;

  auto conn = std::make_shared<Connector>(kind);
  const std::string file = path(key + ".ck");
  if (fs::exists(file)) {
    load_connector(*conn, file);
  } else {
    // One connector per (kind, beta), trained against the first configured
    // seed's jointly fine-tuned codec and reused for every seed's evaluation.
    check(!cfg_.seeds.empty(), "config: seeds must not be empty");
    JointResult& jr = jft(beta, cfg_.seeds.front());
    const ConnectorTarget mode = connector_target_from(cfg_.connector_target);
    HyperpriorCodec* ref = mode == ConnectorTarget::kReferenceReconstruction
                               ? &reference_codec()
                               : nullptr;
    auto images = images_of(data().train);
    auto targets = connector_targets(mode, ref, images);
    note("training " + key);
    train_connector(*conn, *jr.codec, beta, images, targets, cfg_.connector_epochs,
                    cfg_.connector_batch, cfg_.connector_lr, cfg_.connector_lr_drop,
                    static_cast<uint64_t>(cfg_.seeds.front()), verbose_);
    save_connector(*conn, file);
  }
  conns_[key] = conn;
  return *conn;
}

RateAccuracyPoint Pipeline::evaluate(const std::string& regime, double beta, int seed) {
  RateAccuracyPoint p;
  p.regime = regime;
  p.beta = beta;
  p.quality = quality_for(beta);
  p.seed = seed;

  HyperpriorCodec* codec = nullptr;
  Detector* det = nullptr;
  Classifier* cls = &base_classifier();
  Segmenter* seg = &base_segmenter();
  Connector* conn = nullptr;

  if (regime == "baseline") {
    codec = &pretrained_codec(p.quality);
    det = &base_detector();
  } else if (regime == "tft") {
    codec = &pretrained_codec(p.quality);
    det = &tft_detector(beta, seed);
  } else if (regime == "cft") {
    codec = &cft_codec(beta, seed);
    det = &base_detector();
  } else if (regime == "jft") {
    JointResult& jr = jft(beta, seed);
    codec = jr.codec.get();
    det = jr.detector.get();
  } else if (regime == "jft_fd") {
    JointResult& jr = jft_fd(beta, seed);
    codec = jr.codec.get();
    det = jr.detector.get();
  } else if (regime == "jft_tft") {
    JointResult& jr = jft(beta, seed);
    codec = jr.codec.get();
    det = jr.detector.get();
    cls = &jft_tft_classifier(beta, seed);
    seg = &jft_tft_segmenter(beta, seed);
  } else if (regime.rfind("jft_conn_", 0) == 0) {
    JointResult& jr = jft(beta, seed);
    codec = jr.codec.get();
    det = jr.detector.get();
    conn = &connector(connector_kind_from(regime.substr(9)), beta);
  } else {
    fail("config: unknown regime '" + regime + "'");
  }

  note("evaluating " + regime + " beta " + beta_str(beta) + " seed " +
       std::to_string(seed));
  const EvalPack& pk = eval_pack(*codec);
  p.bpp_actual = pk.bpp_actual;
  p.bpp_est = pk.bpp_est;

  const auto& val = data().val;
  p.det_ap = evaluate_detector(*det, pk.recons, boxes_of(val));

  // Secondary tasks see the connector's output when one is in play; the
  // image-quality columns describe the same view.
  const std::vector<Tensor>& view =
      conn ? connector_apply_all(*conn, pk.recons) : pk.recons;
  auto ce = evaluate_classifier(*cls, view, labels_of(val));
  p.cls_top1 = ce.top1;
  p.cls_top5 = ce.top5;
  p.seg_miou = evaluate_segmenter(*seg, view, masks_of(val));

  double ps = 0, ms = 0;
  for (size_t i = 0; i < val.size(); ++i) {
    ps += psnr(view[i], val[i].image);
    ms += ms_ssim(view[i], val[i].image);
  }
  p.psnr_db = ps / static_cast<double>(val.size());
  p.msssim = ms / static_cast<double>(val.size());
  return p;
}

std::vector<RateAccuracyPoint> Pipeline::sweep() {
  // Cells run (beta, seed)-major so consecutive regimes reuse the cached
  // reconstructions of the same codec; rows are then ordered back to the
  // configured regime order for output.
  std::vector<RateAccuracyPoint> rows;
  rows.reserve(cfg_.betas.size() * cfg_.seeds.size() * cfg_.regimes.size());
  for (double beta : cfg_.betas) {
    for (int seed : cfg_.seeds) {
      for (const auto& regime : cfg_.regimes) {
        rows.push_back(evaluate(regime, beta, seed));
      }
    }
  }

  auto index_of = [](const auto& vec, const auto& v) {
    return std::distance(vec.begin(), std::find(vec.begin(), vec.end(), v));
  };
  std::stable_sort(rows.begin(), rows.end(),
                   [&](const RateAccuracyPoint& a, const RateAccuracyPoint& b) {
                     const auto ra = index_of(cfg_.regimes, a.regime);
                     const auto rb = index_of(cfg_.regimes, b.regime);
                     if (ra != rb) return ra < rb;
                     const auto ba = index_of(cfg_.betas, a.beta);
                     const auto bb = index_of(cfg_.betas, b.beta);
                     if (ba != bb) return ba < bb;
                     return index_of(cfg_.seeds, a.seed) < index_of(cfg_.seeds, b.seed);
                   });

  write_results_csv(rows, path("results.csv"));
  write_report(rows, cfg_, cfg_.run_dir);

  nlohmann::json manifest;
  manifest["config"] = cfg_.to_json();
  manifest["config_hash"] = hex64(cfg_.config_hash());
  manifest["dataset"] = {{"content_key", hex64(cfg_.dataset.content_key())},
                         {"train_hash", hex64(split_hash(data().train))},
                         {"val_hash", hex64(split_hash(data().val))}};
  nlohmann::json flags = nlohmann::json::object();
  for (const auto& [k, v] : loss_flags_) flags[k] = v;
  manifest["loss_decreased"] = std::move(flags);
  nlohmann::json artifacts = nlohmann::json::object();
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(cfg_.run_dir)) {
    if (e.path().extension() == ".ck") names.push_back(e.path().filename().string());
  }
  std::sort(names.begin(), names.end());
  for (const auto& n : names) {
    std::ifstream in(path(n), std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
    artifacts[n] = hex64(fnv1a(bytes.data(), bytes.size()));
  }
  manifest["artifacts"] = std::move(artifacts);
  manifest["rows"] = rows.size();
  std::ofstream out(path("manifest.json"), std::ios::binary);
  check(static_cast<bool>(out), "io: cannot write '" + path("manifest.json") + "'");
  out << manifest.dump(2) << '\n';

  return rows;
}

}  // namespace taskcodec
