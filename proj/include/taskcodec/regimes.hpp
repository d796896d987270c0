#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "taskcodec/codec.hpp"
#include "taskcodec/config.hpp"
#include "taskcodec/connector.hpp"
#include "taskcodec/dataset.hpp"
#include "taskcodec/tasks.hpp"

namespace taskcodec {

// One evaluated grid cell: a codec variant plus task models at one trade-off
// weight and seed, measured on the validation split through real compressed
// streams. `quality` names the pretrained codec the cell started from.
struct RateAccuracyPoint {
  std::string regime;
  double beta = 0;
  std::string quality;
  int seed = 0;
  double bpp_actual = 0;  // mean over val images, real byte counts
  double bpp_est = 0;     // mean model estimate
  double det_ap = 0;
  double cls_top1 = 0;
  double cls_top5 = 0;
  double seg_miou = 0;
  double psnr_db = 0;   // secondary-task input vs original
  double msssim = 0;
};

// results.csv schema. Numbers are printed with %.9g so reruns are
// byte-comparable.
std::string results_csv_header();
std::string results_csv_line(const RateAccuracyPoint& p);
void write_results_csv(const std::vector<RateAccuracyPoint>& points,
                       const std::string& path);

// Parses a results.csv back into points (strict: header and every row must
// match the schema). Lets reporting run as a pure function of the file.
std::vector<RateAccuracyPoint> read_results_csv(const std::string& path);

// Per-regime series for the report: seeds averaged, points sorted by rate.
struct ReportPoint {
  double beta = 0;
  std::string quality;
  int runs = 0;
  double bpp_actual = 0;
  double det_ap = 0;
  double cls_top1 = 0;
  double seg_miou = 0;
  double psnr_db = 0;
  double msssim = 0;
};

std::map<std::string, std::vector<ReportPoint>> aggregate_report(
    const std::vector<RateAccuracyPoint>& points);
void write_report(const std::vector<RateAccuracyPoint>& points,
                  const ExperimentConfig& cfg, const std::string& dir);

// Artifacts of one joint fine-tune.
struct JointResult {
  std::shared_ptr<HyperpriorCodec> codec;
  std::shared_ptr<Detector> detector;
};

// Builds and evaluates every configured regime over the (beta, seed) grid.
// Trained artifacts are cached in the run directory under deterministic
// names and reloaded on later runs; training itself is deterministic, so a
// sweep into a fresh directory reproduces results byte for byte.
//
// Freeze contracts are enforced at run time: each regime hashes the
// components it must not touch and refuses to continue if one moved.
class Pipeline {
 public:
  explicit Pipeline(const ExperimentConfig& cfg, bool verbose = false);

  const ExperimentConfig& config() const { return cfg_; }
  const std::string& run_dir() const { return cfg_.run_dir; }
  const Dataset& data();

  // Stage accessors: each returns the cached artifact, loading it from the
  // run directory or training it on first use.
  HyperpriorCodec& pretrained_codec(const std::string& quality);
  HyperpriorCodec& reference_codec();  // highest configured quality
  Detector& base_detector();
  Classifier& base_classifier();
  Segmenter& base_segmenter();

  Detector& tft_detector(double beta, int seed);
  HyperpriorCodec& cft_codec(double beta, int seed);
  JointResult& jft(double beta, int seed);
  JointResult& jft_fd(double beta, int seed);
  Classifier& jft_tft_classifier(double beta, int seed);
  Segmenter& jft_tft_segmenter(double beta, int seed);

  // Connectors are keyed by (kind, beta) alone and are trained against the
  // first configured seed's jointly fine-tuned codec.
  Connector& connector(ConnectorKind kind, double beta);

  RateAccuracyPoint evaluate(const std::string& regime, double beta, int seed);

  // Full grid; writes results.csv, report.csv, report.json and manifest.json
  // into the run directory.
  std::vector<RateAccuracyPoint> sweep();

  // Loss-decrease flags gathered from trainings run by this process,
  // keyed by artifact name.
  const std::map<std::string, bool>& loss_flags() const { return loss_flags_; }

 private:
  struct EvalPack {
    std::vector<Tensor> recons;  // decoded from real streams, [3,H,W] each
    double bpp_actual = 0;
    double bpp_est = 0;
  };

  std::string path(const std::string& name) const;
  const EvalPack& eval_pack(HyperpriorCodec& codec);
  std::vector<Tensor> train_recons(HyperpriorCodec& codec);
  std::string quality_for(double beta) const;
  std::shared_ptr<HyperpriorCodec> clone_codec(HyperpriorCodec& src,
                                               const std::string& tag);
  void note(const std::string& msg) const;

  ExperimentConfig cfg_;
  bool verbose_ = false;
  std::unique_ptr<Dataset> data_;
  std::map<std::string, std::shared_ptr<HyperpriorCodec>> codecs_;
  std::shared_ptr<Detector> base_det_;
  std::shared_ptr<Classifier> base_cls_;
  std::shared_ptr<Segmenter> base_seg_;
  std::map<std::string, std::shared_ptr<Detector>> tft_;
  std::map<std::string, std::shared_ptr<HyperpriorCodec>> cft_;
  std::map<std::string, JointResult> jft_, jftfd_;
  std::map<std::string, std::shared_ptr<Classifier>> jt_cls_;
  std::map<std::string, std::shared_ptr<Segmenter>> jt_seg_;
  std::map<std::string, std::shared_ptr<Connector>> conns_;
  std::map<uint64_t, EvalPack> packs_;
  std::map<uint64_t, std::vector<Tensor>> train_recons_;
  std::map<std::string, bool> loss_flags_;
};

}  // namespace taskcodec
