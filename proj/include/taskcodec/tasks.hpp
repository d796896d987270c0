#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "taskcodec/checkpoint.hpp"
#include "taskcodec/dataset.hpp"
#include "taskcodec/layers.hpp"

namespace taskcodec {

// ---- detector ----

// Single-scale grid detector: three stride-2 convs bring a 64x64 image to an
// 8x8 grid, a stride-1 conv widens the receptive field past the largest
// shape, and 1x1 heads predict per cell an objectness logit, class logits and
// four box offsets (tx, ty in cells from the cell origin, tw, th as
// log(size / cell)).

inline constexpr int kDetCell = 8;  // pixels per grid cell

// Positive cells are rare (1-3 shapes on a 64-cell grid), so their BCE term
// is upweighted to keep the objectness head from collapsing to "background".
inline constexpr double kObjPosWeight = 4.0;

template <typename S>
struct DetOutT {
  TensorOf<S> obj;  // [N,1,G,G]
  TensorOf<S> cls;  // [N,classes,G,G]
  TensorOf<S> box;  // [N,4,G,G]
};

template <typename S>
struct DetectorT {
  Conv2dT<S> b1, b2, b3, b4;
  Conv2dT<S> head_obj, head_cls, head_box;

  explicit DetectorT(uint64_t seed)
      : b1(3, 16, 3, 2, 1, true, Rng(seed).fork(1)),
        b2(16, 32, 3, 2, 1, true, Rng(seed).fork(2)),
        b3(32, 32, 3, 2, 1, true, Rng(seed).fork(3)),
        b4(32, 32, 3, 1, 1, true, Rng(seed).fork(4)),
        head_obj(32, 1, 1, 1, 0, true, Rng(seed).fork(5)),
        head_cls(32, kNumClasses, 1, 1, 0, true, Rng(seed).fork(6)),
        head_box(32, 4, 1, 1, 0, true, Rng(seed).fork(7)) {}

  DetOutT<S> operator()(const TensorOf<S>& x) const {
    auto t = relu(b1(x));
    t = relu(b2(t));
    t = relu(b3(t));
    t = relu(b4(t));
    return {head_obj(t), head_cls(t), head_box(t)};
  }

  std::vector<Param<S>> params() {
    std::vector<Param<S>> ps;
    b1.params("b1", ps);
    b2.params("b2", ps);
    b3.params("b3", ps);
    b4.params("b4", ps);
    head_obj.params("head_obj", ps);
    head_cls.params("head_cls", ps);
    head_box.params("head_box", ps);
    return ps;
  }

  uint64_t hash() { return params_hash(params()); }
};

// Per-cell regression targets for one batch.
template <typename S>
struct DetTargetsT {
  int grid = 0;
  std::vector<S> obj;         // N*G*G, 1 where a box center lands
  std::vector<int> cls;       // N*G*G, -1 for background cells
  std::vector<S> box;         // N*4*G*G offsets, 0 for background cells
  std::vector<uint8_t> mask;  // N*G*G, 1 where a box is assigned
};

// Assigns each ground-truth box to the grid cell holding its center; when two
// boxes share a cell the larger area wins, so the targets are independent of
// the order the boxes are listed in.
template <typename S>
DetTargetsT<S> build_detection_targets(const std::vector<std::vector<Detection>>& gts,
                                       int grid) {
  const size_t n = gts.size();
  const size_t gg = static_cast<size_t>(grid) * grid;
  DetTargetsT<S> tg;
  tg.grid = grid;
  tg.obj.assign(n * gg, S(0));
  tg.cls.assign(n * gg, -1);
  tg.box.assign(n * 4 * gg, S(0));
  tg.mask.assign(n * gg, 0);
  std::vector<double> area(gg);
  for (size_t in = 0; in < n; ++in) {
    std::fill(area.begin(), area.end(), -1.0);
    for (const auto& d : gts[in]) {
      const double w = static_cast<double>(d.x1) - d.x0;
      const double h = static_cast<double>(d.y1) - d.y0;
      if (w <= 0 || h <= 0) continue;
      const double cx = 0.5 * (static_cast<double>(d.x0) + d.x1);
      const double cy = 0.5 * (static_cast<double>(d.y0) + d.y1);
      int gx = static_cast<int>(std::floor(cx / kDetCell));
      int gy = static_cast<int>(std::floor(cy / kDetCell));
      gx = std::min(std::max(gx, 0), grid - 1);
      gy = std::min(std::max(gy, 0), grid - 1);
      const size_t cell = static_cast<size_t>(gy) * grid + gx;
      if (w * h <= area[cell]) continue;
      area[cell] = w * h;
      tg.obj[in * gg + cell] = S(1);
      tg.cls[in * gg + cell] = d.cls;
      tg.mask[in * gg + cell] = 1;
      S* bb = tg.box.data() + in * 4 * gg + cell;
      bb[0 * gg] = static_cast<S>(cx / kDetCell - gx);
      bb[1 * gg] = static_cast<S>(cy / kDetCell - gy);
      bb[2 * gg] = static_cast<S>(std::log(w / kDetCell));
      bb[3 * gg] = static_cast<S>(std::log(h / kDetCell));
    }
  }
  return tg;
}

// Objectness BCE over every cell, plus class cross-entropy and smooth-L1 box
// regression over assigned cells. A batch with no boxes at all keeps just the
// objectness term.
template <typename S>
TensorOf<S> detect_loss(const DetOutT<S>& out, const DetTargetsT<S>& tg) {
  auto loss = bce_with_logits(out.obj, tg.obj, kObjPosWeight);
  const bool any_box =
      std::any_of(tg.mask.begin(), tg.mask.end(), [](uint8_t m) { return m != 0; });
  if (!any_box) return loss;
  loss = add(loss, softmax_cross_entropy(out.cls, tg.cls));
  return add(loss, masked_smooth_l1(out.box, tg.box, tg.mask));
}

using Detector = DetectorT<float>;
using DetOut = DetOutT<float>;
using DetTargets = DetTargetsT<float>;

// Turns raw grid outputs into per-image detection lists. Score is
// sigmoid(objectness) * max class probability; boxes are decoded from the
// cell offsets and clamped to the image; survivors go through per-class
// greedy NMS. Ties in score resolve toward the earlier grid cell, so the
// output is deterministic.
std::vector<std::vector<Detection>> decode_detections(const DetOut& out,
                                                      double score_thresh = 0.5,
                                                      double nms_iou = 0.5);

// AP at a single IoU threshold. Per class, predictions from all images are
// sorted by descending score and greedily matched to the best still-unmatched
// same-class ground truth in their image; the all-point interpolated area
// under the precision-recall curve is averaged over classes that have ground
// truth. With no ground truth anywhere: 1.0 if there are also no predictions,
// else 0.0.
double detection_ap(const std::vector<std::vector<Detection>>& preds,
                    const std::vector<std::vector<Detection>>& gts,
                    double iou_thresh = 0.5);

// ---- classifier ----

// The label is the class of the largest shape, and shape kind is invisible to
// small receptive fields, so the conv stack reaches past the largest shape
// before pooling: features must bind color and kind at one location, or the
// pooled evidence of two different shapes would blend.
template <typename S>
struct ClassifierT {
  Conv2dT<S> c1, c2, c3, c4;
  LinearT<S> fc;

  explicit ClassifierT(uint64_t seed)
      : c1(3, 16, 3, 2, 1, true, Rng(seed).fork(1)),
        c2(16, 32, 3, 2, 1, true, Rng(seed).fork(2)),
        c3(32, 32, 3, 2, 1, true, Rng(seed).fork(3)),
        c4(32, 32, 3, 1, 1, true, Rng(seed).fork(4)),
        fc(32, kNumClasses, Rng(seed).fork(5)) {}

  TensorOf<S> operator()(const TensorOf<S>& x) const {
    auto t = relu(c1(x));
    t = relu(c2(t));
    t = relu(c3(t));
    t = relu(c4(t));
    return fc(global_avg_pool(t));
  }

  std::vector<Param<S>> params() {
    std::vector<Param<S>> ps;
    c1.params("c1", ps);
    c2.params("c2", ps);
    c3.params("c3", ps);
    c4.params("c4", ps);
    fc.params("fc", ps);
    return ps;
  }

  uint64_t hash() { return params_hash(params()); }
};

template <typename S>
TensorOf<S> classify_loss(const TensorOf<S>& logits, const std::vector<int>& labels) {
  return softmax_cross_entropy(logits, labels);
}

using Classifier = ClassifierT<float>;

// ---- segmenter ----

// Encoder-decoder with a stride-8 bottleneck: interior pixels of the largest
// shapes are ~13px from the nearest edge, so per-pixel kind labels need a
// receptive field that reaches an edge from anywhere inside.
template <typename S>
struct SegmenterT {
  Conv2dT<S> e1, e2, e3, mid;
  TransposedConv2dT<S> d1, d2, d3;
  Conv2dT<S> head;

  explicit SegmenterT(uint64_t seed)
      : e1(3, 16, 3, 2, 1, true, Rng(seed).fork(1)),
        e2(16, 32, 3, 2, 1, true, Rng(seed).fork(2)),
        e3(32, 32, 3, 2, 1, true, Rng(seed).fork(3)),
        mid(32, 32, 3, 1, 1, true, Rng(seed).fork(4)),
        d1(32, 32, 4, 2, 1, 0, true, Rng(seed).fork(5)),
        d2(32, 16, 4, 2, 1, 0, true, Rng(seed).fork(6)),
        d3(16, 16, 4, 2, 1, 0, true, Rng(seed).fork(7)),
        head(16, kNumSegClasses, 1, 1, 0, true, Rng(seed).fork(8)) {}

  TensorOf<S> operator()(const TensorOf<S>& x) const {
    auto t = relu(e1(x));
    t = relu(e2(t));
    t = relu(e3(t));
    t = relu(mid(t));
    t = relu(d1(t));
    t = relu(d2(t));
    t = relu(d3(t));
    return head(t);
  }

  std::vector<Param<S>> params() {
    std::vector<Param<S>> ps;
    e1.params("e1", ps);
    e2.params("e2", ps);
    e3.params("e3", ps);
    mid.params("mid", ps);
    d1.params("d1", ps);
    d2.params("d2", ps);
    d3.params("d3", ps);
    head.params("head", ps);
    return ps;
  }

  uint64_t hash() { return params_hash(params()); }
};

// Per-pixel cross-entropy; labels are row-major H*W per image, concatenated.
template <typename S>
TensorOf<S> segment_loss(const TensorOf<S>& logits, const std::vector<int>& labels) {
  return softmax_cross_entropy(logits, labels);
}

using Segmenter = SegmenterT<float>;

// ---- metrics ----

// Fraction of rows whose label is among the k highest logits. A tie with the
// label's logit counts against it only for smaller class indices, so the
// result does not depend on any sort's ordering of equal values.
double topk_accuracy(const Tensor& logits, const std::vector<int>& labels, int k);

// Mean IoU over classes present in either prediction or ground truth,
// accumulated across all map pairs. Maps are row-major labels in
// [0, num_classes).
double miou(const std::vector<std::vector<uint8_t>>& preds,
            const std::vector<std::vector<uint8_t>>& gts, int num_classes);

// Per-pixel argmax of [N,K,H,W] logits; ties take the smaller class index.
std::vector<std::vector<uint8_t>> seg_argmax(const Tensor& logits);

// ---- split accessors ----

inline std::vector<Tensor> images_of(const std::vector<Sample>& split) {
  std::vector<Tensor> out;
  out.reserve(split.size());
  for (const auto& s : split) out.push_back(s.image);
  return out;
}

inline std::vector<std::vector<Detection>> boxes_of(const std::vector<Sample>& split) {
  std::vector<std::vector<Detection>> out;
  out.reserve(split.size());
  for (const auto& s : split) out.push_back(s.boxes);
  return out;
}

inline std::vector<int> labels_of(const std::vector<Sample>& split) {
  std::vector<int> out;
  out.reserve(split.size());
  for (const auto& s : split) out.push_back(s.dominant_class);
  return out;
}

inline std::vector<std::vector<uint8_t>> masks_of(const std::vector<Sample>& split) {
  std::vector<std::vector<uint8_t>> out;
  out.reserve(split.size());
  for (const auto& s : split) out.push_back(s.seg_mask);
  return out;
}

// ---- evaluation ----

// All evaluation runs the model in chunks without gradients; images may be
// originals or reconstructions, as long as they match the ground truth.

std::vector<std::vector<Detection>> predict_detections(Detector& det,
                                                       const std::vector<Tensor>& images,
                                                       double score_thresh = 0.5);

double evaluate_detector(Detector& det, const std::vector<Tensor>& images,
                         const std::vector<std::vector<Detection>>& gts);

struct ClsEval {
  double top1 = 0;
  double top5 = 0;
};

ClsEval evaluate_classifier(Classifier& cls, const std::vector<Tensor>& images,
                            const std::vector<int>& labels);

double evaluate_segmenter(Segmenter& seg, const std::vector<Tensor>& images,
                          const std::vector<std::vector<uint8_t>>& masks);

// ---- checkpoints ----

Checkpoint detector_to_checkpoint(Detector& det);
void detector_from_checkpoint(Detector& det, const Checkpoint& ck);
void save_detector(Detector& det, const std::string& path);
void load_detector(Detector& det, const std::string& path);

Checkpoint classifier_to_checkpoint(Classifier& cls);
void classifier_from_checkpoint(Classifier& cls, const Checkpoint& ck);
void save_classifier(Classifier& cls, const std::string& path);
void load_classifier(Classifier& cls, const std::string& path);

Checkpoint segmenter_to_checkpoint(Segmenter& seg);
void segmenter_from_checkpoint(Segmenter& seg, const Checkpoint& ck);
void save_segmenter(Segmenter& seg, const std::string& path);
void load_segmenter(Segmenter& seg, const std::string& path);

// ---- pretraining on uncompressed images ----

struct TaskPretrainReport {
  double final_loss = 0;  // mean loss over the last epoch
  double val_metric = 0;  // AP / top-1 / mIoU on the val split
  int steps = 0;
};

// Adam training on the train split, then evaluation on val. metric_floor > 0
// turns the evaluation into a gate: a model below the floor is an error, not
// a warning. Divergence restores the last epoch-boundary snapshot and throws.

TaskPretrainReport pretrain_detector(Detector& det, const Dataset& ds, int epochs,
                                     int batch_size, double lr, uint64_t seed,
                                     bool verbose = false, double metric_floor = 0);

TaskPretrainReport pretrain_classifier(Classifier& cls, const Dataset& ds, int epochs,
                                       int batch_size, double lr, uint64_t seed,
                                       bool verbose = false, double metric_floor = 0);

TaskPretrainReport pretrain_segmenter(Segmenter& seg, const Dataset& ds, int epochs,
                                      int batch_size, double lr, uint64_t seed,
                                      bool verbose = false, double metric_floor = 0);

}  // namespace taskcodec
