#include "taskcodec/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "taskcodec/optim.hpp"

namespace taskcodec {

namespace {

constexpr size_t kEvalChunk = 16;  // images per forward pass during evaluation

double sigmoid_d(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

// ---- detection decode / AP ----

std::vector<std::vector<Detection>> decode_detections(const DetOut& out,
                                                      double score_thresh,
                                                      double nms_iou) {
  check(out.obj.shape().size() == 4 && out.obj.dim(1) == 1,
        "config: objectness must be [N,1,G,G], got " + shape_str(out.obj.shape()));
  const int n = out.obj.dim(0), g = out.obj.dim(2);
  check(out.cls.shape().size() == 4 && out.cls.dim(0) == n && out.cls.dim(2) == g &&
            out.cls.dim(3) == g,
        "config: class grid does not match the objectness grid");
  const int kc = out.cls.dim(1);
  check(out.box.shape().size() == 4 && out.box.dim(0) == n && out.box.dim(1) == 4 &&
            out.box.dim(2) == g && out.box.dim(3) == g,
        "config: box grid must be [N,4,G,G]");
  const float* ov = out.obj.data();
  const float* cv = out.cls.data();
  const float* bv = out.box.data();
  const int64_t gg = static_cast<int64_t>(g) * g;
  const double img = static_cast<double>(g) * kDetCell;

  std::vector<std::vector<Detection>> result(static_cast<size_t>(n));
  for (int in = 0; in < n; ++in) {
    std::vector<Detection> cand;
    for (int64_t p = 0; p < gg; ++p) {
      const int gy = static_cast<int>(p / g), gx = static_cast<int>(p % g);
      const double obj_p = sigmoid_d(static_cast<double>(ov[in * gg + p]));

      const float* cbase = cv + (static_cast<int64_t>(in) * kc) * gg + p;
      int best = 0;
      for (int c = 1; c < kc; ++c) {
        if (cbase[static_cast<int64_t>(c) * gg] > cbase[static_cast<int64_t>(best) * gg])
          best = c;
      }
      double z = 0;
      const double mx = static_cast<double>(cbase[static_cast<int64_t>(best) * gg]);
      for (int c = 0; c < kc; ++c)
        z += std::exp(static_cast<double>(cbase[static_cast<int64_t>(c) * gg]) - mx);
      const double score = obj_p / z;  // obj_p * softmax prob of the best class
      if (score < score_thresh) continue;

      const float* bbase = bv + (static_cast<int64_t>(in) * 4) * gg + p;
      const double tx = static_cast<double>(bbase[0 * gg]);
      const double ty = static_cast<double>(bbase[1 * gg]);
      // Untrained heads can emit large log-sizes; cap them so exp() and the
      // IoUs downstream stay finite.
      const double tw = std::clamp(static_cast<double>(bbase[2 * gg]), -10.0, 10.0);
      const double th = std::clamp(static_cast<double>(bbase[3 * gg]), -10.0, 10.0);
      const double cx = (gx + tx) * kDetCell, cy = (gy + ty) * kDetCell;
      const double w = kDetCell * std::exp(tw), h = kDetCell * std::exp(th);
      Detection d;
      d.cls = best;
      d.x0 = static_cast<float>(std::clamp(cx - 0.5 * w, 0.0, img));
      d.x1 = static_cast<float>(std::clamp(cx + 0.5 * w, 0.0, img));
      d.y0 = static_cast<float>(std::clamp(cy - 0.5 * h, 0.0, img));
      d.y1 = static_cast<float>(std::clamp(cy + 0.5 * h, 0.0, img));
      d.score = static_cast<float>(score);
      if (d.x1 <= d.x0 || d.y1 <= d.y0) continue;
      cand.push_back(d);
    }
    // Stable sort keeps grid order among equal scores, making NMS
    // deterministic.
    std::stable_sort(cand.begin(), cand.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    std::vector<Detection>& kept = result[static_cast<size_t>(in)];
    for (const auto& c : cand) {
      bool drop = false;
      for (const auto& k : kept) {
        if (k.cls == c.cls && box_iou(k, c) >= nms_iou) {
          drop = true;
          break;
        }
      }
      if (!drop) kept.push_back(c);
    }
  }
  return result;
}

double detection_ap(const std::vector<std::vector<Detection>>& preds,
                    const std::vector<std::vector<Detection>>& gts,
                    double iou_thresh) {
  check(preds.size() == gts.size(),
        "config: prediction and ground-truth image counts differ");

  std::map<int, int64_t> gt_count;  // class -> total gt boxes (ordered: stable mean)
  for (const auto& img : gts)
    for (const auto& d : img) ++gt_count[d.cls];
  if (gt_count.empty()) {
    for (const auto& img : preds)
      if (!img.empty()) return 0.0;
    return 1.0;
  }

  double ap_sum = 0;
  for (const auto& [cls, total_gt] : gt_count) {
    struct Pred {
      float score;
      size_t img;
      size_t idx;
    };
    std::vector<Pred> ps;
    for (size_t im = 0; im < preds.size(); ++im)
      for (size_t i = 0; i < preds[im].size(); ++i)
        if (preds[im][i].cls == cls) ps.push_back({preds[im][i].score, im, i});
    // Image-major input order + stable sort = deterministic tie-breaking.
    std::stable_sort(ps.begin(), ps.end(),
                     [](const Pred& a, const Pred& b) { return a.score > b.score; });

    std::vector<std::vector<uint8_t>> used(gts.size());
    for (size_t im = 0; im < gts.size(); ++im) used[im].assign(gts[im].size(), 0);

    std::vector<uint8_t> is_tp(ps.size(), 0);
    for (size_t i = 0; i < ps.size(); ++i) {
      const Detection& p = preds[ps[i].img][ps[i].idx];
      double best_iou = -1.0;
      int best_j = -1;
      const auto& img_gts = gts[ps[i].img];
      for (size_t j = 0; j < img_gts.size(); ++j) {
        if (img_gts[j].cls != cls || used[ps[i].img][j]) continue;
        const double iou = box_iou(p, img_gts[j]);
        if (iou >= iou_thresh && iou > best_iou) {
          best_iou = iou;
          best_j = static_cast<int>(j);
        }
      }
      if (best_j >= 0) {
        used[ps[i].img][static_cast<size_t>(best_j)] = 1;
        is_tp[i] = 1;
      }
    }

    std::vector<double> prec(ps.size()), rec(ps.size());
    int64_t tp = 0;
    for (size_t i = 0; i < ps.size(); ++i) {
      tp += is_tp[i];
      rec[i] = static_cast<double>(tp) / static_cast<double>(total_gt);
      prec[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    }
    for (size_t i = ps.size(); i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
    double ap = 0, prev_rec = 0;
    for (size_t i = 0; i < ps.size(); ++i) {
      if (!is_tp[i]) continue;
      ap += (rec[i] - prev_rec) * prec[i];
      prev_rec = rec[i];
    }
    ap_sum += ap;
  }
  return ap_sum / static_cast<double>(gt_count.size());
}

// ---- metrics ----

double topk_accuracy(const Tensor& logits, const std::vector<int>& labels, int k) {
  check(logits.shape().size() == 2, "config: top-k expects [N,classes] logits, got " +
                                        shape_str(logits.shape()));
  const int n = logits.dim(0), kc = logits.dim(1);
  check(k >= 1 && k <= kc, "config: top-k k must be between 1 and the class count " +
                               std::to_string(kc) + ", got " + std::to_string(k));
  check(static_cast<int>(labels.size()) == n, "config: label count does not match rows");
  check(n > 0, "config: top-k needs at least one row");
  const float* lv = logits.data();
  int64_t hits = 0;
  for (int in = 0; in < n; ++in) {
    const int lab = labels[static_cast<size_t>(in)];
    check(lab >= 0 && lab < kc, "config: label out of range");
    const float* row = lv + static_cast<int64_t>(in) * kc;
    const float ls = row[lab];
    int ahead = 0;
    for (int c = 0; c < kc; ++c) {
      if (row[c] > ls || (row[c] == ls && c < lab)) ++ahead;
    }
    if (ahead < k) ++hits;
  }
  return static_cast<double>(hits) / n;
}

double miou(const std::vector<std::vector<uint8_t>>& preds,
            const std::vector<std::vector<uint8_t>>& gts, int num_classes) {
  check(preds.size() == gts.size(), "config: prediction and ground-truth map counts differ");
  check(num_classes >= 1, "config: class count must be positive");
  std::vector<int64_t> inter(static_cast<size_t>(num_classes), 0);
  std::vector<int64_t> uni(static_cast<size_t>(num_classes), 0);
  for (size_t im = 0; im < preds.size(); ++im) {
    check(preds[im].size() == gts[im].size(), "config: map sizes differ at image " +
                                                  std::to_string(im));
    for (size_t i = 0; i < preds[im].size(); ++i) {
      const int p = preds[im][i], g = gts[im][i];
      check(p < num_classes && g < num_classes, "config: label out of range");
      if (p == g) {
        ++inter[static_cast<size_t>(p)];
        ++uni[static_cast<size_t>(p)];
      } else {
        ++uni[static_cast<size_t>(p)];
        ++uni[static_cast<size_t>(g)];
      }
    }
  }
  double sum = 0;
  int present = 0;
  for (int c = 0; c < num_classes; ++c) {
    if (uni[static_cast<size_t>(c)] == 0) continue;
    sum += static_cast<double>(inter[static_cast<size_t>(c)]) /
           static_cast<double>(uni[static_cast<size_t>(c)]);
    ++present;
  }
  return present > 0 ? sum / present : 1.0;
}

std::vector<std::vector<uint8_t>> seg_argmax(const Tensor& logits) {
  check(logits.shape().size() == 4, "config: segmentation logits must be [N,K,H,W]");
  const int n = logits.dim(0), kc = logits.dim(1);
  check(kc >= 1 && kc <= 255, "config: class count must fit a byte label");
  const int64_t hw = static_cast<int64_t>(logits.dim(2)) * logits.dim(3);
  const float* lv = logits.data();
  std::vector<std::vector<uint8_t>> maps(static_cast<size_t>(n));
  for (int in = 0; in < n; ++in) {
    auto& m = maps[static_cast<size_t>(in)];
    m.resize(static_cast<size_t>(hw));
    const float* base = lv + static_cast<int64_t>(in) * kc * hw;
    for (int64_t p = 0; p < hw; ++p) {
      int best = 0;
      for (int c = 1; c < kc; ++c) {
        if (base[static_cast<int64_t>(c) * hw + p] > base[static_cast<int64_t>(best) * hw + p])
          best = c;
      }
      m[static_cast<size_t>(p)] = static_cast<uint8_t>(best);
    }
  }
  return maps;
}

// ---- evaluation ----

namespace {

// Index blocks [0,chunk), [chunk,2*chunk), ... over n images.
std::vector<std::vector<size_t>> eval_chunks(size_t n) {
  std::vector<std::vector<size_t>> out;
  for (size_t start = 0; start < n; start += kEvalChunk) {
    std::vector<size_t> pick;
    for (size_t i = start; i < std::min(n, start + kEvalChunk); ++i) pick.push_back(i);
    out.push_back(std::move(pick));
  }
  return out;
}

}  // namespace

std::vector<std::vector<Detection>> predict_detections(Detector& det,
                                                       const std::vector<Tensor>& images,
                                                       double score_thresh) {
  NoGrad ng;
  std::vector<std::vector<Detection>> all;
  all.reserve(images.size());
  for (const auto& pick : eval_chunks(images.size())) {
    auto out = det(stack_batch(images, pick));
    for (auto& dets : decode_detections(out, score_thresh)) all.push_back(std::move(dets));
  }
  return all;
}

double evaluate_detector(Detector& det, const std::vector<Tensor>& images,
                         const std::vector<std::vector<Detection>>& gts) {
  return detection_ap(predict_detections(det, images), gts);
}

ClsEval evaluate_classifier(Classifier& cls, const std::vector<Tensor>& images,
                            const std::vector<int>& labels) {
  check(images.size() == labels.size(), "config: image and label counts differ");
  NoGrad ng;
  std::vector<float> all_logits;
  all_logits.reserve(images.size() * kNumClasses);
  for (const auto& pick : eval_chunks(images.size())) {
    auto logits = cls(stack_batch(images, pick));
    const float* lv = logits.data();
    all_logits.insert(all_logits.end(), lv, lv + logits.size());
  }
  auto t = Tensor::from({static_cast<int>(images.size()), kNumClasses},
                        std::move(all_logits));
  ClsEval ev;
  ev.top1 = topk_accuracy(t, labels, 1);
  ev.top5 = topk_accuracy(t, labels, 5);
  return ev;
}

double evaluate_segmenter(Segmenter& seg, const std::vector<Tensor>& images,
                          const std::vector<std::vector<uint8_t>>& masks) {
  check(images.size() == masks.size(), "config: image and mask counts differ");
  NoGrad ng;
  std::vector<std::vector<uint8_t>> preds;
  preds.reserve(images.size());
  for (const auto& pick : eval_chunks(images.size())) {
    for (auto& m : seg_argmax(seg(stack_batch(images, pick)))) preds.push_back(std::move(m));
  }
  return miou(preds, masks, kNumSegClasses);
}

// ---- checkpoints ----

namespace {

Checkpoint params_to_checkpoint(const std::vector<Param<float>>& ps, const char* kind) {
  Checkpoint ck = Checkpoint::from_params(ps, nlohmann::json::object());
  ck.meta["kind"] = kind;
  return ck;
}

void checkpoint_into_params(std::vector<Param<float>>& ps, const Checkpoint& ck,
                            const char* kind) {
  check(ck.meta.value("kind", "") == kind,
        "io: checkpoint is not a " + std::string(kind) + " (kind='" +
            ck.meta.value("kind", "") + "')");
  ck.restore_params(ps);
}

}  // namespace

Checkpoint detector_to_checkpoint(Detector& det) {
  return params_to_checkpoint(det.params(), "detector");
}
void detector_from_checkpoint(Detector& det, const Checkpoint& ck) {
  auto ps = det.params();
  checkpoint_into_params(ps, ck, "detector");
}
void save_detector(Detector& det, const std::string& path) {
  detector_to_checkpoint(det).save(path);
}
void load_detector(Detector& det, const std::string& path) {
  detector_from_checkpoint(det, Checkpoint::load(path));
}

Checkpoint classifier_to_checkpoint(Classifier& cls) {
  return params_to_checkpoint(cls.params(), "classifier");
}
void classifier_from_checkpoint(Classifier& cls, const Checkpoint& ck) {
  auto ps = cls.params();
  checkpoint_into_params(ps, ck, "classifier");
}
void save_classifier(Classifier& cls, const std::string& path) {
  classifier_to_checkpoint(cls).save(path);
}
void load_classifier(Classifier& cls, const std::string& path) {
  classifier_from_checkpoint(cls, Checkpoint::load(path));
}

Checkpoint segmenter_to_checkpoint(Segmenter& seg) {
  return params_to_checkpoint(seg.params(), "segmenter");
}
void segmenter_from_checkpoint(Segmenter& seg, const Checkpoint& ck) {
  auto ps = seg.params();
  checkpoint_into_params(ps, ck, "segmenter");
}
void save_segmenter(Segmenter& seg, const std::string& path) {
  segmenter_to_checkpoint(seg).save(path);
}
void load_segmenter(Segmenter& seg, const std::string& path) {
  segmenter_from_checkpoint(seg, Checkpoint::load(path));
}

// ---- pretraining ----

namespace {

// Label-preserving augmentation for pretraining batches: horizontal flip
// (shapes keep their class; triangles stay apex-up) and a small translation.
// The image shift replicates border pixels, which are always background.
struct Augment {
  bool flip = false;
  int dx = 0, dy = 0;

  static Augment draw(Rng& rng, int max_shift) {
    Augment a;
    a.flip = rng.uniform_int(2) == 1;
    a.dx = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(2 * max_shift + 1))) -
           max_shift;
    a.dy = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(2 * max_shift + 1))) -
           max_shift;
    return a;
  }

  Tensor image(const Tensor& img) const {
    const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    const float* iv = img.data();
    std::vector<float> out(static_cast<size_t>(img.size()));
    for (int ic = 0; ic < c; ++ic) {
      for (int y = 0; y < h; ++y) {
        const int sy = std::clamp(y - dy, 0, h - 1);
        for (int x = 0; x < w; ++x) {
          int sx = std::clamp(x - dx, 0, w - 1);
          if (flip) sx = w - 1 - sx;
          out[(static_cast<size_t>(ic) * h + y) * w + x] =
              iv[(static_cast<int64_t>(ic) * h + sy) * w + sx];
        }
      }
    }
    return Tensor::from({c, h, w}, std::move(out));
  }

  std::vector<Detection> boxes(const std::vector<Detection>& in, int size) const {
    std::vector<Detection> out;
    out.reserve(in.size());
    for (Detection d : in) {
      if (flip) {
        const float x0 = static_cast<float>(size) - d.x1;
        d.x1 = static_cast<float>(size) - d.x0;
        d.x0 = x0;
      }
      d.x0 = std::clamp(d.x0 + dx, 0.0f, static_cast<float>(size));
      d.x1 = std::clamp(d.x1 + dx, 0.0f, static_cast<float>(size));
      d.y0 = std::clamp(d.y0 + dy, 0.0f, static_cast<float>(size));
      d.y1 = std::clamp(d.y1 + dy, 0.0f, static_cast<float>(size));
      if (d.x1 > d.x0 && d.y1 > d.y0) out.push_back(d);
    }
    return out;
  }

  std::vector<uint8_t> mask(const std::vector<uint8_t>& in, int h, int w) const {
    std::vector<uint8_t> out(in.size(), 0);
    for (int y = 0; y < h; ++y) {
      const int sy = y - dy;
      if (sy < 0 || sy >= h) continue;
      for (int x = 0; x < w; ++x) {
        int sx = x - dx;
        if (sx < 0 || sx >= w) continue;
        if (flip) sx = w - 1 - sx;
        out[static_cast<size_t>(y) * w + x] = in[static_cast<size_t>(sy) * w + sx];
      }
    }
    return out;
  }
};

constexpr int kAugShift = 3;

// Exact dominant-class label for an augmented sample. A shift crops shapes
// at the border and can change which shape has the most visible pixels, and
// the class mask cannot separate two shapes of the same class, so the count
// walks the per-shape ownership map through the same clamped sampling the
// image shift uses. Flips permute pixels and never change the counts. Ties
// keep the earliest shape, like the generator.
int dominant_after(const Augment& a, const Sample& s, int size) {
  if (s.boxes.empty() || s.owner.empty()) return s.dominant_class;
  std::vector<int> visible(s.boxes.size(), 0);
  for (int y = 0; y < size; ++y) {
    const int sy = std::clamp(y - a.dy, 0, size - 1);
    for (int x = 0; x < size; ++x) {
      const int sx = std::clamp(x - a.dx, 0, size - 1);
      const int8_t o = s.owner[static_cast<size_t>(sy) * size + sx];
      if (o >= 0) ++visible[static_cast<size_t>(o)];
    }
  }
  size_t best = 0;
  for (size_t si = 1; si < visible.size(); ++si) {
    if (visible[si] > visible[best]) best = si;
  }
  if (visible[best] == 0) return s.dominant_class;
  return s.boxes[best].cls;
}

}  // namespace

namespace {

// Shared epoch loop: shuffle, batch, observe, step; on divergence restore the
// last epoch-boundary snapshot and rethrow. batch_loss builds the loss for
// one index batch; snapshot/restore wrap the model's checkpoint functions.
template <typename BatchLoss, typename Snapshot, typename Restore>
double run_epochs(size_t count, int epochs, int batch_size, uint64_t seed,
                  AdamT<float>& opt, LossMonitor& mon, BatchLoss&& batch_loss,
                  Snapshot&& snapshot, Restore&& restore, int* steps,
                  const char* label, bool verbose) {
  Rng rng(seed);
  Checkpoint last_good = snapshot();
  std::vector<size_t> idx(count);
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  double last_epoch_loss = 0;
  const double base_lr = opt.lr();
  for (int ep = 0; ep < epochs; ++ep) {
    // Drop the step size for the last quarter so the weights settle instead
    // of bouncing around the optimum at the initial rate.
    opt.set_lr(ep >= (3 * epochs) / 4 ? base_lr * 0.1 : base_lr);
    for (size_t i = idx.size(); i > 1; --i) {
      std::swap(idx[i - 1], idx[rng.uniform_int(static_cast<uint64_t>(i))]);
    }
    double ep_loss = 0;
    int ep_batches = 0;
    for (size_t start = 0; start < idx.size(); start += static_cast<size_t>(batch_size)) {
      const size_t stop = std::min(idx.size(), start + static_cast<size_t>(batch_size));
      std::vector<size_t> pick(idx.begin() + static_cast<int64_t>(start),
                               idx.begin() + static_cast<int64_t>(stop));
      auto loss = batch_loss(pick);
      const double lv = loss.item();
      ep_loss += lv;
      ++ep_batches;
      ++*steps;
      opt.zero_grad();
      try {
        mon.observe(lv);
      } catch (...) {
        restore(last_good);
        throw;
      }
      loss.backward();
      opt.step();
    }
    last_good = snapshot();
    last_epoch_loss = ep_loss / ep_batches;
    if (verbose) {
      std::fprintf(stderr, "[pretrain %s] epoch %d/%d loss %.6f\n", label, ep + 1, epochs,
                   last_epoch_loss);
    }
  }
  return last_epoch_loss;
}

void check_floor(double metric, double floor, const char* label, const char* metric_name) {
  if (floor <= 0) return;
  check(metric >= floor, "runtime: " + std::string(label) + " val " + metric_name + " " +
                             std::to_string(metric) + " is below the sanity floor " +
                             std::to_string(floor));
}

}  // namespace

TaskPretrainReport pretrain_detector(Detector& det, const Dataset& ds, int epochs,
                                     int batch_size, double lr, uint64_t seed,
                                     bool verbose, double metric_floor) {
  check(!ds.train.empty(), "config: pretraining needs a non-empty train split");
  check(batch_size >= 1, "config: batch size must be >= 1");
  auto images = images_of(ds.train);
  auto boxes = boxes_of(ds.train);
  const int size = images[0].dim(1);
  const int grid = size / kDetCell;
  AdamT<float> opt(det.params(), lr);
  LossMonitor mon("detector pretrain");
  Rng aug_rng = Rng(seed).fork(77);
  TaskPretrainReport rep;
  rep.final_loss = run_epochs(
      images.size(), epochs, batch_size, seed, opt, mon,
      [&](const std::vector<size_t>& pick) {
        std::vector<Tensor> xb;
        std::vector<std::vector<Detection>> gb;
        std::vector<size_t> order;
        for (size_t i : pick) {
          const Augment a = Augment::draw(aug_rng, kAugShift);
          order.push_back(xb.size());
          xb.push_back(a.image(images[i]));
          gb.push_back(a.boxes(boxes[i], size));
        }
        return detect_loss(det(stack_batch(xb, order)),
                           build_detection_targets<float>(gb, grid));
      },
      [&] { return detector_to_checkpoint(det); },
      [&](const Checkpoint& ck) { detector_from_checkpoint(det, ck); }, &rep.steps,
      "detector", verbose);
  rep.val_metric = evaluate_detector(det, images_of(ds.val), boxes_of(ds.val));
  check_floor(rep.val_metric, metric_floor, "detector", "AP");
  return rep;
}

TaskPretrainReport pretrain_classifier(Classifier& cls, const Dataset& ds, int epochs,
                                       int batch_size, double lr, uint64_t seed,
                                       bool verbose, double metric_floor) {
  check(!ds.train.empty(), "config: pretraining needs a non-empty train split");
  check(batch_size >= 1, "config: batch size must be >= 1");
  const int size = ds.train[0].image.dim(1);
  AdamT<float> opt(cls.params(), lr);
  LossMonitor mon("classifier pretrain");
  Rng aug_rng = Rng(seed).fork(77);
  TaskPretrainReport rep;
  rep.final_loss = run_epochs(
      ds.train.size(), epochs, batch_size, seed, opt, mon,
      [&](const std::vector<size_t>& pick) {
        std::vector<Tensor> xb;
        std::vector<int> lb;
        std::vector<size_t> order;
        for (size_t i : pick) {
          const Augment a = Augment::draw(aug_rng, kAugShift);
          order.push_back(xb.size());
          xb.push_back(a.image(ds.train[i].image));
          lb.push_back(dominant_after(a, ds.train[i], size));
        }
        return classify_loss(cls(stack_batch(xb, order)), lb);
      },
      [&] { return classifier_to_checkpoint(cls); },
      [&](const Checkpoint& ck) { classifier_from_checkpoint(cls, ck); }, &rep.steps,
      "classifier", verbose);
  rep.val_metric = evaluate_classifier(cls, images_of(ds.val), labels_of(ds.val)).top1;
  check_floor(rep.val_metric, metric_floor, "classifier", "top-1");
  return rep;
}

TaskPretrainReport pretrain_segmenter(Segmenter& seg, const Dataset& ds, int epochs,
                                      int batch_size, double lr, uint64_t seed,
                                      bool verbose, double metric_floor) {
  check(!ds.train.empty(), "config: pretraining needs a non-empty train split");
  check(batch_size >= 1, "config: batch size must be >= 1");
  auto images = images_of(ds.train);
  auto masks = masks_of(ds.train);
  const int size = images[0].dim(1);
  AdamT<float> opt(seg.params(), lr);
  LossMonitor mon("segmenter pretrain");
  Rng aug_rng = Rng(seed).fork(77);
  TaskPretrainReport rep;
  rep.final_loss = run_epochs(
      images.size(), epochs, batch_size, seed, opt, mon,
      [&](const std::vector<size_t>& pick) {
        std::vector<Tensor> xb;
        std::vector<int> lb;
        std::vector<size_t> order;
        lb.reserve(pick.size() * masks[0].size());
        for (size_t i : pick) {
          const Augment a = Augment::draw(aug_rng, kAugShift);
          order.push_back(xb.size());
          xb.push_back(a.image(images[i]));
          for (uint8_t v : a.mask(masks[i], size, size)) lb.push_back(v);
        }
        return segment_loss(seg(stack_batch(xb, order)), lb);
      },
      [&] { return segmenter_to_checkpoint(seg); },
      [&](const Checkpoint& ck) { segmenter_from_checkpoint(seg, ck); }, &rep.steps,
      "segmenter", verbose);
  rep.val_metric = evaluate_segmenter(seg, images_of(ds.val), masks_of(ds.val));
  check_floor(rep.val_metric, metric_floor, "segmenter", "mIoU");
  return rep;
}

}  // namespace taskcodec
