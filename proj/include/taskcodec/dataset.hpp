#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "taskcodec/tensor.hpp"

namespace taskcodec {

// Synthetic shapes dataset. 64x64 RGB images, 1-3 non-nested shapes per
// image, hard edges. Classes combine shape kind and color bucket:
//   class = kind * 3 + bucket, kind in {rect=0, circle=1, triangle=2},
//   bucket in {red=0, green=1, blue=2}, so 9 classes.
// Segmentation masks use 0 for background and class+1 otherwise.

constexpr int kNumClasses = 9;
constexpr int kNumSegClasses = kNumClasses + 1;

// Boxes are [x0, y0, x1, y1) in pixels: x1/y1 one past the last covered
// column/row. score is 1 for ground truth.
struct Detection {
  int cls = 0;
  float x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  float score = 1.0f;
};

double box_iou(const Detection& a, const Detection& b);

struct Sample {
  Tensor image;                   // [3,H,W] in [0,1]
  std::vector<Detection> boxes;   // one per shape, drawing order
  std::vector<uint8_t> seg_mask;  // H*W labels in [0, 9]
  int dominant_class = 0;         // class of the shape with most visible pixels
  // Per-pixel index into boxes (-1 = background). The class mask cannot
  // separate two shapes of the same class, so augmentations that crop pixels
  // need this map to recount per-shape visibility for the dominant label.
  std::vector<int8_t> owner;
};

struct DatasetSpec {
  uint64_t seed = 1;
  int train_count = 160;
  int val_count = 48;
  int image_size = 64;
  int min_shapes = 1;
  int max_shapes = 3;
  double pixel_noise = 0.02;  // stddev of the additive Gaussian, clamped to [0,1]

  uint64_t content_key() const;  // hash of every generation-relevant field
};

struct Dataset {
  DatasetSpec spec;
  std::vector<Sample> train, val;
};

// split_tag: 0 for train, 1 for val. Samples are independent of each other
// and of the split sizes, so growing a split keeps existing samples stable.
Sample generate_sample(const DatasetSpec& spec, int split_tag, int index);

Dataset generate_dataset(const DatasetSpec& spec);

// Content hash over images, boxes, and masks of one split.
uint64_t split_hash(const std::vector<Sample>& split);

// Writes images (PPM), masks (PGM), labels and a manifest (JSON) to dir.
void write_dataset(const Dataset& ds, const std::string& dir);

}  // namespace taskcodec
