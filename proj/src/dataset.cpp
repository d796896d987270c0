#include "taskcodec/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "taskcodec/image_io.hpp"

namespace taskcodec {

double box_iou(const Detection& a, const Detection& b) {
  const double ix0 = std::max(a.x0, b.x0), iy0 = std::max(a.y0, b.y0);
  const double ix1 = std::min(a.x1, b.x1), iy1 = std::min(a.y1, b.y1);
  const double iw = std::max(0.0, ix1 - ix0), ih = std::max(0.0, iy1 - iy0);
  const double inter = iw * ih;
  const double area_a = (a.x1 - a.x0) * (a.y1 - a.y0);
  const double area_b = (b.x1 - b.x0) * (b.y1 - b.y0);
  const double uni = area_a + area_b - inter;
  return uni > 0 ? inter / uni : 0.0;
}

uint64_t DatasetSpec::content_key() const {
  uint64_t h = fnv1a(&seed, sizeof seed);
  const int ints[5] = {train_count, val_count, image_size, min_shapes, max_shapes};
  h = fnv1a(ints, sizeof ints, h);
  h = fnv1a(&pixel_noise, sizeof pixel_noise, h);
  return h;
}

namespace {

struct RasterShape {
  int cls = 0;
  std::vector<int> pixels;  // y * size + x
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // tight raster bbox, x1/y1 exclusive
  float color[3];
};

void finish_bbox(RasterShape& s, int size) {
  int mnx = size, mny = size, mxx = -1, mxy = -1;
  for (const int p : s.pixels) {
    const int y = p / size, x = p % size;
    mnx = std::min(mnx, x);
    mny = std::min(mny, y);
    mxx = std::max(mxx, x);
    mxy = std::max(mxy, y);
  }
  s.x0 = mnx;
  s.y0 = mny;
  s.x1 = mxx + 1;
  s.y1 = mxy + 1;
}

// Bounding boxes of distinct shapes may touch but not overlap much; in
// particular no shape may sit inside another's box (the cap is relative to
// the smaller box, so containment is excluded outright).
bool overlaps_too_much(const RasterShape& a, const RasterShape& b) {
  const int ix0 = std::max(a.x0, b.x0), iy0 = std::max(a.y0, b.y0);
  const int ix1 = std::min(a.x1, b.x1), iy1 = std::min(a.y1, b.y1);
  const int iw = std::max(0, ix1 - ix0), ih = std::max(0, iy1 - iy0);
  const int inter = iw * ih;
  const int area_a = (a.x1 - a.x0) * (a.y1 - a.y0);
  const int area_b = (b.x1 - b.x0) * (b.y1 - b.y0);
  return inter > 0.2 * std::min(area_a, area_b);
}

RasterShape make_shape(Rng& rng, int size) {
  RasterShape s;
  const int kind = rng.uniform_int(3);
  const int bucket = rng.uniform_int(3);
  s.cls = kind * 3 + bucket;

  const float hi = static_cast<float>(rng.uniform(0.62, 0.92));
  const float lo1 = static_cast<float>(rng.uniform(0.05, 0.28));
  const float lo2 = static_cast<float>(rng.uniform(0.05, 0.28));
  s.color[bucket] = hi;
  s.color[(bucket + 1) % 3] = lo1;
  s.color[(bucket + 2) % 3] = lo2;

  if (kind == 0) {  // rectangle
    const int w = 8 + rng.uniform_int(19);
    const int h = 8 + rng.uniform_int(19);
    const int x0 = 1 + rng.uniform_int(size - w - 2);
    const int y0 = 1 + rng.uniform_int(size - h - 2);
    for (int y = y0; y < y0 + h; ++y)
      for (int x = x0; x < x0 + w; ++x) s.pixels.push_back(y * size + x);
  } else if (kind == 1) {  // circle
    const int r = 5 + rng.uniform_int(8);
    const int cx = r + 1 + rng.uniform_int(size - 2 * r - 2);
    const int cy = r + 1 + rng.uniform_int(size - 2 * r - 2);
    for (int y = cy - r; y <= cy + r; ++y)
      for (int x = cx - r; x <= cx + r; ++x)
        if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r)
          s.pixels.push_back(y * size + x);
  } else {  // isoceles triangle, apex up
    const int base = 11 + rng.uniform_int(16);
    const int ht = 9 + rng.uniform_int(16);
    const int cx = base / 2 + 1 + rng.uniform_int(size - base - 2);
    const int y0 = 1 + rng.uniform_int(size - ht - 2);
    for (int i = 0; i < ht; ++i) {
      const int half = static_cast<int>(std::floor(0.5 * base * i / (ht - 1.0)));
      for (int x = cx - half; x <= cx + half; ++x) s.pixels.push_back((y0 + i) * size + x);
    }
  }
  finish_bbox(s, size);
  return s;
}

}  // namespace

Sample generate_sample(const DatasetSpec& spec, int split_tag, int index) {
  Rng base(spec.seed);
  Rng rng = base.fork((static_cast<uint64_t>(split_tag) << 32) | static_cast<uint64_t>(index));
  const int size = spec.image_size;

  Sample out;
  std::vector<float> img(static_cast<size_t>(3) * size * size);
  const float bg = static_cast<float>(rng.uniform(0.55, 0.88));
  const float slope = static_cast<float>(rng.uniform(-0.12, 0.12));
  for (int y = 0; y < size; ++y) {
    const float v = std::clamp(bg + slope * (static_cast<float>(y) / size - 0.5f), 0.0f, 1.0f);
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c) img[(static_cast<size_t>(c) * size + y) * size + x] = v;
  }

  const int want = spec.min_shapes + rng.uniform_int(spec.max_shapes - spec.min_shapes + 1);
  std::vector<RasterShape> shapes;
  for (int i = 0; i < want; ++i) {
    for (int attempt = 0; attempt < 60; ++attempt) {
      RasterShape cand = make_shape(rng, size);
      bool ok = true;
      for (const auto& prev : shapes) {
        if (overlaps_too_much(cand, prev)) {
          ok = false;
          break;
        }
      }
      if (ok) {
        shapes.push_back(std::move(cand));
        break;
      }
    }
  }

  out.seg_mask.assign(static_cast<size_t>(size) * size, 0);
  out.owner.assign(static_cast<size_t>(size) * size, -1);
  for (size_t si = 0; si < shapes.size(); ++si) {
    const auto& s = shapes[si];
    for (const int p : s.pixels) {
      const int y = p / size, x = p % size;
      for (int c = 0; c < 3; ++c) img[(static_cast<size_t>(c) * size + y) * size + x] = s.color[c];
      out.seg_mask[static_cast<size_t>(p)] = static_cast<uint8_t>(s.cls + 1);
      out.owner[static_cast<size_t>(p)] = static_cast<int8_t>(si);
    }
    out.boxes.push_back({s.cls, static_cast<float>(s.x0), static_cast<float>(s.y0),
                         static_cast<float>(s.x1), static_cast<float>(s.y1), 1.0f});
  }

  std::vector<int> visible(shapes.size(), 0);
  for (const int8_t o : out.owner)
    if (o >= 0) ++visible[static_cast<size_t>(o)];
  int best = 0;
  for (size_t si = 1; si < shapes.size(); ++si)
    if (visible[si] > visible[static_cast<size_t>(best)]) best = static_cast<int>(si);
  out.dominant_class = shapes.empty() ? 0 : shapes[static_cast<size_t>(best)].cls;

  if (spec.pixel_noise > 0) {
    for (auto& v : img) {
      v = std::clamp(v + static_cast<float>(rng.normal() * spec.pixel_noise), 0.0f, 1.0f);
    }
  }
  out.image = Tensor::from({3, size, size}, std::move(img));
  return out;
}

Dataset generate_dataset(const DatasetSpec& spec) {
  check(spec.image_size % 16 == 0 && spec.image_size >= 48,
        "config: image_size must be >= 48 and divisible by the codec factor 16");
  check(spec.min_shapes >= 1 && spec.max_shapes >= spec.min_shapes,
        "config: shape counts invalid");
  Dataset ds;
  ds.spec = spec;
  ds.train.reserve(static_cast<size_t>(spec.train_count));
  for (int i = 0; i < spec.train_count; ++i) ds.train.push_back(generate_sample(spec, 0, i));
  ds.val.reserve(static_cast<size_t>(spec.val_count));
  for (int i = 0; i < spec.val_count; ++i) ds.val.push_back(generate_sample(spec, 1, i));
  return ds;
}

uint64_t split_hash(const std::vector<Sample>& split) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& s : split) {
    h = fnv1a(s.image.vals().data(), s.image.vals().size() * sizeof(float), h);
    for (const auto& b : s.boxes) {
      h = fnv1a(&b.cls, sizeof b.cls, h);
      const float coords[4] = {b.x0, b.y0, b.x1, b.y1};
      h = fnv1a(coords, sizeof coords, h);
    }
    h = fnv1a(s.seg_mask.data(), s.seg_mask.size(), h);
    h = fnv1a(&s.dominant_class, sizeof s.dominant_class, h);
  }
  return h;
}

void write_dataset(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json labels;
  const auto dump_split = [&](const std::vector<Sample>& split, const std::string& name) {
    fs::create_directories(dir + "/" + name);
    nlohmann::json arr = nlohmann::json::array();
    char buf[64];
    for (size_t i = 0; i < split.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%s/%s/img_%04zu.ppm", dir.c_str(), name.c_str(), i);
      save_ppm(buf, split[i].image);
      std::snprintf(buf, sizeof buf, "%s/%s/mask_%04zu.pgm", dir.c_str(), name.c_str(), i);
      save_pgm(buf, split[i].seg_mask.data(), split[i].image.dim(1), split[i].image.dim(2));
      nlohmann::json rec;
      rec["dominant_class"] = split[i].dominant_class;
      nlohmann::json boxes = nlohmann::json::array();
      for (const auto& b : split[i].boxes) {
        boxes.push_back({{"cls", b.cls}, {"x0", b.x0}, {"y0", b.y0}, {"x1", b.x1}, {"y1", b.y1}});
      }
      rec["boxes"] = std::move(boxes);
      arr.push_back(std::move(rec));
    }
    labels[name] = std::move(arr);
  };
  dump_split(ds.train, "train");
  dump_split(ds.val, "val");
  std::ofstream lf(dir + "/labels.json");
  lf << labels.dump(2) << "\n";

  nlohmann::json manifest;
  manifest["seed"] = ds.spec.seed;
  manifest["train_count"] = ds.spec.train_count;
  manifest["val_count"] = ds.spec.val_count;
  manifest["image_size"] = ds.spec.image_size;
  manifest["min_shapes"] = ds.spec.min_shapes;
  manifest["max_shapes"] = ds.spec.max_shapes;
  manifest["pixel_noise"] = ds.spec.pixel_noise;
  manifest["train_hash"] = hex64(split_hash(ds.train));
  manifest["val_hash"] = hex64(split_hash(ds.val));
  std::ofstream mf(dir + "/manifest.json");
  mf << manifest.dump(2) << "\n";
  if (!mf) fail("io: cannot write dataset manifest");
}

}  // namespace taskcodec
