#include "taskcodec/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <initializer_list>
#include <sstream>

#include "taskcodec/codec.hpp"
#include "taskcodec/common.hpp"
#include "taskcodec/connector.hpp"

namespace taskcodec {
namespace {

using nlohmann::json;

[[noreturn]] void cfg_fail(const std::string& msg) { fail("config: " + msg); }

void expect_object(const json& j, const std::string& where) {
  if (!j.is_object()) cfg_fail(where + " must be a JSON object");
}

void expect_keys(const json& j, const std::string& where,
                 std::initializer_list<const char*> allowed) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* k) {
          return it.key() == k;
        }) != allowed.end()) {
      continue;
    }
    std::ostringstream os;
    os << "unknown key '" << it.key() << "' in " << where << " (allowed:";
    for (const char* k : allowed) os << ' ' << k;
    os << ")";
    cfg_fail(os.str());
  }
}

int get_int(const json& j, const char* key, int def, int lo, int hi,
            const std::string& where) {
  if (!j.contains(key)) return def;
  const json& v = j.at(key);
  if (!v.is_number_integer()) cfg_fail(where + "." + key + " must be an integer");
  int64_t x = v.get<int64_t>();
  if (x < lo || x > hi) {
    cfg_fail(where + "." + key + " must be in [" + std::to_string(lo) + ", " +
         std::to_string(hi) + "], got " + std::to_string(x));
  }
  return static_cast<int>(x);
}

uint64_t get_u64(const json& j, const char* key, uint64_t def, const std::string& where) {
  if (!j.contains(key)) return def;
  const json& v = j.at(key);
  if (!v.is_number_unsigned() && !v.is_number_integer()) {
    cfg_fail(where + "." + key + " must be a non-negative integer");
  }
  if (v.is_number_integer() && v.get<int64_t>() < 0) {
    cfg_fail(where + "." + key + " must be a non-negative integer");
  }
  return v.get<uint64_t>();
}

double get_num(const json& j, const char* key, double def, double lo, double hi,
               const std::string& where) {
  if (!j.contains(key)) return def;
  const json& v = j.at(key);
  if (!v.is_number()) cfg_fail(where + "." + key + " must be a number");
  double x = v.get<double>();
  if (!std::isfinite(x) || x < lo || x > hi) {
    std::ostringstream os;
    os << where << "." << key << " must be in [" << lo << ", " << hi << "]";
    cfg_fail(os.str());
  }
  return x;
}

std::string get_str(const json& j, const char* key, const std::string& def,
                    const std::string& where) {
  if (!j.contains(key)) return def;
  const json& v = j.at(key);
  if (!v.is_string()) cfg_fail(where + "." + key + " must be a string");
  return v.get<std::string>();
}

void parse_pretrain(const json& j, const std::string& where, TaskPretrainConfig& out) {
  expect_object(j, where);
  expect_keys(j, where, {"epochs", "batch_size", "lr", "seed", "floor"});
  out.epochs = get_int(j, "epochs", out.epochs, 0, 100000, where);
  out.batch_size = get_int(j, "batch_size", out.batch_size, 1, 4096, where);
  out.lr = get_num(j, "lr", out.lr, 0.0, 10.0, where);
  out.seed = get_u64(j, "seed", out.seed, where);
  out.floor = get_num(j, "floor", out.floor, 0.0, 1.0, where);
}

json pretrain_to_json(const TaskPretrainConfig& c) {
  return json{{"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"lr", c.lr},
              {"seed", c.seed},
              {"floor", c.floor}};
}

}  // namespace

const std::vector<std::string>& known_regimes() {
  static const std::vector<std::string> r = {
      "baseline", "tft",     "cft",
      "jft",      "jft_fd",  "jft_tft",
      "jft_conn_avgpool3",   "jft_conn_depthwise3", "jft_conn_conv3"};
  return r;
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig cfg;
  expect_object(j, "config");
  expect_keys(j, "config",
              {"run_dir", "seeds", "regimes", "betas", "qualities", "connector_target",
               "dataset", "codec_pretrain", "detector_pretrain", "classifier_pretrain",
               "segmenter_pretrain", "tft", "cft", "jft", "jft_tft", "connector"});

  cfg.run_dir = get_str(j, "run_dir", cfg.run_dir, "config");
  if (cfg.run_dir.empty()) cfg_fail("run_dir must not be empty");

  if (j.contains("seeds")) {
    const json& a = j.at("seeds");
    if (!a.is_array() || a.empty()) cfg_fail("seeds must be a non-empty array of integers");
    cfg.seeds.clear();
    for (const json& v : a) {
      if (!v.is_number_integer()) cfg_fail("seeds entries must be integers");
      int64_t s = v.get<int64_t>();
      if (s < 0 || s > 1000000) cfg_fail("seeds entries must be in [0, 1000000]");
      cfg.seeds.push_back(static_cast<int>(s));
    }
  }

  if (j.contains("regimes")) {
    const json& a = j.at("regimes");
    if (!a.is_array() || a.empty()) cfg_fail("regimes must be a non-empty array of strings");
    cfg.regimes.clear();
    for (const json& v : a) {
      if (!v.is_string()) cfg_fail("regimes entries must be strings");
      std::string r = v.get<std::string>();
      const auto& known = known_regimes();
      if (std::find(known.begin(), known.end(), r) == known.end()) {
        std::ostringstream os;
        os << "unknown regime '" << r << "' (known:";
        for (const auto& k : known) os << ' ' << k;
        os << ")";
        cfg_fail(os.str());
      }
      cfg.regimes.push_back(r);
    }
  }

  if (j.contains("betas")) {
    const json& a = j.at("betas");
    if (!a.is_array() || a.empty()) cfg_fail("betas must be a non-empty array of numbers");
    cfg.betas.clear();
    for (const json& v : a) {
      if (!v.is_number()) cfg_fail("betas entries must be numbers");
      double b = v.get<double>();
      bool ok = false;
      for (const auto& pt : beta_ladder()) ok = ok || pt.beta == b;
      if (!ok) {
        std::ostringstream os;
        os << "beta " << b << " is not a ladder point (ladder:";
        for (const auto& pt : beta_ladder()) os << ' ' << pt.beta;
        os << ")";
        cfg_fail(os.str());
      }
      cfg.betas.push_back(b);
    }
  }

  if (j.contains("qualities")) {
    const json& a = j.at("qualities");
    if (!a.is_array() || a.empty()) cfg_fail("qualities must be a non-empty array of strings");
    cfg.qualities.clear();
    for (const json& v : a) {
      if (!v.is_string()) cfg_fail("qualities entries must be strings");
      std::string q = v.get<std::string>();
      quality_preset(q);  // throws on unknown tag
      cfg.qualities.push_back(q);
    }
  }

  cfg.connector_target = get_str(j, "connector_target", cfg.connector_target, "config");
  connector_target_from(cfg.connector_target);  // throws on unknown mode

  if (j.contains("dataset")) {
    const json& d = j.at("dataset");
    expect_object(d, "dataset");
    expect_keys(d, "dataset",
                {"seed", "train_count", "val_count", "image_size", "min_shapes",
                 "max_shapes", "pixel_noise"});
    cfg.dataset.seed = get_u64(d, "seed", cfg.dataset.seed, "dataset");
    cfg.dataset.train_count = get_int(d, "train_count", cfg.dataset.train_count, 1,
                                      1000000, "dataset");
    cfg.dataset.val_count = get_int(d, "val_count", cfg.dataset.val_count, 1, 1000000,
                                    "dataset");
    cfg.dataset.image_size = get_int(d, "image_size", cfg.dataset.image_size, 16, 1024,
                                     "dataset");
    if (cfg.dataset.image_size % 16 != 0) cfg_fail("dataset.image_size must be divisible by 16");
    cfg.dataset.min_shapes = get_int(d, "min_shapes", cfg.dataset.min_shapes, 1, 16,
                                     "dataset");
    cfg.dataset.max_shapes = get_int(d, "max_shapes", cfg.dataset.max_shapes, 1, 16,
                                     "dataset");
    if (cfg.dataset.max_shapes < cfg.dataset.min_shapes) {
      cfg_fail("dataset.max_shapes must be >= dataset.min_shapes");
    }
    cfg.dataset.pixel_noise = get_num(d, "pixel_noise", cfg.dataset.pixel_noise, 0.0,
                                      0.5, "dataset");
  }

  if (j.contains("codec_pretrain")) {
    const json& c = j.at("codec_pretrain");
    expect_object(c, "codec_pretrain");
    expect_keys(c, "codec_pretrain", {"epochs", "batch_size", "lr", "seed"});
    cfg.codec_epochs = get_int(c, "epochs", cfg.codec_epochs, 0, 100000, "codec_pretrain");
    cfg.codec_batch = get_int(c, "batch_size", cfg.codec_batch, 1, 4096, "codec_pretrain");
    cfg.codec_lr = get_num(c, "lr", cfg.codec_lr, 0.0, 10.0, "codec_pretrain");
    cfg.codec_seed = get_u64(c, "seed", cfg.codec_seed, "codec_pretrain");
  }

  if (j.contains("detector_pretrain")) {
    parse_pretrain(j.at("detector_pretrain"), "detector_pretrain", cfg.detector_pretrain);
  }
  if (j.contains("classifier_pretrain")) {
    parse_pretrain(j.at("classifier_pretrain"), "classifier_pretrain",
                   cfg.classifier_pretrain);
  }
  if (j.contains("segmenter_pretrain")) {
    parse_pretrain(j.at("segmenter_pretrain"), "segmenter_pretrain",
                   cfg.segmenter_pretrain);
  }

  if (j.contains("tft")) {
    const json& t = j.at("tft");
    expect_object(t, "tft");
    expect_keys(t, "tft", {"epochs", "batch_size", "lr"});
    cfg.tft_epochs = get_int(t, "epochs", cfg.tft_epochs, 0, 100000, "tft");
    cfg.tft_batch = get_int(t, "batch_size", cfg.tft_batch, 1, 4096, "tft");
    cfg.tft_lr = get_num(t, "lr", cfg.tft_lr, 0.0, 10.0, "tft");
  }

  if (j.contains("cft")) {
    const json& c = j.at("cft");
    expect_object(c, "cft");
    expect_keys(c, "cft", {"epochs", "batch_size", "lr"});
    cfg.cft_epochs = get_int(c, "epochs", cfg.cft_epochs, 0, 100000, "cft");
    cfg.cft_batch = get_int(c, "batch_size", cfg.cft_batch, 1, 4096, "cft");
    cfg.cft_lr = get_num(c, "lr", cfg.cft_lr, 0.0, 10.0, "cft");
  }

  if (j.contains("jft")) {
    const json& c = j.at("jft");
    expect_object(c, "jft");
    expect_keys(c, "jft", {"epochs", "task_epochs", "batch_size", "lr"});
    cfg.jft_epochs = get_int(c, "epochs", cfg.jft_epochs, 0, 100000, "jft");
    cfg.jft_task_epochs = get_int(c, "task_epochs", cfg.jft_task_epochs, 0, 100000, "jft");
    cfg.jft_batch = get_int(c, "batch_size", cfg.jft_batch, 1, 4096, "jft");
    cfg.jft_lr = get_num(c, "lr", cfg.jft_lr, 0.0, 10.0, "jft");
  }

  if (j.contains("jft_tft")) {
    const json& c = j.at("jft_tft");
    expect_object(c, "jft_tft");
    expect_keys(c, "jft_tft",
                {"classifier_epochs", "classifier_lr", "classifier_momentum",
                 "segmenter_epochs", "segmenter_lr", "segmenter_weight_decay",
                 "segmenter_poly_power"});
    cfg.jft_tft_cls_epochs =
        get_int(c, "classifier_epochs", cfg.jft_tft_cls_epochs, 0, 100000, "jft_tft");
    cfg.jft_tft_cls_lr = get_num(c, "classifier_lr", cfg.jft_tft_cls_lr, 0.0, 10.0, "jft_tft");
    cfg.jft_tft_cls_momentum =
        get_num(c, "classifier_momentum", cfg.jft_tft_cls_momentum, 0.0, 1.0, "jft_tft");
    cfg.jft_tft_seg_epochs =
        get_int(c, "segmenter_epochs", cfg.jft_tft_seg_epochs, 0, 100000, "jft_tft");
    cfg.jft_tft_seg_lr = get_num(c, "segmenter_lr", cfg.jft_tft_seg_lr, 0.0, 10.0, "jft_tft");
    cfg.jft_tft_seg_weight_decay = get_num(c, "segmenter_weight_decay",
                                           cfg.jft_tft_seg_weight_decay, 0.0, 1.0, "jft_tft");
    cfg.jft_tft_seg_poly_power =
        get_num(c, "segmenter_poly_power", cfg.jft_tft_seg_poly_power, 0.0, 10.0, "jft_tft");
  }

  if (j.contains("connector")) {
    const json& c = j.at("connector");
    expect_object(c, "connector");
    expect_keys(c, "connector", {"epochs", "batch_size", "lr", "lr_drop_every"});
    cfg.connector_epochs = get_int(c, "epochs", cfg.connector_epochs, 0, 100000, "connector");
    cfg.connector_batch = get_int(c, "batch_size", cfg.connector_batch, 1, 4096, "connector");
    cfg.connector_lr = get_num(c, "lr", cfg.connector_lr, 0.0, 10.0, "connector");
    cfg.connector_lr_drop =
        get_int(c, "lr_drop_every", cfg.connector_lr_drop, 1, 100000, "connector");
  }

  return cfg;
}

json ExperimentConfig::to_json() const {
  json j;
  j["run_dir"] = run_dir;
  j["seeds"] = seeds;
  j["regimes"] = regimes;
  j["betas"] = betas;
  j["qualities"] = qualities;
  j["connector_target"] = connector_target;
  j["dataset"] = json{{"seed", dataset.seed},
                      {"train_count", dataset.train_count},
                      {"val_count", dataset.val_count},
                      {"image_size", dataset.image_size},
                      {"min_shapes", dataset.min_shapes},
                      {"max_shapes", dataset.max_shapes},
                      {"pixel_noise", dataset.pixel_noise}};
  j["codec_pretrain"] = json{{"epochs", codec_epochs},
                             {"batch_size", codec_batch},
                             {"lr", codec_lr},
                             {"seed", codec_seed}};
  j["detector_pretrain"] = pretrain_to_json(detector_pretrain);
  j["classifier_pretrain"] = pretrain_to_json(classifier_pretrain);
  j["segmenter_pretrain"] = pretrain_to_json(segmenter_pretrain);
  j["tft"] = json{{"epochs", tft_epochs}, {"batch_size", tft_batch}, {"lr", tft_lr}};
  j["cft"] = json{{"epochs", cft_epochs}, {"batch_size", cft_batch}, {"lr", cft_lr}};
  j["jft"] = json{{"epochs", jft_epochs},
                  {"task_epochs", jft_task_epochs},
                  {"batch_size", jft_batch},
                  {"lr", jft_lr}};
  j["jft_tft"] = json{{"classifier_epochs", jft_tft_cls_epochs},
                      {"classifier_lr", jft_tft_cls_lr},
                      {"classifier_momentum", jft_tft_cls_momentum},
                      {"segmenter_epochs", jft_tft_seg_epochs},
                      {"segmenter_lr", jft_tft_seg_lr},
                      {"segmenter_weight_decay", jft_tft_seg_weight_decay},
                      {"segmenter_poly_power", jft_tft_seg_poly_power}};
  j["connector"] = json{{"epochs", connector_epochs},
                        {"batch_size", connector_batch},
                        {"lr", connector_lr},
                        {"lr_drop_every", connector_lr_drop}};
  return j;
}

uint64_t ExperimentConfig::config_hash() const {
  const std::string s = to_json().dump();
  return fnv1a(s.data(), s.size());
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) cfg_fail("cannot open config file '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    cfg_fail("cannot parse '" + path + "': " + e.what());
  }
  return config_from_json(j);
}

}  // namespace taskcodec
