// Command-line front end: dataset generation, pretraining, fine-tuning
// regimes, connector training, single-image compression, and the full
// rate-accuracy sweep. Every experiment artifact lands under the run
// directory named by the config; stdout carries short machine-readable
// summaries only.
//
// Exit codes: 0 success, 2 usage (unknown subcommand or flag), 3 config
// validation, 4 missing or malformed file, 5 runtime failure.

#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "CLI11.hpp"
#include "taskcodec/checkpoint.hpp"
#include "taskcodec/codec.hpp"
#include "taskcodec/common.hpp"
#include "taskcodec/config.hpp"
#include "taskcodec/connector.hpp"
#include "taskcodec/dataset.hpp"
#include "taskcodec/entropy.hpp"
#include "taskcodec/image_io.hpp"
#include "taskcodec/metrics.hpp"
#include "taskcodec/regimes.hpp"
#include "taskcodec/tasks.hpp"

namespace {

using namespace taskcodec;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitConfig = 3;
constexpr int kExitIo = 4;
constexpr int kExitRuntime = 5;

// Maps the error-message prefix used throughout the library to the exit
// code table above, so scripts can branch on the category without parsing
// the message text.
int exit_code_for(const std::string& what) {
  if (what.rfind("config:", 0) == 0) return kExitConfig;
  if (what.rfind("io:", 0) == 0) return kExitIo;
  return kExitRuntime;
}

void apply_thread_env() {
  const char* env = std::getenv("TASKCODEC_THREADS");
  if (env == nullptr || *env == '\0') return;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (end == nullptr || *end != '\0' || n < 1) {
    fail("config: TASKCODEC_THREADS must be a positive integer, got '" +
         std::string(env) + "'");
  }
#ifdef _OPENMP
  omp_set_num_threads(static_cast<int>(n));
#endif
}

ExperimentConfig config_for(const std::string& config_path, const std::string& run_dir) {
  ExperimentConfig cfg = load_config(config_path);
  if (!run_dir.empty()) cfg.run_dir = run_dir;
  return cfg;
}

// Rebuilds a codec from a checkpoint alone: channel widths come from the
// checkpoint metadata, so the caller does not need the original config.
HyperpriorCodec codec_from_file(const std::string& path) {
  Checkpoint ck = Checkpoint::load(path);
  CodecSettings s;
  s.mid_ch = ck.meta.value("mid_ch", s.mid_ch);
  s.latent_ch = ck.meta.value("latent_ch", s.latent_ch);
  s.hyper_ch = ck.meta.value("hyper_ch", s.hyper_ch);
  HyperpriorCodec codec(s, 0);
  codec_from_checkpoint(codec, ck);
  return codec;
}

void write_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail("io: cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) fail("io: short write to '" + path + "'");
}

std::vector<uint8_t> read_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail("io: cannot open '" + path + "'");
  return std::vector<uint8_t>((std::istreambuf_iterator<char>(f)),
                              std::istreambuf_iterator<char>());
}

int run_gen_data(const ExperimentConfig& cfg, const std::string& out_override) {
  Dataset ds = generate_dataset(cfg.dataset);
  const std::string dir =
      out_override.empty() ? cfg.run_dir + "/dataset" : out_override;
  write_dataset(ds, dir);
  std::printf("dataset %s train %zu val %zu train_hash %s val_hash %s\n", dir.c_str(),
              ds.train.size(), ds.val.size(), hex64(split_hash(ds.train)).c_str(),
              hex64(split_hash(ds.val)).c_str());
  return kExitOk;
}

int run_pretrain_codec(const ExperimentConfig& cfg, const std::string& quality,
                       bool verbose) {
  Pipeline pipe(cfg, verbose);
  std::vector<std::string> tags =
      quality.empty() ? cfg.qualities : std::vector<std::string>{quality};
  for (const auto& tag : tags) {
    HyperpriorCodec& codec = pipe.pretrained_codec(tag);
    std::printf("codec %s rate_weight %g hash %s\n", tag.c_str(), codec.rate_weight,
                hex64(codec.full_hash()).c_str());
  }
  return kExitOk;
}

int run_pretrain_task(const ExperimentConfig& cfg, const std::string& task,
                      bool verbose) {
  Pipeline pipe(cfg, verbose);
  const Dataset& ds = pipe.data();
  if (task == "detector") {
    double ap = evaluate_detector(pipe.base_detector(), images_of(ds.val), boxes_of(ds.val));
    std::printf("detector val_ap %.6f\n", ap);
  } else if (task == "classifier") {
    ClsEval ev =
        evaluate_classifier(pipe.base_classifier(), images_of(ds.val), labels_of(ds.val));
    std::printf("classifier val_top1 %.6f val_top5 %.6f\n", ev.top1, ev.top5);
  } else if (task == "segmenter") {
    double miou_val =
        evaluate_segmenter(pipe.base_segmenter(), images_of(ds.val), masks_of(ds.val));
    std::printf("segmenter val_miou %.6f\n", miou_val);
  } else {
    fail("config: unknown task '" + task + "' (detector|classifier|segmenter)");
  }
  return kExitOk;
}

int run_regime_cell(const ExperimentConfig& cfg, const std::string& regime, double beta,
                    int seed, bool verbose) {
  Pipeline pipe(cfg, verbose);
  RateAccuracyPoint p = pipe.evaluate(regime, beta, seed);
  std::printf("%s\n%s\n", results_csv_header().c_str(), results_csv_line(p).c_str());
  return kExitOk;
}

int run_train_connector(const ExperimentConfig& cfg, const std::string& kind_name,
                        double beta, bool verbose) {
  Pipeline pipe(cfg, verbose);
  const ConnectorKind kind = connector_kind_from(kind_name);
  Connector& conn = pipe.connector(kind, beta);
  std::printf("connector %s params %lld\n", connector_file_key(kind, beta).c_str(),
              static_cast<long long>(conn.param_count()));
  return kExitOk;
}

int run_compress(const std::string& input, const std::string& model,
                 const std::string& out) {
  HyperpriorCodec codec = codec_from_file(model);
  const Tensor img = load_image(input);
  const Tensor x = Tensor::from({1, img.dim(0), img.dim(1), img.dim(2)},
                                std::vector<float>(img.data(), img.data() + img.size()));
  const std::vector<uint8_t> bytes = compress_image(codec, x);
  write_bytes(out, bytes);
  std::printf("compressed %s -> %s bytes %zu bpp %.6f\n", input.c_str(), out.c_str(),
              bytes.size(), bpp_actual(bytes.size(), img.dim(1), img.dim(2)));
  return kExitOk;
}

int run_decompress(const std::string& input, const std::string& model,
                   const std::string& out) {
  HyperpriorCodec codec = codec_from_file(model);
  DecompressResult res = decompress_image(codec, read_bytes(input));
  const Tensor img =
      Tensor::from({res.recon.dim(1), res.recon.dim(2), res.recon.dim(3)},
                   std::vector<float>(res.recon.data(), res.recon.data() + res.recon.size()));
  save_ppm(out, img);
  std::printf("decompressed %s -> %s bpp %.6f\n", input.c_str(), out.c_str(), res.bpp);
  return kExitOk;
}

int run_sweep(const ExperimentConfig& cfg, bool verbose) {
  Pipeline pipe(cfg, verbose);
  const std::vector<RateAccuracyPoint> rows = pipe.sweep();
  std::printf("sweep %s rows %zu files results.csv report.csv report.json manifest.json\n",
              pipe.run_dir().c_str(), rows.size());
  return kExitOk;
}

int run_report(const std::string& config_path, const std::string& run_dir) {
  // The report is a pure function of the swept run directory: the config is
  // recovered from the manifest unless one is passed explicitly.
  ExperimentConfig cfg;
  if (!config_path.empty()) {
    cfg = config_for(config_path, run_dir);
  } else {
    if (run_dir.empty()) fail("config: report needs --run-dir or --config");
    std::ifstream f(run_dir + "/manifest.json");
    if (!f) fail("io: cannot open '" + run_dir + "/manifest.json'; run sweep first");
    nlohmann::json manifest;
    try {
      manifest = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
      fail("io: malformed manifest.json: " + std::string(e.what()));
    }
    if (!manifest.contains("config")) fail("io: manifest.json has no config section");
    cfg = config_from_json(manifest["config"]);
    cfg.run_dir = run_dir;
  }
  const std::vector<RateAccuracyPoint> rows =
      read_results_csv(cfg.run_dir + "/results.csv");
  if (rows.empty()) fail("config: results.csv has no rows to report");
  write_report(rows, cfg, cfg.run_dir);
  std::printf("report %s rows %zu files report.csv report.json\n", cfg.run_dir.c_str(),
              rows.size());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Task-aware image compression experiments: train codecs and task heads, "
      "run fine-tuning regimes, and sweep the rate-accuracy grid."};
  app.require_subcommand(1);
  app.fallthrough(false);

  std::string config_path, run_dir, out_path, model_path, input_path;
  std::string quality, task, regime, kind;
  double beta = 1.0;
  int seed = 1;
  bool verbose = false;

  auto add_config = [&](CLI::App* cmd, bool required) {
    auto* opt = cmd->add_option("--config", config_path, "experiment config (JSON)");
    if (required) opt->required();
    cmd->add_option("--run-dir", run_dir, "override the config's run directory");
    cmd->add_flag("--verbose", verbose, "print training progress");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate the dataset and write it out");
  add_config(gen, true);
  gen->add_option("--out", out_path, "output directory (default <run-dir>/dataset)");

  CLI::App* pc = app.add_subcommand("pretrain-codec", "rate-distortion pretrain codecs");
  add_config(pc, true);
  pc->add_option("--quality", quality, "single quality tag (default: all configured)");

  CLI::App* pt = app.add_subcommand("pretrain-task", "pretrain a task model");
  add_config(pt, true);
  pt->add_option("--task", task, "detector|classifier|segmenter")->required();

  CLI::App* rr = app.add_subcommand("run-regime", "train and evaluate one grid cell");
  add_config(rr, true);
  rr->add_option("--regime", regime, "regime name, e.g. jft")->required();
  rr->add_option("--beta", beta, "rate-accuracy trade-off weight")->required();
  rr->add_option("--seed", seed, "training seed")->required();

  CLI::App* tc = app.add_subcommand("train-connector", "train a connector module");
  add_config(tc, true);
  tc->add_option("--kind", kind, "avgpool3|depthwise3|conv3")->required();
  tc->add_option("--beta", beta, "ladder point to attach to")->required();

  CLI::App* co = app.add_subcommand("compress", "compress one image to a bitstream");
  co->add_option("input", input_path, "PPM or PNG image")->required();
  co->add_option("--model", model_path, "codec checkpoint")->required();
  co->add_option("--out", out_path, "output bitstream path")->required();

  CLI::App* de = app.add_subcommand("decompress", "decode a bitstream to a PPM image");
  de->add_option("input", input_path, "bitstream file")->required();
  de->add_option("--model", model_path, "codec checkpoint")->required();
  de->add_option("--out", out_path, "output PPM path")->required();

  CLI::App* sw = app.add_subcommand("sweep", "run the full regime x beta x seed grid");
  add_config(sw, true);

  CLI::App* rp = app.add_subcommand("report", "rebuild report files from results.csv");
  rp->add_option("--config", config_path, "experiment config (JSON)");
  rp->add_option("--run-dir", run_dir, "swept run directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "%s\n%s", e.what(), app.help().c_str());
    return kExitUsage;
  }

  try {
    apply_thread_env();
    if (app.got_subcommand(gen)) return run_gen_data(config_for(config_path, run_dir), out_path);
    if (app.got_subcommand(pc))
      return run_pretrain_codec(config_for(config_path, run_dir), quality, verbose);
    if (app.got_subcommand(pt))
      return run_pretrain_task(config_for(config_path, run_dir), task, verbose);
    if (app.got_subcommand(rr))
      return run_regime_cell(config_for(config_path, run_dir), regime, beta, seed, verbose);
    if (app.got_subcommand(tc))
      return run_train_connector(config_for(config_path, run_dir), kind, beta, verbose);
    if (app.got_subcommand(co)) return run_compress(input_path, model_path, out_path);
    if (app.got_subcommand(de)) return run_decompress(input_path, model_path, out_path);
    if (app.got_subcommand(sw)) return run_sweep(config_for(config_path, run_dir), verbose);
    if (app.got_subcommand(rp)) return run_report(config_path, run_dir);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e.what());
  }
  return kExitUsage;
}
