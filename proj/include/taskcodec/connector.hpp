#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "taskcodec/checkpoint.hpp"
#include "taskcodec/codec.hpp"
#include "taskcodec/layers.hpp"

namespace taskcodec {

// A tiny image-to-image adapter placed between a task-fine-tuned codec's
// reconstruction and an off-the-shelf secondary model. It is trained on
// images alone — its interface never sees a label — so one connector per
// trade-off point serves every secondary task.

enum class ConnectorKind { kAvgPool3, kDepthwise3, kConv3 };

const char* connector_kind_name(ConnectorKind kind);
ConnectorKind connector_kind_from(const std::string& name);

// What the connector output is pulled towards: the reconstruction an
// unbiased rate-distortion codec would have produced, or the original image.
enum class ConnectorTarget { kReferenceReconstruction, kOriginal };

const char* connector_target_name(ConnectorTarget mode);
ConnectorTarget connector_target_from(const std::string& name);

// Stable text form of a trade-off weight ("1", "0.6675", ...), shared by
// connector keys and sweep output.
std::string beta_str(double beta);

template <typename S>
struct ConnectorT {
  ConnectorKind kind = ConnectorKind::kAvgPool3;
  TensorOf<S> w;            // [3,1,3,3] or [3,3,3,3], no bias; undefined for avgpool3
  std::string trained_for;  // "beta<value>" once trained, empty at init
  ConnectorTarget target_mode = ConnectorTarget::kReferenceReconstruction;

  // Learned kinds start as the identity kernel: the connector is a no-op at
  // step 0, so any behavior change downstream is attributable to training.
  explicit ConnectorT(ConnectorKind k) : kind(k) {
    if (k == ConnectorKind::kDepthwise3) {
      std::vector<S> wv(27, S(0));
      for (int c = 0; c < 3; ++c) wv[static_cast<size_t>(c) * 9 + 4] = S(1);
      w = TensorOf<S>::from({3, 1, 3, 3}, std::move(wv));
      w.set_requires_grad(true);
    } else if (k == ConnectorKind::kConv3) {
      std::vector<S> wv(81, S(0));
      for (int c = 0; c < 3; ++c) wv[static_cast<size_t>(c * 3 + c) * 9 + 4] = S(1);
      w = TensorOf<S>::from({3, 3, 3, 3}, std::move(wv));
      w.set_requires_grad(true);
    }
  }

  int64_t param_count() const { return w.defined() ? w.size() : 0; }

  TensorOf<S> operator()(const TensorOf<S>& x) const {
    check(x.shape().size() == 4 && x.dim(1) == 3,
          "config: connector input must be [N,3,H,W], got " + shape_str(x.shape()));
    switch (kind) {
      case ConnectorKind::kAvgPool3:
        return avgpool2d(x, 3, 1, 1);
      case ConnectorKind::kDepthwise3:
        return depthwise_conv2d(x, w);
      default:
        return conv2d(x, w, TensorOf<S>(), 1, 1);
    }
  }

  std::vector<Param<S>> params() {
    std::vector<Param<S>> ps;
    if (w.defined()) ps.push_back({"w", w, nullptr});
    return ps;
  }

  uint64_t hash() { return params_hash(params()); }
};

using Connector = ConnectorT<float>;

// File stem the sweep caches connectors under: one file per (kind, beta),
// reused across secondary tasks.
std::string connector_file_key(ConnectorKind kind, double beta);

Checkpoint connector_to_checkpoint(Connector& conn);
void connector_from_checkpoint(Connector& conn, const Checkpoint& ck);
void save_connector(Connector& conn, const std::string& path);
void load_connector(Connector& conn, const std::string& path);

// Builds the distortion targets for connector training. The reference mode
// runs the given rate-distortion codec (highest pretrained quality) in eval
// mode; the original mode returns the images themselves.
std::vector<Tensor> connector_targets(ConnectorTarget mode, HyperpriorCodec* reference_codec,
                                      const std::vector<Tensor>& images);

struct ConnectorTrainReport {
  double final_loss = 0;
  int steps = 0;
};

// Minimizes mse(connector(recon), target) over the train images with Adam,
// dropping the learning rate by 10x every lr_drop_every epochs. The codec is
// frozen: reconstructions are precomputed in eval mode. Labels never enter.
// The codec's tag must end in "beta<beta>" — connectors belong to one
// trade-off point. avgpool3 has nothing to train; it is tagged and measured
// as-is.
ConnectorTrainReport train_connector(Connector& conn, HyperpriorCodec& codec, double beta,
                                     const std::vector<Tensor>& images,
                                     const std::vector<Tensor>& targets, int epochs,
                                     int batch_size, double lr, int lr_drop_every,
                                     uint64_t seed, bool verbose = false);

// Applies the connector to every image without gradients (eval inference).
std::vector<Tensor> connector_apply_all(Connector& conn, const std::vector<Tensor>& images);

}  // namespace taskcodec
