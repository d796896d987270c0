#include "taskcodec/connector.hpp"

#include <cmath>
#include <cstdio>

#include "taskcodec/optim.hpp"

namespace taskcodec {

const char* connector_kind_name(ConnectorKind kind) {
  switch (kind) {
    case ConnectorKind::kAvgPool3:
      return "avgpool3";
    case ConnectorKind::kDepthwise3:
      return "depthwise3";
    default:
      return "conv3";
  }
}

ConnectorKind connector_kind_from(const std::string& name) {
  if (name == "avgpool3") return ConnectorKind::kAvgPool3;
  if (name == "depthwise3") return ConnectorKind::kDepthwise3;
  if (name == "conv3") return ConnectorKind::kConv3;
  fail("config: unknown connector kind '" + name +
       "' (expected avgpool3, depthwise3 or conv3)");
}

const char* connector_target_name(ConnectorTarget mode) {
  return mode == ConnectorTarget::kReferenceReconstruction ? "reference_reconstruction"
                                                           : "original";
}

ConnectorTarget connector_target_from(const std::string& name) {
  if (name == "reference_reconstruction") return ConnectorTarget::kReferenceReconstruction;
  if (name == "original") return ConnectorTarget::kOriginal;
  fail("config: unknown connector target '" + name +
       "' (expected reference_reconstruction or original)");
}

std::string beta_str(double beta) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", beta);
  return buf;
}

std::string connector_file_key(ConnectorKind kind, double beta) {
  return std::string("connector-") + connector_kind_name(kind) + "-beta" + beta_str(beta);
}

Checkpoint connector_to_checkpoint(Connector& conn) {
  Checkpoint ck = Checkpoint::from_params(conn.params(), nlohmann::json::object());
  ck.meta["kind"] = "connector";
  ck.meta["connector_kind"] = connector_kind_name(conn.kind);
  ck.meta["trained_for"] = conn.trained_for;
  ck.meta["target_mode"] = connector_target_name(conn.target_mode);
  return ck;
}

void connector_from_checkpoint(Connector& conn, const Checkpoint& ck) {
  check(ck.meta.value("kind", "") == "connector",
        "io: checkpoint is not a connector (kind='" + ck.meta.value("kind", "") + "')");
  const std::string stored = ck.meta.value("connector_kind", "");
  check(stored == connector_kind_name(conn.kind),
        "io: checkpoint holds a " + stored + " connector, expected " +
            connector_kind_name(conn.kind));
  auto ps = conn.params();
  ck.restore_params(ps);
  conn.trained_for = ck.meta.value("trained_for", "");
  conn.target_mode = connector_target_from(
      ck.meta.value("target_mode", "reference_reconstruction"));
}

void save_connector(Connector& conn, const std::string& path) {
  connector_to_checkpoint(conn).save(path);
}

void load_connector(Connector& conn, const std::string& path) {
  connector_from_checkpoint(conn, Checkpoint::load(path));
}

std::vector<Tensor> connector_targets(ConnectorTarget mode, HyperpriorCodec* reference_codec,
                                      const std::vector<Tensor>& images) {
  if (mode == ConnectorTarget::kOriginal) return images;
  check(reference_codec != nullptr,
        "config: reference_reconstruction targets need the reference codec");
  NoGrad ng;
  std::vector<Tensor> targets;
  targets.reserve(images.size());
  for (size_t i = 0; i < images.size(); ++i) {
    auto out = reference_codec->forward(stack_batch(images, {i}), QuantMode::kEvalRound);
    auto& v = out.recon.vals();
    targets.push_back(Tensor::from({images[i].dim(0), images[i].dim(1), images[i].dim(2)},
                                   std::vector<float>(v.begin(), v.end())));
  }
  return targets;
}

ConnectorTrainReport train_connector(Connector& conn, HyperpriorCodec& codec, double beta,
                                     const std::vector<Tensor>& images,
                                     const std::vector<Tensor>& targets, int epochs,
                                     int batch_size, double lr, int lr_drop_every,
                                     uint64_t seed, bool verbose) {
  check(!images.empty(), "config: connector training needs a non-empty image list");
  check(images.size() == targets.size(),
        "config: connector training needs one target per image");
  check(batch_size >= 1, "config: batch size must be >= 1");
  check(lr_drop_every >= 1, "config: learning-rate drop interval must be >= 1 epoch");
  const std::string beta_tag = "beta" + beta_str(beta);
  check(codec.quality_tag.size() >= beta_tag.size() &&
            codec.quality_tag.compare(codec.quality_tag.size() - beta_tag.size(),
                                      beta_tag.size(), beta_tag) == 0,
        "config: codec '" + codec.quality_tag + "' is not fine-tuned for " + beta_tag);

  // The codec is frozen, so its eval reconstructions are constants: compute
  // them once up front.
  std::vector<Tensor> recons;
  {
    NoGrad ng;
    recons.reserve(images.size());
    for (size_t i = 0; i < images.size(); ++i) {
      auto out = codec.forward(stack_batch(images, {i}), QuantMode::kEvalRound);
      auto& v = out.recon.vals();
      recons.push_back(Tensor::from({images[i].dim(0), images[i].dim(1), images[i].dim(2)},
                                    std::vector<float>(v.begin(), v.end())));
    }
  }

  ConnectorTrainReport rep;
  if (conn.param_count() == 0) {
    // Parameter-free kind: nothing to optimize, just measure and tag.
    NoGrad ng;
    double acc = 0;
    for (size_t i = 0; i < recons.size(); ++i) {
      acc += mse(conn(stack_batch(recons, {i})), stack_batch(targets, {i})).item();
    }
    rep.final_loss = acc / static_cast<double>(recons.size());
    conn.trained_for = beta_tag;
    return rep;
  }

  Rng rng(seed);
  AdamT<float> opt(conn.params(), lr);
  LossMonitor mon("connector training");
  std::vector<size_t> idx(recons.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;

  for (int ep = 0; ep < epochs; ++ep) {
    opt.set_lr(lr * std::pow(0.1, ep / lr_drop_every));
    for (size_t i = idx.size(); i > 1; --i) {
      std::swap(idx[i - 1], idx[rng.uniform_int(static_cast<uint64_t>(i))]);
    }
    double ep_loss = 0;
    int ep_batches = 0;
    for (size_t start = 0; start < idx.size(); start += static_cast<size_t>(batch_size)) {
      const size_t stop = std::min(idx.size(), start + static_cast<size_t>(batch_size));
      std::vector<size_t> pick(idx.begin() + static_cast<int64_t>(start),
                               idx.begin() + static_cast<int64_t>(stop));
      auto loss = mse(conn(stack_batch(recons, pick)), stack_batch(targets, pick));
      const double lv = loss.item();
      ep_loss += lv;
      ++ep_batches;
      ++rep.steps;
      opt.zero_grad();
      mon.observe(lv);
      loss.backward();
      opt.step();
    }
    rep.final_loss = ep_loss / ep_batches;
    if (verbose) {
      std::fprintf(stderr, "[connector %s %s] epoch %d/%d lr %.4g loss %.6f\n",
                   connector_kind_name(conn.kind), beta_tag.c_str(), ep + 1, epochs,
                   opt.lr(), rep.final_loss);
    }
  }
  conn.trained_for = beta_tag;
  return rep;
}

std::vector<Tensor> connector_apply_all(Connector& conn, const std::vector<Tensor>& images) {
  NoGrad ng;
  std::vector<Tensor> out;
  out.reserve(images.size());
  for (size_t i = 0; i < images.size(); ++i) {
    auto y = conn(stack_batch(images, {i}));
    auto& v = y.vals();
    out.push_back(Tensor::from({y.dim(1), y.dim(2), y.dim(3)},
                               std::vector<float>(v.begin(), v.end())));
  }
  return out;
}

}  // namespace taskcodec
