#pragma once

// Config schema and the glue that turns a Config into a model, a training
// setup and datasets, plus TrainState <-> checkpoint conversion.

#include <cstdint>
#include <memory>
#include <optional>
#include <set>
#include <string>

#include "byteformer/byte_order.hpp"
#include "byteformer/checkpoint.hpp"
#include "byteformer/config.hpp"
#include "byteformer/dataset.hpp"
#include "byteformer/model.hpp"
#include "byteformer/privacy.hpp"
#include "byteformer/trainer.hpp"

namespace byteformer {

inline const std::set<std::string>& config_schema() {
  static const std::set<std::string> keys = {
      "seed",
      "num_classes",
      "model.vocab_size",
      "model.embed_dim",
      "model.depth",
      "model.heads",
      "model.mlp_ratio",
      "model.kernel",
      "model.window",
      "model.attention",
      "model.downsample",
      "model.max_tokens",
      "model.positional",
      "model.conv",
      "train.lr_max",
      "train.lr_min",
      "train.weight_decay",
      "train.warmup_iters",
      "train.total_iters",
      "train.batch_size",
      "train.ema",
      "train.ema_momentum",
      "train.eval_every",
      "train.step",
      "data.kind",
      "data.length",
      "data.motif_length",
      "data.motif_count",
      "data.train_size",
      "data.val_size",
      "data.task_seed",
      "data.image_size",
      "data.encoding",
      "data.png_filter",
      "data.camera",
      "data.camera_policy",
      "data.root",
      "data.train_manifest",
      "data.val_manifest",
      "data.byte_order",
      "data.order_window",
      "data.order_stride",
      "data.order_seed",
      "data.phi_seed",
      "data.noise",
      "data.max_input_bytes",
      "output.checkpoint",
      "output.metrics",
  };
  return keys;
}

inline ByteFormerConfig model_config_from(const Config& c) {
  ByteFormerConfig m;
  m.num_classes = c.get_uint("num_classes");
  m.vocab_size = c.get_uint("model.vocab_size", m.vocab_size);
  m.embed_dim = c.get_uint("model.embed_dim", m.embed_dim);
  m.depth = c.get_uint("model.depth", m.depth);
  m.heads = c.get_uint("model.heads", m.heads);
  m.mlp_ratio = c.get_uint("model.mlp_ratio", m.mlp_ratio);
  m.conv_kernel = c.get_uint("model.kernel", m.conv_kernel);
  m.window_size = c.get_uint("model.window", m.window_size);
  m.attention = parse_attention(c.get_string("model.attention", std::string(to_string(m.attention))));
  m.downsample_after = c.get_uint_list("model.downsample", m.downsample_after);
  m.max_tokens = c.get_uint("model.max_tokens", m.max_tokens);
  m.use_positional = c.get_bool("model.positional", m.use_positional);
  m.use_conv = c.get_bool("model.conv", m.use_conv);
  m.validate();
  return m;
}

inline TrainConfig train_config_from(const Config& c) {
  TrainConfig t;
  t.lr_max = c.get_double("train.lr_max", t.lr_max);
  t.lr_min = c.get_double("train.lr_min", t.lr_min);
  t.weight_decay = c.get_double("train.weight_decay", t.weight_decay);
  t.warmup_iters = c.get_uint("train.warmup_iters", t.warmup_iters);
  t.total_iters = c.get_uint("train.total_iters", t.total_iters);
  t.batch_size = c.get_uint("train.batch_size", t.batch_size);
  t.ema_enabled = c.get_bool("train.ema", t.ema_enabled);
  t.ema_momentum = c.get_double("train.ema_momentum", t.ema_momentum);
  t.eval_every = c.get_uint("train.eval_every", t.eval_every);
  t.seed = c.get_uint("seed", t.seed);
  t.validate();
  return t;
}

struct DataConfig {
  std::string kind = "locality";  // locality, histogram, images, manifest
  SyntheticSpec synthetic;
  std::size_t train_size = 2000;
  std::size_t val_size = 500;
  std::size_t image_size = 32;
  EncodeOptions encode;
  std::optional<CameraSpec> camera;
  std::string root = ".";
  std::string train_manifest;
  std::string val_manifest;
  OrderKind order = OrderKind::baseline;
  std::size_t order_window = 1024;
  std::size_t order_stride = 1024;
  std::uint64_t order_seed = 0;
  std::optional<std::uint64_t> phi_seed;
  int noise = 0;
  std::size_t max_input_bytes = 1 << 20;
};

inline DataConfig data_config_from(const Config& c) {
  DataConfig d;
  d.kind = c.get_string("data.kind", d.kind);
  if (d.kind != "locality" && d.kind != "histogram" && d.kind != "images" && d.kind != "manifest") {
    throw ConfigError("key 'data.kind' must be locality, histogram, images or manifest, got '" + d.kind + "'");
  }
  const auto classes = c.get_uint("num_classes");
  d.synthetic.task = d.kind == "histogram" ? SyntheticTask::histogram : SyntheticTask::locality;
  d.synthetic.num_classes = static_cast<int>(classes);
  d.synthetic.length = c.get_uint("data.length", d.synthetic.length);
  d.synthetic.motif_length = c.get_uint("data.motif_length", d.synthetic.motif_length);
  d.synthetic.motif_count = c.get_uint("data.motif_count", d.synthetic.motif_count);
  d.synthetic.task_seed = c.get_uint("data.task_seed", d.synthetic.task_seed);
  d.train_size = c.get_uint("data.train_size", d.train_size);
  d.val_size = c.get_uint("data.val_size", d.val_size);
  d.image_size = c.get_uint("data.image_size", d.kind == "images" ? 32 : 224);
  d.encode.image_size = d.image_size;
  d.encode.encoding = parse_encoding(c.get_string("data.encoding", d.kind == "manifest" ? "raw" : "fhwc"));
  d.encode.png_filter = static_cast<int>(c.get_uint("data.png_filter", 0));
  if (c.has("data.camera")) {
    CameraSpec cam;
    cam.keep_fraction = c.get_double("data.camera");
    const std::string policy = c.get_string("data.camera_policy", "per_sample");
    if (policy == "per_sample") {
      cam.seed_policy = CameraSpec::SeedPolicy::per_sample;
    } else if (policy == "fixed") {
      cam.seed_policy = CameraSpec::SeedPolicy::fixed;
    } else {
      throw ConfigError("key 'data.camera_policy' must be per_sample or fixed, got '" + policy + "'");
    }
    cam.validate();
    d.camera = cam;
  }
  d.root = c.get_string("data.root", d.root);
  d.train_manifest = c.get_string("data.train_manifest", "");
  d.val_manifest = c.get_string("data.val_manifest", "");
  if (d.kind == "manifest" && (d.train_manifest.empty() || d.val_manifest.empty())) {
    throw ConfigError("missing required key '" + std::string(d.train_manifest.empty() ? "data.train_manifest" : "data.val_manifest") + "'");
  }
  d.order = parse_order_kind(c.get_string("data.byte_order", "baseline"));
  d.order_window = c.get_uint("data.order_window", d.order_window);
  d.order_stride = c.get_uint("data.order_stride", d.order_stride);
  d.order_seed = c.get_uint("data.order_seed", d.order_seed);
  if (c.has("data.phi_seed")) d.phi_seed = c.get_uint("data.phi_seed");
  d.noise = static_cast<int>(c.get_uint("data.noise", 0));
  d.max_input_bytes = c.get_uint("data.max_input_bytes", d.max_input_bytes);
  return d;
}

struct Datasets {
  std::unique_ptr<DataSource> train;
  std::unique_ptr<DataSource> val;
  Pipeline pipeline;
};

inline Pipeline make_pipeline(const DataConfig& d) {
  Pipeline p;
  if (d.order != OrderKind::baseline) p.order = OrderTransform::make(d.order, d.order_window, d.order_stride, d.order_seed);
  if (d.phi_seed) p.phi = gen_permutation(*d.phi_seed);
  p.noise = d.noise;
  return p;
}

// Synthetic sets draw their samples from seed-derived generators, so train
// and validation never share a sample stream.
inline Datasets build_datasets(const DataConfig& d, std::uint64_t seed) {
  Datasets out;
  out.pipeline = make_pipeline(d);
  if (d.camera && d.kind != "images" && d.kind != "manifest") {
    throw ConfigError("key 'data.camera' needs image data (data.kind images or manifest)");
  }
  if (d.kind == "locality" || d.kind == "histogram") {
    Rng train_rng(mix_seed({d.synthetic.task_seed, 1})), val_rng(mix_seed({d.synthetic.task_seed, 2}));
    out.train = std::make_unique<BytesSource>(make_synthetic(d.synthetic, d.train_size, train_rng));
    out.val = std::make_unique<BytesSource>(make_synthetic(d.synthetic, d.val_size, val_rng));
  } else if (d.kind == "images") {
    if (d.synthetic.num_classes != 4) throw ConfigError("key 'num_classes' must be 4 for data.kind images");
    Rng train_rng(mix_seed({d.synthetic.task_seed, 3})), val_rng(mix_seed({d.synthetic.task_seed, 4}));
    out.train = std::make_unique<ImageSource>(make_synthetic_images(d.train_size, d.image_size, train_rng), d.encode,
                                              d.camera, mix_seed({seed, 5}));
    out.val = std::make_unique<ImageSource>(make_synthetic_images(d.val_size, d.image_size, val_rng), d.encode,
                                            d.camera, mix_seed({seed, 6}));
  } else {
    const int classes = d.synthetic.num_classes;
    out.train = std::make_unique<ManifestSource>(load_manifest(d.root, d.train_manifest, classes), d.encode, d.camera,
                                                 mix_seed({seed, 5}));
    out.val = std::make_unique<ManifestSource>(load_manifest(d.root, d.val_manifest, classes), d.encode, d.camera,
                                               mix_seed({seed, 6}));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints of training state

// Tensors: model parameters by name, then "adam.m/<name>", "adam.v/<name>"
// and, with EMA, "ema/<name>". The step counter lives in the config text.
template <typename T>
Checkpoint make_checkpoint(const Config& config, const TrainState<T>& state) {
  Config meta = config;
  meta.set("train.step", std::to_string(state.step));
  Checkpoint ckpt;
  ckpt.config_text = meta.to_text();
  const auto named = state.params.named();
  for (const auto& p : named) ckpt.tensors.push_back(to_checkpoint_tensor(p.name, p.tensor));
  for (std::size_t i = 0; i < named.size(); ++i) {
    ckpt.tensors.push_back(to_checkpoint_tensor("adam.m/" + named[i].name,
                                                Tensor<T>(named[i].tensor.shape(), state.moments.m[i])));
    ckpt.tensors.push_back(to_checkpoint_tensor("adam.v/" + named[i].name,
                                                Tensor<T>(named[i].tensor.shape(), state.moments.v[i])));
  }
  if (state.has_ema()) {
    for (const auto& p : state.ema.named()) ckpt.tensors.push_back(to_checkpoint_tensor("ema/" + p.name, p.tensor));
  }
  return ckpt;
}

template <typename T>
ByteFormerParams<T> params_from_checkpoint(const Checkpoint& ckpt, const ByteFormerConfig& model_cfg,
                                           const std::string& prefix = "", bool requires_grad = false) {
  auto params = init_params<T>(model_cfg, 0, requires_grad);
  for (const auto& p : params.named()) restore_tensor(ckpt, prefix + p.name, p.tensor);
  return params;
}

template <typename T>
TrainState<T> train_state_from_checkpoint(const Checkpoint& ckpt, const ByteFormerConfig& model_cfg) {
  TrainState<T> state;
  state.params = params_from_checkpoint<T>(ckpt, model_cfg, "", true);
  const auto named = state.params.named();
  state.moments = AdamMoments<T>::zeros_like(named);
  for (std::size_t i = 0; i < named.size(); ++i) {
    const Shape& shape = named[i].tensor.shape();
    Tensor<T> m(shape, std::vector<T>(named[i].tensor.size())), v(shape, std::vector<T>(named[i].tensor.size()));
    restore_tensor(ckpt, "adam.m/" + named[i].name, m);
    restore_tensor(ckpt, "adam.v/" + named[i].name, v);
    state.moments.m[i].assign(m.data().begin(), m.data().end());
    state.moments.v[i].assign(v.data().begin(), v.data().end());
  }
  if (ckpt.find("ema/token_embedding")) state.ema = params_from_checkpoint<T>(ckpt, model_cfg, "ema/", false);
  state.step = Config::parse(ckpt.config_text, "checkpoint").get_uint("train.step", 0);
  return state;
}

// Parameters for evaluation: the EMA shadow when stored, else the live weights.
template <typename T>
ByteFormerParams<T> eval_params_from_checkpoint(const Checkpoint& ckpt, const ByteFormerConfig& model_cfg) {
  return params_from_checkpoint<T>(ckpt, model_cfg, ckpt.find("ema/token_embedding") ? "ema/" : "", false);
}

}  // namespace byteformer
