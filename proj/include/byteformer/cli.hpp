#pragma once

// byteformer encode | train | eval | analyze-embeddings
//
// Every failure prints one line "error: <reason>" to stderr and returns the
// exit code of its error class (1 usage, 2 data, 3 numeric).

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "byteformer/analysis.hpp"
#include "byteformer/checkpoint.hpp"
#include "byteformer/codec.hpp"
#include "byteformer/config.hpp"
#include "byteformer/dataset.hpp"
#include "byteformer/experiment.hpp"
#include "byteformer/privacy.hpp"
#include "byteformer/trainer.hpp"

namespace byteformer {

namespace cli {

struct EncodeArgs {
  std::string input_dir;
  std::string output_dir;
  std::string format;
  int filter = 0;
  std::string depth = "i16";
  std::size_t size = 0;
};

struct TrainArgs {
  std::string config;
  std::string checkpoint;
  std::string metrics;
  std::string resume;
};

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::optional<std::uint64_t> phi;
  std::optional<double> camera;
  std::string byte_order;
};

struct AnalyzeArgs {
  std::string checkpoint;
  std::string prefix;
};

inline std::string extension_for(Encoding e) {
  switch (e) {
    case Encoding::fHWC: return ".fhwc";
    case Encoding::fCHW: return ".fchw";
    case Encoding::TIFF: return ".tiff";
    case Encoding::PNG: return ".png";
    default: return ".wav";
  }
}

inline int cmd_encode(const EncodeArgs& a, std::ostream& out) {
  std::string fmt = a.format;
  std::transform(fmt.begin(), fmt.end(), fmt.begin(), [](unsigned char c) { return std::tolower(c); });
  Encoding enc;
  if (fmt == "fhwc" || fmt == "fchw" || fmt == "tiff" || fmt == "png") {
    enc = parse_encoding(fmt);
  } else if (fmt == "wav") {
    enc = parse_encoding("wav_" + a.depth);
  } else {
    throw UsageError("unsupported format '" + a.format + "' (expected fhwc, fchw, tiff, png or wav)");
  }
  if (a.filter < 0 || a.filter > 2) throw UsageError("--filter must be 0, 1 or 2");
  if (!std::filesystem::is_directory(a.input_dir)) throw IoError("input directory " + a.input_dir + " does not exist");
  std::vector<std::filesystem::path> inputs;
  for (const auto& entry : std::filesystem::directory_iterator(a.input_dir)) {
    if (entry.is_regular_file()) inputs.push_back(entry.path());
  }
  std::sort(inputs.begin(), inputs.end());
  if (inputs.empty()) throw DataError("no input files in " + a.input_dir);
  std::filesystem::create_directories(a.output_dir);
  EncodeOptions opts;
  opts.encoding = enc;
  opts.png_filter = a.filter;
  std::size_t total = 0, smallest = SIZE_MAX, largest = 0;
  for (const auto& path : inputs) {
    const Sample sample = load_sample(path);
    ByteSequence seq;
    if (const auto* img = std::get_if<ImageTensor>(&sample)) {
      if (is_wav(enc)) throw DataError(path.string() + ": wav format needs audio input");
      seq = encode_image(a.size ? center_crop(*img, a.size) : *img, opts);
    } else {
      if (!is_wav(enc)) throw DataError(path.string() + ": format " + a.format + " needs image input");
      seq = encode_wav(std::get<AudioClip>(sample), wav_depth(enc));
    }
    write_file_bytes(std::filesystem::path(a.output_dir) / (path.stem().string() + extension_for(enc)), seq.bytes);
    total += seq.size();
    smallest = std::min(smallest, seq.size());
    largest = std::max(largest, seq.size());
  }
  out << "encoded " << inputs.size() << " files as " << to_string(enc) << ": E[S]=" << std::fixed
      << std::setprecision(1) << static_cast<double>(total) / static_cast<double>(inputs.size())
      << " min=" << smallest << " max=" << largest << "\n";
  return 0;
}

inline nlohmann::json metrics_json(const EvalMetrics& m) {
  nlohmann::json j;
  j["count"] = m.count;
  j["top1"] = m.top1();
  j["loss"] = m.loss;
  std::vector<double> per_class;
  for (std::size_t c = 0; c < m.confusion.size(); ++c) per_class.push_back(m.class_accuracy(c));
  j["per_class_top1"] = per_class;
  j["confusion"] = m.confusion;
  return j;
}

inline Config with_seed_override(Config cfg) {
  if (const char* env = std::getenv("BYTEFORMER_SEED")) {
    Config probe(std::map<std::string, std::string>{{"BYTEFORMER_SEED", env}});
    cfg.set("seed", std::to_string(probe.get_uint("BYTEFORMER_SEED")));
  }
  return cfg;
}

inline int cmd_train(const TrainArgs& a, std::ostream& out) {
  Config cfg = with_seed_override(Config::load(a.config));
  cfg.require_known(config_schema());
  cfg.erase("train.step");
  const ByteFormerConfig model_cfg = model_config_from(cfg);
  const TrainConfig train_cfg = train_config_from(cfg);
  const DataConfig data_cfg = data_config_from(cfg);
  const std::string ckpt_path = !a.checkpoint.empty() ? a.checkpoint : cfg.get_string("output.checkpoint", "byteformer.ckpt");
  const std::string metrics_path = !a.metrics.empty() ? a.metrics : cfg.get_string("output.metrics", "metrics.jsonl");

  TrainState<float> state;
  if (!a.resume.empty()) {
    const Checkpoint prior = load_checkpoint(a.resume);
    const ByteFormerConfig prior_model = model_config_from(Config::parse(prior.config_text, a.resume));
    if (prior_model.to_text() != model_cfg.to_text()) {
      throw ConfigError("checkpoint " + a.resume + " was trained with a different model configuration");
    }
    state = train_state_from_checkpoint<float>(prior, model_cfg);
    if (train_cfg.ema_enabled && !state.has_ema()) state.ema = clone_params(model_cfg, state.params, false);
  } else {
    state = make_train_state<float>(model_cfg, train_cfg);
  }
  const Datasets data = build_datasets(data_cfg, train_cfg.seed);

  std::ofstream metrics(metrics_path, a.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!metrics) throw IoError("cannot write metrics " + metrics_path);
  TrainHooks hooks;
  double loss_sum = 0;
  std::size_t loss_count = 0;
  const std::size_t log_every = train_cfg.eval_every ? train_cfg.eval_every : 50;
  hooks.on_step = [&](const StepRecord& r) {
    loss_sum += r.loss;
    loss_count += 1;
    if (r.step % log_every == 0 || r.step == train_cfg.total_iters) {
      nlohmann::json j{{"step", r.step}, {"split", "train"}, {"loss", loss_sum / static_cast<double>(loss_count)},
                       {"lr", r.lr}};
      metrics << j.dump() << "\n";
      loss_sum = 0;
      loss_count = 0;
    }
  };
  hooks.on_eval = [&](const EvalRecord& r) {
    nlohmann::json j = metrics_json(r.metrics);
    j["step"] = r.step;
    j["split"] = "val";
    metrics << j.dump() << "\n" << std::flush;
  };
  const EvalMetrics final_metrics =
      train(state, *data.train, *data.val, data.pipeline, data.pipeline, model_cfg, train_cfg, data_cfg.max_input_bytes, hooks);
  save_checkpoint(ckpt_path, make_checkpoint(cfg, state));
  out << "step " << state.step << " val top1 " << std::fixed << std::setprecision(4) << final_metrics.top1()
      << " loss " << final_metrics.loss << " checkpoint " << ckpt_path << "\n";
  return 0;
}

inline int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  const Config stored = Config::parse(ckpt.config_text, a.checkpoint);
  const ByteFormerConfig model_cfg = model_config_from(stored);
  Config data_source = stored;
  if (!a.data.empty()) {
    data_source = Config::load(a.data);
    data_source.require_known(config_schema());
    if (data_source.has("num_classes") && data_source.get_uint("num_classes") != model_cfg.num_classes) {
      throw ConfigError("data config has num_classes " + data_source.get_string("num_classes") +
                        " but the checkpoint was trained with " + std::to_string(model_cfg.num_classes));
    }
    data_source.set("num_classes", std::to_string(model_cfg.num_classes));
  }
  data_source = with_seed_override(data_source);
  DataConfig data_cfg = data_config_from(data_source);
  if (!a.byte_order.empty()) data_cfg.order = parse_order_kind(a.byte_order);
  if (a.camera) {
    if (data_cfg.kind != "images" && data_cfg.kind != "manifest") {
      throw ConfigError("--camera needs image data, but data.kind is " + data_cfg.kind);
    }
    CameraSpec cam;
    cam.keep_fraction = *a.camera;
    cam.validate();
    data_cfg.camera = cam;
  }
  const std::uint64_t seed = data_source.get_uint("seed", 0);
  Datasets data = build_datasets(data_cfg, seed);
  ByteFormerParams<float> params = eval_params_from_checkpoint<float>(ckpt, model_cfg);
  if (a.phi) {
    const PermutationMap phi = gen_permutation(*a.phi);
    if (data.pipeline.phi) {
      PermutationMap composed = phi;
      for (int i = 0; i < 256; ++i) composed.forward[i] = phi.forward[data.pipeline.phi->forward[i]];
      for (int i = 0; i < 256; ++i) composed.inverse[composed.forward[i]] = static_cast<std::uint8_t>(i);
      data.pipeline.phi = composed;
    } else {
      data.pipeline.phi = phi;
    }
    params.token_embedding = reindex_embedding(params.token_embedding, phi);
  }
  const TrainConfig train_cfg = train_config_from(data_source);
  const EvalMetrics m = evaluate(params, *data.val, data.pipeline, model_cfg,
                                 EvalOptions{train_cfg.batch_size, data_cfg.max_input_bytes, seed});
  nlohmann::json j = metrics_json(m);
  j["checkpoint"] = a.checkpoint;
  out << j.dump() << "\n";
  return 0;
}

inline int cmd_analyze(const AnalyzeArgs& a, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  const ByteFormerConfig model_cfg = model_config_from(Config::parse(ckpt.config_text, a.checkpoint));
  const ByteFormerParams<float> params = eval_params_from_checkpoint<float>(ckpt, model_cfg);
  const EmbeddingAnalysis analysis = analyze_embeddings(params.token_embedding, params.positional);
  write_analysis(a.prefix, analysis);
  out << "token |cos| off-diagonal mean " << std::fixed << std::setprecision(4) << analysis.tokens.off_diagonal_mean()
      << ", positional " << analysis.positions.off_diagonal_mean() << "\n";
  return 0;
}

}  // namespace cli

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Byte-level transformer classifier"};
  app.name("byteformer");
  app.require_subcommand(1);

  cli::EncodeArgs encode_args;
  auto* encode = app.add_subcommand("encode", "Encode every image or audio file in a directory");
  encode->add_option("input_dir", encode_args.input_dir, "Directory of decodable inputs")->required();
  encode->add_option("output_dir", encode_args.output_dir, "Directory for encoded files")->required();
  encode->add_option("--format", encode_args.format, "fhwc, fchw, tiff, png or wav")->required();
  encode->add_option("--filter", encode_args.filter, "PNG row filter (0 none, 1 sub, 2 up)");
  encode->add_option("--depth", encode_args.depth, "WAV sample depth: u8, i16, i32 or f32");
  encode->add_option("--size", encode_args.size, "Centre-crop images to this side length first");

  cli::TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train from a key=value or JSON config");
  train_cmd->add_option("config", train_args.config, "Config file")->required();
  train_cmd->add_option("--checkpoint", train_args.checkpoint, "Output checkpoint path");
  train_cmd->add_option("--metrics", train_args.metrics, "Metrics JSON-lines path");
  train_cmd->add_option("--resume", train_args.resume, "Continue from this checkpoint");

  cli::EvalArgs eval_args;
  std::uint64_t phi_seed = 0;
  double camera = 1.0;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on its validation set");
  eval_cmd->add_option("checkpoint", eval_args.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--data", eval_args.data, "Config whose data.* keys define the evaluation set");
  auto* phi_opt = eval_cmd->add_option("--phi", phi_seed, "Obfuscate inputs with this permutation seed");
  auto* camera_opt = eval_cmd->add_option("--camera", camera, "Masked-capture keep fraction in (0, 1]");
  eval_cmd->add_option("--byte-order", eval_args.byte_order, "Byte-order transform applied to inputs");

  cli::AnalyzeArgs analyze_args;
  auto* analyze = app.add_subcommand("analyze-embeddings", "Write |cos| matrices of token and positional embeddings");
  analyze->add_option("checkpoint", analyze_args.checkpoint, "Checkpoint file")->required();
  analyze->add_option("out_prefix", analyze_args.prefix, "Output path prefix")->required();

  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
      out << app.help();
      return 0;
    } catch (const CLI::CallForAllHelp&) {
      out << app.help("", CLI::AppFormatMode::All);
      return 0;
    } catch (const CLI::ParseError& e) {
      throw UsageError(e.what());
    }
    if (*phi_opt) eval_args.phi = phi_seed;
    if (*camera_opt) eval_args.camera = camera;
    if (*encode) return cli::cmd_encode(encode_args, out);
    if (*train_cmd) return cli::cmd_train(train_args, out);
    if (*eval_cmd) return cli::cmd_eval(eval_args, out);
    return cli::cmd_analyze(analyze_args, out);
  } catch (const Error& e) {
    std::string line = e.what();
    std::replace(line.begin(), line.end(), '\n', ' ');
    err << "error: " << line << "\n";
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::data);
  }
}

}  // namespace byteformer
