// Acceptance run: one PASS/FAIL line per criterion. Optional arguments select
// criteria by number, e.g. `acceptance 1 3 10`.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>

#include "byteformer/checkpoint.hpp"
#include "byteformer/experiment.hpp"

using namespace byteformer;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(precision) << v;
  return out.str();
}

std::string sci(double v) {
  std::ostringstream out;
  out << std::scientific << std::setprecision(2) << v;
  return out.str();
}

ByteFormerConfig tiny_config() {
  ByteFormerConfig cfg;
  cfg.embed_dim = 16;
  cfg.depth = 2;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  cfg.conv_kernel = 4;
  cfg.window_size = 8;
  cfg.downsample_after = {0};
  cfg.max_tokens = 64;
  cfg.num_classes = 4;
  return cfg;
}

LabeledBytes random_bytes(std::size_t n, Rng& rng) {
  std::vector<std::uint8_t> bytes(n);
  for (auto& b : bytes) b = static_cast<std::uint8_t>(bounded(rng, 256));
  return {{std::move(bytes), Encoding::RAW}, static_cast<int>(bounded(rng, 4))};
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
  }
  return worst;
}

struct RunResult {
  EvalMetrics metrics;
  double seconds = 0;
  std::size_t steps = 0;
};

// Trains from a config file, with key overrides, and evaluates on its validation split.
RunResult train_config(const std::string& name, const std::map<std::string, std::string>& overrides = {}) {
  Config cfg = Config::load(std::string(BYTEFORMER_SOURCE_DIR) + "/configs/" + name);
  for (const auto& [k, v] : overrides) cfg.set(k, v);
  cfg.require_known(config_schema());
  const auto model_cfg = model_config_from(cfg);
  const auto train_cfg = train_config_from(cfg);
  const auto data_cfg = data_config_from(cfg);
  const auto start = Clock::now();
  const Datasets data = build_datasets(data_cfg, train_cfg.seed);
  auto state = make_train_state<float>(model_cfg, train_cfg);
  RunResult r;
  r.metrics = train(state, *data.train, *data.val, data.pipeline, data.pipeline, model_cfg, train_cfg,
                    data_cfg.max_input_bytes);
  r.seconds = seconds_since(start);
  r.steps = state.step;
  return r;
}

// ---------------------------------------------------------------------------

Outcome phi_equivalence() {
  const auto start = Clock::now();
  auto cfg = tiny_config();
  cfg.conv_kernel = 8;
  cfg.window_size = 16;
  TrainConfig tc;
  tc.total_iters = 30;
  tc.warmup_iters = 5;
  tc.batch_size = 8;
  tc.lr_max = 3e-3;
  tc.seed = 1;
  SyntheticSpec spec;
  spec.length = 256;
  spec.motif_length = 16;
  spec.motif_count = 4;
  Rng data_rng(2);
  BytesSource train_set(make_synthetic(spec, 64, data_rng));
  auto state = make_train_state<float>(cfg, tc);
  for (std::size_t i = 0; i < tc.total_iters; ++i) {
    train_step(state, training_batch(state, train_set, Pipeline{}, tc, 256), cfg, tc);
  }
  const auto params32 = state.params;
  const auto params64 = cast_params<double>(cfg, params32, false);

  Rng rng(3);
  std::vector<LabeledBytes> inputs;
  for (int i = 0; i < 100; ++i) inputs.push_back(random_bytes(64 + bounded(rng, 193), rng));
  double worst64 = 0, worst32 = 0;
  for (std::uint64_t p = 0; p < 10; ++p) {
    const auto phi = gen_permutation(mix_seed({p, 0x706869}));
    auto obf32 = params32;
    obf32.token_embedding = reindex_embedding(params32.token_embedding, phi);
    auto obf64 = params64;
    obf64.token_embedding = reindex_embedding(params64.token_embedding, phi);
    for (std::size_t start_i = 0; start_i < inputs.size(); start_i += 25) {
      std::vector<LabeledBytes> plain(inputs.begin() + static_cast<std::ptrdiff_t>(start_i),
                                      inputs.begin() + static_cast<std::ptrdiff_t>(start_i + 25));
      std::vector<LabeledBytes> hidden;
      for (const auto& s : plain) hidden.push_back({obfuscate(s.seq, phi, 0, rng), s.label});
      const Batch a = collate(plain, 256), b = collate(hidden, 256);
      worst64 = std::max(worst64, max_abs_diff(forward(a, params64, cfg), forward(b, obf64, cfg)));
      worst32 = std::max(worst32, max_abs_diff(forward(a, params32, cfg), forward(b, obf32, cfg)));
    }
  }
  const double secs = seconds_since(start);
  return {worst64 == 0.0 && worst32 <= 1e-6 && secs < 60,
          "100 inputs x 10 phi; max |diff| f64 " + fmt(worst64, 1) + ", f32 " + sci(worst32) + " (" +
              fmt(secs, 1) + " s)"};
}

Outcome token_length_law() {
  struct Row {
    std::size_t bytes, kernel, expected;
    bool exact;
    const char* what;
  };
  // Inexact rows allow a difference of one token.
  const std::vector<Row> rows = {
      {150528, 32, 9407, true, "fHWC/fCHW"},
      {150668, 32, 9415, true, "TIFF"},
      {48564, 8, 12140, true, "JPEG"},
      {camera_kept_count(224, 224, 0.25), 8, 9407, true, "camera f=0.25"},
      {camera_kept_count(224, 224, 0.05), 4, 3762, true, "camera f=0.05"},
      {camera_kept_count(224, 224, 0.1), 4, 7524, false, "camera f=0.1"},
      {64058, 32, 4002, true, "W-FP32"},
      {32044, 16, 4003, false, "W-INT16"},
  };
  bool ok = true;
  std::string detail;
  for (const auto& r : rows) {
    const std::size_t got = token_length(r.bytes, r.kernel);
    const std::size_t gap = got > r.expected ? got - r.expected : r.expected - got;
    const bool row_ok = r.exact ? gap == 0 : gap <= 1;
    ok = ok && row_ok;
    detail += std::string(detail.empty() ? "" : ", ") + r.what + " " + std::to_string(got) + (r.exact ? "=" : "~") +
              std::to_string(r.expected);
  }
  std::size_t len = 9415;
  for (int i = 0; i < 6; ++i) len = (len + 1) / 2;
  ok = ok && len == 148;
  return {ok, detail + ", 6 downsamples 9415->" + std::to_string(len)};
}

Outcome wav_lengths() {
  AudioClip clip;
  Rng rng(4);
  for (int i = 0; i < 16000; ++i) clip.samples.push_back(uniform01(rng) * 2 - 1);
  const std::size_t u8 = encode_wav(clip, WavDepth::U8).size(), i16 = encode_wav(clip, WavDepth::I16).size(),
                    i32 = encode_wav(clip, WavDepth::I32).size(), f32 = encode_wav(clip, WavDepth::F32).size();
  return {u8 == 16044 && i16 == 32044 && i32 == 64044 && f32 == 64058,
          "U8 " + std::to_string(u8) + ", I16 " + std::to_string(i16) + ", I32 " + std::to_string(i32) + ", F32 " +
              std::to_string(f32)};
}

Outcome codec_round_trips() {
  const auto start = Clock::now();
  Rng rng(5);
  std::size_t failures = 0;
  for (int i = 0; i < 50; ++i) {
    ImageTensor img(1 + bounded(rng, 64), 1 + bounded(rng, 64));
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(bounded(rng, 256));
    failures += decode_fhwc(encode_fhwc(img).bytes, img.height, img.width) != img;
    failures += decode_fchw(encode_fchw(img).bytes, img.height, img.width) != img;
    failures += decode_tiff(encode_tiff(img).bytes) != img;
    for (int f : {0, 1, 2}) failures += decode_png(encode_png(img, f).bytes) != img;
  }
  for (auto depth : {WavDepth::U8, WavDepth::I16, WavDepth::I32, WavDepth::F32}) {
    const double scale = depth == WavDepth::U8 ? 128.0 : depth == WavDepth::I16 ? 32768.0 : 2147483648.0;
    for (int i = 0; i < 50; ++i) {
      AudioClip clip;
      for (std::size_t n = 1 + bounded(rng, 4000); n > 0; --n) {
        const double x = uniform01(rng) * 2 - 1;
        clip.samples.push_back(depth == WavDepth::F32 ? static_cast<float>(x) : std::floor(x * scale) / scale);
      }
      failures += decode_wav(encode_wav(clip, depth).bytes).clip != clip;
    }
  }
  const std::string command = std::string("\"") + BYTEFORMER_PYTHON + "\" \"" + BYTEFORMER_SOURCE_DIR +
                              "/tests/reference_interop.py\" \"" + BYTEFORMER_CLI + "\" \"" + BYTEFORMER_BINARY_DIR +
                              "/acceptance_interop\" > \"" + BYTEFORMER_BINARY_DIR + "/acceptance_interop.log\" 2>&1";
  const int status = std::system(command.c_str());
  const double secs = seconds_since(start);
  return {failures == 0 && status == 0 && secs < 60,
          std::to_string(failures) + " own-decoder mismatches over 300 images and 200 clips; reference decoders " +
              (status == 0 ? "agree" : "DISAGREE (see acceptance_interop.log)") + " (" + fmt(secs, 1) + " s)"};
}

Outcome gradient_correctness() {
  const auto start = Clock::now();
  const auto cfg = tiny_config();
  auto params = init_params<double>(cfg, 6, true);
  Rng rng(6);
  std::vector<LabeledBytes> s{random_bytes(64, rng), random_bytes(64, rng)};
  const Batch batch = collate(s, 64);
  std::vector<std::pair<std::string, Tensor<double>>> named;
  for (const auto& p : params.named()) named.emplace_back(p.name, p.tensor);
  GradcheckOptions opts;
  opts.max_coords_per_tensor = 64;
  const auto report =
      gradcheck([&] { return softmax_cross_entropy(forward(batch, params, cfg), batch.labels); }, named, opts);
  std::string worst_name;
  double worst = 0;
  for (const auto& e : report.entries) {
    if (e.max_rel_error >= worst) {
      worst = e.max_rel_error;
      worst_name = e.name;
    }
  }
  const double secs = seconds_since(start);
  return {report.entries.size() == named.size() && worst < 1e-4 && secs < 120,
          std::to_string(named.size()) + " tensors, worst relative error " + sci(worst) + " (" + worst_name +
              ", " + fmt(secs, 1) + " s)"};
}

Outcome attention_equivalence() {
  Rng rng(7);
  double window_gap = 0, padding_gap = 0;
  auto cfg = tiny_config();
  cfg.window_size = 64;
  const auto params = init_params<float>(cfg, 7, false);
  for (std::size_t block = 0; block < cfg.depth; ++block) {
    TokenState<float> state{Tensor<float>::randn({3, 40, 16}, rng), std::vector<std::uint8_t>(120, 1)};
    for (std::size_t j = 25; j < 40; ++j) state.mask[40 + j] = 0;
    cfg.attention = AttentionKind::window;
    const auto windowed = attention_block(state, params.blocks[block], block, cfg);
    cfg.attention = AttentionKind::full;
    const auto full = attention_block(state, params.blocks[block], block, cfg);
    window_gap = std::max(window_gap, max_abs_diff(windowed.tokens, full.tokens));
  }
  for (auto kind : {AttentionKind::full, AttentionKind::window, AttentionKind::bag}) {
    auto pcfg = tiny_config();
    pcfg.attention = kind;
    const auto p = init_params<float>(pcfg, 8, false);
    for (int trial = 0; trial < 10; ++trial) {
      const auto sample = random_bytes(8 + bounded(rng, 50), rng);
      const std::vector<LabeledBytes> alone{sample}, padded{sample, random_bytes(64, rng)};
      const auto a = forward(collate(alone, 64), p, pcfg);
      const auto b = forward(collate(padded, 64), p, pcfg);
      for (std::size_t c = 0; c < pcfg.num_classes; ++c) {
        padding_gap = std::max(padding_gap, std::abs(static_cast<double>(a.data()[c] - b.data()[c])));
      }
    }
  }
  return {window_gap <= 1e-5 && padding_gap <= 1e-5,
          "window(w=64) vs full per block " + sci(window_gap) + ", padding invariance " + sci(padding_gap) + " (f32)"};
}

const std::vector<std::pair<std::string, std::map<std::string, std::string>>>& order_runs() {
  static const std::vector<std::pair<std::string, std::map<std::string, std::string>>> runs = {
      {"baseline", {}},
      {"random_shuffle", {{"data.byte_order", "random_shuffle"}}},
      {"window_shuffle", {{"data.byte_order", "window_shuffle"}, {"data.order_window", "256"}}},
      {"cyclic", {{"data.byte_order", "cyclic"}}},
      {"reverse", {{"data.byte_order", "reverse"}}},
  };
  return runs;
}

std::map<std::string, RunResult>& order_results() {
  static std::map<std::string, RunResult> results;
  return results;
}

const RunResult& order_result(const std::string& kind) {
  auto& results = order_results();
  if (!results.count(kind)) {
    for (const auto& [name, overrides] : order_runs()) {
      if (name == kind) results[kind] = train_config("locality.conf", overrides);
    }
  }
  return results.at(kind);
}

Outcome desk_learning() {
  const auto& r = order_result("baseline");
  return {r.metrics.top1() >= 0.95 && r.steps <= 2000 && r.seconds < 600,
          "locality val top1 " + fmt(r.metrics.top1()) + " on " + std::to_string(r.metrics.count) + " samples after " +
              std::to_string(r.steps) + " steps (" + fmt(r.seconds, 1) + " s)"};
}

Outcome byte_order_direction() {
  std::map<std::string, double> acc;
  double secs = 0;
  for (const auto& [name, overrides] : order_runs()) {
    acc[name] = order_result(name).metrics.top1();
    secs += order_result(name).seconds;
  }
  const double best = std::min({acc["cyclic"], acc["reverse"], acc["baseline"]});
  const bool ordering = acc["random_shuffle"] < acc["window_shuffle"] && acc["window_shuffle"] < best;
  const bool close = std::abs(acc["cyclic"] - acc["baseline"]) <= 0.05 && std::abs(acc["reverse"] - acc["baseline"]) <= 0.05;
  std::string detail;
  for (const auto& [name, overrides] : order_runs()) detail += name + " " + fmt(acc[name], 3) + ", ";
  return {ordering && close, detail + "window 256 (" + fmt(secs, 1) + " s total)"};
}

Outcome camera_masking() {
  Rng rng(9);
  ImageTensor img(224, 224);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(bounded(rng, 256));
  CameraSpec full;
  full.keep_fraction = 1.0;
  bool ok = camera_capture(img, full, rng) == encode_fhwc(img);
  std::string lengths;
  for (double f : {0.75, 0.5, 0.25, 0.1, 0.05, 0.03}) {
    CameraSpec spec;
    spec.keep_fraction = f;
    const std::size_t got = camera_capture(img, spec, rng).size();
    const auto expected = static_cast<std::size_t>(std::llround(f * 150528.0));
    ok = ok && got == expected;
    lengths += (lengths.empty() ? "" : "/") + std::to_string(got);
  }
  const auto r = train_config("camera.conf");
  const auto& confusion = r.metrics.confusion;
  std::size_t majority = 0;
  for (const auto& row : confusion) majority = std::max<std::size_t>(majority, std::accumulate(row.begin(), row.end(), std::size_t{0}));
  const double baseline = static_cast<double>(majority) / static_cast<double>(r.metrics.count);
  const bool learned = r.metrics.top1() >= baseline + 0.20;
  return {ok && learned, "f=1 identity " + std::string(ok ? "ok" : "BROKEN") + ", lengths " + lengths +
                             "; f=0.5 val top1 " + fmt(r.metrics.top1()) + " vs majority " + fmt(baseline) + " (" +
                             fmt(r.seconds, 1) + " s)"};
}

Outcome schedule_endpoints() {
  TrainConfig cfg;
  const double a = lr_at(0, cfg), b = lr_at(cfg.warmup_iters, cfg), c = lr_at(cfg.total_iters, cfg);
  std::ostringstream detail;
  detail << "lr_at(0)=" << a << ", lr_at(" << cfg.warmup_iters << ")=" << b << ", lr_at(" << cfg.total_iters << ")=" << c;
  return {a == 0.0 && b == 1e-3 && c == 2e-5, detail.str()};
}

Outcome not_reproducible() {
  return {true,
          "stated: ImageNet 77.33% (TIFF), Speech Commands 95.8% (W-FP32) and A100 throughput are out of desk-scale "
          "reach; stand-ins are criteria 2, 3, 7 and 8"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"phi-equivalence", phi_equivalence},
      {"token-length law", token_length_law},
      {"WAV header arithmetic", wav_lengths},
      {"codec round-trips", codec_round_trips},
      {"gradient correctness", gradient_correctness},
      {"attention equivalence", attention_equivalence},
      {"desk-scale learning", desk_learning},
      {"byte-order direction", byte_order_direction},
      {"camera masking", camera_masking},
      {"schedule endpoints", schedule_endpoints},
      {"not reproducible, stated", not_reproducible},
  };
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::strtoul(argv[i], nullptr, 10));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected.empty() && !selected.count(i + 1)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << "criterion " << std::setw(2) << i + 1 << " " << (o.pass ? "PASS" : "FAIL") << "  " << criteria[i].first
              << ": " << o.detail << std::endl;
  }
  return failed ? 1 : 0;
}
