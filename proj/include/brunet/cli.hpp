#pragma once

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "brunet/archive.hpp"
#include "brunet/checkpoint.hpp"
#include "brunet/datapipe.hpp"
#include "brunet/gradcheck.hpp"
#include "brunet/model.hpp"
#include "brunet/pgm.hpp"
#include "brunet/training.hpp"

namespace brunet::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kNumericFailure = 3 };

inline std::uint64_t fnv1a(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Record of one command invocation, written atomically when the command finishes.
class RunManifest {
 public:
  RunManifest(std::string command, std::vector<std::string> argv) : start_(std::chrono::steady_clock::now()) {
    j_["command"] = std::move(command);
    j_["argv"] = std::move(argv);
    j_["config"] = nlohmann::json::object();
    j_["inputs"] = nlohmann::json::array();
    j_["outputs"] = nlohmann::json::array();
  }

  nlohmann::json& config() { return j_["config"]; }
  void seed(std::uint64_t s) { j_["seed"] = s; }

  void input(const std::filesystem::path& p) { j_["inputs"].push_back(file_entry(p)); }
  void output(const std::filesystem::path& p) { j_["outputs"].push_back(file_entry(p)); }
  void image(const std::filesystem::path& p, const PgmScale& s) {
    auto e = file_entry(p);
    e["scale_min"] = s.min;
    e["scale_max"] = s.max;
    j_["outputs"].push_back(std::move(e));
  }
  void set(const std::string& key, nlohmann::json v) { j_[key] = std::move(v); }

  void write(const std::filesystem::path& p) {
    j_["wall_time_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    const std::string text = j_.dump(2) + "\n";
    write_file_atomic(p, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }

 private:
  static nlohmann::json file_entry(const std::filesystem::path& p) {
    const auto bytes = read_file(p);
    return {{"path", p.string()}, {"bytes", bytes.size()}, {"fnv1a64", hex64(fnv1a(bytes))}};
  }

  nlohmann::json j_;
  std::chrono::steady_clock::time_point start_;
};

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  write_file_atomic(p, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::filesystem::path sibling(const std::filesystem::path& p, const std::string& suffix) {
  return p.string() + suffix;
}

/// "1..6" or "1,2,4".
inline std::vector<std::size_t> parse_horizons(const std::string& s) {
  std::vector<std::size_t> out;
  try {
    if (const auto dots = s.find(".."); dots != std::string::npos) {
      const std::size_t a = std::stoull(s.substr(0, dots));
      const std::size_t b = std::stoull(s.substr(dots + 2));
      if (a < 1 || b < a) throw InvalidArgument("bad horizon range '" + s + "'");
      for (std::size_t h = a; h <= b; ++h) out.push_back(h);
    } else {
      std::stringstream ss(s);
      for (std::string item; std::getline(ss, item, ',');) out.push_back(std::stoull(item));
    }
  } catch (const std::logic_error&) {
    throw InvalidArgument("bad horizon list '" + s + "'");
  }
  if (out.empty()) throw InvalidArgument("empty horizon list");
  return out;
}

inline std::string substitute_horizon(std::string pattern, std::size_t h) {
  const std::string key = "{h}";
  for (auto pos = pattern.find(key); pos != std::string::npos; pos = pattern.find(key, pos))
    pattern.replace(pos, key.size(), std::to_string(h));
  return pattern;
}

inline std::string metrics_csv_header() { return "horizon_minutes,mse,mse_binarized,accuracy,precision,recall\n"; }

inline std::string metrics_csv_row(double horizon_minutes, const MetricsReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", horizon_minutes, r.mse, r.mse_binarized,
                r.accuracy, r.precision, r.recall);
  return buf;
}

inline nlohmann::json model_config_json(const ModelConfig& c) {
  return {{"arch", to_string(c.arch)},     {"lags", c.lags},
          {"height", c.height},            {"width", c.width},
          {"features", c.features},        {"base_filters", c.base_filters},
          {"dropout_rate", c.dropout_rate}, {"factorized", c.factorized},
          {"head", to_string(c.head)},     {"aspp_rates", c.aspp.dilation_rates}};
}

inline std::string format_layer_table(const ParamCount& pc) {
  std::string out;
  char buf[512];
  std::snprintf(buf, sizeof buf, "%-40s %-12s %-10s %6s %6s %-18s %12s\n", "layer", "kind", "kernel", "in", "out",
                "output", "params");
  out += buf;
  for (const auto& r : pc.layers) {
    std::snprintf(buf, sizeof buf, "%-40s %-12s %-10s %6zu %6zu %-18s %12zu\n", r.name.c_str(), r.kind.c_str(),
                  r.kernel.c_str(), r.in_channels, r.out_channels, r.output_shape.str().c_str(), r.params);
    out += buf;
  }
  return out;
}

// -- subcommands ---------------------------------------------------------------------------

struct SynthGenArgs {
  std::string out;
  SynthConfig synth;
  std::size_t hw = 32;
};

inline int cmd_synth_gen(SynthGenArgs a, RunManifest& run) {
  a.synth.height = a.synth.width = a.hw;
  const FrameSequence seq = synth_advection(a.synth);
  save_frames(a.out, seq);
  run.seed(a.synth.seed);
  run.config() = {{"height", a.synth.height},         {"width", a.synth.width},
                  {"frames", a.synth.n_frames},       {"blobs", a.synth.n_blobs},
                  {"velocity_y", a.synth.velocity_y}, {"velocity_x", a.synth.velocity_x},
                  {"blob_sigma", a.synth.blob_sigma}};
  run.output(a.out);
  run.output(manifest_path_for(a.out));
  run.write(sibling(a.out, ".run.json"));
  std::cout << "wrote " << seq.size() << " frames to " << a.out << "\n";
  return kOk;
}

struct PreprocessArgs {
  std::string task;
  std::string in;
  std::string out;
  double rain_fraction = 0.5;
  std::optional<std::int64_t> train_end;
  std::optional<double> norm_factor;
  std::size_t out_size = 256;
};

/// Raw cloud inputs: archive with u8 "labels" (N,H,W) and f32 "lat", "lon" (H,W).
inline int cmd_preprocess(const PreprocessArgs& a, RunManifest& run) {
  FrameSequence out;
  if (a.task == "precip") {
    PrecipOptions opt;
    opt.rain_fraction = a.rain_fraction;
    opt.train_end = a.train_end;
    opt.norm_factor = a.norm_factor;
    out = precip_preprocess(load_frames(a.in), opt);
    run.config() = {{"task", a.task}, {"rain_fraction", a.rain_fraction}};
    if (a.train_end) run.config()["train_end"] = *a.train_end;
  } else {
    const auto records = archive_load(a.in);
    const Record& lr = find_record(records, "labels");
    if (lr.dims.size() != 3) throw FormatError("'labels' record must be (N,H,W)", 0);
    const auto labels = lr.values<std::uint8_t>();
    const std::size_t n = lr.dims[0], h = lr.dims[1], w = lr.dims[2];
    std::vector<LabelImage> raw;
    for (std::size_t i = 0; i < n; ++i)
      raw.push_back({h, w, std::vector<std::uint8_t>(labels.begin() + static_cast<std::ptrdiff_t>(i * h * w),
                                                     labels.begin() + static_cast<std::ptrdiff_t>((i + 1) * h * w))});
    GridMapping grid{find_record(records, "lat").tensor<float>(), find_record(records, "lon").tensor<float>()};
    CloudOptions opt;
    opt.out_size = a.out_size;
    out = cloud_preprocess(raw, grid, opt);
    run.config() = {{"task", a.task}, {"out_size", a.out_size}};
  }
  save_frames(a.out, out);
  run.input(a.in);
  run.output(a.out);
  run.output(manifest_path_for(a.out));
  run.write(sibling(a.out, ".run.json"));
  std::cout << "kept " << out.size() << " frames; norm_factor " << out.manifest.norm_factor << ", threshold "
            << out.manifest.threshold_mean << "\n";
  return kOk;
}

struct MakeSamplesArgs {
  std::string in;
  std::string out;
  std::size_t lags = 12;
  std::size_t horizon = 6;
  std::optional<std::int64_t> test_start;
  double train_fraction = 0.8;
};

inline int cmd_make_samples(const MakeSamplesArgs& a, RunManifest& run) {
  const SampleSet all = make_samples(load_frames(a.in), a.lags, a.horizon);
  run.input(a.in);
  run.config() = {{"lags", a.lags}, {"horizon", a.horizon}, {"train_fraction", a.train_fraction}};
  if (a.test_start) {
    run.config()["test_start"] = *a.test_start;
    const DatasetSplit split = split_dataset(all, {*a.test_start, a.train_fraction});
    const std::pair<const char*, const SampleSet*> parts[] = {
        {".train", &split.train}, {".val", &split.val}, {".test", &split.test}};
    for (const auto& [suffix, set] : parts) {
      save_samples(sibling(a.out, suffix), *set);
      run.output(sibling(a.out, suffix));
    }
    std::cout << "train " << split.train.size() << ", val " << split.val.size() << ", test " << split.test.size()
              << "\n";
  } else {
    save_samples(a.out, all);
    run.output(a.out);
    std::cout << "wrote " << all.size() << " samples\n";
  }
  run.write(sibling(a.out, ".run.json"));
  return kOk;
}

struct TrainArgs {
  std::string task = "synth";
  std::string train_path;
  std::string val_path;
  std::string out_dir = ".";
  std::string arch = "broad-unet";
  bool factorized = true;
  std::optional<std::size_t> epochs;
  std::optional<double> lr;
  std::optional<std::size_t> batch;
  std::optional<double> dropout;
  std::optional<std::size_t> f0;
  std::uint64_t seed = 0;
  // synthetic task
  std::size_t hw = 32;
  std::size_t lags = 4;
  std::size_t horizon = 1;
  std::size_t n_train = 256;
  std::size_t n_val = 64;
  std::size_t n_test = 64;
};

/// Three independent advection sequences sized to yield exactly the requested sample counts.
inline DatasetSplit synth_split(const TrainArgs& a) {
  auto make = [&](std::size_t count, std::uint64_t salt) {
    SynthConfig sc;
    sc.height = sc.width = a.hw;
    sc.n_frames = count + a.lags + a.horizon - 1;
    sc.seed = mix_seed(a.seed * 4 + salt);
    return make_samples(synth_advection(sc), a.lags, a.horizon);
  };
  return {make(a.n_train, 1), make(a.n_val, 2), make(a.n_test, 3)};
}

inline TrainConfig synth_train_config() { return {LossKind::mse, 1e-3, 1, 15, 0.5, 0, {}}; }

inline int cmd_train(const TrainArgs& a, RunManifest& run) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(a.out_dir, ec);
  if (!fs::is_directory(a.out_dir)) throw IoError("cannot create output directory '" + a.out_dir + "'");
  const fs::path dir(a.out_dir);

  DatasetSplit data;
  TrainConfig tc;
  ModelConfig mc;
  mc.arch = parse_arch(a.arch);
  mc.factorized = a.factorized;
  if (a.task == "synth") {
    data = synth_split(a);
    tc = synth_train_config();
    mc.base_filters = 4;
    save_samples(dir / "test.btar", data.test);
  } else {
    if (a.train_path.empty() || a.val_path.empty()) throw InvalidArgument("--train and --val are required for task " + a.task);
    data.train = load_samples(a.train_path);
    data.val = load_samples(a.val_path);
    run.input(a.train_path);
    run.input(a.val_path);
    tc = a.task == "precip" ? TrainConfig::precipitation() : TrainConfig::cloud();
    tc.max_epochs = 100;
    mc.head = a.task == "precip" ? Head::regression : Head::binary;
  }
  if (data.train.empty()) throw DataError("training set is empty");
  const Shape& is = data.train.samples.front().input.shape();
  mc.lags = is[kTime];
  mc.height = is[kHeight];
  mc.width = is[kWidth];
  mc.features = is[kChannel];
  if (a.f0) mc.base_filters = *a.f0;
  if (a.epochs) tc.max_epochs = *a.epochs;
  if (a.lr) tc.learning_rate = *a.lr;
  if (a.batch) tc.batch_size = *a.batch;
  if (a.dropout) tc.dropout_rate = *a.dropout;
  mc.dropout_rate = tc.dropout_rate;
  // one model per horizon for cloud cover, each with its own seed
  tc.seed = a.task == "cloud" ? a.seed + data.train.horizon : a.seed;
  tc.checkpoint_path = dir / "model.btar";
  mc.validate();

  Model<float> model(mc, BuildOptions{tc.seed, true});
  const auto result = train(model, data.train, data.val, tc, [](const EpochRecord& r) {
    std::printf("epoch %zu train_loss %.6g val_loss %.6g\n", r.epoch, r.train_loss, r.val_loss);
    std::fflush(stdout);
  });
  write_history_csv(dir / "history.csv", result.history);

  run.seed(tc.seed);
  run.config() = model_config_json(mc);
  run.config()["task"] = a.task;
  run.config()["learning_rate"] = tc.learning_rate;
  run.config()["batch_size"] = tc.batch_size;
  run.config()["epochs"] = tc.max_epochs;
  run.config()["loss"] = tc.loss == LossKind::mse ? "mse" : "bce";
  run.set("best_epoch", result.best_epoch);
  run.set("best_val_loss", result.best_val_loss);
  if (a.task == "synth") {
    restore_params(model, result.best_params);
    const double thr = data.test.manifest.threshold_mean;
    const MetricsReport m = evaluate(model, data.test, thr, 1.0);
    const MetricsReport p = evaluate_persistence(data.test, thr, 1.0);
    std::printf("test mse %.6g (persistence %.6g)\n", m.mse, p.mse);
    run.set("test_mse", m.mse);
    run.set("persistence_test_mse", p.mse);
    run.output(dir / "test.btar");
  }
  run.output(dir / "history.csv");
  run.output(tc.checkpoint_path);
  run.write(dir / "run_manifest.json");
  std::printf("best epoch %zu val_loss %.6g\n", result.best_epoch, result.best_val_loss);
  return kOk;
}

struct EvalArgs {
  std::string model;
  std::string test;
  std::string out;
  std::optional<std::string> horizons;
  std::optional<double> threshold;
  bool persistence = false;
};

inline int cmd_eval(const EvalArgs& a, RunManifest& run) {
  std::vector<std::size_t> hs{0};
  if (a.horizons) hs = parse_horizons(*a.horizons);
  std::string csv = metrics_csv_header();
  for (std::size_t h : hs) {
    const std::string test_path = a.horizons ? substitute_horizon(a.test, h) : a.test;
    const SampleSet set = load_samples(test_path);
    run.input(test_path);
    const double thr = a.threshold ? *a.threshold : set.manifest.threshold_mean;
    MetricsReport r;
    if (a.persistence) {
      r = evaluate_persistence(set, thr, set.manifest.norm_factor);
    } else {
      if (a.model.empty()) throw InvalidArgument("--model is required unless --persistence is given");
      const std::string model_path = a.horizons ? substitute_horizon(a.model, h) : a.model;
      const Model<float> m = load_checkpoint<float>(model_path);
      run.input(model_path);
      r = evaluate(m, set, thr, set.manifest.norm_factor);
    }
    csv += metrics_csv_row(static_cast<double>(set.horizon) * set.manifest.cadence_minutes, r);
  }
  run.config() = {{"persistence", a.persistence}};
  if (a.threshold) run.config()["threshold"] = *a.threshold;
  if (a.out.empty()) {
    std::cout << csv;
  } else {
    write_text(a.out, csv);
    run.output(a.out);
    run.write(sibling(a.out, ".run.json"));
  }
  return kOk;
}

struct PredictArgs {
  std::string model;
  std::string samples;
  std::size_t index = 0;
  std::string out;
};

inline int cmd_predict(const PredictArgs& a, RunManifest& run) {
  const Model<float> m = load_checkpoint<float>(a.model);
  const SampleSet set = load_samples(a.samples);
  if (a.index >= set.size())
    throw InvalidArgument("sample index " + std::to_string(a.index) + " out of range (" + std::to_string(set.size()) + ")");
  const Tensor<float> y = predict(m, set.samples[a.index].input);
  const PgmScale s = write_pgm(a.out, y);
  const std::string tensor_out = sibling(a.out, ".btar");
  archive_save(tensor_out, {Record::from_tensor("prediction", y), Record::from_tensor("target", set.samples[a.index].target)});
  run.input(a.model);
  run.input(a.samples);
  run.config() = {{"index", a.index}};
  run.image(a.out, s);
  run.output(tensor_out);
  run.write(sibling(a.out, ".run.json"));
  std::cout << "wrote " << a.out << " (scale " << s.min << " .. " << s.max << ")\n";
  return kOk;
}

struct ParamsArgs {
  std::string arch = "broad-unet";
  bool factorized = true;
  std::size_t t = 12;
  std::size_t hw = 288;
  std::size_t f0 = 64;
  std::size_t features = 1;
};

inline int cmd_params(const ParamsArgs& a, RunManifest&) {
  ModelConfig c;
  c.arch = parse_arch(a.arch);
  c.factorized = a.factorized;
  c.lags = a.t;
  c.height = c.width = a.hw;
  c.base_filters = a.f0;
  c.features = a.features;
  c.validate();
  const Model<float> m(c, BuildOptions{0, false});
  const ParamCount pc = count_params(m);
  std::cout << format_layer_table(pc);
  std::cout << "output_shape " << m.traced_output_shape().str() << "\n";
  std::cout << "total_params " << pc.total << "\n";
  return kOk;
}

struct GradCheckArgs {
  std::string arch = "broad-unet-mini";
  double tol = 1e-4;
  std::uint64_t seed = 0;
  std::size_t samples = 0;
};

inline ModelConfig mini_config(Arch arch) {
  ModelConfig c;
  c.arch = arch;
  c.lags = 2;
  c.height = c.width = 16;
  c.base_filters = 2;
  return c;
}

inline int cmd_grad_check(const GradCheckArgs& a, RunManifest& run) {
  Arch arch;
  if (a.arch == "broad-unet-mini") arch = Arch::broad_unet;
  else if (a.arch == "plain-unet-mini") arch = Arch::plain_unet;
  else throw InvalidArgument("unknown grad-check architecture '" + a.arch + "'");
  Model<double> m(mini_config(arch), BuildOptions{a.seed, true});
  GradCheckOptions opt;
  opt.tolerance = a.tol;
  opt.seed = a.seed;
  opt.param_samples = a.samples;
  opt.input_samples = a.samples;
  const GradCheckReport rep = grad_check(m, opt);
  for (const auto& e : rep.entries)
    std::printf("%-40s checked %6zu kinks %4zu max_rel_err %.3e\n", e.name.c_str(), e.checked, e.skipped_kinks,
                e.max_rel_error);
  const auto& w = rep.worst();
  std::printf("worst %s[%zu]: analytic %.10g numeric %.10g rel_err %.3e\n", w.name.c_str(), w.worst_index,
              w.worst_analytic, w.worst_numeric, w.max_rel_error);
  std::printf("%s: %zu coordinates, %zu kinks excluded, tolerance %.1e\n", rep.passed ? "PASS" : "FAIL", rep.checked,
              rep.skipped_kinks, rep.tolerance);
  (void)run;
  return rep.passed ? kOk : kNumericFailure;
}

struct DumpFeaturesArgs {
  std::string model;
  std::string samples;
  std::size_t index = 0;
  int block = 0;
  std::string out_dir = ".";
  std::size_t time = 0;
};

inline int cmd_dump_features(const DumpFeaturesArgs& a, RunManifest& run) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(a.out_dir, ec);
  if (!fs::is_directory(a.out_dir)) throw IoError("cannot create output directory '" + a.out_dir + "'");
  const Model<float> m = load_checkpoint<float>(a.model);
  const SampleSet set = load_samples(a.samples);
  if (a.index >= set.size()) throw InvalidArgument("sample index out of range");
  const auto maps = dump_feature_maps(m, set.samples[a.index].input, a.block);
  run.input(a.model);
  run.input(a.samples);
  std::size_t written = 0;
  for (const auto& [label, t] : maps) {
    const std::size_t ti = std::min(a.time, t.dim(kTime) - 1);
    for (std::size_t c = 0; c < t.dim(kChannel); ++c) {
      const fs::path p = fs::path(a.out_dir) /
                         ("block" + std::to_string(a.block) + "_" + label + "_t" + std::to_string(ti) + "_c" +
                          std::to_string(c) + ".pgm");
      run.image(p, write_pgm(p, t, ti, c));
      ++written;
    }
  }
  run.config() = {{"block", a.block}, {"index", a.index}, {"time", a.time}};
  run.write(fs::path(a.out_dir) / ("block" + std::to_string(a.block) + ".run.json"));
  std::cout << "wrote " << written << " feature maps\n";
  return kOk;
}

// -- entry point ----------------------------------------------------------------------------

inline int run(int argc, char** argv) {
  CLI::App app{"Broad-UNet nowcasting toolkit"};
  app.require_subcommand(1);

  SynthGenArgs sg;
  auto* c_sg = app.add_subcommand("synth-gen", "Generate a synthetic advection frame sequence");
  c_sg->add_option("--out", sg.out, "Output frame archive")->required();
  c_sg->add_option("--frames", sg.synth.n_frames, "Number of frames");
  c_sg->add_option("--hw", sg.hw, "Frame height and width");
  c_sg->add_option("--blobs", sg.synth.n_blobs, "Number of Gaussian blobs");
  c_sg->add_option("--vy", sg.synth.velocity_y, "Vertical velocity, cells per frame");
  c_sg->add_option("--vx", sg.synth.velocity_x, "Horizontal velocity, cells per frame");
  c_sg->add_option("--sigma", sg.synth.blob_sigma, "Blob standard deviation");
  c_sg->add_option("--seed", sg.synth.seed, "Random seed");

  PreprocessArgs pp;
  auto* c_pp = app.add_subcommand("preprocess", "Crop, filter and normalize raw frames");
  c_pp->add_option("--task", pp.task, "precip or cloud")->required()->check(CLI::IsMember({"precip", "cloud"}));
  c_pp->add_option("--in", pp.in, "Raw input archive")->required();
  c_pp->add_option("--out", pp.out, "Output frame archive")->required();
  c_pp->add_option("--rain-fraction", pp.rain_fraction, "Minimum fraction of wet pixels per frame");
  c_pp->add_option("--train-end", pp.train_end, "First ordinal after the training portion");
  c_pp->add_option("--norm-factor", pp.norm_factor, "Reuse this normalization maximum");
  c_pp->add_option("--out-size", pp.out_size, "Cloud output height and width");

  MakeSamplesArgs ms;
  auto* c_ms = app.add_subcommand("make-samples", "Window a frame sequence into (input, target) samples");
  c_ms->add_option("--in", ms.in, "Frame archive")->required();
  c_ms->add_option("--out", ms.out, "Sample archive (or prefix with --test-start)")->required();
  c_ms->add_option("--lags", ms.lags, "Input frames per sample");
  c_ms->add_option("--horizon", ms.horizon, "Steps from the last input to the target");
  c_ms->add_option("--test-start", ms.test_start, "First ordinal of the test period; writes .train/.val/.test");
  c_ms->add_option("--train-fraction", ms.train_fraction, "Share of pre-test samples used for training");

  TrainArgs tr;
  auto* c_tr = app.add_subcommand("train", "Train a model with Adam, keeping the best validation checkpoint");
  c_tr->add_option("--task", tr.task, "synth, precip or cloud")->check(CLI::IsMember({"synth", "precip", "cloud"}));
  c_tr->add_option("--train", tr.train_path, "Training sample archive");
  c_tr->add_option("--val", tr.val_path, "Validation sample archive");
  c_tr->add_option("--out-dir", tr.out_dir, "Directory for history.csv, model.btar and run_manifest.json");
  c_tr->add_option("--arch", tr.arch, "broad-unet or plain-unet")->check(CLI::IsMember({"broad-unet", "plain-unet"}));
  c_tr->add_flag("--factorized,!--no-factorized", tr.factorized, "Factorized multi-scale kernels");
  c_tr->add_option("--epochs", tr.epochs, "Maximum epochs");
  c_tr->add_option("--lr", tr.lr, "Learning rate");
  c_tr->add_option("--batch", tr.batch, "Batch size");
  c_tr->add_option("--dropout", tr.dropout, "Bottleneck dropout rate");
  c_tr->add_option("--f0", tr.f0, "Base filter count");
  c_tr->add_option("--seed", tr.seed, "Random seed");
  c_tr->add_option("--hw", tr.hw, "Synthetic frame size");
  c_tr->add_option("--lags", tr.lags, "Synthetic input frames");
  c_tr->add_option("--horizon", tr.horizon, "Synthetic horizon");
  c_tr->add_option("--train-samples", tr.n_train, "Synthetic training samples");
  c_tr->add_option("--val-samples", tr.n_val, "Synthetic validation samples");
  c_tr->add_option("--test-samples", tr.n_test, "Synthetic test samples");

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval", "Evaluate MSE and binary metrics; CSV per horizon");
  c_ev->add_option("--model", ev.model, "Checkpoint (may contain {h})");
  c_ev->add_option("--test", ev.test, "Test sample archive (may contain {h})")->required();
  c_ev->add_option("--out", ev.out, "Metrics CSV (default: stdout)");
  c_ev->add_option("--horizons", ev.horizons, "Horizon list such as 1..6");
  c_ev->add_option("--threshold", ev.threshold, "Binarization threshold (default: dataset manifest)");
  c_ev->add_flag("--persistence", ev.persistence, "Evaluate the persistence baseline");

  PredictArgs pr;
  auto* c_pr = app.add_subcommand("predict", "Predict one sample and write it as a PGM image");
  c_pr->add_option("--model", pr.model, "Checkpoint")->required();
  c_pr->add_option("--samples", pr.samples, "Sample archive")->required();
  c_pr->add_option("--index", pr.index, "Sample index");
  c_pr->add_option("--out", pr.out, "Output PGM")->required();

  ParamsArgs pa;
  auto* c_pa = app.add_subcommand("params", "Print the per-layer parameter table and total");
  c_pa->add_option("--arch", pa.arch, "broad-unet or plain-unet")->check(CLI::IsMember({"broad-unet", "plain-unet"}));
  c_pa->add_flag("--factorized,!--no-factorized", pa.factorized, "Factorized multi-scale kernels");
  c_pa->add_option("--t", pa.t, "Input lags");
  c_pa->add_option("--hw", pa.hw, "Height and width");
  c_pa->add_option("--f0", pa.f0, "Base filter count");
  c_pa->add_option("--features", pa.features, "Input features");

  GradCheckArgs gc;
  auto* c_gc = app.add_subcommand("grad-check", "Compare backward against central finite differences");
  c_gc->add_option("--arch", gc.arch, "broad-unet-mini or plain-unet-mini")
      ->check(CLI::IsMember({"broad-unet-mini", "plain-unet-mini"}));
  c_gc->add_option("--tol", gc.tol, "Maximum relative error");
  c_gc->add_option("--seed", gc.seed, "Random seed");
  c_gc->add_option("--samples", gc.samples, "Random coordinates per group (0: all)");

  DumpFeaturesArgs df;
  auto* c_df = app.add_subcommand("dump-features", "Write branch feature maps of one multi-scale block as PGM");
  c_df->add_option("--model", df.model, "Checkpoint")->required();
  c_df->add_option("--samples", df.samples, "Sample archive")->required();
  c_df->add_option("--index", df.index, "Sample index");
  c_df->add_option("--block", df.block, "Multi-scale block index");
  c_df->add_option("--time", df.time, "Time slice to write");
  c_df->add_option("--out-dir", df.out_dir, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    std::cerr << (subs.empty() ? app.help() : subs.front()->help());
    return kUsage;
  }

  std::vector<std::string> args(argv, argv + argc);
  auto* sub = app.get_subcommands().front();
  RunManifest manifest(sub->get_name(), args);
  try {
    if (sub == c_sg) return cmd_synth_gen(sg, manifest);
    if (sub == c_pp) return cmd_preprocess(pp, manifest);
    if (sub == c_ms) return cmd_make_samples(ms, manifest);
    if (sub == c_tr) return cmd_train(tr, manifest);
    if (sub == c_ev) return cmd_eval(ev, manifest);
    if (sub == c_pr) return cmd_predict(pr, manifest);
    if (sub == c_pa) return cmd_params(pa, manifest);
    if (sub == c_gc) return cmd_grad_check(gc, manifest);
    if (sub == c_df) return cmd_dump_features(df, manifest);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumericFailure;
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kDataError;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDataError;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDataError;
  }
  return kUsage;
}

}  // namespace brunet::cli
