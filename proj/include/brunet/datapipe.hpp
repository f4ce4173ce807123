#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "brunet/archive.hpp"
#include "brunet/error.hpp"
#include "brunet/tensor.hpp"

namespace brunet {

// -- dataset manifest (UTF-8 "key = value" lines) ----------------------------------------

struct DatasetManifest {
  double cadence_minutes = 5.0;
  double norm_factor = 1.0;
  double threshold_mean = 0.5;
  double rain_fraction = 0.0;
  std::string source = "unknown";

  std::string to_text() const {
    std::ostringstream os;
    os.imbue(std::locale::classic());
    os.precision(17);
    os << "cadence_minutes = " << cadence_minutes << '\n'
       << "norm_factor = " << norm_factor << '\n'
       << "threshold_mean = " << threshold_mean << '\n'
       << "rain_fraction = " << rain_fraction << '\n'
       << "source = " << source << '\n';
    return os.str();
  }

  static DatasetManifest from_text(const std::string& text) {
    DatasetManifest m;
    std::istringstream is(text);
    std::string line;
    std::uint64_t offset = 0;
    while (std::getline(is, line)) {
      const std::uint64_t line_at = offset;
      offset += line.size() + 1;
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw FormatError("manifest line without '='", line_at);
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      try {
        if (key == "cadence_minutes") m.cadence_minutes = std::stod(value);
        else if (key == "norm_factor") m.norm_factor = std::stod(value);
        else if (key == "threshold_mean") m.threshold_mean = std::stod(value);
        else if (key == "rain_fraction") m.rain_fraction = std::stod(value);
        else if (key == "source") m.source = value;
      } catch (const std::logic_error&) {
        throw FormatError("manifest value for '" + key + "' is not a number", line_at);
      }
    }
    return m;
  }
};

// -- frame sequences -------------------------------------------------------------------------

struct FrameSequence {
  std::vector<Tensor<float>> frames;   // (H, W, C) each, in time order
  std::vector<std::int64_t> ordinals;  // position of each frame in the original record
  DatasetManifest manifest;

  std::size_t size() const noexcept { return frames.size(); }

  void validate() const {
    if (ordinals.size() != frames.size()) throw InvalidArgument("frame/ordinal count mismatch");
    if (!(manifest.cadence_minutes > 0)) throw InvalidArgument("cadence must be positive");
    for (const auto& f : frames) {
      if (f.rank() != 3) throw InvalidShape("frames must be rank 3 (H,W,C), got " + f.shape().str());
      if (!(f.shape() == frames.front().shape())) throw InvalidShape("frames must share (H,W,C)");
    }
  }
};

inline std::filesystem::path manifest_path_for(const std::filesystem::path& p) { return p.string() + ".manifest"; }

inline void save_frames(const std::filesystem::path& path, const FrameSequence& seq) {
  seq.validate();
  if (seq.frames.empty()) throw InvalidArgument("cannot save an empty frame sequence");
  const Shape& s = seq.frames.front().shape();
  std::vector<float> all;
  all.reserve(seq.size() * s.numel());
  for (const auto& f : seq.frames) all.insert(all.end(), f.values().begin(), f.values().end());
  std::vector<double> ords(seq.ordinals.begin(), seq.ordinals.end());
  archive_save(path, {Record::from_values<float>("frames", {seq.size(), s[0], s[1], s[2]}, all),
                      Record::from_values<double>("ordinals", {seq.size()}, ords)});
  const std::string text = seq.manifest.to_text();
  write_file_atomic(manifest_path_for(path), std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline FrameSequence load_frames(const std::filesystem::path& path) {
  const auto records = archive_load(path);
  const Record& fr = find_record(records, "frames");
  if (fr.dims.size() != 4 && fr.dims.size() != 3)
    throw FormatError("'frames' record must be (N,H,W,C) or (N,H,W)", 0);
  const std::size_t n = fr.dims[0];
  const Shape fs{fr.dims[1], fr.dims[2], fr.dims.size() == 4 ? fr.dims[3] : 1};
  const auto values = fr.values<float>();
  FrameSequence seq;
  for (std::size_t i = 0; i < n; ++i)
    seq.frames.emplace_back(fs, std::vector<float>(values.begin() + static_cast<std::ptrdiff_t>(i * fs.numel()),
                                                   values.begin() + static_cast<std::ptrdiff_t>((i + 1) * fs.numel())));
  if (const Record* o = try_find_record(records, "ordinals")) {
    for (double v : o->values<double>()) seq.ordinals.push_back(static_cast<std::int64_t>(v));
  } else {
    for (std::size_t i = 0; i < n; ++i) seq.ordinals.push_back(static_cast<std::int64_t>(i));
  }
  const auto mp = manifest_path_for(path);
  if (std::filesystem::exists(mp)) {
    const auto bytes = read_file(mp);
    seq.manifest = DatasetManifest::from_text(std::string(bytes.begin(), bytes.end()));
  }
  seq.validate();
  return seq;
}

// -- precipitation preprocessing --------------------------------------------------------------

inline constexpr std::size_t kRadarHeight = 765;
inline constexpr std::size_t kRadarWidth = 700;
inline constexpr std::size_t kPrecipCrop = 288;

struct CropWindow {
  std::size_t row0, col0, rows, cols;
};

/// Central square crop; offsets are the floor of the half margin.
inline CropWindow central_crop(std::size_t height, std::size_t width, std::size_t size) {
  if (height < size || width < size) throw InvalidShape("frame smaller than the crop size");
  return {(height - size) / 2, (width - size) / 2, size, size};
}

inline Tensor<float> crop_frame(const Tensor<float>& frame, const CropWindow& w) {
  const std::array<std::size_t, 3> begin{w.row0, w.col0, 0};
  const std::array<std::size_t, 3> ext{w.rows, w.cols, frame.dim(2)};
  return tensor_slice(frame, begin, ext);
}

inline double rain_fraction_of(const Tensor<float>& frame) {
  const auto wet = std::count_if(frame.values().begin(), frame.values().end(), [](float v) { return v > 0.0f; });
  return static_cast<double>(wet) / static_cast<double>(frame.size());
}

struct PrecipOptions {
  double rain_fraction = 0.5;
  /// Frames with ordinal < train_end form the training portion that sets the normalization
  /// maximum and the binarization threshold. Unset: every kept frame.
  std::optional<std::int64_t> train_end;
  /// Reuse a maximum computed elsewhere (e.g. the 50% dataset's training split).
  std::optional<double> norm_factor;
};

inline FrameSequence precip_preprocess(const FrameSequence& raw, const PrecipOptions& opt) {
  raw.validate();
  if (!(opt.rain_fraction >= 0.0 && opt.rain_fraction <= 1.0)) throw InvalidArgument("rain_fraction must be in [0,1]");
  const CropWindow win = central_crop(kRadarHeight, kRadarWidth, kPrecipCrop);
  FrameSequence out;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const auto& f = raw.frames[i];
    if (f.dim(0) != kRadarHeight || f.dim(1) != kRadarWidth || f.dim(2) != 1)
      throw InvalidShape("precipitation frames must be 765x700x1, got " + f.shape().str());
    Tensor<float> c = crop_frame(f, win);
    const auto wet = std::count_if(c.values().begin(), c.values().end(), [](float v) { return v > 0.0f; });
    // "at least" the fraction: boundary frames are kept
    if (static_cast<double>(wet) >= opt.rain_fraction * static_cast<double>(c.size())) {
      out.frames.push_back(std::move(c));
      out.ordinals.push_back(raw.ordinals[i]);
    }
  }
  auto in_train = [&](std::size_t i) { return !opt.train_end || out.ordinals[i] < *opt.train_end; };

  double factor = 0.0;
  if (opt.norm_factor) {
    factor = *opt.norm_factor;
  } else {
    for (std::size_t i = 0; i < out.size(); ++i)
      if (in_train(i))
        for (float v : out.frames[i].values()) factor = std::max(factor, static_cast<double>(v));
  }
  if (!(factor > 0.0) && !out.frames.empty()) throw DataError("training portion has no positive value to normalize by");

  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (auto& v : out.frames[i].values()) v = static_cast<float>(static_cast<double>(v) / factor);
    if (in_train(i)) {
      for (float v : out.frames[i].values()) sum += v;
      count += out.frames[i].size();
    }
  }
  out.manifest.cadence_minutes = 5.0;
  out.manifest.norm_factor = factor;
  out.manifest.threshold_mean = count ? sum / static_cast<double>(count) : 0.0;
  out.manifest.rain_fraction = opt.rain_fraction;
  out.manifest.source = "knmi-precipitation";
  return out;
}

// -- cloud-cover preprocessing -----------------------------------------------------------------

struct LabelImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> labels;  // row-major
};

/// Geolocation of every source pixel (degrees), shape (H, W, 1).
struct GridMapping {
  Tensor<float> lat;
  Tensor<float> lon;
};

struct GeoBox {
  double upper_lat = 51.896;
  double lower_lat = 41.104;
  double left_lon = -5.842;
  double right_lon = 9.842;
};

struct CloudOptions {
  GeoBox box;
  std::size_t out_size = 256;
};

/// Labels 1..4 (clear land, sea, snow, ice) are no-cloud; 5..15 are cloud.
inline float cloud_mask_value(std::uint8_t label) { return label >= 5 ? 1.0f : 0.0f; }

inline FrameSequence cloud_preprocess(const std::vector<LabelImage>& raw, const GridMapping& grid,
                                      const CloudOptions& opt = {}) {
  if (raw.empty()) throw InvalidArgument("cloud_preprocess needs at least one frame");
  const std::size_t H = raw.front().height;
  const std::size_t W = raw.front().width;
  if (grid.lat.size() != H * W || grid.lon.size() != H * W) throw InvalidShape("grid mapping does not match frame size");

  // bounding rectangle of source pixels inside the geographic box
  std::size_t r0 = H, r1 = 0, c0 = W, c1 = 0;
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      const double la = grid.lat[r * W + c];
      const double lo = grid.lon[r * W + c];
      if (la <= opt.box.upper_lat && la >= opt.box.lower_lat && lo >= opt.box.left_lon && lo <= opt.box.right_lon) {
        r0 = std::min(r0, r);
        r1 = std::max(r1, r);
        c0 = std::min(c0, c);
        c1 = std::max(c1, c);
      }
    }
  if (r0 > r1 || c0 > c1) throw DataError("no source pixel falls inside the crop box");
  const std::size_t hc = r1 - r0 + 1;
  const std::size_t wc = c1 - c0 + 1;

  FrameSequence out;
  for (std::size_t f = 0; f < raw.size(); ++f) {
    const auto& img = raw[f];
    if (img.height != H || img.width != W || img.labels.size() != H * W)
      throw InvalidShape("cloud frame " + std::to_string(f) + " has a different size");
    for (std::size_t i = 0; i < img.labels.size(); ++i) {
      const auto v = img.labels[i];
      if (v < 1 || v > 15)
        throw DataError("frame " + std::to_string(f) + " pixel (" + std::to_string(i / W) + "," + std::to_string(i % W) +
                        ") has label " + std::to_string(v) + " outside 1..15");
    }
    Tensor<float> o(Shape{opt.out_size, opt.out_size, 1});
    for (std::size_t r = 0; r < opt.out_size; ++r) {
      const std::size_t sr = r0 + std::min(hc - 1, (2 * r + 1) * hc / (2 * opt.out_size));
      for (std::size_t c = 0; c < opt.out_size; ++c) {
        const std::size_t sc = c0 + std::min(wc - 1, (2 * c + 1) * wc / (2 * opt.out_size));
        o[r * opt.out_size + c] = cloud_mask_value(img.labels[sr * W + sc]);
      }
    }
    out.frames.push_back(std::move(o));
    out.ordinals.push_back(static_cast<std::int64_t>(f));
  }
  out.manifest.cadence_minutes = 15.0;
  out.manifest.norm_factor = 1.0;
  out.manifest.threshold_mean = 0.5;
  out.manifest.rain_fraction = 0.0;
  out.manifest.source = "eumetsat-cloud-type";
  return out;
}

// -- samples --------------------------------------------------------------------------------

struct Sample {
  Tensor<float> input;   // (T, H, W, F)
  Tensor<float> target;  // (1, H, W, F)
  std::int64_t first_ordinal = 0;
  std::int64_t target_ordinal = 0;
};

struct SampleSet {
  std::vector<Sample> samples;
  std::size_t lags = 0;
  std::size_t horizon = 0;
  DatasetManifest manifest;

  std::size_t size() const noexcept { return samples.size(); }
  bool empty() const noexcept { return samples.empty(); }
};

inline Tensor<float> stack_frames(const std::vector<Tensor<float>>& frames, std::size_t first, std::size_t count) {
  const Shape& fs = frames.at(first).shape();
  Tensor<float> out(Shape{count, fs[0], fs[1], fs[2]});
  for (std::size_t t = 0; t < count; ++t)
    std::copy(frames[first + t].values().begin(), frames[first + t].values().end(), out.data() + t * fs.numel());
  return out;
}

/// One sample per start index i: input = frames[i, i+T), target = frames[i+T-1+k].
inline SampleSet make_samples(const FrameSequence& seq, std::size_t lags, std::size_t horizon) {
  seq.validate();
  if (lags < 1 || horizon < 1) throw InvalidArgument("lags and horizon must be >= 1");
  if (seq.size() < lags + horizon)
    throw InvalidArgument("sequence of " + std::to_string(seq.size()) + " frames is too short for lags " +
                          std::to_string(lags) + " and horizon " + std::to_string(horizon));
  SampleSet set;
  set.lags = lags;
  set.horizon = horizon;
  set.manifest = seq.manifest;
  const std::size_t count = seq.size() - lags - horizon + 1;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t target = i + lags - 1 + horizon;
    set.samples.push_back({stack_frames(seq.frames, i, lags), stack_frames(seq.frames, target, 1), seq.ordinals[i],
                           seq.ordinals[target]});
  }
  return set;
}

struct SplitScheme {
  std::int64_t test_start = 0;  // first ordinal of the test period
  double train_fraction = 0.8;  // of the pre-test samples, by ordinal position
};

struct DatasetSplit {
  SampleSet train, val, test;
};

/// Chronological split. Windows straddling the test boundary are dropped, and validation
/// samples overlapping the last training window are dropped, so frame ranges never cross
/// partitions.
inline DatasetSplit split_dataset(const SampleSet& all, const SplitScheme& scheme) {
  if (!(scheme.train_fraction > 0.0 && scheme.train_fraction < 1.0))
    throw InvalidArgument("train_fraction must be in (0, 1)");
  DatasetSplit out;
  for (SampleSet* s : {&out.train, &out.val, &out.test}) {
    s->lags = all.lags;
    s->horizon = all.horizon;
    s->manifest = all.manifest;
  }
  std::vector<const Sample*> pre;
  for (const auto& s : all.samples) {
    if (s.target_ordinal < scheme.test_start)
      pre.push_back(&s);
    else if (s.first_ordinal >= scheme.test_start)
      out.test.samples.push_back(s);
  }
  std::stable_sort(pre.begin(), pre.end(), [](const Sample* a, const Sample* b) { return a->first_ordinal < b->first_ordinal; });
  const auto n_train = static_cast<std::size_t>(std::llround(scheme.train_fraction * static_cast<double>(pre.size())));
  std::int64_t train_last = std::numeric_limits<std::int64_t>::min();
  for (std::size_t i = 0; i < n_train; ++i) {
    out.train.samples.push_back(*pre[i]);
    train_last = std::max(train_last, pre[i]->target_ordinal);
  }
  for (std::size_t i = n_train; i < pre.size(); ++i)
    if (pre[i]->first_ordinal > train_last) out.val.samples.push_back(*pre[i]);
  if (out.train.empty() || out.val.empty() || out.test.empty())
    throw InvalidArgument("split produced an empty partition (train " + std::to_string(out.train.size()) + ", val " +
                          std::to_string(out.val.size()) + ", test " + std::to_string(out.test.size()) + ")");
  return out;
}

inline void save_samples(const std::filesystem::path& path, const SampleSet& set) {
  if (set.empty()) throw InvalidArgument("cannot save an empty sample set");
  const Shape& is = set.samples.front().input.shape();
  const Shape& ts = set.samples.front().target.shape();
  std::vector<float> inputs, targets;
  std::vector<double> first, target;
  for (const auto& s : set.samples) {
    if (!(s.input.shape() == is) || !(s.target.shape() == ts)) throw InvalidShape("samples must share shapes");
    inputs.insert(inputs.end(), s.input.values().begin(), s.input.values().end());
    targets.insert(targets.end(), s.target.values().begin(), s.target.values().end());
    first.push_back(static_cast<double>(s.first_ordinal));
    target.push_back(static_cast<double>(s.target_ordinal));
  }
  std::ostringstream meta;
  meta << "lags = " << set.lags << '\n' << "horizon = " << set.horizon << '\n' << set.manifest.to_text();
  const std::uint64_t n = set.size();
  archive_save(path, {Record::from_values<float>("inputs", {n, is[0], is[1], is[2], is[3]}, inputs),
                      Record::from_values<float>("targets", {n, ts[0], ts[1], ts[2], ts[3]}, targets),
                      Record::from_values<double>("first_ordinal", {n}, first),
                      Record::from_values<double>("target_ordinal", {n}, target),
                      Record::from_text("meta", meta.str())});
}

inline SampleSet load_samples(const std::filesystem::path& path) {
  const auto records = archive_load(path);
  const Record& in = find_record(records, "inputs");
  const Record& tg = find_record(records, "targets");
  if (in.dims.size() != 5 || tg.dims.size() != 5 || in.dims[0] != tg.dims[0])
    throw FormatError("sample archive needs rank-5 'inputs' and 'targets' with equal counts", 0);
  SampleSet set;
  const std::string meta = find_record(records, "meta").text();
  set.manifest = DatasetManifest::from_text(meta);
  std::istringstream ms(meta);
  for (std::string line; std::getline(ms, line);) {
    if (line.rfind("lags = ", 0) == 0) set.lags = std::stoull(line.substr(7));
    if (line.rfind("horizon = ", 0) == 0) set.horizon = std::stoull(line.substr(10));
  }
  const Shape is{in.dims[1], in.dims[2], in.dims[3], in.dims[4]};
  const Shape ts{tg.dims[1], tg.dims[2], tg.dims[3], tg.dims[4]};
  const auto iv = in.values<float>();
  const auto tv = tg.values<float>();
  const auto fo = find_record(records, "first_ordinal").values<double>();
  const auto to = find_record(records, "target_ordinal").values<double>();
  for (std::size_t i = 0; i < in.dims[0]; ++i) {
    Sample s;
    s.input = Tensor<float>(is, std::vector<float>(iv.begin() + static_cast<std::ptrdiff_t>(i * is.numel()),
                                                   iv.begin() + static_cast<std::ptrdiff_t>((i + 1) * is.numel())));
    s.target = Tensor<float>(ts, std::vector<float>(tv.begin() + static_cast<std::ptrdiff_t>(i * ts.numel()),
                                                    tv.begin() + static_cast<std::ptrdiff_t>((i + 1) * ts.numel())));
    s.first_ordinal = static_cast<std::int64_t>(fo.at(i));
    s.target_ordinal = static_cast<std::int64_t>(to.at(i));
    set.samples.push_back(std::move(s));
  }
  return set;
}

// -- synthetic advection -------------------------------------------------------------------------

struct SynthConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t n_frames = 64;
  std::size_t n_blobs = 3;
  double velocity_y = 0.0;  // cells per frame
  double velocity_x = 1.0;
  double blob_sigma = 3.0;
  std::uint64_t seed = 0;
};

namespace detail {
// signed toroidal distance wrapped into [-n/2, n/2)
inline double wrap_delta(double d, double n) {
  d = std::fmod(d, n);
  if (d < -n / 2) d += n;
  if (d >= n / 2) d -= n;
  return d;
}
}  // namespace detail

/// Gaussian blobs translated by a constant velocity with toroidal wraparound; values in [0, 1].
inline FrameSequence synth_advection(const SynthConfig& cfg) {
  if (cfg.height < 8 || cfg.width < 8) throw InvalidArgument("synthetic frames must be at least 8x8");
  if (cfg.n_frames < 1) throw InvalidArgument("synthetic sequence needs at least one frame");
  if (!(cfg.blob_sigma > 0)) throw InvalidArgument("blob_sigma must be positive");
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> uy(0.0, static_cast<double>(cfg.height));
  std::uniform_real_distribution<double> ux(0.0, static_cast<double>(cfg.width));
  std::uniform_real_distribution<double> ua(0.5, 1.0);
  struct Blob {
    double y, x, amplitude;
  };
  std::vector<Blob> blobs;
  for (std::size_t b = 0; b < cfg.n_blobs; ++b) {
    const double y = uy(rng);
    const double x = ux(rng);
    blobs.push_back({y, x, ua(rng)});
  }
  const double H = static_cast<double>(cfg.height);
  const double W = static_cast<double>(cfg.width);
  const double inv2s2 = 1.0 / (2.0 * cfg.blob_sigma * cfg.blob_sigma);
  FrameSequence seq;
  for (std::size_t t = 0; t < cfg.n_frames; ++t) {
    Tensor<float> f(Shape{cfg.height, cfg.width, 1});
    const double td = static_cast<double>(t);
    for (std::size_t r = 0; r < cfg.height; ++r)
      for (std::size_t c = 0; c < cfg.width; ++c) {
        double v = 0.0;
        for (const auto& b : blobs) {
          // distance of (r, c) at time t equals that of (r - t*vy, c - t*vx) at time 0
          const double dy = detail::wrap_delta(static_cast<double>(r) - td * cfg.velocity_y - b.y, H);
          const double dx = detail::wrap_delta(static_cast<double>(c) - td * cfg.velocity_x - b.x, W);
          v += b.amplitude * std::exp(-(dy * dy + dx * dx) * inv2s2);
        }
        f[r * cfg.width + c] = static_cast<float>(std::min(1.0, v));
      }
    seq.frames.push_back(std::move(f));
    seq.ordinals.push_back(static_cast<std::int64_t>(t));
  }
  seq.manifest.cadence_minutes = 5.0;
  seq.manifest.norm_factor = 1.0;
  seq.manifest.threshold_mean = 0.0;
  seq.manifest.source = "synthetic-advection";
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& f : seq.frames) {
    for (float v : f.values()) sum += v;
    n += f.size();
  }
  seq.manifest.threshold_mean = sum / static_cast<double>(n);
  return seq;
}

}  // namespace brunet
