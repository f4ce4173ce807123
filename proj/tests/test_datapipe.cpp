#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <random>
#include <set>

#include <unistd.h>

#include "brunet/archive.hpp"
#include "brunet/datapipe.hpp"
#include "support.hpp"

using namespace brunet;

namespace {

std::filesystem::path temp_dir() {
  const auto d = std::filesystem::temp_directory_path() / ("brunet_data_" + std::to_string(::getpid()));
  std::filesystem::create_directories(d);
  return d;
}

FrameSequence numbered(std::size_t n, std::size_t hw = 4) {
  FrameSequence s;
  for (std::size_t i = 0; i < n; ++i) {
    s.frames.emplace_back(Shape{hw, hw, 1}, static_cast<float>(i));
    s.ordinals.push_back(static_cast<std::int64_t>(i));
  }
  return s;
}

FrameSequence radar(const std::vector<Tensor<float>>& frames) {
  FrameSequence s;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    s.frames.push_back(frames[i]);
    s.ordinals.push_back(static_cast<std::int64_t>(i));
  }
  return s;
}

template <class F>
auto& px(F& frame, std::size_t r, std::size_t c) {
  return frame[r * frame.dim(1) + c];
}

// Raw radar frame whose crop window has its first `wet_rows` rows set to `value`.
Tensor<float> radar_frame(std::size_t wet_rows, float value) {
  Tensor<float> f(Shape{kRadarHeight, kRadarWidth, 1});
  for (std::size_t r = 0; r < wet_rows; ++r)
    for (std::size_t c = 0; c < kPrecipCrop; ++c) px(f, 238 + r, 206 + c) = value;
  return f;
}

struct CloudGrid {
  GridMapping grid;
  std::size_t H = 40, W = 60;
  // rows span latitude 56 -> 36.5, columns longitude -12 -> 17.5
  CloudGrid() {
    grid.lat = Tensor<float>(Shape{H, W, 1});
    grid.lon = Tensor<float>(Shape{H, W, 1});
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < W; ++c) {
        grid.lat[r * W + c] = static_cast<float>(56.0 - 0.5 * static_cast<double>(r));
        grid.lon[r * W + c] = static_cast<float>(-12.0 + 0.5 * static_cast<double>(c));
      }
  }
  bool inside(std::size_t r, std::size_t c) const {
    const double la = grid.lat[r * W + c], lo = grid.lon[r * W + c];
    GeoBox b;
    return la <= b.upper_lat && la >= b.lower_lat && lo >= b.left_lon && lo <= b.right_lon;
  }
  LabelImage uniform(std::uint8_t label) const { return {H, W, std::vector<std::uint8_t>(H * W, label)}; }
};

}  // namespace

// -- archive ------------------------------------------------------------------------------------

TEST(Archive, F32RoundTripIsByteIdentical) {
  const std::vector<float> v{1.5f, -2.0f, 3.25f, 1e-30f};
  const auto bytes = archive_encode({Record::from_values<float>("x", {2, 2}, v)});
  const auto back = archive_decode(bytes);
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].tensor<float>(), Tensor<float>(Shape{2, 2}, v));
  EXPECT_EQ(archive_encode(back), bytes);
}

TEST(Archive, LayoutIsLittleEndian) {
  const std::vector<std::uint8_t> payload{7};
  const auto bytes = archive_encode({Record::from_values<std::uint8_t>("ab", {1}, payload)});
  const std::vector<std::uint8_t> expect{'B', 'T', 'A', 'R', 1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 'a', 'b', 3, 1,
                                         1,   0,   0,   0,   0, 0, 0, 0, 7};
  EXPECT_EQ(bytes, expect);
}

TEST(Archive, BadMagicAtOffsetZero) {
  auto bytes = archive_encode({Record::from_text("t", "hi")});
  std::memcpy(bytes.data(), "XXXX", 4);
  try {
    archive_decode(bytes);
    FAIL() << "no error";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
}

TEST(Archive, BadVersionAndDtype) {
  auto bytes = archive_encode({Record::from_text("t", "hi")});
  auto v = bytes;
  v[4] = 2;
  try {
    archive_decode(v);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 4u);
  }
  auto d = bytes;
  d[12 + 2 + 1] = 9;  // header, name length, name
  try {
    archive_decode(d);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 15u);
  }
}

TEST(Archive, TruncationAnywhereIsFormatError) {
  const std::vector<double> vals{1, 2, 3};
  const auto bytes = archive_encode({Record::from_values<double>("a", {3}, vals), Record::from_text("b", "xyz")});
  for (std::size_t n = 0; n < bytes.size(); ++n) {
    const std::span<const std::uint8_t> cut(bytes.data(), n);
    try {
      archive_decode(cut);
      FAIL() << "accepted prefix of " << n;
    } catch (const FormatError& e) {
      EXPECT_LE(e.offset(), n);
    }
  }
  auto longer = bytes;
  longer.push_back(0);
  EXPECT_THROW(archive_decode(longer), FormatError);
}

TEST(Archive, RejectsDuplicateNames) {
  EXPECT_THROW(archive_encode({Record::from_text("a", "1"), Record::from_text("a", "2")}), InvalidArgument);
}

TEST(Archive, U8MaskRoundTrip) {
  const std::vector<std::uint8_t> mask{0, 1, 1, 0, 1, 0};
  const auto back = archive_decode(archive_encode({Record::from_values<std::uint8_t>("m", {2, 3}, mask)}));
  EXPECT_EQ(back[0].values<std::uint8_t>(), mask);
  EXPECT_EQ(back[0].dtype, DType::u8);
}

TEST(Archive, RandomRoundTripsAreBitExact) {
  std::mt19937_64 rng(3);
  const auto dir = temp_dir();
  for (int trial = 0; trial < 40; ++trial) {
    std::vector<Record> recs;
    const std::size_t n = 1 + rng() % 4;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<std::uint64_t> dims(1 + rng() % 5);
      std::uint64_t count = 1;
      for (auto& d : dims) count *= (d = rng() % 4);  // zero extents allowed in the container
      Record r;
      r.name = "r" + std::to_string(i) + std::string(rng() % 3, 'z');
      r.dtype = static_cast<DType>(1 + rng() % 3);
      r.dims = dims;
      r.payload.resize(count * dtype_size(r.dtype));
      for (auto& b : r.payload) b = static_cast<std::uint8_t>(rng());
      recs.push_back(std::move(r));
    }
    const auto path = dir / "r.btar";
    archive_save(path, recs);
    EXPECT_EQ(archive_load(path), recs);
  }
  std::filesystem::remove_all(dir);
}

TEST(Archive, MissingRecordAndFile) {
  EXPECT_THROW(find_record({}, "x"), FormatError);
  EXPECT_THROW(archive_load("/nonexistent/brunet.btar"), IoError);
}

// -- manifest and frame files ------------------------------------------------------------------

TEST(Manifest, TextRoundTrip) {
  DatasetManifest m{15.0, 412.5, 0.0123456789012345, 0.5, "unit-test"};
  const auto back = DatasetManifest::from_text(m.to_text());
  EXPECT_EQ(back.cadence_minutes, m.cadence_minutes);
  EXPECT_EQ(back.norm_factor, m.norm_factor);
  EXPECT_EQ(back.threshold_mean, m.threshold_mean);
  EXPECT_EQ(back.rain_fraction, m.rain_fraction);
  EXPECT_EQ(back.source, m.source);
  EXPECT_NE(m.to_text().find("norm_factor = 412.5\n"), std::string::npos);
  EXPECT_THROW(DatasetManifest::from_text("cadence_minutes = 5\nnonsense\n"), FormatError);
  EXPECT_THROW(DatasetManifest::from_text("norm_factor = abc\n"), FormatError);
}

TEST(Manifest, FramesAndSamplesPersist) {
  const auto dir = temp_dir();
  SynthConfig sc;
  sc.n_frames = 10;
  sc.seed = 8;
  const auto seq = synth_advection(sc);
  save_frames(dir / "f.btar", seq);
  EXPECT_TRUE(std::filesystem::exists(manifest_path_for(dir / "f.btar")));
  const auto back = load_frames(dir / "f.btar");
  ASSERT_EQ(back.size(), seq.size());
  for (std::size_t i = 0; i < seq.size(); ++i) EXPECT_EQ(back.frames[i], seq.frames[i]);
  EXPECT_EQ(back.ordinals, seq.ordinals);
  EXPECT_EQ(back.manifest.threshold_mean, seq.manifest.threshold_mean);

  const auto set = make_samples(seq, 3, 2);
  save_samples(dir / "s.btar", set);
  const auto sb = load_samples(dir / "s.btar");
  EXPECT_EQ(sb.lags, 3u);
  EXPECT_EQ(sb.horizon, 2u);
  ASSERT_EQ(sb.size(), set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    EXPECT_EQ(sb.samples[i].input, set.samples[i].input);
    EXPECT_EQ(sb.samples[i].target, set.samples[i].target);
    EXPECT_EQ(sb.samples[i].target_ordinal, set.samples[i].target_ordinal);
  }
  EXPECT_EQ(sb.manifest.source, "synthetic-advection");
  std::filesystem::remove_all(dir);
}

// -- precipitation -------------------------------------------------------------------------------

TEST(Precip, CentralCropOffsets) {
  const auto w = central_crop(kRadarHeight, kRadarWidth, kPrecipCrop);
  EXPECT_EQ(w.row0, 238u);
  EXPECT_EQ(w.col0, 206u);
  Tensor<float> f(Shape{kRadarHeight, kRadarWidth, 1});
  for (std::size_t r = 0; r < kRadarHeight; ++r)
    for (std::size_t c = 0; c < kRadarWidth; ++c) px(f, r, c) = static_cast<float>(r * 1000 + c);
  const auto c = crop_frame(f, w);
  ASSERT_EQ(c.shape(), (Shape{288, 288, 1}));
  EXPECT_EQ(px(c, 0, 0), 238206.0f);
  EXPECT_EQ(px(c, 287, 287), 525493.0f);
}

TEST(Precip, RainFractionFilter) {
  PrecipOptions opt;
  opt.rain_fraction = 0.5;
  Tensor<float> outside(Shape{kRadarHeight, kRadarWidth, 1}, 0.0f);
  for (std::size_t r = 0; r < 238; ++r)
    for (std::size_t c = 0; c < kRadarWidth; ++c) px(outside, r, c) = 5.0f;  // rain outside the crop only
  const auto out = precip_preprocess(
      radar({radar_frame(0, 0.0f), radar_frame(144, 3.0f), radar_frame(143, 3.0f), outside, radar_frame(288, 1.0f)}), opt);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out.ordinals, (std::vector<std::int64_t>{1, 4}));
  EXPECT_EQ(out.manifest.rain_fraction, 0.5);

  opt.rain_fraction = 0.2;  // 57.6 rows needed
  const auto twenty = precip_preprocess(radar({radar_frame(58, 1.0f), radar_frame(57, 1.0f)}), opt);
  EXPECT_EQ(twenty.ordinals, (std::vector<std::int64_t>{0}));
}

TEST(Precip, NormalizesByTrainingMaximum) {
  Tensor<float> a = radar_frame(288, 100.0f);
  px(a, 300, 300) = 400.0f;
  Tensor<float> b = radar_frame(288, 800.0f);
  PrecipOptions opt;
  opt.train_end = 1;
  const auto out = precip_preprocess(radar({a, b}), opt);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out.manifest.norm_factor, 400.0);
  EXPECT_EQ(px(out.frames[0], 300 - 238, 300 - 206), 1.0f);
  EXPECT_EQ(px(out.frames[0], 0, 0), 0.25f);
  EXPECT_EQ(px(out.frames[1], 0, 0), 2.0f);  // future maxima may exceed 1
  const double mean = (288.0 * 288.0 - 1.0) * 0.25 / (288.0 * 288.0) + 1.0 / (288.0 * 288.0);
  EXPECT_NEAR(out.manifest.threshold_mean, mean, 1e-12);
  for (float v : out.frames[0].values()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  opt.norm_factor = 800.0;
  EXPECT_EQ(px(precip_preprocess(radar({a, b}), opt).frames[1], 0, 0), 1.0f);
}

TEST(Precip, WrongFrameSize) {
  FrameSequence s = numbered(2, 16);
  EXPECT_THROW(precip_preprocess(s, {}), InvalidShape);
}

// -- cloud ---------------------------------------------------------------------------------------

TEST(Cloud, LabelGroupingBoundary) {
  for (std::uint8_t l = 1; l <= 4; ++l) EXPECT_EQ(cloud_mask_value(l), 0.0f);
  for (std::uint8_t l = 5; l <= 15; ++l) EXPECT_EQ(cloud_mask_value(l), 1.0f);
}

TEST(Cloud, SeaFrameIsAllZero) {
  CloudGrid g;
  const auto out = cloud_preprocess({g.uniform(2)}, g.grid);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out.frames[0].shape(), (Shape{256, 256, 1}));
  for (float v : out.frames[0].values()) EXPECT_EQ(v, 0.0f);
  EXPECT_EQ(out.manifest.cadence_minutes, 15.0);
}

TEST(Cloud, CropKeepsOnlyBoxPixels) {
  CloudGrid g;
  LabelImage img = g.uniform(10);
  std::size_t inside = 0;
  for (std::size_t r = 0; r < g.H; ++r)
    for (std::size_t c = 0; c < g.W; ++c)
      if (g.inside(r, c)) {
        img.labels[r * g.W + c] = 3;
        ++inside;
      }
  ASSERT_GT(inside, 0u);
  const auto out = cloud_preprocess({img}, g.grid);
  for (float v : out.frames[0].values()) EXPECT_EQ(v, 0.0f);
}

TEST(Cloud, ResizedOutputIsBinary) {
  CloudGrid g;
  std::mt19937_64 rng(4);
  std::vector<LabelImage> frames;
  for (int f = 0; f < 3; ++f) {
    LabelImage img = g.uniform(1);
    for (auto& l : img.labels) l = static_cast<std::uint8_t>(1 + rng() % 15);
    frames.push_back(img);
  }
  CloudOptions opt;
  opt.out_size = 37;
  const auto out = cloud_preprocess(frames, g.grid, opt);
  ASSERT_EQ(out.size(), 3u);
  std::set<float> seen;
  for (const auto& f : out.frames) {
    EXPECT_EQ(f.shape(), (Shape{37, 37, 1}));
    for (float v : f.values()) seen.insert(v);
  }
  EXPECT_EQ(seen, (std::set<float>{0.0f, 1.0f}));
}

TEST(Cloud, LabelOutsideRangeNamesFrameAndPixel) {
  CloudGrid g;
  LabelImage bad = g.uniform(5);
  bad.labels[3 * g.W + 7] = 16;
  try {
    cloud_preprocess({g.uniform(5), bad}, g.grid);
    FAIL();
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("frame 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("(3,7)"), std::string::npos) << msg;
  }
  LabelImage zero = g.uniform(0);
  EXPECT_THROW(cloud_preprocess({zero}, g.grid), DataError);
}

// -- samples -------------------------------------------------------------------------------------

TEST(Samples, Counts) {
  EXPECT_EQ(make_samples(numbered(18), 12, 6).size(), 1u);
  EXPECT_EQ(make_samples(numbered(10), 4, 1).size(), 6u);
  EXPECT_THROW(make_samples(numbered(17), 12, 6), InvalidArgument);
  EXPECT_THROW(make_samples(numbered(5), 0, 1), InvalidArgument);
}

TEST(Samples, FirstTargetIndex) {
  const auto s = make_samples(numbered(6), 2, 3);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s.samples[0].target[0], 4.0f);
  EXPECT_EQ(s.samples[0].input.shape(), (Shape{2, 4, 4, 1}));
  EXPECT_EQ(s.samples[0].target.shape(), (Shape{1, 4, 4, 1}));
}

TEST(Samples, WindowsIndexCorrectly) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t T = 1 + rng() % 5, k = 1 + rng() % 4, n = T + k + rng() % 10;
    const auto s = make_samples(numbered(n, 2), T, k);
    ASSERT_EQ(s.size(), n - T - k + 1);
    for (std::size_t i = 0; i < s.size(); ++i) {
      for (std::size_t t = 0; t < T; ++t) EXPECT_EQ(s.samples[i].input.at(t, 0, 0, 0), float(i + t));
      EXPECT_EQ(s.samples[i].target[0], float(i + T - 1 + k));
      EXPECT_EQ(s.samples[i].target_ordinal, static_cast<std::int64_t>(i + T - 1 + k));
    }
  }
}

TEST(Split, EightyTwentyByOrdinal) {
  SampleSet all;
  for (int i = 0; i < 120; ++i)
    all.samples.push_back({Tensor<float>(Shape{1, 1, 1, 1}), Tensor<float>(Shape{1, 1, 1, 1}), 10 * i, 10 * i + 5});
  const auto sp = split_dataset(all, {1000, 0.8});
  EXPECT_EQ(sp.train.size(), 80u);
  EXPECT_EQ(sp.val.size(), 20u);
  EXPECT_EQ(sp.test.size(), 20u);
  EXPECT_EQ(sp.train.samples.back().first_ordinal, 790);
  EXPECT_EQ(sp.val.samples.front().first_ordinal, 800);
}

TEST(Split, StraddlingWindowDropped) {
  const auto all = make_samples(numbered(60), 3, 2);
  const auto sp = split_dataset(all, {40, 0.8});
  for (const auto& s : sp.train.samples) EXPECT_LT(s.target_ordinal, 40);
  for (const auto& s : sp.val.samples) EXPECT_LT(s.target_ordinal, 40);
  for (const auto& s : sp.test.samples) EXPECT_GE(s.first_ordinal, 40);
  // starts 36..39 have inputs before 40 and targets at or after it
  EXPECT_EQ(sp.train.size() + sp.val.size() + sp.test.size() + 4 + (3 + 2 - 1), all.size());
}

TEST(Split, PartitionsUseDisjointFrames) {
  const std::size_t T = 4, k = 3;
  const auto all = make_samples(numbered(200), T, k);
  const auto sp = split_dataset(all, {150, 0.8});
  auto frames_of = [&](const SampleSet& s) {
    std::set<std::int64_t> f;
    for (const auto& x : s.samples) {
      for (std::size_t t = 0; t < T; ++t) f.insert(x.first_ordinal + static_cast<std::int64_t>(t));
      f.insert(x.target_ordinal);
    }
    return f;
  };
  const auto a = frames_of(sp.train), b = frames_of(sp.val), c = frames_of(sp.test);
  for (auto v : a) {
    EXPECT_FALSE(b.count(v)) << v;
    EXPECT_FALSE(c.count(v)) << v;
  }
  for (auto v : b) EXPECT_FALSE(c.count(v)) << v;
}

TEST(Split, EmptyPartitionRejected) {
  const auto all = make_samples(numbered(30), 2, 1);
  EXPECT_THROW(split_dataset(all, {1000, 0.8}), InvalidArgument);
  EXPECT_THROW(split_dataset(all, {0, 0.8}), InvalidArgument);
  EXPECT_THROW(split_dataset(all, {20, 1.0}), InvalidArgument);
}

// -- synthetic advection -------------------------------------------------------------------------

TEST(Synth, StaticFieldWhenVelocityZero) {
  SynthConfig c;
  c.velocity_x = c.velocity_y = 0.0;
  c.n_frames = 6;
  const auto s = synth_advection(c);
  for (const auto& f : s.frames) EXPECT_EQ(f, s.frames[0]);
}

TEST(Synth, UnitVelocityShiftsOneColumn) {
  SynthConfig c;
  c.height = 24;
  c.width = 20;
  c.n_frames = 8;
  c.n_blobs = 4;
  c.seed = 3;
  const auto s = synth_advection(c);
  double worst = 0;
  for (std::size_t t = 0; t + 1 < s.size(); ++t)
    for (std::size_t r = 0; r < c.height; ++r)
      for (std::size_t col = 0; col < c.width; ++col) {
        const float next = px(s.frames[t + 1], r, col);
        const float prev = px(s.frames[t], r, (col + c.width - 1) % c.width);
        worst = std::max(worst, static_cast<double>(std::abs(next - prev)));
      }
  EXPECT_LT(worst, 1e-6);
}

TEST(Synth, DeterministicAndBounded) {
  SynthConfig c;
  c.seed = 42;
  c.velocity_y = 0.7;
  const auto a = synth_advection(c), b = synth_advection(c);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.frames[i], b.frames[i]);
    for (float v : a.frames[i].values()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
  c.seed = 43;
  EXPECT_FALSE(synth_advection(c).frames[0] == a.frames[0]);
  c.height = 4;
  EXPECT_THROW(synth_advection(c), InvalidArgument);
}
