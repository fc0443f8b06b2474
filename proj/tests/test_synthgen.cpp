#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "oculoscreen/synthgen.hpp"
#include "support.hpp"

using namespace oculoscreen;
using testing_support::small_corpus;
using testing_support::TempDir;

namespace {

double mean_pixel(const ImageU8& img) {
  double s = 0.0;
  for (auto v : img.data) s += v;
  return s / static_cast<double>(img.data.size());
}

// Mean RGB per cell of the default grid, concatenated over the five views.
std::vector<double> cell_colors(const SynthConfig& cfg, int index) {
  const auto id = make_identity(cfg, index);
  const GridSpec grid;
  const CropConfig crop;
  const auto masks = cell_masks(crop.height, crop.width, grid);
  std::vector<double> out;
  for (GazeAngle a : kAllAngles) {
    const auto c = crop_normalize(render_view(id, a, cfg), id.eye_box, crop);
    for (const auto& m : masks) {
      double sum[3] = {};
      double n = 0;
      for (int y = 0; y < crop.height; ++y)
        for (int x = 0; x < crop.width; ++x)
          if (m[static_cast<std::size_t>(y) * crop.width + x]) {
            for (int ch = 0; ch < 3; ++ch) sum[ch] += c.pixels.at(y, x, ch);
            ++n;
          }
      for (double v : sum) out.push_back(v / n);
    }
  }
  return out;
}

double dist2(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return d;
}

}  // namespace

TEST(Synth, DefaultCorpusMirrorsCollectedCounts) {
  SynthConfig cfg;
  EXPECT_EQ(cfg.total(), 439);
  TempDir dir;
  const auto m = generate_corpus(cfg, dir.path());
  ASSERT_EQ(m.sessions.size(), 439u);
  std::map<CohortLabel, int> counts;
  for (const auto& s : m.sessions) {
    counts[*s.cohort] += 1;
    EXPECT_EQ(s.images.size(), 5u);
    for (const auto& [a, rec] : s.images) {
      EXPECT_TRUE(std::filesystem::exists(dir.path() / rec.path));
      ASSERT_EQ(rec.boxes.size(), 1u);
    }
  }
  EXPECT_EQ(counts[CohortLabel::kCovid], 104);
  EXPECT_EQ(counts[CohortLabel::kPulmonary], 131);
  EXPECT_EQ(counts[CohortLabel::kOcular], 68);
  EXPECT_EQ(counts[CohortLabel::kHealthy], 136);
  EXPECT_EQ(load_manifest(dir.path() / "manifest.json").sessions.size(), 439u);
  const auto cues = detail::read_json_file(dir.path() / "cues.json");
  EXPECT_EQ(cues.size(), 439u);

  // Ages and sex are metadata only.
  double age_sum = 0;
  int female = 0;
  for (const auto& s : m.sessions) {
    const int age = s.metadata.at("age").get<int>();
    EXPECT_GE(age, 5);
    EXPECT_LE(age, 66);
    age_sum += age;
    female += s.metadata.at("sex") == "F";
  }
  EXPECT_NEAR(age_sum / 439, 34.0, 2.0);
  EXPECT_NEAR(female / 439.0, 0.3269, 0.07);
}

TEST(Synth, ProtocolPresetIsOneToOneToOne) {
  SynthConfig cfg;
  cfg.n_per_cohort = SynthConfig::protocol_counts();
  EXPECT_EQ(cfg.count(CohortLabel::kCovid), 300);
  EXPECT_EQ(cfg.count(CohortLabel::kPulmonary), cfg.count(CohortLabel::kOcular));
  EXPECT_EQ(cfg.count(CohortLabel::kOcular), cfg.count(CohortLabel::kHealthy));
}

TEST(Synth, SameSeedBitIdenticalFiles) {
  TempDir a, b;
  const auto cfg = small_corpus(2, 9);
  const auto m = generate_corpus(cfg, a.path());
  generate_corpus(cfg, b.path());
  for (const auto& s : m.sessions)
    for (const auto& [angle, rec] : s.images)
      EXPECT_EQ(read_file_bytes(a.path() / rec.path), read_file_bytes(b.path() / rec.path)) << rec.path;
  EXPECT_EQ(read_file_bytes(a.path() / "manifest.json"), read_file_bytes(b.path() / "manifest.json"));
  EXPECT_EQ(read_file_bytes(a.path() / "cues.json"), read_file_bytes(b.path() / "cues.json"));
}

TEST(Synth, ZeroSignalRendersIndependentOfCohort) {
  // Identity 0 is COVID in one corpus and HEALTHY in the other.
  SynthConfig covid = small_corpus(3, 4, 0.0);
  SynthConfig healthy = covid;
  healthy.n_per_cohort = {{CohortLabel::kCovid, 0}, {CohortLabel::kPulmonary, 0}, {CohortLabel::kOcular, 0},
                          {CohortLabel::kHealthy, 12}};
  const auto a = make_identity(covid, 0), b = make_identity(healthy, 0);
  ASSERT_EQ(a.cohort, CohortLabel::kCovid);
  ASSERT_EQ(b.cohort, CohortLabel::kHealthy);
  for (GazeAngle g : kAllAngles) EXPECT_EQ(render_view(a, g, covid).data, render_view(b, g, healthy).data);
}

TEST(Synth, ZeroSignalCohortMeansAgreeWithinNoise) {
  const auto cfg = small_corpus(25, 12, 0.0);
  std::map<CohortLabel, std::vector<double>> means;
  for (int i = 0; i < cfg.total(); ++i) {
    const auto id = make_identity(cfg, i);
    means[id.cohort].push_back(mean_pixel(render_view(id, GazeAngle::kHorizontal, cfg)));
  }
  auto stats = [](const std::vector<double>& v) {
    double m = 0, s = 0;
    for (double x : v) m += x;
    m /= v.size();
    for (double x : v) s += (x - m) * (x - m);
    return std::make_pair(m, s / (v.size() - 1));
  };
  const auto [mh, vh] = stats(means[CohortLabel::kHealthy]);
  for (CohortLabel c : {CohortLabel::kCovid, CohortLabel::kPulmonary, CohortLabel::kOcular}) {
    const auto [m, v] = stats(means[c]);
    const double t = (m - mh) / std::sqrt(v / 25 + vh / 25);
    EXPECT_LT(std::abs(t), 4.0) << to_string(c);
  }
}

TEST(Synth, CuesConstantAcrossViews) {
  const auto cfg = small_corpus(3, 5);
  for (int i = 0; i < cfg.total(); ++i) {
    const auto id = make_identity(cfg, i);
    const auto again = make_identity(cfg, i);
    EXPECT_EQ(to_json_value(cue_parameters(id, cfg)), to_json_value(cue_parameters(again, cfg)));
  }
}

TEST(Synth, CovidCuesSitInMedialAndLateralCells) {
  const auto cfg = small_corpus(6, 2);
  for (int i = 0; i < cfg.total(); ++i) {
    const auto id = make_identity(cfg, i);
    const auto t = describe_cues(id, cfg);
    if (id.cohort == CohortLabel::kCovid) {
      EXPECT_GT(t.redness_amplitude, 0.0);
      EXPECT_EQ(t.redness_zone, RednessZone::kMedialLateral);
      EXPECT_FALSE(t.cells.empty());
      for (int c : t.cells) EXPECT_TRUE(c == 0 || c == 3 || c == 4 || c == 7) << c;
    } else if (id.cohort == CohortLabel::kHealthy) {
      EXPECT_EQ(t.redness_amplitude, 0.0);
      EXPECT_EQ(t.speck_count, 0);
      EXPECT_EQ(t.lid_droop, 0.0);
      EXPECT_EQ(t.pallor, 0.0);
      EXPECT_TRUE(t.cells.empty());
    } else if (id.cohort == CohortLabel::kOcular) {
      EXPECT_EQ(t.redness_zone, RednessZone::kDiffuse);
      EXPECT_GT(t.cells.size(), 4u);
    } else {
      EXPECT_EQ(t.redness_amplitude, 0.0);
      EXPECT_GT(t.pallor, 0.0);
    }
  }
}

TEST(Synth, HalfSignalHalvesAmplitude) {
  const auto full = small_corpus(4, 8, 1.0);
  const auto half = small_corpus(4, 8, 0.5);
  for (int i = 0; i < full.total(); ++i) {
    const auto a = cue_parameters(make_identity(full, i), full);
    const auto b = cue_parameters(make_identity(half, i), half);
    EXPECT_DOUBLE_EQ(b.redness_amplitude, 0.5 * a.redness_amplitude);
    EXPECT_DOUBLE_EQ(b.pallor, 0.5 * a.pallor);
    EXPECT_DOUBLE_EQ(b.lid_droop, 0.5 * a.lid_droop);
  }
}

TEST(Synth, UnknownIdentity) {
  const auto cfg = small_corpus(2, 1);
  EXPECT_EQ(describe_cues(cfg, "S00003").identity_id, "S00003");
  for (const std::string bad : {"S00008", "X00001", "S1", ""}) {
    try {
      describe_cues(cfg, bad);
      FAIL() << bad;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kUnknownIdentity);
    }
  }
}

TEST(Synth, InvalidConfigRejected) {
  auto cfg = small_corpus(2, 1, 1.5);
  EXPECT_THROW(cfg.check(), Error);
  cfg.signal = 1.0;
  cfg.n_per_cohort[CohortLabel::kCovid] = -1;
  EXPECT_THROW(cfg.check(), Error);
}

TEST(Synth, NearestCentroidSeparatesCovidFromHealthy) {
  const auto cfg = small_corpus(40, 6);
  std::vector<std::vector<double>> covid, healthy;
  for (int i = 0; i < cfg.total(); ++i) {
    const auto c = synth_cohort_of(cfg, i);
    if (c == CohortLabel::kCovid) covid.push_back(cell_colors(cfg, i));
    if (c == CohortLabel::kHealthy) healthy.push_back(cell_colors(cfg, i));
  }
  auto centroid = [](const std::vector<std::vector<double>>& v, std::size_t from, std::size_t to) {
    std::vector<double> m(v.front().size(), 0.0);
    for (std::size_t i = from; i < to; ++i)
      for (std::size_t j = 0; j < m.size(); ++j) m[j] += v[i][j] / static_cast<double>(to - from);
    return m;
  };
  const auto cc = centroid(covid, 0, 20), ch = centroid(healthy, 0, 20);
  int correct = 0, total = 0;
  for (std::size_t i = 20; i < 40; ++i) {
    correct += dist2(covid[i], cc) < dist2(covid[i], ch);
    correct += dist2(healthy[i], ch) < dist2(healthy[i], cc);
    total += 2;
  }
  EXPECT_GT(static_cast<double>(correct) / total, 0.95);
}

TEST(Synth, DeviceShiftChangesColours) {
  auto cfg = small_corpus(2, 3);
  cfg.devices = 3;
  cfg.device_shift = 0.1;
  const auto plain = small_corpus(2, 3);
  int differs = 0;
  for (int i = 0; i < cfg.total(); ++i)
    differs += render_view(make_identity(cfg, i), GazeAngle::kUp, cfg).data !=
               render_view(make_identity(plain, i), GazeAngle::kUp, plain).data;
  EXPECT_GT(differs, 0);
}
