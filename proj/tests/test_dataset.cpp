// dataset-pipeline: synthetic subjects, patch extraction, labels, splits,
// augmentation, shifted test sets and the FEND/manifest round trip.
#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <iterator>
#include <set>

#include "focalerrornet/dataset.hpp"
#include "test_util.hpp"

using namespace fen;
using namespace fen::data;

namespace {

SynthParams small_params() {
  SynthParams p;
  p.size = 72;
  return p;
}

/// Shared small cohort and dataset (generated once per test binary).
struct Fixture {
  std::vector<SyntheticSubject> subjects;
  BuildParams build;
  Dataset ds;

  Fixture() {
    subjects = synth_cohort(5, 5, small_params(), 1);
    build.deformations_per_volume = 2;
    build.seed = 7;
    ds = build_dataset(subjects, build, 1);
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += a[i], mb += b[i];
  ma /= a.size();
  mb /= b.size();
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

/// Mean over the patch voxels of ||displacement_at(voxel center)||.
double label_oracle(const SyntheticSubject& s, const BSplineGrid& g, const Index3& c, std::size_t p) {
  const std::size_t h = p / 2;
  double total = 0.0;
  for (std::size_t k = 0; k < p; ++k)
    for (std::size_t j = 0; j < p; ++j)
      for (std::size_t i = 0; i < p; ++i) {
        const Vec3 u = displacement_at(g, s.us.world(c[0] - h + i, c[1] - h + j, c[2] - h + k));
        total += std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
      }
  return total / static_cast<double>(p * p * p);
}

std::size_t subject_index(const Dataset& ds, const std::string& id) {
  const auto ids = ds.provenance.at("subject_ids").get<std::vector<std::string>>();
  return static_cast<std::size_t>(std::find(ids.begin(), ids.end(), id) - ids.begin());
}

std::vector<char> file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

// ---------------------------------------------------------------- synth

TEST(Synth, SameSeedIsBitIdentical) {
  Rng a(3, 0), b(3, 0);
  const auto s1 = synth_subject(a, small_params(), "x");
  const auto s2 = synth_subject(b, small_params(), "x");
  EXPECT_EQ(s1.mri.data, s2.mri.data);
  EXPECT_EQ(s1.us.data, s2.us.data);
  EXPECT_EQ(s1.fov_mask.data, s2.fov_mask.data);
  EXPECT_EQ(s1.landmarks, s2.landmarks);
}

TEST(Synth, RelatedButDistinctContrasts) {
  for (const auto& s : fixture().subjects) {
    ASSERT_TRUE(s.mri.same_geometry(s.us));
    ASSERT_TRUE(s.mri.same_geometry(s.fov_mask));
    std::vector<double> m, u;
    for (std::size_t i = 0; i < s.mri.data.size(); ++i) {
      if (s.fov_mask.data[i] == 1.0f) {
        m.push_back(s.mri.data[i]);
        u.push_back(s.us.data[i]);
      } else {
        ASSERT_EQ(s.us.data[i], 0.0f);
      }
    }
    ASSERT_GT(m.size(), 1000u);
    const double r = pearson(m, u);
    EXPECT_GT(r, 0.0) << s.id;
    EXPECT_LT(r, 1.0) << s.id;
  }
}

TEST(Synth, LandmarksInsideFovAndSeparated) {
  for (const auto& s : fixture().subjects) {
    EXPECT_GE(s.landmarks.size(), 8u) << s.id;
    for (std::size_t a = 0; a < s.landmarks.size(); ++a) {
      const auto& l = s.landmarks[a];
      EXPECT_EQ(s.fov_mask.at(l[0], l[1], l[2]), 1.0f);
      for (std::size_t b = a + 1; b < s.landmarks.size(); ++b) {
        const auto p = s.mri.world(l[0], l[1], l[2]);
        const auto& m = s.landmarks[b];
        const auto q = s.mri.world(m[0], m[1], m[2]);
        const double d = std::hypot(p[0] - q[0], p[1] - q[1], p[2] - q[2]);
        EXPECT_GE(d, 8.0);
      }
    }
  }
}

TEST(Synth, SubjectDirectoryRoundTrip) {
  const auto& s = fixture().subjects[0];
  const auto dir = fen::testing::scratch_dir("subject");
  save_subject(dir / "s", s);
  const auto back = load_subject(dir / "s");
  EXPECT_EQ(back.mri.data, s.mri.data);
  EXPECT_EQ(back.us.data, s.us.data);
  EXPECT_EQ(back.landmarks, s.landmarks);
}

TEST(Synth, CohortIndependentOfWorkers) {
  const auto a = synth_cohort(11, 2, small_params(), 1);
  const auto b = synth_cohort(11, 2, small_params(), 2);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(a[i].id, b[i].id);
    EXPECT_EQ(a[i].us.data, b[i].us.data);
  }
  EXPECT_EQ(a[0].id, "subject_000");
}

// ---------------------------------------------------------------- patches

TEST(ExtractPatch, IndexSumOracle) {
  Volume3D vol({40, 41, 42}, {0.5, 0.5, 0.5});
  for (std::size_t k = 0; k < 42; ++k)
    for (std::size_t j = 0; j < 41; ++j)
      for (std::size_t i = 0; i < 40; ++i) vol.at(i, j, k) = static_cast<float>(i + j + k);
  const Index3 c{20, 20, 21};
  const auto patch = extract_patch(vol, c);
  ASSERT_EQ(patch.size(), 33u * 33 * 33);
  // Raw values range over (c - 16) * 3 .. (c + 16) * 3 sums: min 13, max 109.
  const double lo = 4 + 4 + 5, hi = 36 + 36 + 37;
  for (std::size_t k = 0; k < 33; ++k)
    for (std::size_t j = 0; j < 33; ++j)
      for (std::size_t i = 0; i < 33; ++i) {
        const double raw = (4 + i) + (4 + j) + (5 + k);
        const float expect = static_cast<float>((static_cast<float>(raw) - lo) / (hi - lo));
        ASSERT_NEAR(patch[i + 33 * (j + 33 * k)], expect, 1e-7f);
      }
}

TEST(ExtractPatch, ConstantVolumeGivesZeros) {
  Volume3D vol({33, 33, 33}, {0.5, 0.5, 0.5});
  std::fill(vol.data.begin(), vol.data.end(), 0.7f);
  for (float v : extract_patch(vol, {16, 16, 16})) ASSERT_EQ(v, 0.0f);
}

TEST(ExtractPatch, CenterVoxelAtPatchCenter) {
  Volume3D vol({50, 50, 50}, {0.5, 0.5, 0.5});
  vol.at(30, 20, 25) = 1.0f;
  const auto patch = extract_patch(vol, {30, 20, 25});
  EXPECT_EQ(patch[16 + 33 * (16 + 33 * 16)], 1.0f);
  EXPECT_EQ(std::count(patch.begin(), patch.end(), 1.0f), 1);
}

TEST(ExtractPatch, OutOfBoundsIsValueError) {
  Volume3D vol({40, 40, 40}, {0.5, 0.5, 0.5});
  try {
    extract_patch(vol, {15, 20, 20});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::value);
  }
  EXPECT_THROW(extract_patch(vol, {20, 20, 24}), Error);
  EXPECT_NO_THROW(extract_patch(vol, {16, 23, 20}));
}

// ---------------------------------------------------------------- build

TEST(BuildDataset, IdentityDeformationGivesZeroLabels) {
  BuildParams p;
  p.deformations_per_volume = 1;
  p.deformation.max_disp_mm = 0.0;
  const auto ds = build_dataset(fixture().subjects, p, 1);
  ASSERT_FALSE(ds.samples.empty());
  for (const auto& s : ds.samples) ASSERT_EQ(s.label_mm, 0.0);
}

TEST(BuildDataset, SampleCountAndOrdering) {
  const auto& f = fixture();
  std::size_t expected = 0;
  for (const auto& s : f.subjects) expected += s.landmarks.size() * f.build.deformations_per_volume;
  // All synthetic landmarks keep a full patch inside, so none are skipped.
  EXPECT_EQ(f.ds.samples.size(), expected);
  for (std::size_t i = 1; i < f.ds.samples.size(); ++i) {
    const auto& a = f.ds.samples[i - 1];
    const auto& b = f.ds.samples[i];
    const auto ka = std::make_tuple(subject_index(f.ds, a.subject_id), a.deformation_id, a.landmark_index);
    const auto kb = std::make_tuple(subject_index(f.ds, b.subject_id), b.deformation_id, b.landmark_index);
    ASSERT_LT(ka, kb);
  }
  for (const auto& s : f.ds.samples) {
    ASSERT_EQ(s.mri.size(), 33u * 33 * 33);
    ASSERT_EQ(s.us.size(), 33u * 33 * 33);
    ASSERT_GE(s.label_mm, 0.0);
    ASSERT_EQ(s.split, f.ds.splits.at(s.subject_id));
    for (float v : s.mri) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
    for (float v : s.us) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
  }
}

TEST(BuildDataset, LabelsMatchDirectSumOracle) {
  const auto& f = fixture();
  Rng rng(21, 0);
  for (int n = 0; n < 20; ++n) {
    const auto& s = f.ds.samples[rng.uniform_int(0, static_cast<std::int64_t>(f.ds.samples.size()) - 1)];
    const std::size_t si = subject_index(f.ds, s.subject_id);
    const auto& subj = f.subjects[si];
    const auto grid = subject_deformation(f.build, si, subj.us, s.deformation_id);
    EXPECT_NEAR(s.label_mm, label_oracle(subj, grid, s.center, 33), 1e-6);
    // Label equals the mean error_field over the patch support.
    const auto ef = error_field(grid, subj.us);
    double total = 0.0;
    for (std::size_t k = 0; k < 33; ++k)
      for (std::size_t j = 0; j < 33; ++j)
        for (std::size_t i = 0; i < 33; ++i)
          total += ef.at(s.center[0] - 16 + i, s.center[1] - 16 + j, s.center[2] - 16 + k);
    EXPECT_NEAR(s.label_mm, total / (33.0 * 33 * 33), 1e-5);
  }
}

TEST(BuildDataset, RequiresFiveSubjects) {
  std::vector<SyntheticSubject> four(fixture().subjects.begin(), fixture().subjects.begin() + 4);
  EXPECT_THROW(build_dataset(four, BuildParams{}, 1), Error);
}

TEST(BuildDataset, BorderLandmarksAreSkippedAndLogged) {
  auto subjects = fixture().subjects;
  subjects[0].landmarks.push_back({2, 36, 36});
  BuildParams p;
  p.deformations_per_volume = 1;
  std::vector<std::string> messages;
  const auto ds = build_dataset(subjects, p, 1, [&](const std::string& m) { messages.push_back(m); });
  std::size_t expected = 0;
  for (const auto& s : fixture().subjects) expected += s.landmarks.size();
  EXPECT_EQ(ds.samples.size(), expected);
  EXPECT_FALSE(messages.empty());
}

// ---------------------------------------------------------------- splits

TEST(SplitSubjects, ExactAndRoundedCounts) {
  for (auto [n, train, val, test] : {std::array<std::size_t, 4>{10, 6, 2, 2},
                                     std::array<std::size_t, 4>{22, 14, 4, 4},
                                     std::array<std::size_t, 4>{5, 3, 1, 1}}) {
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < n; ++i) ids.push_back("s" + std::to_string(i));
    Rng rng(n, 0);
    const auto m = split_subjects(ids, {0.6, 0.2, 0.2}, rng);
    ASSERT_EQ(m.size(), n);  // every subject appears exactly once
    std::array<std::size_t, 3> counts{};
    for (const auto& [id, s] : m) counts[static_cast<int>(s)]++;
    EXPECT_EQ(counts[0], train) << n;
    EXPECT_EQ(counts[1], val) << n;
    EXPECT_EQ(counts[2], test) << n;
  }
}

TEST(SplitSubjects, BadFractionsAndTooFewSubjects) {
  std::vector<std::string> ids{"a", "b", "c", "d", "e"};
  Rng rng(1, 1);
  try {
    split_subjects(ids, {0.6, 0.2, 0.3}, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::value);
  }
  EXPECT_THROW(split_subjects({"a", "b"}, {0.6, 0.2, 0.2}, rng), Error);
}

TEST(SplitSubjects, ShuffleDependsOnStream) {
  std::vector<std::string> ids;
  for (int i = 0; i < 20; ++i) ids.push_back("s" + std::to_string(i));
  std::set<std::map<std::string, Split>> seen;
  for (std::uint64_t s = 0; s < 5; ++s) {
    Rng rng(s, 0);
    seen.insert(split_subjects(ids, {0.6, 0.2, 0.2}, rng));
  }
  EXPECT_GT(seen.size(), 1u);
}

// ---------------------------------------------------------------- augment

TEST(Augment, FlipIsAnInvolution) {
  auto patch = fen::testing::random_values(7 * 7 * 7, 3);
  const auto orig = patch;
  for (std::size_t axis = 0; axis < 3; ++axis) {
    flip_axis(patch, 7, axis);
    EXPECT_NE(patch, orig);
    flip_axis(patch, 7, axis);
    EXPECT_EQ(patch, orig);
  }
  flip_axis(patch, 7, 0);
  EXPECT_EQ(patch[6], orig[0]);
  EXPECT_EQ(patch[7 + 6], orig[7]);
}

TEST(Augment, ZeroNoiseOnlyFlipsAndPreservesLabel) {
  const auto& base = fixture().ds.samples[0];
  std::size_t identities = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    PatchPair p = base;
    Rng rng(s, 5);
    augment(p, rng, 0.0);
    ASSERT_EQ(p.label_mm, base.label_mm);
    // Flips permute voxels: sorted contents are unchanged.
    auto a = p.us, b = base.us;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    ASSERT_EQ(a, b);
    if (p.us == base.us && p.mri == base.mri) ++identities;
  }
  // P(no flip drawn) = 1/8.
  EXPECT_GT(identities, 0u);
  EXPECT_LT(identities, 40u);
}

TEST(Augment, FlipsBothPatchesIdentically) {
  PatchPair p;
  p.mri = fen::testing::random_values(33 * 33 * 33, 4);
  p.us = p.mri;
  p.label_mm = 3.25;
  for (std::uint64_t s = 0; s < 20; ++s) {
    PatchPair q = p;
    Rng rng(s, 6);
    augment(q, rng, 0.0);
    ASSERT_EQ(q.mri, q.us);
  }
}

TEST(Augment, NoiseIsClampedAndLabelUntouched) {
  const auto& base = fixture().ds.samples[1];
  double diff = 0.0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    PatchPair p = base;
    Rng rng(s, 7);
    augment(p, rng, 0.05);
    ASSERT_EQ(p.label_mm, base.label_mm);
    for (float v : p.mri) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
    for (float v : p.us) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
    if (s == 0) {
      Rng again(s, 7);
      PatchPair q = base;
      augment(q, again, 0.05);
      ASSERT_EQ(q.us, p.us);  // deterministic for a stream
      auto sa = p.us, sb = base.us;
      std::sort(sa.begin(), sa.end());
      std::sort(sb.begin(), sb.end());
      for (std::size_t i = 0; i < sa.size(); ++i) diff = std::max(diff, double(std::abs(sa[i] - sb[i])));
    }
  }
  EXPECT_GT(diff, 0.0);
}

// ---------------------------------------------------------------- shifted test set

TEST(ShiftedTestSet, ZeroShiftReproducesTestSet) {
  const auto& f = fixture();
  const auto shifted = shifted_test_set(f.ds, f.subjects, 3, 0, 1);
  const auto test = f.ds.indices(Split::test);
  ASSERT_EQ(shifted.samples.size(), test.size());
  ASSERT_FALSE(test.empty());
  for (std::size_t t = 0; t < test.size(); ++t) {
    const auto& a = shifted.samples[t];
    const auto& b = f.ds.samples[test[t]];
    EXPECT_EQ(a.label_mm, b.label_mm);
    EXPECT_EQ(a.us, b.us);
    EXPECT_EQ(a.mri, b.mri);
    EXPECT_EQ(a.center, b.center);
  }
}

TEST(ShiftedTestSet, BoundedShiftsAndOracleLabels) {
  const auto& f = fixture();
  const auto shifted = shifted_test_set(f.ds, f.subjects, 4, 10, 2);
  const auto test = f.ds.indices(Split::test);
  std::size_t nonzero = 0;
  for (std::size_t t = 0; t < test.size(); ++t) {
    const auto& s = shifted.samples[t];
    const auto& src = f.ds.samples[test[t]];
    for (int a = 0; a < 3; ++a) {
      ASSERT_LE(std::abs(s.shift[a]), 10);
      ASSERT_EQ(static_cast<std::int64_t>(s.center[a]),
                static_cast<std::int64_t>(src.center[a]) + s.shift[a]);
      nonzero += s.shift[a] != 0;
    }
    EXPECT_EQ(s.split, Split::test);
    if (t < 10) {
      const std::size_t si = subject_index(f.ds, s.subject_id);
      const auto grid = subject_deformation(f.build, si, f.subjects[si].us, s.deformation_id);
      EXPECT_NEAR(s.label_mm, label_oracle(f.subjects[si], grid, s.center, 33), 1e-6);
    }
  }
  EXPECT_GT(nonzero, 0u);
  // Same seed, different worker count: identical.
  const auto again = shifted_test_set(f.ds, f.subjects, 4, 10, 1);
  for (std::size_t t = 0; t < test.size(); ++t) ASSERT_EQ(again.samples[t].us, shifted.samples[t].us);
}

// ---------------------------------------------------------------- serialization

TEST(Serialization, RoundTripIsBitIdentical) {
  const auto& f = fixture();
  const auto dir = fen::testing::scratch_dir("dataset_rt");
  save_dataset(dir, f.ds);
  const auto back = load_dataset(dir);
  EXPECT_EQ(back.patch_size, f.ds.patch_size);
  EXPECT_EQ(back.splits, f.ds.splits);
  ASSERT_EQ(back.samples.size(), f.ds.samples.size());
  for (std::size_t i = 0; i < back.samples.size(); ++i) {
    const auto& a = back.samples[i];
    const auto& b = f.ds.samples[i];
    ASSERT_EQ(a.label_mm, b.label_mm);
    ASSERT_EQ(a.mri, b.mri);
    ASSERT_EQ(a.us, b.us);
    ASSERT_EQ(a.subject_id, b.subject_id);
    ASSERT_EQ(a.center, b.center);
    ASSERT_EQ(a.shift, b.shift);
    ASSERT_EQ(a.split, b.split);
    ASSERT_EQ(a.landmark_index, b.landmark_index);
    ASSERT_EQ(a.deformation_id, b.deformation_id);
  }
  // Manifest count == blob count.
  const auto manifest = nlohmann::json::parse(file_bytes(dir / "manifest.json"));
  EXPECT_EQ(manifest.at("records").size(), f.ds.samples.size());
  EXPECT_EQ(manifest.at("record_count").get<std::size_t>(), f.ds.samples.size());
}

TEST(Serialization, CorruptedByteNamesRecord) {
  const auto& f = fixture();
  const auto dir = fen::testing::scratch_dir("dataset_crc");
  save_dataset(dir, f.ds);
  const auto manifest = nlohmann::json::parse(file_bytes(dir / "manifest.json"));
  const auto& rec = manifest.at("records").at(3);
  const auto offset = rec.at("offset").get<std::size_t>() + rec.at("length").get<std::size_t>() / 2;
  {
    std::fstream io(dir / "dataset.fend", std::ios::in | std::ios::out | std::ios::binary);
    io.seekg(static_cast<std::streamoff>(offset));
    char c;
    io.read(&c, 1);
    c = static_cast<char>(c ^ 0x5a);
    io.seekp(static_cast<std::streamoff>(offset));
    io.write(&c, 1);
  }
  try {
    load_dataset(dir);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::format);
    EXPECT_NE(std::string(e.what()).find("record 3"), std::string::npos) << e.what();
  }
}

TEST(Serialization, BadMagicVersionAndTruncation) {
  const auto& f = fixture();
  const auto dir = fen::testing::scratch_dir("dataset_bad");
  save_dataset(dir, f.ds);
  const auto good = file_bytes(dir / "dataset.fend");
  auto write = [&](const std::vector<char>& bytes) {
    std::ofstream out(dir / "dataset.fend", std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  };
  auto bad = good;
  bad[0] = 'X';
  write(bad);
  EXPECT_THROW(load_dataset(dir), Error);
  bad = good;
  bad[4] = 9;
  write(bad);
  EXPECT_THROW(load_dataset(dir), Error);
  bad = good;
  bad.resize(good.size() - 10);
  write(bad);
  try {
    load_dataset(dir);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::format);
  }
  std::filesystem::remove(dir / "dataset.fend");
  try {
    load_dataset(dir);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::io);
  }
}

TEST(Serialization, SameSeedGivesByteIdenticalFiles) {
  const auto& f = fixture();
  const auto d1 = fen::testing::scratch_dir("dataset_det1");
  const auto d2 = fen::testing::scratch_dir("dataset_det2");
  save_dataset(d1, f.ds);
  save_dataset(d2, build_dataset(f.subjects, f.build, 2));
  EXPECT_EQ(file_bytes(d1 / "dataset.fend"), file_bytes(d2 / "dataset.fend"));
  EXPECT_EQ(file_bytes(d1 / "manifest.json"), file_bytes(d2 / "manifest.json"));
}
