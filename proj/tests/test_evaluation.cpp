// eval-uncertainty: MC dropout, statistics (Pearson, incomplete beta,
// paired t-test, MI, binning) and the metrics report.
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>

#include "focalerrornet/evaluation.hpp"
#include "test_util.hpp"

using namespace fen;
using namespace fen::eval;

namespace {

std::unique_ptr<net::Regressor<float>> fresh_model(double dropout = 0.2) {
  net::FocalErrorNetConfig cfg;
  cfg.dropout_p = dropout;
  Rng rng(3, 3);
  auto m = net::make_model<float>("focalerrornet", nlohmann::json(cfg), rng);
  m->output_shift = 5.0f;
  m->output_scale = 2.5f;
  return m;
}

/// Small built dataset (identity deformations when max_disp is 0).
data::Dataset small_dataset(double max_disp) {
  data::SynthParams sp;
  sp.size = 72;
  const auto subjects = data::synth_cohort(4, 5, sp, 1);
  data::BuildParams bp;
  bp.deformations_per_volume = 1;
  bp.deformation.max_disp_mm = max_disp;
  bp.seed = 3;
  auto ds = data::build_dataset(subjects, bp, 1);
  ds.provenance["subjects"] = {{"kind", "synthetic"}, {"seed", 4}, {"count", 5}, {"params", sp}};
  return ds;
}

/// Randomly deformed build shared by the report tests.
const data::Dataset& moving_dataset() {
  static const data::Dataset ds = small_dataset(30.0);
  return ds;
}

}  // namespace

// ---------------------------------------------------------------- MC dropout

TEST(McPredict, ZeroDropoutHasZeroStd) {
  const auto m = fresh_model(0.0);
  const auto mri = fen::testing::random_values(33 * 33 * 33, 1);
  const auto us = fen::testing::random_values(33 * 33 * 33, 2);
  const auto mc = mc_predict(*m, mri, us, 50, Rng(1, 1));
  EXPECT_EQ(mc.std_mm, 0.0);
  Rng unused(0, 0);
  EXPECT_EQ(mc.mean_mm, net::focalerrornet_forward<float>(*m, mri, us, net::Mode::infer, unused));
  EXPECT_EQ(mc.samples.size(), 50u);
}

TEST(McPredict, DeterministicAndConsistentWithLargerN) {
  const auto m = fresh_model();
  const auto mri = fen::testing::random_values(33 * 33 * 33, 3);
  const auto us = fen::testing::random_values(33 * 33 * 33, 4);
  const auto a = mc_predict(*m, mri, us, 200, Rng(9, 9));
  const auto b = mc_predict(*m, mri, us, 200, Rng(9, 9));
  EXPECT_EQ(a.samples, b.samples);
  EXPECT_EQ(a.mean_mm, b.mean_mm);
  EXPECT_EQ(a.std_mm, b.std_mm);
  EXPECT_GT(a.std_mm, 0.0);
  const auto big = mc_predict(*m, mri, us, 2000, Rng(9, 9));
  EXPECT_LT(std::abs(a.mean_mm - big.mean_mm), 3.0 * a.std_mm / std::sqrt(200.0));
  // Pass s uses base.split(s): the first 200 of 2000 passes are the same.
  EXPECT_TRUE(std::equal(a.samples.begin(), a.samples.end(), big.samples.begin()));
}

TEST(McPredict, SummaryIsOrderInvariantAndValidated) {
  const std::vector<double> v{1.0, 2.0, 4.0, 7.0};
  auto r = v;
  std::reverse(r.begin(), r.end());
  const auto a = summarize_samples(v), b = summarize_samples(r);
  EXPECT_DOUBLE_EQ(a.mean_mm, 3.5);
  EXPECT_DOUBLE_EQ(a.std_mm, std::sqrt(7.0));  // sum sq dev 21 / 3
  EXPECT_DOUBLE_EQ(a.mean_mm, b.mean_mm);
  EXPECT_DOUBLE_EQ(a.std_mm, b.std_mm);
  const auto m = fresh_model();
  const auto patch = fen::testing::random_values(33 * 33 * 33, 5);
  try {
    mc_predict(*m, patch, patch, 1, Rng(1, 1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::value);
  }
}

// ---------------------------------------------------------------- Pearson

TEST(Pearson, Examples) {
  const std::vector<double> x{1, 2, 3, 4};
  std::vector<double> y(4), z(4);
  for (int i = 0; i < 4; ++i) y[i] = 2 * x[i] + 1, z[i] = -x[i];
  EXPECT_NEAR(pearson_corr(x, y), 1.0, 1e-12);
  EXPECT_NEAR(pearson_corr(x, z), -1.0, 1e-12);
  EXPECT_NEAR(pearson_corr(x, std::vector<double>{1, 3, 2, 4}), 0.8, 1e-12);
}

TEST(Pearson, AffineSignProperty) {
  Rng rng(6, 6);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> x(30), y(30);
    for (auto& v : x) v = rng.uniform(-5, 5);
    const double a = rng.uniform(-3, 3), b = rng.uniform(-10, 10);
    for (int i = 0; i < 30; ++i) y[i] = a * x[i] + b;
    ASSERT_NEAR(pearson_corr(x, y), a > 0 ? 1.0 : -1.0, 1e-12);
  }
}

TEST(Pearson, ZeroVarianceIsIllPosed) {
  try {
    pearson_corr(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ill_posed);
  }
  EXPECT_THROW(pearson_corr(std::vector<double>{1}, std::vector<double>{1}), Error);
}

// ---------------------------------------------------------------- t-test

TEST(IncompleteBeta, ClosedForms) {
  for (double x : {0.0, 0.1, 0.35, 0.5, 0.9, 1.0}) {
    EXPECT_NEAR(regularized_incomplete_beta(1, 1, x), x, 1e-12);
    EXPECT_NEAR(regularized_incomplete_beta(3, 1, x), x * x * x, 1e-12);
    EXPECT_NEAR(regularized_incomplete_beta(1, 4, x), 1 - std::pow(1 - x, 4), 1e-12);
  }
  EXPECT_NEAR(regularized_incomplete_beta(7.5, 7.5, 0.5), 0.5, 1e-12);
  EXPECT_THROW(regularized_incomplete_beta(1, 1, 1.5), Error);
}

TEST(StudentT, ClosedFormsForOneAndTwoDof) {
  for (double t : {0.0, 0.5, 1.0, 3.0, 12.7}) {
    EXPECT_NEAR(student_t_two_sided_p(t, 1), 1.0 - 2.0 / std::numbers::pi * std::atan(t), 1e-12);
    EXPECT_NEAR(student_t_two_sided_p(-t, 2), 1.0 - t / std::sqrt(t * t + 2.0), 1e-12);
  }
}

TEST(PairedTTest, Examples) {
  const std::vector<double> zero{0, 0, 0};
  const auto a = paired_ttest_two_sided(std::vector<double>{1, 1, -2}, zero);
  EXPECT_EQ(a.t, 0.0);
  EXPECT_NEAR(a.p, 1.0, 1e-12);
  const auto b = paired_ttest_two_sided(std::vector<double>{1, 2, 3}, zero);
  EXPECT_NEAR(b.t, 3.4641016151377544, 1e-12);
  EXPECT_NEAR(b.p, 1.0 - b.t / std::sqrt(b.t * b.t + 2.0), 1e-12);
  EXPECT_NEAR(b.p, 0.0742, 5e-5);
  EXPECT_EQ(b.dof, 2u);
  const auto c = paired_ttest_two_sided(std::vector<double>{2.5, 5, 7.5}, zero);
  EXPECT_NEAR(c.t, b.t, 1e-12);
  EXPECT_NEAR(c.p, b.p, 1e-12);
}

TEST(PairedTTest, PermutationInvarianceAndErrors) {
  Rng rng(7, 7);
  std::vector<double> a(25), b(25);
  for (int i = 0; i < 25; ++i) a[i] = rng.uniform(0, 5), b[i] = rng.uniform(0, 5);
  const auto ref = paired_ttest_two_sided(a, b);
  std::vector<std::size_t> perm(25);
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  std::rotate(perm.begin(), perm.begin() + 7, perm.end());
  std::vector<double> pa(25), pb(25);
  for (int i = 0; i < 25; ++i) pa[i] = a[perm[i]], pb[i] = b[perm[i]];
  const auto p = paired_ttest_two_sided(pa, pb);
  EXPECT_NEAR(p.t, ref.t, 1e-12);
  EXPECT_NEAR(p.p, ref.p, 1e-12);
  EXPECT_GE(ref.p, 0.0);
  EXPECT_LE(ref.p, 1.0);
  try {
    paired_ttest_two_sided(a, a);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ill_posed);
  }
  EXPECT_THROW(paired_ttest_two_sided(std::vector<double>{1}, std::vector<double>{2}), Error);
}

// ---------------------------------------------------------------- MI

TEST(MutualInformation, TwoLevelsGiveLn2) {
  std::vector<float> a(1000);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = i % 2 ? 0.9f : 0.1f;
  EXPECT_NEAR(mutual_information(a, a), std::log(2.0), 1e-12);
}

TEST(MutualInformation, IndependentNoiseIsSmall) {
  const auto a = fen::testing::random_values(100000, 11);
  const auto b = fen::testing::random_values(100000, 12);
  const double mi = mutual_information(a, b);
  EXPECT_LT(mi, 0.02);
  EXPECT_GE(mi, 0.0);
  EXPECT_EQ(mutual_information(a, b), mutual_information(b, a));
}

TEST(MutualInformation, SelfInformationIsHistogramEntropy) {
  const auto a = fen::testing::random_values(5000, 13);
  std::vector<double> hist(32, 0.0);
  for (float v : a) hist[std::min<std::size_t>(31, static_cast<std::size_t>(v * 32))] += 1.0;
  double h = 0.0;
  for (double c : hist)
    if (c > 0) h -= c / 5000.0 * std::log(c / 5000.0);
  EXPECT_NEAR(mutual_information(a, a), h, 1e-12);
  EXPECT_THROW(mutual_information(std::vector<float>{}, std::vector<float>{}), Error);
}

// ---------------------------------------------------------------- binning

TEST(BinValues, CountsAndMergeRule) {
  std::vector<double> x(40), y(40);
  std::iota(x.begin(), x.end(), 0.0);
  y = x;
  auto bins = bin_values(x, y);
  ASSERT_EQ(bins.size(), 2u);
  for (const auto& b : bins) EXPECT_EQ(b.mean_x, b.mean_y);
  EXPECT_DOUBLE_EQ(bins[0].mean_x, 9.5);

  std::vector<double> x45(45);
  std::iota(x45.begin(), x45.end(), 0.0);
  bins = bin_values(x45, x45);
  ASSERT_EQ(bins.size(), 2u);
  EXPECT_EQ(bins[1].count, 25u);
  EXPECT_DOUBLE_EQ(bins[1].mean_x, 32.0);

  std::vector<double> x50(50);
  std::iota(x50.begin(), x50.end(), 0.0);
  bins = bin_values(x50, x50);
  ASSERT_EQ(bins.size(), 3u);
  EXPECT_EQ(bins[2].count, 10u);
}

TEST(BinValues, SortsByX) {
  const std::vector<double> x{3, 1, 2, 0}, y{30, 10, 20, 0};
  const auto bins = bin_values(x, y, 2);
  ASSERT_EQ(bins.size(), 2u);
  EXPECT_DOUBLE_EQ(bins[0].mean_x, 0.5);
  EXPECT_DOUBLE_EQ(bins[0].mean_y, 5.0);
  EXPECT_DOUBLE_EQ(bins[1].mean_y, 25.0);
}

// ---------------------------------------------------------------- report

TEST(Metrics, HandComputedTable) {
  std::vector<SampleResult> rows;
  for (std::size_t i = 0; i < 4; ++i) rows.push_back({i, double(i), double(i) + (i % 2 ? 1 : -1), 0.1 * i, 1.0 - 0.1 * i});
  const auto m = compute_metrics(rows, 2);
  EXPECT_DOUBLE_EQ(m.mae_mean, 1.0);
  EXPECT_DOUBLE_EQ(m.mae_std, 0.0);
  ASSERT_TRUE(m.corr_pred_true.has_value());
  EXPECT_FALSE(m.corr_unc_abserr.has_value());  // |error| has zero variance
  ASSERT_TRUE(m.corr_unc_mi.has_value());
  EXPECT_NEAR(*m.corr_unc_mi, -1.0, 1e-12);
}

TEST(Report, SelfComparisonGivesZeroT) {
  const auto& ds = moving_dataset();
  const auto m = fresh_model();
  EvalConfig cfg;
  cfg.n_mc = 20;
  const auto r = evaluate_report(*m, "a", *m, "b", ds, nullptr, cfg);
  EXPECT_EQ(r.ttest_test.t, 0.0);
  EXPECT_EQ(r.ttest_test.p, 1.0);
  EXPECT_EQ(r.a.test.mae_mean, r.b.test.mae_mean);
}

TEST(Report, OracleModelHasZeroError) {
  const auto ds = small_dataset(0.0);
  const ConstantRegressor zero(0.0f, 33);
  EvalConfig cfg;
  cfg.n_mc = 5;
  const auto r = evaluate_report(zero, "oracle", zero, "oracle2", ds, nullptr, cfg);
  EXPECT_EQ(r.a.test.mae_mean, 0.0);
  EXPECT_EQ(r.a.test.mae_std, 0.0);
  EXPECT_FALSE(r.a.test.corr_pred_true.has_value());  // labels and predictions constant
  const auto j = report_json(r);
  EXPECT_TRUE(j["models"]["a"]["test"]["corr_pred_true"].is_null());
}

TEST(Report, RecomputesFromEmittedCsvAndIsReproducible) {
  const auto& ds = moving_dataset();
  const auto m = fresh_model();
  const ConstantRegressor constant(5.0f, 33);
  const auto shifted = data::shifted_test_set(ds, data::dataset_subjects(ds), 2, 10, 1);
  EvalConfig cfg;
  cfg.n_mc = 20;
  cfg.per_bin = 5;
  const auto r = evaluate_report(*m, "fen", constant, "const", ds, &shifted, cfg);
  const auto d1 = fen::testing::scratch_dir("report1");
  write_report(d1, r);
  for (const auto& [name, set, metrics] :
       {std::tuple{"fen", "test", &r.a.test}, std::tuple{"fen", "shifted", &*r.a.shifted},
        std::tuple{"const", "test", &r.b.test}}) {
    const auto rows = read_samples_csv(d1 / (std::string("samples_") + name + "_" + set + ".csv"));
    const auto again = compute_metrics(rows, cfg.per_bin);
    EXPECT_NEAR(again.mae_mean, metrics->mae_mean, 1e-9);
    EXPECT_NEAR(again.mae_std, metrics->mae_std, 1e-9);
    ASSERT_EQ(again.corr_pred_true.has_value(), metrics->corr_pred_true.has_value());
    if (again.corr_pred_true) EXPECT_NEAR(*again.corr_pred_true, *metrics->corr_pred_true, 1e-9);
    if (again.corr_unc_abserr) EXPECT_NEAR(*again.corr_unc_abserr, *metrics->corr_unc_abserr, 1e-9);
    if (again.corr_unc_mi) EXPECT_NEAR(*again.corr_unc_mi, *metrics->corr_unc_mi, 1e-9);
  }
  for (const char* kind : {"pred_vs_true", "unc_vs_abserr", "mi_vs_unc"})
    EXPECT_TRUE(std::filesystem::exists(d1 / (std::string("binned_fen_shifted_") + kind + ".csv")));
  // Worker count does not change the report; files are byte-identical.
  cfg.workers = 3;
  const auto r2 = evaluate_report(*m, "fen", constant, "const", ds, &shifted, cfg);
  cfg.workers = 1;
  auto r1 = r2;
  r1.config.workers = 1;
  const auto d2 = fen::testing::scratch_dir("report2");
  write_report(d2, r1);
  for (const auto& entry : std::filesystem::directory_iterator(d1)) {
    std::ifstream fa(entry.path(), std::ios::binary), fb(d2 / entry.path().filename(), std::ios::binary);
    const std::string a((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    const std::string b((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    EXPECT_EQ(a, b) << entry.path().filename();
  }
  const auto j = report_json(r);
  EXPECT_TRUE(j["ttest_abs_error"].contains("shifted"));
  const double p = j["ttest_abs_error"]["test"]["p"].get<double>();
  EXPECT_GE(p, 0.0);
  EXPECT_LE(p, 1.0);
}

TEST(Report, ShiftedSetFromOtherSplitsIsRefused) {
  const auto& ds = moving_dataset();
  auto other = ds;
  other.splits.begin()->second = other.splits.begin()->second == data::Split::test ? data::Split::train
                                                                                   : data::Split::test;
  const ConstantRegressor constant(5.0f, 33);
  EvalConfig cfg;
  cfg.n_mc = 2;
  try {
    evaluate_report(constant, "a", constant, "b", ds, &other, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::format);
  }
}

TEST(EvalConfigJson, RoundTrip) {
  EvalConfig c;
  c.n_mc = 17;
  c.mi_bins = 8;
  const auto back = nlohmann::json(c).get<EvalConfig>();
  EXPECT_EQ(back.n_mc, 17u);
  EXPECT_EQ(back.mi_bins, 8u);
  EXPECT_EQ(EvalConfig{}.n_mc, 200u);
}
