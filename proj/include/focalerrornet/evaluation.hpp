#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "focalerrornet/dataset.hpp"
#include "focalerrornet/focalnet.hpp"

namespace fen::eval {

struct MCPrediction {
  std::vector<double> samples;  // mm
  double mean_mm = 0.0;
  double std_mm = 0.0;  // sample (n - 1) standard deviation
};

/// Mean and sample standard deviation in 64-bit arithmetic.
MCPrediction summarize_samples(std::vector<double> samples);

/// n mc-mode passes; pass s draws its dropout masks from base.split(s).
/// The deterministic trunk is evaluated once and only the head is resampled.
MCPrediction mc_predict(const net::Regressor<float>& model, std::span<const float> mri,
                        std::span<const float> us, std::size_t n, const Rng& base);

/// Sample Pearson correlation; zero variance is an ill-posed error.
double pearson_corr(std::span<const double> x, std::span<const double> y);

/// Regularized incomplete beta I_x(a, b) via Lentz's continued fraction.
double regularized_incomplete_beta(double a, double b, double x);

/// Two-sided p-value of Student's t with `dof` degrees of freedom.
double student_t_two_sided_p(double t, double dof);

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  std::size_t dof = 0;
};

/// d = a - b, t = mean(d) / (sd(d) / sqrt(n)), p two-sided with n - 1 dof.
/// sd(d) == 0 is an ill-posed error.
TTestResult paired_ttest_two_sided(std::span<const double> a, std::span<const double> b);

/// Histogram MI (nats) with `bins` equal-width bins on [0, 1] per axis.
double mutual_information(std::span<const float> a, std::span<const float> b,
                          std::size_t bins = 32);

struct Bin {
  double mean_x = 0.0;
  double mean_y = 0.0;
  std::size_t count = 0;
};

/// Sort by x (stable), cut into runs of per_bin; a final partial run is kept
/// when it holds at least per_bin / 2 values and merged into the previous
/// bin otherwise.
std::vector<Bin> bin_values(std::span<const double> x, std::span<const double> y,
                            std::size_t per_bin = 20);

/// Predicts a constant for every input (the oracle-zero model of the CLI).
class ConstantRegressor final : public net::Regressor<float> {
 public:
  ConstantRegressor(float value, std::size_t patch_size) : value_(value), patch_(patch_size) {}
  std::string kind() const override { return "constant"; }
  nlohmann::json config_json() const override {
    return {{"value", value_}, {"patch_size", patch_}};
  }
  std::size_t patch_size() const override { return patch_; }
  std::unique_ptr<net::Regressor<float>> clone() const override {
    return std::make_unique<ConstantRegressor>(*this);
  }
  Tensor<float> features(Tape<float>& tape, const Tensor<float>& input) const override;
  Tensor<float> head(Tape<float>& tape, const Tensor<float>& features, net::Mode mode,
                     Rng& rng) const override;

 protected:
  void collect(std::vector<Slot>&) override {}

 private:
  float value_;
  std::size_t patch_;
};

struct SampleResult {
  std::size_t id = 0;  // record index in the evaluated set
  double true_mm = 0.0;
  double pred_mm = 0.0;
  double unc_mm = 0.0;
  double mi = 0.0;
};

struct SetMetrics {
  std::vector<SampleResult> samples;
  double mae_mean = 0.0;
  double mae_std = 0.0;  // sample standard deviation of |error|
  // Undefined (zero-variance) correlations are absent.
  std::optional<double> corr_pred_true;
  std::optional<double> corr_unc_abserr;
  std::optional<double> corr_unc_mi;
  // Same correlations computed on the binned scatter points.
  std::optional<double> binned_corr_pred_true;
  std::optional<double> binned_corr_unc_abserr;
  std::optional<double> binned_corr_mi_unc;
};

/// All metrics derived from a per-sample table.
SetMetrics compute_metrics(std::vector<SampleResult> samples, std::size_t per_bin = 20);

struct EvalConfig {
  std::size_t n_mc = 200;
  std::uint64_t seed = 1;
  std::size_t workers = 1;
  std::size_t per_bin = 20;
  std::size_t mi_bins = 32;
};

void to_json(nlohmann::json& j, const EvalConfig& c);
void from_json(const nlohmann::json& j, EvalConfig& c);

/// MC predictions and MI for every sample of `indices`; MC streams are keyed
/// by record index, so any worker count gives the same table.
std::vector<SampleResult> predict_set(const net::Regressor<float>& model,
                                      const data::Dataset& dataset,
                                      std::span<const std::size_t> indices,
                                      const EvalConfig& config);

struct ModelReport {
  std::string name;
  SetMetrics test;
  std::optional<SetMetrics> shifted;
};

struct MetricsReport {
  EvalConfig config;
  ModelReport a;
  ModelReport b;
  /// Paired t-test on the two models' absolute errors, per set.
  TTestResult ttest_test;
  std::optional<TTestResult> ttest_shifted;
};

/// Evaluates both models on the test split of `test_set` and, when given,
/// on all samples of `shifted_set`.
MetricsReport evaluate_report(const net::Regressor<float>& model_a, std::string name_a,
                              const net::Regressor<float>& model_b, std::string name_b,
                              const data::Dataset& test_set, const data::Dataset* shifted_set,
                              const EvalConfig& config);

nlohmann::json report_json(const MetricsReport& report);

/// Writes report.json, samples_<model>_<set>.csv and the binned CSVs
/// binned_<model>_<set>_{pred_vs_true,unc_vs_abserr,mi_vs_unc}.csv.
void write_report(const std::filesystem::path& dir, const MetricsReport& report);

/// Reads a per-sample CSV written by write_report.
std::vector<SampleResult> read_samples_csv(const std::filesystem::path& path);

}  // namespace fen::eval
