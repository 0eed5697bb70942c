#include "focalerrornet/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "focalerrornet/binary_io.hpp"
#include "focalerrornet/parallel.hpp"

namespace fen::eval {

using nlohmann::json;

namespace {
constexpr std::uint64_t kMcStream = 0x3c;
}  // namespace

MCPrediction summarize_samples(std::vector<double> samples) {
  require(samples.size() >= 2, ErrorKind::value, "mc_predict: need n >= 2 samples");
  MCPrediction out;
  const double n = static_cast<double>(samples.size());
  out.mean_mm = std::accumulate(samples.begin(), samples.end(), 0.0) / n;
  double ss = 0.0;
  for (double s : samples) ss += (s - out.mean_mm) * (s - out.mean_mm);
  out.std_mm = std::sqrt(ss / (n - 1.0));
  out.samples = std::move(samples);
  return out;
}

MCPrediction mc_predict(const net::Regressor<float>& model, std::span<const float> mri,
                        std::span<const float> us, std::size_t n, const Rng& base) {
  require(n >= 2, ErrorKind::value, "mc_predict: need n >= 2 samples");
  Tape<float> tape(false);
  const Tensor<float> input = net::stack_pair<float>(mri, us, model.patch_size());
  const Tensor<float> features = model.features(tape, input);
  std::vector<double> samples(n);
  for (std::size_t s = 0; s < n; ++s) {
    Rng rng = base.split(s);
    samples[s] = model.head(tape, features, net::Mode::mc, rng).item();
  }
  return summarize_samples(std::move(samples));
}

double pearson_corr(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size() && x.size() >= 2, ErrorKind::dimension,
          "pearson_corr: need equal lengths >= 2");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  require(sxx > 0.0 && syy > 0.0, ErrorKind::ill_posed,
          "pearson_corr: zero variance, correlation undefined");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

namespace {

/// Continued fraction for I_x(a, b) (modified Lentz).
double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-15, kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < kEps) return h;
  }
  fail(ErrorKind::numeric, "incomplete beta: continued fraction did not converge");
}

}  // namespace

double regularized_incomplete_beta(double a, double b, double x) {
  require(a > 0.0 && b > 0.0, ErrorKind::value, "incomplete beta: a and b must be positive");
  require(x >= 0.0 && x <= 1.0, ErrorKind::value, "incomplete beta: x outside [0, 1]");
  if (x == 0.0 || x == 1.0) return x;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                           a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_two_sided_p(double t, double dof) {
  require(dof > 0.0, ErrorKind::value, "student t: dof must be positive");
  if (!std::isfinite(t)) return 0.0;
  return std::clamp(regularized_incomplete_beta(0.5 * dof, 0.5, dof / (dof + t * t)), 0.0, 1.0);
}

TTestResult paired_ttest_two_sided(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size() && a.size() >= 2, ErrorKind::dimension,
          "paired t-test: need equal lengths >= 2");
  const std::size_t n = a.size();
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
  const double nd = static_cast<double>(n);
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / nd;
  double ss = 0.0;
  for (double v : d) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / (nd - 1.0));
  require(sd > 0.0, ErrorKind::ill_posed, "paired t-test: differences have zero variance");
  TTestResult r;
  r.dof = n - 1;
  r.t = mean / (sd / std::sqrt(nd));
  r.p = student_t_two_sided_p(r.t, static_cast<double>(r.dof));
  return r;
}

double mutual_information(std::span<const float> a, std::span<const float> b, std::size_t bins) {
  require(!a.empty() && a.size() == b.size(), ErrorKind::dimension,
          "mutual_information: need equal, non-zero voxel counts");
  require(bins >= 1, ErrorKind::value, "mutual_information: bins must be >= 1");
  const auto bin_of = [bins](float v) {
    const double c = std::clamp(static_cast<double>(v), 0.0, 1.0) * static_cast<double>(bins);
    return std::min(static_cast<std::size_t>(c), bins - 1);
  };
  std::vector<std::size_t> joint(bins * bins, 0), pa(bins, 0), pb(bins, 0);
  for (std::size_t v = 0; v < a.size(); ++v) {
    const std::size_t i = bin_of(a[v]), j = bin_of(b[v]);
    ++joint[i * bins + j];
    ++pa[i];
    ++pb[j];
  }
  const double n = static_cast<double>(a.size());
  double mi = 0.0;
  for (std::size_t i = 0; i < bins; ++i) {
    for (std::size_t j = 0; j < bins; ++j) {
      const std::size_t c = joint[i * bins + j];
      if (c == 0) continue;
      const double pij = static_cast<double>(c) / n;
      mi += pij * std::log(static_cast<double>(c) * n /
                           (static_cast<double>(pa[i]) * static_cast<double>(pb[j])));
    }
  }
  return std::max(mi, 0.0);
}

std::vector<Bin> bin_values(std::span<const double> x, std::span<const double> y,
                            std::size_t per_bin) {
  require(x.size() == y.size(), ErrorKind::dimension, "bin_values: unequal lengths");
  require(per_bin >= 1, ErrorKind::value, "bin_values: per_bin must be >= 1");
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return x[i] < x[j]; });
  std::vector<std::pair<std::size_t, std::size_t>> ranges;  // [begin, end) into order
  for (std::size_t s = 0; s < order.size(); s += per_bin) {
    const std::size_t e = std::min(order.size(), s + per_bin);
    if (e - s < per_bin && e - s < (per_bin + 1) / 2 && !ranges.empty()) {
      ranges.back().second = e;
    } else {
      ranges.emplace_back(s, e);
    }
  }
  std::vector<Bin> bins;
  for (const auto& [s, e] : ranges) {
    Bin b;
    b.count = e - s;
    for (std::size_t k = s; k < e; ++k) {
      b.mean_x += x[order[k]];
      b.mean_y += y[order[k]];
    }
    b.mean_x /= static_cast<double>(b.count);
    b.mean_y /= static_cast<double>(b.count);
    bins.push_back(b);
  }
  return bins;
}

Tensor<float> ConstantRegressor::features(Tape<float>& tape, const Tensor<float>& input) const {
  require(input.rank() == 5 && input.dim(2) == patch_, ErrorKind::dimension,
          "constant model: wrong input shape " + to_string(input.shape()));
  (void)tape;
  return Tensor<float>::zeros({input.dim(0), 1});
}

Tensor<float> ConstantRegressor::head(Tape<float>& tape, const Tensor<float>& features,
                                      net::Mode, Rng&) const {
  return ops::affine(tape, features, 0.0f, value_);
}

// ---------------------------------------------------------------------------
// Metrics

namespace {

std::optional<double> guarded_corr(std::span<const double> x, std::span<const double> y) {
  try {
    return pearson_corr(x, y);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::ill_posed || e.kind() == ErrorKind::dimension) return std::nullopt;
    throw;
  }
}

std::optional<double> binned_corr(std::span<const double> x, std::span<const double> y,
                                  std::size_t per_bin) {
  const auto bins = bin_values(x, y, per_bin);
  std::vector<double> bx, by;
  for (const auto& b : bins) {
    bx.push_back(b.mean_x);
    by.push_back(b.mean_y);
  }
  return guarded_corr(bx, by);
}

struct Columns {
  std::vector<double> truth, pred, unc, mi, abserr;
};

Columns columns(const std::vector<SampleResult>& samples) {
  Columns c;
  for (const auto& s : samples) {
    c.truth.push_back(s.true_mm);
    c.pred.push_back(s.pred_mm);
    c.unc.push_back(s.unc_mm);
    c.mi.push_back(s.mi);
    c.abserr.push_back(std::abs(s.pred_mm - s.true_mm));
  }
  return c;
}

}  // namespace

SetMetrics compute_metrics(std::vector<SampleResult> samples, std::size_t per_bin) {
  require(!samples.empty(), ErrorKind::value, "metrics: empty sample table");
  SetMetrics m;
  const Columns c = columns(samples);
  const double n = static_cast<double>(samples.size());
  m.mae_mean = std::accumulate(c.abserr.begin(), c.abserr.end(), 0.0) / n;
  double ss = 0.0;
  for (double e : c.abserr) ss += (e - m.mae_mean) * (e - m.mae_mean);
  m.mae_std = samples.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  m.corr_pred_true = guarded_corr(c.pred, c.truth);
  m.corr_unc_abserr = guarded_corr(c.unc, c.abserr);
  m.corr_unc_mi = guarded_corr(c.unc, c.mi);
  // Binned scatter orientation follows the plots: pred vs true (binned on
  // true), uncertainty vs |error| (binned on uncertainty), MI vs uncertainty
  // (binned on MI).
  m.binned_corr_pred_true = binned_corr(c.truth, c.pred, per_bin);
  m.binned_corr_unc_abserr = binned_corr(c.unc, c.abserr, per_bin);
  m.binned_corr_mi_unc = binned_corr(c.mi, c.unc, per_bin);
  m.samples = std::move(samples);
  return m;
}

void to_json(json& j, const EvalConfig& c) {
  j = json{{"n_mc", c.n_mc}, {"seed", c.seed}, {"workers", c.workers},
           {"per_bin", c.per_bin}, {"mi_bins", c.mi_bins}};
}

void from_json(const json& j, EvalConfig& c) {
  require(j.is_object(), ErrorKind::format, "EvalConfig: expected an object");
  for (const auto& [key, _] : j.items()) {
    require(key == "n_mc" || key == "seed" || key == "workers" || key == "per_bin" || key == "mi_bins",
            ErrorKind::format, "EvalConfig: unknown field \"" + key + "\"");
  }
  const EvalConfig d;
  c.n_mc = j.value("n_mc", d.n_mc);
  c.seed = j.value("seed", d.seed);
  c.workers = j.value("workers", d.workers);
  c.per_bin = j.value("per_bin", d.per_bin);
  c.mi_bins = j.value("mi_bins", d.mi_bins);
}

std::vector<SampleResult> predict_set(const net::Regressor<float>& model,
                                      const data::Dataset& dataset,
                                      std::span<const std::size_t> indices,
                                      const EvalConfig& config) {
  require(model.patch_size() == dataset.patch_size, ErrorKind::format,
          "evaluate: model patch size differs from the dataset");
  std::vector<SampleResult> out(indices.size());
  parallel_for(indices.size(), config.workers, [&](std::size_t i) {
    const std::size_t idx = indices[i];
    const auto& s = dataset.samples[idx];
    const MCPrediction mc =
        mc_predict(model, s.mri, s.us, config.n_mc, Rng(config.seed, kMcStream).split(idx));
    out[i] = {idx, s.label_mm, mc.mean_mm, mc.std_mm, mutual_information(s.mri, s.us, config.mi_bins)};
  });
  return out;
}

namespace {

TTestResult compare(const SetMetrics& a, const SetMetrics& b) {
  const Columns ca = columns(a.samples), cb = columns(b.samples);
  // Identical error lists (self-comparison) are reported as t = 0, p = 1
  // rather than as the zero-variance error of the raw test.
  if (ca.abserr == cb.abserr) return {0.0, 1.0, ca.abserr.size() - 1};
  return paired_ttest_two_sided(ca.abserr, cb.abserr);
}

}  // namespace

MetricsReport evaluate_report(const net::Regressor<float>& model_a, std::string name_a,
                              const net::Regressor<float>& model_b, std::string name_b,
                              const data::Dataset& test_set, const data::Dataset* shifted_set,
                              const EvalConfig& config) {
  require(config.n_mc >= 2, ErrorKind::value, "evaluate: n_mc must be >= 2");
  const auto test_idx = test_set.indices(data::Split::test);
  require(test_idx.size() >= 2, ErrorKind::value, "evaluate: need >= 2 test samples");
  MetricsReport r;
  r.config = config;
  r.a.name = std::move(name_a);
  r.b.name = std::move(name_b);
  r.a.test = compute_metrics(predict_set(model_a, test_set, test_idx, config), config.per_bin);
  r.b.test = compute_metrics(predict_set(model_b, test_set, test_idx, config), config.per_bin);
  r.ttest_test = compare(r.a.test, r.b.test);
  if (shifted_set) {
    require(shifted_set->splits == test_set.splits, ErrorKind::format,
            "evaluate: shifted set was built from different splits");
    std::vector<std::size_t> all(shifted_set->samples.size());
    std::iota(all.begin(), all.end(), 0);
    r.a.shifted = compute_metrics(predict_set(model_a, *shifted_set, all, config), config.per_bin);
    r.b.shifted = compute_metrics(predict_set(model_b, *shifted_set, all, config), config.per_bin);
    r.ttest_shifted = compare(*r.a.shifted, *r.b.shifted);
  }
  return r;
}

namespace {

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json metrics_json(const SetMetrics& m) {
  return json{{"n", m.samples.size()},
              {"mae_mean", m.mae_mean},
              {"mae_std", m.mae_std},
              {"corr_pred_true", opt(m.corr_pred_true)},
              {"corr_unc_abserr", opt(m.corr_unc_abserr)},
              {"corr_unc_mi", opt(m.corr_unc_mi)},
              {"binned_corr_pred_true", opt(m.binned_corr_pred_true)},
              {"binned_corr_unc_abserr", opt(m.binned_corr_unc_abserr)},
              {"binned_corr_mi_unc", opt(m.binned_corr_mi_unc)}};
}

json ttest_json(const TTestResult& t) { return json{{"t", t.t}, {"p", t.p}, {"dof", t.dof}}; }

json model_json(const ModelReport& m) {
  json j{{"name", m.name}, {"test", metrics_json(m.test)}};
  if (m.shifted) j["shifted"] = metrics_json(*m.shifted);
  return j;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  io::write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_set(const std::filesystem::path& dir, const std::string& model, const std::string& set,
               const SetMetrics& m, std::size_t per_bin) {
  std::string text = "id,true_mm,pred_mm,unc_mm,mi\n";
  for (const auto& s : m.samples) {
    text += std::to_string(s.id) + "," + fmt(s.true_mm) + "," + fmt(s.pred_mm) + "," +
            fmt(s.unc_mm) + "," + fmt(s.mi) + "\n";
  }
  write_text(dir / ("samples_" + model + "_" + set + ".csv"), text);

  const Columns c = columns(m.samples);
  const auto binned = [&](const char* kind, const char* xn, const char* yn,
                          const std::vector<double>& x, const std::vector<double>& y) {
    std::string t = std::string("bin,count,") + xn + "," + yn + "\n";
    const auto bins = bin_values(x, y, per_bin);
    for (std::size_t i = 0; i < bins.size(); ++i) {
      t += std::to_string(i) + "," + std::to_string(bins[i].count) + "," + fmt(bins[i].mean_x) +
           "," + fmt(bins[i].mean_y) + "\n";
    }
    write_text(dir / ("binned_" + model + "_" + set + "_" + kind + ".csv"), t);
  };
  binned("pred_vs_true", "true_mm", "pred_mm", c.truth, c.pred);
  binned("unc_vs_abserr", "unc_mm", "abserr_mm", c.unc, c.abserr);
  binned("mi_vs_unc", "mi", "unc_mm", c.mi, c.unc);
}

}  // namespace

json report_json(const MetricsReport& r) {
  // Worker count is an execution detail (it lives in resolved_config.json);
  // leaving it out keeps reports byte-identical across parallelism.
  json config = r.config;
  config.erase("workers");
  json j{{"config", config},
         {"models", json{{"a", model_json(r.a)}, {"b", model_json(r.b)}}},
         {"ttest_abs_error", json{{"test", ttest_json(r.ttest_test)}}}};
  if (r.ttest_shifted) j["ttest_abs_error"]["shifted"] = ttest_json(*r.ttest_shifted);
  return j;
}

void write_report(const std::filesystem::path& dir, const MetricsReport& report) {
  write_text(dir / "report.json", report_json(report).dump(2) + "\n");
  for (const ModelReport* m : {&report.a, &report.b}) {
    write_set(dir, m->name, "test", m->test, report.config.per_bin);
    if (m->shifted) write_set(dir, m->name, "shifted", *m->shifted, report.config.per_bin);
  }
}

std::vector<SampleResult> read_samples_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  require(line == "id,true_mm,pred_mm,unc_mm,mi", ErrorKind::format,
          path.string() + ": unexpected header");
  std::vector<SampleResult> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    SampleResult s;
    char comma;
    ss >> s.id >> comma >> s.true_mm >> comma >> s.pred_mm >> comma >> s.unc_mm >> comma >> s.mi;
    require(static_cast<bool>(ss), ErrorKind::format, path.string() + ": malformed row");
    out.push_back(s);
  }
  return out;
}

}  // namespace fen::eval
