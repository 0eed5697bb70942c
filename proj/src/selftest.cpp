#include "focalerrornet/selftest.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <numbers>
#include <string>

#include "focalerrornet/bspline.hpp"
#include "focalerrornet/checkpoint.hpp"
#include "focalerrornet/evaluation.hpp"
#include "focalerrornet/focalnet.hpp"
#include "focalerrornet/gradcheck.hpp"
#include "focalerrornet/ops.hpp"

namespace fen {

using nlohmann::json;

namespace {

struct Outcome {
  bool passed;
  std::string detail;
};

Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-scale, scale);
  return Tensor<double>(std::move(shape), std::move(v));
}

Outcome grad_outcome(const GraphFn& f, std::vector<Tensor<double>> inputs, double tol,
                     double epsilon = 1e-3) {
  const auto r = grad_check(f, std::move(inputs), epsilon);
  return {r.max_relative_error <= tol, "max_rel_err=" + std::to_string(r.max_relative_error)};
}

Outcome check_conv_grad() {
  Rng rng(11, 1);
  return grad_outcome(
      [](Tape<double>& t, std::span<const Tensor<double>> in) {
        return ops::sum(t, ops::gelu(t, ops::conv3d(t, in[0], in[1], in[2], {2, 1, 1})));
      },
      {random_tensor({1, 2, 5, 5, 5}, rng), random_tensor({3, 2, 3, 3, 3}, rng, 0.5),
       random_tensor({3}, rng)},
      1e-4);
}

Outcome check_focal_block_grad() {
  Rng rng(12, 1);
  const net::FocalModulationConfig cfg{4, 2, {3, 5}, true};
  auto p = net::init_focal_block<double>(cfg, 2, rng);
  // Only the input is checked here; the unit suite checks every parameter.
  return grad_outcome(
      [p, cfg](Tape<double>& t, std::span<const Tensor<double>> in) {
        return ops::sum(t, net::focal_block_forward(t, in[0], p, cfg));
      },
      {random_tensor({1, 4, 4, 4, 4}, rng)}, 1e-4, 1e-5);
}

Outcome check_partition_of_unity() {
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const auto b = bspline_basis(i / 1000.0);
    worst = std::max(worst, std::abs(b[0] + b[1] + b[2] + b[3] - 1.0));
  }
  return {worst <= 1e-12, "max_dev=" + std::to_string(worst)};
}

Outcome check_identity_warp() {
  Rng rng(13, 1);
  Volume3D vol({12, 10, 9}, {0.5, 0.5, 0.5});
  for (auto& v : vol.data) v = static_cast<float>(rng.uniform());
  const auto grid = BSplineGrid::covering(vol, 6);
  const auto out = warp_volume(vol, grid);
  return {out.data == vol.data, "zero grid warp bit-identical"};
}

Outcome check_constant_field() {
  Volume3D vol({10, 10, 10}, {0.5, 0.5, 0.5});
  auto grid = BSplineGrid::covering(vol, 7);
  for (std::size_t k = 0; k < grid.dims[2]; ++k)
    for (std::size_t j = 0; j < grid.dims[1]; ++j)
      for (std::size_t i = 0; i < grid.dims[0]; ++i) grid.set_control(i, j, k, {1.0, 2.0, 2.0});
  const auto err = error_field(grid, vol);
  double worst = 0.0;
  for (float e : err.data) worst = std::max(worst, std::abs(e - 3.0));
  return {worst <= 1e-6, "max_dev=" + std::to_string(worst)};
}

Outcome check_landmark_fit() {
  Rng rng(14, 1);
  Volume3D vol({64, 64, 64}, {0.5, 0.5, 0.5});
  auto truth = BSplineGrid::anchored(vol, {10.0, 10.0, 10.0});
  for (auto& d : truth.disp) d = rng.uniform(-3.0, 3.0);
  LandmarkSet lms;
  for (int i = 0; i < 15; ++i) {
    const Vec3 m{rng.uniform(2.0, 29.0), rng.uniform(2.0, 29.0), rng.uniform(2.0, 29.0)};
    const Vec3 u = displacement_at(truth, m);
    lms.push_back({{m[0] + u[0], m[1] + u[1], m[2] + u[2]}, m});
  }
  const auto fit = fit_landmark_bspline(lms, vol, {10.0, 10.0, 10.0}, 1e-6);
  return {fit.mtre <= 1e-3, "mtre_mm=" + std::to_string(fit.mtre)};
}

Outcome check_statistics() {
  const std::vector<double> x{1, 2, 3, 4}, y{1, 3, 2, 4};
  const double r = eval::pearson_corr(x, y);
  const std::vector<double> d{1, 2, 3}, z{0, 0, 0};
  const auto t = eval::paired_ttest_two_sided(d, z);
  std::vector<float> a(1000);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = i % 2 ? 1.0f : 0.0f;
  const double mi = eval::mutual_information(a, a);
  const bool ok = std::abs(r - 0.8) <= 1e-12 && std::abs(t.t - 3.4641) <= 1e-3 &&
                  std::abs(t.p - 0.0742) <= 1e-3 && std::abs(mi - std::numbers::ln2) <= 1e-9;
  return {ok, "r=" + std::to_string(r) + " t=" + std::to_string(t.t) + " p=" +
                  std::to_string(t.p) + " mi=" + std::to_string(mi)};
}

Outcome check_mc_dropout() {
  Rng rng(15, 1);
  net::FocalErrorNetConfig cfg;
  cfg.stem_dim = 4;
  cfg.stage_dims = {4, 8};
  cfg.blocks_per_stage = {1, 1};
  cfg.mlp_hidden = {8, 8};
  cfg.patch_size = 9;
  cfg.dropout_p = 0.0;
  net::FocalErrorNet<float> model(cfg, rng);
  std::vector<float> mri(729), us(729);
  for (auto& v : mri) v = static_cast<float>(rng.uniform());
  for (auto& v : us) v = static_cast<float>(rng.uniform());
  const auto p0 = eval::mc_predict(model, mri, us, 20, Rng(1, 2));
  cfg.dropout_p = 0.2;
  net::FocalErrorNet<float> model2(cfg, rng);
  const auto p2 = eval::mc_predict(model2, mri, us, 20, Rng(1, 2));
  return {p0.std_mm == 0.0 && p2.std_mm > 0.0,
          "std(p=0)=" + std::to_string(p0.std_mm) + " std(p=0.2)=" + std::to_string(p2.std_mm)};
}

Outcome check_formats() {
  Rng rng(16, 1);
  std::vector<NamedTensor> ts;
  ts.push_back({"w", Tensor<float>({2, 3}, {1, 2, 3, 4, 5, 6.5f})});
  ts.push_back({"b", Tensor<float>({1}, {-7.25f})});
  const auto back = decode_checkpoint(encode_checkpoint(ts));
  bool ok = back.size() == 2 && back[0].name == "w" && back[1].tensor.item() == -7.25f;
  Volume3D vol({3, 4, 5}, {0.5, 0.6, 0.7}, {1, 2, 3});
  for (auto& v : vol.data) v = static_cast<float>(rng.uniform());
  const auto vb = decode_volume(encode_volume(vol));
  ok = ok && vb.data == vol.data && vb.spacing == vol.spacing && vb.origin == vol.origin;
  return {ok, "FENP/FENV round-trip"};
}

}  // namespace

json run_selftest() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> checks{
      {"gradcheck_conv3d_gelu", check_conv_grad},
      {"gradcheck_focal_block", check_focal_block_grad},
      {"bspline_partition_of_unity", check_partition_of_unity},
      {"bspline_identity_warp", check_identity_warp},
      {"bspline_constant_field", check_constant_field},
      {"landmark_fit_mtre", check_landmark_fit},
      {"statistics_oracles", check_statistics},
      {"mc_dropout_contract", check_mc_dropout},
      {"format_round_trip", check_formats},
  };
  json out{{"checks", json::array()}};
  bool all = true;
  for (const auto& [name, fn] : checks) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o{false, ""};
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    all = all && o.passed;
    out["checks"].push_back({{"name", name}, {"passed", o.passed}, {"detail", o.detail},
                             {"seconds", secs}});
  }
  out["passed"] = all;
  return out;
}

// ---------------------------------------------------------------------------
// Gradient suite

namespace {

/// Fixed random projection <y, R> so that every output coordinate carries a
/// distinct weight (a plain sum hides transposition errors in linear ops).
Tensor<double> probe(Tape<double>& t, const Tensor<double>& y) {
  Rng rng(0x9e37, y.numel());
  return ops::sum(t, ops::mul(t, y, random_tensor(y.shape(), rng)));
}

struct GradCase {
  std::string name;
  GraphFn graph;
  std::vector<Tensor<double>> inputs;
  double tolerance;
  double epsilon;
};

/// Values spaced at least `gap` apart in random order, so max-pool and ReLU
/// stay away from ties and kinks under +-epsilon perturbations.
Tensor<double> distinct_tensor(Shape shape, Rng& rng, double gap = 0.01) {
  const std::size_t n = numel(shape);
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = (static_cast<double>(i) - 0.5 * n) * gap + gap / 2;
  for (std::size_t i = n; i > 1; --i) std::swap(v[i - 1], v[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)))]);
  return Tensor<double>(std::move(shape), std::move(v));
}

/// GELU' vanishes at x = -0.7518; there the relative error of any finite
/// difference is dominated by its truncation term, like a ReLU kink.
Tensor<double> away_from_gelu_extremum(Tensor<double> t) {
  for (auto& v : t.mutable_data()) {
    if (std::abs(v + 0.7518) < 0.15) v += 0.3;
  }
  return t;
}

std::vector<GradCase> gradient_cases(std::uint64_t seed) {
  Rng rng(seed, 0x67ad);
  std::vector<GradCase> cases;
  const auto op = [&](std::string name, GraphFn g, std::vector<Tensor<double>> in,
                      double epsilon = 1e-3) {
    cases.push_back({std::move(name), std::move(g), std::move(in), 1e-4, epsilon});
  };
  op("conv3d_standard_stride2",
     [](Tape<double>& t, std::span<const Tensor<double>> in) {
       return probe(t, ops::conv3d(t, in[0], in[1], in[2], {2, 1, 1}));
     },
     {random_tensor({2, 2, 5, 5, 5}, rng), random_tensor({3, 2, 3, 3, 3}, rng, 0.5),
      random_tensor({3}, rng)});
  op("conv3d_pointwise",
     [](Tape<double>& t, std::span<const Tensor<double>> in) {
       return probe(t, ops::conv3d(t, in[0], in[1], in[2], {1, 0, 1}));
     },
     {random_tensor({1, 3, 4, 4, 4}, rng), random_tensor({2, 3, 1, 1, 1}, rng),
      random_tensor({2}, rng)});
  op("conv3d_depthwise",
     [](Tape<double>& t, std::span<const Tensor<double>> in) {
       return probe(t, ops::conv3d(t, in[0], in[1], Tensor<double>{}, {1, 2, 3}));
     },
     {random_tensor({1, 3, 5, 5, 5}, rng), random_tensor({3, 1, 5, 5, 5}, rng, 0.5)});
  op("linear",
     [](Tape<double>& t, std::span<const Tensor<double>> in) {
       return probe(t, ops::linear(t, in[0], in[1], in[2]));
     },
     {random_tensor({4, 8}, rng), random_tensor({8, 3}, rng), random_tensor({3}, rng)});
  op("gelu",
     [](Tape<double>& t, std::span<const Tensor<double>> in) { return probe(t, ops::gelu(t, in[0])); },
     {away_from_gelu_extremum(random_tensor({2, 3, 4}, rng, 3.0))});
  op("relu",
     [](Tape<double>& t, std::span<const Tensor<double>> in) { return probe(t, ops::relu(t, in[0])); },
     {distinct_tensor({2, 3, 4}, rng, 0.05)});
  op("add_broadcast",
     [](Tape<double>& t, std::span<const Tensor<double>> in) { return probe(t, ops::add(t, in[0], in[1])); },
     {random_tensor({2, 3, 3, 3, 3}, rng), random_tensor({2, 3, 1, 1, 1}, rng)});
  op("mul_broadcast",
     [](Tape<double>& t, std::span<const Tensor<double>> in) { return probe(t, ops::mul(t, in[0], in[1])); },
     {random_tensor({2, 3, 3, 3, 3}, rng), random_tensor({2, 1, 3, 3, 3}, rng)});
  op("affine",
     [](Tape<double>& t, std::span<const Tensor<double>> in) { return probe(t, ops::affine(t, in[0], 2.5, -0.75)); },
     {random_tensor({3, 4}, rng)});
  op("global_avg_pool3d",
     [](Tape<double>& t, std::span<const Tensor<double>> in) { return probe(t, ops::global_avg_pool3d(t, in[0])); },
     {random_tensor({2, 3, 3, 4, 5}, rng)});
  op("max_pool3d",
     [](Tape<double>& t, std::span<const Tensor<double>> in) { return probe(t, ops::max_pool3d(t, in[0])); },
     {distinct_tensor({1, 2, 5, 4, 4}, rng)});
  op("dropout_active",
     [](Tape<double>& t, std::span<const Tensor<double>> in) {
       Rng r(7, 7);  // same mask on every evaluation
       return probe(t, ops::dropout(t, in[0], 0.3, r, true));
     },
     {random_tensor({4, 16}, rng)});
  op("layer_norm_channels",
     [](Tape<double>& t, std::span<const Tensor<double>> in) {
       return probe(t, ops::layer_norm_channels(t, in[0], in[1], in[2]));
     },
     {random_tensor({2, 16, 3, 3, 3}, rng, 2.0), random_tensor({16}, rng), random_tensor({16}, rng)},
     1e-5);
  op("channel_slice",
     [](Tape<double>& t, std::span<const Tensor<double>> in) { return probe(t, ops::channel_slice(t, in[0], 1, 2)); },
     {random_tensor({2, 4, 2, 2, 2}, rng)});
  op("reshape",
     [](Tape<double>& t, std::span<const Tensor<double>> in) { return probe(t, ops::reshape(t, in[0], {3, 8})); },
     {random_tensor({2, 3, 4}, rng)});
  op("mse_loss",
     [](Tape<double>& t, std::span<const Tensor<double>> in) {
       Rng r(3, 3);
       return ops::mse_loss(t, in[0], random_tensor({5, 1}, r));
     },
     {random_tensor({5, 1}, rng)});

  const net::FocalModulationConfig fm{4, 2, {3, 5}, true};
  {
    Rng prng(seed, 0x70ca);
    auto p = net::init_focal_modulation<double>(fm, prng);
    op("focal_modulation",
       [p, fm](Tape<double>& t, std::span<const Tensor<double>> in) {
         return probe(t, net::focal_modulation_forward(t, in[0], p, fm));
       },
       {random_tensor({1, 4, 4, 4, 4}, rng)}, 1e-5);
    auto b = net::init_focal_block<double>(fm, 2, prng);
    op("focal_block",
       [b, fm](Tape<double>& t, std::span<const Tensor<double>> in) {
         return probe(t, net::focal_block_forward(t, in[0], b, fm));
       },
       {random_tensor({1, 4, 4, 4, 4}, rng)}, 1e-5);
  }

  // Full reduced-width models: input and every parameter are perturbed.
  const auto model_case = [&](std::string name, std::shared_ptr<net::Regressor<double>> model) {
    std::vector<Tensor<double>> inputs{random_tensor({1, 2, 9, 9, 9}, rng, 0.5)};
    for (auto& v : inputs[0].mutable_data()) v += 0.5;  // intensities in [0, 1]
    for (const auto& p : model->parameters()) {
      // Randomize biases and norm offsets too, so no gradient is trivially zero.
      Tensor<double> t = p.tensor.clone();
      Rng prng(seed, std::hash<std::string>{}(p.name) & 0xffff);
      for (auto& v : t.mutable_data()) v += prng.uniform(-0.1, 0.1);
      inputs.push_back(t);
    }
    cases.push_back({std::move(name),
                     [model](Tape<double>& t, std::span<const Tensor<double>> in) {
                       model->bind_parameters(in.subspan(1));
                       Rng r(9, 9);
                       return ops::sum(t, model->forward(t, in[0], net::Mode::train, r));
                     },
                     std::move(inputs), 1e-3, 1e-5});
  };
  {
    net::FocalErrorNetConfig cfg;
    // 8 channels keep the per-position layer-norm variance away from zero;
    // stride 1 (9^3 -> 9^3 -> 5^3) lets every depth-wise tap see several
    // positions. Both keep the check about curvature, not roundoff.
    cfg.stem_dim = 8;
    cfg.stem_stride = 1;
    cfg.stage_dims = {8, 8};
    cfg.blocks_per_stage = {1, 1};
    cfg.mlp_hidden = {8, 8};
    cfg.patch_size = 9;
    Rng mrng(seed, 0x3111);
    model_case("focalerrornet_full_9", std::make_shared<net::FocalErrorNet<double>>(cfg, mrng));
  }
  {
    net::BaselineCnnConfig cfg;
    cfg.conv_channels = {3, 4};
    cfg.pool_schedule = {true, true};
    cfg.fc_sizes = {8};
    cfg.patch_size = 9;
    Rng mrng(seed, 0x3112);
    model_case("baseline_full_9", std::make_shared<net::BaselineCnn<double>>(cfg, mrng));
  }
  return cases;
}

}  // namespace

json run_gradient_suite(std::uint64_t seed) {
  json out{{"checks", json::array()}};
  bool all = true;
  for (auto& c : gradient_cases(seed)) {
    const auto start = std::chrono::steady_clock::now();
    json entry{{"name", c.name}, {"tolerance", c.tolerance}, {"epsilon", c.epsilon}};
    try {
      const auto r = grad_check(c.graph, std::move(c.inputs), c.epsilon);
      const bool ok = r.max_relative_error <= c.tolerance;
      all = all && ok;
      entry["passed"] = ok;
      entry["max_relative_error"] = r.max_relative_error;
      entry["coordinates"] = r.coordinates;
      entry["worst"] = {{"input", r.worst_input}, {"index", r.worst_index},
                        {"analytic", r.analytic}, {"numeric", r.numeric}};
    } catch (const std::exception& e) {
      all = false;
      entry["passed"] = false;
      entry["detail"] = std::string("exception: ") + e.what();
    }
    entry["seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    out["checks"].push_back(entry);
  }
  out["passed"] = all;
  return out;
}

}  // namespace fen
