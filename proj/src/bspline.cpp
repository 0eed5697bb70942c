#include "focalerrornet/bspline.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <Eigen/Dense>

#include "focalerrornet/binary_io.hpp"

namespace fen {

std::array<double, 4> bspline_basis(double u) {
  require(u >= 0.0 && u < 1.0, ErrorKind::value,
          "bspline_basis: u = " + std::to_string(u) + " outside [0, 1)");
  const double u2 = u * u, u3 = u2 * u, v = 1.0 - u;
  return {v * v * v / 6.0, (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
          (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0, u3 / 6.0};
}

BSplineGrid::BSplineGrid(Index3 dims_, Vec3 spacing_, Vec3 origin_)
    : dims(dims_), spacing(spacing_), origin(origin_), disp(3 * dims_[0] * dims_[1] * dims_[2], 0.0) {}

Vec3 BSplineGrid::control(std::size_t a, std::size_t b, std::size_t c) const {
  const std::size_t i = 3 * point_index(a, b, c);
  return {disp[i], disp[i + 1], disp[i + 2]};
}

void BSplineGrid::set_control(std::size_t a, std::size_t b, std::size_t c, const Vec3& d) {
  const std::size_t i = 3 * point_index(a, b, c);
  disp[i] = d[0];
  disp[i + 1] = d[1];
  disp[i + 2] = d[2];
}

namespace {

/// Supporting control-point range and weights along one axis.
struct AxisWeights {
  std::size_t first = 0;  // index of the control point receiving w[0]
  std::array<double, 4> w{};
};

bool axis_supported(double t, std::size_t n) {
  if (!(t >= 1.0)) return false;
  return std::floor(t) + 2.0 <= static_cast<double>(n) - 1.0;
}

AxisWeights axis_weights(double p, double origin, double spacing, std::size_t n) {
  const double t = (p - origin) / spacing;
  require(axis_supported(t, n), ErrorKind::value,
          "bspline: point outside grid support (lattice coordinate " + std::to_string(t) + ")");
  const double f = std::floor(t);
  return {static_cast<std::size_t>(f) - 1, bspline_basis(t - f)};
}

Vec3 accumulate(const BSplineGrid& g, const AxisWeights& ax, const AxisWeights& ay,
                const AxisWeights& az) {
  Vec3 acc{0.0, 0.0, 0.0};
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t b = 0; b < 4; ++b) {
      const double wyz = az.w[c] * ay.w[b];
      const double* row = g.disp.data() + 3 * g.point_index(ax.first, ay.first + b, az.first + c);
      for (std::size_t a = 0; a < 4; ++a) {
        const double w = wyz * ax.w[a];
        acc[0] += w * row[3 * a];
        acc[1] += w * row[3 * a + 1];
        acc[2] += w * row[3 * a + 2];
      }
    }
  }
  return acc;
}

void check_box(const Volume3D& vol, Index3 lo, Index3 size) {
  for (int a = 0; a < 3; ++a) {
    require(lo[a] + size[a] <= vol.dims[a], ErrorKind::dimension,
            "bspline: requested region exceeds the volume");
  }
}

}  // namespace

bool BSplineGrid::supports(const Vec3& p) const {
  for (int a = 0; a < 3; ++a) {
    if (!axis_supported((p[a] - origin[a]) / spacing[a], dims[a])) return false;
  }
  return true;
}

bool BSplineGrid::covers(const Volume3D& vol) const {
  return supports(vol.world(0, 0, 0)) &&
         supports(vol.world(vol.dims[0] - 1, vol.dims[1] - 1, vol.dims[2] - 1));
}

double BSplineGrid::max_abs_component() const {
  double m = 0.0;
  for (double d : disp) m = std::max(m, std::abs(d));
  return m;
}

void BSplineGrid::validate() const {
  for (int a = 0; a < 3; ++a) {
    require(dims[a] >= 4, ErrorKind::value, "bspline grid: need >= 4 control points per axis");
    require(spacing[a] > 0.0 && std::isfinite(spacing[a]), ErrorKind::value,
            "bspline grid: spacing must be positive");
  }
  require(disp.size() == 3 * point_count(), ErrorKind::dimension,
          "bspline grid: displacement array does not match dims");
  for (double d : disp) require(std::isfinite(d), ErrorKind::numeric, "bspline grid: non-finite displacement");
}

BSplineGrid BSplineGrid::covering(const Volume3D& vol, std::size_t n) {
  require(n >= 4, ErrorKind::value, "bspline grid: need >= 4 control points per axis");
  double extent = 0.0;
  for (int a = 0; a < 3; ++a) {
    require(vol.dims[a] >= 2, ErrorKind::value, "bspline grid: degenerate volume");
    extent = std::max(extent, static_cast<double>(vol.dims[a] - 1) * vol.spacing[a]);
  }
  // The 1e-6 inflation keeps the last voxel strictly inside the support.
  const double g = extent / static_cast<double>(n - 3) * (1.0 + 1e-6);
  Vec3 origin;
  for (int a = 0; a < 3; ++a) {
    const double center = vol.origin[a] + 0.5 * static_cast<double>(vol.dims[a] - 1) * vol.spacing[a];
    origin[a] = center - 0.5 * static_cast<double>(n - 1) * g;
  }
  return BSplineGrid({n, n, n}, {g, g, g}, origin);
}

BSplineGrid BSplineGrid::anchored(const Volume3D& vol, const Vec3& spacing) {
  Index3 dims;
  Vec3 origin;
  for (int a = 0; a < 3; ++a) {
    require(spacing[a] > 0.0, ErrorKind::value, "bspline grid: spacing must be positive");
    const double extent = static_cast<double>(vol.dims[a] - 1) * vol.spacing[a];
    // One spare point beyond the strict requirement absorbs rounding of extent / spacing.
    dims[a] = static_cast<std::size_t>(std::floor(extent / spacing[a])) + 5;
    origin[a] = vol.origin[a] - spacing[a];
  }
  return BSplineGrid(dims, spacing, origin);
}

Vec3 displacement_at(const BSplineGrid& grid, const Vec3& p) {
  return accumulate(grid, axis_weights(p[0], grid.origin[0], grid.spacing[0], grid.dims[0]),
                    axis_weights(p[1], grid.origin[1], grid.spacing[1], grid.dims[1]),
                    axis_weights(p[2], grid.origin[2], grid.spacing[2], grid.dims[2]));
}

std::vector<double> displacement_field(const BSplineGrid& grid, const Volume3D& vol, Index3 lo,
                                       Index3 size) {
  check_box(vol, lo, size);
  std::array<std::vector<AxisWeights>, 3> axes;
  for (int a = 0; a < 3; ++a) {
    axes[a].reserve(size[a]);
    for (std::size_t i = 0; i < size[a]; ++i) {
      Index3 idx{0, 0, 0};
      idx[a] = lo[a] + i;
      const double p = vol.world(idx[0], idx[1], idx[2])[a];
      axes[a].push_back(axis_weights(p, grid.origin[a], grid.spacing[a], grid.dims[a]));
    }
  }
  std::vector<double> out(3 * size[0] * size[1] * size[2]);
  std::size_t o = 0;
  for (std::size_t k = 0; k < size[2]; ++k) {
    for (std::size_t j = 0; j < size[1]; ++j) {
      for (std::size_t i = 0; i < size[0]; ++i) {
        const Vec3 d = accumulate(grid, axes[0][i], axes[1][j], axes[2][k]);
        out[o++] = d[0];
        out[o++] = d[1];
        out[o++] = d[2];
      }
    }
  }
  return out;
}

Volume3D error_field(const BSplineGrid& grid, const Volume3D& vol) {
  const auto field = displacement_field(grid, vol, {0, 0, 0}, vol.dims);
  Volume3D out(vol.dims, vol.spacing, vol.origin);
  for (std::size_t v = 0; v < out.data.size(); ++v) {
    const double* d = field.data() + 3 * v;
    out.data[v] = static_cast<float>(std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]));
  }
  return out;
}

std::vector<float> warp_region(const Volume3D& vol, const BSplineGrid& grid, Index3 lo,
                               Index3 size) {
  return warp_region(vol, displacement_field(grid, vol, lo, size), lo, size);
}

std::vector<float> warp_region(const Volume3D& vol, std::span<const double> field, Index3 lo,
                               Index3 size) {
  check_box(vol, lo, size);
  require(field.size() == 3 * size[0] * size[1] * size[2], ErrorKind::dimension,
          "warp_region: displacement field does not match the region");
  std::vector<float> out(size[0] * size[1] * size[2]);
  std::size_t v = 0;
  for (std::size_t k = 0; k < size[2]; ++k) {
    for (std::size_t j = 0; j < size[1]; ++j) {
      for (std::size_t i = 0; i < size[0]; ++i, ++v) {
        // Voxel-coordinate arithmetic keeps the zero-displacement case exact.
        const double* d = field.data() + 3 * v;
        const Vec3 voxel{static_cast<double>(lo[0] + i) + d[0] / vol.spacing[0],
                         static_cast<double>(lo[1] + j) + d[1] / vol.spacing[1],
                         static_cast<double>(lo[2] + k) + d[2] / vol.spacing[2]};
        out[v] = static_cast<float>(sample_trilinear(vol, voxel));
      }
    }
  }
  return out;
}

Volume3D warp_volume(const Volume3D& vol, const BSplineGrid& grid) {
  Volume3D out(vol.dims, vol.spacing, vol.origin);
  out.data = warp_region(vol, grid, {0, 0, 0}, vol.dims);
  return out;
}

BSplineGrid random_deformation(Rng& rng, const Volume3D& vol, const DeformationParams& params) {
  require(params.max_points >= 4, ErrorKind::value,
          "random_deformation: max_points must be >= 4");
  require(params.max_disp_mm >= 0.0 && std::isfinite(params.max_disp_mm), ErrorKind::value,
          "random_deformation: max_disp_mm must be finite and >= 0");
  const auto n = static_cast<std::size_t>(
      rng.uniform_int(4, static_cast<std::int64_t>(params.max_points)));
  BSplineGrid grid = BSplineGrid::covering(vol, n);
  // 1 - U[0,1) lies in (0, 1], so d is drawn from (0, max_disp].
  const double d = params.max_disp_mm * (1.0 - rng.uniform());
  if (d == 0.0) return grid;
  for (double& c : grid.disp) c = rng.uniform(-d, d);
  return grid;
}

double mtre(const LandmarkSet& lms, const BSplineGrid& grid) {
  require(!lms.empty(), ErrorKind::value, "mtre: empty landmark set");
  double total = 0.0;
  for (const auto& lm : lms) {
    const Vec3 u = displacement_at(grid, lm.moving);
    double s = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double r = lm.moving[a] + u[a] - lm.fixed[a];
      s += r * r;
    }
    total += std::sqrt(s);
  }
  return total / static_cast<double>(lms.size());
}

FitResult fit_landmark_bspline(const LandmarkSet& lms, const Volume3D& vol,
                               const Vec3& grid_spacing_mm, double ridge_lambda) {
  require(!lms.empty(), ErrorKind::value, "fit_landmark_bspline: need >= 1 landmark pair");
  require(ridge_lambda >= 0.0, ErrorKind::value, "fit_landmark_bspline: lambda must be >= 0");
  FitResult result;
  result.grid = BSplineGrid::anchored(vol, grid_spacing_mm);
  BSplineGrid& grid = result.grid;

  // Only control points touched by some landmark enter the system; the
  // others carry no data term and stay at zero (the ridge optimum).
  std::map<std::size_t, std::size_t> column;
  std::vector<std::vector<std::pair<std::size_t, double>>> rows(lms.size());
  for (std::size_t i = 0; i < lms.size(); ++i) {
    const Vec3& p = lms[i].moving;
    require(grid.supports(p), ErrorKind::value,
            "fit_landmark_bspline: landmark " + std::to_string(i) + " outside the volume support");
    const AxisWeights ax = axis_weights(p[0], grid.origin[0], grid.spacing[0], grid.dims[0]);
    const AxisWeights ay = axis_weights(p[1], grid.origin[1], grid.spacing[1], grid.dims[1]);
    const AxisWeights az = axis_weights(p[2], grid.origin[2], grid.spacing[2], grid.dims[2]);
    for (std::size_t c = 0; c < 4; ++c) {
      for (std::size_t b = 0; b < 4; ++b) {
        for (std::size_t a = 0; a < 4; ++a) {
          const std::size_t cp = grid.point_index(ax.first + a, ay.first + b, az.first + c);
          const auto [it, _] = column.try_emplace(cp, column.size());
          rows[i].emplace_back(it->second, az.w[c] * ay.w[b] * ax.w[a]);
        }
      }
    }
  }

  const auto k = static_cast<Eigen::Index>(column.size());
  Eigen::MatrixXd normal = Eigen::MatrixXd::Zero(k, k);
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(k, 3);
  for (std::size_t i = 0; i < lms.size(); ++i) {
    for (const auto& [ca, wa] : rows[i]) {
      const auto ia = static_cast<Eigen::Index>(ca);
      for (const auto& [cb, wb] : rows[i]) normal(ia, static_cast<Eigen::Index>(cb)) += wa * wb;
      for (int a = 0; a < 3; ++a) rhs(ia, a) += wa * (lms[i].fixed[a] - lms[i].moving[a]);
    }
  }
  normal.diagonal().array() += ridge_lambda;

  const Eigen::LDLT<Eigen::MatrixXd> ldlt(normal);
  const auto& diag = ldlt.vectorD();
  const double dmax = diag.cwiseAbs().maxCoeff();
  require(ldlt.info() == Eigen::Success && diag.minCoeff() > 1e-12 * std::max(dmax, 1e-300),
          ErrorKind::ill_posed,
          "fit_landmark_bspline: singular normal system (" + std::to_string(lms.size()) +
              " landmarks, " + std::to_string(k) + " active control points, lambda = " +
              std::to_string(ridge_lambda) + ")");
  const Eigen::MatrixXd solution = ldlt.solve(rhs);

  for (const auto& [cp, col] : column) {
    for (int a = 0; a < 3; ++a) grid.disp[3 * cp + a] = solution(static_cast<Eigen::Index>(col), a);
  }
  for (const auto& lm : lms) {
    const Vec3 u = displacement_at(grid, lm.moving);
    double s = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double r = lm.moving[a] + u[a] - lm.fixed[a];
      s += r * r;
    }
    result.residual_sq += s;
    result.residuals.push_back(std::sqrt(s));
  }
  result.mtre = mtre(lms, grid);
  return result;
}

std::vector<std::uint8_t> encode_grid(const BSplineGrid& grid) {
  grid.validate();
  io::ByteWriter w;
  w.magic("FENG");
  w.u32(kGridVersion);
  for (auto d : grid.dims) w.u32(static_cast<std::uint32_t>(d));
  for (double s : grid.spacing) w.f64(s);
  for (double o : grid.origin) w.f64(o);
  const std::vector<float> disp(grid.disp.begin(), grid.disp.end());
  w.f32s(disp);
  return std::move(w.bytes());
}

BSplineGrid decode_grid(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes, "grid");
  r.expect_magic("FENG");
  const auto version = r.u32();
  require(version == kGridVersion, ErrorKind::format,
          "grid: unsupported version " + std::to_string(version));
  BSplineGrid grid;
  for (auto& d : grid.dims) d = r.u32();
  for (auto& s : grid.spacing) s = r.f64();
  for (auto& o : grid.origin) o = r.f64();
  const auto disp = r.f32s(3 * grid.point_count());
  grid.disp.assign(disp.begin(), disp.end());
  require(r.remaining() == 0, ErrorKind::format, "grid: trailing bytes");
  try {
    grid.validate();
  } catch (const Error& e) {
    fail(ErrorKind::format, std::string("grid: ") + e.what());
  }
  return grid;
}

void save_grid(const std::filesystem::path& path, const BSplineGrid& grid) {
  io::write_file(path, encode_grid(grid));
}

BSplineGrid load_grid(const std::filesystem::path& path) { return decode_grid(io::read_file(path)); }

}  // namespace fen
