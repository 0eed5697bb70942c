#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "focalerrornet/rng.hpp"
#include "focalerrornet/volume.hpp"

namespace fen {

/// Uniform cubic B-spline weights (B0, B1, B2, B3) for a fraction u in [0, 1).
std::array<double, 4> bspline_basis(double u);

/// Regular lattice of control-point displacements (mm).
///
/// Control point (a, b, c) sits at origin + (a, b, c) * spacing. A point p
/// with lattice coordinate t = (p - origin) / spacing is supported when
/// 1 <= t and floor(t) + 2 <= dims - 1 on every axis, i.e. when all 4x4x4
/// neighbouring control points floor(t) - 1 .. floor(t) + 2 exist.
struct BSplineGrid {
  Index3 dims{4, 4, 4};
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};
  /// 3 components per control point, x-fastest control-point order.
  std::vector<double> disp;

  BSplineGrid() = default;
  /// Zero displacements.
  BSplineGrid(Index3 dims, Vec3 spacing, Vec3 origin);

  std::size_t point_count() const { return dims[0] * dims[1] * dims[2]; }
  std::size_t point_index(std::size_t a, std::size_t b, std::size_t c) const {
    return a + dims[0] * (b + dims[1] * c);
  }
  Vec3 control(std::size_t a, std::size_t b, std::size_t c) const;
  void set_control(std::size_t a, std::size_t b, std::size_t c, const Vec3& d);

  bool supports(const Vec3& p) const;
  /// True when every voxel center of the volume is supported.
  bool covers(const Volume3D& vol) const;
  double max_abs_component() const;
  void validate() const;

  /// Grid with `n` control points per axis covering `vol` with one
  /// control-point margin, centered on the volume.
  static BSplineGrid covering(const Volume3D& vol, std::size_t n);
  /// Grid with the given spacing whose origin is anchored one spacing below
  /// the volume origin, with enough points to cover the volume.
  static BSplineGrid anchored(const Volume3D& vol, const Vec3& spacing);
};

/// Tensor-product sum over the 4x4x4 supporting control points.
Vec3 displacement_at(const BSplineGrid& grid, const Vec3& p);

/// Per-voxel displacement vectors for the box [lo, lo + size) of `vol`'s
/// voxel lattice, 3 values per voxel, x-fastest. Bit-identical to calling
/// displacement_at at each voxel center.
std::vector<double> displacement_field(const BSplineGrid& grid, const Volume3D& vol, Index3 lo,
                                       Index3 size);

/// Voxel-wise displacement norm (mm) on the whole lattice of `vol`.
Volume3D error_field(const BSplineGrid& grid, const Volume3D& vol);

/// Backward mapping: out(x) = vol(x + u(x)), trilinear, zero outside.
Volume3D warp_volume(const Volume3D& vol, const BSplineGrid& grid);

/// Warped values for the box [lo, lo + size) only; x-fastest.
std::vector<float> warp_region(const Volume3D& vol, const BSplineGrid& grid, Index3 lo,
                               Index3 size);
/// Same, reusing a displacement_field computed for that box.
std::vector<float> warp_region(const Volume3D& vol, std::span<const double> field, Index3 lo,
                               Index3 size);

struct DeformationParams {
  std::size_t max_points = 20;  // per-axis control points, margin included
  double max_disp_mm = 30.0;
};

/// n ~ U{4..max_points} (isotropic), d ~ U(0, max_disp], each component
/// ~ U(-d, d). The grid covers the volume with a one-point margin.
BSplineGrid random_deformation(Rng& rng, const Volume3D& vol, const DeformationParams& params = {});

struct LandmarkPair {
  Vec3 fixed;
  Vec3 moving;
};
using LandmarkSet = std::vector<LandmarkPair>;

struct FitResult {
  BSplineGrid grid;
  /// Per-landmark residual norms ||moving + u(moving) - fixed|| (mm).
  std::vector<double> residuals;
  double mtre = 0.0;
  double residual_sq = 0.0;
};

/// Ridge-regularized least squares for the control displacements:
/// minimizes sum_i ||u(moving_i) - (fixed_i - moving_i)||^2 + lambda ||disp||^2.
FitResult fit_landmark_bspline(const LandmarkSet& lms, const Volume3D& vol,
                               const Vec3& grid_spacing_mm, double ridge_lambda);

/// Mean over pairs of ||moving + u(moving) - fixed||.
double mtre(const LandmarkSet& lms, const BSplineGrid& grid);

// FENG grid file, little-endian:
//   "FENG", version u32, dims 3 x u32, spacing 3 x f64, origin 3 x f64,
//   f32[3 * point_count] as (dx, dy, dz) per control point, x-fastest.
inline constexpr std::uint32_t kGridVersion = 1;

std::vector<std::uint8_t> encode_grid(const BSplineGrid& grid);
BSplineGrid decode_grid(std::span<const std::uint8_t> bytes);
void save_grid(const std::filesystem::path& path, const BSplineGrid& grid);
BSplineGrid load_grid(const std::filesystem::path& path);

}  // namespace fen
