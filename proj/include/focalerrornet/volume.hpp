#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace fen {

using Vec3 = std::array<double, 3>;
using Index3 = std::array<std::size_t, 3>;

/// Dense scalar field on a regular grid. Voxel (i, j, k) sits at
/// origin + (i, j, k) * spacing (mm) and is stored at i + nx * (j + ny * k).
struct Volume3D {
  Index3 dims{0, 0, 0};
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};
  std::vector<float> data;

  Volume3D() = default;
  /// Zero-filled volume.
  Volume3D(Index3 dims, Vec3 spacing, Vec3 origin = {0.0, 0.0, 0.0});

  std::size_t voxel_count() const { return dims[0] * dims[1] * dims[2]; }
  std::size_t index(std::size_t i, std::size_t j, std::size_t k) const {
    return i + dims[0] * (j + dims[1] * k);
  }
  float at(std::size_t i, std::size_t j, std::size_t k) const { return data[index(i, j, k)]; }
  float& at(std::size_t i, std::size_t j, std::size_t k) { return data[index(i, j, k)]; }

  /// World position (mm) of a voxel center.
  Vec3 world(std::size_t i, std::size_t j, std::size_t k) const {
    return {origin[0] + static_cast<double>(i) * spacing[0],
            origin[1] + static_cast<double>(j) * spacing[1],
            origin[2] + static_cast<double>(k) * spacing[2]};
  }
  /// Continuous voxel coordinate of a world position.
  Vec3 to_voxel(const Vec3& p) const {
    return {(p[0] - origin[0]) / spacing[0], (p[1] - origin[1]) / spacing[1],
            (p[2] - origin[2]) / spacing[2]};
  }
  /// True when the world position lies in the closed voxel-center box.
  bool contains(const Vec3& p) const;
  bool same_geometry(const Volume3D& other) const {
    return dims == other.dims && spacing == other.spacing && origin == other.origin;
  }

  /// Checks spacing > 0, data length and finiteness.
  void validate() const;
};

/// Trilinear interpolation at a continuous voxel coordinate; voxels outside
/// the volume read as zero.
double sample_trilinear(const Volume3D& vol, const Vec3& voxel);

// FENV volume file, little-endian:
//   "FENV", version u32, dims 3 x u32, spacing 3 x f64, origin 3 x f64,
//   f32[nx*ny*nz] x-fastest.
inline constexpr std::uint32_t kVolumeVersion = 1;

std::vector<std::uint8_t> encode_volume(const Volume3D& vol);
Volume3D decode_volume(std::span<const std::uint8_t> bytes);
void save_volume(const std::filesystem::path& path, const Volume3D& vol);
Volume3D load_volume(const std::filesystem::path& path);

}  // namespace fen
