#include "focalerrornet/volume.hpp"

#include <cmath>

#include "focalerrornet/binary_io.hpp"

namespace fen {

Volume3D::Volume3D(Index3 dims_, Vec3 spacing_, Vec3 origin_)
    : dims(dims_), spacing(spacing_), origin(origin_), data(dims_[0] * dims_[1] * dims_[2], 0.0f) {}

bool Volume3D::contains(const Vec3& p) const {
  const Vec3 v = to_voxel(p);
  for (int a = 0; a < 3; ++a) {
    if (!(v[a] >= 0.0 && v[a] <= static_cast<double>(dims[a] - 1))) return false;
  }
  return true;
}

void Volume3D::validate() const {
  for (int a = 0; a < 3; ++a) {
    require(dims[a] >= 1, ErrorKind::value, "volume: every dimension must be >= 1");
    require(spacing[a] > 0.0 && std::isfinite(spacing[a]), ErrorKind::value,
            "volume: spacing must be positive");
    require(std::isfinite(origin[a]), ErrorKind::value, "volume: origin must be finite");
  }
  require(data.size() == voxel_count(), ErrorKind::dimension,
          "volume: data length does not match dims");
  for (float v : data) require(std::isfinite(v), ErrorKind::numeric, "volume: non-finite intensity");
}

double sample_trilinear(const Volume3D& vol, const Vec3& voxel) {
  const double fx = std::floor(voxel[0]), fy = std::floor(voxel[1]), fz = std::floor(voxel[2]);
  const double tx = voxel[0] - fx, ty = voxel[1] - fy, tz = voxel[2] - fz;
  const auto nx = static_cast<std::int64_t>(vol.dims[0]);
  const auto ny = static_cast<std::int64_t>(vol.dims[1]);
  const auto nz = static_cast<std::int64_t>(vol.dims[2]);
  const auto x0 = static_cast<std::int64_t>(fx), y0 = static_cast<std::int64_t>(fy),
             z0 = static_cast<std::int64_t>(fz);
  if (x0 < -1 || y0 < -1 || z0 < -1 || x0 >= nx || y0 >= ny || z0 >= nz) return 0.0;
  const double wx[2] = {1.0 - tx, tx}, wy[2] = {1.0 - ty, ty}, wz[2] = {1.0 - tz, tz};
  double acc = 0.0;
  for (int c = 0; c < 2; ++c) {
    const std::int64_t z = z0 + c;
    if (z < 0 || z >= nz || wz[c] == 0.0) continue;
    for (int b = 0; b < 2; ++b) {
      const std::int64_t y = y0 + b;
      if (y < 0 || y >= ny || wy[b] == 0.0) continue;
      for (int a = 0; a < 2; ++a) {
        const std::int64_t x = x0 + a;
        if (x < 0 || x >= nx || wx[a] == 0.0) continue;
        acc += wx[a] * wy[b] * wz[c] *
               vol.data[static_cast<std::size_t>(x + nx * (y + ny * z))];
      }
    }
  }
  return acc;
}

std::vector<std::uint8_t> encode_volume(const Volume3D& vol) {
  vol.validate();
  io::ByteWriter w;
  w.magic("FENV");
  w.u32(kVolumeVersion);
  for (auto d : vol.dims) w.u32(static_cast<std::uint32_t>(d));
  for (double s : vol.spacing) w.f64(s);
  for (double o : vol.origin) w.f64(o);
  w.f32s(vol.data);
  return std::move(w.bytes());
}

Volume3D decode_volume(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes, "volume");
  r.expect_magic("FENV");
  const auto version = r.u32();
  require(version == kVolumeVersion, ErrorKind::format,
          "volume: unsupported version " + std::to_string(version));
  Volume3D vol;
  for (auto& d : vol.dims) d = r.u32();
  for (auto& s : vol.spacing) s = r.f64();
  for (auto& o : vol.origin) o = r.f64();
  vol.data = r.f32s(vol.voxel_count());
  require(r.remaining() == 0, ErrorKind::format, "volume: trailing bytes");
  try {
    vol.validate();
  } catch (const Error& e) {
    fail(ErrorKind::format, std::string("volume: ") + e.what());
  }
  return vol;
}

void save_volume(const std::filesystem::path& path, const Volume3D& vol) {
  io::write_file(path, encode_volume(vol));
}

Volume3D load_volume(const std::filesystem::path& path) {
  return decode_volume(io::read_file(path));
}

}  // namespace fen
