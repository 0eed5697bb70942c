#include "focalerrornet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <numeric>

#include "focalerrornet/binary_io.hpp"
#include "focalerrornet/parallel.hpp"

namespace fen::data {

using nlohmann::json;

namespace {

// Stream ids separating the independent random processes of a build.
constexpr std::uint64_t kSubjectStream = 0x5b1ec7;
constexpr std::uint64_t kDeformStream = 0xdef0;
constexpr std::uint64_t kSplitStream = 0x5917;
constexpr std::uint64_t kShiftStream = 0x54f7;

void reject_unknown(const json& j, std::initializer_list<const char*> known, const char* what) {
  require(j.is_object(), ErrorKind::format, std::string(what) + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    require(ok, ErrorKind::format, std::string(what) + ": unknown field \"" + key + "\"");
  }
}

}  // namespace

void SynthParams::validate() const {
  require(size >= 2 * border_voxels + 1, ErrorKind::value,
          "synth: volume too small for the landmark border");
  require(spacing_mm > 0.0, ErrorKind::value, "synth: spacing must be positive");
  require(min_landmarks >= 1 && min_landmarks <= max_landmarks, ErrorKind::value,
          "synth: need 1 <= min_landmarks <= max_landmarks");
  require(mri_noise >= 0.0 && speckle >= 0.0, ErrorKind::value, "synth: noise levels must be >= 0");
}

void to_json(json& j, const SynthParams& p) {
  j = json{{"size", p.size},
           {"spacing_mm", p.spacing_mm},
           {"blobs", p.blobs},
           {"mri_noise", p.mri_noise},
           {"speckle", p.speckle},
           {"min_landmarks", p.min_landmarks},
           {"max_landmarks", p.max_landmarks},
           {"min_landmark_distance_mm", p.min_landmark_distance_mm},
           {"border_voxels", p.border_voxels}};
}

void from_json(const json& j, SynthParams& p) {
  reject_unknown(j,
                 {"size", "spacing_mm", "blobs", "mri_noise", "speckle", "min_landmarks",
                  "max_landmarks", "min_landmark_distance_mm", "border_voxels"},
                 "SynthParams");
  const SynthParams d;
  p.size = j.value("size", d.size);
  p.spacing_mm = j.value("spacing_mm", d.spacing_mm);
  p.blobs = j.value("blobs", d.blobs);
  p.mri_noise = j.value("mri_noise", d.mri_noise);
  p.speckle = j.value("speckle", d.speckle);
  p.min_landmarks = j.value("min_landmarks", d.min_landmarks);
  p.max_landmarks = j.value("max_landmarks", d.max_landmarks);
  p.min_landmark_distance_mm = j.value("min_landmark_distance_mm", d.min_landmark_distance_mm);
  p.border_voxels = j.value("border_voxels", d.border_voxels);
}

void BuildParams::validate() const {
  require(deformations_per_volume >= 1, ErrorKind::value,
          "build: deformations_per_volume must be >= 1");
  require(patch_size % 2 == 1, ErrorKind::value, "build: patch_size must be odd");
  require(deformation.max_points >= 4, ErrorKind::value, "build: max_points must be >= 4");
  require(deformation.max_disp_mm >= 0.0, ErrorKind::value, "build: max_disp_mm must be >= 0");
  const double total = fractions[0] + fractions[1] + fractions[2];
  require(std::abs(total - 1.0) <= 1e-9, ErrorKind::value, "build: split fractions must sum to 1");
}

void to_json(json& j, const BuildParams& p) {
  j = json{{"deformations_per_volume", p.deformations_per_volume},
           {"max_points", p.deformation.max_points},
           {"max_disp_mm", p.deformation.max_disp_mm},
           {"patch_size", p.patch_size},
           {"fractions", p.fractions},
           {"seed", p.seed}};
}

void from_json(const json& j, BuildParams& p) {
  reject_unknown(j,
                 {"deformations_per_volume", "max_points", "max_disp_mm", "patch_size",
                  "fractions", "seed"},
                 "BuildParams");
  const BuildParams d;
  p.deformations_per_volume = j.value("deformations_per_volume", d.deformations_per_volume);
  p.deformation.max_points = j.value("max_points", d.deformation.max_points);
  p.deformation.max_disp_mm = j.value("max_disp_mm", d.deformation.max_disp_mm);
  p.patch_size = j.value("patch_size", d.patch_size);
  p.fractions = j.value("fractions", d.fractions);
  p.seed = j.value("seed", d.seed);
}

// ---------------------------------------------------------------------------
// Synthetic subjects

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Uniformly random rotation from a normalized Gaussian quaternion.
std::array<double, 9> random_rotation(Rng& rng) {
  double q[4];
  double n = 0.0;
  for (double& v : q) {
    v = rng.normal();
    n += v * v;
  }
  n = std::sqrt(n);
  for (double& v : q) v /= n;
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  return {1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),
          2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
          2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y)};
}

/// Adds a smooth ellipsoid with a logistic edge to the anatomy field.
void add_blob(std::vector<double>& field, std::size_t n, Rng& rng) {
  const double nd = static_cast<double>(n);
  const Vec3 center{rng.uniform(0.1, 0.9) * nd, rng.uniform(0.1, 0.9) * nd,
                    rng.uniform(0.1, 0.9) * nd};
  const Vec3 radius{rng.uniform(0.05, 0.22) * nd, rng.uniform(0.05, 0.22) * nd,
                    rng.uniform(0.05, 0.22) * nd};
  const double amplitude = rng.uniform(-1.0, 1.0);
  const double edge = rng.uniform(0.04, 0.15);
  const auto r = random_rotation(rng);
  const double reach = 1.6 * std::max({radius[0], radius[1], radius[2]});
  std::array<std::size_t, 3> lo, hi;
  for (int a = 0; a < 3; ++a) {
    lo[a] = static_cast<std::size_t>(std::clamp(center[a] - reach, 0.0, nd - 1));
    hi[a] = static_cast<std::size_t>(std::clamp(center[a] + reach, 0.0, nd - 1));
  }
  for (std::size_t k = lo[2]; k <= hi[2]; ++k) {
    for (std::size_t j = lo[1]; j <= hi[1]; ++j) {
      for (std::size_t i = lo[0]; i <= hi[0]; ++i) {
        const double dx = static_cast<double>(i) - center[0];
        const double dy = static_cast<double>(j) - center[1];
        const double dz = static_cast<double>(k) - center[2];
        const double u = (r[0] * dx + r[1] * dy + r[2] * dz) / radius[0];
        const double v = (r[3] * dx + r[4] * dy + r[5] * dz) / radius[1];
        const double w = (r[6] * dx + r[7] * dy + r[8] * dz) / radius[2];
        const double rho = std::sqrt(u * u + v * v + w * w);
        field[i + n * (j + n * k)] += amplitude * sigmoid((1.0 - rho) / edge);
      }
    }
  }
}

/// Band-limited texture: one component of a random B-spline field.
void add_texture(std::vector<double>& field, const Volume3D& geometry, std::size_t points,
                 double amplitude, Rng& rng) {
  BSplineGrid grid = BSplineGrid::covering(geometry, points);
  for (std::size_t p = 0; p < grid.point_count(); ++p) grid.disp[3 * p] = rng.uniform(-1.0, 1.0);
  const auto values = displacement_field(grid, geometry, {0, 0, 0}, geometry.dims);
  for (std::size_t v = 0; v < field.size(); ++v) field[v] += amplitude * values[3 * v];
}

std::vector<double> gradient_magnitude(const std::vector<double>& f, std::size_t n) {
  std::vector<double> g(f.size(), 0.0);
  for (std::size_t k = 1; k + 1 < n; ++k) {
    for (std::size_t j = 1; j + 1 < n; ++j) {
      for (std::size_t i = 1; i + 1 < n; ++i) {
        const std::size_t v = i + n * (j + n * k);
        const double gx = f[v + 1] - f[v - 1];
        const double gy = f[v + n] - f[v - n];
        const double gz = f[v + n * n] - f[v - n * n];
        g[v] = 0.5 * std::sqrt(gx * gx + gy * gy + gz * gz);
      }
    }
  }
  return g;
}

}  // namespace

SyntheticSubject synth_subject(Rng& rng, const SynthParams& params, std::string id) {
  params.validate();
  const std::size_t n = params.size;
  const double s = params.spacing_mm;
  SyntheticSubject subject;
  subject.id = std::move(id);
  const Volume3D geometry({n, n, n}, {s, s, s});

  // Shared anatomy: smooth structures plus multi-scale texture.
  std::vector<double> anatomy(n * n * n, 0.0);
  for (std::size_t b = 0; b < params.blobs; ++b) add_blob(anatomy, n, rng);
  add_texture(anatomy, geometry, 8, 0.5, rng);
  add_texture(anatomy, geometry, 20, 0.35, rng);
  add_texture(anatomy, geometry, 40, 0.25, rng);
  const double mean = std::accumulate(anatomy.begin(), anatomy.end(), 0.0) / static_cast<double>(anatomy.size());
  double var = 0.0;
  for (double v : anatomy) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(anatomy.size())) + 1e-12;
  for (double& v : anatomy) v = (v - mean) / sd;

  // MRI: monotone contrast plus mild Gaussian noise.
  std::vector<double> tissue(anatomy.size());
  for (std::size_t v = 0; v < anatomy.size(); ++v) tissue[v] = sigmoid(1.5 * anatomy[v]);
  subject.mri = geometry;
  for (std::size_t v = 0; v < anatomy.size(); ++v) {
    subject.mri.data[v] = static_cast<float>(
        std::clamp(tissue[v] + params.mri_noise * rng.normal(), 0.0, 1.0));
  }

  // Ultrasound field of view: oblique truncated cone with its apex outside
  // the volume.
  const double nd = static_cast<double>(n);
  Vec3 axis{rng.uniform(-0.35, 0.35), rng.uniform(-0.35, 0.35), 1.0};
  const double axis_norm = std::hypot(axis[0], axis[1], axis[2]);
  for (double& a : axis) a /= axis_norm;
  const Vec3 apex{0.5 * nd - 0.45 * nd * axis[0], 0.5 * nd - 0.45 * nd * axis[1],
                  0.5 * nd - 0.45 * nd * axis[2] - 0.15 * nd};
  const double cos_half = std::cos(rng.uniform(0.55, 0.7));
  const double near = rng.uniform(0.2, 0.3) * nd, far = rng.uniform(1.15, 1.35) * nd;
  const double attenuation = rng.uniform(0.6, 1.2) * nd;
  subject.fov_mask = geometry;
  const auto edges = gradient_magnitude(anatomy, n);
  subject.us = geometry;
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t v = i + n * (j + n * k);
        const double dx = static_cast<double>(i) - apex[0];
        const double dy = static_cast<double>(j) - apex[1];
        const double dz = static_cast<double>(k) - apex[2];
        const double dist = std::sqrt(dx * dx + dy * dy + dz * dz);
        const double depth = dx * axis[0] + dy * axis[1] + dz * axis[2];
        const bool inside = depth >= near && depth <= far && depth >= cos_half * dist;
        // Speckle is drawn for every voxel so the stream does not depend on the mask.
        const double speckle = 1.0 + params.speckle * rng.normal();
        if (!inside) continue;
        subject.fov_mask.data[v] = 1.0f;
        const double echo = 0.5 * tissue[v] * tissue[v] + 0.5 * std::min(1.0, 1.5 * edges[v]);
        const double gain = std::exp(-(depth - near) / attenuation);
        subject.us.data[v] = static_cast<float>(std::clamp(echo * gain * std::max(speckle, 0.0), 0.0, 1.0));
      }
    }
  }

  // Landmarks: strongest local gradient maxima of the tissue map inside the
  // field of view, greedily thinned to the minimum distance.
  const auto tissue_edges = gradient_magnitude(tissue, n);
  const std::size_t b = params.border_voxels;
  std::vector<std::size_t> candidates;
  for (std::size_t k = b; k + b < n; ++k) {
    for (std::size_t j = b; j + b < n; ++j) {
      for (std::size_t i = b; i + b < n; ++i) {
        const std::size_t v = i + n * (j + n * k);
        if (subject.fov_mask.data[v] == 0.0f || tissue_edges[v] <= 0.0) continue;
        bool is_max = true;
        for (int dz = -1; dz <= 1 && is_max; ++dz) {
          for (int dy = -1; dy <= 1 && is_max; ++dy) {
            for (int dx = -1; dx <= 1 && is_max; ++dx) {
              const auto w = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(v) + dx +
                                                      static_cast<std::ptrdiff_t>(n) * (dy + static_cast<std::ptrdiff_t>(n) * dz));
              if (w != v && tissue_edges[w] > tissue_edges[v]) is_max = false;
            }
          }
        }
        if (is_max) candidates.push_back(v);
      }
    }
  }
  std::stable_sort(candidates.begin(), candidates.end(), [&](std::size_t a, std::size_t c) {
    return tissue_edges[a] > tissue_edges[c];
  });
  const auto wanted = static_cast<std::size_t>(rng.uniform_int(
      static_cast<std::int64_t>(params.min_landmarks), static_cast<std::int64_t>(params.max_landmarks)));
  const double min_dist_vox = params.min_landmark_distance_mm / s;
  for (std::size_t v : candidates) {
    if (subject.landmarks.size() == wanted) break;
    const Index3 c{v % n, (v / n) % n, v / (n * n)};
    bool far_enough = true;
    for (const auto& l : subject.landmarks) {
      double d2 = 0.0;
      for (int a = 0; a < 3; ++a) {
        const double d = static_cast<double>(c[a]) - static_cast<double>(l[a]);
        d2 += d * d;
      }
      if (d2 < min_dist_vox * min_dist_vox) far_enough = false;
    }
    if (far_enough) subject.landmarks.push_back(c);
  }
  require(!subject.landmarks.empty(), ErrorKind::value,
          "synth: no landmark candidates inside the field of view");
  return subject;
}

void save_subject(const std::filesystem::path& dir, const SyntheticSubject& subject) {
  save_volume(dir / "mri.fenv", subject.mri);
  save_volume(dir / "us.fenv", subject.us);
  save_volume(dir / "fov.fenv", subject.fov_mask);
  json lm = json::array();
  for (const auto& l : subject.landmarks) {
    lm.push_back(json{{"voxel", l}, {"mm", subject.mri.world(l[0], l[1], l[2])}});
  }
  const std::string text = json{{"id", subject.id}, {"landmarks", lm}}.dump(2) + "\n";
  io::write_file(dir / "landmarks.json",
                 std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

SyntheticSubject load_subject(const std::filesystem::path& dir) {
  SyntheticSubject subject;
  subject.mri = load_volume(dir / "mri.fenv");
  subject.us = load_volume(dir / "us.fenv");
  subject.fov_mask = load_volume(dir / "fov.fenv");
  require(subject.mri.same_geometry(subject.us) && subject.mri.same_geometry(subject.fov_mask),
          ErrorKind::format, dir.string() + ": MRI, US and FOV volumes differ in geometry");
  const auto bytes = io::read_file(dir / "landmarks.json");
  try {
    const json j = json::parse(bytes.begin(), bytes.end());
    subject.id = j.at("id").get<std::string>();
    for (const auto& l : j.at("landmarks")) {
      subject.landmarks.push_back(l.at("voxel").get<Index3>());
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::format, (dir / "landmarks.json").string() + ": " + e.what());
  }
  for (const auto& l : subject.landmarks) {
    for (int a = 0; a < 3; ++a) {
      require(l[a] < subject.mri.dims[a], ErrorKind::format,
              dir.string() + ": landmark outside the volume");
    }
  }
  return subject;
}

Rng subject_stream(std::uint64_t seed, std::size_t subject_index) {
  return Rng(seed, kSubjectStream).split(subject_index);
}

std::vector<SyntheticSubject> synth_cohort(std::uint64_t seed, std::size_t count,
                                           const SynthParams& params, std::size_t workers) {
  std::vector<SyntheticSubject> out(count);
  parallel_for(count, workers, [&](std::size_t i) {
    Rng rng = subject_stream(seed, i);
    char name[32];
    std::snprintf(name, sizeof name, "subject_%03zu", i);
    out[i] = synth_subject(rng, params, name);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Patches and samples

void normalize_minmax(std::span<float> values) {
  if (values.empty()) return;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const float mn = *lo, mx = *hi;
  if (!(mx > mn)) {
    std::fill(values.begin(), values.end(), 0.0f);
    return;
  }
  const float scale = 1.0f / (mx - mn);
  for (float& v : values) v = std::clamp((v - mn) * scale, 0.0f, 1.0f);
}

namespace {

Index3 patch_origin(const Index3& dims, const Index3& center, std::size_t size) {
  const std::size_t half = size / 2;
  Index3 lo;
  for (int a = 0; a < 3; ++a) {
    require(center[a] >= half && center[a] + half < dims[a], ErrorKind::value,
            "extract_patch: center too close to the border for a " + std::to_string(size) +
                "^3 patch");
    lo[a] = center[a] - half;
  }
  return lo;
}

bool patch_fits(const Index3& dims, const std::array<std::int64_t, 3>& center, std::size_t size) {
  const auto half = static_cast<std::int64_t>(size / 2);
  for (int a = 0; a < 3; ++a) {
    if (center[a] < half || center[a] + half >= static_cast<std::int64_t>(dims[a])) return false;
  }
  return true;
}

}  // namespace

std::vector<float> extract_patch(const Volume3D& vol, const Index3& center, std::size_t size) {
  require(size % 2 == 1, ErrorKind::value, "extract_patch: size must be odd");
  const Index3 lo = patch_origin(vol.dims, center, size);
  std::vector<float> out(size * size * size);
  std::size_t o = 0;
  for (std::size_t k = 0; k < size; ++k) {
    for (std::size_t j = 0; j < size; ++j) {
      const float* row = vol.data.data() + vol.index(lo[0], lo[1] + j, lo[2] + k);
      std::copy(row, row + size, out.begin() + static_cast<std::ptrdiff_t>(o));
      o += size;
    }
  }
  normalize_minmax(out);
  return out;
}

const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "unknown";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  fail(ErrorKind::format, "unknown split \"" + s + "\"");
}

std::vector<std::size_t> Dataset::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].split == s) out.push_back(i);
  }
  return out;
}

std::map<std::string, Split> split_subjects(const std::vector<std::string>& ids,
                                            const std::array<double, 3>& fractions, Rng& rng) {
  require(ids.size() >= 5, ErrorKind::value, "split_subjects: need >= 5 subjects");
  for (double f : fractions) require(f >= 0.0, ErrorKind::value, "split_subjects: negative fraction");
  require(std::abs(fractions[0] + fractions[1] + fractions[2] - 1.0) <= 1e-9, ErrorKind::value,
          "split_subjects: fractions must sum to 1");
  std::vector<std::string> order = ids;
  std::sort(order.begin(), order.end());
  require(std::adjacent_find(order.begin(), order.end()) == order.end(), ErrorKind::value,
          "split_subjects: duplicate subject id");
  // Fisher-Yates with the seeded stream.
  for (std::size_t i = order.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)));
    std::swap(order[i - 1], order[j]);
  }
  const double n = static_cast<double>(order.size());
  const auto n_val = static_cast<std::size_t>(std::floor(fractions[1] * n + 1e-9));
  const auto n_test = static_cast<std::size_t>(std::floor(fractions[2] * n + 1e-9));
  const std::size_t n_train = order.size() - n_val - n_test;
  std::map<std::string, Split> out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    out[order[i]] = i < n_train ? Split::train : i < n_train + n_val ? Split::val : Split::test;
  }
  return out;
}

BSplineGrid subject_deformation(const BuildParams& params, std::size_t subject_index,
                                const Volume3D& reference, std::size_t k) {
  Rng rng = Rng(params.seed, kDeformStream).split(subject_index).split(k);
  return random_deformation(rng, reference, params.deformation);
}

PatchPair make_sample(const SyntheticSubject& subject, const BSplineGrid& grid,
                      const Index3& center, std::size_t patch_size) {
  const Index3 lo = patch_origin(subject.us.dims, center, patch_size);
  const Index3 size{patch_size, patch_size, patch_size};
  const auto field = displacement_field(grid, subject.us, lo, size);
  PatchPair pair;
  pair.us = warp_region(subject.us, field, lo, size);
  normalize_minmax(pair.us);
  pair.mri = extract_patch(subject.mri, center, patch_size);
  double total = 0.0;
  for (std::size_t v = 0; v < field.size(); v += 3) {
    total += std::sqrt(field[v] * field[v] + field[v + 1] * field[v + 1] + field[v + 2] * field[v + 2]);
  }
  pair.label_mm = total / static_cast<double>(field.size() / 3);
  pair.subject_id = subject.id;
  pair.center = center;
  return pair;
}

Dataset build_dataset(const std::vector<SyntheticSubject>& subjects, const BuildParams& params,
                      std::size_t workers, const Logger& log) {
  params.validate();
  require(subjects.size() >= 5, ErrorKind::value, "build_dataset: need >= 5 subjects");
  const std::size_t half = params.patch_size / 2;

  std::vector<std::vector<std::uint32_t>> usable(subjects.size());
  for (std::size_t s = 0; s < subjects.size(); ++s) {
    const auto& subj = subjects[s];
    require(subj.mri.same_geometry(subj.us), ErrorKind::value,
            "build_dataset: " + subj.id + " has mismatched MRI/US geometry");
    for (std::size_t l = 0; l < subj.landmarks.size(); ++l) {
      std::array<std::int64_t, 3> c;
      for (int a = 0; a < 3; ++a) c[a] = static_cast<std::int64_t>(subj.landmarks[l][a]);
      if (patch_fits(subj.us.dims, c, params.patch_size)) {
        usable[s].push_back(static_cast<std::uint32_t>(l));
      } else if (log) {
        log("skipping " + subj.id + " landmark " + std::to_string(l) + ": closer than " +
            std::to_string(half) + " voxels to a border");
      }
    }
  }

  const std::size_t jobs = subjects.size() * params.deformations_per_volume;
  std::vector<std::vector<PatchPair>> results(jobs);
  parallel_for(jobs, workers, [&](std::size_t job) {
    const std::size_t s = job / params.deformations_per_volume;
    const std::size_t k = job % params.deformations_per_volume;
    const auto& subj = subjects[s];
    const BSplineGrid grid = subject_deformation(params, s, subj.us, k);
    for (std::uint32_t l : usable[s]) {
      PatchPair pair = make_sample(subj, grid, subj.landmarks[l], params.patch_size);
      pair.landmark_index = l;
      pair.deformation_id = static_cast<std::uint32_t>(k);
      results[job].push_back(std::move(pair));
    }
  });

  Dataset ds;
  ds.patch_size = params.patch_size;
  std::vector<std::string> ids;
  for (const auto& s : subjects) ids.push_back(s.id);
  Rng split_rng(params.seed, kSplitStream);
  ds.splits = split_subjects(ids, params.fractions, split_rng);
  for (auto& batch : results) {
    for (auto& pair : batch) {
      pair.split = ds.splits.at(pair.subject_id);
      ds.samples.push_back(std::move(pair));
    }
  }
  ds.provenance["build"] = params;
  ds.provenance["subject_ids"] = ids;
  return ds;
}

// ---------------------------------------------------------------------------
// Augmentation and robustness set

void flip_axis(std::span<float> patch, std::size_t size, std::size_t axis) {
  require(axis < 3 && patch.size() == size * size * size, ErrorKind::dimension,
          "flip_axis: expected a cubic patch and axis in {0,1,2}");
  const std::size_t stride = axis == 0 ? 1 : axis == 1 ? size : size * size;
  for (std::size_t v = 0; v < patch.size(); ++v) {
    const std::size_t c = (v / stride) % size;
    if (c < size / 2) std::swap(patch[v], patch[v + (size - 1 - 2 * c) * stride]);
  }
}

void augment(PatchPair& pair, Rng& rng, double noise_sigma) {
  const auto size = static_cast<std::size_t>(std::llround(std::cbrt(static_cast<double>(pair.mri.size()))));
  for (std::size_t axis = 0; axis < 3; ++axis) {
    if (rng.bernoulli(0.5)) {
      flip_axis(pair.mri, size, axis);
      flip_axis(pair.us, size, axis);
    }
  }
  if (noise_sigma <= 0.0) return;
  // Noise values come in Box-Muller pairs, consumed in voxel order.
  for (auto* patch : {&pair.mri, &pair.us}) {
    auto& values = *patch;
    for (std::size_t i = 0; i < values.size(); i += 2) {
      const auto z = rng.normal_pair();
      values[i] = static_cast<float>(std::clamp(values[i] + noise_sigma * z[0], 0.0, 1.0));
      if (i + 1 < values.size()) {
        values[i + 1] = static_cast<float>(std::clamp(values[i + 1] + noise_sigma * z[1], 0.0, 1.0));
      }
    }
  }
}

Dataset shifted_test_set(const Dataset& dataset, const std::vector<SyntheticSubject>& subjects,
                         std::uint64_t seed, int max_shift_voxels, std::size_t workers) {
  require(max_shift_voxels >= 0, ErrorKind::value, "shifted_test_set: max shift must be >= 0");
  const BuildParams params = dataset.provenance.at("build").get<BuildParams>();
  const auto ids = dataset.provenance.at("subject_ids").get<std::vector<std::string>>();
  std::map<std::string, std::size_t> build_index;
  for (std::size_t i = 0; i < ids.size(); ++i) build_index[ids[i]] = i;
  std::map<std::string, const SyntheticSubject*> by_id;
  for (const auto& s : subjects) by_id[s.id] = &s;

  const auto test = dataset.indices(Split::test);
  std::vector<PatchPair> out(test.size());
  parallel_for(test.size(), workers, [&](std::size_t t) {
    const PatchPair& src = dataset.samples[test[t]];
    const auto it = by_id.find(src.subject_id);
    require(it != by_id.end(), ErrorKind::value,
            "shifted_test_set: subject " + src.subject_id + " not available");
    const SyntheticSubject& subj = *it->second;
    std::array<std::int64_t, 3> landmark;
    for (int a = 0; a < 3; ++a) landmark[a] = static_cast<std::int64_t>(src.center[a]) - src.shift[a];
    Rng rng = Rng(seed, kShiftStream).split(t);
    std::array<std::int32_t, 3> shift;
    std::array<std::int64_t, 3> center;
    do {
      for (int a = 0; a < 3; ++a) {
        shift[a] = static_cast<std::int32_t>(rng.uniform_int(-max_shift_voxels, max_shift_voxels));
        center[a] = landmark[a] + shift[a];
      }
    } while (!patch_fits(subj.us.dims, center, dataset.patch_size));
    const BSplineGrid grid = subject_deformation(params, build_index.at(src.subject_id), subj.us,
                                                 src.deformation_id);
    const Index3 c{static_cast<std::size_t>(center[0]), static_cast<std::size_t>(center[1]),
                   static_cast<std::size_t>(center[2])};
    PatchPair pair = make_sample(subj, grid, c, dataset.patch_size);
    pair.landmark_index = src.landmark_index;
    pair.deformation_id = src.deformation_id;
    pair.shift = shift;
    pair.split = Split::test;
    out[t] = std::move(pair);
  });

  Dataset shifted;
  shifted.patch_size = dataset.patch_size;
  shifted.splits = dataset.splits;
  shifted.samples = std::move(out);
  shifted.provenance = dataset.provenance;
  shifted.provenance["shift"] = json{{"seed", seed}, {"max_shift_voxels", max_shift_voxels}};
  return shifted;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

std::vector<std::uint8_t> encode_record(const PatchPair& p, std::size_t patch_size) {
  const std::size_t vox = patch_size * patch_size * patch_size;
  require(p.mri.size() == vox && p.us.size() == vox, ErrorKind::dimension,
          "save_dataset: patch size mismatch in a record");
  io::ByteWriter w;
  w.str(p.subject_id);
  w.u32(p.landmark_index);
  w.u32(p.deformation_id);
  for (auto c : p.center) w.u32(static_cast<std::uint32_t>(c));
  for (auto s : p.shift) w.i32(s);
  w.u32(static_cast<std::uint32_t>(p.split));
  w.f64(p.label_mm);
  w.u32(static_cast<std::uint32_t>(patch_size));
  w.f32s(p.mri);
  w.f32s(p.us);
  return std::move(w.bytes());
}

PatchPair decode_record(std::span<const std::uint8_t> payload, std::size_t index,
                        std::size_t patch_size) {
  io::ByteReader r(payload, "dataset record " + std::to_string(index));
  PatchPair p;
  p.subject_id = r.str();
  p.landmark_index = r.u32();
  p.deformation_id = r.u32();
  for (auto& c : p.center) c = r.u32();
  for (auto& s : p.shift) s = r.i32();
  const auto split = r.u32();
  require(split <= 2, ErrorKind::format, "dataset record " + std::to_string(index) + ": bad split");
  p.split = static_cast<Split>(split);
  p.label_mm = r.f64();
  const auto size = r.u32();
  require(size == patch_size, ErrorKind::format,
          "dataset record " + std::to_string(index) + ": patch size differs from the manifest");
  const std::size_t vox = std::size_t{size} * size * size;
  p.mri = r.f32s(vox);
  p.us = r.f32s(vox);
  require(r.remaining() == 0, ErrorKind::format,
          "dataset record " + std::to_string(index) + ": trailing bytes");
  return p;
}

}  // namespace

void save_dataset(const std::filesystem::path& dir, const Dataset& dataset) {
  io::ByteWriter w;
  w.magic("FEND");
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(dataset.samples.size()));
  json records = json::array();
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const PatchPair& p = dataset.samples[i];
    const auto payload = encode_record(p, dataset.patch_size);
    const std::size_t offset = w.size();
    w.u32(static_cast<std::uint32_t>(payload.size()));
    w.raw(payload.data(), payload.size());
    w.u32(io::crc32(payload));
    records.push_back(json{{"index", i},
                           {"subject_id", p.subject_id},
                           {"split", to_string(p.split)},
                           {"landmark_index", p.landmark_index},
                           {"deformation_id", p.deformation_id},
                           {"center", p.center},
                           {"shift", p.shift},
                           {"label_mm", p.label_mm},
                           {"offset", offset},
                           {"length", payload.size() + 8}});
  }
  json splits = json::object();
  for (const auto& [id, s] : dataset.splits) splits[id] = to_string(s);
  const json manifest{{"format", "FEND"},
                      {"version", kDatasetVersion},
                      {"blob", "dataset.fend"},
                      {"patch_size", dataset.patch_size},
                      {"record_count", dataset.samples.size()},
                      {"splits", splits},
                      {"provenance", dataset.provenance},
                      {"records", records}};
  io::write_file(dir / "dataset.fend", w.bytes());
  const std::string text = manifest.dump(1) + "\n";
  io::write_file(dir / "manifest.json",
                 std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest_bytes = io::read_file(dir / "manifest.json");
  json manifest;
  try {
    manifest = json::parse(manifest_bytes.begin(), manifest_bytes.end());
  } catch (const json::exception& e) {
    fail(ErrorKind::format, (dir / "manifest.json").string() + ": " + e.what());
  }
  Dataset ds;
  json records;
  try {
    require(manifest.at("format") == "FEND", ErrorKind::format, "manifest: not a FEND dataset");
    require(manifest.at("version") == kDatasetVersion, ErrorKind::format,
            "manifest: unsupported version");
    ds.patch_size = manifest.at("patch_size").get<std::size_t>();
    for (const auto& [id, s] : manifest.at("splits").items()) {
      ds.splits[id] = split_from_string(s.get<std::string>());
    }
    ds.provenance = manifest.at("provenance");
    records = manifest.at("records");
    require(records.size() == manifest.at("record_count").get<std::size_t>(), ErrorKind::format,
            "manifest: record_count disagrees with the record list");
  } catch (const json::exception& e) {
    fail(ErrorKind::format, "manifest: " + std::string(e.what()));
  }

  const auto blob = io::read_file(dir / "dataset.fend");
  io::ByteReader r(blob, "dataset blob");
  r.expect_magic("FEND");
  const auto version = r.u32();
  require(version == kDatasetVersion, ErrorKind::format,
          "dataset blob: unsupported version " + std::to_string(version));
  const auto count = r.u32();
  require(count == records.size(), ErrorKind::format,
          "dataset blob: " + std::to_string(count) + " records but the manifest lists " +
              std::to_string(records.size()));
  ds.samples.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto length = r.u32();
    r.need(std::size_t{length} + 4);
    const std::span<const std::uint8_t> payload(blob.data() + r.position(), length);
    const auto stored = [&] {
      std::uint32_t c;
      std::memcpy(&c, blob.data() + r.position() + length, 4);
      return c;
    }();
    require(io::crc32(payload) == stored, ErrorKind::format,
            "dataset blob: checksum mismatch in record " + std::to_string(i));
    PatchPair p = decode_record(payload, i, ds.patch_size);
    const json& rec = records[i];
    require(rec.at("label_mm").get<double>() == p.label_mm &&
                rec.at("subject_id").get<std::string>() == p.subject_id,
            ErrorKind::format, "dataset: manifest and blob disagree at record " + std::to_string(i));
    r.skip(std::size_t{length} + 4);
    ds.samples.push_back(std::move(p));
  }
  require(r.remaining() == 0, ErrorKind::format, "dataset blob: trailing bytes");
  return ds;
}

std::vector<SyntheticSubject> dataset_subjects(const Dataset& dataset, std::size_t workers) {
  require(dataset.provenance.contains("subjects"), ErrorKind::format,
          "dataset: provenance does not record its subject source");
  const json& src = dataset.provenance.at("subjects");
  const auto kind = src.at("kind").get<std::string>();
  if (kind == "synthetic") {
    return synth_cohort(src.at("seed").get<std::uint64_t>(), src.at("count").get<std::size_t>(),
                        src.at("params").get<SynthParams>(), workers);
  }
  if (kind == "directory") {
    std::vector<SyntheticSubject> out;
    for (const auto& p : src.at("paths")) out.push_back(load_subject(p.get<std::string>()));
    return out;
  }
  fail(ErrorKind::format, "dataset: unknown subject source \"" + kind + "\"");
}

}  // namespace fen::data
