#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "focalerrornet/bspline.hpp"
#include "focalerrornet/rng.hpp"
#include "focalerrornet/volume.hpp"

namespace fen::data {

/// Generation parameters of one synthetic RESECT stand-in subject.
struct SynthParams {
  std::size_t size = 128;       // voxels per axis
  double spacing_mm = 0.5;
  std::size_t blobs = 28;       // smooth ellipsoidal structures
  double mri_noise = 0.02;      // additive Gaussian sigma, [0,1] units
  double speckle = 0.3;         // multiplicative speckle sigma
  std::size_t min_landmarks = 12;
  std::size_t max_landmarks = 16;
  double min_landmark_distance_mm = 8.0;
  std::size_t border_voxels = 16;  // landmarks keep a full 33^3 patch inside

  void validate() const;
};

void to_json(nlohmann::json& j, const SynthParams& p);
void from_json(const nlohmann::json& j, SynthParams& p);

struct SyntheticSubject {
  std::string id;
  Volume3D mri;
  Volume3D us;        // zero outside the field of view
  Volume3D fov_mask;  // 1 inside the ultrasound wedge, 0 outside
  std::vector<Index3> landmarks;  // voxel indices (centers of their voxels)
};

SyntheticSubject synth_subject(Rng& rng, const SynthParams& params, std::string id);

/// Directory layout: mri.fenv, us.fenv, fov.fenv, landmarks.json.
void save_subject(const std::filesystem::path& dir, const SyntheticSubject& subject);
SyntheticSubject load_subject(const std::filesystem::path& dir);

/// Stream used for subject i of a synthetic cohort with master seed `seed`.
Rng subject_stream(std::uint64_t seed, std::size_t subject_index);
/// Generates `count` subjects named subject_000, subject_001, ...
std::vector<SyntheticSubject> synth_cohort(std::uint64_t seed, std::size_t count,
                                           const SynthParams& params, std::size_t workers = 1);

/// Copy of the size^3 cube centered at `center`, min-max normalized to
/// [0,1] (a constant cube becomes all zeros).
std::vector<float> extract_patch(const Volume3D& vol, const Index3& center, std::size_t size = 33);
/// In-place min-max normalization used by extract_patch.
void normalize_minmax(std::span<float> values);

enum class Split { train, val, test };
const char* to_string(Split s);
Split split_from_string(const std::string& s);

struct PatchPair {
  std::vector<float> mri;  // size^3, [0,1]
  std::vector<float> us;   // size^3, [0,1]
  double label_mm = 0.0;
  std::string subject_id;
  std::uint32_t landmark_index = 0;
  std::uint32_t deformation_id = 0;
  Index3 center{0, 0, 0};              // voxel index of the patch center
  std::array<std::int32_t, 3> shift{0, 0, 0};  // offset from the landmark
  Split split = Split::train;
};

struct BuildParams {
  std::size_t deformations_per_volume = 10;
  DeformationParams deformation;
  std::size_t patch_size = 33;
  std::array<double, 3> fractions{0.6, 0.2, 0.2};
  std::uint64_t seed = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const BuildParams& p);
void from_json(const nlohmann::json& j, BuildParams& p);

/// Samples plus everything needed to regenerate them.
struct Dataset {
  std::size_t patch_size = 33;
  std::map<std::string, Split> splits;
  std::vector<PatchPair> samples;
  /// Generation record: build parameters, subject source, shift seed, ...
  nlohmann::json provenance = nlohmann::json::object();

  std::vector<std::size_t> indices(Split s) const;
};

/// Subject-level shuffle, then contiguous assignment with
/// n_val = floor(f_val n), n_test = floor(f_test n), the rest to train.
std::map<std::string, Split> split_subjects(const std::vector<std::string>& ids,
                                            const std::array<double, 3>& fractions, Rng& rng);

/// Deterministic deformation k of subject i (shared by build and shift).
BSplineGrid subject_deformation(const BuildParams& params, std::size_t subject_index,
                                const Volume3D& reference, std::size_t k);

/// Label and patches for one sample: MRI patch from the fixed MRI, US patch
/// from the warped US, label = mean ||u|| over the US patch voxels.
PatchPair make_sample(const SyntheticSubject& subject, const BSplineGrid& grid,
                      const Index3& center, std::size_t patch_size);

using Logger = std::function<void(const std::string&)>;

/// Emits subjects x deformations x usable landmarks samples, ordered by
/// (subject, deformation, landmark). Landmarks too close to a border are
/// skipped and logged.
Dataset build_dataset(const std::vector<SyntheticSubject>& subjects, const BuildParams& params,
                      std::size_t workers = 1, const Logger& log = {});

/// Randomly flips both patches along each axis (p = 0.5 each) and adds
/// clamped Gaussian noise; the label is untouched.
void augment(PatchPair& pair, Rng& rng, double noise_sigma = 0.02);
/// Reverses axis `axis` (0 = x) of a cubic patch.
void flip_axis(std::span<float> patch, std::size_t size, std::size_t axis);

/// Test samples re-extracted at landmark + integer shift, each component
/// ~ U{-max_shift..max_shift}, redrawn until the patch fits.
Dataset shifted_test_set(const Dataset& dataset, const std::vector<SyntheticSubject>& subjects,
                         std::uint64_t seed, int max_shift_voxels = 10, std::size_t workers = 1);

// FEND blob, little-endian: "FEND", version u32, record count u32, then per
// record: payload length u32, payload, CRC32(payload) u32. The payload is
// subject id (u32 length + UTF-8), landmark u32, deformation u32,
// center 3 x u32, shift 3 x i32, split u32, label f64, patch size u32,
// mri f32[P^3], us f32[P^3]. The manifest (manifest.json) lists the same
// records with byte offsets and labels, plus splits and provenance.
inline constexpr std::uint32_t kDatasetVersion = 1;

void save_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& dir);

/// Regenerates or loads the subjects a dataset was built from.
std::vector<SyntheticSubject> dataset_subjects(const Dataset& dataset, std::size_t workers = 1);

}  // namespace fen::data
