#pragma once

#include <cstddef>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "focalerrornet/checkpoint.hpp"
#include "focalerrornet/ops.hpp"
#include "focalerrornet/rng.hpp"
#include "focalerrornet/tensor.hpp"

namespace fen::net {

/// train: dropout on. infer: dropout off. mc: dropout on at inference.
enum class Mode { train, infer, mc };

struct FocalModulationConfig {
  std::size_t dim = 16;
  std::size_t focal_levels = 2;
  std::vector<std::size_t> focal_kernels{3, 5};
  bool use_global_level = true;

  void validate() const;
  std::size_t gate_channels() const { return focal_levels + (use_global_level ? 1 : 0); }
};

struct FocalErrorNetConfig {
  std::size_t in_channels = 2;
  std::size_t stem_dim = 16;
  std::size_t stem_kernel = 5;
  std::size_t stem_stride = 4;
  std::vector<std::size_t> stage_dims{16, 32, 64};
  std::vector<std::size_t> blocks_per_stage{2, 2, 2};
  std::size_t downsample_kernel = 1;
  std::size_t focal_levels = 2;
  std::vector<std::size_t> focal_kernels{3, 5};
  bool use_global_level = true;
  std::size_t block_mlp_ratio = 2;
  std::vector<std::size_t> mlp_hidden{128, 64};
  double dropout_p = 0.2;
  std::size_t patch_size = 33;

  void validate() const;
  FocalModulationConfig modulation(std::size_t dim) const {
    return {dim, focal_levels, focal_kernels, use_global_level};
  }
};

struct BaselineCnnConfig {
  std::size_t in_channels = 2;
  std::vector<std::size_t> conv_channels{8, 16, 32, 64};
  std::size_t kernel_size = 3;
  /// Max-pool (2, stride 2) after conv stage i when pool_schedule[i] is true.
  std::vector<bool> pool_schedule{true, true, true, true};
  std::vector<std::size_t> fc_sizes{128};
  double dropout_p = 0.2;
  std::size_t patch_size = 33;

  void validate() const;
};

void to_json(nlohmann::json& j, const FocalModulationConfig& c);
void from_json(const nlohmann::json& j, FocalModulationConfig& c);
void to_json(nlohmann::json& j, const FocalErrorNetConfig& c);
void from_json(const nlohmann::json& j, FocalErrorNetConfig& c);
void to_json(nlohmann::json& j, const BaselineCnnConfig& c);
void from_json(const nlohmann::json& j, BaselineCnnConfig& c);

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

/// Convolution weight [Cout, Cin/groups, k, k, k] and optional bias [Cout].
template <typename T>
struct ConvParams {
  Tensor<T> weight;
  Tensor<T> bias;
};

/// Linear weight [F, G] and bias [G].
template <typename T>
struct LinearParams {
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
struct NormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
};

/// One field per symbol of the modulation: query projection, context
/// projection, gates, per-level depth-wise kernels, modulator projection h,
/// output projection.
template <typename T>
struct FocalModulationParams {
  ConvParams<T> f_q;
  ConvParams<T> f_ctx;
  ConvParams<T> f_gate;
  std::vector<ConvParams<T>> focal;
  ConvParams<T> h;
  ConvParams<T> proj;
};

template <typename T>
struct FocalBlockParams {
  NormParams<T> norm1;
  FocalModulationParams<T> modulation;
  NormParams<T> norm2;
  ConvParams<T> mlp_in;
  ConvParams<T> mlp_out;
};

/// Uniform(-a, a) weights with a = sqrt(6 / fan_in); zero biases.
template <typename T>
ConvParams<T> init_conv(std::size_t cin, std::size_t cout, std::size_t kernel,
                        std::size_t groups, bool bias, Rng& rng);
template <typename T>
LinearParams<T> init_linear(std::size_t in, std::size_t out, Rng& rng);
template <typename T>
NormParams<T> init_norm(std::size_t dim);

template <typename T>
FocalModulationParams<T> init_focal_modulation(const FocalModulationConfig& cfg, Rng& rng);
template <typename T>
FocalBlockParams<T> init_focal_block(const FocalModulationConfig& cfg, std::size_t mlp_ratio,
                                     Rng& rng);

/// q = f_q(x); ctx0 = GELU(f_ctx(x)); ctx_l = GELU(DWConv_l(ctx_{l-1}));
/// optional global level GELU(avgpool(ctx_L)); gates g = f_gate(x);
/// out = proj(q * h(sum_l g_l * ctx_l)).
template <typename T>
Tensor<T> focal_modulation_forward(Tape<T>& tape, const Tensor<T>& x,
                                   const FocalModulationParams<T>& p,
                                   const FocalModulationConfig& cfg);

/// y = x + FM(LN1(x)); z = y + MLP(LN2(y)).
template <typename T>
Tensor<T> focal_block_forward(Tape<T>& tape, const Tensor<T>& x, const FocalBlockParams<T>& p,
                              const FocalModulationConfig& cfg);

/// Common interface of the two regressors.
///
/// The trunk (features) is deterministic; all dropout lives in the head.
/// Outputs are in mm after a fixed output scaling (shift, scale) that the
/// trainer sets from the training labels.
template <typename T>
class Regressor {
 public:
  virtual ~Regressor() = default;

  virtual std::string kind() const = 0;
  virtual nlohmann::json config_json() const = 0;
  virtual std::size_t patch_size() const = 0;
  virtual std::unique_ptr<Regressor> clone() const = 0;

  /// [N,2,P,P,P] -> [N,F]
  virtual Tensor<T> features(Tape<T>& tape, const Tensor<T>& input) const = 0;
  /// [N,F] -> [N,1] in mm.
  virtual Tensor<T> head(Tape<T>& tape, const Tensor<T>& features, Mode mode, Rng& rng) const = 0;

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& input, Mode mode, Rng& rng) const {
    return head(tape, features(tape, input), mode, rng);
  }

  /// Trainable tensors in a fixed order.
  std::vector<NamedParam<T>> parameters() const;
  std::size_t parameter_count() const;
  /// Replaces the parameter handles, in parameters() order, by `tensors`
  /// (same shapes). Used by gradient checks to route perturbed inputs.
  void bind_parameters(std::span<const Tensor<T>> tensors);

  T output_shift = T(0);
  T output_scale = T(1);

 protected:
  using Slot = std::pair<std::string, Tensor<T>*>;
  /// Addresses of every trainable member, in checkpoint order.
  virtual void collect(std::vector<Slot>& out) = 0;
  /// Replaces every parameter handle by a private deep copy.
  void detach_parameters();
};

template <typename T>
class FocalErrorNet final : public Regressor<T> {
 public:
  struct Stage {
    ConvParams<T> downsample;  // undefined for the first stage
    std::vector<FocalBlockParams<T>> blocks;
  };

  FocalErrorNet(FocalErrorNetConfig cfg, Rng& rng);

  std::string kind() const override { return "focalerrornet"; }
  nlohmann::json config_json() const override { return cfg_; }
  std::size_t patch_size() const override { return cfg_.patch_size; }
  std::unique_ptr<Regressor<T>> clone() const override;
  Tensor<T> features(Tape<T>& tape, const Tensor<T>& input) const override;
  Tensor<T> head(Tape<T>& tape, const Tensor<T>& features, Mode mode, Rng& rng) const override;

  const FocalErrorNetConfig& config() const { return cfg_; }
  std::vector<Stage>& stages() { return stages_; }

 protected:
  void collect(std::vector<typename Regressor<T>::Slot>& out) override;

 private:
  FocalErrorNetConfig cfg_;
  ConvParams<T> stem_;
  std::vector<Stage> stages_;
  NormParams<T> final_norm_;
  std::vector<LinearParams<T>> head_;
};

template <typename T>
class BaselineCnn final : public Regressor<T> {
 public:
  BaselineCnn(BaselineCnnConfig cfg, Rng& rng);

  std::string kind() const override { return "baseline"; }
  nlohmann::json config_json() const override { return cfg_; }
  std::size_t patch_size() const override { return cfg_.patch_size; }
  std::unique_ptr<Regressor<T>> clone() const override;
  Tensor<T> features(Tape<T>& tape, const Tensor<T>& input) const override;
  Tensor<T> head(Tape<T>& tape, const Tensor<T>& features, Mode mode, Rng& rng) const override;

  const BaselineCnnConfig& config() const { return cfg_; }
  /// Flattened trunk width for the configured patch size.
  std::size_t feature_width() const;

 protected:
  void collect(std::vector<typename Regressor<T>::Slot>& out) override;

 private:
  BaselineCnnConfig cfg_;
  std::vector<ConvParams<T>> convs_;
  std::vector<LinearParams<T>> head_;
};

/// Stacks MRI and US patches ([P,P,P] or [1,P,P,P] each) into [1,2,P,P,P].
template <typename T>
Tensor<T> stack_pair(std::span<const float> mri, std::span<const float> us, std::size_t patch);

/// Stacks a batch of pairs into [N,2,P,P,P].
template <typename T>
Tensor<T> stack_batch(const std::vector<std::span<const float>>& mri,
                      const std::vector<std::span<const float>>& us, std::size_t patch);

/// Single-pair prediction in mm.
template <typename T>
T focalerrornet_forward(const Regressor<T>& model, std::span<const float> mri_patch,
                        std::span<const float> us_patch, Mode mode, Rng& rng);

/// Model factory from a kind string and its JSON config.
template <typename T>
std::unique_ptr<Regressor<T>> make_model(const std::string& kind, const nlohmann::json& config,
                                         Rng& rng);

/// Trainable parameters plus the output scaling, as FENP tensors.
std::vector<NamedTensor> model_state(const Regressor<float>& model);
void load_model_state(Regressor<float>& model, const std::vector<NamedTensor>& state);

/// Writes `path` (FENP) and `path` with extension .json (kind, config and,
/// when not null, a "training" record such as the split map).
void save_model(const std::filesystem::path& path, const Regressor<float>& model,
                const nlohmann::json& training = nullptr);
/// The .json sidecar of a saved model.
nlohmann::json load_model_meta(const std::filesystem::path& path);
std::unique_ptr<Regressor<float>> load_model(const std::filesystem::path& path);

/// Copies values between models of identical architecture.
template <typename T>
void copy_parameters(const Regressor<T>& from, Regressor<T>& to);

}  // namespace fen::net
