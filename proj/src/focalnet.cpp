#include "focalerrornet/focalnet.hpp"

#include <cmath>
#include <fstream>

#include "focalerrornet/binary_io.hpp"

namespace fen::net {

using nlohmann::json;

void FocalModulationConfig::validate() const {
  require(dim >= 1, ErrorKind::value, "focal modulation: dim must be >= 1");
  require(focal_levels >= 1, ErrorKind::value, "focal modulation: focal_levels must be >= 1");
  require(focal_kernels.size() == focal_levels, ErrorKind::value,
          "focal modulation: need one kernel per focal level");
  for (std::size_t i = 0; i < focal_kernels.size(); ++i) {
    require(focal_kernels[i] % 2 == 1, ErrorKind::value, "focal modulation: kernels must be odd");
    require(i == 0 || focal_kernels[i] >= focal_kernels[i - 1], ErrorKind::value,
            "focal modulation: kernels must be non-decreasing");
  }
}

void FocalErrorNetConfig::validate() const {
  require(in_channels >= 1, ErrorKind::value, "focalerrornet: in_channels must be >= 1");
  require(!stage_dims.empty() && stage_dims.size() == blocks_per_stage.size(), ErrorKind::value,
          "focalerrornet: stage_dims and blocks_per_stage must have equal non-zero length");
  require(stem_dim == stage_dims.front(), ErrorKind::value,
          "focalerrornet: stem_dim must equal the first stage width");
  require(stem_kernel % 2 == 1 && downsample_kernel % 2 == 1, ErrorKind::value,
          "focalerrornet: kernels must be odd");
  require(stem_stride >= 1, ErrorKind::value, "focalerrornet: stem_stride must be >= 1");
  require(mlp_hidden.size() == 2, ErrorKind::value,
          "focalerrornet: the regression head has exactly two dropout layers");
  require(dropout_p >= 0.0 && dropout_p < 1.0, ErrorKind::value,
          "focalerrornet: dropout_p must lie in [0, 1)");
  require(block_mlp_ratio >= 1, ErrorKind::value, "focalerrornet: block_mlp_ratio must be >= 1");
  require(patch_size >= stem_kernel, ErrorKind::value, "focalerrornet: patch too small");
  modulation(stage_dims.front()).validate();
}

void BaselineCnnConfig::validate() const {
  require(!conv_channels.empty(), ErrorKind::value, "baseline: need at least one conv stage");
  require(pool_schedule.size() == conv_channels.size(), ErrorKind::value,
          "baseline: pool_schedule must match conv_channels");
  require(kernel_size % 2 == 1, ErrorKind::value, "baseline: kernel must be odd");
  require(!fc_sizes.empty(), ErrorKind::value, "baseline: need at least one hidden FC layer");
  require(dropout_p >= 0.0 && dropout_p < 1.0, ErrorKind::value,
          "baseline: dropout_p must lie in [0, 1)");
  std::size_t s = patch_size;
  for (bool pool : pool_schedule) {
    if (pool) {
      require(s >= 2, ErrorKind::value, "baseline: patch too small for pool schedule");
      s = (s - 2) / 2 + 1;
    }
  }
}

void to_json(json& j, const FocalModulationConfig& c) {
  j = json{{"dim", c.dim},
           {"focal_levels", c.focal_levels},
           {"focal_kernels", c.focal_kernels},
           {"use_global_level", c.use_global_level}};
}

void from_json(const json& j, FocalModulationConfig& c) {
  FocalModulationConfig d;
  c.dim = j.value("dim", d.dim);
  c.focal_levels = j.value("focal_levels", d.focal_levels);
  c.focal_kernels = j.value("focal_kernels", d.focal_kernels);
  c.use_global_level = j.value("use_global_level", d.use_global_level);
}

void to_json(json& j, const FocalErrorNetConfig& c) {
  j = json{{"in_channels", c.in_channels},
           {"stem_dim", c.stem_dim},
           {"stem_kernel", c.stem_kernel},
           {"stem_stride", c.stem_stride},
           {"stage_dims", c.stage_dims},
           {"blocks_per_stage", c.blocks_per_stage},
           {"downsample_kernel", c.downsample_kernel},
           {"focal_levels", c.focal_levels},
           {"focal_kernels", c.focal_kernels},
           {"use_global_level", c.use_global_level},
           {"block_mlp_ratio", c.block_mlp_ratio},
           {"mlp_hidden", c.mlp_hidden},
           {"dropout_p", c.dropout_p},
           {"patch_size", c.patch_size}};
}

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> known, const char* what) {
  require(j.is_object(), ErrorKind::format, std::string(what) + ": config must be an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    require(ok, ErrorKind::format, std::string(what) + ": unknown field \"" + key + "\"");
  }
}

}  // namespace

void from_json(const json& j, FocalErrorNetConfig& c) {
  reject_unknown(j,
                 {"in_channels", "stem_dim", "stem_kernel", "stem_stride", "stage_dims",
                  "blocks_per_stage", "downsample_kernel", "focal_levels", "focal_kernels",
                  "use_global_level", "block_mlp_ratio", "mlp_hidden", "dropout_p",
                  "patch_size"},
                 "FocalErrorNetConfig");
  FocalErrorNetConfig d;
  c.in_channels = j.value("in_channels", d.in_channels);
  c.stem_dim = j.value("stem_dim", d.stem_dim);
  c.stem_kernel = j.value("stem_kernel", d.stem_kernel);
  c.stem_stride = j.value("stem_stride", d.stem_stride);
  c.stage_dims = j.value("stage_dims", d.stage_dims);
  c.blocks_per_stage = j.value("blocks_per_stage", d.blocks_per_stage);
  c.downsample_kernel = j.value("downsample_kernel", d.downsample_kernel);
  c.focal_levels = j.value("focal_levels", d.focal_levels);
  c.focal_kernels = j.value("focal_kernels", d.focal_kernels);
  c.use_global_level = j.value("use_global_level", d.use_global_level);
  c.block_mlp_ratio = j.value("block_mlp_ratio", d.block_mlp_ratio);
  c.mlp_hidden = j.value("mlp_hidden", d.mlp_hidden);
  c.dropout_p = j.value("dropout_p", d.dropout_p);
  c.patch_size = j.value("patch_size", d.patch_size);
}

void to_json(json& j, const BaselineCnnConfig& c) {
  j = json{{"in_channels", c.in_channels},   {"conv_channels", c.conv_channels},
           {"kernel_size", c.kernel_size},   {"pool_schedule", c.pool_schedule},
           {"fc_sizes", c.fc_sizes},         {"dropout_p", c.dropout_p},
           {"patch_size", c.patch_size}};
}

void from_json(const json& j, BaselineCnnConfig& c) {
  reject_unknown(j,
                 {"in_channels", "conv_channels", "kernel_size", "pool_schedule", "fc_sizes",
                  "dropout_p", "patch_size"},
                 "BaselineCnnConfig");
  BaselineCnnConfig d;
  c.in_channels = j.value("in_channels", d.in_channels);
  c.conv_channels = j.value("conv_channels", d.conv_channels);
  c.kernel_size = j.value("kernel_size", d.kernel_size);
  c.pool_schedule = j.value("pool_schedule", d.pool_schedule);
  c.fc_sizes = j.value("fc_sizes", d.fc_sizes);
  c.dropout_p = j.value("dropout_p", d.dropout_p);
  c.patch_size = j.value("patch_size", d.patch_size);
}

// ---------------------------------------------------------------------------
// Initialization

namespace {

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>(std::move(shape), std::move(v), true);
}

}  // namespace

template <typename T>
ConvParams<T> init_conv(std::size_t cin, std::size_t cout, std::size_t kernel,
                        std::size_t groups, bool bias, Rng& rng) {
  const std::size_t fan_in = (cin / groups) * kernel * kernel * kernel;
  ConvParams<T> p;
  p.weight = uniform_tensor<T>({cout, cin / groups, kernel, kernel, kernel},
                               std::sqrt(6.0 / static_cast<double>(fan_in)), rng);
  if (bias) p.bias = Tensor<T>::zeros({cout}, true);
  return p;
}

template <typename T>
LinearParams<T> init_linear(std::size_t in, std::size_t out, Rng& rng) {
  LinearParams<T> p;
  p.weight = uniform_tensor<T>({in, out}, std::sqrt(6.0 / static_cast<double>(in)), rng);
  p.bias = Tensor<T>::zeros({out}, true);
  return p;
}

template <typename T>
NormParams<T> init_norm(std::size_t dim) {
  return {Tensor<T>::full({dim}, T(1), true), Tensor<T>::zeros({dim}, true)};
}

template <typename T>
FocalModulationParams<T> init_focal_modulation(const FocalModulationConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t c = cfg.dim;
  FocalModulationParams<T> p;
  p.f_q = init_conv<T>(c, c, 1, 1, true, rng);
  p.f_ctx = init_conv<T>(c, c, 1, 1, true, rng);
  p.f_gate = init_conv<T>(c, cfg.gate_channels(), 1, 1, true, rng);
  for (std::size_t k : cfg.focal_kernels) p.focal.push_back(init_conv<T>(c, c, k, c, false, rng));
  p.h = init_conv<T>(c, c, 1, 1, true, rng);
  p.proj = init_conv<T>(c, c, 1, 1, true, rng);
  return p;
}

template <typename T>
FocalBlockParams<T> init_focal_block(const FocalModulationConfig& cfg, std::size_t mlp_ratio,
                                     Rng& rng) {
  FocalBlockParams<T> p;
  p.norm1 = init_norm<T>(cfg.dim);
  p.modulation = init_focal_modulation<T>(cfg, rng);
  p.norm2 = init_norm<T>(cfg.dim);
  p.mlp_in = init_conv<T>(cfg.dim, cfg.dim * mlp_ratio, 1, 1, true, rng);
  p.mlp_out = init_conv<T>(cfg.dim * mlp_ratio, cfg.dim, 1, 1, true, rng);
  return p;
}

// ---------------------------------------------------------------------------
// Forward passes

namespace {

template <typename T>
Tensor<T> pointwise(Tape<T>& tape, const Tensor<T>& x, const ConvParams<T>& p) {
  return ops::conv3d(tape, x, p.weight, p.bias, {1, 0, 1});
}

}  // namespace

template <typename T>
Tensor<T> focal_modulation_forward(Tape<T>& tape, const Tensor<T>& x,
                                   const FocalModulationParams<T>& p,
                                   const FocalModulationConfig& cfg) {
  require(x.rank() == 5 && x.dim(1) == cfg.dim, ErrorKind::dimension,
          "focal modulation: expected " + std::to_string(cfg.dim) + " channels, got " +
              to_string(x.shape()));
  const Tensor<T> q = pointwise(tape, x, p.f_q);
  const Tensor<T> gates = pointwise(tape, x, p.f_gate);
  Tensor<T> ctx = ops::gelu(tape, pointwise(tape, x, p.f_ctx));
  Tensor<T> aggregate;
  for (std::size_t l = 0; l < cfg.focal_levels; ++l) {
    const std::size_t k = cfg.focal_kernels[l];
    ctx = ops::gelu(tape, ops::conv3d(tape, ctx, p.focal[l].weight, p.focal[l].bias,
                                      {1, (k - 1) / 2, cfg.dim}));
    Tensor<T> term = ops::mul(tape, ctx, ops::channel_slice(tape, gates, l, 1));
    aggregate = aggregate.defined() ? ops::add(tape, aggregate, term) : term;
  }
  if (cfg.use_global_level) {
    const Tensor<T> global = ops::gelu(tape, ops::global_avg_pool3d(tape, ctx));
    const Tensor<T> gate = ops::channel_slice(tape, gates, cfg.focal_levels, 1);
    aggregate = ops::add(tape, aggregate, ops::mul(tape, global, gate));
  }
  const Tensor<T> modulator = pointwise(tape, aggregate, p.h);
  return pointwise(tape, ops::mul(tape, q, modulator), p.proj);
}

template <typename T>
Tensor<T> focal_block_forward(Tape<T>& tape, const Tensor<T>& x, const FocalBlockParams<T>& p,
                              const FocalModulationConfig& cfg) {
  const Tensor<T> n1 = ops::layer_norm_channels(tape, x, p.norm1.gamma, p.norm1.beta);
  const Tensor<T> y = ops::add(tape, x, focal_modulation_forward(tape, n1, p.modulation, cfg));
  const Tensor<T> n2 = ops::layer_norm_channels(tape, y, p.norm2.gamma, p.norm2.beta);
  const Tensor<T> hidden = ops::gelu(tape, pointwise(tape, n2, p.mlp_in));
  return ops::add(tape, y, pointwise(tape, hidden, p.mlp_out));
}

// ---------------------------------------------------------------------------
// Regressor

template <typename T>
std::vector<NamedParam<T>> Regressor<T>::parameters() const {
  std::vector<Slot> slots;
  const_cast<Regressor*>(this)->collect(slots);
  std::vector<NamedParam<T>> out;
  out.reserve(slots.size());
  for (auto& [name, ptr] : slots) out.push_back({name, *ptr});
  return out;
}

template <typename T>
std::size_t Regressor<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

template <typename T>
void Regressor<T>::bind_parameters(std::span<const Tensor<T>> tensors) {
  std::vector<Slot> slots;
  collect(slots);
  require(slots.size() == tensors.size(), ErrorKind::dimension,
          "bind_parameters: expected " + std::to_string(slots.size()) + " tensors");
  for (std::size_t i = 0; i < slots.size(); ++i) {
    require(slots[i].second->shape() == tensors[i].shape(), ErrorKind::dimension,
            "bind_parameters: shape mismatch for " + slots[i].first);
    *slots[i].second = tensors[i];
  }
}

template <typename T>
void Regressor<T>::detach_parameters() {
  std::vector<Slot> slots;
  collect(slots);
  for (auto& [name, ptr] : slots) *ptr = ptr->clone(true);
}

namespace {

template <typename T>
void add_conv(std::vector<std::pair<std::string, Tensor<T>*>>& out, const std::string& prefix,
              ConvParams<T>& p) {
  out.emplace_back(prefix + ".weight", &p.weight);
  if (p.bias.defined()) out.emplace_back(prefix + ".bias", &p.bias);
}

template <typename T>
void add_linear(std::vector<std::pair<std::string, Tensor<T>*>>& out, const std::string& prefix,
                LinearParams<T>& p) {
  out.emplace_back(prefix + ".weight", &p.weight);
  out.emplace_back(prefix + ".bias", &p.bias);
}

template <typename T>
void add_norm(std::vector<std::pair<std::string, Tensor<T>*>>& out, const std::string& prefix,
              NormParams<T>& p) {
  out.emplace_back(prefix + ".gamma", &p.gamma);
  out.emplace_back(prefix + ".beta", &p.beta);
}

template <typename T>
Tensor<T> regression_head(Tape<T>& tape, const Tensor<T>& features,
                          const std::vector<LinearParams<T>>& layers, ops::Activation act,
                          double dropout_p, Mode mode, Rng& rng, T scale, T shift) {
  Tensor<T> h = features;
  const bool active = mode != Mode::infer;
  for (std::size_t i = 0; i + 1 < layers.size(); ++i) {
    h = ops::activation(tape, ops::linear(tape, h, layers[i].weight, layers[i].bias), act);
    h = ops::dropout(tape, h, dropout_p, rng, active);
  }
  h = ops::linear(tape, h, layers.back().weight, layers.back().bias);
  return ops::affine(tape, h, scale, shift);
}

void check_input(const Shape& s, std::size_t channels, std::size_t patch, const char* who) {
  require(s.size() == 5 && s[1] == channels && s[2] == patch && s[3] == patch && s[4] == patch,
          ErrorKind::dimension,
          std::string(who) + ": expected [N," + std::to_string(channels) + "," +
              std::to_string(patch) + "^3] input, got " + to_string(s));
}

}  // namespace

template <typename T>
FocalErrorNet<T>::FocalErrorNet(FocalErrorNetConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
  cfg_.validate();
  stem_ = init_conv<T>(cfg_.in_channels, cfg_.stem_dim, cfg_.stem_kernel, 1, true, rng);
  std::size_t prev = cfg_.stem_dim;
  for (std::size_t s = 0; s < cfg_.stage_dims.size(); ++s) {
    Stage stage;
    const std::size_t dim = cfg_.stage_dims[s];
    if (s > 0) stage.downsample = init_conv<T>(prev, dim, cfg_.downsample_kernel, 1, true, rng);
    for (std::size_t b = 0; b < cfg_.blocks_per_stage[s]; ++b) {
      stage.blocks.push_back(init_focal_block<T>(cfg_.modulation(dim), cfg_.block_mlp_ratio, rng));
    }
    stages_.push_back(std::move(stage));
    prev = dim;
  }
  final_norm_ = init_norm<T>(prev);
  std::size_t width = prev;
  for (std::size_t hidden : cfg_.mlp_hidden) {
    head_.push_back(init_linear<T>(width, hidden, rng));
    width = hidden;
  }
  head_.push_back(init_linear<T>(width, 1, rng));
}

template <typename T>
std::unique_ptr<Regressor<T>> FocalErrorNet<T>::clone() const {
  auto copy = std::make_unique<FocalErrorNet<T>>(*this);
  copy->detach_parameters();
  return copy;
}

template <typename T>
void FocalErrorNet<T>::collect(std::vector<typename Regressor<T>::Slot>& out) {
  add_conv(out, "stem", stem_);
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    const std::string sp = "stages." + std::to_string(s);
    if (stages_[s].downsample.weight.defined()) add_conv(out, sp + ".downsample", stages_[s].downsample);
    for (std::size_t b = 0; b < stages_[s].blocks.size(); ++b) {
      auto& blk = stages_[s].blocks[b];
      const std::string bp = sp + ".blocks." + std::to_string(b);
      add_norm(out, bp + ".norm1", blk.norm1);
      add_conv(out, bp + ".modulation.f_q", blk.modulation.f_q);
      add_conv(out, bp + ".modulation.f_ctx", blk.modulation.f_ctx);
      add_conv(out, bp + ".modulation.f_gate", blk.modulation.f_gate);
      for (std::size_t l = 0; l < blk.modulation.focal.size(); ++l) {
        add_conv(out, bp + ".modulation.focal." + std::to_string(l), blk.modulation.focal[l]);
      }
      add_conv(out, bp + ".modulation.h", blk.modulation.h);
      add_conv(out, bp + ".modulation.proj", blk.modulation.proj);
      add_norm(out, bp + ".norm2", blk.norm2);
      add_conv(out, bp + ".mlp_in", blk.mlp_in);
      add_conv(out, bp + ".mlp_out", blk.mlp_out);
    }
  }
  add_norm(out, "final_norm", final_norm_);
  for (std::size_t i = 0; i < head_.size(); ++i) add_linear(out, "head." + std::to_string(i), head_[i]);
}

template <typename T>
Tensor<T> FocalErrorNet<T>::features(Tape<T>& tape, const Tensor<T>& input) const {
  check_input(input.shape(), cfg_.in_channels, cfg_.patch_size, "focalerrornet");
  Tensor<T> x = ops::conv3d(tape, input, stem_.weight, stem_.bias,
                            {cfg_.stem_stride, (cfg_.stem_kernel - 1) / 2, 1});
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    const auto& stage = stages_[s];
    if (stage.downsample.weight.defined()) {
      x = ops::conv3d(tape, x, stage.downsample.weight, stage.downsample.bias,
                      {2, (cfg_.downsample_kernel - 1) / 2, 1});
    }
    const FocalModulationConfig mc = cfg_.modulation(cfg_.stage_dims[s]);
    for (const auto& block : stage.blocks) x = focal_block_forward(tape, x, block, mc);
  }
  x = ops::layer_norm_channels(tape, x, final_norm_.gamma, final_norm_.beta);
  const std::size_t n = x.dim(0), c = x.dim(1);
  return ops::reshape(tape, ops::global_avg_pool3d(tape, x), {n, c});
}

template <typename T>
Tensor<T> FocalErrorNet<T>::head(Tape<T>& tape, const Tensor<T>& features, Mode mode,
                                 Rng& rng) const {
  return regression_head(tape, features, head_, ops::Activation::gelu, cfg_.dropout_p, mode, rng,
                         this->output_scale, this->output_shift);
}

template <typename T>
BaselineCnn<T>::BaselineCnn(BaselineCnnConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::size_t prev = cfg_.in_channels;
  for (std::size_t c : cfg_.conv_channels) {
    convs_.push_back(init_conv<T>(prev, c, cfg_.kernel_size, 1, true, rng));
    prev = c;
  }
  std::size_t width = feature_width();
  for (std::size_t hidden : cfg_.fc_sizes) {
    head_.push_back(init_linear<T>(width, hidden, rng));
    width = hidden;
  }
  head_.push_back(init_linear<T>(width, 1, rng));
}

template <typename T>
std::size_t BaselineCnn<T>::feature_width() const {
  std::size_t s = cfg_.patch_size;
  for (bool pool : cfg_.pool_schedule) {
    if (pool) s = (s - 2) / 2 + 1;
  }
  return cfg_.conv_channels.back() * s * s * s;
}

template <typename T>
std::unique_ptr<Regressor<T>> BaselineCnn<T>::clone() const {
  auto copy = std::make_unique<BaselineCnn<T>>(*this);
  copy->detach_parameters();
  return copy;
}

template <typename T>
void BaselineCnn<T>::collect(std::vector<typename Regressor<T>::Slot>& out) {
  for (std::size_t i = 0; i < convs_.size(); ++i) add_conv(out, "conv." + std::to_string(i), convs_[i]);
  for (std::size_t i = 0; i < head_.size(); ++i) add_linear(out, "head." + std::to_string(i), head_[i]);
}

template <typename T>
Tensor<T> BaselineCnn<T>::features(Tape<T>& tape, const Tensor<T>& input) const {
  check_input(input.shape(), cfg_.in_channels, cfg_.patch_size, "baseline");
  Tensor<T> x = input;
  const std::size_t pad = (cfg_.kernel_size - 1) / 2;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    x = ops::relu(tape, ops::conv3d(tape, x, convs_[i].weight, convs_[i].bias, {1, pad, 1}));
    if (cfg_.pool_schedule[i]) x = ops::max_pool3d(tape, x, 2, 2);
  }
  const std::size_t n = x.dim(0);
  return ops::reshape(tape, x, {n, x.numel() / n});
}

template <typename T>
Tensor<T> BaselineCnn<T>::head(Tape<T>& tape, const Tensor<T>& features, Mode mode,
                               Rng& rng) const {
  return regression_head(tape, features, head_, ops::Activation::relu, cfg_.dropout_p, mode, rng,
                         this->output_scale, this->output_shift);
}

// ---------------------------------------------------------------------------
// Helpers

template <typename T>
Tensor<T> stack_pair(std::span<const float> mri, std::span<const float> us, std::size_t patch) {
  return stack_batch<T>({mri}, {us}, patch);
}

template <typename T>
Tensor<T> stack_batch(const std::vector<std::span<const float>>& mri,
                      const std::vector<std::span<const float>>& us, std::size_t patch) {
  require(mri.size() == us.size() && !mri.empty(), ErrorKind::dimension,
          "stack_batch: need equal, non-zero numbers of MRI and US patches");
  const std::size_t vox = patch * patch * patch;
  std::vector<T> data(mri.size() * 2 * vox);
  for (std::size_t i = 0; i < mri.size(); ++i) {
    require(mri[i].size() == vox && us[i].size() == vox, ErrorKind::dimension,
            "stack_batch: patches must have " + std::to_string(patch) + "^3 voxels");
    std::copy(mri[i].begin(), mri[i].end(), data.begin() + static_cast<std::ptrdiff_t>(2 * i * vox));
    std::copy(us[i].begin(), us[i].end(),
              data.begin() + static_cast<std::ptrdiff_t>((2 * i + 1) * vox));
  }
  return Tensor<T>({mri.size(), 2, patch, patch, patch}, std::move(data));
}

template <typename T>
T focalerrornet_forward(const Regressor<T>& model, std::span<const float> mri_patch,
                        std::span<const float> us_patch, Mode mode, Rng& rng) {
  Tape<T> tape(false);
  const Tensor<T> input = stack_pair<T>(mri_patch, us_patch, model.patch_size());
  return model.forward(tape, input, mode, rng).item();
}

template <typename T>
std::unique_ptr<Regressor<T>> make_model(const std::string& kind, const json& config, Rng& rng) {
  if (kind == "focalerrornet") {
    return std::make_unique<FocalErrorNet<T>>(config.get<FocalErrorNetConfig>(), rng);
  }
  if (kind == "baseline") {
    return std::make_unique<BaselineCnn<T>>(config.get<BaselineCnnConfig>(), rng);
  }
  fail(ErrorKind::value, "unknown model kind \"" + kind + "\" (expected focalerrornet or baseline)");
}

template <typename T>
void copy_parameters(const Regressor<T>& from, Regressor<T>& to) {
  const auto src = from.parameters();
  auto dst = to.parameters();
  require(src.size() == dst.size(), ErrorKind::dimension, "copy_parameters: architecture mismatch");
  for (std::size_t i = 0; i < src.size(); ++i) {
    require(src[i].tensor.shape() == dst[i].tensor.shape(), ErrorKind::dimension,
            "copy_parameters: shape mismatch at " + src[i].name);
    auto d = dst[i].tensor.mutable_data();
    std::copy(src[i].tensor.data().begin(), src[i].tensor.data().end(), d.begin());
  }
  to.output_shift = from.output_shift;
  to.output_scale = from.output_scale;
}

std::vector<NamedTensor> model_state(const Regressor<float>& model) {
  std::vector<NamedTensor> out;
  for (const auto& p : model.parameters()) out.push_back({p.name, p.tensor.clone()});
  out.push_back({"output.shift", Tensor<float>({1}, {model.output_shift})});
  out.push_back({"output.scale", Tensor<float>({1}, {model.output_scale})});
  return out;
}

void load_model_state(Regressor<float>& model, const std::vector<NamedTensor>& state) {
  auto params = model.parameters();
  require(state.size() == params.size() + 2, ErrorKind::format,
          "checkpoint: expected " + std::to_string(params.size() + 2) + " tensors, found " +
              std::to_string(state.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    require(state[i].name == params[i].name && state[i].tensor.shape() == params[i].tensor.shape(),
            ErrorKind::format,
            "checkpoint: tensor " + std::to_string(i) + " is \"" + state[i].name + "\" " +
                to_string(state[i].tensor.shape()) + ", model expects \"" + params[i].name +
                "\" " + to_string(params[i].tensor.shape()));
    auto d = params[i].tensor.mutable_data();
    std::copy(state[i].tensor.data().begin(), state[i].tensor.data().end(), d.begin());
  }
  const auto& shift = state[params.size()];
  const auto& scale = state[params.size() + 1];
  require(shift.name == "output.shift" && scale.name == "output.scale", ErrorKind::format,
          "checkpoint: missing output scaling");
  model.output_shift = shift.tensor.item();
  model.output_scale = scale.tensor.item();
}

namespace {
std::filesystem::path sidecar(const std::filesystem::path& path) {
  auto p = path;
  p.replace_extension(".json");
  return p;
}
}  // namespace

void save_model(const std::filesystem::path& path, const Regressor<float>& model,
                const json& training) {
  save_checkpoint(path, model_state(model));
  json meta{{"kind", model.kind()}, {"config", model.config_json()}};
  if (!training.is_null()) meta["training"] = training;
  const std::string text = meta.dump(2) + "\n";
  io::write_file(sidecar(path), std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

json load_model_meta(const std::filesystem::path& path) {
  const auto meta_bytes = io::read_file(sidecar(path));
  try {
    return json::parse(meta_bytes.begin(), meta_bytes.end());
  } catch (const json::exception& e) {
    fail(ErrorKind::format, sidecar(path).string() + ": " + e.what());
  }
}

std::unique_ptr<Regressor<float>> load_model(const std::filesystem::path& path) {
  const json meta = load_model_meta(path);
  require(meta.contains("kind") && meta.contains("config"), ErrorKind::format,
          sidecar(path).string() + ": missing kind/config");
  Rng rng(0, 0);
  auto model = make_model<float>(meta["kind"].get<std::string>(), meta["config"], rng);
  load_model_state(*model, load_checkpoint(path));
  return model;
}

#define FEN_INSTANTIATE_NET(T)                                                                 \
  template ConvParams<T> init_conv<T>(std::size_t, std::size_t, std::size_t, std::size_t, bool, \
                                      Rng&);                                                   \
  template LinearParams<T> init_linear<T>(std::size_t, std::size_t, Rng&);                     \
  template NormParams<T> init_norm<T>(std::size_t);                                            \
  template FocalModulationParams<T> init_focal_modulation<T>(const FocalModulationConfig&,     \
                                                             Rng&);                            \
  template FocalBlockParams<T> init_focal_block<T>(const FocalModulationConfig&, std::size_t,  \
                                                   Rng&);                                      \
  template Tensor<T> focal_modulation_forward(Tape<T>&, const Tensor<T>&,                      \
                                              const FocalModulationParams<T>&,                 \
                                              const FocalModulationConfig&);                   \
  template Tensor<T> focal_block_forward(Tape<T>&, const Tensor<T>&,                           \
                                         const FocalBlockParams<T>&,                           \
                                         const FocalModulationConfig&);                        \
  template class Regressor<T>;                                                                 \
  template class FocalErrorNet<T>;                                                             \
  template class BaselineCnn<T>;                                                               \
  template Tensor<T> stack_pair<T>(std::span<const float>, std::span<const float>, std::size_t); \
  template Tensor<T> stack_batch<T>(const std::vector<std::span<const float>>&,                \
                                    const std::vector<std::span<const float>>&, std::size_t);  \
  template T focalerrornet_forward(const Regressor<T>&, std::span<const float>,                \
                                   std::span<const float>, Mode, Rng&);                        \
  template std::unique_ptr<Regressor<T>> make_model<T>(const std::string&, const json&, Rng&); \
  template void copy_parameters(const Regressor<T>&, Regressor<T>&);

FEN_INSTANTIATE_NET(float)
FEN_INSTANTIATE_NET(double)

}  // namespace fen::net
