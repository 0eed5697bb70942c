#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "focalerrornet/dataset.hpp"
#include "focalerrornet/focalnet.hpp"

namespace fen::train {

struct TrainConfig {
  double learning_rate = 5e-5;
  std::size_t batch_size = 64;
  std::size_t epochs = 60;
  std::array<double, 2> betas{0.9, 0.999};
  double eps = 1e-8;
  std::uint64_t seed = 1;
  std::string model = "focalerrornet";  // or "baseline"
  /// Architecture config; an empty object means the defaults.
  nlohmann::json model_config = nlohmann::json::object();
  std::string dataset;
  std::string checkpoint;
  bool augment = true;
  double noise_sigma = 0.02;
  /// Fix the output affine to the training-label mean and std.
  bool output_scaling = true;
  std::size_t workers = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// First and second moments per parameter tensor, step counter t.
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t t = 0;
};

/// One bias-corrected Adam update of `params` with gradients `grads`
/// (one array per parameter, same lengths). A fresh state is sized lazily.
void adam_step(std::span<Tensor<float>> params, const std::vector<std::vector<double>>& grads,
               AdamState& state, double lr, std::array<double, 2> betas, double eps);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_mse = 0.0;
  double val_mse = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> curve;
  std::size_t best_epoch = 0;
  double best_val_mse = 0.0;
  std::unique_ptr<net::Regressor<float>> model;  // best-validation parameters
};

using Logger = std::function<void(const std::string&)>;

/// Mean squared error of infer-mode predictions over the given samples.
double evaluate_mse(const net::Regressor<float>& model, const data::Dataset& dataset,
                    std::span<const std::size_t> indices, std::size_t workers = 1);

/// Epoch loop: seeded shuffling, augmentation on the train split only,
/// mini-batch Adam on the MSE, infer-mode validation after every epoch and
/// best-validation selection. Row 0 of the curve is the untrained model in
/// infer mode; row e >= 1 holds the mean per-sample training loss of epoch e
/// (summed in sample-index order) and the validation MSE after it.
TrainResult train(const TrainConfig& config, const data::Dataset& dataset,
                  const Logger& log = {});

/// epoch,train_mse,val_mse with 17 significant digits.
void write_loss_curve(const std::filesystem::path& path, std::span<const EpochRecord> curve);

}  // namespace fen::train
