#include "focalerrornet/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "focalerrornet/binary_io.hpp"
#include "focalerrornet/parallel.hpp"

namespace fen::train {

using nlohmann::json;

namespace {

constexpr std::uint64_t kInitStream = 0x1417;
constexpr std::uint64_t kShuffleStream = 0x5f1e;
constexpr std::uint64_t kAugmentStream = 0xa06;
constexpr std::uint64_t kDropoutStream = 0xd809;

}  // namespace

void TrainConfig::validate() const {
  require(learning_rate >= 0.0 && std::isfinite(learning_rate), ErrorKind::value,
          "train: learning_rate must be finite and >= 0");
  require(batch_size >= 1, ErrorKind::value, "train: batch_size must be >= 1");
  require(epochs >= 1, ErrorKind::value, "train: epochs must be >= 1");
  require(betas[0] >= 0.0 && betas[0] < 1.0 && betas[1] >= 0.0 && betas[1] < 1.0,
          ErrorKind::value, "train: betas must lie in [0, 1)");
  require(eps > 0.0, ErrorKind::value, "train: eps must be > 0");
  require(model == "focalerrornet" || model == "baseline", ErrorKind::value,
          "train: model must be focalerrornet or baseline");
  require(model_config.is_object(), ErrorKind::format, "train: model_config must be an object");
  require(noise_sigma >= 0.0, ErrorKind::value, "train: noise_sigma must be >= 0");
  require(workers >= 1, ErrorKind::value, "train: workers must be >= 1");
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"learning_rate", c.learning_rate},
           {"batch_size", c.batch_size},
           {"epochs", c.epochs},
           {"betas", c.betas},
           {"eps", c.eps},
           {"seed", c.seed},
           {"model", c.model},
           {"model_config", c.model_config},
           {"dataset", c.dataset},
           {"checkpoint", c.checkpoint},
           {"augment", c.augment},
           {"noise_sigma", c.noise_sigma},
           {"output_scaling", c.output_scaling},
           {"workers", c.workers}};
}

void from_json(const json& j, TrainConfig& c) {
  require(j.is_object(), ErrorKind::format, "TrainConfig: expected an object");
  static const char* known[] = {"learning_rate", "batch_size", "epochs",   "betas",
                                "eps",           "seed",       "model",    "model_config",
                                "dataset",       "checkpoint", "augment",  "noise_sigma",
                                "output_scaling", "workers"};
  for (const auto& [key, _] : j.items()) {
    require(std::find(std::begin(known), std::end(known), key) != std::end(known),
            ErrorKind::format, "TrainConfig: unknown field \"" + key + "\"");
  }
  const TrainConfig d;
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.epochs = j.value("epochs", d.epochs);
  c.betas = j.value("betas", d.betas);
  c.eps = j.value("eps", d.eps);
  c.seed = j.value("seed", d.seed);
  c.model = j.value("model", d.model);
  c.model_config = j.value("model_config", d.model_config);
  c.dataset = j.value("dataset", d.dataset);
  c.checkpoint = j.value("checkpoint", d.checkpoint);
  c.augment = j.value("augment", d.augment);
  c.noise_sigma = j.value("noise_sigma", d.noise_sigma);
  c.output_scaling = j.value("output_scaling", d.output_scaling);
  c.workers = j.value("workers", d.workers);
}

void adam_step(std::span<Tensor<float>> params, const std::vector<std::vector<double>>& grads,
               AdamState& state, double lr, std::array<double, 2> betas, double eps) {
  require(grads.size() == params.size(), ErrorKind::dimension,
          "adam_step: " + std::to_string(grads.size()) + " gradients for " +
              std::to_string(params.size()) + " parameters");
  for (std::size_t p = 0; p < params.size(); ++p) {
    require(grads[p].size() == params[p].numel(), ErrorKind::dimension,
            "adam_step: gradient " + std::to_string(p) + " has the wrong length");
    for (double g : grads[p]) {
      require(std::isfinite(g), ErrorKind::numeric,
              "adam_step: non-finite gradient in parameter " + std::to_string(p));
    }
  }
  if (state.m.empty()) {
    for (const auto& t : params) {
      state.m.emplace_back(t.numel(), 0.0);
      state.v.emplace_back(t.numel(), 0.0);
    }
  }
  require(state.m.size() == params.size(), ErrorKind::dimension,
          "adam_step: state does not match the parameter list");
  state.t += 1;
  const double b1 = betas[0], b2 = betas[1];
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto theta = params[p].mutable_data();
    auto& m = state.m[p];
    auto& v = state.v[p];
    for (std::size_t k = 0; k < theta.size(); ++k) {
      const double g = grads[p][k];
      m[k] = b1 * m[k] + (1.0 - b1) * g;
      v[k] = b2 * v[k] + (1.0 - b2) * g * g;
      const double m_hat = m[k] / bc1;
      const double v_hat = v[k] / bc2;
      theta[k] = static_cast<float>(static_cast<double>(theta[k]) - lr * m_hat / (std::sqrt(v_hat) + eps));
    }
  }
}

double evaluate_mse(const net::Regressor<float>& model, const data::Dataset& dataset,
                    std::span<const std::size_t> indices, std::size_t workers) {
  require(!indices.empty(), ErrorKind::value, "evaluate_mse: no samples");
  std::vector<double> sq(indices.size());
  parallel_for(indices.size(), workers, [&](std::size_t i) {
    const auto& s = dataset.samples[indices[i]];
    Rng unused(0, 0);
    const double pred =
        net::focalerrornet_forward<float>(model, s.mri, s.us, net::Mode::infer, unused);
    sq[i] = (pred - s.label_mm) * (pred - s.label_mm);
  });
  return std::accumulate(sq.begin(), sq.end(), 0.0) / static_cast<double>(sq.size());
}

namespace {

json default_model_config(const std::string& kind) {
  if (kind == "baseline") return json(net::BaselineCnnConfig{});
  return json(net::FocalErrorNetConfig{});
}

/// Forward and backward of one training sample on a replica; returns the
/// loss and leaves the flattened gradient in `grad`.
double sample_gradient(net::Regressor<float>& replica, std::vector<net::NamedParam<float>>& params,
                       const data::PatchPair& source, const TrainConfig& cfg,
                       std::size_t epoch, std::size_t index, std::size_t patch,
                       std::vector<float>& grad) {
  data::PatchPair pair = source;
  if (cfg.augment) {
    Rng aug = Rng(cfg.seed, kAugmentStream).split(epoch).split(index);
    data::augment(pair, aug, cfg.noise_sigma);
  }
  Rng drop = Rng(cfg.seed, kDropoutStream).split(epoch).split(index);
  Tape<float> tape;
  const Tensor<float> input = net::stack_pair<float>(pair.mri, pair.us, patch);
  const Tensor<float> pred = replica.forward(tape, input, net::Mode::train, drop);
  const Tensor<float> target({1, 1}, {static_cast<float>(pair.label_mm)});
  const Tensor<float> loss = ops::mse_loss(tape, pred, target);
  tape.backward(loss);
  std::size_t o = 0;
  for (auto& p : params) {
    if (p.tensor.has_grad()) {
      const auto g = p.tensor.grad();
      std::copy(g.begin(), g.end(), grad.begin() + static_cast<std::ptrdiff_t>(o));
    } else {
      std::fill_n(grad.begin() + static_cast<std::ptrdiff_t>(o), p.tensor.numel(), 0.0f);
    }
    o += p.tensor.numel();
    p.tensor.zero_grad();
  }
  return loss.item();
}

}  // namespace

TrainResult train(const TrainConfig& config, const data::Dataset& dataset, const Logger& log) {
  config.validate();
  const auto train_idx = dataset.indices(data::Split::train);
  const auto val_idx = dataset.indices(data::Split::val);
  require(!train_idx.empty() && !val_idx.empty() && !dataset.indices(data::Split::test).empty(),
          ErrorKind::format, "train: dataset must contain train, val and test samples");

  Rng init(config.seed, kInitStream);
  const json model_config =
      config.model_config.empty() ? default_model_config(config.model) : config.model_config;
  auto model = net::make_model<float>(config.model, model_config, init);
  require(model->patch_size() == dataset.patch_size, ErrorKind::format,
          "train: model patch size " + std::to_string(model->patch_size()) +
              " differs from dataset patch size " + std::to_string(dataset.patch_size));

  if (config.output_scaling) {
    double mean = 0.0;
    for (auto i : train_idx) mean += dataset.samples[i].label_mm;
    mean /= static_cast<double>(train_idx.size());
    double var = 0.0;
    for (auto i : train_idx) {
      const double d = dataset.samples[i].label_mm - mean;
      var += d * d;
    }
    const double sd = std::sqrt(var / static_cast<double>(train_idx.size()));
    model->output_shift = static_cast<float>(mean);
    model->output_scale = sd > 1e-6 ? static_cast<float>(sd) : 1.0f;
  }

  const std::size_t workers = std::min(config.workers, config.batch_size);
  std::vector<std::unique_ptr<net::Regressor<float>>> replicas;
  std::vector<std::vector<net::NamedParam<float>>> replica_params;
  for (std::size_t w = 0; w < workers; ++w) {
    replicas.push_back(model->clone());
    replica_params.push_back(replicas.back()->parameters());
  }
  auto master_named = model->parameters();
  std::vector<Tensor<float>> master;
  std::size_t total = 0;
  for (auto& p : master_named) {
    master.push_back(p.tensor);
    total += p.tensor.numel();
  }

  std::vector<std::size_t> rank(dataset.samples.size(), 0);
  for (std::size_t r = 0; r < train_idx.size(); ++r) rank[train_idx[r]] = r;

  TrainResult result;
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  result.curve.push_back({0, evaluate_mse(*model, dataset, train_idx, config.workers),
                          evaluate_mse(*model, dataset, val_idx, config.workers)});
  result.best_epoch = 0;
  result.best_val_mse = result.curve[0].val_mse;
  auto best_state = net::model_state(*model);
  if (log) {
    char line[160];
    std::snprintf(line, sizeof line, "epoch 0 train_mse %.6f val_mse %.6f (%zu params)",
                  result.curve[0].train_mse, result.curve[0].val_mse, total);
    log(line);
  }

  AdamState adam;
  std::vector<double> losses(train_idx.size());
  std::vector<std::vector<float>> sample_grads(config.batch_size, std::vector<float>(total));
  std::vector<std::vector<double>> mean_grad(master.size());
  for (std::size_t p = 0; p < master.size(); ++p) mean_grad[p].assign(master[p].numel(), 0.0);

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::vector<std::size_t> order = train_idx;
    Rng shuffle = Rng(config.seed, kShuffleStream).split(epoch);
    for (std::size_t i = order.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(shuffle.uniform_int(0, static_cast<std::int64_t>(i - 1)));
      std::swap(order[i - 1], order[j]);
    }
    std::size_t batch_no = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_no) {
      const std::size_t b = std::min(config.batch_size, order.size() - start);
      try {
        parallel_for_indexed(b, workers, [&](std::size_t i, std::size_t w) {
          const std::size_t idx = order[start + i];
          losses[rank[idx]] = sample_gradient(*replicas[w], replica_params[w], dataset.samples[idx],
                                              config, epoch, idx, dataset.patch_size, sample_grads[i]);
        });
        // Reduce in batch order so the result does not depend on the worker count.
        std::size_t o = 0;
        for (std::size_t p = 0; p < master.size(); ++p) {
          auto& g = mean_grad[p];
          std::fill(g.begin(), g.end(), 0.0);
          for (std::size_t i = 0; i < b; ++i) {
            const float* src = sample_grads[i].data() + o;
            for (std::size_t k = 0; k < g.size(); ++k) g[k] += src[k];
          }
          for (double& x : g) x /= static_cast<double>(b);
          o += g.size();
        }
        adam_step(master, mean_grad, adam, config.learning_rate, config.betas, config.eps);
      } catch (const Error& e) {
        fail(e.kind(), "train: epoch " + std::to_string(epoch) + " batch " +
                           std::to_string(batch_no) + ": " + e.what());
      }
      for (auto& r : replicas) net::copy_parameters(*model, *r);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_mse = std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(losses.size());
    rec.val_mse = evaluate_mse(*model, dataset, val_idx, config.workers);
    require(std::isfinite(rec.train_mse) && std::isfinite(rec.val_mse), ErrorKind::numeric,
            "train: non-finite loss after epoch " + std::to_string(epoch));
    result.curve.push_back(rec);
    if (rec.val_mse < result.best_val_mse) {
      result.best_val_mse = rec.val_mse;
      result.best_epoch = epoch;
      best_state = net::model_state(*model);
    }
    if (log) {
      char line[160];
      std::snprintf(line, sizeof line, "epoch %zu train_mse %.6f val_mse %.6f best %zu (%.1f s)",
                    epoch, rec.train_mse, rec.val_mse, result.best_epoch, elapsed());
      log(line);
    }
  }
  net::load_model_state(*model, best_state);
  result.model = std::move(model);
  return result;
}

void write_loss_curve(const std::filesystem::path& path, std::span<const EpochRecord> curve) {
  std::string text = "epoch,train_mse,val_mse\n";
  char line[96];
  for (const auto& r : curve) {
    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g\n", r.epoch, r.train_mse, r.val_mse);
    text += line;
  }
  io::write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace fen::train
