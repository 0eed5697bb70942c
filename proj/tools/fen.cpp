// fen: command-line entry point for the FocalErrorNet desk-scale pipeline.
//
// Every subcommand resolves its configuration as defaults < --config JSON <
// flags, writes the result to <out>/resolved_config.json together with a
// seed manifest (<out>/seeds.json), and writes nothing outside <out>.
// `fen <sub> --config <out>/resolved_config.json` re-runs a logged step.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "focalerrornet/binary_io.hpp"
#include "focalerrornet/bspline.hpp"
#include "focalerrornet/checkpoint.hpp"
#include "focalerrornet/dataset.hpp"
#include "focalerrornet/evaluation.hpp"
#include "focalerrornet/focalnet.hpp"
#include "focalerrornet/selftest.hpp"
#include "focalerrornet/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fen;

namespace {

constexpr const char* kFormatHelp = R"(File formats (all little-endian):
  FENP  parameter checkpoint: "FENP", version u32, count u32, per tensor:
        name length u32, UTF-8 name, rank u32, dims u32[rank], f32 data.
        A <name>.json sidecar records the model kind, config and split map.
  FENV  volume: "FENV", version u32, dims 3 x u32, spacing 3 x f64 (mm),
        origin 3 x f64, f32 data, x-fastest.
  FENG  B-spline grid: "FENG", version u32, dims 3 x u32, spacing 3 x f64,
        origin 3 x f64, f32 (dx,dy,dz) per control point, x-fastest.
  FEND  dataset blob: "FEND", version u32, record count u32, per record:
        payload length u32, payload, CRC32(payload) u32; manifest.json lists
        offsets, labels, metadata, splits and provenance.
Exit codes: 0 ok, 1 other failure, 2 usage, 3 io, 4 format/schema,
  5 numeric, 6 ill-posed, 7 value, 8 dimension.)";

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::io: return 3;
    case ErrorKind::format: return 4;
    case ErrorKind::numeric: return 5;
    case ErrorKind::ill_posed: return 6;
    case ErrorKind::value: return 7;
    case ErrorKind::dimension: return 8;
  }
  return 1;
}

// ---------------------------------------------------------------------------
// Config resolution

/// Flags registered as optional values; only flags given on the command line
/// are written into the resolved JSON.
class Overrides {
 public:
  template <typename T>
  CLI::Option* add(CLI::App* app, const std::string& flag, const std::string& pointer,
                   const std::string& help) {
    auto holder = std::make_shared<std::optional<T>>();
    auto* opt = app->add_option(flag, *holder, help);
    apply_.push_back([holder, pointer](json& j) {
      if (*holder) j[json::json_pointer(pointer)] = **holder;
    });
    return opt;
  }
  void apply(json& j) const {
    for (const auto& f : apply_) f(j);
  }

 private:
  std::vector<std::function<void(json&)>> apply_;
};

json read_json(const fs::path& path) {
  const auto bytes = io::read_file(path);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    fail(ErrorKind::format, path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  io::write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json resolve(json defaults, const std::string& config_path, const Overrides& ov) {
  if (!config_path.empty()) {
    const json file = read_json(config_path);
    require(file.is_object(), ErrorKind::format, config_path + ": config must be a JSON object");
    // resolved_config.json files carry the subcommand name; anything else
    // must be a known section of this subcommand.
    for (const auto& [key, _] : file.items()) {
      require(key == "subcommand" || defaults.contains(key), ErrorKind::format,
              config_path + ": unknown field \"" + key + "\"");
    }
    defaults.merge_patch(file);
  }
  ov.apply(defaults);
  return defaults;
}

/// Parses a config section, turning JSON type errors into schema errors.
template <typename T>
T parse_section(const json& j, const std::string& what) {
  try {
    return j.get<T>();
  } catch (const json::exception& e) {
    fail(ErrorKind::format, "config section '" + what + "': " + e.what());
  }
}

/// Creates the run directory and logs the resolved config and seed manifest.
fs::path open_run(const json& resolved, const std::string& subcommand, const json& seeds) {
  const std::string out = resolved.value("out", "");
  require(!out.empty(), ErrorKind::value, subcommand + ": --out run directory is required");
  fs::create_directories(out);
  json cfg = resolved;
  cfg["subcommand"] = subcommand;
  write_json(fs::path(out) / "resolved_config.json", cfg);
  write_json(fs::path(out) / "seeds.json", seeds);
  return out;
}

class RunLog {
 public:
  explicit RunLog(const fs::path& path) : file_(path) {}
  void operator()(const std::string& line) {
    std::cerr << line << "\n";
    if (file_) file_ << line << "\n" << std::flush;
  }

 private:
  std::ofstream file_;
};

std::uint32_t file_crc(const fs::path& path) {
  const auto bytes = io::read_file(path);
  return io::crc32(bytes);
}

std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Subcommands

struct Command {
  CLI::App* app = nullptr;
  Overrides ov;
  std::string config;
  std::function<json()> defaults;
  std::function<void(const json&)> run;
};

void add_common(Command& c, bool needs_out = true) {
  c.app->add_option("--config", c.config, "JSON config (same shape as resolved_config.json)");
  if (needs_out) c.ov.add<std::string>(c.app, "--out", "/out", "run directory for all outputs");
  c.ov.add<std::size_t>(c.app, "--workers", "/workers", "worker threads (results do not depend on it)");
}

void setup_synth(Command& c) {
  add_common(c);
  c.ov.add<std::uint64_t>(c.app, "--seed", "/seed", "master seed");
  c.ov.add<std::size_t>(c.app, "--count", "/count", "number of subjects");
  c.ov.add<std::size_t>(c.app, "--size", "/params/size", "voxels per axis");
  c.defaults = [] {
    return json{{"out", ""}, {"workers", 1}, {"seed", 1}, {"count", 10},
                {"params", data::SynthParams{}}};
  };
  c.run = [](const json& r) {
    const auto params = parse_section<data::SynthParams>(r.at("params"), "params");
    params.validate();
    const auto seed = r.at("seed").get<std::uint64_t>();
    const fs::path out = open_run(r, "synth", {{"seed", seed}});
    RunLog log(out / "run.log");
    const auto subjects =
        data::synth_cohort(seed, r.at("count").get<std::size_t>(), params, r.at("workers"));
    json index = json::array();
    for (const auto& s : subjects) {
      data::save_subject(out / s.id, s);
      index.push_back({{"id", s.id}, {"landmarks", s.landmarks.size()}});
      log("synth: " + s.id + " with " + std::to_string(s.landmarks.size()) + " landmarks");
    }
    write_json(out / "subjects.json", index);
  };
}

void setup_fit_landmarks(Command& c) {
  add_common(c);
  c.ov.add<std::string>(c.app, "--landmarks", "/landmarks",
                        "JSON {\"pairs\": [{\"fixed\": [x,y,z], \"moving\": [x,y,z]}]} in mm");
  c.ov.add<std::string>(c.app, "--reference", "/reference", "FENV volume defining the grid extent");
  c.ov.add<std::string>(c.app, "--subject", "/subject",
                        "subject directory; without --landmarks its landmarks are displaced by "
                        "a seeded known deformation (self-consistency demo)");
  c.ov.add<double>(c.app, "--grid-spacing", "/grid_spacing_mm", "control-point spacing (mm)");
  c.ov.add<double>(c.app, "--lambda", "/ridge_lambda", "ridge regularization");
  c.ov.add<std::uint64_t>(c.app, "--seed", "/seed", "seed of the demo deformation");
  c.ov.add<double>(c.app, "--max-disp", "/max_disp_mm", "demo deformation bound (mm)");
  c.defaults = [] {
    return json{{"out", ""}, {"workers", 1}, {"landmarks", ""}, {"reference", ""},
                {"subject", ""}, {"grid_spacing_mm", 10.0}, {"ridge_lambda", 1e-6},
                {"seed", 1}, {"max_disp_mm", 5.0}};
  };
  c.run = [](const json& r) {
    const fs::path out = open_run(r, "fit-landmarks", {{"seed", r.at("seed")}});
    RunLog log(out / "run.log");
    Volume3D reference;
    LandmarkSet lms;
    std::optional<BSplineGrid> truth;
    const std::string subject_dir = r.at("subject");
    if (!subject_dir.empty()) {
      const auto s = data::load_subject(subject_dir);
      reference = s.mri;
      if (r.at("landmarks").get<std::string>().empty()) {
        Rng rng(r.at("seed").get<std::uint64_t>(), 0xf17);
        truth = random_deformation(rng, reference, {20, r.at("max_disp_mm").get<double>()});
        for (const auto& v : s.landmarks) {
          const Vec3 m = reference.world(v[0], v[1], v[2]);
          const Vec3 u = displacement_at(*truth, m);
          lms.push_back({{m[0] + u[0], m[1] + u[1], m[2] + u[2]}, m});
        }
      }
    }
    if (!r.at("reference").get<std::string>().empty()) reference = load_volume(r.at("reference").get<std::string>());
    if (!r.at("landmarks").get<std::string>().empty()) {
      const json j = read_json(r.at("landmarks").get<std::string>());
      try {
        for (const auto& p : j.at("pairs")) {
          lms.push_back({p.at("fixed").get<Vec3>(), p.at("moving").get<Vec3>()});
        }
      } catch (const json::exception& e) {
        fail(ErrorKind::format, "landmarks: " + std::string(e.what()));
      }
    }
    require(reference.voxel_count() > 0, ErrorKind::value,
            "fit-landmarks: need --reference or --subject for the grid extent");
    require(!lms.empty(), ErrorKind::value, "fit-landmarks: no landmark pairs");
    const double g = r.at("grid_spacing_mm");
    const auto fit = fit_landmark_bspline(lms, reference, {g, g, g}, r.at("ridge_lambda"));
    save_grid(out / "grid.feng", fit.grid);
    json report{{"landmarks", lms.size()}, {"mtre_mm", fit.mtre},
                {"residual_sq", fit.residual_sq}, {"residuals_mm", fit.residuals}};
    if (truth) report["demo_max_disp_mm"] = truth->max_abs_component();
    write_json(out / "fit.json", report);
    log("fit-landmarks: " + std::to_string(lms.size()) + " pairs, mTRE " +
        std::to_string(fit.mtre) + " mm");
  };
}

void setup_build_dataset(Command& c) {
  add_common(c);
  c.ov.add<std::string>(c.app, "--subjects-dir", "/subjects_dir",
                        "directory of subject folders from `fen synth` (else synthetic)");
  c.ov.add<std::size_t>(c.app, "--synthetic-count", "/synthetic/count", "synthetic subject count");
  c.ov.add<std::uint64_t>(c.app, "--subject-seed", "/synthetic/seed", "synthetic subject seed");
  c.ov.add<std::size_t>(c.app, "--size", "/synthetic/params/size", "synthetic voxels per axis");
  c.ov.add<std::uint64_t>(c.app, "--seed", "/build/seed", "deformation and split seed");
  c.ov.add<std::size_t>(c.app, "--deformations", "/build/deformations_per_volume",
                        "deformations per subject");
  c.ov.add<double>(c.app, "--max-disp", "/build/max_disp_mm", "max displacement (mm)");
  c.ov.add<std::size_t>(c.app, "--max-points", "/build/max_points",
                        "max control points per axis");
  c.ov.add<std::size_t>(c.app, "--patch-size", "/build/patch_size", "patch edge (voxels)");
  c.defaults = [] {
    return json{{"out", ""}, {"workers", 1}, {"subjects_dir", ""},
                {"synthetic", {{"count", 10}, {"seed", 1}, {"params", data::SynthParams{}}}},
                {"build", data::BuildParams{}}};
  };
  c.run = [](const json& r) {
    const auto build = parse_section<data::BuildParams>(r.at("build"), "build");
    build.validate();
    const std::size_t workers = r.at("workers");
    json source;
    std::vector<data::SyntheticSubject> subjects;
    const std::string dir = r.at("subjects_dir");
    if (!dir.empty()) {
      std::vector<fs::path> paths;
      for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_directory() && fs::exists(e.path() / "landmarks.json")) paths.push_back(fs::absolute(e.path()));
      }
      std::sort(paths.begin(), paths.end());
      json list = json::array();
      for (const auto& p : paths) {
        subjects.push_back(data::load_subject(p));
        list.push_back(p.string());
      }
      source = {{"kind", "directory"}, {"paths", list}};
    } else {
      const auto params = parse_section<data::SynthParams>(r.at("synthetic").at("params"), "synthetic.params");
      params.validate();
      const auto seed = r.at("synthetic").at("seed").get<std::uint64_t>();
      const auto count = r.at("synthetic").at("count").get<std::size_t>();
      source = {{"kind", "synthetic"}, {"seed", seed}, {"count", count}, {"params", params}};
      subjects = data::synth_cohort(seed, count, params, workers);
    }
    const fs::path out = open_run(r, "build-dataset",
                                  {{"build_seed", build.seed}, {"subjects", source.value("seed", json())}});
    RunLog log(out / "run.log");
    auto ds = data::build_dataset(subjects, build, workers, std::ref(log));
    ds.provenance["subjects"] = source;
    data::save_dataset(out, ds);
    log("build-dataset: " + std::to_string(ds.samples.size()) + " samples (train " +
        std::to_string(ds.indices(data::Split::train).size()) + ", val " +
        std::to_string(ds.indices(data::Split::val).size()) + ", test " +
        std::to_string(ds.indices(data::Split::test).size()) + ")");
  };
}

void setup_shift_testset(Command& c) {
  add_common(c);
  c.ov.add<std::string>(c.app, "--dataset", "/dataset", "dataset directory");
  c.ov.add<std::uint64_t>(c.app, "--seed", "/seed", "shift seed");
  c.ov.add<int>(c.app, "--max-shift", "/max_shift_voxels", "max |shift| per axis (voxels)");
  c.defaults = [] {
    return json{{"out", ""}, {"workers", 1}, {"dataset", ""}, {"seed", 1}, {"max_shift_voxels", 10}};
  };
  c.run = [](const json& r) {
    const auto ds = data::load_dataset(r.at("dataset").get<std::string>());
    const fs::path out = open_run(r, "shift-testset", {{"seed", r.at("seed")}});
    RunLog log(out / "run.log");
    const std::size_t workers = r.at("workers");
    const auto subjects = data::dataset_subjects(ds, workers);
    const auto shifted = data::shifted_test_set(ds, subjects, r.at("seed").get<std::uint64_t>(),
                                                r.at("max_shift_voxels").get<int>(), workers);
    data::save_dataset(out, shifted);
    log("shift-testset: " + std::to_string(shifted.samples.size()) + " shifted test samples");
  };
}

void setup_train(Command& c) {
  add_common(c);
  c.ov.add<std::string>(c.app, "--dataset", "/train/dataset", "dataset directory");
  c.ov.add<std::string>(c.app, "--model", "/train/model", "focalerrornet | baseline");
  c.ov.add<std::uint64_t>(c.app, "--seed", "/train/seed", "training seed");
  c.ov.add<std::size_t>(c.app, "--epochs", "/train/epochs", "epochs");
  c.ov.add<double>(c.app, "--lr", "/train/learning_rate", "Adam learning rate");
  c.ov.add<std::size_t>(c.app, "--batch-size", "/train/batch_size", "mini-batch size");
  c.defaults = [] {
    train::TrainConfig t;
    return json{{"out", ""}, {"workers", 1}, {"train", t}};
  };
  c.run = [](json r) {
    r["train"]["workers"] = r.at("workers");
    // A relative checkpoint name lives inside the run directory, so a rerun
    // from resolved_config.json with another --out never writes elsewhere.
    if (r["train"].value("checkpoint", "").empty()) r["train"]["checkpoint"] = "model.fenp";
    auto cfg = parse_section<train::TrainConfig>(r.at("train"), "train");
    cfg.validate();
    const fs::path out = open_run(r, "train", {{"seed", cfg.seed}});
    if (fs::path(cfg.checkpoint).is_relative()) cfg.checkpoint = (out / cfg.checkpoint).string();
    RunLog log(out / "run.log");
    const auto ds = data::load_dataset(cfg.dataset);
    const auto result = train::train(cfg, ds, std::ref(log));
    json splits = json::object();
    for (const auto& [id, s] : ds.splits) splits[id] = data::to_string(s);
    net::save_model(cfg.checkpoint, *result.model,
                    {{"splits", splits}, {"seed", cfg.seed}, {"best_epoch", result.best_epoch}});
    train::write_loss_curve(out / "loss_curve.csv", result.curve);
    const auto crc = file_crc(cfg.checkpoint);
    write_json(out / "train_summary.json",
               {{"best_epoch", result.best_epoch}, {"best_val_mse", result.best_val_mse},
                {"parameters", result.model->parameter_count()},
                {"checkpoint", cfg.checkpoint}, {"checkpoint_crc32", hex32(crc)}});
    log("train: best epoch " + std::to_string(result.best_epoch) + ", val MSE " +
        std::to_string(result.best_val_mse) + ", checkpoint crc32 " + hex32(crc));
  };
}

/// "const:<value>" builds the constant oracle model; anything else is a FENP path.
std::unique_ptr<net::Regressor<float>> model_from_spec(const std::string& spec,
                                                       std::size_t patch, json& splits) {
  if (spec.rfind("const:", 0) == 0) {
    float value = 0.0f;
    try {
      value = std::stof(spec.substr(6));
    } catch (const std::exception&) {
      fail(ErrorKind::value, "bad constant model spec '" + spec + "'");
    }
    return std::make_unique<eval::ConstantRegressor>(value, patch);
  }
  const json meta = net::load_model_meta(spec);
  if (meta.contains("training") && meta["training"].contains("splits")) splits = meta["training"]["splits"];
  return net::load_model(spec);
}

void setup_evaluate(Command& c) {
  add_common(c);
  c.ov.add<std::string>(c.app, "--model-a", "/model_a", "FENP checkpoint or const:<mm>");
  c.ov.add<std::string>(c.app, "--model-b", "/model_b", "FENP checkpoint or const:<mm>");
  c.ov.add<std::string>(c.app, "--name-a", "/name_a", "report name of model A");
  c.ov.add<std::string>(c.app, "--name-b", "/name_b", "report name of model B");
  c.ov.add<std::string>(c.app, "--dataset", "/dataset", "dataset directory (test split)");
  c.ov.add<std::string>(c.app, "--shifted", "/shifted", "shifted test set directory (optional)");
  c.ov.add<std::size_t>(c.app, "--n-mc", "/eval/n_mc", "MC dropout samples per pair");
  c.ov.add<std::uint64_t>(c.app, "--seed", "/eval/seed", "MC dropout seed");
  c.defaults = [] {
    return json{{"out", ""}, {"workers", 1}, {"model_a", ""}, {"model_b", ""},
                {"name_a", "focalerrornet"}, {"name_b", "baseline"}, {"dataset", ""},
                {"shifted", ""}, {"eval", eval::EvalConfig{}}};
  };
  c.run = [](json r) {
    r["eval"]["workers"] = r.at("workers");
    const auto cfg = parse_section<eval::EvalConfig>(r.at("eval"), "eval");
    const auto ds = data::load_dataset(r.at("dataset").get<std::string>());
    std::optional<data::Dataset> shifted;
    if (!r.at("shifted").get<std::string>().empty()) shifted = data::load_dataset(r.at("shifted").get<std::string>());
    json splits_a, splits_b;
    const auto a = model_from_spec(r.at("model_a"), ds.patch_size, splits_a);
    const auto b = model_from_spec(r.at("model_b"), ds.patch_size, splits_b);
    json ds_splits = json::object();
    for (const auto& [id, s] : ds.splits) ds_splits[id] = data::to_string(s);
    for (const json* s : {&splits_a, &splits_b}) {
      require(s->is_null() || *s == ds_splits, ErrorKind::format,
              "evaluate: a model was trained on different splits than the dataset");
    }
    require(splits_a.is_null() || splits_b.is_null() || splits_a == splits_b, ErrorKind::format,
            "evaluate: models were trained on different splits");
    const fs::path out = open_run(r, "evaluate", {{"mc_seed", cfg.seed}});
    RunLog log(out / "run.log");
    const auto report = eval::evaluate_report(*a, r.at("name_a"), *b, r.at("name_b"), ds,
                                              shifted ? &*shifted : nullptr, cfg);
    eval::write_report(out, report);
    log("evaluate: " + report.a.name + " MAE " + std::to_string(report.a.test.mae_mean) + " mm, " +
        report.b.name + " MAE " + std::to_string(report.b.test.mae_mean) + " mm");
  };
}

void setup_predict(Command& c) {
  add_common(c, false);
  c.ov.add<std::string>(c.app, "--model", "/model", "FENP checkpoint");
  c.ov.add<std::string>(c.app, "--dataset", "/dataset", "dataset directory");
  c.ov.add<std::size_t>(c.app, "--index", "/index", "record index in the dataset");
  c.ov.add<std::string>(c.app, "--mri", "/mri", "FENV MRI patch (instead of --dataset)");
  c.ov.add<std::string>(c.app, "--us", "/us", "FENV US patch (instead of --dataset)");
  c.ov.add<std::size_t>(c.app, "--n-mc", "/n_mc", "MC dropout samples");
  c.ov.add<std::uint64_t>(c.app, "--seed", "/seed", "MC dropout seed");
  c.defaults = [] {
    return json{{"workers", 1}, {"model", ""}, {"dataset", ""}, {"index", 0}, {"mri", ""},
                {"us", ""}, {"n_mc", 200}, {"seed", 1}};
  };
  c.run = [](const json& r) {
    const auto model = net::load_model(r.at("model").get<std::string>());
    std::vector<float> mri, us;
    if (!r.at("dataset").get<std::string>().empty()) {
      const auto ds = data::load_dataset(r.at("dataset").get<std::string>());
      const std::size_t i = r.at("index");
      require(i < ds.samples.size(), ErrorKind::value, "predict: index out of range");
      mri = ds.samples[i].mri;
      us = ds.samples[i].us;
    } else {
      mri = load_volume(r.at("mri").get<std::string>()).data;
      us = load_volume(r.at("us").get<std::string>()).data;
      data::normalize_minmax(mri);
      data::normalize_minmax(us);
    }
    const auto p = eval::mc_predict(*model, mri, us, r.at("n_mc"),
                                    Rng(r.at("seed").get<std::uint64_t>(), 0x3c).split(0));
    std::printf("%.4f ± %.4f mm\n", p.mean_mm, p.std_mm);
  };
}

void setup_gradcheck(Command& c) {
  c.app->add_option("--config", c.config, "JSON config");
  c.ov.add<std::uint64_t>(c.app, "--seed", "/seed", "seed of the random test tensors");
  c.ov.add<std::string>(c.app, "--out", "/out", "optional run directory for gradcheck.json");
  c.defaults = [] { return json{{"seed", 1}, {"out", ""}}; };
  c.run = [](const json& r) {
    const json result = run_gradient_suite(r.at("seed").get<std::uint64_t>());
    if (!r.at("out").get<std::string>().empty()) {
      const fs::path out = open_run(r, "gradcheck", {{"seed", r.at("seed")}});
      write_json(out / "gradcheck.json", result);
    }
    std::cout << result.dump(2) << "\n";
    if (!result.at("passed").get<bool>()) fail(ErrorKind::numeric, "gradcheck: tolerance exceeded");
  };
}

void setup_selftest(Command& c) {
  c.defaults = [] { return json::object(); };
  c.run = [](const json&) {
    const json result = run_selftest();
    std::cout << result.dump(2) << "\n";
    if (!result.at("passed").get<bool>()) fail(ErrorKind::numeric, "selftest: a check failed");
  };
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fen: FocalErrorNet registration-error regression with MC-dropout uncertainty"};
  app.footer(kFormatHelp);
  app.require_subcommand(1);

  std::vector<std::pair<std::string, std::unique_ptr<Command>>> commands;
  const auto add = [&](const char* name, const char* help, void (*setup)(Command&)) {
    auto cmd = std::make_unique<Command>();
    cmd->app = app.add_subcommand(name, help);
    cmd->app->footer(kFormatHelp);
    setup(*cmd);
    commands.emplace_back(name, std::move(cmd));
  };
  add("synth", "generate synthetic MRI/US subjects", setup_synth);
  add("fit-landmarks", "landmark-based B-spline silver ground truth fit", setup_fit_landmarks);
  add("build-dataset", "deform subjects and extract labelled patch pairs", setup_build_dataset);
  add("shift-testset", "re-extract test patches at random landmark shifts", setup_shift_testset);
  add("train", "train FocalErrorNet or the baseline CNN", setup_train);
  add("evaluate", "MC-dropout evaluation and metric report of two models", setup_evaluate);
  add("predict", "predict one pair, printing mean ± std (mm)", setup_predict);
  add("gradcheck", "finite-difference gradient suite (64-bit)", setup_gradcheck);
  add("selftest", "fast invariant suite, prints a summary JSON", setup_selftest);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  for (auto& [name, cmd] : commands) {
    if (!cmd->app->parsed()) continue;
    try {
      const json resolved = resolve(cmd->defaults(), cmd->config, cmd->ov);
      cmd->run(resolved);
      return 0;
    } catch (const Error& e) {
      std::fprintf(stderr, "error: %s: %s\n", to_string(e.kind()), e.what());
      return exit_code(e.kind());
    } catch (const json::exception& e) {
      std::fprintf(stderr, "error: format: %s\n", e.what());
      return exit_code(ErrorKind::format);
    } catch (const fs::filesystem_error& e) {
      std::fprintf(stderr, "error: io: %s\n", e.what());
      return exit_code(ErrorKind::io);
    } catch (const std::exception& e) {
      std::fprintf(stderr, "error: other: %s\n", e.what());
      return 1;
    }
  }
  return 2;
}
