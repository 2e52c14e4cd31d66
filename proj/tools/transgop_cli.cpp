// Command-line front end: dataset generation, training, evaluation,
// prediction, gradient checks and ablations.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "transgop/ablation.hpp"
#include "transgop/gradcheck_suite.hpp"
#include "transgop/train.hpp"

namespace fs = std::filesystem;
using namespace transgop;

namespace {

TrainConfig config_or_default(const std::string& path) {
  if (path.empty()) return TrainConfig{};
  return load_train_config(path);
}

nlohmann::json read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open " + path);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

Box parse_head(const std::string& s) {
  std::stringstream ss(s);
  std::string part;
  std::vector<double> v;
  while (std::getline(ss, part, ',')) {
    try {
      v.push_back(std::stod(part));
    } catch (const std::exception&) {
      throw ContractError("--head: '" + part + "' is not a number");
    }
  }
  if (v.size() != 4) throw ContractError("--head expects x1,y1,x2,y2");
  Box b{v[0], v[1], v[2], v[3]};
  if (!(b.x1 >= 0 && b.y1 >= 0 && b.x2 <= 1 && b.y2 <= 1) || !b.valid())
    throw ContractError("--head must be a non-degenerate box inside [0,1]^2");
  return b;
}

void write_file(const fs::path& p, const std::string& bytes) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + p.string());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

int cmd_gen(const std::string& config, const std::string& out, std::size_t count, std::uint64_t seed) {
  const auto cfg = config_or_default(config);
  Dataset d;
  d.classes = default_class_names(cfg.train_data.scene.num_classes);
  d.samples = generate_dataset(cfg.train_data.scene, count, seed);
  save_dataset(d, out);
  std::cout << "wrote " << d.samples.size() << " scenes to " << out << "\n";
  return 0;
}

template <class T>
int run_train(TrainConfig cfg, const fs::path& out) {
  fs::create_directories(out);
  auto data = materialize(cfg.train_data);
  if (data.classes.size() != cfg.model.num_classes)
    throw ConfigError("dataset has " + std::to_string(data.classes.size()) +
                      " classes, model expects " + std::to_string(cfg.model.num_classes));
  Trainer<T> tr(cfg);
  const fs::path ckpt = out / "checkpoint.bin";
  if (fs::exists(ckpt)) {
    auto f = io::SectionFile::load(ckpt.string());
    restore_checkpoint(tr, f);
    std::cout << "resuming at epoch " << tr.epoch() << "\n";
  }
  std::ofstream log(out / "train_log.jsonl", std::ios::app);
  while (tr.epoch() < cfg.epochs) {
    auto e = tr.train_epoch(data.samples);
    const auto line = nlohmann::json(e).dump();
    log << line << '\n' << std::flush;
    std::cout << line << std::endl;
    save_checkpoint(tr, ckpt);
  }
  return 0;
}

int cmd_train(const std::string& config, const std::string& data, const std::string& out) {
  auto cfg = config_or_default(config);
  if (!data.empty()) cfg.train_data.dir = data;
  cfg.validate();
  return cfg.precision == "f64" ? run_train<double>(cfg, out) : run_train<float>(cfg, out);
}

template <class T>
int run_eval(const io::SectionFile& f, const TrainConfig& cfg, const std::string& data,
             const fs::path& out) {
  Trainer<T> tr(cfg);
  restore_checkpoint(tr, f);
  auto dc = cfg.eval_data;
  if (!data.empty()) dc.dir = data;
  auto ds = materialize(dc);
  for (const auto& s : ds.samples)
    if (s.image.width != cfg.model.image_size || s.image.height != cfg.model.image_size)
      throw ConfigError("checkpoint expects " + std::to_string(cfg.model.image_size) +
                        "px images, dataset has " + std::to_string(s.image.width) + "px");
  auto res = evaluate(tr.model(), ds.samples, cfg.score_floor);
  fs::create_directories(out);
  std::ofstream csv(out / "metrics.csv");
  write_metrics_csv(csv, res.report);
  write_metrics_csv(std::cout, res.report);
  nlohmann::json extra = {{"images", res.report.images},
                          {"selection_misses", res.report.selection_misses},
                          {"angle_excluded", res.report.angle_excluded},
                          {"mean_box_energy", res.mean_box_energy},
                          {"mean_box_energy_ratio", res.mean_box_energy_ratio}};
  std::ofstream(out / "eval_summary.json") << extra.dump(1) << '\n';
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& out) {
  auto f = io::SectionFile::load(ckpt);
  auto cfg = checkpoint_config(f);
  return cfg.precision == "f64" ? run_eval<double>(f, cfg, data, out) : run_eval<float>(f, cfg, data, out);
}

template <class T>
int run_predict(const io::SectionFile& f, const TrainConfig& cfg, const std::string& image,
                const Box& head, const fs::path& out) {
  Trainer<T> tr(cfg);
  restore_checkpoint(tr, f);
  auto raster = read_ppm(image);
  auto p = predict(tr.model(), raster, head, cfg.score_floor);
  fs::create_directories(out);
  write_file(out / "heatmap.pgm", heatmap_to_pgm(p.heatmap));
  auto doc = prediction_record(p, raster, head, default_class_names(cfg.model.num_classes),
                               fs::path(image).filename().string());
  std::ofstream(out / "prediction.json") << doc.dump(1) << '\n';
  std::cout << doc.dump(1) << '\n';
  return 0;
}

int cmd_predict(const std::string& ckpt, const std::string& image, const std::string& head,
                const std::string& out) {
  const Box hb = parse_head(head);
  auto f = io::SectionFile::load(ckpt);
  auto cfg = checkpoint_config(f);
  return cfg.precision == "f64" ? run_predict<double>(f, cfg, image, hb, out)
                                : run_predict<float>(f, cfg, image, hb, out);
}

int cmd_gradcheck(const std::string& module) {
  std::size_t failed = 0, ran = 0;
  for (const auto& c : gradcheck_suite()) {
    if (!module.empty() && c.module != module) continue;
    ++ran;
    auto rep = c.run();
    std::printf("%-4s %-15s %-32s max_err=%.3g\n", rep.passed ? "ok" : "FAIL", c.module.c_str(),
                c.name.c_str(), rep.max_error);
    if (!rep.passed) {
      ++failed;
      std::printf("     %s\n", rep.diagnostic.c_str());
    }
  }
  if (ran == 0) throw ConfigError("no gradient checks for module '" + module + "'");
  std::printf("%zu/%zu passed\n", ran - failed, ran);
  return failed == 0 ? 0 : 2;
}

template <class T>
int run_ablate(const TrainConfig& cfg, const AblationPlan& plan, const fs::path& out) {
  auto train = materialize(cfg.train_data).samples;
  auto eval = materialize(cfg.eval_data).samples;
  fs::create_directories(out);
  auto rows = run_ablation<T>(cfg, plan, train, eval, [](const AblationRow& r) {
    std::cout << r.variant << " seed " << r.seed << ": AP50 " << format4(r.ap50) << " mSoC50 "
              << format4(r.msoc50_matched) << " box energy " << format4(r.box_energy) << std::endl;
  });
  std::ofstream csv(out / "ablation.csv");
  write_ablation_csv(csv, rows);
  std::ofstream summary(out / "ablation_summary.csv");
  write_ablation_summary(summary, rows);
  write_ablation_summary(std::cout, rows);
  return 0;
}

int cmd_ablate(const std::string& config, const std::string& out) {
  TrainConfig cfg;
  AblationPlan plan;
  if (!config.empty()) {
    auto j = read_json(config);
    try {
      cfg = j.get<TrainConfig>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(config + ": " + e.what());
    }
    plan = parse_ablation_plan(j);
  }
  cfg.validate();
  return cfg.precision == "f64" ? run_ablate<double>(cfg, plan, out) : run_ablate<float>(cfg, plan, out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transformer gaze object prediction: train, evaluate and inspect"};
  app.require_subcommand(1);

  std::string config, out, data, ckpt, image, head, module;
  std::size_t count = 1000;
  std::uint64_t seed = 0;

  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset");
  gen->add_option("--config", config, "Config JSON (uses train_data.scene)");
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_option("--count", count, "Number of scenes");
  gen->add_option("--seed", seed, "First scene seed");

  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", config, "Config JSON");
  train->add_option("--data", data, "Dataset directory (overrides train_data.dir)");
  train->add_option("--out", out, "Output directory")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  eval->add_option("--data", data, "Dataset directory (overrides eval_data.dir)");
  eval->add_option("--out", out, "Output directory")->required();

  auto* pred = app.add_subcommand("predict", "Predict heatmap and gaze object for one image");
  pred->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  pred->add_option("--image", image, "P6 image")->required();
  pred->add_option("--head", head, "Head box x1,y1,x2,y2 (normalized)")->required();
  pred->add_option("--out", out, "Output directory")->required();

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  grad->add_option("--module", module, "Only checks of this module");

  auto* abl = app.add_subcommand("ablate", "Train and compare ablation variants");
  abl->add_option("--config", config, "Config JSON with an optional \"ablation\" block");
  abl->add_option("--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*gen) return cmd_gen(config, out, count, seed);
    if (*train) return cmd_train(config, data, out);
    if (*eval) return cmd_eval(ckpt, data, out);
    if (*pred) return cmd_predict(ckpt, image, head, out);
    if (*grad) return cmd_gradcheck(module);
    if (*abl) return cmd_ablate(config, out);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
