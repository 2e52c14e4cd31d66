#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "transgop/metrics.hpp"
#include "transgop/model.hpp"
#include "transgop/serialize.hpp"

namespace transgop {

/// Where training/evaluation scenes come from: a dataset directory, or the
/// generator when `dir` is empty.
struct DataConfig {
  std::string dir;
  SceneConfig scene;
  std::size_t count = 5000;
  std::uint64_t first_seed = 0;
};

inline void to_json(nlohmann::json& j, const DataConfig& d) {
  j = {{"dir", d.dir}, {"scene", d.scene}, {"count", d.count}, {"first_seed", d.first_seed}};
}
inline void from_json(const nlohmann::json& j, DataConfig& d) {
  DataConfig def;
  d.dir = j.value("dir", def.dir);
  d.scene = j.contains("scene") ? j.at("scene").get<SceneConfig>() : def.scene;
  d.count = j.value("count", def.count);
  d.first_seed = j.value("first_seed", def.first_seed);
}

struct TrainConfig {
  std::size_t epochs = 50;
  double lr = 1e-4;
  double lr_decay = 0.94;
  std::size_t decay_every = 5;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double weight_decay = 1e-4;
  double grad_clip = 1.0;  // global norm; 0 disables
  std::size_t batch_size = 8;
  LossWeights loss;
  DetLossWeights det;
  BoxTerm box_term = BoxTerm::gaze_box;
  double sigma = 3.0;
  double score_floor = 0.1;
  std::uint64_t seed = 0;
  std::string precision = "f32";  // or "f64"
  ModelConfig model;
  DataConfig train_data;
  DataConfig eval_data{"", {}, 1000, 1000000};

  void validate() const {
    model.validate();
    if (epochs == 0 || batch_size == 0) throw ConfigError("train: epochs and batch_size must be positive");
    if (!(lr > 0) || !(lr_decay > 0) || decay_every == 0)
      throw ConfigError("train: invalid learning-rate schedule");
    if (precision != "f32" && precision != "f64") throw ConfigError("train: precision must be f32 or f64");
    if (train_data.scene.num_classes != model.num_classes || train_data.scene.image_size != model.image_size)
      throw ConfigError("train: generator classes/image size disagree with the model");
  }

  /// 1e-4 * 0.94^floor(epoch / 5) with the defaults.
  double lr_at(std::size_t epoch) const {
    return lr * std::pow(lr_decay, static_cast<double>(epoch / decay_every));
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"lr", c.lr},
       {"lr_decay", c.lr_decay},
       {"decay_every", c.decay_every},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"adam_eps", c.adam_eps},
       {"weight_decay", c.weight_decay},
       {"grad_clip", c.grad_clip},
       {"batch_size", c.batch_size},
       {"alpha", c.loss.alpha},
       {"beta", c.loss.beta},
       {"det_cls", c.det.cls},
       {"det_l1", c.det.l1},
       {"det_giou", c.det.giou},
       {"focal_alpha", c.det.focal_alpha},
       {"focal_gamma", c.det.focal_gamma},
       {"box_term", to_string(c.box_term)},
       {"sigma", c.sigma},
       {"score_floor", c.score_floor},
       {"seed", c.seed},
       {"precision", c.precision},
       {"model", c.model},
       {"train_data", c.train_data},
       {"eval_data", c.eval_data}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const char* known[] = {"epochs", "lr", "lr_decay", "decay_every", "beta1", "beta2",
                                "adam_eps", "weight_decay", "grad_clip", "batch_size", "alpha",
                                "beta", "det_cls", "det_l1", "det_giou", "focal_alpha",
                                "focal_gamma", "box_term", "sigma", "score_floor", "seed",
                                "precision", "model", "train_data", "eval_data", "ablation"};
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(std::begin(known), std::end(known), it.key()) == std::end(known))
      throw ConfigError("config: unknown field '" + it.key() + "'");
  TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.lr = j.value("lr", d.lr);
  c.lr_decay = j.value("lr_decay", d.lr_decay);
  c.decay_every = j.value("decay_every", d.decay_every);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.loss.alpha = j.value("alpha", d.loss.alpha);
  c.loss.beta = j.value("beta", d.loss.beta);
  c.det.cls = j.value("det_cls", d.det.cls);
  c.det.l1 = j.value("det_l1", d.det.l1);
  c.det.giou = j.value("det_giou", d.det.giou);
  c.det.focal_alpha = j.value("focal_alpha", d.det.focal_alpha);
  c.det.focal_gamma = j.value("focal_gamma", d.det.focal_gamma);
  c.box_term = parse_box_term(j.value("box_term", to_string(d.box_term)));
  c.sigma = j.value("sigma", d.sigma);
  c.score_floor = j.value("score_floor", d.score_floor);
  c.seed = j.value("seed", d.seed);
  c.precision = j.value("precision", d.precision);
  c.model = j.contains("model") ? j.at("model").get<ModelConfig>() : d.model;
  c.train_data = j.contains("train_data") ? j.at("train_data").get<DataConfig>() : d.train_data;
  c.eval_data = j.contains("eval_data") ? j.at("eval_data").get<DataConfig>() : d.eval_data;
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  try {
    return j.get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
}

/// FNV-1a over the serialized model config, as 16 hex digits.
inline std::string config_fingerprint(const ModelConfig& m) {
  const std::string s = nlohmann::json(m).dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Samples named by a data config, rasters loaded.
inline Dataset materialize(const DataConfig& d) {
  if (d.dir.empty()) {
    Dataset ds;
    ds.classes = default_class_names(d.scene.num_classes);
    ds.samples = generate_dataset(d.scene, d.count, d.first_seed);
    return ds;
  }
  auto ds = load_annotations(std::filesystem::path(d.dir) / "annotations.json");
  for (auto& s : ds.samples) ensure_raster(ds, s);
  return ds;
}

/// Decoupled weight decay Adam.
template <class T>
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(const ParamSet<T>& ps) {
    for (const auto& [name, t] : ps.items()) {
      m_.push_back(Tensor<T>::zeros(t.shape()));
      v_.push_back(Tensor<T>::zeros(t.shape()));
    }
  }

  std::uint64_t steps() const { return step_; }
  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }
  void set_steps(std::uint64_t s) { step_ = s; }

  void step(ParamSet<T>& ps, const TrainConfig& c, double lr) {
    ++step_;
    const double bc1 = 1 - std::pow(c.beta1, static_cast<double>(step_));
    const double bc2 = 1 - std::pow(c.beta2, static_cast<double>(step_));
    auto& items = ps.items();
    for (std::size_t i = 0; i < items.size(); ++i) {
      auto& p = items[i].second;
      if (!p.has_grad()) continue;
      auto w = p.mutable_data();
      auto g = p.grad();
      auto m = m_[i].mutable_data(), v = v_[i].mutable_data();
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double gk = static_cast<double>(g[k]);
        m[k] = static_cast<T>(c.beta1 * static_cast<double>(m[k]) + (1 - c.beta1) * gk);
        v[k] = static_cast<T>(c.beta2 * static_cast<double>(v[k]) + (1 - c.beta2) * gk * gk);
        const double mh = static_cast<double>(m[k]) / bc1, vh = static_cast<double>(v[k]) / bc2;
        double wk = static_cast<double>(w[k]);
        wk -= lr * c.weight_decay * wk;
        wk -= lr * mh / (std::sqrt(vh) + c.adam_eps);
        w[k] = static_cast<T>(wk);
      }
    }
  }

 private:
  std::vector<Tensor<T>> m_, v_;
  std::uint64_t step_ = 0;
};

/// Global L2 norm of all parameter gradients.
template <class T>
double grad_norm(ParamSet<T>& ps) {
  double acc = 0;
  for (auto& [_, t] : ps.items())
    if (t.has_grad())
      for (auto g : t.grad()) acc += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(acc);
}

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0;
  double det = 0, gaze = 0, box = 0, total = 0;  // per-sample means
  double seconds = 0;
};

inline void to_json(nlohmann::json& j, const EpochLog& e) {
  j = {{"epoch", e.epoch}, {"lr", e.lr},     {"L_det", e.det},        {"L_gaze", e.gaze},
       {"L_gb", e.box},    {"L", e.total},   {"seconds", e.seconds}};
}

/// Per-image evaluation record.
struct ImageEval {
  std::vector<Detection> detections;
  std::optional<GOPPrediction> selection;
  double auc = 0;
  std::optional<GazePointError> point;
  double box_energy = 0;        // mean heatmap value inside the GT gaze box
  double box_energy_ratio = 0;  // heatmap mass inside the GT gaze box over total mass
};

struct EvalResult {
  MetricReport report;
  std::vector<ImageEval> images;
  double mean_box_energy = 0;
  double mean_box_energy_ratio = 0;
};

template <class T>
class Trainer {
 public:
  explicit Trainer(const TrainConfig& cfg)
      : cfg_(cfg), model_(cfg.model, cfg.seed), opt_(model_.params()) {
    cfg.validate();
  }

  const TrainConfig& config() const { return cfg_; }
  GopModel<T>& model() { return model_; }
  const GopModel<T>& model() const { return model_; }
  AdamW<T>& optimizer() { return opt_; }
  std::size_t epoch() const { return epoch_; }
  void set_epoch(std::size_t e) { epoch_ = e; }

  /// Loss of one sample without touching the parameters' gradients.
  SampleLoss<T> evaluate_loss(const SceneSample& s) const {
    Tape<T> tape(false);
    auto in = make_inputs<T>(s.image, s.head_box, cfg_.model);
    auto out = model_.forward(tape, in);
    return sample_loss(tape, out, s, cfg_.loss, cfg_.det, cfg_.box_term, cfg_.sigma);
  }

  /// One pass over `data` in a seed-determined order, then the epoch counter
  /// advances.
  EpochLog train_epoch(const std::vector<SceneSample>& data) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochLog log;
    log.epoch = epoch_;
    log.lr = cfg_.lr_at(epoch_);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(cfg_.seed * 1000003ull + epoch_ + 17);
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t in_batch = 0;
    model_.params().zero_grad();
    for (std::size_t n = 0; n < order.size(); ++n) {
      const auto& s = data[order[n]];
      Tape<T> tape;
      auto in = make_inputs<T>(s.image, s.head_box, cfg_.model);
      auto out = model_.forward(tape, in);
      auto l = sample_loss(tape, out, s, cfg_.loss, cfg_.det, cfg_.box_term, cfg_.sigma);
      log.det += static_cast<double>(l.det.item());
      log.gaze += static_cast<double>(l.gaze.item());
      if (l.box.defined()) log.box += static_cast<double>(l.box.item());
      log.total += static_cast<double>(l.total.item());
      tape.backward(l.total);
      ++in_batch;
      if (in_batch == cfg_.batch_size || n + 1 == order.size()) {
        apply_update(in_batch, log.lr);
        in_batch = 0;
      }
    }
    const auto count = static_cast<double>(std::max<std::size_t>(1, data.size()));
    log.det /= count;
    log.gaze /= count;
    log.box /= count;
    log.total /= count;
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ++epoch_;
    return log;
  }

 private:
  void apply_update(std::size_t batch, double lr) {
    auto& ps = model_.params();
    const T inv = T(1) / static_cast<T>(batch);
    for (auto& [_, t] : ps.items())
      if (t.has_grad())
        for (auto& g : t.grad()) g *= inv;
    const double norm = grad_norm(ps);
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm at epoch " + std::to_string(epoch_));
    if (cfg_.grad_clip > 0 && norm > cfg_.grad_clip) {
      const T s = static_cast<T>(cfg_.grad_clip / norm);
      for (auto& [_, t] : ps.items())
        if (t.has_grad())
          for (auto& g : t.grad()) g *= s;
    }
    opt_.step(ps, cfg_, lr);
    ps.zero_grad();
  }

  TrainConfig cfg_;
  GopModel<T> model_;
  AdamW<T> opt_;
  std::size_t epoch_ = 0;
};

// ------------------------------------------------------------ checkpoints

struct CheckpointMeta {
  std::size_t epoch = 0;
  std::uint64_t optimizer_steps = 0;
  std::string fingerprint;
};

template <class T>
io::SectionFile make_checkpoint(Trainer<T>& tr) {
  io::SectionFile f;
  f.add("CONF", nlohmann::json(tr.config()).dump());
  std::vector<io::TensorBlob> params, moments;
  const auto& items = tr.model().params().items();
  for (const auto& [name, t] : items) params.push_back(io::TensorBlob::from(name, t));
  auto& opt = tr.optimizer();
  for (std::size_t i = 0; i < items.size(); ++i) {
    moments.push_back(io::TensorBlob::from("m/" + items[i].first, opt.first_moments()[i]));
    moments.push_back(io::TensorBlob::from("v/" + items[i].first, opt.second_moments()[i]));
  }
  f.add("PARM", io::encode_tensors(params));
  f.add("OPTM", io::encode_tensors(moments));
  nlohmann::json meta = {{"epoch", tr.epoch()},
                         {"optimizer_steps", opt.steps()},
                         {"fingerprint", config_fingerprint(tr.config().model)}};
  f.add("META", meta.dump());
  return f;
}

/// Writes through a temporary file so an interrupted save leaves the
/// previous checkpoint intact.
template <class T>
void save_checkpoint(Trainer<T>& tr, const std::filesystem::path& path) {
  auto tmp = path;
  tmp += ".tmp";
  make_checkpoint(tr).save(tmp.string());
  std::filesystem::rename(tmp, path);
}

inline TrainConfig checkpoint_config(const io::SectionFile& f) {
  try {
    return nlohmann::json::parse(f.require("CONF")).get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint: bad CONF section: ") + e.what());
  }
}

inline CheckpointMeta checkpoint_meta(const io::SectionFile& f) {
  try {
    auto j = nlohmann::json::parse(f.require("META"));
    return {j.at("epoch").get<std::size_t>(), j.at("optimizer_steps").get<std::uint64_t>(),
            j.at("fingerprint").get<std::string>()};
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint: bad META section: ") + e.what());
  }
}

/// Restores parameters, optimizer moments and epoch into a trainer built
/// from the same config.
template <class T>
void restore_checkpoint(Trainer<T>& tr, const io::SectionFile& f) {
  const auto meta = checkpoint_meta(f);
  if (meta.fingerprint != config_fingerprint(tr.config().model))
    throw ConfigError("checkpoint fingerprint " + meta.fingerprint +
                      " does not match the model config");
  auto& items = tr.model().params().items();
  auto params = io::decode_tensors(f.require("PARM"));
  if (params.size() != items.size())
    throw ConfigError("checkpoint has " + std::to_string(params.size()) + " tensors, model has " +
                      std::to_string(items.size()));
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (params[i].name != items[i].first)
      throw ConfigError("checkpoint tensor '" + params[i].name + "' where model expects '" +
                        items[i].first + "'");
    params[i].copy_into(items[i].second);
  }
  auto moments = io::decode_tensors(f.require("OPTM"));
  if (moments.size() != 2 * items.size()) throw ConfigError("checkpoint: optimizer state size mismatch");
  auto& opt = tr.optimizer();
  for (std::size_t i = 0; i < items.size(); ++i) {
    moments[2 * i].copy_into(opt.first_moments()[i]);
    moments[2 * i + 1].copy_into(opt.second_moments()[i]);
  }
  opt.set_steps(meta.optimizer_steps);
  tr.set_epoch(meta.epoch);
}

// ------------------------------------------------------------ evaluation

template <class T>
ImageEval evaluate_image(const GopModel<T>& model, const SceneSample& s, double score_floor) {
  Tape<T> tape(false);
  auto in = make_inputs<T>(s.image, s.head_box, model.config());
  auto out = model.forward(tape, in);
  ImageEval e;
  e.detections = to_detections(out.detections);
  e.selection = select_gaze_object(out.heatmap, e.detections, score_floor);
  e.auc = gaze_auc(out.heatmap, s.gaze_point[0], s.gaze_point[1]);
  try {
    e.point = l2_and_angular(out.heatmap, s.head_center(), s.gaze_point);
  } catch (const ContractError&) {
    e.point.reset();
  }
  const Box& gb = s.gaze_object().box;
  e.box_energy = mean_box_energy(out.heatmap, gb);
  const std::size_t hs = out.heatmap.dim(0);
  const GazeBox g = to_gaze_box(gb, hs);
  double inside = 0, total = 0;
  auto v = out.heatmap.data();
  for (std::size_t y = 0; y < hs; ++y)
    for (std::size_t x = 0; x < hs; ++x) {
      total += static_cast<double>(v[y * hs + x]);
      if (g.contains(x, y)) inside += static_cast<double>(v[y * hs + x]);
    }
  e.box_energy_ratio = total > 0 ? inside / total : 0;
  return e;
}

template <class T>
EvalResult evaluate(const GopModel<T>& model, const std::vector<SceneSample>& data,
                    double score_floor = 0.1) {
  EvalResult r;
  std::vector<std::optional<GOPPrediction>> preds;
  std::vector<GazeTarget> targets;
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<GroundTruthObject>> gts;
  double auc = 0, dist = 0, ang = 0;
  std::size_t n_ang = 0;
  for (const auto& s : data) {
    auto e = evaluate_image(model, s, score_floor);
    preds.push_back(e.selection);
    if (!e.selection) ++r.report.selection_misses;
    targets.push_back({s.gaze_object().box, s.gaze_object().class_id});
    dets.push_back(e.detections);
    std::vector<GroundTruthObject> g;
    for (const auto& o : s.objects) g.push_back({o.box, o.class_id});
    gts.push_back(std::move(g));
    auc += e.auc;
    if (e.point) {
      dist += e.point->dist;
      ang += e.point->angle_deg;
      ++n_ang;
    } else {
      ++r.report.angle_excluded;
    }
    r.mean_box_energy += e.box_energy;
    r.mean_box_energy_ratio += e.box_energy_ratio;
    r.images.push_back(std::move(e));
  }
  const double n = static_cast<double>(std::max<std::size_t>(1, data.size()));
  r.report.images = data.size();
  r.report.msoc = msoc_suite(preds, targets);
  r.report.ap = ap_suite(dets, gts, model.config().num_classes);
  r.report.auc = auc / n;
  r.report.dist = n_ang ? dist / static_cast<double>(n_ang) : 0;
  r.report.angle = n_ang ? ang / static_cast<double>(n_ang) : 0;
  r.report.random_agnostic_msoc50 = random_selection_rate(dets, targets, 0.5, score_floor);
  r.mean_box_energy /= n;
  r.mean_box_energy_ratio /= n;
  return r;
}

// ------------------------------------------------------------ prediction

template <class T>
struct Prediction {
  Tensor<T> heatmap;
  std::vector<Detection> detections;
  std::optional<GOPPrediction> selection;
  std::array<double, 2> peak{};
};

template <class T>
Prediction<T> predict(const GopModel<T>& model, const Raster& image, const Box& head,
                      double score_floor = 0.1) {
  Tape<T> tape(false);
  auto in = make_inputs<T>(image, head, model.config());
  auto out = model.forward(tape, in);
  Prediction<T> p;
  p.heatmap = out.heatmap;
  p.detections = to_detections(out.detections);
  p.selection = select_gaze_object(out.heatmap, p.detections, score_floor);
  p.peak = heatmap_argmax(out.heatmap);
  return p;
}

/// Heatmap values in [0, 1] scaled linearly to 0..255.
template <class T>
std::string heatmap_to_pgm(const Tensor<T>& m) {
  const std::size_t s = detail::square_side(m, "heatmap_to_pgm");
  std::vector<std::uint8_t> px(s * s);
  auto v = m.data();
  for (std::size_t i = 0; i < px.size(); ++i)
    px[i] = static_cast<std::uint8_t>(
        std::lround(std::clamp(static_cast<double>(v[i]), 0.0, 1.0) * 255.0));
  return encode_pgm(s, s, px);
}

/// Single-record annotation document for the selected gaze object. The gaze
/// point is the heatmap peak clamped into the selected box.
template <class T>
nlohmann::json prediction_record(const Prediction<T>& p, const Raster& image, const Box& head,
                                 const std::vector<std::string>& classes, const std::string& file) {
  nlohmann::json doc = {{"classes", classes}};
  if (!p.selection) {
    doc["images"] = nlohmann::json::array();
    doc["status"] = "no_gaze_object";
    return doc;
  }
  const auto& sel = *p.selection;
  SceneSample s;
  s.id = 0;
  s.file = file;
  s.width = image.width;
  s.height = image.height;
  s.head_box = head;
  s.gaze_point = {std::clamp(p.peak[0], sel.box.x1, sel.box.x2),
                  std::clamp(p.peak[1], sel.box.y1, sel.box.y2)};
  s.objects = {{sel.box, sel.class_id}};
  s.gaze_object_index = 0;
  auto rec = sample_to_json(s);
  rec["score"] = sel.score;
  rec["energy"] = sel.energy;
  rec["detection_index"] = sel.index;
  rec["heatmap_peak"] = {p.peak[0], p.peak[1]};
  doc["images"] = nlohmann::json::array({rec});
  doc["status"] = "ok";
  return doc;
}

}  // namespace transgop
