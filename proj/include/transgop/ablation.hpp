#pragma once

#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "transgop/train.hpp"

namespace transgop {

/// Switch settings for one ablation variant.
struct AblationVariant {
  std::string name;
  bool gaze_autoencoder = true;
  BoxTerm box_term = BoxTerm::gaze_box;
  bool cross_adapter = true;
  CrossDirection direction = CrossDirection::object_to_gaze;

  TrainConfig apply(TrainConfig c) const {
    c.model.gaze_autoencoder = gaze_autoencoder;
    c.model.cross_adapter = cross_adapter;
    c.model.cross_direction = direction;
    c.box_term = box_term;
    return c;
  }
};

inline void to_json(nlohmann::json& j, const AblationVariant& v) {
  j = {{"name", v.name},
       {"gaze_autoencoder", v.gaze_autoencoder},
       {"box_term", to_string(v.box_term)},
       {"cross_adapter", v.cross_adapter},
       {"cross_direction", to_string(v.direction)}};
}
inline void from_json(const nlohmann::json& j, AblationVariant& v) {
  AblationVariant d;
  v.name = j.at("name").get<std::string>();
  v.gaze_autoencoder = j.value("gaze_autoencoder", d.gaze_autoencoder);
  v.box_term = parse_box_term(j.value("box_term", to_string(d.box_term)));
  v.cross_adapter = j.value("cross_adapter", d.cross_adapter);
  v.direction = parse_cross_direction(j.value("cross_direction", to_string(d.direction)));
}

/// Full model plus one variant per switch.
inline std::vector<AblationVariant> standard_variants() {
  std::vector<AblationVariant> v(6);
  v[0].name = "full";
  v[1].name = "no_gaze_box_loss";
  v[1].box_term = BoxTerm::none;
  v[2].name = "energy_aggregation";
  v[2].box_term = BoxTerm::energy;
  v[3].name = "no_cross_adapter";
  v[3].cross_adapter = false;
  v[4].name = "gaze_to_object";
  v[4].direction = CrossDirection::gaze_to_object;
  v[5].name = "no_gaze_autoencoder";
  v[5].gaze_autoencoder = false;
  return v;
}

struct AblationPlan {
  std::vector<AblationVariant> variants = standard_variants();
  std::vector<std::uint64_t> seeds{0, 1, 2};
};

inline AblationPlan parse_ablation_plan(const nlohmann::json& j) {
  AblationPlan p;
  if (!j.contains("ablation")) return p;
  const auto& a = j.at("ablation");
  try {
    if (a.contains("seeds")) p.seeds = a.at("seeds").get<std::vector<std::uint64_t>>();
    if (a.contains("variants")) p.variants = a.at("variants").get<std::vector<AblationVariant>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("ablation: ") + e.what());
  }
  for (const auto& v : p.variants)
    if (v.box_term != BoxTerm::gaze_box && v.box_term != BoxTerm::energy &&
        v.box_term != BoxTerm::none)
      throw ConfigError("ablation: bad box term in " + v.name);
  if (p.seeds.empty() || p.variants.empty()) throw ConfigError("ablation: need seeds and variants");
  return p;
}

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  std::string fingerprint;
  double final_loss = 0;
  double ap50 = 0;
  double msoc50_matched = 0;
  double msoc50_agnostic = 0;
  double random_msoc50 = 0;
  double auc = 0;
  double box_energy = 0;
  double box_energy_ratio = 0;
  double seconds = 0;
};

/// Trains and evaluates a config; returns the report and the last epoch log.
template <class T>
std::pair<EvalResult, EpochLog> train_and_evaluate(
    const TrainConfig& cfg, const std::vector<SceneSample>& train, const std::vector<SceneSample>& eval,
    const std::function<void(const EpochLog&)>& on_epoch = {}) {
  Trainer<T> tr(cfg);
  EpochLog last;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    last = tr.train_epoch(train);
    if (on_epoch) on_epoch(last);
  }
  return {evaluate(tr.model(), eval, cfg.score_floor), last};
}

/// Every variant under every seed, same data for all.
template <class T>
std::vector<AblationRow> run_ablation(const TrainConfig& base, const AblationPlan& plan,
                                      const std::vector<SceneSample>& train,
                                      const std::vector<SceneSample>& eval,
                                      const std::function<void(const AblationRow&)>& on_row = {}) {
  std::vector<AblationRow> rows;
  for (const auto& v : plan.variants)
    for (auto seed : plan.seeds) {
      auto cfg = v.apply(base);
      cfg.seed = seed;
      const auto t0 = std::chrono::steady_clock::now();
      auto [res, last] = train_and_evaluate<T>(cfg, train, eval);
      AblationRow r;
      r.variant = v.name;
      r.seed = seed;
      r.fingerprint = config_fingerprint(cfg.model) + "/seed" + std::to_string(seed);
      r.final_loss = last.total;
      r.ap50 = res.report.ap.at(0.5);
      r.msoc50_matched = res.report.msoc.at(res.report.msoc.matched, 0.5);
      r.msoc50_agnostic = res.report.msoc.at(res.report.msoc.agnostic, 0.5);
      r.random_msoc50 = res.report.random_agnostic_msoc50;
      r.auc = res.report.auc;
      r.box_energy = res.mean_box_energy;
      r.box_energy_ratio = res.mean_box_energy_ratio;
      r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (on_row) on_row(r);
      rows.push_back(std::move(r));
    }
  return rows;
}

/// Per-seed rows, then per-variant means with deltas against the first
/// variant.
inline void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows) {
  os << "variant,seed,fingerprint,final_loss,AP50,mSoC50_matched,mSoC50_agnostic,random_mSoC50,"
        "AUC,box_energy,box_energy_ratio,seconds\n";
  for (const auto& r : rows)
    os << r.variant << ',' << r.seed << ',' << r.fingerprint << ',' << format4(r.final_loss) << ','
       << format4(r.ap50) << ',' << format4(r.msoc50_matched) << ',' << format4(r.msoc50_agnostic)
       << ',' << format4(r.random_msoc50) << ',' << format4(r.auc) << ',' << format4(r.box_energy)
       << ',' << format4(r.box_energy_ratio) << ',' << format4(r.seconds) << '\n';
}

struct VariantMeans {
  std::string variant;
  double ap50 = 0, msoc50_matched = 0, msoc50_agnostic = 0, auc = 0, box_energy = 0,
         box_energy_ratio = 0;
  std::size_t runs = 0;
};

inline std::vector<VariantMeans> variant_means(const std::vector<AblationRow>& rows) {
  std::vector<VariantMeans> out;
  for (const auto& r : rows) {
    auto it = std::find_if(out.begin(), out.end(), [&](auto& m) { return m.variant == r.variant; });
    if (it == out.end()) {
      out.push_back({r.variant});
      it = out.end() - 1;
    }
    it->ap50 += r.ap50;
    it->msoc50_matched += r.msoc50_matched;
    it->msoc50_agnostic += r.msoc50_agnostic;
    it->auc += r.auc;
    it->box_energy += r.box_energy;
    it->box_energy_ratio += r.box_energy_ratio;
    ++it->runs;
  }
  for (auto& m : out) {
    const double n = static_cast<double>(m.runs);
    m.ap50 /= n;
    m.msoc50_matched /= n;
    m.msoc50_agnostic /= n;
    m.auc /= n;
    m.box_energy /= n;
    m.box_energy_ratio /= n;
  }
  return out;
}

inline void write_ablation_summary(std::ostream& os, const std::vector<AblationRow>& rows) {
  auto means = variant_means(rows);
  os << "variant,runs,AP50,mSoC50_matched,mSoC50_agnostic,AUC,box_energy,box_energy_ratio,"
        "delta_AP50,delta_mSoC50_matched\n";
  for (const auto& m : means)
    os << m.variant << ',' << m.runs << ',' << format4(m.ap50) << ',' << format4(m.msoc50_matched)
       << ',' << format4(m.msoc50_agnostic) << ',' << format4(m.auc) << ','
       << format4(m.box_energy) << ',' << format4(m.box_energy_ratio) << ','
       << format4(m.ap50 - means.front().ap50) << ','
       << format4(m.msoc50_matched - means.front().msoc50_matched) << '\n';
}

}  // namespace transgop
