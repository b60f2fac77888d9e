#pragma once

// Glue between files on disk and the model: sample building, run
// configuration, model bundles and request/response conversion.

#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "transpdt/checkpoint.hpp"
#include "transpdt/config.hpp"
#include "transpdt/synthgen.hpp"
#include "transpdt/training.hpp"

namespace transpdt {

// Daily records → samples. Pending sets come out of route splitting in
// completion order, so each one is shuffled with a seed derived from
// (seed, record, sample) before the model sees it.
inline std::vector<Sample> build_samples(const std::vector<DailyRecord>& records, const SampleOptions& opt,
                                         std::uint64_t seed, std::size_t max_samples = 0) {
  std::vector<Sample> out;
  for (std::size_t r = 0; r < records.size(); ++r) {
    auto samples = split_routes(aggregate_packages(records[r]), opt);
    for (std::size_t k = 0; k < samples.size(); ++k) {
      std::vector<std::size_t> order(samples[k].pending.size());
      std::iota(order.begin(), order.end(), 0);
      std::mt19937_64 rng(stream_seed(seed, r, k));
      std::shuffle(order.begin(), order.end(), rng);
      out.push_back(permute_pending(samples[k], order));
      if (max_samples && out.size() == max_samples) return out;
    }
  }
  return out;
}

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SampleOptions samples;
  std::size_t max_train_samples = 0;  // 0 = all
  std::size_t max_eval_samples = 0;
};

inline RunConfig run_config_from(const KeyValueConfig& kv) {
  RunConfig c;
  kv.read("d_model", c.model.d_model);
  kv.read("heads", c.model.heads);
  kv.read("blocks", c.model.blocks);
  kv.read("ffn_mult", c.model.ffn_mult);
  kv.read("max_history", c.model.max_history);
  kv.read("max_pending", c.model.max_pending);
  kv.read("memory_slots", c.model.memory_slots);
  kv.read("dropout", c.model.dropout);
  kv.read("time_scale", c.model.time_scale);
  kv.read("use_memory", c.model.use_memory);
  kv.read("use_mobility", c.model.use_mobility);
  kv.read("pointer_tanh", c.model.pointer_tanh);
  kv.read("init_seed", c.model.seed);
  kv.read("batch_size", c.train.batch_size);
  kv.read("epochs", c.train.epochs);
  kv.read("patience", c.train.patience);
  kv.read("lr", c.train.lr);
  kv.read("clip_norm", c.train.clip_norm);
  kv.read("seed", c.train.seed);
  kv.read("stride", c.samples.stride);
  kv.read("min_pending", c.samples.min_pending);
  kv.read("max_train_samples", c.max_train_samples);
  kv.read("max_eval_samples", c.max_eval_samples);
  kv.reject_unused();
  if (c.train.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(c.train.lr > 0.0)) throw ConfigError("lr must be positive");
  if (c.samples.stride == 0) throw ConfigError("stride must be positive");
  ModelConfig probe = c.model;
  probe.feature_dim = 1;
  probe.validate();
  return c;
}

// Everything inference needs.
struct Bundle {
  FeatureStats stats;
  MobilityTensors mobility;
  AoiTable aois;
  Model model;
  std::string version;
};

inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) h = (h ^ c) * 1099511628211ULL;
  return h;
}

inline std::string checkpoint_version(const ParameterStore& store) {
  std::ostringstream os;
  write_tensors(os, to_named(store));
  std::ostringstream v;
  v << std::hex << std::setw(16) << std::setfill('0') << fnv1a(os.str());
  return v.str();
}

// Model directory layout: model.ckpt (parameters), model.json (config and
// feature statistics), mobility.bin, aoi.csv.
inline void save_bundle(const std::string& dir, const Model& model, const FeatureStats& stats,
                        const MobilityTensors& mobility, const AoiTable& aois) {
  std::filesystem::create_directories(dir);
  save_checkpoint(dir + "/model.ckpt", model.params());
  save_mobility(dir + "/mobility.bin", mobility);
  save_aoi_table(dir + "/aoi.csv", aois);
  Json meta{{"format", "transpdt-model"},
            {"version", 1},
            {"model_version", checkpoint_version(model.params())},
            {"config", config_to_json(model.config())},
            {"stats", stats_to_json(stats)}};
  std::ofstream os(dir + "/model.json");
  if (!os) throw Error("cannot write " + dir + "/model.json");
  os << meta.dump(2) << '\n';
}

inline Bundle load_bundle(const std::string& dir) {
  std::ifstream is(dir + "/model.json");
  if (!is) throw Error("cannot open " + dir + "/model.json");
  Json meta;
  try {
    meta = Json::parse(is);
  } catch (const Json::exception& e) {
    throw ParseError(dir + "/model.json: " + e.what());
  }
  if (meta.value("format", "") != "transpdt-model" || meta.value("version", 0) != 1)
    throw ValidationError(dir + "/model.json: unsupported model format");
  auto stats = stats_from_json(meta.at("stats"));
  auto cfg = config_from_json(meta.at("config"));
  if (cfg.feature_dim != stats.width())
    throw ValidationError("model feature_dim " + std::to_string(cfg.feature_dim) + " differs from feature stats width " +
                          std::to_string(stats.width()));
  Bundle b{std::move(stats), load_mobility(dir + "/mobility.bin"), load_aoi_table(dir + "/aoi.csv"), Model(cfg), ""};
  load_checkpoint(dir + "/model.ckpt", b.model.params());
  if (b.mobility.n_aoi() != b.aois.size())
    throw ValidationError("mobility tensors cover " + std::to_string(b.mobility.n_aoi()) + " AOIs, table has " +
                          std::to_string(b.aois.size()));
  b.version = checkpoint_version(b.model.params());
  return b;
}

// Mean delivery offset over training samples, used to start the time head.
inline double mean_offset_minutes(const std::vector<Sample>& samples) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& smp : samples)
    for (const auto& o : smp.truth_offsets)
      if (o) s += *o, ++n;
  return n ? s / static_cast<double>(n) : 0.0;
}

// Builds a freshly initialized model sized for `stats`.
inline Model init_model(ModelConfig cfg, const FeatureStats& stats, const std::vector<Sample>& train) {
  cfg.feature_dim = stats.width();
  Model m(cfg);
  m.set_time_bias_minutes(mean_offset_minutes(train));
  return m;
}

// Seeds for shuffling pending sets; fixed so every tool sees the same samples.
inline constexpr std::uint64_t kTrainSampleSeed = 1;
inline constexpr std::uint64_t kValSampleSeed = 2;
inline constexpr std::uint64_t kTestSampleSeed = 3;

struct SplitSamples {
  std::vector<Sample> train, val, test;
};

inline SplitSamples samples_from_split(const DateSplit& split, const RunConfig& cfg) {
  return {build_samples(split.train, cfg.samples, kTrainSampleSeed, cfg.max_train_samples),
          build_samples(split.val, cfg.samples, kValSampleSeed, cfg.max_eval_samples),
          build_samples(split.test, cfg.samples, kTestSampleSeed, cfg.max_eval_samples)};
}

struct TrainedModel {
  FeatureStats stats;
  Model model;
  TrainResult result;
};

// Fits feature statistics on `train`, initializes a model and trains it.
inline TrainedModel fit_model(const std::vector<Sample>& train_samples, const std::vector<Sample>& val_samples,
                              const MobilityTensors& mobility, const RunConfig& cfg, const EpochCallback& on_epoch = {}) {
  if (train_samples.empty()) throw DegenerateInputError("no training samples");
  auto stats = fit_feature_stats(train_samples, cfg.model.max_history, cfg.model.max_pending);
  TrainedModel t{stats, init_model(cfg.model, stats, train_samples), {}};
  const auto& mc = t.model.config();
  const auto ptr = prepare_all(train_samples, stats, mobility, mc);
  const auto pva = prepare_all(val_samples, stats, mobility, mc);
  t.result = train(t.model, ptr, pva, cfg.train, on_epoch);
  return t;
}

struct SweepRow {
  std::string param;
  std::size_t value = 0;
  EvalResult result;
};

// Trains one model per memory size and per pending length, varying one
// setting at a time from `base`, and scores each on `samples.test`.
inline std::vector<SweepRow> run_sweep(const SplitSamples& samples, const MobilityTensors& mobility, const RunConfig& base,
                                       const std::vector<std::size_t>& memory_slots,
                                       const std::vector<std::size_t>& max_pending,
                                       const std::function<void(const std::string&, std::size_t)>& on_run = {}) {
  std::vector<SweepRow> rows;
  auto run = [&](const std::string& param, std::size_t value, const RunConfig& cfg) {
    if (on_run) on_run(param, value);
    auto t = fit_model(samples.train, samples.val, mobility, cfg);
    const auto test = prepare_all(samples.test, t.stats, mobility, t.model.config());
    rows.push_back({param, value, evaluate_model(t.model, test)});
  };
  for (auto v : memory_slots) {
    auto cfg = base;
    cfg.model.memory_slots = v;
    run("memory_slots", v, cfg);
  }
  for (auto v : max_pending) {
    auto cfg = base;
    cfg.model.max_pending = v;
    run("max_pending", v, cfg);
  }
  return rows;
}

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << "param,value,rmse,mape,lmd,hr1,hr3\n" << std::setprecision(10);
  for (const auto& r : rows)
    os << r.param << ',' << r.value << ',' << r.result.rmse << ',' << r.result.mape << ',' << r.result.lmd << ','
       << r.result.hr1 << ',' << r.result.hr3 << '\n';
}

// ---------------------------------------------------------------------------
// Prediction requests and responses (line-delimited JSON, version 1)
//
// request:  {"op":"predict","request_id":ID,"courier_id":S,"t":EPOCH,
//            "courier_profile":{..},"weather":{..},"holiday":BOOL,
//            "history":[PACKAGE..],"pending":[PACKAGE..]}
// PACKAGE:  dataset package fields; "aoi" may be omitted or -1, in which case
//           the nearest AOI centroid is used. History packages need finish_time.
// response: {"version":1,"request_id":ID,"model_version":S,
//            "predictions":[{"package_id":S,"kind":S,"route_position":N,
//                            "eta":EPOCH|null}..],"unranked":[S..]}
// error:    {"version":1,"request_id":ID|null,"error":S[,"retry_after_ms":N]}

inline constexpr int kProtocolVersion = 1;

inline Package request_package(const Json& j, const AoiTable& aois) {
  Json copy = j;
  if (!copy.contains("finish_time")) copy["finish_time"] = nullptr;
  bool resolve = !copy.contains("aoi") || copy["aoi"].is_null();
  if (!resolve && copy["aoi"].get<std::int64_t>() < 0) resolve = true;
  if (resolve) copy["aoi"] = 0;
  Package p = package_from_json(copy);
  if (resolve || p.aoi >= aois.size()) p.aoi = nearest_aoi(aois, p.loc);
  return p;
}

// Parses and validates a predict request; throws ParseError/ValidationError.
inline Sample request_to_sample(const Json& j, const AoiTable& aois) {
  Sample s;
  try {
    s.courier_id = j.value("courier_id", "");
    s.t = j.at("t").get<EpochSeconds>();
    s.date = day_index(s.t);
    s.context.courier_profile = attrs_from_json(j.value("courier_profile", Json(nullptr)));
    s.context.weather = attrs_from_json(j.value("weather", Json(nullptr)));
    s.context.holiday = j.value("holiday", false);
    for (const auto& p : j.at("history")) s.history.push_back(request_package(p, aois));
    for (const auto& p : j.at("pending")) s.pending.push_back(request_package(p, aois));
  } catch (const Json::exception& e) {
    throw ParseError(std::string("malformed request: ") + e.what());
  }
  if (s.pending.empty()) throw ValidationError("request has no pending packages");
  std::stable_sort(s.history.begin(), s.history.end(), [](const Package& a, const Package& b) {
    return a.finish_time.value_or(0) < b.finish_time.value_or(0);
  });
  std::vector<std::string> v = sample_violations(s);
  for (const auto& p : s.history)
    for (auto& m : package_violations(p, aois.size())) v.push_back(p.id + ": " + m);
  for (const auto& p : s.pending)
    for (auto& m : package_violations(p, aois.size())) v.push_back(p.id + ": " + m);
  if (!v.empty()) throw ValidationError("invalid request: " + v.front());
  return s;
}

inline Json sample_to_request(const Sample& s, const Json& request_id) {
  Json hist = Json::array(), pend = Json::array();
  for (const auto& p : s.history) hist.push_back(package_to_json(p));
  for (const auto& p : s.pending) {
    Json pj = package_to_json(p);
    pj["finish_time"] = nullptr;
    pend.push_back(pj);
  }
  return Json{{"op", "predict"},
              {"request_id", request_id},
              {"courier_id", s.courier_id},
              {"t", s.t},
              {"courier_profile", attrs_to_json(s.context.courier_profile)},
              {"weather", attrs_to_json(s.context.weather)},
              {"holiday", s.context.holiday},
              {"history", hist},
              {"pending", pend}};
}

inline Json prediction_response(const Json& request_id, const Sample& s, const Prediction& p, const std::string& version) {
  Json preds = Json::array();
  std::vector<bool> ranked(s.pending.size(), false);
  for (std::size_t k = 0; k < p.route.size(); ++k) {
    const auto& pkg = s.pending[p.route[k]];
    ranked[p.route[k]] = true;
    preds.push_back({{"package_id", pkg.id},
                     {"kind", to_string(pkg.kind)},
                     {"route_position", k},
                     {"eta", pkg.is_delivery() ? Json(static_cast<double>(s.t) + 60.0 * p.minutes[k]) : Json(nullptr)}});
  }
  Json unranked = Json::array();
  for (std::size_t i = 0; i < s.pending.size(); ++i)
    if (!ranked[i]) unranked.push_back(s.pending[i].id);
  return Json{{"version", kProtocolVersion}, {"request_id", request_id}, {"model_version", version},
              {"predictions", preds}, {"unranked", unranked}};
}

inline Json error_response(const Json& request_id, const std::string& message) {
  return Json{{"version", kProtocolVersion}, {"request_id", request_id}, {"error", message}};
}

inline PreparedSample prepare_for_inference(const Bundle& b, const Sample& s) {
  return prepare_sample(s, b.stats, b.mobility, b.model.config());
}

inline Prediction predict_sample(const Bundle& b, const Sample& s) {
  return predict_prepared(b.model, prepare_for_inference(b, s));
}

// Offline predictions as CSV, one row per ranked pending package.
inline void write_predictions_csv(std::ostream& os, const std::vector<Sample>& samples,
                                  const std::vector<Prediction>& preds) {
  os << "sample,courier_id,t,package_id,kind,route_position,predicted_minutes,eta\n";
  os << std::setprecision(17);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    for (std::size_t k = 0; k < preds[i].route.size(); ++k) {
      const auto& pkg = s.pending[preds[i].route[k]];
      os << i << ',' << s.courier_id << ',' << s.t << ',' << pkg.id << ',' << to_string(pkg.kind) << ',' << k << ',';
      if (pkg.is_delivery())
        os << preds[i].minutes[k] << ',' << static_cast<double>(s.t) + 60.0 * preds[i].minutes[k];
      else
        os << ',';
      os << '\n';
    }
  }
}

inline void write_eval_csv(std::ostream& os, const std::vector<std::pair<std::string, EvalResult>>& rows) {
  os << "method,rmse,mape,lmd,hr1,hr3,time_count,mape_count,mape_filtered,route_count,inference_seconds\n";
  os << std::setprecision(10);
  for (const auto& [name, r] : rows)
    os << name << ',' << r.rmse << ',' << r.mape << ',' << r.lmd << ',' << r.hr1 << ',' << r.hr3 << ',' << r.time_count
       << ',' << r.mape_count << ',' << r.mape_filtered << ',' << r.route_count << ',' << r.inference_seconds << '\n';
}

inline void write_eval_table(std::ostream& os, const std::vector<std::pair<std::string, EvalResult>>& rows) {
  os << std::left << std::setw(16) << "method" << std::right << std::setw(10) << "RMSE" << std::setw(10) << "MAPE%"
     << std::setw(10) << "LMD" << std::setw(10) << "HR@1%" << std::setw(10) << "HR@3%" << std::setw(12) << "infer_s"
     << '\n';
  os << std::fixed << std::setprecision(3);
  for (const auto& [name, r] : rows)
    os << std::left << std::setw(16) << name << std::right << std::setw(10) << r.rmse << std::setw(10) << r.mape
       << std::setw(10) << r.lmd << std::setw(10) << r.hr1 << std::setw(10) << r.hr3 << std::setw(12) << r.inference_seconds
       << '\n';
  os.unsetf(std::ios::floatfield);
}

// Baselines evaluated on the same kept pending rows the model ranks.
inline EvalResult evaluate_avg(const AvgBaseline& avg, const std::vector<PreparedSample>& data) {
  std::vector<SamplePrediction> preds;
  for (const auto& ps : data) {
    Prediction p;
    p.route = ps.enc.pending_index;
    for (auto i : p.route) p.minutes.push_back(avg.predict(ps.sample.pending[i].aoi, time_slot(ps.sample.t)));
    preds.push_back(score_prediction(ps, p));
  }
  return aggregate_eval(preds);
}

inline EvalResult evaluate_nearest_deadline(const std::vector<PreparedSample>& data) {
  std::vector<SamplePrediction> preds;
  for (const auto& ps : data) {
    Prediction p;
    p.route = nearest_deadline_route(ps.sample.pending, ps.enc.pending_index);
    p.minutes.assign(p.route.size(), 0.0);
    auto sp = score_prediction(ps, p);
    sp.times.clear();
    preds.push_back(sp);
  }
  return aggregate_eval(preds);
}

}  // namespace transpdt
