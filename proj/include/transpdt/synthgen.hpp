#pragma once

// Synthetic courier world: AOIs on a square grid, couriers with personal
// AOI-transition preferences, deliveries pre-allocated at day start and
// pickups arriving as a Poisson process with tight deadlines.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <sstream>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "transpdt/config.hpp"
#include "transpdt/data.hpp"
#include "transpdt/mobility.hpp"

namespace transpdt {

struct WorldConfig {
  std::size_t n_aoi = 100;
  double grid_km = 10.0;
  std::size_t couriers = 8;
  std::size_t territory_aois = 10;  // AOIs a courier serves
  double deliveries_per_day = 30.0;  // Poisson mean per courier-day
  double pickup_rate_per_hour = 0.25;
  double pickup_deadline_min = 120.0;  // pickup promise lands in [0.3, 1] x this after dispatch
  double courier_speed_mps = 5.0;
  double service_time_s = 120.0;
  double work_hours = 10.0;  // pickups arrive only inside this window
  double day_start_hour = 8.0;
  double promise_min_hours = 1.5;
  double promise_max_hours = 10.0;
  double w_urgency = 0.5;
  double w_distance = 0.3;
  double w_preference = 0.2;
  double override_minutes = 30.0;
  bool flat_preferences = false;  // all multipliers 1
  std::size_t days = 20;
  std::int64_t start_day = 19417;  // 2023-03-01
  double origin_lat = 39.90;
  double origin_lon = 116.30;
  std::uint64_t seed = 42;

  void validate() const {
    if (n_aoi == 0 || couriers == 0 || territory_aois == 0 || days == 0) throw ConfigError("counts must be positive");
    if (!(grid_km > 0 && deliveries_per_day > 0 && courier_speed_mps > 0 && work_hours > 0 && pickup_deadline_min > 0))
      throw ConfigError("rates, extents and speeds must be positive");
    if (pickup_rate_per_hour < 0) throw ConfigError("pickup rate must be non-negative");
    if (service_time_s < 1.0) throw ConfigError("service time must be at least one second");
    if (promise_min_hours <= 0 || promise_max_hours < promise_min_hours) throw ConfigError("bad promise window");
  }
};

inline WorldConfig world_config_from(const KeyValueConfig& kv) {
  WorldConfig c;
  kv.read("n_aoi", c.n_aoi);
  kv.read("grid_km", c.grid_km);
  kv.read("couriers", c.couriers);
  kv.read("territory_aois", c.territory_aois);
  kv.read("deliveries_per_day", c.deliveries_per_day);
  kv.read("pickup_rate_per_hour", c.pickup_rate_per_hour);
  kv.read("pickup_deadline_min", c.pickup_deadline_min);
  kv.read("courier_speed_mps", c.courier_speed_mps);
  kv.read("service_time_s", c.service_time_s);
  kv.read("work_hours", c.work_hours);
  kv.read("day_start_hour", c.day_start_hour);
  kv.read("promise_min_hours", c.promise_min_hours);
  kv.read("promise_max_hours", c.promise_max_hours);
  kv.read("w_urgency", c.w_urgency);
  kv.read("w_distance", c.w_distance);
  kv.read("w_preference", c.w_preference);
  kv.read("override_minutes", c.override_minutes);
  kv.read("flat_preferences", c.flat_preferences);
  kv.read("days", c.days);
  kv.read("start_day", c.start_day);
  kv.read("origin_lat", c.origin_lat);
  kv.read("origin_lon", c.origin_lon);
  kv.read("seed", c.seed);
  kv.reject_unused();
  c.validate();
  return c;
}

struct CourierProfile {
  std::string id;
  std::size_t home_aoi = 0;
  std::vector<std::size_t> territory;  // AOIs nearest the home AOI
  std::vector<double> territory_weight;  // sampling weight per territory AOI
  std::vector<double> preference;  // N×N multipliers in [0.25, 4]
  double speed_multiplier = 1.0;
  double age = 30.0;
  double tenure_years = 2.0;
  std::string gender;

  double pref(std::size_t from, std::size_t to, std::size_t n) const { return preference[from * n + to]; }
};

struct World {
  WorldConfig config;
  AoiTable aois;
  std::vector<CourierProfile> couriers;
};

inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (a + 1) + 0xD1B54A32D192ED03ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline World generate_world(const WorldConfig& cfg) {
  cfg.validate();
  World w;
  w.config = cfg;
  std::mt19937_64 rng(stream_seed(cfg.seed, 0, 0));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const LatLon origin{cfg.origin_lat, cfg.origin_lon};
  const double extent = cfg.grid_km * 1000.0;
  for (std::size_t i = 0; i < cfg.n_aoi; ++i) w.aois.centroids.push_back(offset_m(origin, unit(rng) * extent, unit(rng) * extent));

  const std::size_t n = cfg.n_aoi;
  const std::size_t k = std::min(cfg.territory_aois, n);
  std::uniform_real_distribution<double> log_mult(std::log(0.25), std::log(4.0));
  for (std::size_t c = 0; c < cfg.couriers; ++c) {
    std::mt19937_64 crng(stream_seed(cfg.seed, 1, c));
    CourierProfile p;
    p.id = "courier-" + std::to_string(c);
    p.home_aoi = std::uniform_int_distribution<std::size_t>(0, n - 1)(crng);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    const LatLon home = w.aois.centroids[p.home_aoi];
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return haversine_m(home, w.aois.centroids[a]) < haversine_m(home, w.aois.centroids[b]);
    });
    p.territory.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    for (std::size_t i = 0; i < k; ++i) p.territory_weight.push_back(0.5 + unit(crng));
    p.preference.assign(n * n, 1.0);
    if (!cfg.flat_preferences)
      for (auto& m : p.preference) m = std::exp(log_mult(crng));
    p.tenure_years = 0.2 + 7.8 * unit(crng);
    p.age = std::round(21.0 + 25.0 * unit(crng));
    p.speed_multiplier = 0.85 + 0.3 * unit(crng);
    p.gender = unit(crng) < 0.8 ? "m" : "f";
    w.couriers.push_back(std::move(p));
  }
  return w;
}

// Per-date context shared by every courier.
inline DayContext day_context(const World& w, const CourierProfile& c, std::int64_t date) {
  std::mt19937_64 rng(stream_seed(w.config.seed, 2, static_cast<std::uint64_t>(date)));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  DayContext ctx;
  const double r = unit(rng);
  const std::string type = r < 0.55 ? "sunny" : (r < 0.85 ? "cloudy" : "rain");
  const double avg = std::round(10.0 + 15.0 * unit(rng));
  ctx.weather = {{"type", type}, {"temp_avg", avg}, {"temp_high", avg + std::round(3.0 + 4.0 * unit(rng))},
                 {"temp_low", avg - std::round(3.0 + 4.0 * unit(rng))}};
  const int dow = day_of_week(date * 86400);
  ctx.holiday = dow >= 5 || unit(rng) < 0.05;
  ctx.courier_profile = {{"age", c.age}, {"tenure_years", c.tenure_years}, {"gender", c.gender}};
  return ctx;
}

// Tasks of one courier-day before the courier acts on them.
struct DayPlan {
  EpochSeconds start = 0;
  std::vector<Package> deliveries;
  std::vector<Package> pickups;  // ascending dispatch time
  double speed_mps = 5.0;
};

inline Package make_package(const World& w, const CourierProfile& c, std::mt19937_64& rng, std::size_t aoi,
                            PackageKind kind, std::string id) {
  std::uniform_real_distribution<double> jitter(-150.0, 150.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Package p;
  p.id = std::move(id);
  p.kind = kind;
  p.aoi = aoi;
  p.loc = offset_m(w.aois.centroids[aoi], jitter(rng), jitter(rng));
  p.weight = std::round((0.2 + (kind == PackageKind::Pickup ? 6.0 : 3.0) * unit(rng)) * 100.0) / 100.0;
  p.volume = std::round((0.5 + (kind == PackageKind::Pickup ? 20.0 : 10.0) * unit(rng)) * 10.0) / 10.0;
  (void)c;
  return p;
}

inline DayPlan plan_day(const World& w, std::size_t courier, std::int64_t date) {
  const auto& cfg = w.config;
  const auto& c = w.couriers.at(courier);
  std::mt19937_64 rng(stream_seed(cfg.seed, 3 + courier, static_cast<std::uint64_t>(date)));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::discrete_distribution<std::size_t> pick_aoi(c.territory_weight.begin(), c.territory_weight.end());
  DayPlan plan;
  plan.start = date * 86400 + static_cast<EpochSeconds>(std::llround((cfg.day_start_hour + unit(rng) - 0.5) * 3600.0));
  const std::string prefix = c.id + "-" + std::to_string(date) + "-";
  const std::size_t nd = std::max<std::size_t>(1, std::poisson_distribution<std::size_t>(cfg.deliveries_per_day)(rng));
  for (std::size_t i = 0; i < nd; ++i) {
    Package p = make_package(w, c, rng, c.territory[pick_aoi(rng)], PackageKind::Delivery, prefix + "d" + std::to_string(i));
    p.dispatched_time = plan.start;
    const double hours = cfg.promise_min_hours + (cfg.promise_max_hours - cfg.promise_min_hours) * unit(rng);
    p.promised_time = plan.start + static_cast<EpochSeconds>(std::llround(hours * 2.0) * 1800);
    plan.deliveries.push_back(std::move(p));
  }
  if (cfg.pickup_rate_per_hour > 0.0) {
    std::exponential_distribution<double> gap(cfg.pickup_rate_per_hour / 3600.0);
    double t = static_cast<double>(plan.start);
    const double end = static_cast<double>(plan.start) + cfg.work_hours * 3600.0;
    for (std::size_t i = 0;; ++i) {
      t += gap(rng);
      if (t >= end) break;
      Package p = make_package(w, c, rng, c.territory[pick_aoi(rng)], PackageKind::Pickup, prefix + "p" + std::to_string(i));
      p.dispatched_time = static_cast<EpochSeconds>(std::llround(t));
      p.promised_time = p.dispatched_time +
                        static_cast<EpochSeconds>(std::llround((0.3 + 0.7 * unit(rng)) * cfg.pickup_deadline_min * 60.0));
      plan.pickups.push_back(std::move(p));
    }
  }
  const bool rain = std::get<std::string>(day_context(w, c, date).weather.at("type")) == "rain";
  plan.speed_mps = cfg.courier_speed_mps * c.speed_multiplier * (rain ? 0.85 : 1.0);
  return plan;
}

// Score of serving `p` next from (loc, aoi) at time `now`.
inline double policy_score(const WorldConfig& cfg, const CourierProfile& c, std::size_t n_aoi, const Package& p,
                           LatLon loc, std::size_t aoi, double now) {
  const double remaining_min = std::max(0.0, (static_cast<double>(p.promised_time) - now) / 60.0);
  const double urgency = 1.0 / (1.0 + remaining_min / 60.0);
  const double inv_dist = 1.0 / (1.0 + haversine_m(loc, p.loc) / 1000.0);
  const double pref = c.pref(aoi, p.aoi, n_aoi) / 4.0;
  return cfg.w_urgency * urgency + cfg.w_distance * inv_dist + cfg.w_preference * pref;
}

// Index in `pending` the courier serves next. A pickup whose remaining time is
// under the override threshold wins outright (most urgent first); otherwise
// the highest policy score wins, ties to the lower index.
inline std::size_t choose_next(const WorldConfig& cfg, const CourierProfile& c, std::size_t n_aoi,
                               const std::vector<Package>& pending, LatLon loc, std::size_t aoi, double now) {
  std::optional<std::size_t> forced;
  for (std::size_t i = 0; i < pending.size(); ++i) {
    const auto& p = pending[i];
    if (p.kind != PackageKind::Pickup) continue;
    if ((static_cast<double>(p.promised_time) - now) / 60.0 < cfg.override_minutes &&
        (!forced || p.promised_time < pending[*forced].promised_time))
      forced = i;
  }
  if (forced) return *forced;
  std::size_t best = 0;
  double best_s = -1.0;
  for (std::size_t i = 0; i < pending.size(); ++i) {
    const double s = policy_score(cfg, c, n_aoi, pending[i], loc, aoi, now);
    if (s > best_s) best = i, best_s = s;
  }
  return best;
}

// Runs the courier policy over a plan; every package ends with a finish time.
inline DailyRecord run_policy(const World& w, std::size_t courier, std::int64_t date, const DayPlan& plan) {
  const auto& cfg = w.config;
  const auto& c = w.couriers.at(courier);
  DailyRecord rec;
  rec.courier_id = c.id;
  rec.date = date;
  rec.context = day_context(w, c, date);
  std::vector<Package> pending = plan.deliveries;
  std::vector<Package> arrivals = plan.pickups;
  std::stable_sort(arrivals.begin(), arrivals.end(),
                   [](const Package& a, const Package& b) { return a.dispatched_time < b.dispatched_time; });
  std::size_t next_arrival = 0;
  double now = static_cast<double>(plan.start);
  LatLon loc = w.aois.centroids[c.home_aoi];
  std::size_t aoi = c.home_aoi;
  EpochSeconds last_finish = plan.start;
  for (;;) {
    while (next_arrival < arrivals.size() && static_cast<double>(arrivals[next_arrival].dispatched_time) <= now)
      pending.push_back(arrivals[next_arrival++]);
    if (pending.empty()) {
      if (next_arrival == arrivals.size()) break;
      now = static_cast<double>(arrivals[next_arrival].dispatched_time);
      continue;
    }
    const std::size_t k = choose_next(cfg, c, w.aois.size(), pending, loc, aoi, now);
    Package p = pending[k];
    pending.erase(pending.begin() + static_cast<std::ptrdiff_t>(k));
    now += haversine_m(loc, p.loc) / plan.speed_mps + cfg.service_time_s;
    EpochSeconds fin = std::llround(now);
    if (fin <= last_finish) fin = last_finish + 1;
    now = std::max(now, static_cast<double>(fin));
    p.finish_time = fin;
    last_finish = fin;
    loc = p.loc;
    aoi = p.aoi;
    rec.packages.push_back(std::move(p));
  }
  return rec;
}

inline DailyRecord simulate_day(const World& w, std::size_t courier, std::int64_t date) {
  return run_policy(w, courier, date, plan_day(w, courier, date));
}

inline std::vector<DailyRecord> simulate_all(const World& w) {
  std::vector<DailyRecord> out;
  for (std::size_t d = 0; d < w.config.days; ++d)
    for (std::size_t c = 0; c < w.couriers.size(); ++c) out.push_back(simulate_day(w, c, w.config.start_day + static_cast<std::int64_t>(d)));
  return out;
}

struct DatasetStats {
  std::size_t records = 0;
  std::size_t deliveries = 0;
  std::size_t pickups = 0;
  std::size_t late = 0;  // finished after promised_time
  double pickup_share() const { return deliveries + pickups ? static_cast<double>(pickups) / static_cast<double>(deliveries + pickups) : 0.0; }
  double late_rate() const { return deliveries + pickups ? static_cast<double>(late) / static_cast<double>(deliveries + pickups) : 0.0; }
};

inline DatasetStats dataset_stats(const std::vector<DailyRecord>& records) {
  DatasetStats s;
  s.records = records.size();
  for (const auto& r : records)
    for (const auto& p : r.packages) {
      (p.is_delivery() ? s.deliveries : s.pickups) += 1;
      if (p.finish_time && *p.finish_time > p.promised_time) ++s.late;
    }
  return s;
}

struct DateSplit {
  std::vector<DailyRecord> train, val, test;
};

// 6:2:2 split over distinct dates in ascending order.
inline DateSplit split_by_date(const std::vector<DailyRecord>& records) {
  std::vector<std::int64_t> dates;
  for (const auto& r : records) dates.push_back(r.date);
  std::sort(dates.begin(), dates.end());
  dates.erase(std::unique(dates.begin(), dates.end()), dates.end());
  if (dates.size() < 10) throw ConfigError("need at least 10 distinct dates for a 6:2:2 split, got " + std::to_string(dates.size()));
  const auto n = static_cast<double>(dates.size());
  const auto n_train = static_cast<std::size_t>(std::llround(0.6 * n));
  const auto n_val = static_cast<std::size_t>(std::llround(0.2 * n));
  const std::int64_t last_train = dates[n_train - 1];
  const std::int64_t last_val = dates[n_train + n_val - 1];
  DateSplit s;
  for (const auto& r : records) {
    if (r.date <= last_train) s.train.push_back(r);
    else if (r.date <= last_val) s.val.push_back(r);
    else s.test.push_back(r);
  }
  return s;
}

inline std::string stats_report(const DateSplit& split) {
  std::ostringstream os;
  os << "split,records,deliveries,pickups,pickup_share,late_rate\n";
  os.precision(6);
  for (auto [name, recs] : {std::pair{"train", &split.train}, std::pair{"val", &split.val}, std::pair{"test", &split.test}}) {
    const auto s = dataset_stats(*recs);
    os << name << ',' << s.records << ',' << s.deliveries << ',' << s.pickups << ',' << s.pickup_share() << ','
       << s.late_rate() << '\n';
  }
  return os.str();
}

// Writes train/val/test datasets, the AOI table, training-split mobility
// tensors and a stats report into `dir`.
inline DateSplit emit_dataset(const World& w, const std::vector<DailyRecord>& records, const std::string& dir) {
  DateSplit split = split_by_date(records);
  std::filesystem::create_directories(dir);
  save_dataset(dir + "/train.jsonl", split.train);
  save_dataset(dir + "/val.jsonl", split.val);
  save_dataset(dir + "/test.jsonl", split.test);
  save_aoi_table(dir + "/aoi.csv", w.aois);
  save_mobility(dir + "/mobility.bin", build_mobility(split.train, w.aois));
  std::ofstream(dir + "/stats.csv") << stats_report(split);
  return split;
}

}  // namespace transpdt
