#pragma once

// Package/sample schema, dataset I/O and route splitting at newly dispatched pickups.
//
// Dataset file (UTF-8, line-delimited JSON):
//   line 1: {"format":"transpdt-dataset","version":1}
//   then one package per line with exactly these fields:
//     courier_id, package_id, kind ("delivery"|"pickup"), lat, lon, aoi,
//     dispatched_time, promised_time, finish_time (null while pending),
//     weight, volume, courier_profile {...}, weather {...}, holiday
// All timestamps are epoch seconds, interpreted on the UTC clock. Packages are
// grouped into daily records by (courier_id, UTC day of dispatched_time).
//
// AOI table (CSV):
//   line 1: # transpdt-aoi v1
//   line 2: aoi_index,lat,lon
//   then one row per AOI, indices 0..N-1 in order.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <variant>
#include <vector>

#include "json.hpp"
#include "transpdt/errors.hpp"
#include "transpdt/geo.hpp"

namespace transpdt {

using Json = nlohmann::json;
using EpochSeconds = std::int64_t;

inline constexpr int kDatasetVersion = 1;
inline constexpr int kTimeSlots = 12;

enum class PackageKind { Delivery, Pickup };

inline const char* to_string(PackageKind k) { return k == PackageKind::Delivery ? "delivery" : "pickup"; }

inline std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

inline std::int64_t day_index(EpochSeconds t) { return floor_div(t, 86400); }
inline int hour_of_day(EpochSeconds t) { return static_cast<int>((t - day_index(t) * 86400) / 3600); }
// Two-hour slot of the day, 0..11.
inline int time_slot(EpochSeconds t) { return hour_of_day(t) / 2; }
// 0 = Monday. Day 0 of the epoch was a Thursday.
inline int day_of_week(EpochSeconds t) { return static_cast<int>(((day_index(t) + 3) % 7 + 7) % 7); }

// Side attributes from the courier_profile / weather objects: numbers or category labels.
using AttrValue = std::variant<double, std::string>;
using AttrMap = std::map<std::string, AttrValue>;

struct DayContext {
  AttrMap courier_profile;
  AttrMap weather;
  bool holiday = false;
  bool operator==(const DayContext&) const = default;
};

struct Package {
  std::string id;
  PackageKind kind = PackageKind::Delivery;
  LatLon loc;
  std::size_t aoi = 0;
  EpochSeconds dispatched_time = 0;
  EpochSeconds promised_time = 0;
  std::optional<EpochSeconds> finish_time;
  double weight = 0.0;
  double volume = 0.0;

  bool is_delivery() const { return kind == PackageKind::Delivery; }
  bool operator==(const Package&) const = default;
};

struct DailyRecord {
  std::string courier_id;
  std::int64_t date = 0;  // UTC day index
  DayContext context;
  std::vector<Package> packages;  // completed ones sorted by finish_time, then pending
};

// One prediction instance at query time t.
struct Sample {
  std::string courier_id;
  std::int64_t date = 0;
  EpochSeconds t = 0;
  DayContext context;
  std::vector<Package> history;  // completed, ascending finish_time, all <= t
  std::vector<Package> pending;
  std::vector<std::size_t> truth_perm;  // pending indices in completion order
  std::vector<std::optional<double>> truth_offsets;  // minutes from t, deliveries only

  bool has_truth() const { return !truth_perm.empty(); }
  std::size_t n_deliveries() const {
    return static_cast<std::size_t>(std::count_if(pending.begin(), pending.end(), [](const Package& p) { return p.is_delivery(); }));
  }
  std::size_t n_pickups() const { return pending.size() - n_deliveries(); }
};

struct AoiTable {
  std::vector<LatLon> centroids;
  std::size_t size() const { return centroids.size(); }
};

// ---------------------------------------------------------------------------
// JSON conversion

inline AttrMap attrs_from_json(const Json& j) {
  AttrMap m;
  if (j.is_null()) return m;
  if (!j.is_object()) throw ParseError("expected an object of attributes");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.value().is_number())
      m[it.key()] = it.value().get<double>();
    else if (it.value().is_string())
      m[it.key()] = it.value().get<std::string>();
    else if (it.value().is_boolean())
      m[it.key()] = it.value().get<bool>() ? 1.0 : 0.0;
    else
      throw ParseError("attribute '" + it.key() + "' must be a number, string or boolean");
  }
  return m;
}

inline Json attrs_to_json(const AttrMap& m) {
  Json j = Json::object();
  for (const auto& [k, v] : m) {
    if (std::holds_alternative<double>(v))
      j[k] = std::get<double>(v);
    else
      j[k] = std::get<std::string>(v);
  }
  return j;
}

inline PackageKind kind_from_string(const std::string& s) {
  if (s == "delivery") return PackageKind::Delivery;
  if (s == "pickup") return PackageKind::Pickup;
  throw ParseError("unknown package kind '" + s + "'");
}

// Package fields only; the courier/day fields are handled by the caller.
inline Package package_from_json(const Json& j) {
  Package p;
  p.id = j.at("package_id").get<std::string>();
  p.kind = kind_from_string(j.at("kind").get<std::string>());
  p.loc = {j.at("lat").get<double>(), j.at("lon").get<double>()};
  const auto aoi = j.at("aoi").get<std::int64_t>();
  if (aoi < 0) throw ParseError("aoi must be non-negative");
  p.aoi = static_cast<std::size_t>(aoi);
  p.dispatched_time = j.at("dispatched_time").get<EpochSeconds>();
  p.promised_time = j.at("promised_time").get<EpochSeconds>();
  const auto& f = j.at("finish_time");
  if (!f.is_null()) p.finish_time = f.get<EpochSeconds>();
  p.weight = j.at("weight").get<double>();
  p.volume = j.at("volume").get<double>();
  return p;
}

inline Json package_to_json(const Package& p) {
  Json j;
  j["package_id"] = p.id;
  j["kind"] = to_string(p.kind);
  j["lat"] = p.loc.lat;
  j["lon"] = p.loc.lon;
  j["aoi"] = p.aoi;
  j["dispatched_time"] = p.dispatched_time;
  j["promised_time"] = p.promised_time;
  j["finish_time"] = p.finish_time ? Json(*p.finish_time) : Json(nullptr);
  j["weight"] = p.weight;
  j["volume"] = p.volume;
  return j;
}

inline std::vector<std::string> package_violations(const Package& p, std::size_t n_aoi) {
  std::vector<std::string> v;
  if (p.promised_time < p.dispatched_time) v.push_back("promised_time < dispatched_time");
  if (p.finish_time && *p.finish_time < p.dispatched_time) v.push_back("finish_time < dispatched_time");
  if (n_aoi > 0 && p.aoi >= n_aoi) v.push_back("aoi " + std::to_string(p.aoi) + " >= N=" + std::to_string(n_aoi));
  if (p.weight < 0.0 || p.volume < 0.0) v.push_back("negative weight or volume");
  return v;
}

// ---------------------------------------------------------------------------
// Dataset files

inline Json dataset_header() { return Json{{"format", "transpdt-dataset"}, {"version", kDatasetVersion}}; }

// Parses a dataset file into daily records ordered by (date, courier_id).
// Malformed lines throw ParseError immediately; invariant violations are
// collected and reported together in a ValidationError. `n_aoi` = 0 skips the
// AOI range check.
inline std::vector<DailyRecord> parse_dataset(std::istream& is, std::size_t n_aoi = 0, const std::string& path = "<stream>") {
  std::map<std::pair<std::int64_t, std::string>, DailyRecord> days;
  std::vector<std::string> problems;
  std::string line;
  std::size_t lineno = 0;
  bool header_seen = false;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::parse_error& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": malformed JSON: " + e.what());
    }
    if (!header_seen) {
      header_seen = true;
      if (j.contains("format")) {
        if (j.value("format", "") != "transpdt-dataset" || j.value("version", 0) != kDatasetVersion)
          throw ParseError(path + ":1: unsupported dataset header " + line);
        continue;
      }
      throw ParseError(path + ":1: missing dataset header line");
    }
    Package p;
    std::string courier;
    DayContext ctx;
    try {
      courier = j.at("courier_id").get<std::string>();
      p = package_from_json(j);
      ctx.courier_profile = attrs_from_json(j.at("courier_profile"));
      ctx.weather = attrs_from_json(j.at("weather"));
      ctx.holiday = j.at("holiday").get<bool>();
    } catch (const Json::exception& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    for (const auto& v : package_violations(p, n_aoi))
      problems.push_back("line " + std::to_string(lineno) + " (" + p.id + "): " + v);
    auto key = std::make_pair(day_index(p.dispatched_time), courier);
    auto [it, fresh] = days.try_emplace(key);
    if (fresh) {
      it->second.courier_id = courier;
      it->second.date = key.first;
      it->second.context = std::move(ctx);
    }
    it->second.packages.push_back(std::move(p));
  }
  if (!problems.empty()) {
    std::string msg = path + ": " + std::to_string(problems.size()) + " invalid package(s):";
    for (const auto& s : problems) msg += "\n  " + s;
    throw ValidationError(msg);
  }
  std::vector<DailyRecord> out;
  out.reserve(days.size());
  for (auto& [key, rec] : days) {
    std::stable_sort(rec.packages.begin(), rec.packages.end(), [](const Package& a, const Package& b) {
      if (a.finish_time.has_value() != b.finish_time.has_value()) return a.finish_time.has_value();
      return a.finish_time.value_or(0) < b.finish_time.value_or(0);
    });
    out.push_back(std::move(rec));
  }
  return out;
}

inline std::vector<DailyRecord> load_dataset(const std::string& path, std::size_t n_aoi = 0) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open dataset: " + path);
  return parse_dataset(is, n_aoi, path);
}

inline void write_dataset(std::ostream& os, const std::vector<DailyRecord>& records) {
  os << dataset_header().dump() << '\n';
  for (const auto& r : records) {
    const Json profile = attrs_to_json(r.context.courier_profile);
    const Json weather = attrs_to_json(r.context.weather);
    for (const auto& p : r.packages) {
      Json j = package_to_json(p);
      j["courier_id"] = r.courier_id;
      j["courier_profile"] = profile;
      j["weather"] = weather;
      j["holiday"] = r.context.holiday;
      os << j.dump() << '\n';
    }
  }
}

inline void save_dataset(const std::string& path, const std::vector<DailyRecord>& records) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write dataset: " + path);
  write_dataset(os, records);
}

inline void write_aoi_table(std::ostream& os, const AoiTable& t) {
  os << "# transpdt-aoi v1\naoi_index,lat,lon\n";
  os.precision(17);
  for (std::size_t i = 0; i < t.size(); ++i) os << i << ',' << t.centroids[i].lat << ',' << t.centroids[i].lon << '\n';
}

inline AoiTable read_aoi_table(std::istream& is, const std::string& path = "<stream>") {
  std::string line;
  if (!std::getline(is, line) || line.rfind("# transpdt-aoi v1", 0) != 0)
    throw ParseError(path + ":1: missing '# transpdt-aoi v1' header");
  if (!std::getline(is, line) || line.rfind("aoi_index,lat,lon", 0) != 0)
    throw ParseError(path + ":2: missing column header");
  AoiTable t;
  std::size_t lineno = 2;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string a, b, c;
    if (!std::getline(ss, a, ',') || !std::getline(ss, b, ',') || !std::getline(ss, c))
      throw ParseError(path + ":" + std::to_string(lineno) + ": expected aoi_index,lat,lon");
    try {
      if (std::stoul(a) != t.size()) throw ParseError(path + ":" + std::to_string(lineno) + ": AOI indices must be consecutive");
      t.centroids.push_back({std::stod(b), std::stod(c)});
    } catch (const std::logic_error&) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": bad number");
    }
  }
  return t;
}

inline void save_aoi_table(const std::string& path, const AoiTable& t) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write AOI table: " + path);
  write_aoi_table(os, t);
}

inline AoiTable load_aoi_table(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open AOI table: " + path);
  return read_aoi_table(is, path);
}

// Nearest AOI centroid by haversine; used for AOIs outside the training vocabulary.
inline std::size_t nearest_aoi(const AoiTable& t, LatLon loc) {
  if (t.size() == 0) throw ContractError("empty AOI table");
  std::size_t best = 0;
  double best_d = haversine_m(loc, t.centroids[0]);
  for (std::size_t i = 1; i < t.size(); ++i) {
    const double d = haversine_m(loc, t.centroids[i]);
    if (d < best_d) best = i, best_d = d;
  }
  return best;
}

// ---------------------------------------------------------------------------
// Ingestion helpers

// Merges packages of one courier-day that share AOI, kind, location and
// promised time. Weight and volume are summed; the earliest-finished member
// keeps its identity.
inline DailyRecord aggregate_packages(const DailyRecord& day) {
  DailyRecord out = day;
  out.packages.clear();
  std::map<std::tuple<std::size_t, int, double, double, EpochSeconds>, std::size_t> seen;
  for (const auto& p : day.packages) {
    auto key = std::make_tuple(p.aoi, static_cast<int>(p.kind), p.loc.lat, p.loc.lon, p.promised_time);
    auto it = seen.find(key);
    if (it == seen.end()) {
      seen.emplace(key, out.packages.size());
      out.packages.push_back(p);
      continue;
    }
    auto& m = out.packages[it->second];
    m.weight += p.weight;
    m.volume += p.volume;
    m.dispatched_time = std::min(m.dispatched_time, p.dispatched_time);
    if (p.finish_time && (!m.finish_time || *p.finish_time < *m.finish_time)) m.finish_time = p.finish_time;
  }
  std::stable_sort(out.packages.begin(), out.packages.end(), [](const Package& a, const Package& b) {
    if (a.finish_time.has_value() != b.finish_time.has_value()) return a.finish_time.has_value();
    return a.finish_time.value_or(0) < b.finish_time.value_or(0);
  });
  return out;
}

inline std::vector<Package> completed_in_order(const DailyRecord& day) {
  std::vector<Package> done;
  for (const auto& p : day.packages)
    if (p.finish_time) done.push_back(p);
  std::stable_sort(done.begin(), done.end(), [](const Package& a, const Package& b) { return *a.finish_time < *b.finish_time; });
  return done;
}

// Start of the courier's day: deliveries are pre-allocated, so the earliest
// delivery dispatch marks it (earliest of any package when there are none).
inline EpochSeconds day_start(const DailyRecord& day) {
  std::optional<EpochSeconds> any, deliv;
  for (const auto& p : day.packages) {
    any = any ? std::min(*any, p.dispatched_time) : p.dispatched_time;
    if (p.is_delivery()) deliv = deliv ? std::min(*deliv, p.dispatched_time) : p.dispatched_time;
  }
  return deliv ? *deliv : any.value_or(0);
}

// ---------------------------------------------------------------------------
// Route splitting

struct RouteSegment {
  std::vector<Package> packages;  // completion order
  EpochSeconds start = 0;  // first query time of the segment
};

// Cuts the completion sequence immediately before every pickup that was
// dispatched after the day started and after at least one completion.
inline std::vector<RouteSegment> split_segments(const DailyRecord& day) {
  const auto done = completed_in_order(day);
  std::vector<RouteSegment> segs;
  if (done.empty()) return segs;
  const EpochSeconds start = day_start(day);
  segs.push_back({{}, start});
  for (std::size_t i = 0; i < done.size(); ++i) {
    const auto& p = done[i];
    const bool cut = i > 0 && p.kind == PackageKind::Pickup && p.dispatched_time > start &&
                     *done.front().finish_time < p.dispatched_time;
    if (cut && !segs.back().packages.empty()) {
      const EpochSeconds t0 = std::max(p.dispatched_time, *done[i - 1].finish_time);
      segs.push_back({{}, t0});
    }
    segs.back().packages.push_back(p);
  }
  return segs;
}

struct SampleOptions {
  std::size_t stride = 1;  // take a query point every `stride` completions
  std::size_t min_pending = 1;
};

// Builds samples from each route segment. Query times are the segment start
// and the finish times inside the segment (before the next segment starts);
// the pending set holds segment packages dispatched by t and not yet finished.
inline std::vector<Sample> split_routes(const DailyRecord& day, const SampleOptions& opt = {}) {
  const auto segs = split_segments(day);
  const auto done = completed_in_order(day);
  std::vector<Sample> out;
  for (std::size_t s = 0; s < segs.size(); ++s) {
    const auto& seg = segs[s];
    const EpochSeconds next_start =
        s + 1 < segs.size() ? segs[s + 1].start : std::numeric_limits<EpochSeconds>::max();
    std::vector<EpochSeconds> queries{seg.start};
    for (std::size_t k = 0; k + 1 < seg.packages.size(); ++k)
      if ((k + 1) % std::max<std::size_t>(1, opt.stride) == 0) queries.push_back(*seg.packages[k].finish_time);
    for (EpochSeconds t : queries) {
      if (t >= next_start) break;
      Sample smp;
      smp.courier_id = day.courier_id;
      smp.date = day.date;
      smp.t = t;
      smp.context = day.context;
      for (const auto& p : done)
        if (*p.finish_time <= t) smp.history.push_back(p);
      for (const auto& p : seg.packages)
        if (*p.finish_time > t && p.dispatched_time <= t) smp.pending.push_back(p);
      if (smp.pending.size() < std::max<std::size_t>(1, opt.min_pending)) continue;
      // Pending is already in completion order.
      for (std::size_t i = 0; i < smp.pending.size(); ++i) {
        smp.truth_perm.push_back(i);
        const auto& p = smp.pending[i];
        smp.truth_offsets.push_back(p.is_delivery() ? std::optional<double>((*p.finish_time - t) / 60.0) : std::nullopt);
      }
      out.push_back(std::move(smp));
    }
  }
  return out;
}

// Reorders a sample's pending set; truth indices follow the packages.
// `order[i]` is the old index placed at new position i.
inline Sample permute_pending(const Sample& s, const std::vector<std::size_t>& order) {
  Sample out = s;
  std::vector<std::size_t> new_pos(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    out.pending[i] = s.pending[order[i]];
    new_pos[order[i]] = i;
    if (!s.truth_offsets.empty()) out.truth_offsets[i] = s.truth_offsets[order[i]];
  }
  for (auto& idx : out.truth_perm) idx = new_pos[idx];
  return out;
}

// Drops ground truth; what a prediction request carries.
inline Sample without_truth(Sample s) {
  s.truth_perm.clear();
  s.truth_offsets.clear();
  for (auto& p : s.pending) p.finish_time.reset();
  return s;
}

// Checks the Sample invariants; returns human-readable violations.
inline std::vector<std::string> sample_violations(const Sample& s) {
  std::vector<std::string> v;
  for (std::size_t i = 1; i < s.history.size(); ++i)
    if (!s.history[i].finish_time || !s.history[i - 1].finish_time || *s.history[i].finish_time < *s.history[i - 1].finish_time)
      v.push_back("history not sorted by finish_time");
  for (const auto& p : s.history)
    if (!p.finish_time || *p.finish_time > s.t) v.push_back("history package " + p.id + " finished after t");
  for (const auto& p : s.pending)
    if (p.dispatched_time > s.t) v.push_back("pending package " + p.id + " dispatched after t");
  if (s.has_truth()) {
    std::vector<bool> seen(s.pending.size(), false);
    if (s.truth_perm.size() != s.pending.size()) v.push_back("truth_perm length differs from pending");
    for (auto i : s.truth_perm) {
      if (i >= s.pending.size() || seen[i]) {
        v.push_back("truth_perm is not a bijection");
        break;
      }
      seen[i] = true;
    }
    for (std::size_t i = 0; i < s.truth_offsets.size() && i < s.pending.size(); ++i) {
      if (s.pending[i].is_delivery() != s.truth_offsets[i].has_value()) v.push_back("offset presence does not match kind");
      if (s.truth_offsets[i] && *s.truth_offsets[i] <= 0.0) v.push_back("non-positive offset for " + s.pending[i].id);
    }
  }
  return v;
}

}  // namespace transpdt
