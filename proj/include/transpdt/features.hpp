#pragma once

// Per-package feature rows with padding masks.
//
// Row layout: [kind one-hot(2) | z-scored numerics | promised-time slot one-hot(12) |
//              day-of-week one-hot(7) | holiday(1) | categorical one-hots (levels + "other")]
// Numerics: lat, lon, weight, volume, remaining minutes to promise, meters from
// the courier's position at t, then numeric courier_profile.* and weather.* keys.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "transpdt/autodiff.hpp"
#include "transpdt/data.hpp"

namespace transpdt {

struct CategoricalVocab {
  std::string source;  // "courier_profile" or "weather"
  std::string key;
  std::vector<std::string> levels;  // a reserved "other" slot follows them
};

struct FeatureStats {
  std::vector<std::string> numeric_names;
  std::vector<double> mean;
  std::vector<double> stddev;
  std::vector<bool> kept;  // false for zero-variance features
  std::vector<std::string> dropped;
  std::vector<std::string> profile_numeric;
  std::vector<std::string> weather_numeric;
  std::vector<CategoricalVocab> categorical;

  std::size_t kept_numeric() const { return static_cast<std::size_t>(std::count(kept.begin(), kept.end(), true)); }
  std::size_t categorical_width() const {
    std::size_t w = 0;
    for (const auto& c : categorical) w += c.levels.size() + 1;
    return w;
  }
  // D_m, the feature-row width.
  std::size_t width() const { return 2 + kept_numeric() + kTimeSlots + 7 + 1 + categorical_width(); }
};

struct EncodedSample {
  Tensor history;  // L_h × D_m
  Tensor pending;  // L_f × D_m
  Mask history_mask;
  Mask pending_mask;
  int slot = 0;  // floor(hour(t) / 2)
  std::vector<std::size_t> pending_index;  // row -> index into Sample::pending
  std::vector<std::size_t> pending_aoi;  // row -> AOI (0 for padding)
  std::vector<PackageKind> pending_kind;
  std::size_t unknown_levels = 0;  // categorical values mapped to "other"

  std::size_t n_pending() const { return count_valid(pending_mask); }
  std::size_t n_history() const { return count_valid(history_mask); }
};

// Ground truth re-expressed over encoded pending rows.
struct EncodedTruth {
  std::vector<std::size_t> route;  // rows in completion order
  std::vector<std::optional<double>> offsets;  // per row, deliveries only
};

namespace detail {

// Courier position at t: the last completion, or the centroid of the pending set.
inline LatLon courier_position(const Sample& s) {
  if (!s.history.empty()) return s.history.back().loc;
  LatLon c{0.0, 0.0};
  if (s.pending.empty()) return c;
  for (const auto& p : s.pending) c.lat += p.loc.lat, c.lon += p.loc.lon;
  c.lat /= static_cast<double>(s.pending.size());
  c.lon /= static_cast<double>(s.pending.size());
  return c;
}

inline std::optional<double> numeric_attr(const AttrMap& m, const std::string& k) {
  auto it = m.find(k);
  if (it == m.end() || !std::holds_alternative<double>(it->second)) return std::nullopt;
  return std::get<double>(it->second);
}

// Raw (unnormalized) numeric features; nullopt where an attribute is missing.
inline std::vector<std::optional<double>> raw_numeric(const Package& p, const Sample& s, LatLon courier,
                                                      const FeatureStats& st) {
  std::vector<std::optional<double>> v{p.loc.lat, p.loc.lon, p.weight, p.volume,
                                       static_cast<double>(p.promised_time - s.t) / 60.0, haversine_m(courier, p.loc)};
  for (const auto& k : st.profile_numeric) v.push_back(numeric_attr(s.context.courier_profile, k));
  for (const auto& k : st.weather_numeric) v.push_back(numeric_attr(s.context.weather, k));
  return v;
}

}  // namespace detail

// The last `max_history` completions, chronological.
inline std::vector<std::size_t> kept_history(const Sample& s, std::size_t max_history) {
  const std::size_t n = s.history.size();
  const std::size_t first = n > max_history ? n - max_history : 0;
  std::vector<std::size_t> idx(n - first);
  std::iota(idx.begin(), idx.end(), first);
  return idx;
}

// The `max_pending` packages with the earliest promised time (ties: lower
// index), listed in their original order.
inline std::vector<std::size_t> kept_pending(const Sample& s, std::size_t max_pending) {
  std::vector<std::size_t> idx(s.pending.size());
  std::iota(idx.begin(), idx.end(), 0);
  if (idx.size() <= max_pending) return idx;
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return s.pending[a].promised_time < s.pending[b].promised_time; });
  idx.resize(max_pending);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// Fits normalization statistics and categorical vocabularies on training samples.
inline FeatureStats fit_feature_stats(const std::vector<Sample>& train, std::size_t max_history, std::size_t max_pending) {
  FeatureStats st;
  std::set<std::string> prof_num, weath_num;
  std::map<std::pair<std::string, std::string>, std::set<std::string>> cats;
  for (const auto& s : train) {
    for (const auto& [k, v] : s.context.courier_profile) {
      if (std::holds_alternative<double>(v)) prof_num.insert(k);
      else cats[{"courier_profile", k}].insert(std::get<std::string>(v));
    }
    for (const auto& [k, v] : s.context.weather) {
      if (std::holds_alternative<double>(v)) weath_num.insert(k);
      else cats[{"weather", k}].insert(std::get<std::string>(v));
    }
  }
  st.profile_numeric.assign(prof_num.begin(), prof_num.end());
  st.weather_numeric.assign(weath_num.begin(), weath_num.end());
  for (const auto& [key, levels] : cats) st.categorical.push_back({key.first, key.second, {levels.begin(), levels.end()}});
  st.numeric_names = {"lat", "lon", "weight", "volume", "remaining_min", "distance_m"};
  for (const auto& k : st.profile_numeric) st.numeric_names.push_back("courier_profile." + k);
  for (const auto& k : st.weather_numeric) st.numeric_names.push_back("weather." + k);

  const std::size_t nf = st.numeric_names.size();
  std::vector<double> sum(nf, 0.0), sumsq(nf, 0.0);
  std::vector<std::size_t> cnt(nf, 0);
  // Two passes (mean, then centered variance) for accuracy.
  auto for_each_row = [&](auto&& fn) {
    for (const auto& s : train) {
      const LatLon pos = detail::courier_position(s);
      for (auto i : kept_history(s, max_history)) fn(detail::raw_numeric(s.history[i], s, pos, st));
      for (auto i : kept_pending(s, max_pending)) fn(detail::raw_numeric(s.pending[i], s, pos, st));
    }
  };
  for_each_row([&](const std::vector<std::optional<double>>& r) {
    for (std::size_t f = 0; f < nf; ++f)
      if (r[f]) sum[f] += *r[f], ++cnt[f];
  });
  st.mean.assign(nf, 0.0);
  for (std::size_t f = 0; f < nf; ++f) st.mean[f] = cnt[f] ? sum[f] / static_cast<double>(cnt[f]) : 0.0;
  for_each_row([&](const std::vector<std::optional<double>>& r) {
    for (std::size_t f = 0; f < nf; ++f)
      if (r[f]) sumsq[f] += (*r[f] - st.mean[f]) * (*r[f] - st.mean[f]);
  });
  st.stddev.assign(nf, 0.0);
  st.kept.assign(nf, false);
  for (std::size_t f = 0; f < nf; ++f) {
    st.stddev[f] = cnt[f] ? std::sqrt(sumsq[f] / static_cast<double>(cnt[f])) : 0.0;
    // Relative threshold so constant columns with rounding noise still drop.
    const bool varies = st.stddev[f] > 1e-9 * std::max(1.0, std::abs(st.mean[f]));
    st.kept[f] = varies;
    if (!varies) st.dropped.push_back(st.numeric_names[f]);
  }
  return st;
}

inline std::size_t category_slot(const CategoricalVocab& v, const AttrMap& m, std::size_t& unknown) {
  auto it = m.find(v.key);
  if (it != m.end() && std::holds_alternative<std::string>(it->second)) {
    const auto& s = std::get<std::string>(it->second);
    auto pos = std::find(v.levels.begin(), v.levels.end(), s);
    if (pos != v.levels.end()) return static_cast<std::size_t>(pos - v.levels.begin());
  }
  ++unknown;
  return v.levels.size();
}

inline void encode_row(const Package& p, const Sample& s, LatLon courier, const FeatureStats& st, double* row,
                       std::size_t& unknown) {
  std::size_t c = 0;
  row[c + (p.is_delivery() ? 0 : 1)] = 1.0;
  c += 2;
  const auto raw = detail::raw_numeric(p, s, courier, st);
  for (std::size_t f = 0; f < raw.size(); ++f) {
    if (!st.kept[f]) continue;
    row[c++] = raw[f] ? (*raw[f] - st.mean[f]) / st.stddev[f] : 0.0;
  }
  row[c + static_cast<std::size_t>(time_slot(p.promised_time))] = 1.0;
  c += kTimeSlots;
  row[c + static_cast<std::size_t>(day_of_week(s.t))] = 1.0;
  c += 7;
  row[c++] = s.context.holiday ? 1.0 : 0.0;
  for (const auto& v : st.categorical) {
    const AttrMap& m = v.source == "weather" ? s.context.weather : s.context.courier_profile;
    row[c + category_slot(v, m, unknown)] = 1.0;
    c += v.levels.size() + 1;
  }
}

inline EncodedSample encode_features(const Sample& s, const FeatureStats& st, std::size_t max_history,
                                     std::size_t max_pending) {
  const std::size_t d = st.width();
  EncodedSample e;
  e.history = Tensor({max_history, d});
  e.pending = Tensor({max_pending, d});
  e.history_mask.assign(max_history, false);
  e.pending_mask.assign(max_pending, false);
  e.pending_aoi.assign(max_pending, 0);
  e.pending_kind.assign(max_pending, PackageKind::Delivery);
  e.slot = time_slot(s.t);
  const LatLon pos = detail::courier_position(s);
  std::size_t r = 0;
  for (auto i : kept_history(s, max_history)) {
    encode_row(s.history[i], s, pos, st, e.history.ptr() + r * d, e.unknown_levels);
    e.history_mask[r++] = true;
  }
  r = 0;
  for (auto i : kept_pending(s, max_pending)) {
    encode_row(s.pending[i], s, pos, st, e.pending.ptr() + r * d, e.unknown_levels);
    e.pending_mask[r] = true;
    e.pending_aoi[r] = s.pending[i].aoi;
    e.pending_kind[r] = s.pending[i].kind;
    e.pending_index.push_back(i);
    ++r;
  }
  return e;
}

inline EncodedTruth encoded_truth(const Sample& s, const EncodedSample& e) {
  if (!s.has_truth()) throw ContractError("sample carries no ground truth");
  std::vector<std::ptrdiff_t> row_of(s.pending.size(), -1);
  for (std::size_t r = 0; r < e.pending_index.size(); ++r) row_of[e.pending_index[r]] = static_cast<std::ptrdiff_t>(r);
  EncodedTruth t;
  t.offsets.assign(e.pending_mask.size(), std::nullopt);
  for (auto i : s.truth_perm)
    if (row_of[i] >= 0) t.route.push_back(static_cast<std::size_t>(row_of[i]));
  for (std::size_t r = 0; r < e.pending_index.size(); ++r) t.offsets[r] = s.truth_offsets[e.pending_index[r]];
  return t;
}

inline Json stats_to_json(const FeatureStats& st) {
  Json cats = Json::array();
  for (const auto& c : st.categorical) cats.push_back({{"source", c.source}, {"key", c.key}, {"levels", c.levels}});
  std::vector<int> kept(st.kept.begin(), st.kept.end());
  return Json{{"numeric_names", st.numeric_names}, {"mean", st.mean},
              {"stddev", st.stddev},               {"kept", kept},
              {"dropped", st.dropped},             {"profile_numeric", st.profile_numeric},
              {"weather_numeric", st.weather_numeric}, {"categorical", cats}};
}

inline FeatureStats stats_from_json(const Json& j) {
  FeatureStats st;
  st.numeric_names = j.at("numeric_names").get<std::vector<std::string>>();
  st.mean = j.at("mean").get<std::vector<double>>();
  st.stddev = j.at("stddev").get<std::vector<double>>();
  for (int k : j.at("kept").get<std::vector<int>>()) st.kept.push_back(k != 0);
  st.dropped = j.at("dropped").get<std::vector<std::string>>();
  st.profile_numeric = j.at("profile_numeric").get<std::vector<std::string>>();
  st.weather_numeric = j.at("weather_numeric").get<std::vector<std::string>>();
  for (const auto& c : j.at("categorical"))
    st.categorical.push_back({c.at("source").get<std::string>(), c.at("key").get<std::string>(),
                              c.at("levels").get<std::vector<std::string>>()});
  const std::size_t n = st.numeric_names.size();
  if (st.mean.size() != n || st.stddev.size() != n || st.kept.size() != n)
    throw ParseError("feature stats: column arrays differ in length");
  return st;
}

}  // namespace transpdt
