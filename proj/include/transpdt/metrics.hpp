#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "transpdt/data.hpp"
#include "transpdt/errors.hpp"

namespace transpdt {

inline double rmse(const std::vector<double>& y, const std::vector<double>& yhat) {
  if (y.size() != yhat.size()) throw ContractError("rmse: length mismatch");
  if (y.empty()) throw MetricError("rmse of zero targets is undefined");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] - yhat[i]) * (y[i] - yhat[i]);
  return std::sqrt(s / static_cast<double>(y.size()));
}

inline double mae(const std::vector<double>& y, const std::vector<double>& yhat) {
  if (y.size() != yhat.size()) throw ContractError("mae: length mismatch");
  if (y.empty()) throw MetricError("mae of zero targets is undefined");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += std::abs(y[i] - yhat[i]);
  return s / static_cast<double>(y.size());
}

inline constexpr double kMapeFloorMinutes = 1.0;

struct MapeResult {
  double percent = 0.0;
  std::size_t used = 0;
  std::size_t filtered = 0;
};

// Mean |y - ŷ| / y in percent over targets of at least `floor` minutes.
inline MapeResult mape_detail(const std::vector<double>& y, const std::vector<double>& yhat,
                              double floor = kMapeFloorMinutes) {
  if (y.size() != yhat.size()) throw ContractError("mape: length mismatch");
  MapeResult r;
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] < floor) {
      ++r.filtered;
      continue;
    }
    s += std::abs(y[i] - yhat[i]) / y[i];
    ++r.used;
  }
  if (r.used == 0) throw MetricError("mape: every target is below the floor");
  r.percent = 100.0 * s / static_cast<double>(r.used);
  return r;
}

inline double mape(const std::vector<double>& y, const std::vector<double>& yhat) { return mape_detail(y, yhat).percent; }

// Position of every element in a permutation; throws unless `b` is a
// permutation of the same elements as `a`.
inline std::map<std::size_t, std::size_t> positions_checked(const std::vector<std::size_t>& a,
                                                            const std::vector<std::size_t>& b) {
  if (a.size() != b.size()) throw ContractError("routes differ in length");
  std::map<std::size_t, std::size_t> pos;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!pos.emplace(a[i], i).second) throw ContractError("route repeats an element");
  std::set<std::size_t> seen;
  for (auto x : b)
    if (!pos.count(x) || !seen.insert(x).second) throw ContractError("routes are not permutations of the same set");
  return pos;
}

// Mean absolute displacement of each package between the two routes.
inline double lmd(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& pred) {
  const auto pos_true = positions_checked(truth, pred);
  if (truth.empty()) throw MetricError("lmd of an empty route is undefined");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    s += std::abs(static_cast<double>(pos_true.at(pred[i])) - static_cast<double>(i));
  return s / static_cast<double>(truth.size());
}

// |first k of truth ∩ first k of pred| / k, with k capped at the route length.
inline double hr_at_k(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& pred, std::size_t k) {
  if (k == 0) throw ContractError("hr_at_k needs k >= 1");
  const std::size_t kk = std::min({k, truth.size(), pred.size()});
  if (kk == 0) throw MetricError("hr_at_k of an empty route is undefined");
  std::set<std::size_t> head(truth.begin(), truth.begin() + static_cast<std::ptrdiff_t>(kk));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < kk; ++i) hits += head.count(pred[i]);
  return static_cast<double>(hits) / static_cast<double>(kk);
}

// Historical mean offset keyed by (AOI, slot of t), global mean fallback.
class AvgBaseline {
 public:
  static AvgBaseline fit(const std::vector<Sample>& train) {
    AvgBaseline b;
    double total = 0.0;
    std::size_t n = 0;
    std::map<std::pair<std::size_t, int>, std::pair<double, std::size_t>> acc;
    for (const auto& s : train)
      for (std::size_t i = 0; i < s.pending.size(); ++i) {
        if (i >= s.truth_offsets.size() || !s.truth_offsets[i]) continue;
        auto& a = acc[{s.pending[i].aoi, time_slot(s.t)}];
        a.first += *s.truth_offsets[i];
        a.second += 1;
        total += *s.truth_offsets[i];
        ++n;
      }
    if (n == 0) throw MetricError("AVG baseline: training split has no delivery offsets");
    b.global_ = total / static_cast<double>(n);
    for (const auto& [k, v] : acc) b.table_[k] = v.first / static_cast<double>(v.second);
    return b;
  }

  double predict(std::size_t aoi, int slot) const {
    auto it = table_.find({aoi, slot});
    return it == table_.end() ? global_ : it->second;
  }
  double global_mean() const { return global_; }

 private:
  double global_ = 0.0;
  std::map<std::pair<std::size_t, int>, double> table_;
};

// Pending indices sorted by promised time, ties by index.
inline std::vector<std::size_t> nearest_deadline_route(const std::vector<Package>& pending,
                                                       const std::vector<std::size_t>& candidates) {
  std::vector<std::size_t> r = candidates;
  std::stable_sort(r.begin(), r.end(), [&](std::size_t a, std::size_t b) {
    return pending[a].promised_time < pending[b].promised_time;
  });
  return r;
}

struct EvalResult {
  double rmse = 0.0;
  double mape = 0.0;
  double lmd = 0.0;
  double hr1 = 0.0;  // percent
  double hr3 = 0.0;  // percent
  std::size_t time_count = 0;
  std::size_t mape_count = 0;
  std::size_t mape_filtered = 0;
  std::size_t route_count = 0;
  double inference_seconds = 0.0;
};

// Per-sample predictions in pending-index space.
struct SamplePrediction {
  std::vector<std::size_t> route;  // predicted order over the evaluated pending indices
  std::vector<std::size_t> truth_route;  // true order over the same indices
  std::vector<std::pair<double, double>> times;  // (truth, predicted) minutes, deliveries only
};

// Time metrics pool every delivery; route metrics average per sample.
inline EvalResult aggregate_eval(const std::vector<SamplePrediction>& preds) {
  EvalResult r;
  std::vector<double> y, yhat;
  double lmd_sum = 0.0, hr1 = 0.0, hr3 = 0.0;
  for (const auto& p : preds) {
    for (const auto& [t, h] : p.times) y.push_back(t), yhat.push_back(h);
    if (!p.truth_route.empty()) {
      lmd_sum += lmd(p.truth_route, p.route);
      hr1 += hr_at_k(p.truth_route, p.route, 1);
      hr3 += hr_at_k(p.truth_route, p.route, 3);
      ++r.route_count;
    }
  }
  r.time_count = y.size();
  if (!y.empty()) {
    r.rmse = rmse(y, yhat);
    const auto m = mape_detail(y, yhat);
    r.mape = m.percent;
    r.mape_count = m.used;
    r.mape_filtered = m.filtered;
  }
  if (r.route_count) {
    const double n = static_cast<double>(r.route_count);
    r.lmd = lmd_sum / n;
    r.hr1 = 100.0 * hr1 / n;
    r.hr3 = 100.0 * hr3 / n;
  }
  return r;
}

}  // namespace transpdt
