#pragma once

#include <string>
#include <utility>
#include <vector>

#include "transpdt/autodiff.hpp"
#include "transpdt/checkpoint.hpp"
#include "transpdt/data.hpp"

namespace transpdt {

inline constexpr double kMobilitySmoothing = 1e-6;

// Courier transition counts per two-hour slot and AOI-pair distances.
struct MobilityTensors {
  Tensor counts;  // 12 × N × N
  Tensor distance;  // N × N meters

  std::size_t n_aoi() const { return distance.rows(); }
  double count(std::size_t slot, std::size_t a, std::size_t b) const {
    const std::size_t n = n_aoi();
    return counts[(slot * n + a) * n + b];
  }
};

inline Tensor distance_matrix(const AoiTable& aois) {
  const std::size_t n = aois.size();
  Tensor d({n, n});
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b) {
      const double m = haversine_m(aois.centroids[a], aois.centroids[b]);
      d.at(a, b) = m;
      d.at(b, a) = m;
    }
  return d;
}

// Counts consecutive completion pairs a -> b, bucketed by the slot of the
// destination's finish time.
inline MobilityTensors build_mobility(const std::vector<DailyRecord>& history, const AoiTable& aois) {
  const std::size_t n = aois.size();
  if (n == 0) throw ContractError("build_mobility needs at least one AOI");
  MobilityTensors m{Tensor({static_cast<std::size_t>(kTimeSlots), n, n}), distance_matrix(aois)};
  for (const auto& day : history) {
    const auto done = completed_in_order(day);
    for (std::size_t i = 1; i < done.size(); ++i) {
      const std::size_t a = done[i - 1].aoi, b = done[i].aoi;
      if (a >= n || b >= n) throw ValidationError("package AOI outside the AOI table: " + done[i].id);
      const auto slot = static_cast<std::size_t>(time_slot(*done[i].finish_time));
      m.counts[(slot * n + a) * n + b] += 1.0;
    }
  }
  return m;
}

namespace detail {

inline void normalize_rows(Tensor& t, const Mask& mask) {
  const std::size_t n = mask.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (mask[j]) s += t.at(i, j) + kMobilitySmoothing;
    for (std::size_t j = 0; j < n; ++j) t.at(i, j) = mask[j] ? (t.at(i, j) + kMobilitySmoothing) / s : 0.0;
  }
}

}  // namespace detail

struct MobilitySlice {
  Tensor counts;  // L_f × L_f, row-normalized
  Tensor distance;  // L_f × L_f, row-normalized
};

// Gathers rows/columns for the pending AOIs, then row-normalizes with additive
// smoothing. Padded rows and columns are zero.
inline MobilitySlice slice_mobility(const MobilityTensors& m, const std::vector<std::size_t>& pending_aoi,
                                    const Mask& pending_mask, int slot) {
  if (slot < 0 || slot >= kTimeSlots) throw ContractError("time slot out of range: " + std::to_string(slot));
  const std::size_t lf = pending_aoi.size();
  if (pending_mask.size() != lf) throw DimensionError("slice_mobility: mask and AOI list differ in length");
  const std::size_t n = m.n_aoi();
  MobilitySlice s{Tensor({lf, lf}), Tensor({lf, lf})};
  for (std::size_t i = 0; i < lf; ++i) {
    if (!pending_mask[i]) continue;
    if (pending_aoi[i] >= n) throw ValidationError("pending AOI outside the mobility tensors");
    for (std::size_t j = 0; j < lf; ++j) {
      if (!pending_mask[j]) continue;
      s.counts.at(i, j) = m.count(static_cast<std::size_t>(slot), pending_aoi[i], pending_aoi[j]);
      s.distance.at(i, j) = m.distance.at(pending_aoi[i], pending_aoi[j]);
    }
  }
  detail::normalize_rows(s.counts, pending_mask);
  detail::normalize_rows(s.distance, pending_mask);
  return s;
}

inline void save_mobility(const std::string& path, const MobilityTensors& m) {
  save_tensors(path, {{"mobility.counts", m.counts}, {"mobility.distance", m.distance}});
}

inline MobilityTensors load_mobility(const std::string& path) {
  auto entries = load_tensors(path);
  MobilityTensors m;
  bool have_c = false, have_d = false;
  for (auto& [name, t] : entries) {
    if (name == "mobility.counts") m.counts = std::move(t), have_c = true;
    else if (name == "mobility.distance") m.distance = std::move(t), have_d = true;
  }
  if (!have_c || !have_d) throw ParseError("mobility file lacks counts or distance: " + path);
  const std::size_t n = m.distance.rows();
  if (m.distance.shape() != Shape{n, n} || m.counts.shape() != Shape{static_cast<std::size_t>(kTimeSlots), n, n})
    throw ParseError("mobility tensors have inconsistent shapes: " + path);
  return m;
}

}  // namespace transpdt
