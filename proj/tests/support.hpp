#pragma once

// Shared helpers for the test and acceptance binaries.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "transpdt/serve.hpp"

namespace transpdt::testing {

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t kinks = 0;  // elements skipped because the loss is not smooth there
  std::string worst;  // parameter holding the largest error
};

inline double rel_error(double a, double n, double floor = 1e-6) {
  return std::abs(a - n) / std::max({floor, std::abs(a), std::abs(n)});
}

// Compares tape gradients of `loss` with central differences over every
// parameter element. An element is skipped as a kink when its one-sided
// differences disagree, which only happens next to a relu/max switch.
// Relative errors use max(|analytic|, |numeric|, floor) as denominator, with
// floor raised to loss_floor·|loss| when that is larger: round-off in the
// differences grows with the loss value.
inline GradCheck check_gradients(ParameterStore& store, const std::function<Var(Tape&)>& loss, double h = 1e-5,
                                 double floor = 1e-6, double loss_floor = 0.0) {
  GradientSet grads(store);
  {
    Tape tape(true);
    tape.backward(loss(tape), grads);
  }
  auto eval = [&] {
    Tape tape(false);
    return loss(tape).value()[0];
  };
  const double f0 = eval();
  floor = std::max(floor, loss_floor * std::abs(f0));
  GradCheck r;
  for (std::size_t k = 0; k < store.size(); ++k) {
    auto& v = store[k].value;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double x = v[i];
      v[i] = x + h;
      const double fp = eval();
      v[i] = x - h;
      const double fm = eval();
      v[i] = x;
      const double right = (fp - f0) / h, left = (f0 - fm) / h;
      if (std::abs(right - left) > 1e-2 * std::max({1e-4, std::abs(right), std::abs(left)})) {
        ++r.kinks;
        continue;
      }
      const double num = (fp - fm) / (2.0 * h);
      const double e = rel_error(grads[k][i], num, floor);
      ++r.checked;
      if (e > r.max_rel_error) {
        r.max_rel_error = e;
        r.worst = store[k].name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return r;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& x : t.data()) x = u(rng);
  return t;
}

// Sum of x ⊙ weights, so every output element carries a distinct gradient.
inline Var weighted_sum(Var x, std::mt19937_64& rng) {
  Tape& t = *x.tape;
  return ops::sum(ops::mul(x, t.constant(random_tensor(x.shape(), rng))));
}

// Worst relative gradient error per op over `seeds` random shapes.
inline std::vector<std::pair<std::string, double>> per_op_gradient_errors(std::uint64_t seeds) {
  using namespace ops;
  using OpFn = std::function<Var(Tape&, const ParameterStore&, std::mt19937_64&)>;
  struct Case {
    const char* name;
    std::function<void(ParameterStore&, std::mt19937_64&, std::size_t, std::size_t)> init;
    OpFn loss;
  };
  auto two = [](ParameterStore& s, std::mt19937_64& rng, std::size_t m, std::size_t n) {
    s.add("a", random_tensor({m, n}, rng));
    s.add("b", random_tensor({m, n}, rng));
  };
  auto one = [](ParameterStore& s, std::mt19937_64& rng, std::size_t m, std::size_t n) {
    s.add("a", random_tensor({m, n}, rng));
  };
  auto A = [](Tape& t, const ParameterStore& s) { return t.param(s, "a"); };
  auto B = [](Tape& t, const ParameterStore& s) { return t.param(s, "b"); };
  std::vector<Case> cases = {
      {"matmul_transpose", two, [&](Tape& t, const ParameterStore& s, auto& r) { return weighted_sum(matmul(A(t, s), transpose(B(t, s))), r); }},
      {"add", two, [&](Tape& t, const ParameterStore& s, auto& r) { return weighted_sum(add(A(t, s), B(t, s)), r); }},
      {"sub", two, [&](Tape& t, const ParameterStore& s, auto& r) { return weighted_sum(sub(A(t, s), B(t, s)), r); }},
      {"mul", two, [&](Tape& t, const ParameterStore& s, auto& r) { return weighted_sum(mul(A(t, s), B(t, s)), r); }},
      {"add_row_broadcast", two, [&](Tape& t, const ParameterStore& s, auto& r) { return weighted_sum(add(A(t, s), row(B(t, s), 0)), r); }},
      {"mul_scalar_broadcast", two, [&](Tape& t, const ParameterStore& s, auto& r) { return weighted_sum(mul(A(t, s), pick(B(t, s), 0)), r); }},
      {"relu", one, [&](Tape& t, const ParameterStore& s, auto& r) { return weighted_sum(relu(A(t, s)), r); }},
      {"sigmoid", one, [&](Tape& t, const ParameterStore& s, auto& r) { return weighted_sum(sigmoid(A(t, s)), r); }},
      {"tanh", one, [&](Tape& t, const ParameterStore& s, auto& r) { return weighted_sum(tanh(A(t, s)), r); }},
      {"softplus", one, [&](Tape& t, const ParameterStore& s, auto& r) { return weighted_sum(softplus(A(t, s)), r); }},
      {"square", one, [&](Tape& t, const ParameterStore& s, auto& r) { return weighted_sum(square(A(t, s)), r); }},
      {"log_floor", one, [&](Tape& t, const ParameterStore& s, auto& r) { return weighted_sum(log_floor(add_scalar(square(A(t, s)), 0.5), 1e-12), r); }},
      {"mean", one, [&](Tape& t, const ParameterStore& s, auto&) { return mean(square(A(t, s))); }},
      {"scale", one, [&](Tape& t, const ParameterStore& s, auto& r) { return weighted_sum(scale(A(t, s), -2.5), r); }},
      {"concat", two, [&](Tape& t, const ParameterStore& s, auto& r) { return weighted_sum(concat(A(t, s), B(t, s)), r); }},
      {"concat_rows", two, [&](Tape& t, const ParameterStore& s, auto& r) { return weighted_sum(concat_rows({A(t, s), B(t, s)}), r); }},
      {"slice_cols", one, [&](Tape& t, const ParameterStore& s, auto& r) { return weighted_sum(slice_cols(A(t, s), 0, 1), r); }},
      {"gather_rows", one, [&](Tape& t, const ParameterStore& s, auto& r) { return weighted_sum(gather_rows(A(t, s), {0, 0}), r); }},
      {"embedding_row", one, [&](Tape& t, const ParameterStore& s, auto& r) { return weighted_sum(embedding_row(A(t, s), 0), r); }},
      {"broadcast_rows", one, [&](Tape& t, const ParameterStore& s, auto& r) { return weighted_sum(broadcast_rows(row(A(t, s), 0), 3), r); }},
      {"mask_rows", one, [&](Tape& t, const ParameterStore& s, auto& r) {
         Var a = A(t, s);
         Mask m(a.rows(), true);
         m[0] = false;
         return weighted_sum(mask_rows(a, m), r);
       }},
      {"masked_mean_rows", one, [&](Tape& t, const ParameterStore& s, auto& r) {
         Var a = A(t, s);
         Mask m(a.rows(), false);
         m[0] = true;
         return weighted_sum(masked_mean_rows(a, m), r);
       }},
      {"masked_softmax", one, [&](Tape& t, const ParameterStore& s, auto& r) {
         Var a = A(t, s);
         Mask m(a.cols(), true);
         if (m.size() > 1) m.back() = false;
         return weighted_sum(masked_softmax(a, m), r);
       }},
      {"softmax_rows", one, [&](Tape& t, const ParameterStore& s, auto& r) { return weighted_sum(softmax_rows(A(t, s)), r); }},
      {"layer_norm", two, [&](Tape& t, const ParameterStore& s, auto& r) {
         Var b = B(t, s);
         return weighted_sum(layer_norm(A(t, s), row(b, 0), row(b, b.rows() - 1)), r);
       }},
      {"affine", two, [&](Tape& t, const ParameterStore& s, auto& r) {
         Var b = B(t, s);
         return weighted_sum(affine(A(t, s), transpose(b), row(A(t, s), 0)), r);
       }},
      {"dropout_train", one, [&](Tape& t, const ParameterStore& s, auto& r) {
         std::mt19937_64 drop(11);
         return weighted_sum(dropout(A(t, s), 0.3, true, drop), r);
       }},
  };
  std::vector<std::pair<std::string, double>> out;
  std::uniform_int_distribution<std::size_t> dim(1, 5);
  for (const auto& c : cases) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < seeds; ++seed) {
      std::mt19937_64 rng(seed * 7919 + 1);
      std::size_t m = dim(rng), n = dim(rng);
      if (std::string(c.name) == "layer_norm") n = std::max<std::size_t>(n, 2);
      if (std::string(c.name) == "affine") n = m;
      ParameterStore store;
      c.init(store, rng, m, n);
      const auto weights_seed = rng();
      auto r = check_gradients(store, [&](Tape& t) {
        std::mt19937_64 w(weights_seed);
        return c.loss(t, store, w);
      });
      worst = std::max(worst, r.max_rel_error);
    }
    out.emplace_back(c.name, worst);
  }
  return out;
}


inline Package make_pkg(std::string id, PackageKind kind, std::size_t aoi, EpochSeconds dispatched, EpochSeconds promised,
                        std::optional<EpochSeconds> finish, LatLon loc = {39.9, 116.4}) {
  Package p;
  p.id = std::move(id);
  p.kind = kind;
  p.aoi = aoi;
  p.loc = loc;
  p.dispatched_time = dispatched;
  p.promised_time = promised;
  p.finish_time = finish;
  p.weight = 1.0;
  p.volume = 2.0;
  return p;
}

// Six packages on one morning; the pickup o4 is dispatched after o1..o3 are done.
inline DailyRecord pickup_interrupt_day() {
  constexpr EpochSeconds H = 3600, M = 60;
  const EpochSeconds start = 19417LL * 86400 + 8 * H;
  DailyRecord d;
  d.courier_id = "c";
  d.date = 19417;
  auto D = PackageKind::Delivery;
  d.packages = {
      make_pkg("o1", D, 0, start, start + 4 * H, start + 10 * M, {39.90, 116.4}),
      make_pkg("o2", D, 0, start, start + 4 * H, start + 20 * M, {39.91, 116.4}),
      make_pkg("o3", D, 1, start, start + 4 * H, start + 30 * M, {39.92, 116.4}),
      make_pkg("o4", PackageKind::Pickup, 2, start + 35 * M, start + 80 * M, start + 50 * M, {39.93, 116.4}),
      make_pkg("o5", D, 1, start, start + 4 * H, start + 60 * M, {39.94, 116.4}),
      make_pkg("o6", D, 0, start, start + 4 * H, start + 70 * M, {39.95, 116.4}),
  };
  return d;
}

using Route = std::vector<std::size_t>;

inline double ref_rmse(const std::vector<double>& y, const std::vector<double>& h) {
  long double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += static_cast<long double>(y[i] - h[i]) * (y[i] - h[i]);
  return static_cast<double>(std::sqrt(s / y.size()));
}

inline double ref_mape(const std::vector<double>& y, const std::vector<double>& h) {
  long double s = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < y.size(); ++i)
    if (y[i] >= 1.0) s += std::abs(static_cast<long double>(y[i]) - h[i]) / y[i], ++n;
  return static_cast<double>(100 * s / n);
}

// Displacement of each package, found by linear search in both routes.
inline double ref_lmd(const Route& t, const Route& p) {
  double s = 0;
  for (std::size_t x : t) {
    std::size_t it = 0, ip = 0;
    while (t[it] != x) ++it;
    while (p[ip] != x) ++ip;
    s += it > ip ? static_cast<double>(it - ip) : static_cast<double>(ip - it);
  }
  return s / static_cast<double>(t.size());
}

inline double ref_hr(const Route& t, const Route& p, std::size_t k) {
  k = std::min(k, t.size());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j)
      if (t[i] == p[j]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(k);
}

inline Route random_route(std::size_t n, std::mt19937_64& rng) {
  Route r(n);
  std::iota(r.begin(), r.end(), 100);
  std::shuffle(r.begin(), r.end(), rng);
  return r;
}


// A small generated world shared by tests that need realistic samples.
struct TinyWorld {
  World world;
  DateSplit split;
  std::vector<Sample> train, val, test;
  MobilityTensors mobility;
};

inline WorldConfig tiny_world_config(std::uint64_t seed = 5) {
  WorldConfig c;
  c.n_aoi = 20;
  c.grid_km = 4.0;
  c.couriers = 2;
  c.territory_aois = 6;
  c.deliveries_per_day = 10;
  c.pickup_rate_per_hour = 0.4;
  c.days = 10;
  c.seed = seed;
  return c;
}

inline TinyWorld make_tiny_world(std::uint64_t seed = 5) {
  TinyWorld t;
  t.world = generate_world(tiny_world_config(seed));
  t.split = split_by_date(simulate_all(t.world));
  SampleOptions so;
  t.train = build_samples(t.split.train, so, kTrainSampleSeed);
  t.val = build_samples(t.split.val, so, kValSampleSeed);
  t.test = build_samples(t.split.test, so, kTestSampleSeed);
  t.mobility = build_mobility(t.split.train, t.world.aois);
  return t;
}

inline ModelConfig small_model_config(const FeatureStats& st, std::size_t d = 8, std::size_t lf = 4, std::size_t lh = 4) {
  ModelConfig c;
  c.feature_dim = st.width();
  c.d_model = d;
  c.heads = 2;
  c.blocks = 2;
  c.max_history = lh;
  c.max_pending = lf;
  c.memory_slots = 5;
  return c;
}


// Teacher-forced L_main + α·L_aux for one prepared sample; dropout off.
inline Var end_to_end_loss(Tape& tape, const Model& model, const PreparedSample& ps) {
  std::mt19937_64 rng(0);
  auto fr = model.forward(tape, ps.enc, &ps.slice, DecodeMode::TeacherForced, &ps.truth->route, false, rng);
  auto l = sample_losses(tape, fr.trace, *ps.truth);
  return combined_loss(l.main, l.aux, model.alpha(tape));
}

// Encoded sample with its valid pending rows reordered: new row i holds old
// row order[i]. Padding stays in place.
inline EncodedSample permute_encoded(const EncodedSample& e, const std::vector<std::size_t>& order) {
  EncodedSample out = e;
  const std::size_t d = e.pending.cols();
  for (std::size_t i = 0; i < order.size(); ++i) {
    for (std::size_t c = 0; c < d; ++c) out.pending.at(i, c) = e.pending.at(order[i], c);
    out.pending_aoi[i] = e.pending_aoi[order[i]];
    out.pending_kind[i] = e.pending_kind[order[i]];
    out.pending_index[i] = e.pending_index[order[i]];
  }
  return out;
}

// Bundle around a freshly initialized (untrained) model for a tiny world.
inline Bundle make_bundle(const TinyWorld& tw, std::size_t d = 8, std::size_t lf = 6, std::size_t lh = 6) {
  auto stats = fit_feature_stats(tw.train, lh, lf);
  auto cfg = small_model_config(stats, d, lf, lh);
  Bundle b{stats, tw.mobility, tw.world.aois, init_model(cfg, stats, tw.train), ""};
  b.version = checkpoint_version(b.model.params());
  return b;
}

// Collects server replies from any thread.
class ReplySink {
 public:
  Reply reply() {
    return [this](const std::string& r) {
      std::lock_guard lk(mu_);
      lines_.push_back(r);
      cv_.notify_all();
    };
  }
  // Waits until `n` replies have arrived or `timeout` passes.
  std::vector<std::string> wait(std::size_t n, std::chrono::milliseconds timeout = std::chrono::seconds(60)) {
    std::unique_lock lk(mu_);
    cv_.wait_for(lk, timeout, [&] { return lines_.size() >= n; });
    return lines_;
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::vector<std::string> lines_;
};

// Sends every line over one TCP connection and reads `expect` reply lines.
inline std::vector<std::string> tcp_exchange(int port, const std::vector<std::string>& lines, std::size_t expect) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0) {
    ::close(fd);
    throw Error("connect failed");
  }
  std::string out;
  for (const auto& l : lines) out += l + '\n';
  for (std::size_t off = 0; off < out.size();) {
    const auto n = ::send(fd, out.data() + off, out.size() - off, MSG_NOSIGNAL);
    if (n <= 0) break;
    off += static_cast<std::size_t>(n);
  }
  std::vector<std::string> replies;
  std::string buf;
  char chunk[65536];
  while (replies.size() < expect) {
    const auto n = ::recv(fd, chunk, sizeof chunk, 0);
    if (n <= 0) break;
    buf.append(chunk, static_cast<std::size_t>(n));
    std::size_t pos;
    while ((pos = buf.find('\n')) != std::string::npos) {
      replies.push_back(buf.substr(0, pos));
      buf.erase(0, pos + 1);
    }
  }
  ::close(fd);
  return replies;
}

}  // namespace transpdt::testing
