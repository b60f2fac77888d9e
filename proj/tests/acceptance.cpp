// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//
//   acceptance            run every criterion
//   acceptance 3 5        run only the listed criteria

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "support.hpp"

using namespace transpdt;
using namespace transpdt::testing;
using namespace std::chrono_literals;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  // Records one sub-check; the criterion passes only if all of them do.
  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    if (detail.tellp() > 0) detail << "; ";
    detail << (ok ? "" : "failed: ") << what;
  }
};

std::string fmt(double x, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << x;
  return os.str();
}

const TinyWorld& tiny() {
  static const TinyWorld tw = make_tiny_world(31);
  return tw;
}

std::vector<const Sample*> all_samples(const TinyWorld& tw) {
  std::vector<const Sample*> v;
  for (const auto* set : {&tw.train, &tw.val, &tw.test})
    for (const auto& s : *set) v.push_back(&s);
  return v;
}

ForwardResult greedy(Tape& tape, const Model& m, const EncodedSample& e, const MobilitySlice* slice) {
  std::mt19937_64 rng(0);
  return m.forward(tape, e, slice, DecodeMode::Greedy, nullptr, false, rng);
}

// 1. End-to-end and per-op gradients against central differences.
void gradient_integrity(Outcome& o) {
  const auto t0 = Clock::now();
  const auto& tw = tiny();
  const auto stats = fit_feature_stats(tw.train, 4, 4);
  std::vector<const Sample*> usable;
  for (const auto& s : tw.train)
    if (s.pending.size() >= 3 && !s.history.empty()) usable.push_back(&s);
  double worst = 0.0;
  std::size_t checked = 0;
  std::string where;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto cfg = small_model_config(stats, 8, 4, 4);
    cfg.dropout = 0.0;
    cfg.seed = seed;
    Model m(cfg);
    m.set_time_bias_minutes(mean_offset_minutes(tw.train));
    const auto ps = prepare_sample(*usable[(seed * 37) % usable.size()], stats, tw.mobility, cfg);
    const auto r = check_gradients(m.params(), [&](Tape& t) { return end_to_end_loss(t, m, ps); }, 1e-5, 1e-6, 1e-7);
    checked += r.checked;
    if (r.max_rel_error > worst) worst = r.max_rel_error, where = r.worst;
  }
  double op_worst = 0.0;
  std::string op_name;
  for (const auto& [name, e] : per_op_gradient_errors(100))
    if (e >= op_worst) op_worst = e, op_name = name;
  const double secs = seconds_since(t0);
  o.require(worst < 1e-3, "end-to-end max rel err " + fmt(worst) + " < 1e-3 over 20 seeds (" + std::to_string(checked) +
                              " elements, worst " + where + ")");
  o.require(op_worst < 1e-4, "per-op max rel err " + fmt(op_worst) + " < 1e-4 (" + op_name + ")");
  o.require(secs < 120.0, "runtime " + fmt(secs, 3) + " s < 120 s");
}

// 2. Step probabilities and greedy routes over 1000 traces.
void probability_invariants(Outcome& o) {
  const auto& tw = tiny();
  const auto samples = all_samples(tw);
  const std::size_t lf = 6;
  const auto stats = fit_feature_stats(tw.train, 4, lf);
  std::size_t traces = 0, sum_violations = 0, zero_violations = 0, perm_violations = 0;
  double worst_sum = 0.0;
  std::mt19937_64 pick(2024);
  for (std::uint64_t seed = 0; traces < 1000; ++seed) {
    auto cfg = small_model_config(stats, 8, lf, 4);
    cfg.seed = seed;
    cfg.use_mobility = seed % 2 == 0;
    Model m(cfg);
    for (int k = 0; k < 50 && traces < 1000; ++k, ++traces) {
      const Sample& s = *samples[pick() % samples.size()];
      const auto ps = prepare_sample(s, stats, tw.mobility, cfg);
      Tape tape(false);
      const auto r = greedy(tape, m, ps.enc, &ps.slice);
      const std::size_t n = ps.enc.n_pending();
      std::vector<bool> emitted(lf, false);
      for (const auto& st : r.trace.steps) {
        double sum = 0.0;
        for (std::size_t i = 0; i < lf; ++i) {
          const bool open = i < n && !emitted[i];
          if (open != st.available[i]) ++zero_violations;
          if (open) sum += st.probs[i];
          else if (st.probs[i] != 0.0) ++zero_violations;
        }
        worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
        if (std::abs(sum - 1.0) > 1e-9) ++sum_violations;
        if (st.chosen < lf) emitted[st.chosen] = true;
      }
      auto route = r.trace.route();
      std::sort(route.begin(), route.end());
      for (std::size_t i = 0; i < route.size(); ++i)
        if (route[i] != i) {
          ++perm_violations;
          break;
        }
      if (route.size() != n) ++perm_violations;
    }
  }
  o.require(sum_violations == 0, "sums within 1e-9 (worst " + fmt(worst_sum, 3) + ")");
  o.require(zero_violations == 0, std::to_string(zero_violations) + " nonzero masked probabilities");
  o.require(perm_violations == 0, std::to_string(perm_violations) + " invalid routes in " + std::to_string(traces) + " traces");
}

// 3. Permuting the pending set permutes T_f, Mem and the first-step scores.
void equivariance(Outcome& o) {
  const auto& tw = tiny();
  const std::size_t lf = 8, d = 8;
  const auto stats = fit_feature_stats(tw.train, 4, lf);
  std::vector<const Sample*> usable;
  for (const auto* s : all_samples(tw))
    if (s->pending.size() >= 3) usable.push_back(s);
  double worst = 0.0;
  std::size_t cases = 0;
  std::mt19937_64 rng(3);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto cfg = small_model_config(stats, d, lf, 4);
    cfg.seed = seed;
    cfg.use_mobility = false;
    Model m(cfg);
    for (int k = 0; k < 10; ++k, ++cases) {
      const auto ps = prepare_sample(*usable[rng() % usable.size()], stats, tw.mobility, cfg);
      const std::size_t n = ps.enc.n_pending();
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      Tape t1(false), t2(false);
      const auto a = greedy(t1, m, ps.enc, nullptr);
      const auto b = greedy(t2, m, permute_encoded(ps.enc, order), nullptr);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < d; ++c)
          worst = std::max(worst, std::abs(b.pending.value().at(i, c) - a.pending.value().at(order[i], c)));
        for (std::size_t c = 0; c < a.memory.value().cols(); ++c)
          worst = std::max(worst, std::abs(b.memory.value().at(i, c) - a.memory.value().at(order[i], c)));
        worst = std::max(worst,
                         std::abs(b.trace.steps[0].intermediate[i] - a.trace.steps[0].intermediate[order[i]]));
      }
    }
  }
  o.require(worst <= 1e-9, "max deviation " + fmt(worst, 3) + " <= 1e-9 over " + std::to_string(cases) + " permutations");
}

// 4. Metrics against brute-force references plus the worked examples.
void metric_oracles(Outcome& o) {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<std::size_t> len(1, 25);
  std::uniform_real_distribution<double> minutes(0.0, 300.0);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = len(rng);
    std::vector<double> y(n), h(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = minutes(rng) + 1.0, h[i] = minutes(rng);
    worst = std::max(worst, std::abs(rmse(y, h) - ref_rmse(y, h)));
    worst = std::max(worst, std::abs(mape(y, h) - ref_mape(y, h)) / std::max(1.0, ref_mape(y, h)));
    const auto t = random_route(n, rng), p = random_route(n, rng);
    worst = std::max(worst, std::abs(lmd(t, p) - ref_lmd(t, p)));
    for (std::size_t k : {1, 3, 5}) worst = std::max(worst, std::abs(hr_at_k(t, p, k) - ref_hr(t, p, k)));
  }
  o.require(worst <= 1e-12, "max deviation " + fmt(worst, 3) + " <= 1e-12 over 1000 instances");
  o.require(lmd({1, 2, 3}, {2, 1, 3}) == 2.0 / 3.0, "LMD example = 2/3");
  o.require(hr_at_k({1, 2, 3, 4}, {2, 1, 4, 3}, 3) == 2.0 / 3.0, "HR@3 example = 2/3");
}

// 5. The o1..o6 day splits at the pickup.
void route_splitting(Outcome& o) {
  const auto day = pickup_interrupt_day();
  const auto segs = split_segments(day);
  auto ids = [](const RouteSegment& s) {
    std::string out;
    for (const auto& p : s.packages) out += (out.empty() ? "" : ",") + p.id;
    return out;
  };
  o.require(segs.size() == 2, std::to_string(segs.size()) + " segments");
  if (segs.size() == 2) {
    o.require(ids(segs[0]) == "o1,o2,o3", "first segment " + ids(segs[0]));
    o.require(ids(segs[1]) == "o4,o5,o6", "second segment " + ids(segs[1]));
    o.require(segs[1].start == day.packages[3].dispatched_time, "second segment starts at o4 dispatch");
  }
}

bool has_pickup(const Sample& s) {
  for (const auto& p : s.pending)
    if (!p.is_delivery()) return true;
  return false;
}

// 6. Relative ordering against baselines and ablations on the default world.
void relative_ordering(Outcome& o) {
  const auto t0 = Clock::now();
  const auto world = generate_world(WorldConfig{});
  const auto split = split_by_date(simulate_all(world));
  const auto mobility = build_mobility(split.train, world.aois);
  RunConfig cfg;
  cfg.model.d_model = 32;
  cfg.model.heads = 4;
  cfg.model.blocks = 2;
  cfg.model.memory_slots = 20;
  cfg.train.batch_size = 32;
  cfg.train.lr = 1e-3;
  cfg.train.epochs = 10;
  cfg.max_train_samples = 2000;
  cfg.max_eval_samples = 400;
  const auto samples = samples_from_split(split, cfg);
  const auto test = build_samples(split.test, cfg.samples, kTestSampleSeed);
  std::vector<Sample> pickup_test;
  for (const auto& s : test)
    if (has_pickup(s)) pickup_test.push_back(s);

  struct Run {
    EvalResult all, pickup;
  };
  auto fit = [&](const char* name, RunConfig c) {
    const auto t = fit_model(samples.train, samples.val, mobility, c);
    const auto& mc = t.model.config();
    Run r{evaluate_model(t.model, prepare_all(test, t.stats, mobility, mc)),
          evaluate_model(t.model, prepare_all(pickup_test, t.stats, mobility, mc))};
    std::cout << "    " << name << ": rmse " << fmt(r.all.rmse) << " mape " << fmt(r.all.mape) << " lmd "
              << fmt(r.all.lmd) << " hr@3 " << fmt(r.all.hr3) << " pickup-sample mape " << fmt(r.pickup.mape) << '\n';
    return r;
  };
  const Run full = fit("full", cfg);
  auto c = cfg;
  c.model.use_mobility = false;
  const Run no_mobility = fit("w/o mobility", c);
  c = cfg;
  c.model.use_memory = false;
  const Run no_memory = fit("w/o memory", c);

  // Baselines see the same kept pending rows as the model.
  const auto stats = fit_feature_stats(samples.train, cfg.model.max_history, cfg.model.max_pending);
  auto mc = cfg.model;
  mc.feature_dim = stats.width();
  const auto prepared = prepare_all(test, stats, mobility, mc);
  const auto avg = evaluate_avg(AvgBaseline::fit(samples.train), prepared);
  const auto deadline = evaluate_nearest_deadline(prepared);
  std::cout << "    avg: rmse " << fmt(avg.rmse) << " mape " << fmt(avg.mape) << "; nearest deadline: hr@3 "
            << fmt(deadline.hr3) << "; " << test.size() << " test samples, " << pickup_test.size()
            << " with a pending pickup\n";

  const double secs = seconds_since(t0);
  o.require(full.all.rmse <= 0.8 * avg.rmse, "RMSE " + fmt(full.all.rmse) + " <= 0.8 x AVG " + fmt(avg.rmse));
  o.require(full.all.mape <= 0.8 * avg.mape, "MAPE " + fmt(full.all.mape) + " <= 0.8 x AVG " + fmt(avg.mape));
  o.require(full.all.lmd < no_mobility.all.lmd,
            "LMD " + fmt(full.all.lmd) + " < w/o mobility " + fmt(no_mobility.all.lmd));
  o.require(full.pickup.mape < no_memory.pickup.mape,
            "pickup-sample MAPE " + fmt(full.pickup.mape) + " < w/o memory " + fmt(no_memory.pickup.mape));
  o.require(full.all.hr3 >= deadline.hr3, "HR@3 " + fmt(full.all.hr3) + " >= nearest deadline " + fmt(deadline.hr3));
  o.require(secs < 900.0, "runtime " + fmt(secs, 4) + " s < 900 s");
}

// 7. Memory-size and pending-length sweep, run twice.
void sweep(Outcome& o) {
  const auto& tw = tiny();
  RunConfig cfg;
  cfg.model.d_model = 8;
  cfg.model.heads = 2;
  cfg.model.blocks = 1;
  cfg.model.max_history = 6;
  cfg.train.batch_size = 16;
  cfg.train.lr = 3e-3;
  cfg.train.epochs = 1;
  const SplitSamples samples{tw.train, tw.val, tw.test};
  const std::vector<std::size_t> lm = {12, 16, 20, 24, 28}, lf = {5, 10, 15, 20, 25, 30};
  std::string tables[2];
  std::size_t rows = 0;
  for (auto& table : tables) {
    const auto r = run_sweep(samples, tw.mobility, cfg, lm, lf);
    std::ostringstream os;
    write_sweep_csv(os, r);
    table = os.str();
    rows = r.size();
  }
  std::istringstream lines(tables[0]);
  for (std::string line; std::getline(lines, line);) std::cout << "    " << line << '\n';
  o.require(rows == lm.size() + lf.size(), std::to_string(rows) + " configurations completed");
  o.require(tables[0] == tables[1], "identical tables across two runs");
}

// 8. Dynamic batching server.
void serving(Outcome& o) {
  const auto& tw = tiny();
  const auto bundle = make_bundle(tw);
  auto request = [&](std::size_t i, int id) { return sample_to_request(without_truth(tw.test[i % tw.test.size()]), id).dump(); };

  double worst = 0.0;
  {
    std::vector<Sample> batch;
    for (std::size_t i = 0; i < 32 && i < tw.test.size(); ++i) batch.push_back(without_truth(tw.test[i]));
    const auto together = predict_batch(bundle, batch);
    bool routes_equal = true;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto alone = predict_sample(bundle, batch[i]);
      routes_equal = routes_equal && alone.route == together[i].route;
      for (std::size_t k = 0; k < alone.minutes.size() && k < together[i].minutes.size(); ++k)
        worst = std::max(worst, std::abs(alone.minutes[k] - together[i].minutes[k]));
    }
    o.require(routes_equal && worst <= 1e-9, "batched vs single max deviation " + fmt(worst, 3) + " <= 1e-9");
  }
  {
    BatchServer server(make_bundle(tw), {16, 2ms, 4096, 50});
    ReplySink sink;
    const std::size_t n = 1000;
    for (std::size_t i = 0; i < n; ++i) server.submit(request(i, static_cast<int>(i)), sink.reply());
    const auto replies = sink.wait(n);
    std::set<int> ids;
    std::size_t errors = 0;
    for (const auto& r : replies) {
      const Json j = Json::parse(r);
      if (j.contains("error")) ++errors;
      ids.insert(j.at("request_id").get<int>());
    }
    server.stop();
    const auto c = server.counters();
    o.require(ids.size() == n && errors == 0 && c.rejected == 0,
              "burst of 1000: " + std::to_string(ids.size()) + " answered, " + std::to_string(errors) + " errors, " +
                  std::to_string(c.rejected) + " rejected");
  }
  {
    BatchServer server(make_bundle(tw), {4, 10s, 64, 50});
    ReplySink sink;
    for (int i = 0; i < 4; ++i) server.submit(request(static_cast<std::size_t>(i), i), sink.reply());
    const auto replies = sink.wait(4, 30s);
    const auto c = server.counters();
    o.require(replies.size() == 4 && c.batches == 1,
              "4 simultaneous requests -> " + std::to_string(c.batches) + " model execution(s)");
  }
}

std::string file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// 9. Same seed, same history and checkpoint bytes.
void determinism(Outcome& o) {
  const auto& tw = tiny();
  RunConfig cfg;
  cfg.model.d_model = 8;
  cfg.model.heads = 2;
  cfg.model.blocks = 1;
  cfg.model.max_history = 6;
  cfg.model.max_pending = 6;
  cfg.model.memory_slots = 4;
  cfg.train.batch_size = 16;
  cfg.train.lr = 3e-3;
  cfg.train.epochs = 3;
  const std::string root = (std::filesystem::temp_directory_path() / "transpdt_acceptance_determinism").string();
  std::filesystem::remove_all(root);
  std::string history[2], ckpt[2];
  for (int run = 0; run < 2; ++run) {
    const auto t = fit_model(tw.train, tw.val, tw.mobility, cfg);
    std::ostringstream os;
    write_history_csv(os, t.result);
    history[run] = os.str();
    const std::string dir = root + "/" + std::to_string(run);
    save_bundle(dir, t.model, t.stats, tw.mobility, tw.world.aois);
    ckpt[run] = file_bytes(dir + "/model.ckpt");
  }
  std::filesystem::remove_all(root);
  o.require(!history[0].empty() && history[0] == history[1], "history CSV identical");
  o.require(!ckpt[0].empty() && ckpt[0] == ckpt[1], "checkpoint bytes identical (" + std::to_string(ckpt[0].size()) + " B)");
}

struct Criterion {
  int id;
  const char* name;
  void (*run)(Outcome&);
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria = {
      {1, "gradient integrity", gradient_integrity},   {2, "probability invariants", probability_invariants},
      {3, "pending equivariance", equivariance},       {4, "metric oracles", metric_oracles},
      {5, "route splitting", route_splitting},         {6, "relative ordering", relative_ordering},
      {7, "hyperparameter sweep", sweep},              {8, "serving", serving},
      {9, "determinism", determinism},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    Outcome o;
    const auto t0 = Clock::now();
    try {
      c.run(o);
    } catch (const std::exception& e) {
      o.require(false, std::string("threw: ") + e.what());
    }
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << c.id << ". " << c.name << " (" << fmt(seconds_since(t0), 3)
              << " s): " << o.detail.str() << std::endl;
    if (!o.pass) ++failed;
  }
  return failed ? 1 : 0;
}
