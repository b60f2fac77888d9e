// transpdt: generate data, train, evaluate, predict, serve and sweep.

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "transpdt/serve.hpp"

using namespace transpdt;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitConfig = 3;

KeyValueConfig load_config(const std::string& path) {
  return path.empty() ? KeyValueConfig{} : KeyValueConfig::load(path);
}

struct DataDir {
  std::vector<DailyRecord> train, val;
  AoiTable aois;
  MobilityTensors mobility;
};

DataDir load_data_dir(const std::string& dir) {
  DataDir d;
  d.aois = load_aoi_table(dir + "/aoi.csv");
  d.train = load_dataset(dir + "/train.jsonl", d.aois.size());
  d.val = load_dataset(dir + "/val.jsonl", d.aois.size());
  d.mobility = load_mobility(dir + "/mobility.bin");
  if (d.mobility.n_aoi() != d.aois.size()) throw ValidationError(dir + ": mobility tensors and AOI table disagree");
  return d;
}

void print_epoch(const EpochRecord& e) {
  std::cerr << "epoch " << e.epoch << "  loss " << e.train.total << "  alpha " << e.train.alpha << "  val rmse "
            << e.val.rmse << "  mape " << e.val.mape << "  lmd " << e.val.lmd << "  hr@3 " << e.val.hr3 << '\n';
}

int cmd_generate(const std::string& config, const std::string& out, std::optional<std::uint64_t> seed) {
  auto kv = load_config(config);
  if (seed) kv.set("seed", std::to_string(*seed));
  const auto world = generate_world(world_config_from(kv));
  const auto split = emit_dataset(world, simulate_all(world), out);
  std::cout << stats_report(split);
  return 0;
}

int cmd_train(const std::string& data, const std::string& config, const std::string& out,
              std::optional<std::size_t> epochs, std::optional<std::uint64_t> seed) {
  auto cfg = run_config_from(load_config(config));
  if (epochs) cfg.train.epochs = *epochs;
  if (seed) cfg.train.seed = *seed;
  const auto d = load_data_dir(data);
  const auto train_s = build_samples(d.train, cfg.samples, kTrainSampleSeed, cfg.max_train_samples);
  const auto val_s = build_samples(d.val, cfg.samples, kValSampleSeed, cfg.max_eval_samples);
  std::cerr << train_s.size() << " training samples, " << val_s.size() << " validation samples\n";
  auto t = fit_model(train_s, val_s, d.mobility, cfg, print_epoch);
  save_bundle(out, t.model, t.stats, d.mobility, d.aois);
  std::ofstream hist(out + "/history.csv");
  write_history_csv(hist, t.result);
  std::cerr << "best epoch " << t.result.best_epoch << ", val rmse " << t.result.best_val_rmse << "; model written to "
            << out << '\n';
  return 0;
}

int cmd_evaluate(const std::string& model_dir, const std::string& data, const std::string& baseline_data,
                 const std::string& csv, std::size_t stride, bool timing) {
  const auto b = load_bundle(model_dir);
  SampleOptions so;
  so.stride = stride;
  const auto test = build_samples(load_dataset(data, b.aois.size()), so, kTestSampleSeed);
  const auto prepared = prepare_all(test, b.stats, b.mobility, b.model.config());
  std::vector<std::pair<std::string, EvalResult>> rows;
  rows.emplace_back("transpdt", evaluate_model(b.model, prepared));
  if (!baseline_data.empty()) {
    const auto avg = AvgBaseline::fit(build_samples(load_dataset(baseline_data, b.aois.size()), so, kTrainSampleSeed));
    rows.emplace_back("avg", evaluate_avg(avg, prepared));
  }
  rows.emplace_back("nearest_deadline", evaluate_nearest_deadline(prepared));
  if (!timing)
    for (auto& r : rows) r.second.inference_seconds = 0.0;
  write_eval_table(std::cout, rows);
  if (!csv.empty()) {
    std::ofstream os(csv);
    if (!os) throw Error("cannot write " + csv);
    write_eval_csv(os, rows);
  }
  return 0;
}

int cmd_predict(const std::string& model_dir, const std::string& data, const std::string& requests,
                const std::string& out, std::size_t stride) {
  const auto b = load_bundle(model_dir);
  std::vector<Sample> samples;
  if (!data.empty()) {
    SampleOptions so;
    so.stride = stride;
    for (auto& s : build_samples(load_dataset(data, b.aois.size()), so, kTestSampleSeed)) samples.push_back(without_truth(s));
  }
  if (!requests.empty()) {
    std::ifstream is(requests);
    if (!is) throw Error("cannot open " + requests);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        samples.push_back(request_to_sample(Json::parse(line), b.aois));
      } catch (const std::exception& e) {
        throw ParseError(requests + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
  }
  const auto preds = predict_batch(b, samples);
  if (out.empty()) {
    write_predictions_csv(std::cout, samples, preds);
  } else {
    std::ofstream os(out);
    if (!os) throw Error("cannot write " + out);
    write_predictions_csv(os, samples, preds);
  }
  return 0;
}

volatile std::sig_atomic_t g_stop = 0;

int cmd_serve(const std::string& model_dir, int port, const ServeOptions& opt) {
  BatchServer server(load_bundle(model_dir), opt);
  const int bound = server.listen(port);
  std::cout << "listening on 127.0.0.1:" << bound << std::endl;
  std::signal(SIGINT, [](int) { g_stop = 1; });
  std::signal(SIGTERM, [](int) { g_stop = 1; });
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  server.stop();
  const auto c = server.counters();
  std::cerr << "served " << c.predictions << " predictions in " << c.batches << " batches; " << c.errors << " errors, "
            << c.rejected << " rejected\n";
  return 0;
}

int cmd_sweep(const std::string& data, const std::string& config, const std::vector<std::size_t>& lm,
              const std::vector<std::size_t>& lf, const std::string& csv) {
  const auto base = run_config_from(load_config(config));
  const auto d = load_data_dir(data);
  const auto test_records = load_dataset(data + "/test.jsonl", d.aois.size());
  DateSplit split{d.train, d.val, test_records};
  const auto samples = samples_from_split(split, base);
  const auto rows = run_sweep(samples, d.mobility, base, lm, lf,
                              [](const std::string& p, std::size_t v) { std::cerr << p << " = " << v << '\n'; });
  std::ostringstream table;
  write_sweep_csv(table, rows);
  std::cout << table.str();
  if (!csv.empty()) std::ofstream(csv) << table.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TransPDT route and time prediction"};
  app.require_subcommand(1);

  std::string config, out, data, model_dir, csv, requests, baseline;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::size_t stride = 1;
  bool no_timing = false;
  int port = 7070;
  std::size_t batch = 16, capacity = 4096;
  int flush_ms = 20;
  std::vector<std::size_t> lm{12, 16, 20, 24, 28}, lf{5, 10, 15, 20, 25, 30};

  auto* gen = app.add_subcommand("generate", "simulate a courier world and write train/val/test datasets");
  gen->add_option("--config", config, "world config (key = value)")->check(CLI::ExistingFile);
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--seed", seed, "override the world seed");

  auto* tr = app.add_subcommand("train", "train a model on a generated data directory");
  tr->add_option("--data", data, "directory with train.jsonl, val.jsonl, aoi.csv, mobility.bin")->required()->check(CLI::ExistingDirectory);
  tr->add_option("--config", config, "training config (key = value)")->check(CLI::ExistingFile);
  tr->add_option("--out", out, "model directory to write")->required();
  tr->add_option("--epochs", epochs, "override the epoch budget (0 writes the initial parameters)");
  tr->add_option("--seed", seed, "override the training seed");

  auto* ev = app.add_subcommand("evaluate", "score a model on a dataset file");
  ev->add_option("--model", model_dir, "model directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--data", data, "dataset file to evaluate on")->required()->check(CLI::ExistingFile);
  ev->add_option("--baseline-data", baseline, "dataset file to fit the AVG baseline on")->check(CLI::ExistingFile);
  ev->add_option("--csv", csv, "also write the report as CSV");
  ev->add_option("--stride", stride, "query every n-th completion")->check(CLI::PositiveNumber);
  ev->add_flag("--no-timing", no_timing, "report zero inference time so the output is reproducible");

  auto* pr = app.add_subcommand("predict", "offline predictions as CSV");
  pr->add_option("--model", model_dir, "model directory")->required()->check(CLI::ExistingDirectory);
  pr->add_option("--data", data, "dataset file; ground truth is ignored")->check(CLI::ExistingFile);
  pr->add_option("--requests", requests, "file of predict requests, one JSON object per line")->check(CLI::ExistingFile);
  pr->add_option("--out", out, "CSV output (default stdout)");
  pr->add_option("--stride", stride, "query every n-th completion")->check(CLI::PositiveNumber);

  auto* sv = app.add_subcommand("serve", "line-delimited JSON prediction service on 127.0.0.1");
  sv->add_option("--model", model_dir, "model directory")->required()->check(CLI::ExistingDirectory);
  sv->add_option("--port", port, "TCP port (0 picks one)")->check(CLI::Range(0, 65535));
  sv->add_option("--batch", batch, "maximum requests per model execution")->check(CLI::PositiveNumber);
  sv->add_option("--flush-ms", flush_ms, "flush a partial batch after this many milliseconds")->check(CLI::NonNegativeNumber);
  sv->add_option("--capacity", capacity, "queue capacity before requests are rejected")->check(CLI::PositiveNumber);

  auto* sw = app.add_subcommand("sweep", "train over memory sizes and pending lengths; emit a comparison table");
  sw->add_option("--data", data, "generated data directory")->required()->check(CLI::ExistingDirectory);
  sw->add_option("--config", config, "training config (key = value)")->check(CLI::ExistingFile);
  sw->add_option("--memory-slots", lm, "values of L_m");
  sw->add_option("--max-pending", lf, "values of L_f");
  sw->add_option("--csv", csv, "also write the table to this file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*gen) return cmd_generate(config, out, seed);
    if (*tr) return cmd_train(data, config, out, epochs, seed);
    if (*ev) return cmd_evaluate(model_dir, data, baseline, csv, stride, !no_timing);
    if (*pr) {
      if (data.empty() && requests.empty()) {
        std::cerr << "predict: give --data or --requests\n";
        return kExitUsage;
      }
      return cmd_predict(model_dir, data, requests, out, stride);
    }
    if (*sv) {
      ServeOptions opt;
      opt.max_batch = batch;
      opt.flush = std::chrono::milliseconds(flush_ms);
      opt.queue_capacity = capacity;
      return cmd_serve(model_dir, port, opt);
    }
    if (*sw) return cmd_sweep(data, config, lm, lf, csv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
