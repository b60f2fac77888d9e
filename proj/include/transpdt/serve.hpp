#pragma once

// Batch-inference service. Readers parse and validate request lines and push
// them onto one bounded queue; a single executor thread drains it in batches
// of up to `max_batch` requests, or whatever is queued once `flush` has passed
// since the oldest waiting request arrived.
//
// Transport is line-delimited JSON over TCP on 127.0.0.1 (see pipeline.hpp for
// the message schemas). Extra ops besides "predict":
//   {"op":"reload","mobility":PATH}  swap mobility tensors (executor-ordered)
//   {"op":"stats"}                   batch and request counters

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <thread>

#include "transpdt/pipeline.hpp"

namespace transpdt {

struct ServeOptions {
  std::size_t max_batch = 16;
  std::chrono::milliseconds flush{20};
  std::size_t queue_capacity = 4096;
  int retry_after_ms = 50;
};

struct ServeCounters {
  std::size_t batches = 0;  // model executions
  std::size_t predictions = 0;
  std::size_t errors = 0;
  std::size_t rejected = 0;
  std::size_t max_batch_seen = 0;
};

using Reply = std::function<void(const std::string&)>;

// Runs every sample of a batch through the model. Samples never share state,
// so the result for one request does not depend on its batch mates.
inline std::vector<Prediction> predict_batch(const Bundle& b, const std::vector<Sample>& batch) {
  std::vector<Prediction> out;
  out.reserve(batch.size());
  for (const auto& s : batch) out.push_back(predict_sample(b, s));
  return out;
}

class BatchServer {
 public:
  BatchServer(Bundle bundle, ServeOptions opt) : bundle_(std::move(bundle)), opt_(opt) {
    if (opt_.max_batch == 0) throw ConfigError("max_batch must be positive");
    if (opt_.queue_capacity == 0) throw ConfigError("queue_capacity must be positive");
    executor_ = std::thread([this] { run_executor(); });
  }

  ~BatchServer() { stop(); }

  BatchServer(const BatchServer&) = delete;
  BatchServer& operator=(const BatchServer&) = delete;

  // Handles one request line. `reply` is called exactly once, possibly from
  // the executor thread.
  void submit(const std::string& line, Reply reply) {
    Json req;
    try {
      req = Json::parse(line);
    } catch (const Json::exception& e) {
      count_error();
      reply(error_response(nullptr, std::string("malformed JSON: ") + e.what()).dump());
      return;
    }
    const Json id = req.is_object() && req.contains("request_id") ? req["request_id"] : Json(nullptr);
    const std::string op = req.is_object() ? req.value("op", "predict") : "";
    if (op == "stats") {
      reply(stats_json(id).dump());
      return;
    }
    Job job{id, std::move(reply), {}, {}, std::chrono::steady_clock::now()};
    try {
      if (op == "predict") {
        job.sample = request_to_sample(req, bundle_.aois);
      } else if (op == "reload") {
        job.reload_path = req.at("mobility").get<std::string>();
      } else {
        throw ParseError("unknown op '" + op + "'");
      }
    } catch (const std::exception& e) {
      count_error();
      job.reply(error_response(id, e.what()).dump());
      return;
    }
    {
      std::unique_lock lk(mu_);
      if (stopping_ || queue_.size() >= opt_.queue_capacity) {
        ++counters_.rejected;
        const bool closing = stopping_;
        lk.unlock();
        Json err = error_response(id, closing ? "server shutting down" : "queue full");
        err["retry_after_ms"] = opt_.retry_after_ms;
        job.reply(err.dump());
        return;
      }
      queue_.push_back(std::move(job));
    }
    cv_.notify_all();
  }

  ServeCounters counters() const {
    std::lock_guard lk(mu_);
    return counters_;
  }

  // Drains queued work, then joins the executor and closes the listener.
  void stop() {
    {
      std::lock_guard lk(mu_);
      if (stopping_ && !executor_.joinable()) return;
      stopping_ = true;
    }
    cv_.notify_all();
    if (executor_.joinable()) executor_.join();
    close_listener();
  }

  // Binds 127.0.0.1:`port` (0 picks a free port) and accepts connections on a
  // background thread. Returns the bound port.
  int listen(int port) {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw Error("socket() failed");
    int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(static_cast<std::uint16_t>(port));
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0 || ::listen(listen_fd_, 128) < 0)
      throw Error("cannot listen on 127.0.0.1:" + std::to_string(port));
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    acceptor_ = std::thread([this] { accept_loop(); });
    return ntohs(addr.sin_port);
  }

  const Bundle& bundle() const { return bundle_; }

 private:
  struct Job {
    Json id;
    Reply reply;
    std::optional<Sample> sample;
    std::optional<std::string> reload_path;
    std::chrono::steady_clock::time_point arrived;
  };

  struct Connection {
    int fd;
    std::mutex write_mu;
    ~Connection() { ::close(fd); }
    void send(const std::string& line) {
      std::lock_guard lk(write_mu);
      std::string buf = line + '\n';
      const char* p = buf.data();
      std::size_t left = buf.size();
      while (left > 0) {
        const auto n = ::send(fd, p, left, MSG_NOSIGNAL);
        if (n <= 0) return;  // peer went away; nothing left to deliver to
        p += n;
        left -= static_cast<std::size_t>(n);
      }
    }
  };

  void count_error() {
    std::lock_guard lk(mu_);
    ++counters_.errors;
  }

  Json stats_json(const Json& id) const {
    const auto c = counters();
    return Json{{"version", kProtocolVersion}, {"request_id", id},          {"batches", c.batches},
                {"predictions", c.predictions}, {"errors", c.errors},       {"rejected", c.rejected},
                {"max_batch", c.max_batch_seen}, {"model_version", bundle_.version}};
  }

  void run_executor() {
    for (;;) {
      std::vector<Job> batch;
      {
        std::unique_lock lk(mu_);
        cv_.wait(lk, [&] { return stopping_ || !queue_.empty(); });
        if (queue_.empty()) return;
        if (queue_.front().reload_path) {
          batch.push_back(std::move(queue_.front()));
          queue_.pop_front();
        } else {
          const auto deadline = queue_.front().arrived + opt_.flush;
          cv_.wait_until(lk, deadline, [&] { return stopping_ || predict_prefix() >= opt_.max_batch; });
          while (!queue_.empty() && !queue_.front().reload_path && batch.size() < opt_.max_batch) {
            batch.push_back(std::move(queue_.front()));
            queue_.pop_front();
          }
        }
      }
      execute(batch);
    }
  }

  // Predict jobs at the head of the queue, up to the next reload.
  std::size_t predict_prefix() const {
    std::size_t n = 0;
    for (const auto& j : queue_) {
      if (j.reload_path) break;
      ++n;
    }
    return n;
  }

  void execute(std::vector<Job>& batch) {
    if (batch.size() == 1 && batch.front().reload_path) {
      auto& job = batch.front();
      try {
        auto m = load_mobility(*job.reload_path);
        if (m.n_aoi() != bundle_.aois.size()) throw ValidationError("mobility AOI count differs from the AOI table");
        bundle_.mobility = std::move(m);
        job.reply(Json{{"version", kProtocolVersion}, {"request_id", job.id}, {"reloaded", *job.reload_path}}.dump());
      } catch (const std::exception& e) {
        count_error();
        job.reply(error_response(job.id, e.what()).dump());
      }
      return;
    }
    std::vector<Sample> samples;
    for (auto& j : batch) samples.push_back(std::move(*j.sample));
    std::vector<std::string> out(batch.size());
    std::size_t failed = 0;
    try {
      auto preds = predict_batch(bundle_, samples);
      for (std::size_t i = 0; i < batch.size(); ++i)
        out[i] = prediction_response(batch[i].id, samples[i], preds[i], bundle_.version).dump();
    } catch (const std::exception&) {
      // Fall back to one-by-one so a bad request only fails itself.
      for (std::size_t i = 0; i < batch.size(); ++i) {
        try {
          out[i] = prediction_response(batch[i].id, samples[i], predict_sample(bundle_, samples[i]), bundle_.version).dump();
        } catch (const std::exception& e) {
          out[i] = error_response(batch[i].id, e.what()).dump();
          ++failed;
        }
      }
    }
    {
      std::lock_guard lk(mu_);
      ++counters_.batches;
      counters_.predictions += batch.size() - failed;
      counters_.errors += failed;
      counters_.max_batch_seen = std::max(counters_.max_batch_seen, batch.size());
    }
    for (std::size_t i = 0; i < batch.size(); ++i) batch[i].reply(out[i]);
  }

  void accept_loop() {
    for (;;) {
      const int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) return;
      auto conn = std::make_shared<Connection>();
      conn->fd = fd;
      std::lock_guard lk(conn_mu_);
      conns_.push_back(conn);
      readers_.emplace_back([this, conn] { read_loop(conn); });
    }
  }

  void read_loop(std::shared_ptr<Connection> conn) {
    std::string pending;
    char buf[65536];
    for (;;) {
      const auto n = ::recv(conn->fd, buf, sizeof buf, 0);
      if (n <= 0) return;
      pending.append(buf, static_cast<std::size_t>(n));
      std::size_t pos;
      while ((pos = pending.find('\n')) != std::string::npos) {
        std::string line = pending.substr(0, pos);
        pending.erase(0, pos + 1);
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        submit(line, [conn](const std::string& r) { conn->send(r); });
      }
    }
  }

  void close_listener() {
    if (listen_fd_ >= 0) {
      ::shutdown(listen_fd_, SHUT_RDWR);
      ::close(listen_fd_);
      listen_fd_ = -1;
    }
    if (acceptor_.joinable()) acceptor_.join();
    std::lock_guard lk(conn_mu_);
    for (auto& c : conns_) ::shutdown(c->fd, SHUT_RDWR);
    for (auto& t : readers_) t.join();
    readers_.clear();
    conns_.clear();
  }

  Bundle bundle_;
  ServeOptions opt_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Job> queue_;
  ServeCounters counters_;
  bool stopping_ = false;
  std::thread executor_;
  int listen_fd_ = -1;
  std::thread acceptor_;
  std::mutex conn_mu_;
  std::vector<std::shared_ptr<Connection>> conns_;
  std::vector<std::thread> readers_;
};

}  // namespace transpdt
