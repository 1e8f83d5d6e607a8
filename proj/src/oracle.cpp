#include "jigmark/oracle.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <map>
#include <thread>

#include "httplib.h"
#include "json.hpp"

namespace jigmark {

int OracleConfig::timeout_from_env(int fallback_ms) {
  const char* env = std::getenv("JIGMARK_ORACLE_TIMEOUT_MS");
  if (!env || !*env) return fallback_ms;
  char* end = nullptr;
  long v = std::strtol(env, &end, 10);
  if (end == env || v <= 0)
    throw ConfigError("JIGMARK_ORACLE_TIMEOUT_MS must be a positive integer");
  return static_cast<int>(v);
}

std::string oracle_request_json(const std::string& id,
                                const std::string& instruction,
                                const std::vector<Image>& images) {
  nlohmann::ordered_json j;
  j["id"] = id;
  j["instruction"] = instruction;
  auto arr = nlohmann::ordered_json::array();
  for (const auto& img : images) arr.push_back(base64_encode(encode_png(img)));
  j["images"] = arr;
  return j.dump();
}

std::vector<Image> oracle_parse_response(const std::string& line,
                                         const std::string& expect_id,
                                         size_t expect_count,
                                         std::string* got_id) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const std::exception& e) {
    throw OracleProtocolError(std::string("oracle: unparseable response: ") +
                              e.what());
  }
  if (!j.contains("id") || !j.contains("images"))
    throw OracleProtocolError("oracle: response missing id/images");
  std::string id = j["id"].get<std::string>();
  if (got_id) *got_id = id;
  if (!expect_id.empty() && id != expect_id)
    throw OracleProtocolError("oracle: response id mismatch");
  std::vector<Image> out;
  for (const auto& b64 : j["images"]) {
    try {
      out.push_back(decode_png(base64_decode(b64.get<std::string>())));
    } catch (const std::exception& e) {
      throw OracleProtocolError(std::string("oracle: bad image payload: ") +
                                e.what());
    }
  }
  if (expect_count != 0 && out.size() != expect_count)
    throw OracleProtocolError("oracle: response image count mismatch");
  return out;
}

std::vector<Image> OracleClient::transform(const std::string& instruction,
                                           const std::vector<Image>& images) {
  std::vector<Request> reqs(1);
  reqs[0].instruction = instruction;
  reqs[0].images = images;
  return transform_many(reqs)[0];
}

namespace {

void validate_shapes(const std::vector<Image>& in,
                     const std::vector<Image>& out) {
  if (in.size() != out.size())
    throw OracleProtocolError("oracle: image count changed");
  for (size_t i = 0; i < in.size(); ++i)
    if (in[i].height() != out[i].height() || in[i].width() != out[i].width())
      throw OracleProtocolError("oracle: image dimensions changed");
}

// ------------------------- subprocess transport -------------------------

class PipeOracle : public OracleClient {
public:
  explicit PipeOracle(const OracleConfig& cfg, std::string command)
      : cfg_(cfg), command_(std::move(command)) {
    signal(SIGPIPE, SIG_IGN);
  }

  ~PipeOracle() override { stop(); }

  std::vector<std::vector<Image>> transform_many(
      const std::vector<Request>& requests) override {
    std::vector<std::vector<Image>> results(requests.size());
    const size_t window =
        std::max<size_t>(1, static_cast<size_t>(cfg_.max_in_flight));
    for (int attempt = 0;; ++attempt) {
      try {
        run_batch(requests, results, window);
        return results;
      } catch (const OracleTransportError&) {
        stop();
        if (attempt >= cfg_.retries) throw;
      }
    }
  }

private:
  OracleConfig cfg_;
  std::string command_;
  pid_t pid_ = -1;
  int in_fd_ = -1;   // write requests here
  int out_fd_ = -1;  // read responses here
  std::string rx_buffer_;

  void start() {
    int to_child[2], from_child[2];
    if (pipe(to_child) != 0 || pipe(from_child) != 0)
      throw OracleTransportError("oracle: pipe() failed");
    pid_ = fork();
    if (pid_ < 0) throw OracleTransportError("oracle: fork() failed");
    if (pid_ == 0) {
      dup2(to_child[0], STDIN_FILENO);
      dup2(from_child[1], STDOUT_FILENO);
      close(to_child[0]);
      close(to_child[1]);
      close(from_child[0]);
      close(from_child[1]);
      execl("/bin/sh", "sh", "-c", command_.c_str(), nullptr);
      _exit(127);
    }
    close(to_child[0]);
    close(from_child[1]);
    in_fd_ = to_child[1];
    out_fd_ = from_child[0];
    fcntl(in_fd_, F_SETFL, O_NONBLOCK);
    fcntl(out_fd_, F_SETFL, O_NONBLOCK);
    rx_buffer_.clear();
  }

  void stop() {
    if (in_fd_ >= 0) close(in_fd_);
    if (out_fd_ >= 0) close(out_fd_);
    in_fd_ = out_fd_ = -1;
    if (pid_ > 0) {
      kill(pid_, SIGKILL);
      waitpid(pid_, nullptr, 0);
      pid_ = -1;
    }
  }

  void write_all(const std::string& data,
                 std::chrono::steady_clock::time_point deadline) {
    size_t off = 0;
    while (off < data.size()) {
      ssize_t n = write(in_fd_, data.data() + off, data.size() - off);
      if (n > 0) {
        off += static_cast<size_t>(n);
        continue;
      }
      if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) {
        wait_fd(in_fd_, POLLOUT, deadline);
        continue;
      }
      throw OracleTransportError("oracle: write to subprocess failed");
    }
  }

  std::string read_line(std::chrono::steady_clock::time_point deadline) {
    for (;;) {
      size_t nl = rx_buffer_.find('\n');
      if (nl != std::string::npos) {
        std::string line = rx_buffer_.substr(0, nl);
        rx_buffer_.erase(0, nl + 1);
        return line;
      }
      wait_fd(out_fd_, POLLIN, deadline);
      char buf[65536];
      ssize_t n = read(out_fd_, buf, sizeof(buf));
      if (n > 0) {
        rx_buffer_.append(buf, static_cast<size_t>(n));
      } else if (n == 0) {
        throw OracleTransportError("oracle: subprocess closed its output");
      } else if (errno != EAGAIN && errno != EWOULDBLOCK) {
        throw OracleTransportError("oracle: read from subprocess failed");
      }
    }
  }

  void wait_fd(int fd, short events,
               std::chrono::steady_clock::time_point deadline) {
    auto now = std::chrono::steady_clock::now();
    if (now >= deadline) throw OracleTransportError("oracle: timeout");
    int remaining = static_cast<int>(
        std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now)
            .count());
    pollfd p{fd, events, 0};
    int rc = poll(&p, 1, std::max(1, remaining));
    if (rc == 0) throw OracleTransportError("oracle: timeout");
    if (rc < 0) throw OracleTransportError("oracle: poll failed");
    if (p.revents & (POLLERR | POLLHUP | POLLNVAL)) {
      if (!(p.revents & POLLIN))
        throw OracleTransportError("oracle: subprocess pipe closed");
    }
  }

  void run_batch(const std::vector<Request>& requests,
                 std::vector<std::vector<Image>>& results, size_t window) {
    if (pid_ < 0) start();
    std::map<std::string, size_t> pending;  // id -> request index
    size_t next = 0, done = 0;
    auto deadline = std::chrono::steady_clock::now() +
                    std::chrono::milliseconds(cfg_.timeout_ms);
    while (done < requests.size()) {
      while (next < requests.size() && pending.size() < window) {
        std::string id = "r-" + std::to_string(next);
        write_all(oracle_request_json(id, requests[next].instruction,
                                      requests[next].images) +
                      "\n",
                  deadline);
        pending[id] = next;
        ++next;
      }
      std::string line = read_line(deadline);
      if (line.empty()) continue;
      std::string got_id;
      std::vector<Image> images = oracle_parse_response(line, "", 0, &got_id);
      auto it = pending.find(got_id);
      if (it == pending.end())
        throw OracleProtocolError("oracle: unknown response id " + got_id);
      validate_shapes(requests[it->second].images, images);
      for (auto& img : images) img.clamp01();
      results[it->second] = std::move(images);
      pending.erase(it);
      ++done;
      // fresh time budget per completed response
      deadline = std::chrono::steady_clock::now() +
                 std::chrono::milliseconds(cfg_.timeout_ms);
    }
  }
};

// ------------------------- HTTP transport -------------------------

class HttpOracle : public OracleClient {
public:
  explicit HttpOracle(const OracleConfig& cfg) : cfg_(cfg) {
    // split http://host[:port]/path
    std::string rest = cfg.endpoint.substr(7);
    size_t slash = rest.find('/');
    host_port_ = "http://" + (slash == std::string::npos ? rest : rest.substr(0, slash));
    path_ = (slash == std::string::npos) ? "/" : rest.substr(slash);
  }

  std::vector<std::vector<Image>> transform_many(
      const std::vector<Request>& requests) override {
    std::vector<std::vector<Image>> results(requests.size());
    std::vector<std::string> errors(requests.size());
    const int workers = std::max(
        1, std::min<int>(cfg_.max_in_flight,
                         static_cast<int>(requests.size())));
    std::atomic<size_t> cursor{0};
    auto work = [&]() {
      for (;;) {
        size_t i = cursor.fetch_add(1);
        if (i >= requests.size()) return;
        try {
          results[i] = call_one(i, requests[i]);
        } catch (const std::exception& e) {
          errors[i] = e.what();
        }
      }
    };
    std::vector<std::thread> pool;
    for (int t = 0; t < workers; ++t) pool.emplace_back(work);
    for (auto& th : pool) th.join();
    for (size_t i = 0; i < requests.size(); ++i)
      if (!errors[i].empty()) throw OracleTransportError(errors[i]);
    return results;
  }

private:
  OracleConfig cfg_;
  std::string host_port_, path_;

  std::vector<Image> call_one(size_t index, const Request& req) {
    std::string body = oracle_request_json("r-" + std::to_string(index),
                                           req.instruction, req.images);
    std::string last_error = "oracle: no attempt made";
    for (int attempt = 0; attempt <= cfg_.retries; ++attempt) {
      if (attempt > 0)
        std::this_thread::sleep_for(
            std::chrono::milliseconds(50 * (1 << std::min(attempt, 5))));
      httplib::Client cli(host_port_);
      cli.set_connection_timeout(0, cfg_.timeout_ms * 1000LL);
      cli.set_read_timeout(cfg_.timeout_ms / 1000, (cfg_.timeout_ms % 1000) * 1000);
      cli.set_write_timeout(cfg_.timeout_ms / 1000, (cfg_.timeout_ms % 1000) * 1000);
      auto res = cli.Post(path_, body, "application/json");
      if (!res) {
        last_error = "oracle: HTTP request failed (" +
                     httplib::to_string(res.error()) + ")";
        continue;
      }
      if (res->status != 200) {
        last_error = "oracle: HTTP status " + std::to_string(res->status);
        continue;
      }
      std::vector<Image> images = oracle_parse_response(
          res->body, "r-" + std::to_string(index), req.images.size());
      validate_shapes(req.images, images);
      for (auto& img : images) img.clamp01();
      return images;
    }
    throw OracleTransportError(last_error);
  }
};

}  // namespace

std::unique_ptr<OracleClient> OracleClient::open(const OracleConfig& cfg) {
  if (cfg.endpoint.rfind("cmd:", 0) == 0)
    return std::make_unique<PipeOracle>(cfg, cfg.endpoint.substr(4));
  if (cfg.endpoint.rfind("http://", 0) == 0)
    return std::make_unique<HttpOracle>(cfg);
  throw ConfigError("oracle endpoint must start with cmd: or http:// : " +
                    cfg.endpoint);
}

std::vector<std::pair<Image, Image>> oracle_perturb(
    const std::vector<std::pair<Image, Image>>& pairs,
    const std::vector<std::string>& instructions, OracleClient& client,
    int instance_count, uint64_t seed) {
  if (instance_count < 1)
    throw std::invalid_argument("oracle_perturb: instance_count must be >= 1");
  if (instructions.empty())
    throw std::invalid_argument("oracle_perturb: no instructions");

  // instructions shuffled relative to the images, so an image is edited
  // with an instruction written for some other image
  std::vector<std::string> shuffled = instructions;
  Rng rng = Rng::seeded(seed);
  rng.shuffle(shuffled);

  std::vector<OracleClient::Request> reqs;
  reqs.reserve(pairs.size() * static_cast<size_t>(instance_count));
  size_t next_instruction = 0;
  for (const auto& pr : pairs)
    for (int inst = 0; inst < instance_count; ++inst) {
      OracleClient::Request r;
      r.instruction = shuffled[next_instruction++ % shuffled.size()];
      r.images = {pr.first, pr.second};
      reqs.push_back(std::move(r));
    }

  std::vector<std::vector<Image>> responses = client.transform_many(reqs);
  std::vector<std::pair<Image, Image>> out;
  out.reserve(responses.size());
  for (auto& resp : responses) {
    if (resp.size() != 2)
      throw OracleProtocolError("oracle_perturb: expected image pair back");
    out.emplace_back(std::move(resp[0]), std::move(resp[1]));
  }
  return out;
}

}  // namespace jigmark
