#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <thread>

#include "httplib.h"
#include "jigmark/oracle.hpp"
#include "jigmark/perturb.hpp"
#include "jigmark/synth.hpp"
#include "json.hpp"

using namespace jigmark;

namespace {

std::string stub_path() {
  const char* env = std::getenv("JIGMARK_STUB");
  REQUIRE_MESSAGE(env != nullptr,
                  "JIGMARK_STUB must point at the oracle stub binary");
  return env;
}

OracleConfig pipe_config(const std::string& extra_args = "") {
  OracleConfig cfg;
  cfg.endpoint = "cmd:" + stub_path() + (extra_args.empty() ? "" : " " + extra_args);
  cfg.timeout_ms = 20000;
  cfg.retries = 2;
  return cfg;
}

/// 8-bit-exact image so PNG transport is lossless.
Image quantized(int size, uint64_t seed) {
  Rng rng = Rng::seeded(seed);
  Image img(size, size);
  for (double& v : img.values())
    v = static_cast<double>(rng.below(256)) / 255.0;
  return img;
}

}  // namespace

TEST_CASE("echo oracle returns the inputs unchanged") {
  auto client = OracleClient::open(pipe_config());
  Image a = quantized(24, 1), b = quantized(24, 2);
  std::vector<Image> out = client->transform("echo", {a, b});
  REQUIRE(out.size() == 2);
  CHECK(out[0] == a);
  CHECK(out[1] == b);
}

TEST_CASE("subprocess jpeg oracle equals the in-process codec") {
  auto client = OracleClient::open(pipe_config());
  Image img = quantized(32, 3);
  std::vector<Image> out = client->transform("jpeg:70", {img});
  Image local = jpeg_roundtrip(img, 70);
  CHECK(out[0] == local);
}

TEST_CASE("oracle_perturb keeps pairs aligned and produces n instances") {
  auto client = OracleClient::open(pipe_config());
  std::vector<std::pair<Image, Image>> pairs = {
      {quantized(16, 4), quantized(16, 5)},
      {quantized(16, 6), quantized(16, 7)}};
  std::vector<std::string> instructions = {"echo", "echo", "echo"};

  auto out = oracle_perturb(pairs, instructions, *client, 3, 11);
  REQUIRE(out.size() == 6);  // 2 pairs x 3 instances
  for (int p = 0; p < 2; ++p)
    for (int i = 0; i < 3; ++i) {
      CHECK(out[static_cast<size_t>(p * 3 + i)].first == pairs[static_cast<size_t>(p)].first);
      CHECK(out[static_cast<size_t>(p * 3 + i)].second == pairs[static_cast<size_t>(p)].second);
    }
}

TEST_CASE("oracle_perturb shuffles instructions deterministically") {
  auto client = OracleClient::open(pipe_config());
  // distinct noise levels let the applied instruction be identified
  std::vector<std::string> instructions = {"noise:0.3", "noise:0.2",
                                           "noise:0.1", "echo"};
  std::vector<std::pair<Image, Image>> pairs = {
      {quantized(16, 8), quantized(16, 9)}};

  auto a = oracle_perturb(pairs, instructions, *client, 4, 123);
  auto b = oracle_perturb(pairs, instructions, *client, 4, 123);
  REQUIRE(a.size() == 4);
  // noise draws differ per call in the stub, but the echo slot must land in
  // the same position for the same shuffle seed
  for (size_t i = 0; i < 4; ++i)
    CHECK((a[i].first == pairs[0].first) == (b[i].first == pairs[0].first));
}

TEST_CASE("pair alignment uses one request per pair") {
  // a flip transform applied per-request flips both halves or neither
  auto client = OracleClient::open(pipe_config());
  std::vector<std::pair<Image, Image>> pairs = {
      {quantized(16, 10), quantized(16, 11)}};
  auto out = oracle_perturb(pairs, {"flip"}, *client, 1, 5);
  REQUIRE(out.size() == 1);
  // both are flipped: flipping back recovers the originals
  Image back_a(16, 16), back_b(16, 16);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        back_a.at(c, y, x) = out[0].first.at(c, y, 15 - x);
        back_b.at(c, y, x) = out[0].second.at(c, y, 15 - x);
      }
  CHECK(back_a == pairs[0].first);
  CHECK(back_b == pairs[0].second);
}

TEST_CASE("shape-changing responses raise a protocol error") {
  auto client = OracleClient::open(pipe_config());
  CHECK_THROWS_AS(client->transform("shrink", {quantized(16, 12)}),
                  OracleProtocolError);
}

TEST_CASE("garbage responses raise a protocol error") {
  auto client = OracleClient::open(pipe_config());
  CHECK_THROWS_AS(client->transform("garbage", {quantized(16, 13)}),
                  OracleProtocolError);
}

TEST_CASE("a dying oracle is retried transparently") {
  namespace fs = std::filesystem;
  fs::path marker = fs::temp_directory_path() / "jigmark_oracle_fail_marker";
  fs::remove(marker);
  auto client =
      OracleClient::open(pipe_config("--fail-marker " + marker.string()));
  Image img = quantized(16, 14);
  std::vector<Image> out = client->transform("echo", {img});
  CHECK(out[0] == img);
  CHECK(fs::exists(marker));  // exactly one incarnation died
  fs::remove(marker);
}

TEST_CASE("a persistently dead oracle raises a transport error") {
  OracleConfig cfg;
  cfg.endpoint = "cmd:false";
  cfg.timeout_ms = 2000;
  cfg.retries = 1;
  auto client = OracleClient::open(cfg);
  CHECK_THROWS_AS(client->transform("echo", {quantized(16, 15)}),
                  OracleTransportError);
}

TEST_CASE("slow oracles hit the configured timeout") {
  OracleConfig cfg = pipe_config("--delay-ms 2000");
  cfg.timeout_ms = 200;
  cfg.retries = 0;
  auto client = OracleClient::open(cfg);
  CHECK_THROWS_AS(client->transform("echo", {quantized(16, 16)}),
                  OracleTransportError);
}

TEST_CASE("bad endpoint schemes are configuration errors") {
  OracleConfig cfg;
  cfg.endpoint = "ftp://nope";
  CHECK_THROWS_AS(OracleClient::open(cfg), ConfigError);
}

TEST_CASE("timeout env variable is validated") {
  setenv("JIGMARK_ORACLE_TIMEOUT_MS", "250", 1);
  CHECK(OracleConfig::timeout_from_env() == 250);
  setenv("JIGMARK_ORACLE_TIMEOUT_MS", "bogus", 1);
  CHECK_THROWS_AS(OracleConfig::timeout_from_env(), ConfigError);
  unsetenv("JIGMARK_ORACLE_TIMEOUT_MS");
  CHECK(OracleConfig::timeout_from_env(1234) == 1234);
}

TEST_CASE("http transport round-trips through a live server") {
  httplib::Server server;
  server.Post("/perturb", [](const httplib::Request& req,
                             httplib::Response& res) {
    nlohmann::json j = nlohmann::json::parse(req.body);
    nlohmann::json out;
    out["id"] = j["id"];
    out["images"] = j["images"];  // echo
    res.set_content(out.dump(), "application/json");
  });
  int port = server.bind_to_any_port("127.0.0.1");
  std::thread thread([&]() { server.listen_after_bind(); });
  server.wait_until_ready();

  OracleConfig cfg;
  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/perturb";
  cfg.timeout_ms = 10000;
  auto client = OracleClient::open(cfg);

  Image a = quantized(20, 17), b = quantized(20, 18);
  std::vector<OracleClient::Request> reqs(3);
  for (auto& r : reqs) {
    r.instruction = "noop";
    r.images = {a, b};
  }
  auto results = client->transform_many(reqs);
  REQUIRE(results.size() == 3);
  for (const auto& imgs : results) {
    REQUIRE(imgs.size() == 2);
    CHECK(imgs[0] == a);
    CHECK(imgs[1] == b);
  }

  server.stop();
  thread.join();
}

TEST_CASE("http errors surface as transport errors after retries") {
  OracleConfig cfg;
  cfg.endpoint = "http://127.0.0.1:1/perturb";  // nothing listens here
  cfg.timeout_ms = 300;
  cfg.retries = 1;
  auto client = OracleClient::open(cfg);
  CHECK_THROWS_AS(client->transform("echo", {quantized(8, 19)}),
                  OracleTransportError);
}
