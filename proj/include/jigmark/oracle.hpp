#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "jigmark/image.hpp"
#include "jigmark/util.hpp"

namespace jigmark {

/// Endpoint forms: "cmd:<shell command>" (line-delimited JSON over a
/// subprocess pipe) or "http://host[:port]/path" (JSON POST).
struct OracleConfig {
  std::string endpoint;
  int timeout_ms = 30000;  // default; env JIGMARK_ORACLE_TIMEOUT_MS overrides
  int retries = 3;
  int max_in_flight = 4;

  static int timeout_from_env(int fallback_ms = 30000);
};

/// Black-box image transformer. Requests carry {id, instruction, images};
/// every image in one request is processed with the same call parameters,
/// which is what keeps (x, x_w) pairs aligned.
class OracleClient {
public:
  virtual ~OracleClient() = default;

  /// One request; throws OracleTransportError / OracleProtocolError.
  std::vector<Image> transform(const std::string& instruction,
                               const std::vector<Image>& images);

  struct Request {
    std::string instruction;
    std::vector<Image> images;
  };
  /// Issue several requests, up to max_in_flight concurrently; results come
  /// back in request order (re-associated by id internally).
  virtual std::vector<std::vector<Image>> transform_many(
      const std::vector<Request>& requests) = 0;

  static std::unique_ptr<OracleClient> open(const OracleConfig& cfg);
};

/// Perturb (x, x_w) pairs through the oracle. Instructions are shuffled
/// relative to the images (seeded) before dispatch, and each pair produces
/// `instance_count` distinct perturbed instances. Output order:
/// pair 0 instance 0..k-1, pair 1 instance 0..k-1, ... All outputs clamped
/// to [0,1].
std::vector<std::pair<Image, Image>> oracle_perturb(
    const std::vector<std::pair<Image, Image>>& pairs,
    const std::vector<std::string>& instructions, OracleClient& client,
    int instance_count, uint64_t seed);

// wire helpers shared with the stub tool and tests
std::string oracle_request_json(const std::string& id,
                                const std::string& instruction,
                                const std::vector<Image>& images);
std::vector<Image> oracle_parse_response(const std::string& line,
                                         const std::string& expect_id,
                                         size_t expect_count,
                                         std::string* got_id = nullptr);

}  // namespace jigmark
