// Line-delimited JSON oracle over stdin/stdout. The instruction selects the
// transform, so one stub covers every oracle scenario the tests need:
//   echo            return inputs unchanged
//   jpeg:<q>        codec round-trip at quality q
//   noise:<std>     additive gaussian noise
//   flip            horizontal flip
//   shrink          return half-size images (protocol violation on purpose)
//   garbage         emit an unparseable line (protocol violation on purpose)
// Flags: --default <instruction>  fallback when the instruction is unknown
//        --delay-ms <n>           sleep before each response
//        --fail-first <n>         exit before answering the first n requests
//        --fail-marker <path>     die on the first request unless the marker
//                                 file exists (creates it), so exactly one
//                                 incarnation fails across client retries

#include <chrono>
#include <cstring>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>

#include "jigmark/image.hpp"
#include "jigmark/perturb.hpp"
#include "jigmark/util.hpp"
#include "json.hpp"

using namespace jigmark;

namespace {

Image transform(const Image& img, const std::string& instruction,
                uint64_t seed) {
  if (instruction.rfind("jpeg:", 0) == 0) {
    PerturbationSpec s;
    s.kind = PerturbKind::kJpeg;
    s.jpeg_quality = std::stoi(instruction.substr(5));
    return apply_perturbation(s, img, seed);
  }
  if (instruction.rfind("noise:", 0) == 0) {
    PerturbationSpec s;
    s.kind = PerturbKind::kGaussianNoise;
    s.noise_std = std::stod(instruction.substr(6));
    return apply_perturbation(s, img, seed);
  }
  if (instruction == "flip") {
    Image out(img.height(), img.width());
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x)
          out.at(c, y, x) = img.at(c, y, img.width() - 1 - x);
    return out;
  }
  if (instruction == "shrink")
    return resize_bilinear(img, std::max(1, img.height() / 2),
                           std::max(1, img.width() / 2));
  return img;  // echo
}

}  // namespace

int main(int argc, char** argv) {
  std::string fallback = "echo";
  std::string fail_marker;
  int delay_ms = 0;
  int fail_first = 0;
  for (int i = 1; i < argc; ++i) {
    if (!std::strcmp(argv[i], "--default") && i + 1 < argc)
      fallback = argv[++i];
    else if (!std::strcmp(argv[i], "--delay-ms") && i + 1 < argc)
      delay_ms = std::stoi(argv[++i]);
    else if (!std::strcmp(argv[i], "--fail-first") && i + 1 < argc)
      fail_first = std::stoi(argv[++i]);
    else if (!std::strcmp(argv[i], "--fail-marker") && i + 1 < argc)
      fail_marker = argv[++i];
  }

  std::string line;
  uint64_t counter = 0;
  while (std::getline(std::cin, line)) {
    if (line.empty()) continue;
    if (fail_first > 0) {
      --fail_first;
      return 9;  // die mid-conversation; the client should retry
    }
    if (!fail_marker.empty()) {
      std::ifstream probe(fail_marker);
      if (!probe.good()) {
        std::ofstream touch(fail_marker);
        return 9;
      }
    }
    if (delay_ms > 0)
      std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms));

    nlohmann::json req = nlohmann::json::parse(line);
    std::string id = req.at("id").get<std::string>();
    std::string instruction = req.value("instruction", fallback);
    if (instruction.empty()) instruction = fallback;

    if (instruction == "garbage") {
      std::cout << "this is not json\n" << std::flush;
      continue;
    }

    nlohmann::ordered_json resp;
    resp["id"] = id;
    auto arr = nlohmann::ordered_json::array();
    for (const auto& b64 : req.at("images")) {
      Image img = decode_png(base64_decode(b64.get<std::string>()));
      Image out = transform(img, instruction, derive_seed(0x57ab, counter++));
      arr.push_back(base64_encode(encode_png(out)));
    }
    resp["images"] = arr;
    std::cout << resp.dump() << "\n" << std::flush;
  }
  return 0;
}
