#pragma once

#include <string>
#include <vector>

#include "jigmark/image.hpp"

namespace jigmark::cli {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitOracle = 3;

/// Full command-line surface. Returns the process exit code.
int run(int argc, const char* const* argv);

/// Sorted PNG listing of a dataset directory.
std::vector<std::string> list_images(const std::string& dir);

/// Load an image, letterboxing to size x size with a warning when the file
/// does not already match.
Image load_image_sized(const std::string& path, int size, std::ostream& warn);

}  // namespace jigmark::cli
