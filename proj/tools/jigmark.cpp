#include "jigmark/cli.hpp"

int main(int argc, char** argv) { return jigmark::cli::run(argc, argv); }
