#include "swp/cli.hpp"

int main(int argc, char** argv) { return swp::cli::run(argc, argv); }
