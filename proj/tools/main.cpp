#include "anglekit/cli.hpp"

int main(int argc, char** argv) { return anglekit::cli::run(argc, argv); }
