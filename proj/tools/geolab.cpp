#include "geolab/cli.hpp"

int main(int argc, char** argv) { return geolab::cli::run(argc, argv); }
