#include "mcls/cli.hpp"

int main(int argc, char** argv) { return mcls::cli::run(argc, argv); }
