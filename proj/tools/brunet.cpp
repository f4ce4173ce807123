#include "brunet/cli.hpp"

int main(int argc, char** argv) { return brunet::cli::run(argc, argv); }
