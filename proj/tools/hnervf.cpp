#include "hnervf/cli.hpp"

int main(int argc, char** argv) { return hnervf::cli::run(argc, argv); }
