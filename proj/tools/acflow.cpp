#include "acflow/cli.hpp"

int main(int argc, char** argv) { return acflow::cli::run(argc, argv); }
