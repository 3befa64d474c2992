#include "scrl_cli/cli.hpp"

int main(int argc, char** argv) { return scrl::cli::run(argc, argv); }
