#include "scl_lle/cli.hpp"

int main(int argc, char** argv) { return scl_lle::cli::run_cli(argc, argv); }
