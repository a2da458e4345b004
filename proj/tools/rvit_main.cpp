#include "rvit/cli.hpp"

int main(int argc, char** argv) { return rvit::run_cli(argc, argv); }
