#include "mhim/cli.hpp"

int main(int argc, char** argv) { return mhim::run_cli(argc, argv); }
