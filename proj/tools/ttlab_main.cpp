#include "ttlab/harness.hpp"

int main(int argc, char** argv) { return ttlab::harness::run_cli(argc, argv); }
