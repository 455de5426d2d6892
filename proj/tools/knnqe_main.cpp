#include "knnqe/cli.hpp"

int main(int argc, char** argv) { return knnqe::run_cli(argc, argv); }
