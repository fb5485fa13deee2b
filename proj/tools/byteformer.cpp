#include "byteformer/cli.hpp"

int main(int argc, char** argv) { return byteformer::run_cli(argc, argv); }
