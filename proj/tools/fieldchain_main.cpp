#include "fieldchain/cli.hpp"

int main(int argc, char** argv) { return fieldchain::cli_main(argc, argv); }
