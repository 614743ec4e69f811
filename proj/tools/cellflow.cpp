#include "cellflow/cli.hpp"

int main(int argc, char** argv) { return cellflow::cli_main(argc, argv); }
