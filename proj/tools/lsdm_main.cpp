#include "lsdm/cli/commands.hpp"

int main(int argc, char** argv) { return lsdm::cli::run(argc, argv); }
