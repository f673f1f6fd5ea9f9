#include "cpeft/commands.hpp"

int main(int argc, char** argv) { return cpeft::run_cli(argc, argv); }
